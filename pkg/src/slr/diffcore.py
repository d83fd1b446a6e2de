"""Differentiation core: a small encoder-decoder segmenter and RMSProp with polynomial decay.

Reverse-mode differentiation is delegated to torch's autograd tape; tensors with
``requires_grad`` play the role of tracked leaves.  This module owns the
network layout, the optimizer recurrence and the checkpoint format.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class ToyNet(nn.Module):
    """Three-stage conv encoder, two-stage upsampling decoder, 1x1 head.

    Decoder stages see the matching encoder output (skip connections) and the
    head sees the input colours, which keeps object boundaries at input
    resolution.  The feature tap is the output of encoder stage 2 (H/4 x W/4).
    """

    def __init__(self, channels: tuple[int, int, int] = (8, 16, 32), seed: int = 0):
        super().__init__()
        c1, c2, c3 = channels
        self.channels = tuple(channels)
        shapes = {
            "enc1": (c1, 3, 3, 3),
            "enc2": (c2, c1, 3, 3),
            "enc3": (c3, c2, 3, 3),
            "dec1": (c2, c3 + c2, 3, 3),
            "dec2": (c1, c2 + c1, 3, 3),
            "head": (3, c1 + 3, 1, 1),
        }
        gen = torch.Generator().manual_seed(int(seed))
        for name, shape in shapes.items():
            fan_in = shape[1] * shape[2] * shape[3]
            bound = math.sqrt(6.0 / fan_in)
            w = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
            if name == "head":
                w = w * 0.1
            self.register_parameter(name + "_w", nn.Parameter(w.float()))
            self.register_parameter(name + "_b", nn.Parameter(torch.zeros(shape[0])))

    def layer(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        return getattr(self, name + "_w"), getattr(self, name + "_b")

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``x``: (B, 3, H, W).  Returns (features (B, C, H/4, W/4), logits (B, 3, H, W))."""
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ShapeError(f"image size {tuple(x.shape[-2:])} not divisible by 4")

        def conv(t, name):
            w, b = self.layer(name)
            return F.conv2d(t, w, b, padding=w.shape[-1] // 2)

        def up(t, like):
            return F.interpolate(t, size=like.shape[-2:], mode="bilinear", align_corners=False)

        e1 = F.max_pool2d(F.relu(conv(x, "enc1")), 2)
        e2 = F.max_pool2d(F.relu(conv(e1, "enc2")), 2)
        e3 = F.max_pool2d(F.relu(conv(e2, "enc3")), 2)
        d1 = F.relu(conv(torch.cat([up(e3, e2), e2], 1), "dec1"))
        d2 = F.relu(conv(torch.cat([up(d1, e1), e1], 1), "dec2"))
        logits = conv(torch.cat([up(d2, x), x], 1), "head")
        return e2, logits


def to_batch(images) -> torch.Tensor:
    """(H, W, 3) or (B, H, W, 3) arrays -> (B, 3, H, W) float tensor."""
    t = torch.as_tensor(np.asarray(images))
    if t.ndim == 3:
        t = t[None]
    return t.permute(0, 3, 1, 2).to(torch.get_default_dtype()).contiguous()


@dataclass
class ForwardResult:
    features: torch.Tensor  # (B, h, w, C)
    logits: torch.Tensor  # (B, H, W, 3)
    probs: torch.Tensor  # (B, H, W, 3)


def forward(net: ToyNet, images, dtype: torch.dtype | None = None) -> ForwardResult:
    x = images if isinstance(images, torch.Tensor) else to_batch(images)
    if dtype is not None:
        x = x.to(dtype)
    else:
        x = x.to(next(net.parameters()).dtype)
    feats, logits = net(x)
    logits = logits.permute(0, 2, 3, 1)
    return ForwardResult(feats.permute(0, 2, 3, 1), logits, torch.softmax(logits, dim=-1))


def predict(net: ToyNet, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inference on one (H, W, 3) image: (features (h, w, C), probs (H, W, 3)) as float64 arrays."""
    with torch.no_grad():
        out = forward(net, image)
    return out.features[0].double().numpy(), out.probs[0].double().numpy()


class TorchModel:
    """Adapter exposing ``predict(image)`` for pseudo-label estimation and evaluation."""

    def __init__(self, net: ToyNet):
        self.net = net

    def predict(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return predict(self.net, image)


def backward(loss: torch.Tensor) -> None:
    if loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


# --- optimizer -----------------------------------------------------------------

@dataclass
class OptimizerState:
    lr0: float = 1e-3
    total_steps: int = 1
    power: float = 0.9
    momentum: float = 0.9
    rho: float = 0.99
    eps: float = 1e-8
    step: int = 0
    square_avg: list = field(default_factory=list)
    buffers: list = field(default_factory=list)

    def lr(self) -> float:
        frac = min(self.step / max(self.total_steps, 1), 1.0)
        return self.lr0 * (1.0 - frac) ** self.power


def rmsprop_step(state: OptimizerState, params, grads=None) -> None:
    """One RMSProp-with-momentum update at the current polynomial-decay learning rate."""
    params = list(params)
    if grads is None:
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
    if not state.square_avg:
        state.square_avg = [torch.zeros_like(p) for p in params]
        state.buffers = [torch.zeros_like(p) for p in params]
    if len(state.square_avg) != len(params):
        raise ShapeError("optimizer state does not match parameter list")
    lr = state.lr()
    with torch.no_grad():
        for p, g, v, buf in zip(params, grads, state.square_avg, state.buffers):
            if g.shape != p.shape or v.shape != p.shape:
                raise ShapeError("gradient/parameter shape mismatch")
            v.mul_(state.rho).addcmul_(g, g, value=1 - state.rho)
            buf.mul_(state.momentum).add_(g / (v.sqrt() + state.eps))
            p.sub_(lr * buf)
    state.step += 1


# --- checkpoints -------------------------------------------------------------

_MAGIC = b"SLRCKPT1\n"


def save_checkpoint(net: ToyNet, path: str | Path) -> None:
    names, arrays = [], []
    for name, p in net.named_parameters():
        names.append({"name": name, "shape": list(p.shape)})
        arrays.append(p.detach().double().numpy().astype("<f4").ravel())
    header = json.dumps({"channels": list(net.channels), "params": names}).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for a in arrays:
            fh.write(a.tobytes())


def load_checkpoint(path: str | Path, net: ToyNet | None = None) -> ToyNet:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    header = json.loads(data[off:off + hlen])
    off += hlen
    if net is None:
        net = ToyNet(tuple(header["channels"]))
    params = dict(net.named_parameters())
    expected = {k: list(v.shape) for k, v in params.items()}
    got = {e["name"]: e["shape"] for e in header["params"]}
    if got != expected:
        raise CheckpointError(f"{path}: parameter shapes {got} do not match network {expected}")
    flat = np.frombuffer(data, dtype="<f4", offset=off)
    total = sum(int(np.prod(e["shape"])) for e in header["params"])
    if flat.size != total:
        raise CheckpointError(f"{path}: expected {total} floats, found {flat.size}")
    pos = 0
    with torch.no_grad():
        for e in header["params"]:
            n = int(np.prod(e["shape"]))
            params[e["name"]].copy_(torch.from_numpy(flat[pos:pos + n].copy()).reshape(e["shape"]))
            pos += n
    return net

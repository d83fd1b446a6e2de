"""Optional per-scene debug dumps of partial and pseudo labels.

``NNNN_partial.png``  indexed labels (0 water, 1 sky, 2 obstacle, 3 unlabeled)
``NNNN_weights.png``  8-bit grayscale of the partial-label weights times 255
``NNNN_pseudo.f32``   soft pseudo labels: magic line, u64 header length, JSON
                      header with the array shape, then little-endian float32 data
``NNNN_pw.png``       8-bit grayscale of the pseudo-label weights times 255
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .partial_labels import PartialLabels
from .pseudo_labels import PseudoLabels

UNLABELED = 3
PARTIAL_PALETTE = [40, 90, 200, 200, 220, 255, 255, 60, 60, 128, 128, 128]
_MAGIC = b"SLRF32\n"


def _gray(w: np.ndarray) -> Image.Image:
    return Image.fromarray(np.round(np.clip(w, 0, 1) * 255).astype(np.uint8), "L")


def write_partial_dump(partial: PartialLabels, base: str | Path) -> None:
    idx = np.where(partial.w > 0, partial.y.argmax(-1), UNLABELED).astype(np.uint8)
    img = Image.fromarray(idx, "L").convert("P")
    img.putpalette(PARTIAL_PALETTE + [0] * (768 - len(PARTIAL_PALETTE)))
    img.save(f"{base}_partial.png")
    _gray(partial.w).save(f"{base}_weights.png")


def write_array(arr: np.ndarray, path: str | Path) -> None:
    header = json.dumps({"shape": list(arr.shape), "dtype": "<f4"}).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_array(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a float32 dump")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, off)
    header = json.loads(data[off + 8:off + 8 + hlen])
    flat = np.frombuffer(data, dtype="<f4", offset=off + 8 + hlen)
    return flat.reshape(header["shape"]).copy()


def write_pseudo_dump(pseudo: PseudoLabels, base: str | Path) -> None:
    write_array(pseudo.y, f"{base}_pseudo.f32")
    _gray(pseudo.w).save(f"{base}_pw.png")

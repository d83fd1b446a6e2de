"""Training orchestration: warm-up, pseudo-label estimation, fine-tuning, iteration,
ablation rows and the label-smoothing baseline."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage

from .annotations import RegionMasks, rasterize_regions
from .config import Config, ConfigError, SlrConfig
from .dataset import DataError, SceneRecord
from .dumps import write_partial_dump, write_pseudo_dump
from .diffcore import OptimizerState, ToyNet, TorchModel, backward, forward, rmsprop_step, save_checkpoint
from .evaluation import METRIC_COLUMNS, DetectionReport, evaluate
from .losses import (
    LossTerms,
    ObjectPrior,
    finetune_loss,
    focal_loss,
    make_object_prior,
    pseudo_label_masks,
    warmup_loss,
)
from .partial_labels import ConstraintSets, PartialLabels, build_partial_labels, constraint_sets
from .pseudo_labels import PseudoLabels, estimate_pseudo_labels
from .scenegen import flip_box, sample_augmentation

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("foc", "pair", "proj", "aux", "ws", "total")

# Ablation row order, flags per row: (edge_heuristic, finetuning, constraints_r, feature_clustering, aux_loss)
ABLATION_ROWS = (
    (False, False, False, False, False),
    (True, False, False, False, False),
    (True, True, False, False, False),
    (True, True, True, False, False),
    (True, True, False, True, False),
    (True, True, True, True, False),
    (True, True, True, True, True),
)
ABLATION_FLAGS = ("edge_heuristic", "finetuning", "constraints_r", "feature_clustering", "aux_loss")


@dataclass
class Sample:
    """A training scene with its weak-label targets precomputed."""

    record: SceneRecord
    regions: RegionMasks
    constraints: ConstraintSets
    partial: PartialLabels
    priors: list
    pseudo: PseudoLabels | None = None

    @property
    def image(self) -> np.ndarray:
        return self.record.scene.image

    @property
    def boxes(self):
        return self.record.annotations.obstacles


def prepare_sample(rec: SceneRecord, cfg: Config) -> Sample:
    scene, ann = rec.scene, rec.annotations
    regions = rasterize_regions(ann, scene.size)
    cons = constraint_sets(regions)
    partial = build_partial_labels(regions, cfg.slr.theta, cfg.slr.omega_min, cfg.slr.edge_heuristic, cons)
    priors = []
    for k, box in enumerate(ann.obstacles):
        gt = scene.obstacles_gt[k].mask if cfg.noise.prior_mode == "oracle_corrupt" else None
        rng = np.random.SeedSequence([cfg.data.data_seed, scene.seed % (2**32), k, 2])
        priors.append(make_object_prior(box, scene.size, cfg.noise.prior_mode, gt, cfg.noise.prior_noise_px,
                                        np.random.default_rng(rng)))
    return Sample(rec, regions, cons, partial, priors)


def prepare_samples(records: Sequence[SceneRecord], cfg: Config) -> list[Sample]:
    return [prepare_sample(r, cfg) for r in records]


# --- run record ------------------------------------------------------------

@dataclass
class RunRecord:
    config: dict
    losses: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    pseudo_passes: int = 0
    checkpoints: list = field(default_factory=list)
    wall_clock_s: float = 0.0

    def add_metrics(self, stage: str, report: DetectionReport) -> None:
        row = {"stage": stage}
        row.update({k: getattr(report, k) for k in METRIC_COLUMNS})
        self.metrics.append(row)

    def metric(self, stage: str, key: str) -> float:
        for row in self.metrics:
            if row["stage"] == stage:
                return row[key]
        raise KeyError(stage)

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "losses.csv", ["stage", "epoch", *LOSS_COLUMNS], self.losses)
        write_csv(out / "metrics.csv", ["stage", *METRIC_COLUMNS], self.metrics)
        run = {
            "config": self.config,
            "pseudo_label_passes": self.pseudo_passes,
            "checkpoints": self.checkpoints,
            "wall_clock_s": self.wall_clock_s,
            "final_checkpoint": self.checkpoints[-1] if self.checkpoints else None,
            "metrics": self.metrics,
        }
        (out / "run.json").write_text(json.dumps(run, indent=1))


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(columns)
        for row in rows:
            wr.writerow([_fmt(row[c]) for c in columns])


# --- generic training loop ----------------------------------------------------

StepLoss = Callable[[torch.Tensor, torch.Tensor, int, bool, np.ndarray], LossTerms]


def _stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *stage.encode()]))


def train_epochs(net: ToyNet, samples: Sequence, epochs: int, slr: SlrConfig, scene_cfg, stage: str,
                 loss_fn: StepLoss, record: RunRecord | None = None,
                 schedule: OptimizerState | None = None) -> OptimizerState:
    """Minimise ``loss_fn`` over shuffled, augmented mini-batches.

    ``loss_fn(probs, features, sample_index, flipped, image)`` returns the loss terms of one image.
    """
    n = len(samples)
    if n == 0:
        raise ConfigError("empty training set")
    steps_per_epoch = _steps_per_epoch(n, slr.batch_size)
    state = schedule or OptimizerState(lr0=slr.lr0, total_steps=max(epochs * steps_per_epoch, 1), power=slr.poly_power,
                                       momentum=slr.momentum, rho=slr.rho, eps=slr.rms_eps)
    rng = _stage_rng(slr.seed, stage)
    params = list(net.parameters())
    for epoch in range(epochs):
        order = rng.permutation(n)
        aug_seeds = rng.integers(0, 2**63 - 1, size=n)
        sums = dict.fromkeys(LOSS_COLUMNS, 0.0)
        for start in range(0, n, slr.batch_size):
            idx = order[start:start + slr.batch_size]
            augs = [sample_augmentation(int(aug_seeds[i]), scene_cfg) for i in idx]
            images = np.stack([a.apply_image(samples[i].image) for a, i in zip(augs, idx)])
            out = forward(net, images)
            terms = [loss_fn(out.probs[b], out.features[b], int(i), augs[b].flip, images[b]) for b, i in enumerate(idx)]
            mean = LossTerms(*(sum(getattr(t, k) for t in terms) / len(terms) for k in ("foc", "pair", "proj", "aux", "ws")))
            for p in params:
                p.grad = None
            backward(mean.total)
            rmsprop_step(state, params)
            for k, v in mean.values().items():
                sums[k] += v * len(idx)
        if record is not None:
            row = {"stage": stage, "epoch": epoch + 1}
            row.update({k: sums[k] / n for k in LOSS_COLUMNS})
            record.losses.append(row)
    return state


def _flip_prior(prior: ObjectPrior, width: int) -> ObjectPrior:
    return ObjectPrior(flip_box(prior.box, width), np.ascontiguousarray(prior.prior_mask[:, ::-1]))


class _SampleCache:
    """Flipped copies of per-sample targets, built on first use."""

    def __init__(self, samples):
        self.samples = samples
        self._flipped = {}

    def get(self, i: int, flipped: bool, key: str, make):
        if not flipped:
            return make(self.samples[i], False)
        k = (i, key)
        if k not in self._flipped:
            self._flipped[k] = make(self.samples[i], True)
        return self._flipped[k]


def warmup(samples: Sequence[Sample], cfg: Config, record: RunRecord | None = None, net: ToyNet | None = None,
           schedule: OptimizerState | None = None) -> ToyNet:
    slr = cfg.slr
    if not samples:
        raise ConfigError("warm-up needs a non-empty dataset")
    torch.manual_seed(slr.seed)
    net = net or ToyNet(slr.channel_widths, seed=slr.seed)
    if slr.warmup_epochs == 0:
        return net
    cache = _SampleCache(samples)
    width = samples[0].record.scene.size[0]

    def targets(s: Sample, flipped: bool):
        objs = list(zip(s.boxes, s.priors))
        if not flipped:
            return s.partial, objs
        return s.partial.flip(), [(flip_box(b, width), _flip_prior(p, width)) for b, p in objs]

    def loss_fn(probs, feats, i, flipped, image):
        partial, objs = cache.get(i, flipped, "warmup", targets)
        return warmup_loss(probs, None, partial, objs, image, slr.gamma, slr.tau, slr.sigma_col,
                           use_aux=slr.aux_loss,
                           weights=(slr.weight_foc, slr.weight_pair, slr.weight_proj, slr.weight_aux))

    train_epochs(net, samples, slr.warmup_epochs, slr, cfg.scene, "warmup", loss_fn, record, schedule)
    return net


def estimate_dataset_pseudo_labels(net: ToyNet, samples: Sequence[Sample], cfg: Config) -> list[PseudoLabels]:
    model = TorchModel(net)
    return [estimate_pseudo_labels(model, s.image, s.record.annotations, cfg.slr, s.partial, s.constraints)
            for s in samples]


def finetune(net: ToyNet, samples: Sequence[Sample], cfg: Config, record: RunRecord | None = None,
             stage: str = "iter1", schedule: OptimizerState | None = None) -> ToyNet:
    slr = cfg.slr
    if any(s.pseudo is None for s in samples):
        raise DataError("fine-tuning needs pseudo labels for every scene")
    if slr.finetune_epochs == 0:
        return net
    cache = _SampleCache(samples)
    h, w = samples[0].image.shape[:2]
    grid = (h // 4, w // 4)

    def targets(s: Sample, flipped: bool):
        pseudo = s.pseudo.flip() if flipped else s.pseudo
        return pseudo, pseudo_label_masks(pseudo.y, grid)

    def loss_fn(probs, feats, i, flipped, image):
        pseudo, masks = cache.get(i, flipped, stage, targets)
        return finetune_loss(probs, feats, pseudo, image, slr.lambda_ws, slr.gamma, slr.tau, slr.sigma_col,
                             weights=(slr.weight_foc, slr.weight_pair), ws_masks=masks)

    train_epochs(net, samples, slr.finetune_epochs, slr, cfg.scene, stage, loss_fn, record, schedule)
    return net


def run_slr(train: Sequence[Sample], test, cfg: Config, out_dir: str | Path | None = None,
            threads: int = 1, warm_net: ToyNet | None = None,
            dump_labels: bool = False) -> tuple[ToyNet, RunRecord]:
    """Warm-up once, then ``iterations`` rounds of pseudo-labelling and fine-tuning.

    ``test`` is a sequence of scenes; metrics are recorded after every stage.
    ``warm_net`` skips training the warm-up stage (its losses are then not recorded).
    ``dump_labels`` writes partial and per-iteration pseudo labels under ``out_dir/labels``.
    """
    cfg.validate()
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    record = RunRecord(config=cfg.to_dict())
    out = Path(out_dir) if out_dir is not None else None
    iterations = cfg.slr.iterations if cfg.slr.finetuning else 0
    schedule = None if cfg.slr.restart_schedule else global_schedule(cfg.slr, len(train), iterations)
    if warm_net is not None:
        net = warm_net
        if schedule is not None:
            schedule.step = cfg.slr.warmup_epochs * _steps_per_epoch(len(train), cfg.slr.batch_size)
    else:
        net = warmup(train, cfg, record, schedule=schedule)
    dump_root = out / "labels" if (dump_labels and out is not None) else None
    if dump_root is not None:
        dump_root.mkdir(parents=True, exist_ok=True)
        for s in train:
            write_partial_dump(s.partial, dump_root / s.record.name)
    _checkpoint(net, out, "warmup.ckpt", record)
    if test:
        record.add_metrics("warmup", evaluate(TorchModel(net), test, cfg.eval, threads))
    for it in range(1, iterations + 1):
        pseudo = estimate_dataset_pseudo_labels(net, train, cfg)
        record.pseudo_passes += 1
        for s, p in zip(train, pseudo):
            s.pseudo = p
        if dump_root is not None:
            (dump_root / f"iter{it}").mkdir(exist_ok=True)
            for s, p in zip(train, pseudo):
                write_pseudo_dump(p, dump_root / f"iter{it}" / s.record.name)
        net = finetune(net, train, cfg, record, stage=f"iter{it}", schedule=schedule)
        _checkpoint(net, out, f"iter{it}.ckpt", record)
        if test:
            record.add_metrics(f"iter{it}", evaluate(TorchModel(net), test, cfg.eval, threads))
    record.wall_clock_s = time.perf_counter() - t0
    if out is not None:
        record.write(out)
    return net, record


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def global_schedule(slr: SlrConfig, n: int, iterations: int) -> OptimizerState:
    """One decay schedule spanning warm-up and every fine-tuning round (used when restarts are off)."""
    epochs = slr.warmup_epochs + iterations * slr.finetune_epochs
    return OptimizerState(lr0=slr.lr0, total_steps=max(epochs * _steps_per_epoch(n, slr.batch_size), 1),
                          power=slr.poly_power, momentum=slr.momentum, rho=slr.rho, eps=slr.rms_eps)


def _checkpoint(net: ToyNet, out: Path | None, name: str, record: RunRecord) -> None:
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, out / name)
    record.checkpoints.append(name)


def ablation_config(cfg: Config, flags: tuple[bool, ...]) -> Config:
    return cfg.replace(**dict(zip(ABLATION_FLAGS, flags)))


def clone_net(net: ToyNet) -> ToyNet:
    twin = ToyNet(net.channels)
    twin.load_state_dict(net.state_dict())
    return twin


def warmup_key(cfg: Config) -> tuple:
    s = cfg.slr
    return (s.edge_heuristic, s.aux_loss)


# --- label-smoothing baseline ---------------------------------------------------

def smooth_labels(labels: np.ndarray, alpha: float, sigma: float, n_classes: int = 3) -> np.ndarray:
    """Pixel-wise smoothing ``p (1 - alpha) + alpha / N`` then per-channel Gaussian blur, renormalised."""
    if not 0 <= alpha < 1 or sigma < 0:
        raise ValueError("need 0 <= alpha < 1 and sigma >= 0")
    y = np.eye(n_classes)[labels] * (1 - alpha) + alpha / n_classes
    if sigma > 0:
        y = np.stack([ndimage.gaussian_filter(y[..., c], sigma, mode="nearest") for c in range(n_classes)], -1)
        y = y / y.sum(-1, keepdims=True)
    return y


def smoothing_baseline(records: Sequence[SceneRecord], alpha: float, sigma: float, cfg: Config,
                       record: RunRecord | None = None) -> ToyNet:
    """Dense ground truth, smoothed, trained with the focal loss alone for warm-up + fine-tune epochs."""
    slr = cfg.slr
    if not records:
        raise ConfigError("empty training set")
    torch.set_num_threads(1)
    torch.manual_seed(slr.seed)
    net = ToyNet(slr.channel_widths, seed=slr.seed)
    labels = [smooth_labels(r.scene.gt_labels, alpha, sigma) for r in records]
    ones = np.ones(labels[0].shape[:2])
    samples = [type("S", (), {"image": r.scene.image}) for r in records]

    def loss_fn(probs, feats, i, flipped, image):
        y = labels[i][:, ::-1] if flipped else labels[i]
        zero = probs.sum() * 0.0
        return LossTerms(focal_loss(probs, np.ascontiguousarray(y), ones, slr.gamma), zero, zero, zero, zero)

    epochs = slr.warmup_epochs + slr.finetune_epochs
    train_epochs(net, samples, epochs, slr, cfg.scene, f"smooth_a{alpha}_s{sigma}", loss_fn, record)
    return net


def run_ablation(train_records: Sequence[SceneRecord], test, cfg: Config, out_dir: str | Path | None = None,
                 threads: int = 1, rows=ABLATION_ROWS) -> list[dict]:
    """One SLR run per flag row; warm-ups are shared between rows with the same warm-up switches."""
    warm_cache: dict[tuple, ToyNet] = {}
    results = []
    for k, flags in enumerate(rows, start=1):
        row_cfg = ablation_config(cfg, flags)
        samples = prepare_samples(train_records, row_cfg)
        key = warmup_key(row_cfg)
        if key not in warm_cache:
            warm_cache[key] = warmup(samples, row_cfg)
        row_out = Path(out_dir) / f"row{k}" if out_dir is not None else None
        _, record = run_slr(samples, test, row_cfg, row_out, threads, warm_net=clone_net(warm_cache[key]))
        row = {"row": k, **dict(zip(ABLATION_FLAGS, (int(f) for f in flags)))}
        row.update({c: record.metrics[-1][c] for c in METRIC_COLUMNS})
        log.info("ablation row %d: f1_d=%.3f", k, row["f1_d"])
        results.append(row)
    return results

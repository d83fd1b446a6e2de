"""Dataset directory layout and per-scene file formats.

``<root>/scenes/NNNN_img.png``     8-bit RGB image
``<root>/scenes/NNNN_gt.png``      8-bit indexed labels (0 water, 1 sky, 2 obstacle)
``<root>/scenes/NNNN_ann.json``    weak annotations
``<root>/scenes/NNNN_danger.png``  binary danger-zone mask
``<root>/scenes/NNNN_meta.json``   exact ground-truth geometry and camera
``<root>/scenes/NNNN_inst.png``    obstacle instance ids (0 none, k = k-th ground-truth obstacle)
``<root>/manifest.json``           splits, counts and seeds
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .annotations import WeakAnnotations, read_annotations, write_annotations
from .config import Config
from .parallel import ordered_map
from .scenegen import CameraModel, Obstacle, Scene, derive_weak_annotations, generate_scene

LABEL_PALETTE = [40, 90, 200, 200, 220, 255, 255, 60, 60, 0, 0, 0]


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneRecord:
    name: str
    scene: Scene
    annotations: WeakAnnotations


def scene_seed(data_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([data_seed, index]).generate_state(1, np.uint64)[0])


def annotation_seed(data_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([data_seed, index, 1]).generate_state(1, np.uint64)[0])


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def make_record(cfg: Config, index: int) -> SceneRecord:
    seed = scene_seed(cfg.data.data_seed, index)
    scene = generate_scene(seed, cfg.scene)
    # images are stored as 8-bit; keep the in-memory copy identical to what a reload gives
    scene = _replace_image(scene, quantize(scene.image) / 255.0)
    ann = derive_weak_annotations(scene, cfg.noise, annotation_seed(cfg.data.data_seed, index))
    return SceneRecord(f"{index:04d}", scene, ann)


def _replace_image(scene: Scene, image: np.ndarray) -> Scene:
    from dataclasses import replace

    return replace(scene, image=image)


def generate_split(cfg: Config, start: int, count: int, threads: int = 1) -> list[SceneRecord]:
    return ordered_map(lambda i: make_record(cfg, i), range(start, start + count), threads)


def write_record(rec: SceneRecord, scenes_dir: Path) -> None:
    sc = rec.scene
    base = scenes_dir / rec.name
    Image.fromarray(quantize(sc.image), "RGB").save(f"{base}_img.png")
    gt = Image.fromarray(sc.gt_labels.astype(np.uint8), "L").convert("P")
    gt.putpalette(LABEL_PALETTE + [0] * (768 - len(LABEL_PALETTE)))
    gt.save(f"{base}_gt.png")
    Image.fromarray((sc.danger_mask * 255).astype(np.uint8), "L").save(f"{base}_danger.png")
    inst = np.zeros(sc.gt_labels.shape, dtype=np.uint8)
    for k, ob in enumerate(sc.obstacles_gt, start=1):
        inst[ob.mask] = k
    Image.fromarray(inst, "L").save(f"{base}_inst.png")
    write_annotations(rec.annotations, f"{base}_ann.json")
    cam = sc.camera
    meta = {
        "seed": sc.seed,
        "camera": {"height_m": cam.height_m, "pitch_rad": cam.pitch_rad, "focal_px": cam.focal_px,
                   "image_size": list(cam.image_size)},
        "horizon_gt": [list(p) for p in sc.horizon_gt],
        "water_edge_gt": [list(p) for p in sc.water_edge_gt],
        "extra_edges": [[list(p) for p in e] for e in sc.extra_edges],
        "obstacle_boxes": [list(o.box) for o in sc.obstacles_gt],
    }
    Path(f"{base}_meta.json").write_text(json.dumps(meta, indent=1))


def _load_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing file {path}")
    with Image.open(path) as im:
        return np.array(im)


def read_record(scenes_dir: Path, name: str) -> SceneRecord:
    base = Path(scenes_dir) / name
    image = _load_png(Path(f"{base}_img.png")).astype(float) / 255.0
    labels = _load_png(Path(f"{base}_gt.png")).astype(np.uint8)
    danger = _load_png(Path(f"{base}_danger.png")) > 127
    inst = _load_png(Path(f"{base}_inst.png"))
    meta_path = Path(f"{base}_meta.json")
    if not meta_path.exists():
        raise DataError(f"missing file {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        cam = CameraModel(meta["camera"]["height_m"], meta["camera"]["pitch_rad"], meta["camera"]["focal_px"],
                          tuple(meta["camera"]["image_size"]))
        obstacles = tuple(Obstacle(tuple(b), inst == k) for k, b in enumerate(meta["obstacle_boxes"], start=1))
        scene = Scene(
            image=image, gt_labels=labels,
            horizon_gt=tuple(tuple(p) for p in meta["horizon_gt"]),
            water_edge_gt=tuple(tuple(p) for p in meta["water_edge_gt"]),
            obstacles_gt=obstacles, danger_mask=danger, camera=cam, seed=int(meta["seed"]),
            extra_edges=tuple(tuple(tuple(p) for p in e) for e in meta.get("extra_edges", [])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{meta_path}: malformed ({exc})") from None
    return SceneRecord(name, scene, read_annotations(f"{base}_ann.json"))


def write_dataset(cfg: Config, root: str | Path, threads: int = 1) -> dict:
    root = Path(root)
    scenes_dir = root / "scenes"
    scenes_dir.mkdir(parents=True, exist_ok=True)
    n_tr, n_te = cfg.data.n_train, cfg.data.n_test
    records = generate_split(cfg, 0, n_tr + n_te, threads)
    for rec in records:
        write_record(rec, scenes_dir)
    manifest = {
        "data_seed": cfg.data.data_seed,
        "counts": {"train": n_tr, "test": n_te},
        "train": [{"name": r.name, "seed": r.scene.seed} for r in records[:n_tr]],
        "test": [{"name": r.name, "seed": r.scene.seed} for r in records[n_tr:]],
        "config": cfg.to_dict(),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def read_dataset(root: str | Path, threads: int = 1) -> tuple[list[SceneRecord], list[SceneRecord]]:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DataError(f"no dataset at {root} (missing manifest.json)")
    manifest = json.loads(mpath.read_text())
    scenes_dir = root / "scenes"
    train = ordered_map(lambda e: read_record(scenes_dir, e["name"]), manifest["train"], threads)
    test = ordered_map(lambda e: read_record(scenes_dir, e["name"]), manifest["test"], threads)
    return train, test

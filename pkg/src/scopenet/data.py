"""Synthetic shape scenes with exact boxes, plus PGM / JSON-lines dataset I/O.

Classes: 1 = rectangle, 2 = ellipse, 3 = triangle (any further class ids
cycle through the same three shapes with a different fill texture). Each
object's box is the exact bounding box of the drawn shape in continuous
pixel coordinates, snapped to quarter pixels.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .config import DataConfig
from .geometry import iou_matrix

log = logging.getLogger(__name__)

SHAPES = ("rectangle", "ellipse", "triangle")
MAX_PLACEMENT_TRIES = 50
_SUPERSAMPLE = 4


@dataclass
class SyntheticScene:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    boxes: np.ndarray  # (n, 4) x1 y1 x2 y2
    classes: np.ndarray  # (n,) in 1..C
    seed: int = 0
    image_id: int = 0
    meta: dict = field(default_factory=dict)


def _sample_box(rng: np.random.Generator, p: DataConfig) -> np.ndarray | None:
    size = p.image_size
    lo_ratio, hi_ratio = p.aspect_range
    ratio = float(np.exp(rng.uniform(np.log(lo_ratio), np.log(hi_ratio))))
    longest = min(p.max_size, size - 1.0)
    short_hi = longest / ratio
    if short_hi < p.min_size:
        return None
    short = rng.uniform(p.min_size, short_hi)
    long_ = short * ratio
    w, h = (long_, short) if rng.random() < 0.5 else (short, long_)
    x1 = rng.uniform(0, size - w)
    y1 = rng.uniform(0, size - h)
    # snap inward to quarter pixels so sides never drop below min_size
    box = np.array([np.ceil(x1 * 4) / 4, np.ceil(y1 * 4) / 4, np.floor((x1 + w) * 4) / 4, np.floor((y1 + h) * 4) / 4])
    if min(box[2] - box[0], box[3] - box[1]) < p.min_size:
        box[2] = min(size, box[0] + np.ceil((box[2] - box[0]) * 4) / 4)
        box[3] = min(size, box[1] + np.ceil((box[3] - box[1]) * 4) / 4)
        if min(box[2] - box[0], box[3] - box[1]) < p.min_size:
            return None
    bw, bh = box[2] - box[0], box[3] - box[1]
    if not lo_ratio <= max(bw, bh) / min(bw, bh) <= hi_ratio:
        return None
    return box


def _shape_mask(kind: str, box: np.ndarray, size: int, orientation: int) -> np.ndarray:
    """Coverage fraction of each pixel, estimated on a supersampled grid."""
    s = _SUPERSAMPLE
    c = (np.arange(size * s) + 0.5) / s
    ys, xs = np.meshgrid(c, c, indexing="ij")
    x1, y1, x2, y2 = box
    u = (xs - x1) / (x2 - x1)
    v = (ys - y1) / (y2 - y1)
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    if kind == "ellipse":
        inside &= (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    elif kind == "triangle":
        # apex at the middle of one side, base along the opposite side
        if orientation in (1, 3):
            u, v = v, u
        if orientation in (2, 3):
            v = 1 - v
        inside &= np.abs(u - 0.5) <= v / 2
    return inside.reshape(size, s, size, s).mean(axis=(1, 3))


def generate_scene(rng: np.random.Generator, p: DataConfig, num_classes: int = 3, image_id: int = 0, seed: int = 0) -> SyntheticScene:
    size = p.image_size
    n_target = int(rng.integers(p.min_objects, p.max_objects + 1))
    boxes: list[np.ndarray] = []
    for _ in range(n_target):
        for _try in range(MAX_PLACEMENT_TRIES):
            box = _sample_box(rng, p)
            if box is None:
                continue
            if boxes and iou_matrix(box[None], np.array(boxes)).max() > p.max_iou:
                continue
            boxes.append(box)
            break
    if len(boxes) < n_target:
        log.info("scene %d: placed %d of %d objects", image_id, len(boxes), n_target)
    classes = rng.integers(1, num_classes + 1, size=len(boxes))
    background = rng.uniform(0.0, 0.3)
    image = np.full((size, size), background)
    for box, cls in zip(boxes, classes):
        kind = SHAPES[(cls - 1) % len(SHAPES)]
        mask = _shape_mask(kind, box, size, int(rng.integers(0, 4)))
        value = rng.uniform(0.55, 1.0)
        image = image * (1 - mask) + value * mask
    image = image + rng.normal(0.0, p.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    # store exactly what an 8-bit raster round-trip would give back
    image = (np.round(image * 255) / 255).astype(np.float32)
    return SyntheticScene(
        image=image,
        boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
        classes=classes.astype(np.int64),
        seed=seed,
        image_id=image_id,
    )


def generate_dataset(count: int, params: DataConfig, seed: int, num_classes: int = 3) -> list[SyntheticScene]:
    """Deterministic for a fixed seed; scene ``i`` depends only on (seed, i)."""
    children = np.random.SeedSequence(seed).spawn(count)
    scenes = []
    for i, ss in enumerate(children):
        scenes.append(generate_scene(np.random.default_rng(ss), params, num_classes, image_id=i, seed=seed))
    return scenes


# --- I/O --------------------------------------------------------------------


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos].decode())
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    data = np.frombuffer(blob[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    return (data.reshape(h, w) / 255.0).astype(np.float32)


def write_dataset(root: str | Path, scenes: list[SyntheticScene], params: DataConfig, seed: int) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "annotations.jsonl", "w") as fh:
        for s in scenes:
            name = f"{s.image_id:06d}.pgm"
            write_pgm(root / "images" / name, s.image)
            rec = {
                "image_id": s.image_id,
                "file": f"images/{name}",
                "height": int(s.image.shape[0]),
                "width": int(s.image.shape[1]),
                "objects": [{"box": [float(v) for v in b], "class": int(c)} for b, c in zip(s.boxes, s.classes)],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest = {"seed": seed, "count": len(scenes), "params": _params_dict(params)}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def _params_dict(params: DataConfig) -> dict:
    d = asdict(params)
    d["aspect_range"] = list(d["aspect_range"])
    return d


def read_dataset(root: str | Path) -> list[SyntheticScene]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    scenes = []
    with open(root / "annotations.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            objs = rec["objects"]
            scenes.append(
                SyntheticScene(
                    image=read_pgm(root / rec["file"]),
                    boxes=np.array([o["box"] for o in objs], dtype=np.float64).reshape(-1, 4),
                    classes=np.array([o["class"] for o in objs], dtype=np.int64),
                    seed=manifest["seed"],
                    image_id=rec["image_id"],
                )
            )
    return scenes

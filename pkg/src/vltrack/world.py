"""Procedural benchmark of moving colored shapes plus tracking metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import COLORS, DIRECTIONS, WorldConfig

FORMAT_NAME = "vltrack-world"
FORMAT_VERSION = 1


class WorldError(ValueError):
    pass


@dataclass
class SceneObject:
    color: str
    shape: str
    size: float
    boxes: np.ndarray          # (T, 4) x, y, w, h
    direction: str


@dataclass
class SyntheticSequence:
    frames: np.ndarray         # (T, H, W, 3) in [0, 1]
    gt_boxes: np.ndarray       # (T, 4) x, y, w, h in pixels
    sentence: list
    seed: int
    objects: list = field(default_factory=list)   # target first

    def __len__(self):
        return len(self.frames)


def _trajectory(rng, size, n_frames, frame_w, frame_h, speed_lo, speed_hi):
    x = rng.uniform(0, frame_w - size)
    y = rng.uniform(0, frame_h - size)
    angle = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(speed_lo, speed_hi)
    vx, vy = speed * np.cos(angle), speed * np.sin(angle)
    if abs(vx) >= abs(vy):
        direction = "right" if vx > 0 else "left"
    else:
        direction = "down" if vy > 0 else "up"
    boxes = np.empty((n_frames, 4))
    for t in range(n_frames):
        boxes[t] = (x, y, size, size)
        x, y = x + vx, y + vy
        # reflect off the walls
        if x < 0:
            x, vx = -x, -vx
        elif x > frame_w - size:
            x, vx = 2 * (frame_w - size) - x, -vx
        if y < 0:
            y, vy = -y, -vy
        elif y > frame_h - size:
            y, vy = 2 * (frame_h - size) - y, -vy
    return boxes, direction


def shape_coverage(shape: str, box, height: int, width: int, supersample: int = 4) -> np.ndarray:
    """Fraction of each pixel covered by the shape whose bounding rectangle is ``box``."""
    x, y, w, h = box
    cov = np.zeros((height, width))
    c0, c1 = max(int(np.floor(x)), 0), min(int(np.ceil(x + w)), width)
    r0, r1 = max(int(np.floor(y)), 0), min(int(np.ceil(y + h)), height)
    if c1 <= c0 or r1 <= r0:
        return cov
    offs = (np.arange(supersample) + 0.5) / supersample
    px = (np.arange(c0, c1)[:, None] + offs[None]).reshape(-1)
    py = (np.arange(r0, r1)[:, None] + offs[None]).reshape(-1)
    gx, gy = np.meshgrid(px, py)
    u = (gx - x) / w
    v = (gy - y) / h
    if shape == "square":
        inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    elif shape == "circle":
        inside = (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    elif shape == "triangle":
        # apex at top centre, base along the bottom edge
        inside = (v >= 0) & (v <= 1) & (np.abs(u - 0.5) <= 0.5 * v)
    else:
        raise WorldError(f"unknown shape {shape!r}")
    block = inside.reshape(r1 - r0, supersample, c1 - c0, supersample).mean(axis=(1, 3))
    cov[r0:r1, c0:c1] = block
    return cov


def _background(rng, cfg: WorldConfig):
    base = rng.uniform(0.15, 0.35, size=3)
    gx = np.linspace(-1, 1, cfg.frame_w)[None, :, None]
    gy = np.linspace(-1, 1, cfg.frame_h)[:, None, None]
    tilt = rng.uniform(-0.06, 0.06, size=(2, 3))
    return base + gx * tilt[0] + gy * tilt[1]


def render_frame(objects, t: int, background, rng, cfg: WorldConfig, only=None) -> np.ndarray:
    img = background.copy() if only is None else np.zeros_like(background)
    if only is None and cfg.noise > 0:
        img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    todo = objects if only is None else [objects[only]]
    # distractors first so the target is always on top
    for obj in reversed(todo):
        cov = shape_coverage(obj.shape, obj.boxes[t], cfg.frame_h, cfg.frame_w, cfg.supersample)
        color = np.asarray(COLORS[obj.color])
        img = img * (1 - cov[..., None]) + color * cov[..., None]
    return np.clip(img, 0.0, 1.0)


def sentence_matches(sentence, obj: SceneObject) -> bool:
    words = list(sentence)
    if len(words) < 2 or words[0] != obj.color or words[1] != obj.shape:
        return False
    if len(words) == 4:
        return words[2] == "moving" and words[3] == obj.direction
    return len(words) == 2


def generate_sequence(seed: int, cfg: WorldConfig | None = None) -> SyntheticSequence:
    """Render one sequence deterministically from ``seed``.

    The target is described by ``<color> <shape> [moving <direction>]``; every
    distractor differs from it in color or in shape.
    """
    cfg = cfg or WorldConfig()
    problems = cfg.problems()
    if problems:
        raise WorldError("; ".join(problems))
    rng = np.random.default_rng(seed)
    classes = [(c, s) for c in cfg.palette for s in cfg.shapes]
    target_cls = classes[rng.integers(len(classes))]
    others = [k for k in classes if k != target_cls]
    n_dis = int(rng.integers(cfg.min_distractors, cfg.max_distractors + 1))

    objects = []
    for k, (color, shape) in enumerate([target_cls] + [others[i] for i in rng.integers(len(others), size=n_dis)]):
        size = rng.uniform(cfg.min_size, cfg.max_size)
        boxes, direction = _trajectory(rng, size, cfg.n_frames, cfg.frame_w, cfg.frame_h,
                                       cfg.min_speed, cfg.max_speed)
        objects.append(SceneObject(color, shape, size, boxes, direction))

    sentence = [target_cls[0], target_cls[1]]
    if rng.random() < cfg.motion_word_prob:
        sentence += ["moving", objects[0].direction]

    background = _background(rng, cfg)
    frames = np.stack([render_frame(objects, t, background, rng, cfg) for t in range(cfg.n_frames)])
    return SyntheticSequence(frames=frames, gt_boxes=objects[0].boxes.copy(), sentence=sentence,
                             seed=seed, objects=objects)


# ---------------------------------------------------------------------------
# metrics

THRESHOLDS = np.linspace(0.0, 1.0, 101)


def box_iou(a, b) -> np.ndarray:
    """IoU of (x, y, w, h) boxes, row by row."""
    a = np.atleast_2d(np.asarray(a, float))
    b = np.atleast_2d(np.asarray(b, float))
    ix = np.clip(np.minimum(a[:, 0] + a[:, 2], b[:, 0] + b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, 1] + a[:, 3], b[:, 1] + b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    inter = ix * iy
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    # (x + w) - x need not equal w in floating point; identical boxes overlap exactly
    same = np.all(a == b, axis=1) & (union > 0)
    return np.where(same, 1.0, np.minimum(iou, 1.0))


@dataclass
class Metrics:
    mean_iou: float
    success_auc: float
    precision: float

    def as_dict(self):
        return {"mean_iou": self.mean_iou, "success_auc": self.success_auc, "precision": self.precision}


def success_curve(ious) -> np.ndarray:
    ious = np.asarray(ious, float)
    return (ious[None, :] > THRESHOLDS[:, None]).mean(axis=1)


def evaluate_metrics(pred_boxes, gt_boxes, precision_threshold: float = 4.0) -> Metrics:
    pred = np.asarray(pred_boxes, float).reshape(-1, 4)
    gt = np.asarray(gt_boxes, float).reshape(-1, 4)
    if len(pred) == 0 or len(gt) == 0:
        raise WorldError("metrics need at least one frame")
    if len(pred) != len(gt):
        raise WorldError(f"{len(pred)} predictions for {len(gt)} ground-truth boxes")
    ious = box_iou(pred, gt)
    dist = np.hypot(pred[:, 0] + pred[:, 2] / 2 - gt[:, 0] - gt[:, 2] / 2,
                    pred[:, 1] + pred[:, 3] / 2 - gt[:, 1] - gt[:, 3] / 2)
    return Metrics(mean_iou=float(ious.mean()),
                   success_auc=float(success_curve(ious).mean()),
                   precision=float((dist <= precision_threshold).mean()))


# ---------------------------------------------------------------------------
# on-disk container: manifest.json + one little-endian float64 blob per frame


def export_sequence(seq: SyntheticSequence, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    t, h, w, c = seq.frames.shape
    names = []
    for i, frame in enumerate(seq.frames):
        name = f"frame_{i:05d}.f64"
        (directory / name).write_bytes(np.ascontiguousarray(frame, dtype="<f8").tobytes())
        names.append(name)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "seed": int(seq.seed),
        "sentence": list(seq.sentence),
        "height": h, "width": w, "channels": c,
        "layout": "row-major HxWxC float64 little-endian",
        "frames": names,
        "gt_boxes": [[float(v) for v in box] for box in seq.gt_boxes],
    }
    path = directory / "manifest.json"
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)
    return path


def load_sequence(directory) -> SyntheticSequence:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != FORMAT_NAME or manifest.get("version") != FORMAT_VERSION:
        raise WorldError(f"unsupported container {manifest.get('format')} v{manifest.get('version')}")
    h, w, c = manifest["height"], manifest["width"], manifest["channels"]
    frames = []
    for name in manifest["frames"]:
        raw = (directory / name).read_bytes()
        if len(raw) != h * w * c * 8:
            raise WorldError(f"{name} is truncated")
        frames.append(np.frombuffer(raw, dtype="<f8").reshape(h, w, c))
    return SyntheticSequence(frames=np.stack(frames), gt_boxes=np.asarray(manifest["gt_boxes"]),
                             sentence=manifest["sentence"], seed=manifest["seed"])


__all__ = ["SyntheticSequence", "Metrics", "generate_sequence", "evaluate_metrics", "box_iou",
           "success_curve", "export_sequence", "load_sequence", "sentence_matches", "DIRECTIONS"]

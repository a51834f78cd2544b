"""Joint multi-reference training: scene sampling, optimization, checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import struct
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import ExperimentConfig, ModelConfig, TrainConfig
from .embedding import ALL_MODES, Mode, crop_region, grounding_view, tokenize_language
from .losses import LossBreakdown
from .model import Model, SceneBatch, compute_loss, forward, search_embeddings
from .world import SyntheticSequence, generate_sequence

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data


@dataclass
class TrainingScene:
    mode: Mode
    word_ids: np.ndarray
    word_valid: np.ndarray
    template: np.ndarray | None
    template_box: np.ndarray | None
    search: np.ndarray
    gt_box: np.ndarray                  # search-crop pixels
    search_transform: object
    sentence: list | None
    context_search: np.ndarray | None = None
    context_box: np.ndarray | None = None
    origin: tuple = ()                  # (sequence seed, template frame, search frame)


def build_pool(n: int, world_cfg, seed_base: int = 0) -> list:
    """Training sequences; frames kept in float32 to halve the footprint."""
    pool = []
    for k in range(n):
        seq = generate_sequence(seed_base + k, world_cfg)
        seq.frames = seq.frames.astype(np.float32)
        pool.append(seq)
    return pool


def _jittered_crop(rng, frame, ref_box, gt_box, factor, out_side, jitter):
    """Search crop around ``ref_box`` with centre/scale jitter, keeping the gt centre inside."""
    x, y, w, h = ref_box
    side = np.sqrt(factor * w * h)
    shift = rng.normal(0.0, jitter * side, size=2)
    gx, gy = gt_box[0] + gt_box[2] / 2, gt_box[1] + gt_box[3] / 2
    cx, cy = x + w / 2 + shift[0], y + h / 2 + shift[1]
    limit = 0.35 * side
    cx = np.clip(cx, gx - limit, gx + limit)
    cy = np.clip(cy, gy - limit, gy + limit)
    s = np.exp(rng.normal(0.0, jitter))
    w2, h2 = w * s, h * s
    return crop_region(frame, (cx - w2 / 2, cy - h2 / 2, w2, h2), factor, out_side)


def sample_training_scene(rng, dataset, mode_ratio, cfg: ModelConfig, tcfg: TrainConfig | None = None):
    """Draw one scene: a mode by ``mode_ratio``, template frame i, search frame j > i."""
    if not dataset:
        raise TrainingError("empty training dataset")
    tcfg = tcfg or TrainConfig()
    w = np.asarray(mode_ratio, float)
    mode = ALL_MODES[rng.choice(3, p=w / w.sum())]
    seq: SyntheticSequence = dataset[rng.integers(len(dataset))]
    t = len(seq)
    j = int(rng.integers(1, t))
    i = int(rng.integers(max(0, j - tcfg.max_gap), j))
    frame_j = np.asarray(seq.frames[j], float)

    if mode == Mode.BBOX:
        ids, valid = np.zeros(cfg.max_words, np.int64), np.zeros(cfg.max_words, bool)
        sentence = None
    else:
        ids, valid = tokenize_language(seq.sentence, cfg.vocab, cfg.max_words)
        sentence = list(seq.sentence)

    if mode == Mode.NL:
        search, tf = grounding_view(frame_j, cfg.search_h, cfg.search_w)
        return TrainingScene(mode, ids, valid, None, None, search, tf.to_crop(seq.gt_boxes[j]), tf, sentence,
                             origin=(seq.seed, i, j))

    template, ttf = crop_region(np.asarray(seq.frames[i], float), seq.gt_boxes[i], cfg.template_factor,
                                cfg.template_h)
    search, tf = _jittered_crop(rng, frame_j, seq.gt_boxes[j - 1], seq.gt_boxes[j], cfg.search_factor,
                                cfg.search_h, tcfg.search_jitter)
    scene = TrainingScene(mode, ids, valid, template, ttf.to_crop(seq.gt_boxes[i]), search,
                          tf.to_crop(seq.gt_boxes[j]), tf, sentence, origin=(seq.seed, i, j))
    if rng.random() < tcfg.context_prob:
        k = int(rng.integers(i, j))
        ref = seq.gt_boxes[max(k - 1, 0)]
        csearch, ctf = _jittered_crop(rng, np.asarray(seq.frames[k], float), ref, seq.gt_boxes[k],
                                      cfg.search_factor, cfg.search_h, tcfg.search_jitter)
        scene.context_search = csearch
        scene.context_box = ctf.to_crop(seq.gt_boxes[k])
    return scene


def collate(scenes, model: Model | None = None) -> SceneBatch:
    """Stack scenes into a batch; context embeddings come from a gradient-free forward."""
    batch = SceneBatch(
        modes=[s.mode for s in scenes],
        word_ids=np.stack([s.word_ids for s in scenes]),
        word_valid=np.stack([s.word_valid for s in scenes]),
        templates=[s.template for s in scenes],
        template_boxes=[s.template_box for s in scenes],
        searches=np.stack([s.search for s in scenes]),
        gt_boxes=np.stack([s.gt_box for s in scenes]),
        context_boxes=[None] * len(scenes),
    )
    with_ctx = [k for k, s in enumerate(scenes) if s.context_search is not None]
    if with_ctx and model is not None:
        sub = [scenes[k] for k in with_ctx]
        cbatch = SceneBatch(
            modes=[s.mode for s in sub],
            word_ids=np.stack([s.word_ids for s in sub]),
            word_valid=np.stack([s.word_valid for s in sub]),
            templates=[s.template for s in sub],
            template_boxes=[s.template_box for s in sub],
            searches=np.stack([s.context_search for s in sub]),
        )
        with nx.no_grad():
            emb = search_embeddings(forward(model, cbatch))
        ctx = np.zeros((len(scenes), model.cfg.n_search, model.cfg.width))
        for row, k in enumerate(with_ctx):
            ctx[k] = emb[row]
            batch.context_boxes[k] = scenes[k].context_box
        batch.context_emb = ctx
    return batch


# ---------------------------------------------------------------------------
# optimization


class AdamW:
    """Adaptive moments with decoupled weight decay on matrices only.

    A tensor whose gradient is exactly zero this step is left alone, moments
    and decay included, so unused branches stay put.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None or not g.any():
                continue
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and p.data.ndim >= 2:
                update = update + self.wd * p.data
            p.data -= self.lr * update


class SGD:
    def __init__(self, params, lr=1e-3, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.wd = lr, weight_decay

    def step(self):
        for p in self.params:
            if p.grad is not None and p.grad.any():
                p.data -= self.lr * (p.grad + self.wd * p.data)


def make_optimizer(model: Model, tcfg: TrainConfig):
    if tcfg.optimizer == "adamw":
        return AdamW(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    return SGD(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)


def clip_gradients(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def train_step(model: Model, scenes, tcfg: TrainConfig, optimizer) -> LossBreakdown:
    """One optimizer update on a list of scenes; returns the loss breakdown."""
    origins = [s.origin for s in scenes]
    try:
        batch = collate(scenes, model)
        model.zero_grad()
        out = forward(model, batch)
        total, breakdown = compute_loss(model, batch, out)
    except nx.NumericError as exc:
        raise TrainingError(f"{exc}; scenes (seed, i, j) = {origins}") from exc
    if not np.isfinite(breakdown.total):
        raise TrainingError(f"non-finite loss; scenes (seed, i, j) = {origins}")
    nx.backward(total)
    clip_gradients(model.parameters(), tcfg.grad_clip)
    optimizer.step()
    return breakdown


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)     # one LossBreakdown per step
    seconds: float = 0.0


def train(cfg: ExperimentConfig, pool=None, on_step=None, checkpoint_dir=None) -> TrainResult:
    """Run ``cfg.train.steps`` updates from a fresh model seeded by ``cfg.train.seed``."""
    tcfg = cfg.train
    start = time.perf_counter()
    model = Model(cfg.model, seed=tcfg.seed)
    if pool is None:
        pool = build_pool(tcfg.pool_sequences, cfg.world)
    rng = np.random.default_rng([tcfg.seed, 7919])
    opt = make_optimizer(model, tcfg)
    history = []
    for step in range(tcfg.steps):
        scenes = [sample_training_scene(rng, pool, tcfg.mode_ratio, cfg.model, tcfg)
                  for _ in range(tcfg.batch_size)]
        bd = train_step(model, scenes, tcfg, opt)
        history.append(bd)
        if on_step is not None:
            on_step(step, bd)
        if tcfg.log_every and (step + 1) % tcfg.log_every == 0:
            recent = np.mean([h.total for h in history[-tcfg.log_every:]])
            log.info("step %d loss %.4f (%.0fs)", step + 1, recent, time.perf_counter() - start)
        if checkpoint_dir and tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
            save_checkpoint(model, Path(checkpoint_dir) / f"step_{step + 1:06d}.ckpt")
    return TrainResult(model, history, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   8s   magic "VLTCKPT\0"
#   u32  format version
#   16s  model-config digest (ascii hex)
#   u32  config JSON length, then the JSON bytes
#   u32  blob count, then per blob:
#        u16 name length, name (utf-8), u8 ndim, u32 * ndim shape, float64 data
#   32s  sha256 of every preceding byte

MAGIC = b"VLTCKPT\0"
CHECKPOINT_VERSION = 1


def model_digest(cfg: ModelConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(model_digest(model.cfg).encode("ascii"))
    cfg_json = json.dumps(asdict(model.cfg), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    named = model.named_parameters()
    buf.write(struct.pack("<I", len(named)))
    for name in sorted(named):
        data = np.ascontiguousarray(named[name].data, dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: Model, path):
    atomic_write_bytes(path, checkpoint_bytes(model))
    return Path(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected: ModelConfig | None = None) -> Model:
    """Read a checkpoint; with ``expected`` set, every differing config field is reported."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 36 or data[:len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)" if len(data) >= len(MAGIC) else "checkpoint is truncated")
    body, tail = data[:-32], data[-32:]
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    if hashlib.sha256(body).digest() != tail:
        raise FormatError("checkpoint is truncated or corrupted (checksum mismatch)")
    digest = r.take(16).decode("ascii")
    (n_json,) = r.unpack("<I")
    raw_cfg = json.loads(r.take(n_json))
    cfg = ModelConfig(**raw_cfg)
    if model_digest(cfg) != digest:
        raise FormatError("config digest does not match the stored config")
    if expected is not None:
        want = asdict(expected)
        diff = sorted(k for k in want if want[k] != raw_cfg.get(k))
        if diff:
            detail = ", ".join(f"{k}: file={raw_cfg.get(k)!r} expected={want[k]!r}" for k in diff)
            raise FormatError(f"checkpoint config mismatch in {detail}")
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(float)
    model = Model(cfg)
    named = model.named_parameters()
    missing = sorted(set(named) - set(state))
    extra = sorted(set(state) - set(named))
    if missing or extra:
        raise FormatError(f"parameter set mismatch; missing {missing}, unexpected {extra}")
    for name, prm in named.items():
        if prm.data.shape != state[name].shape:
            raise FormatError(f"parameter {name} has shape {state[name].shape}, expected {prm.data.shape}")
    model.load_state(state)
    return model

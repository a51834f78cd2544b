"""Sequence-level tracking: first-frame initialization, per-frame search, context memory."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .embedding import (CropTransform, Mode, ReferenceSetting, crop_region, grounding_view,
                        tokenize_language)
from .head import BoxPrediction
from .model import Model, SceneBatch, decode, forward, search_embeddings
from .world import Metrics, SyntheticSequence, box_iou, evaluate_metrics, generate_sequence

log = logging.getLogger(__name__)


class TrackingError(RuntimeError):
    pass


@dataclass
class ContextSlot:
    embeddings: np.ndarray      # (N_x, C) final search embeddings
    box: np.ndarray             # (x, y, w, h) in that search crop's pixels
    confidence: float


@dataclass
class TrackerState:
    setting: ReferenceSetting
    track_mode: Mode
    word_ids: np.ndarray
    word_valid: np.ndarray
    template: np.ndarray | None = None
    template_box: np.ndarray | None = None
    template_emb: np.ndarray | None = None
    context: ContextSlot | None = None
    prev_box: np.ndarray | None = None
    frame_index: int = 0
    grounding_confidence: float | None = None
    grounding_failed: bool = False


class ModelPredictor:
    """Runs the network on a one-scene batch and decodes its box."""

    def __init__(self, model: Model):
        self.model = model
        self.cfg = model.cfg

    def __call__(self, batch: SceneBatch, transforms, frame_index: int):
        out = forward(self.model, batch)
        for name, t in (("center", out.center), ("target", out.target), ("size", out.size)):
            if not np.all(np.isfinite(t.data)):
                raise nx.NumericError(f"non-finite {name} map at frame {frame_index}")
        return decode(self.model, out), search_embeddings(out), out


def _clamp_box(box, frame_h, frame_w, min_side=1.0):
    x, y, w, h = box
    x1, y1 = np.clip(x, 0, frame_w - min_side), np.clip(y, 0, frame_h - min_side)
    x2, y2 = np.clip(x + w, x1 + min_side, frame_w), np.clip(y + h, y1 + min_side, frame_h)
    return np.array([x1, y1, x2 - x1, y2 - y1])


def _center_to_xywh(box):
    cx, cy, w, h = box
    return np.array([cx - w / 2, cy - h / 2, w, h])


class Tracker:
    """One parameter set, three reference settings.

    ``predictor`` maps (SceneBatch, transforms, frame_index) to
    (predictions, search embeddings, raw output); the default wraps the model.
    """

    def __init__(self, model: Model, predictor=None):
        self.model = model
        self.cfg = model.cfg
        self.predict = predictor or ModelPredictor(model)

    # -- helpers --------------------------------------------------------------

    def _batch(self, state: TrackerState, mode: Mode, search, with_context: bool):
        cfg = self.cfg
        uses_template = mode in (Mode.BBOX, Mode.NL_BBOX)
        ctx = state.context if with_context else None
        return SceneBatch(
            modes=[mode],
            word_ids=state.word_ids[None],
            word_valid=state.word_valid[None] if mode != Mode.BBOX else np.zeros((1, cfg.max_words), bool),
            templates=[state.template if uses_template else None],
            template_boxes=[state.template_box if uses_template else None],
            searches=np.asarray(search)[None],
            context_emb=None if ctx is None else ctx.embeddings[None],
            context_boxes=[None if ctx is None else ctx.box],
        )

    def _cache_template(self, state: TrackerState, frame, box):
        cfg = self.cfg
        crop, tf = crop_region(frame, box, cfg.template_factor, cfg.template_h)
        state.template = crop
        state.template_box = tf.to_crop(box)

    # -- public API -----------------------------------------------------------

    def initialize(self, setting: ReferenceSetting, frame):
        cfg = self.cfg
        frame = np.asarray(frame, float)
        if setting.mode == Mode.BBOX:
            ids, valid = np.zeros(cfg.max_words, np.int64), np.zeros(cfg.max_words, bool)
        else:
            ids, valid = tokenize_language(setting.sentence, cfg.vocab, cfg.max_words)
        track_mode = Mode.NL_BBOX if setting.mode == Mode.NL else setting.mode
        state = TrackerState(setting, track_mode, ids, valid)

        if setting.mode == Mode.NL:
            view, tf = grounding_view(frame, cfg.search_h, cfg.search_w)
            preds, _, _ = self.predict(self._batch(state, Mode.NL, view, False), [tf], 0)
            pred = preds[0]
            box = _clamp_box(tf.to_frame(pred.xywh), *frame.shape[:2])
            state.grounding_confidence = pred.confidence
            if pred.confidence < cfg.grounding_floor:
                state.grounding_failed = True
                log.warning("grounding confidence %.3f below floor %.3f", pred.confidence, cfg.grounding_floor)
        else:
            box = np.asarray(setting.init_box, float)

        self._cache_template(state, frame, box)
        # template embeddings as seen from the first frame
        search, tf = crop_region(frame, box, cfg.search_factor, cfg.search_h)
        _, _, out = self.predict(self._batch(state, track_mode, search, False), [tf], 0)
        if out is not None:
            tr = out.layouts[0].template_range
            state.template_emb = out.ext.final.data[0, tr].copy()
        state.prev_box = box
        state.frame_index = 0
        return state, box.copy()

    def track_step(self, state: TrackerState, frame):
        cfg = self.cfg
        frame = np.asarray(frame, float)
        state = replace(state)
        state.frame_index += 1
        search, tf = crop_region(frame, state.prev_box, cfg.search_factor, cfg.search_h)
        batch = self._batch(state, state.track_mode, search, state.context is not None)
        try:
            preds, emb, _ = self.predict(batch, [tf], state.frame_index)
        except nx.NumericError as exc:
            raise TrackingError(f"frame {state.frame_index}: {exc}") from exc
        pred: BoxPrediction = preds[0]
        box = _clamp_box(tf.to_frame(pred.xywh), *frame.shape[:2])
        if pred.confidence >= cfg.ctx_threshold:
            state.context = ContextSlot(emb[0], pred.xywh.copy(), pred.confidence)
        state.prev_box = box
        return box, pred.confidence, state

    def run_sequence(self, setting: ReferenceSetting, seq: SyntheticSequence,
                     precision_threshold: float = 4.0):
        if len(seq) < 2:
            raise TrackingError("sequence needs at least two frames")
        state, box = self.initialize(setting, seq.frames[0])
        conf0 = state.grounding_confidence if state.grounding_confidence is not None else 1.0
        traj = [TrajectoryRecord(0, box, conf0)]
        for t in range(1, len(seq)):
            box, conf, state = self.track_step(state, seq.frames[t])
            traj.append(TrajectoryRecord(t, box, conf))
        metrics = evaluate_metrics([r.box for r in traj], seq.gt_boxes, precision_threshold)
        return traj, metrics


@dataclass
class TrajectoryRecord:
    frame: int
    box: np.ndarray
    confidence: float


TRAJECTORY_HEADER = "frame,x,y,w,h,confidence"


def format_trajectory(records) -> str:
    lines = [TRAJECTORY_HEADER]
    for r in records:
        x, y, w, h = (float(v) for v in r.box)
        lines.append(f"{r.frame:d},{x:.6f},{y:.6f},{w:.6f},{h:.6f},{float(r.confidence):.6f}")
    return "\n".join(lines) + "\n"


def parse_trajectory(text: str) -> list:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != TRAJECTORY_HEADER:
        raise ValueError("trajectory file lacks the expected header")
    out = []
    for ln in lines[1:]:
        f, x, y, w, h, c = ln.split(",")
        out.append(TrajectoryRecord(int(f), np.array([float(x), float(y), float(w), float(h)]), float(c)))
    return out


def setting_for(mode: Mode, seq: SyntheticSequence) -> ReferenceSetting:
    mode = Mode(mode)
    return ReferenceSetting(
        mode,
        sentence=list(seq.sentence) if mode != Mode.BBOX else None,
        init_box=tuple(seq.gt_boxes[0]) if mode != Mode.NL else None,
    )


@dataclass
class SettingReport:
    """Frame-weighted metrics over many sequences, plus per-sequence detail."""

    metrics: Metrics
    per_sequence: list = field(default_factory=list)
    ious: np.ndarray | None = None
    grounding_failures: int = 0


def evaluation_sequences(world_cfg, eval_cfg) -> list:
    wc = replace(world_cfg, n_frames=eval_cfg.n_frames)
    return [generate_sequence(eval_cfg.seed_offset + k, wc) for k in range(eval_cfg.n_sequences)]


def evaluate_model(model: Model, sequences, modes, precision_threshold: float = 4.0) -> dict:
    """Track every sequence in every mode with one parameter set."""
    tracker = Tracker(model)
    out = {}
    for mode in modes:
        mode = Mode(mode)
        preds, gts, per_seq, failures = [], [], [], 0
        for seq in sequences:
            setting = setting_for(mode, seq)
            traj, m = tracker.run_sequence(setting, seq, precision_threshold)
            preds.extend(r.box for r in traj)
            gts.extend(seq.gt_boxes)
            per_seq.append(m)
            if mode == Mode.NL and traj[0].confidence < model.cfg.grounding_floor:
                failures += 1
        overall = evaluate_metrics(preds, gts, precision_threshold)
        out[mode] = SettingReport(overall, per_seq, box_iou(np.asarray(preds), np.asarray(gts)), failures)
    return out

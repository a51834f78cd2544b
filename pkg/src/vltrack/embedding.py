"""Token assembly: language ids, image crops, patch embeddings, NA zero-fill.

Images are float arrays laid out row-major as (H, W, 3).  Boxes are
(x, y, w, h) in pixels with continuous coordinates: pixel (r, c) covers
[c, c+1) x [r, r+1).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from . import numerics as nx


class Mode(str, Enum):
    BBOX = "bbox"
    NL = "nl"
    NL_BBOX = "nl+bbox"

    @classmethod
    def parse(cls, text: str) -> "Mode":
        for m in cls:
            if m.value == text.lower() or m.name == text.upper():
                return m
        raise ValueError(f"unknown mode {text!r}")


ALL_MODES = (Mode.BBOX, Mode.NL, Mode.NL_BBOX)


class VocabularyError(KeyError):
    pass


class LengthError(ValueError):
    pass


class GeometryError(ValueError):
    pass


class ContractError(ValueError):
    pass


@dataclass
class ReferenceSetting:
    mode: Mode
    sentence: list | None = None
    init_box: tuple | None = None

    def __post_init__(self):
        self.mode = Mode(self.mode)
        needs_box = self.mode in (Mode.BBOX, Mode.NL_BBOX)
        needs_text = self.mode in (Mode.NL, Mode.NL_BBOX)
        if needs_box and self.init_box is None:
            raise ContractError(f"{self.mode.value} mode needs an initial box")
        if needs_text and not self.sentence:
            raise ContractError(f"{self.mode.value} mode needs a sentence")


def tokenize_language(sentence, vocab, max_words: int):
    """Map words to ids, right-padded with id 0; returns (ids, valid)."""
    words = list(sentence or [])
    if len(words) > max_words:
        raise LengthError(f"sentence has {len(words)} words, limit is {max_words}")
    index = {w: i for i, w in enumerate(vocab)}
    ids = np.zeros(max_words, dtype=np.int64)
    for k, w in enumerate(words):
        if w not in index or index[w] == 0:
            raise VocabularyError(f"word {w!r} is not in the vocabulary")
        ids[k] = index[w]
    valid = np.zeros(max_words, dtype=bool)
    valid[:len(words)] = True
    return ids, valid


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class CropTransform:
    """Maps crop pixel coordinates to frame coordinates: frame = origin + scale * crop."""

    x0: float
    y0: float
    scale_x: float
    scale_y: float

    def to_frame(self, box):
        x, y, w, h = box
        return np.array([self.x0 + x * self.scale_x, self.y0 + y * self.scale_y,
                         w * self.scale_x, h * self.scale_y])

    def to_crop(self, box):
        x, y, w, h = box
        return np.array([(x - self.x0) / self.scale_x, (y - self.y0) / self.scale_y,
                         w / self.scale_x, h / self.scale_y])


def _resample(frame, x0, y0, sx, sy, out_h, out_w, fill):
    rows = y0 + (np.arange(out_h) + 0.5) * sy - 0.5
    cols = x0 + (np.arange(out_w) + 0.5) * sx - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    out = np.empty((out_h, out_w, frame.shape[2]))
    for ch in range(frame.shape[2]):
        out[..., ch] = ndimage.map_coordinates(frame[..., ch], [rr, cc], order=1,
                                               mode="constant", cval=float(fill[ch]))
    return out


def crop_region(frame, box, area_factor: float, out_side: int, fill=None):
    """Square crop of area ``area_factor * w * h`` centred on ``box``, resized bilinearly.

    Out-of-frame pixels take ``fill`` (default: the frame's per-channel mean).
    Returns the crop and the transform back to frame coordinates.
    """
    x, y, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise GeometryError(f"degenerate box {box}")
    side = np.sqrt(area_factor) * np.sqrt(w * h)
    cx, cy = x + w / 2, y + h / 2
    scale = side / out_side
    tf = CropTransform(cx - side / 2, cy - side / 2, scale, scale)
    fill = frame.reshape(-1, frame.shape[-1]).mean(axis=0) if fill is None else np.broadcast_to(fill, frame.shape[-1:])
    crop = _resample(frame, tf.x0, tf.y0, scale, scale, out_side, out_side, fill)
    return crop, tf


def grounding_view(frame, out_h: int, out_w: int, fill=None):
    """Whole frame scaled so its long edge fills the search side, padded at bottom/right."""
    h, w = frame.shape[:2]
    scale = max(h / out_h, w / out_w)
    fill = frame.reshape(-1, frame.shape[-1]).mean(axis=0) if fill is None else np.broadcast_to(fill, frame.shape[-1:])
    tf = CropTransform(0.0, 0.0, scale, scale)
    if scale == 1.0 and (h, w) == (out_h, out_w):
        return np.array(frame, dtype=float), tf
    return _resample(frame, 0.0, 0.0, scale, scale, out_h, out_w, fill), tf


def patchify(images, p: int) -> np.ndarray:
    """(B, H, W, ch) -> (B, (H/p)(W/p), p*p*ch), patches in row-major order."""
    images = np.asarray(images, float)
    if images.ndim == 3:
        images = images[None]
    b, h, w, ch = images.shape
    if h % p or w % p:
        raise nx.ShapeError(f"patch size {p} does not divide {h}x{w}")
    x = images.reshape(b, h // p, p, w // p, p, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * ch)


def patch_embed(images, p: int, weight, bias, pos) -> nx.Tensor:
    tokens = nx.linear(patchify(images, p), weight, bias)
    return nx.add(tokens, pos)


# ---------------------------------------------------------------------------
# token layout


@dataclass(frozen=True)
class TokenLayout:
    """Contiguous ranges [T_l | E_l | T_v | E_z | E_x] plus per-range availability."""

    n_words: int
    n_template: int
    n_search: int
    language: bool
    template: bool
    word_valid: tuple = ()

    @property
    def lang_token(self):
        return 0

    @property
    def words(self):
        return slice(1, 1 + self.n_words)

    @property
    def vis_token(self):
        return 1 + self.n_words

    @property
    def template_range(self):
        s = 2 + self.n_words
        return slice(s, s + self.n_template)

    @property
    def search_range(self):
        s = 2 + self.n_words + self.n_template
        return slice(s, s + self.n_search)

    @property
    def size(self):
        return 2 + self.n_words + self.n_template + self.n_search

    def available(self) -> np.ndarray:
        a = np.ones(self.size, dtype=bool)
        a[: 1 + self.n_words] = self.language
        a[self.template_range] = self.template
        return a

    def key_valid(self) -> np.ndarray:
        """Available tokens that may be attended to (pad words excluded)."""
        k = self.available()
        if self.language:
            k[self.words] = np.asarray(self.word_valid, dtype=bool)
        return k

    def language_group(self) -> np.ndarray:
        g = np.zeros(self.size, dtype=bool)
        g[: 1 + self.n_words] = True
        return g


def make_layout(cfg, mode: Mode, word_valid=None) -> TokenLayout:
    mode = Mode(mode)
    lang = mode in (Mode.NL, Mode.NL_BBOX)
    templ = mode in (Mode.BBOX, Mode.NL_BBOX)
    wv = tuple(bool(v) for v in (word_valid if word_valid is not None else np.zeros(cfg.max_words, bool)))
    if lang and not any(wv):
        raise ContractError("language available but the sentence is empty")
    return TokenLayout(cfg.max_words, cfg.n_template, cfg.n_search, lang, templ, wv)


def embed_scene(params: dict, cfg, layouts, word_ids, templates, searches) -> nx.Tensor:
    """Assemble the (B, T, C) token sequence; NA ranges are exactly zero.

    ``templates`` may contain ``None`` for samples without a template.
    """
    b = len(layouts)
    c = cfg.width
    lang_on = np.array([lay.language for lay in layouts], float)[:, None, None]
    tmpl_on = np.array([lay.template for lay in layouts], float)[:, None, None]

    words = nx.add(nx.take(params["word_emb"], np.asarray(word_ids), axis=0), params["pos_lang"])
    t_l = nx.add(params["tok_lang"], np.zeros((b, 1, c)))
    lang = nx.mul(nx.concat([t_l, words], axis=1), lang_on)

    blank = np.zeros((cfg.template_h, cfg.template_w, 3))
    timgs = np.stack([blank if t is None else np.asarray(t, float) for t in templates])
    e_z = nx.mul(patch_embed(timgs, cfg.patch, params["patch_w"], params["patch_b"], params["pos_template"]), tmpl_on)
    e_x = patch_embed(np.stack(searches), cfg.patch, params["patch_w"], params["patch_b"], params["pos_search"])
    t_v = nx.add(params["tok_vis"], np.zeros((b, 1, c)))
    return nx.concat([lang, t_v, e_z, e_x], axis=1)

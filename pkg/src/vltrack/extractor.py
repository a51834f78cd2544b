"""Modality-unified feature extractor with task-oriented attention masks."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import numerics as nx
from .embedding import TokenLayout

SHALLOW = "shallow"
DEEP = "deep"


@lru_cache(maxsize=256)
def _cached_mask(layout: TokenLayout, depth_kind: str) -> np.ndarray:
    m = build_attention_mask(layout, depth_kind)
    m.flags.writeable = False
    return m


@lru_cache(maxsize=64)
def batch_masks(layouts: tuple) -> dict:
    return {kind: np.stack([_cached_mask(lay, kind) for lay in layouts]) for kind in (SHALLOW, DEEP)}


def build_attention_mask(layout: TokenLayout, depth_kind: str) -> np.ndarray:
    """Additive (T, T) mask, rows = queries, columns = keys.

    NA tokens only see themselves.  Shallow layers keep the language group
    {T_l, E_l} and the visual group {T_v, E_z, E_x} apart; deep layers let
    every available token see every available key.  Pad words are never keys.
    """
    avail = layout.available()
    keys = layout.key_valid()
    allowed = avail[:, None] & keys[None, :]
    if depth_kind == SHALLOW:
        g = layout.language_group()
        allowed &= g[:, None] == g[None, :]
    elif depth_kind != DEEP:
        raise ValueError(f"unknown depth kind {depth_kind!r}")
    na = np.flatnonzero(~avail)
    allowed[na, na] = True
    return np.where(allowed, 0.0, nx.NEG_INF)


@dataclass
class ExtractorOutput:
    final: nx.Tensor            # (B, T, C) after the closing normalization
    semantic: list              # per layer (B, C) semantic token
    search: list                # per layer (B, N_x, C)
    semantic_final: nx.Tensor   # (B, C), taken from ``final``
    semantic_index: np.ndarray  # (B,) which token served as semantic token


def semantic_index(layout: TokenLayout) -> int:
    return layout.lang_token if layout.language else layout.vis_token


def layer_kinds(cfg) -> list:
    return [SHALLOW] * cfg.shallow_layers + [DEEP] * cfg.deep_layers


def extract_features(params: dict, cfg, layouts, embeddings: nx.Tensor) -> ExtractorOutput:
    sem = np.array([semantic_index(lay) for lay in layouts])
    search = layouts[0].search_range
    masks = batch_masks(tuple(layouts))
    e = embeddings
    sems, searches = [], []
    for i, kind in enumerate(layer_kinds(cfg)):
        e = nx.encoder_layer(e, masks[kind], params[f"layer{i}"], cfg.heads, index=i, eps=cfg.ln_eps)
        sems.append(nx.select(e, sem))
        searches.append(nx.slice_axis(e, search.start, search.stop, axis=1))
    if cfg.final_norm:
        final = nx.layer_norm(e, params["final_ln_g"], params["final_ln_b"], cfg.ln_eps)
    else:
        final = e
    return ExtractorOutput(final, sems, searches, nx.select(final, sem), sem)

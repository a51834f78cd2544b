"""The full tracker network: embedding -> extractor -> head, plus its objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import numerics as nx
from .config import ModelConfig
from .embedding import Mode, TokenLayout, embed_scene, make_layout
from .extractor import ExtractorOutput, extract_features
from .head import (BoxPrediction, PrototypeSet, aggregate_prototypes, decode_box, inbox_patches,
                   init_head_params, make_context, predict_maps, target_score_map)


class Model:
    """Parameter container; all weights are float64 :class:`Parameter` objects."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c, std = cfg.width, cfg.init_std
        patch_dim = cfg.patch * cfg.patch * 3

        def normal(name, *shape):
            return nx.Parameter(rng.normal(0.0, std, size=shape), name)

        p = {
            "word_emb": normal("embed.word_emb", len(cfg.vocab), c),
            "pos_lang": normal("embed.pos_lang", cfg.max_words, c),
            "tok_lang": normal("embed.tok_lang", 1, c),
            "tok_vis": normal("embed.tok_vis", 1, c),
            "patch_w": normal("embed.patch_w", patch_dim, c),
            "patch_b": nx.Parameter(np.zeros(c), "embed.patch_b"),
            "pos_template": normal("embed.pos_template", cfg.n_template, c),
            "pos_search": normal("embed.pos_search", cfg.n_search, c),
        }
        for i in range(cfg.shallow_layers + cfg.deep_layers):
            p[f"layer{i}"] = nx.init_layer_params(rng, c, c * cfg.mlp_ratio, std, prefix=f"layer{i}.")
        if cfg.final_norm:
            p["final_ln_g"] = nx.Parameter(np.ones(c), "final_ln_g")
            p["final_ln_b"] = nx.Parameter(np.zeros(c), "final_ln_b")
        self.params = p
        self.head = init_head_params(rng, c)

    def named_parameters(self) -> dict:
        out = {}
        for key, value in self.params.items():
            if isinstance(value, dict):
                for sub, prm in value.items():
                    out[prm.name] = prm
            else:
                out[value.name] = value
        for prm in self.head.values():
            out[prm.name] = prm
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def zero_grad(self):
        nx.zero_grads(self.parameters())

    def state(self) -> dict:
        return {name: prm.data.copy() for name, prm in self.named_parameters().items()}

    def load_state(self, state: dict):
        named = self.named_parameters()
        for name, prm in named.items():
            prm.data[...] = state[name]


@dataclass
class SceneBatch:
    """One batch of scenes sharing the token layout size.

    Boxes are (x, y, w, h) in the pixel frame of the image they refer to:
    template boxes in template-crop pixels, search/context boxes in search
    pixels.
    """

    modes: list
    word_ids: np.ndarray
    word_valid: np.ndarray
    templates: list
    template_boxes: list
    searches: np.ndarray
    context_emb: np.ndarray | None = None
    context_boxes: list = field(default_factory=list)
    gt_boxes: np.ndarray | None = None

    def __len__(self):
        return len(self.modes)


@dataclass
class ForwardOutput:
    layouts: list
    ext: ExtractorOutput
    protos: PrototypeSet
    target: nx.Tensor       # (B, N_x)
    center: nx.Tensor       # (B, H, W)
    offset: nx.Tensor       # (B, H, W, 2)
    size: nx.Tensor         # (B, H, W, 2)


def _layouts(cfg, batch: SceneBatch):
    return [make_layout(cfg, m, batch.word_valid[i]) for i, m in enumerate(batch.modes)]


def embed(model: Model, batch: SceneBatch, layouts=None):
    """Token embeddings (B, T, C) and the layouts they follow."""
    layouts = layouts or _layouts(model.cfg, batch)
    return embed_scene(model.params, model.cfg, layouts, batch.word_ids, batch.templates, batch.searches), layouts


def forward(model: Model, batch: SceneBatch, layouts=None) -> ForwardOutput:
    emb, layouts = embed(model, batch, layouts)
    return forward_embedded(model, batch, layouts, emb)


def forward_embedded(model: Model, batch: SceneBatch, layouts, emb) -> ForwardOutput:
    """Extractor and head on precomputed embeddings."""
    cfg = model.cfg
    b = len(batch)
    ext = extract_features(model.params, cfg, layouts, nx.as_tensor(emb))

    tr = layouts[0].template_range
    sr = layouts[0].search_range
    e_z = nx.slice_axis(ext.final, tr.start, tr.stop, axis=1)
    e_x = nx.slice_axis(ext.final, sr.start, sr.stop, axis=1)

    t_on = np.array([lay.template for lay in layouts])
    t_in = np.zeros((b, cfg.n_template), bool)
    for i, box in enumerate(batch.template_boxes):
        if t_on[i]:
            t_in[i] = inbox_patches(box, cfg.template_grid, cfg.patch)
    c_on = np.zeros(b, bool)
    c_in = np.zeros((b, cfg.n_search), bool)
    ctx_emb = np.zeros((b, cfg.n_search, cfg.width))
    if batch.context_emb is not None:
        for i, box in enumerate(batch.context_boxes):
            if box is not None:
                c_on[i] = True
                c_in[i] = inbox_patches(box, cfg.search_grid, cfg.patch)
                ctx_emb[i] = batch.context_emb[i]
    ctx = make_context(e_z, t_in, t_on, ctx_emb, c_in, c_on)

    protos = aggregate_prototypes(ext.semantic_final, ctx, model.head["proto_d"], model.head["proto_b"], cfg.beta)
    target = target_score_map(e_x, protos.target, protos.distractor, protos.background, cfg.tau)
    center, offset, size = predict_maps(e_x, model.head, cfg.search_grid, cfg.ln_eps)
    return ForwardOutput(layouts, ext, protos, target, center, offset, size)


def compute_loss(model: Model, batch: SceneBatch, out: ForwardOutput):
    """Weighted objective for a batch with ``gt_boxes`` set; returns (total, breakdown)."""
    cfg = model.cfg
    b = len(batch)
    grid, p = cfg.search_grid, cfg.patch
    gh, gw = grid
    gt = np.asarray(batch.gt_boxes, float)

    labels = np.stack([L.inbox_labels(box, grid, p) for box in gt])
    l_tgt = L.target_map_loss(out.target, labels)

    cells = [L.center_cell(box, grid, p) for box in gt]
    heat = np.stack([L.gaussian_label(grid, cell) for cell in cells])
    l_cls = L.center_focal_loss(out.center, heat)

    rows = np.array([r for r, _ in cells])
    cols = np.array([c for _, c in cells])
    off = nx.select(out.offset, rows, cols)                     # (B, 2)
    siz = nx.select(out.size, rows, cols)
    base = np.stack([cols, rows], axis=1).astype(float)
    scale = np.array([p / cfg.search_w, p / cfg.search_h])
    centre = nx.mul(nx.add(off, base), scale)
    pred = nx.concat([centre, siz], axis=1)
    gt_norm = np.stack([(gt[:, 0] + gt[:, 2] / 2) / cfg.search_w, (gt[:, 1] + gt[:, 3] / 2) / cfg.search_h,
                        gt[:, 2] / cfg.search_w, gt[:, 3] / cfg.search_h], axis=1)
    l1, giou = L.box_loss(pred, gt_norm)

    mmc = []
    if cfg.lambda_mmc != 0:
        for tok, feats in zip(out.ext.semantic, out.ext.search):
            s = L.mmc_similarities(tok, feats, cfg.tau)
            picks = [L.mmc_sample(s.data[i], gt[i], grid, p, cfg.n_neg) for i in range(b)]
            mmc.append(L.mmc_loss(s, [q for q, _ in picks], [n for _, n in picks]))
    return L.total_loss({"l_tgt": l_tgt, "l_cls": l_cls, "l_l1": l1, "l_giou": giou, "l_mmc": mmc}, cfg)


def decode(model: Model, out: ForwardOutput) -> list:
    cfg = model.cfg
    gh, gw = cfg.search_grid
    preds = []
    for i in range(out.center.shape[0]):
        preds.append(decode_box(out.center.data[i], out.target.data[i].reshape(gh, gw), out.offset.data[i],
                                out.size.data[i], cfg.patch, cfg.search_h, cfg.search_w))
    return preds


def search_embeddings(out: ForwardOutput) -> np.ndarray:
    sr = out.layouts[0].search_range
    return out.ext.final.data[:, sr].copy()


__all__ = ["Model", "SceneBatch", "ForwardOutput", "embed", "forward", "forward_embedded", "compute_loss", "decode", "search_embeddings",
           "BoxPrediction", "Mode", "TokenLayout"]

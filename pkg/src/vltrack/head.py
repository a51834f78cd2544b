"""Modality-adaptive box head.

The semantic token attends over template/context embeddings split by the
reference box into in-box and out-box sets; the out-box set is further split
into distractors and background by cumulative attention mass.  Prototype
cosine scores give the target map, a small convolutional stack gives the
center/offset/size maps, and the box is decoded at the peak of their product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx


def patch_centers(grid, p: int):
    gh, gw = grid
    ys, xs = np.meshgrid((np.arange(gh) + 0.5) * p, (np.arange(gw) + 0.5) * p, indexing="ij")
    return xs.reshape(-1), ys.reshape(-1)


def inbox_patches(box, grid, p: int) -> np.ndarray:
    """Boolean per patch: centre strictly inside the box, else the patch holding the box centre."""
    x, y, w, h = box
    xs, ys = patch_centers(grid, p)
    inside = (xs > x) & (xs < x + w) & (ys > y) & (ys < y + h)
    if not inside.any():
        gh, gw = grid
        col = int(np.clip(np.floor((x + w / 2) / p), 0, gw - 1))
        row = int(np.clip(np.floor((y + h / 2) / p), 0, gh - 1))
        inside[row * gw + col] = True
    return inside


def build_box_masks(box, grid, p: int):
    """Additive in-box mask M_t and its complement."""
    inside = inbox_patches(box, grid, p)
    return np.where(inside, 0.0, nx.NEG_INF), np.where(inside, nx.NEG_INF, 0.0)


def split_distractor_background(a_out, beta: float, support=None):
    """Split the out-box set by the exclusive prefix sum of ranked probabilities.

    Patches are ranked by probability (descending, ties by ascending index); a
    patch is a distractor when the mass ranked strictly above it is below
    ``beta``.  Returns additive masks (M_d, M~_d) that only open out-box
    patches.
    """
    a_out = np.asarray(a_out, float)
    support = a_out > 0 if support is None else np.asarray(support, bool)
    idx = np.flatnonzero(support)
    m_d = np.full(a_out.shape, nx.NEG_INF)
    m_b = np.full(a_out.shape, nx.NEG_INF)
    if idx.size == 0:
        return m_d, m_b
    order = idx[np.lexsort((idx, -a_out[idx]))]
    prefix = np.concatenate([[0.0], np.cumsum(a_out[order])[:-1]])
    dis = prefix < beta
    m_d[order[dis]] = 0.0
    m_b[order[~dis]] = 0.0
    return m_d, m_b


@dataclass
class HeadContext:
    embeddings: nx.Tensor       # (B, n, C) = [E_z ; E_c]
    in_mask: np.ndarray         # (B, n) additive
    out_mask: np.ndarray        # (B, n) additive


def make_context(template_emb, template_in, template_on, context_emb, context_in, context_on) -> HeadContext:
    """Stack template and context tokens; unavailable parts are blocked in both masks.

    ``template_in``/``context_in`` are boolean in-box flags per token.
    """
    t_on = np.asarray(template_on, bool)[:, None]
    c_on = np.asarray(context_on, bool)[:, None]
    t_in = np.asarray(template_in, bool)
    c_in = np.asarray(context_in, bool)
    inside = np.concatenate([t_in & t_on, c_in & c_on], axis=1)
    outside = np.concatenate([~t_in & t_on, ~c_in & c_on], axis=1)
    emb = nx.concat([template_emb, nx.as_tensor(context_emb)], axis=1)
    return HeadContext(emb, np.where(inside, 0.0, nx.NEG_INF), np.where(outside, 0.0, nx.NEG_INF))


def _aggregate(weights: nx.Tensor, emb: nx.Tensor) -> nx.Tensor:
    b, n = weights.shape
    return nx.reshape(nx.matmul(nx.reshape(weights, (b, 1, n)), emb), (b, emb.shape[-1]))


def context_logits(token: nx.Tensor, ctx: HeadContext) -> nx.Tensor:
    b, c = token.shape
    raw = nx.matmul(ctx.embeddings, nx.reshape(token, (b, c, 1)))
    return nx.mul(nx.reshape(raw, (b, ctx.embeddings.shape[1])), 1.0 / math.sqrt(c))


def inbox_outbox_attention(token: nx.Tensor, ctx: HeadContext):
    """Returns (A_in, A_out, T_t); A_out is plain data, only its ranking is used."""
    logits = context_logits(token, ctx)
    a_in = nx.masked_softmax(logits, ctx.in_mask)
    a_out = nx._masked_softmax_forward(logits.data, ctx.out_mask)
    return a_in, a_out, _aggregate(a_in, ctx.embeddings)


@dataclass
class PrototypeSet:
    target: nx.Tensor
    distractor: nx.Tensor
    background: nx.Tensor
    t_target: nx.Tensor
    t_distractor: nx.Tensor
    t_background: nx.Tensor
    a_in: nx.Tensor
    a_out: np.ndarray
    distractor_mask: np.ndarray
    background_mask: np.ndarray


def aggregate_prototypes(token: nx.Tensor, ctx: HeadContext, proto_d, proto_b, beta: float) -> PrototypeSet:
    b = token.shape[0]
    logits = context_logits(token, ctx)
    a_in = nx.masked_softmax(logits, ctx.in_mask)
    a_out = nx._masked_softmax_forward(logits.data, ctx.out_mask)
    t_t = _aggregate(a_in, ctx.embeddings)
    m_d = np.empty_like(ctx.out_mask)
    m_b = np.empty_like(ctx.out_mask)
    for i in range(b):
        m_d[i], m_b[i] = split_distractor_background(a_out[i], beta, support=ctx.out_mask[i] == 0)
    t_d = _aggregate(nx.masked_softmax(logits, ctx.out_mask + m_d), ctx.embeddings)
    t_b = _aggregate(nx.masked_softmax(logits, ctx.out_mask + m_b), ctx.embeddings)
    return PrototypeSet(
        target=nx.add(token, t_t),
        distractor=nx.add(proto_d, t_d),
        background=nx.add(proto_b, t_b),
        t_target=t_t, t_distractor=t_d, t_background=t_b,
        a_in=a_in, a_out=a_out, distractor_mask=m_d, background_mask=m_b,
    )


def target_score_map(features, target, distractor, background, tau: float) -> nx.Tensor:
    """Per-patch target probability against distractor/background/zero scores."""
    a_t = nx.mul(nx.cosine_rows(features, target), 1.0 / tau)
    a_d = nx.mul(nx.cosine_rows(features, distractor), 1.0 / tau)
    a_b = nx.mul(nx.cosine_rows(features, background), 1.0 / tau)
    a_bg = nx.maximum([a_d, a_b, np.zeros(a_t.shape)])
    return nx.sigmoid(nx.sub(a_t, a_bg))


# ---------------------------------------------------------------------------
# convolutional branches

BRANCHES = {"ctr": 1, "off": 2, "size": 2}
N_STAGES = 4


def branch_widths(width: int) -> list:
    return [max(width >> (k + 1), 4) for k in range(N_STAGES)]


def init_head_params(rng, width: int) -> dict:
    def xavier(fan_in, fan_out, shape):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)

    params = {
        "proto_d": nx.Parameter(rng.normal(0.0, 1.0, size=width), "head.proto_d"),
        "proto_b": nx.Parameter(rng.normal(0.0, 1.0, size=width), "head.proto_b"),
    }
    for name, out_ch in BRANCHES.items():
        cin = width
        for k, cout in enumerate(branch_widths(width)):
            pre = f"head.{name}{k}"
            params[f"{name}{k}_w"] = nx.Parameter(xavier(9 * cin, 9 * cout, (9 * cin, cout)), pre + "_w")
            params[f"{name}{k}_b"] = nx.Parameter(np.zeros(cout), pre + "_b")
            params[f"{name}{k}_g"] = nx.Parameter(np.ones(cout), pre + "_g")
            params[f"{name}{k}_s"] = nx.Parameter(np.zeros(cout), pre + "_s")
            cin = cout
        params[f"{name}_out_w"] = nx.Parameter(xavier(cin, out_ch, (cin, out_ch)), f"head.{name}_out_w")
        params[f"{name}_out_b"] = nx.Parameter(np.zeros(out_ch), f"head.{name}_out_b")
    return params


def _branch(x, params, name, eps):
    for k in range(N_STAGES):
        x = nx.conv3x3(x, params[f"{name}{k}_w"], params[f"{name}{k}_b"])
        x = nx.relu(nx.layer_norm(x, params[f"{name}{k}_g"], params[f"{name}{k}_s"], eps))
    return nx.sigmoid(nx.linear(x, params[f"{name}_out_w"], params[f"{name}_out_b"]))


CENTER_CLAMP = 1e-4


def predict_maps(features: nx.Tensor, params: dict, grid, eps: float = 1e-6):
    """(B, N_x, C) embeddings -> center (B,H,W), offset (B,H,W,2), size (B,H,W,2)."""
    b, n, c = features.shape
    gh, gw = grid
    x = nx.reshape(features, (b, gh, gw, c))
    ctr = _branch(x, params, "ctr", eps)
    ctr = nx.clamp(nx.reshape(ctr, (b, gh, gw)), CENTER_CLAMP, 1 - CENTER_CLAMP)
    return ctr, _branch(x, params, "off", eps), _branch(x, params, "size", eps)


@dataclass
class BoxPrediction:
    center: np.ndarray          # (H, W)
    offset: np.ndarray          # (H, W, 2)
    size: np.ndarray            # (H, W, 2)
    target: np.ndarray          # (H, W)
    box: np.ndarray             # centre-format (cx, cy, w, h) in search pixels
    confidence: float
    peak: tuple                 # (row, col)

    @property
    def xywh(self):
        cx, cy, w, h = self.box
        return np.array([cx - w / 2, cy - h / 2, w, h])


def decode_box(center, target, offset, size, p: int, search_h: int, search_w: int) -> BoxPrediction:
    """Box at the argmax of center x target (first index wins ties), clamped to the image."""
    center = np.asarray(center, float)
    target = np.asarray(target, float).reshape(center.shape)
    score = center * target
    flat = int(np.argmax(score))
    row, col = divmod(flat, center.shape[1])
    cx = (col + offset[row, col, 0]) * p
    cy = (row + offset[row, col, 1]) * p
    w = size[row, col, 0] * search_w
    h = size[row, col, 1] * search_h
    box = np.array([cx, cy, w, h])
    if cx - w / 2 < 0 or cy - h / 2 < 0 or cx + w / 2 > search_w or cy + h / 2 > search_h:
        x1, y1 = np.clip(cx - w / 2, 0, search_w), np.clip(cy - h / 2, 0, search_h)
        x2, y2 = np.clip(cx + w / 2, 0, search_w), np.clip(cy + h / 2, 0, search_h)
        box = np.array([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1])
    return BoxPrediction(center, np.asarray(offset), np.asarray(size), target, box,
                         float(score[row, col]), (row, col))


def encode_box(box_xywh, grid, p: int, search_h: int, search_w: int):
    """Inverse construction: maps whose decode reproduces ``box`` (used by tests and stubs)."""
    gh, gw = grid
    x, y, w, h = box_xywh
    cx, cy = x + w / 2, y + h / 2
    col = int(np.clip(np.floor(cx / p), 0, gw - 1))
    row = int(np.clip(np.floor(cy / p), 0, gh - 1))
    center = np.full((gh, gw), 0.01)
    center[row, col] = 0.99
    offset = np.zeros((gh, gw, 2))
    offset[row, col] = (cx / p - col, cy / p - row)
    size = np.zeros((gh, gw, 2))
    size[row, col] = (w / search_w, h / search_h)
    return center, offset, size

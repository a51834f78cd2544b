"""Training objectives.

All functions take batched tensors (leading axis B) and return batch means,
so the total is the mean per-scene objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import numerics as nx


class LossContractError(ValueError):
    pass


def mmc_similarities(token, features, tau: float) -> nx.Tensor:
    """Cosine between the semantic token (B, C) and each search feature (B, N, C), over tau."""
    return nx.mul(nx.cosine_rows(features, token), 1.0 / tau)


@lru_cache(maxsize=32)
def _centres(grid, p: int):
    gh, gw = grid
    gx, gy = np.meshgrid((np.arange(gw) + 0.5) * p, (np.arange(gh) + 0.5) * p)
    return gx.reshape(-1), gy.reshape(-1)


def _inside(box, grid, p):
    gx, gy = _centres(tuple(grid), p)
    x, y, w, h = box
    return (gx > x) & (gx < x + w) & (gy > y) & (gy < y + h)


def center_cell(box, grid, p: int):
    x, y, w, h = box
    gh, gw = grid
    col = min(max(int((x + w / 2) // p), 0), gw - 1)
    row = min(max(int((y + h / 2) // p), 0), gh - 1)
    return row, col


def mmc_sample(scores, box, grid, p: int, n_neg: int):
    """Positive index (patch holding the box centre) and up to ``n_neg`` hardest out-box indices."""
    scores = np.asarray(scores, float)
    gw = grid[1]
    inside = _inside(box, grid, p)
    row, col = center_cell(box, grid, p)
    pos = row * gw + col
    outside = np.flatnonzero(~inside)
    outside = outside[outside != pos]
    if outside.size == 0:
        raise LossContractError("box covers every patch; no negatives available")
    order = outside[np.lexsort((outside, -scores[outside]))]
    return pos, order[:n_neg]


def mmc_loss(scores: nx.Tensor, positives, negatives) -> nx.Tensor:
    """-log softmax of the positive against its negatives, batch mean.

    ``negatives`` is a list of index arrays (lengths may differ).
    """
    b, n = scores.shape
    k = max(len(neg) for neg in negatives)
    idx = np.zeros((b, k + 1), dtype=np.int64)
    pad = np.zeros((b, k + 1))
    for i, (pos, neg) in enumerate(zip(positives, negatives)):
        idx[i, 0] = pos
        idx[i, 1:1 + len(neg)] = neg
        pad[i, 1 + len(neg):] = nx.NEG_INF
    picked = nx.select(scores, idx)
    lse = nx.logsumexp(nx.add(picked, pad), axis=-1)
    s_p = nx.select(scores, np.asarray(positives))
    return nx.mean(nx.sub(lse, s_p))


def inbox_labels(box, grid, p: int) -> np.ndarray:
    return _inside(box, grid, p).astype(float)


def _check_prob(t: nx.Tensor, what: str):
    if np.any(t.data <= 0) or np.any(t.data >= 1):
        raise nx.NumericError(f"{what} must lie strictly inside (0, 1)")


def target_map_loss(scores: nx.Tensor, labels) -> nx.Tensor:
    """Mean binary cross-entropy between the target map and the in-box indicator."""
    _check_prob(scores, "target scores")
    labels = np.asarray(labels, float)
    pos = nx.mul(nx.log(scores), labels)
    neg = nx.mul(nx.log(nx.sub(1.0, scores)), 1.0 - labels)
    return nx.mul(nx.mean(nx.add(pos, neg)), -1.0)


def gaussian_label(grid, cell, sigma: float = 1.0) -> np.ndarray:
    gh, gw = grid
    rr, cc = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    return np.exp(-((rr - cell[0]) ** 2 + (cc - cell[1]) ** 2) / (2 * sigma ** 2))


def center_focal_loss(center: nx.Tensor, labels, alpha: float = 2.0, gamma: float = 4.0) -> nx.Tensor:
    """Penalty-reduced focal loss against Gaussian heatmaps, normalized by positives.

    ``center`` and ``labels`` are (B, H, W); label value 1 marks the positive.
    """
    _check_prob(center, "center scores")
    labels = np.asarray(labels, float)
    b = center.shape[0]
    pos = (labels == 1.0).astype(float)
    neg = 1.0 - pos
    one_minus = nx.sub(1.0, center)
    pos_term = nx.mul(nx.mul(nx.log(center), nx.mul(one_minus, one_minus)), pos)
    neg_w = (1.0 - labels) ** gamma * neg
    sq = nx.mul(center, center) if alpha == 2.0 else nx.exp(nx.mul(nx.log(center), alpha))
    neg_term = nx.mul(nx.mul(nx.log(one_minus), sq), neg_w)
    per = nx.sum_(nx.reshape(nx.add(pos_term, neg_term), (b, -1)), axis=1)
    n_pos = np.maximum(pos.reshape(b, -1).sum(axis=1), 1.0)
    return nx.mul(nx.mean(nx.mul(per, 1.0 / n_pos)), -1.0)


def generalized_iou(pred: nx.Tensor, gt) -> nx.Tensor:
    """GIoU of centre-format boxes: pred (B, 4) tensor, gt (B, 4) array -> (B,)."""
    gt = np.asarray(gt, float)
    g1 = gt[:, :2] - gt[:, 2:] / 2
    g2 = gt[:, :2] + gt[:, 2:] / 2
    pc = nx.slice_axis(pred, 0, 2, axis=1)
    half = nx.mul(nx.slice_axis(pred, 2, 4, axis=1), 0.5)
    p1, p2 = nx.sub(pc, half), nx.add(pc, half)
    iwh = nx.relu(nx.sub(nx.minimum([p2, g2]), nx.maximum([p1, g1])))
    inter = nx.mul(nx.take(iwh, 0, axis=1), nx.take(iwh, 1, axis=1))
    pwh = nx.sub(p2, p1)
    area_p = nx.mul(nx.take(pwh, 0, axis=1), nx.take(pwh, 1, axis=1))
    union = nx.sub(nx.add(area_p, gt[:, 2] * gt[:, 3]), inter)
    hwh = nx.sub(nx.maximum([p2, g2]), nx.minimum([p1, g1]))
    hull = nx.mul(nx.take(hwh, 0, axis=1), nx.take(hwh, 1, axis=1))
    return nx.sub(nx.div(inter, union), nx.div(nx.sub(hull, union), hull))


def box_loss(pred: nx.Tensor, gt):
    """(l1, giou) batch means for centre-format normalized boxes."""
    gt = np.asarray(gt, float).reshape(-1, 4)
    if np.any(gt[:, 2:] <= 0):
        raise LossContractError("ground-truth box has non-positive size")
    l1 = nx.mean(nx.abs_(nx.sub(pred, gt)))
    giou = nx.mean(nx.sub(1.0, generalized_iou(pred, gt)))
    return l1, giou


@dataclass
class LossBreakdown:
    l_tgt: float
    l_cls: float
    l_l1: float
    l_giou: float
    l_box: float
    l_mmc: list = field(default_factory=list)
    mmc_sum: float = 0.0
    total: float = 0.0

    def as_dict(self):
        return {"total": self.total, "l_tgt": self.l_tgt, "l_cls": self.l_cls, "l_box": self.l_box,
                "l_l1": self.l_l1, "l_giou": self.l_giou, "mmc_sum": self.mmc_sum,
                "l_mmc": list(self.l_mmc)}


def total_loss(parts: dict, cfg):
    """Weighted sum; ``parts`` maps l_tgt, l_cls, l_l1, l_giou to tensors/floats and l_mmc to a list.

    Returns (total tensor, LossBreakdown).
    """
    l_tgt = nx.as_tensor(parts["l_tgt"])
    l_cls = nx.as_tensor(parts["l_cls"])
    l1 = nx.as_tensor(parts["l_l1"])
    giou = nx.as_tensor(parts["l_giou"])
    box = nx.add(nx.mul(l1, cfg.lambda_l1), nx.mul(giou, cfg.lambda_giou))
    total = nx.add(nx.add(l_tgt, l_cls), box)
    # a zero weight drops the term entirely, gradients included
    mmc = [nx.as_tensor(m) for m in parts.get("l_mmc", [])] if cfg.lambda_mmc != 0 else []
    mmc_sum = 0.0
    if mmc:
        s = mmc[0]
        for m in mmc[1:]:
            s = nx.add(s, m)
        mmc_sum = float(s.data)
        total = nx.add(total, nx.mul(s, cfg.lambda_mmc))
    bd = LossBreakdown(
        l_tgt=float(l_tgt.data), l_cls=float(l_cls.data), l_l1=float(l1.data), l_giou=float(giou.data),
        l_box=float(box.data), l_mmc=[float(m.data) for m in mmc], mmc_sum=mmc_sum, total=float(total.data),
    )
    return total, bd


__all__ = ["mmc_similarities", "mmc_sample", "mmc_loss", "target_map_loss", "center_focal_loss",
           "box_loss", "generalized_iou", "total_loss", "LossBreakdown", "inbox_labels", "gaussian_label",
           "center_cell"]

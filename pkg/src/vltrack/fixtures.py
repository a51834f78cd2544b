"""Named test vectors: inputs plus expected outputs, exported to and verified from JSON.

Expected values come from closed forms or from the scalar reference code in
this module, never from the library functions being verified.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .embedding import TokenLayout
from .extractor import DEEP, SHALLOW, build_attention_mask
from .head import decode_box, split_distractor_background
from .losses import mmc_loss, mmc_sample

FORMAT_NAME = "vltrack-fixtures"
FORMAT_VERSION = 1


class FixtureError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scalar reference for one pre-norm encoder layer


def _ref_layer_norm(row, g, b, eps):
    n = len(row)
    mu = sum(row) / n
    var = sum((v - mu) ** 2 for v in row) / n
    return [(v - mu) / math.sqrt(var + eps) * g[i] + b[i] for i, v in enumerate(row)]


def _ref_linear(row, w, b):
    return [sum(row[i] * w[i][j] for i in range(len(row))) + b[j] for j in range(len(b))]


def _ref_gelu(v):
    return 0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v * v * v)))


def reference_layer(tokens, allowed, p, heads, eps):
    """Token-by-token evaluation with Python floats; ``allowed[q][k]`` opens key k to query q."""
    t, c = len(tokens), len(tokens[0])
    d = c // heads
    h = [_ref_layer_norm(row, p["ln1_g"], p["ln1_b"], eps) for row in tokens]
    qkv = [_ref_linear(row, p["qkv_w"], p["qkv_b"]) for row in h]
    mixed = [[0.0] * c for _ in range(t)]
    for head in range(heads):
        q_off, k_off, v_off = head * d, c + head * d, 2 * c + head * d
        for qi in range(t):
            keys = [k for k in range(t) if allowed[qi][k]]
            logits = [sum(qkv[qi][q_off + m] * qkv[k][k_off + m] for m in range(d)) / math.sqrt(d) for k in keys]
            if not keys:
                continue
            top = max(logits)
            ex = [math.exp(z - top) for z in logits]
            s = sum(ex)
            for k, e in zip(keys, ex):
                for m in range(d):
                    mixed[qi][head * d + m] += e / s * qkv[k][v_off + m]
    attn = [_ref_linear(row, p["proj_w"], p["proj_b"]) for row in mixed]
    e_hat = [[tokens[i][j] + attn[i][j] for j in range(c)] for i in range(t)]
    out = []
    for row in e_hat:
        z = _ref_layer_norm(row, p["ln2_g"], p["ln2_b"], eps)
        hid = [_ref_gelu(v) for v in _ref_linear(z, p["fc1_w"], p["fc1_b"])]
        mlp = _ref_linear(hid, p["fc2_w"], p["fc2_b"])
        out.append([row[j] + mlp[j] for j in range(c)])
    return out


def _hand_weights(c: int, hidden: int, salt: int) -> dict:
    """Small fixed weights from a modular pattern; no RNG involved."""
    def mat(r, k, a):
        return [[0.1 * (((i * 3 + j * 5 + a + salt) % 7) - 3) for j in range(k)] for i in range(r)]

    def vec(k, a):
        return [0.05 * (((j * 2 + a + salt) % 5) - 2) for j in range(k)]

    return {
        "ln1_g": [1.0 + 0.1 * j for j in range(c)], "ln1_b": vec(c, 1),
        "qkv_w": mat(c, 3 * c, 2), "qkv_b": vec(3 * c, 3),
        "proj_w": mat(c, c, 4), "proj_b": vec(c, 5),
        "ln2_g": [1.0 - 0.05 * j for j in range(c)], "ln2_b": vec(c, 6),
        "fc1_w": mat(c, hidden, 7), "fc1_b": vec(hidden, 8),
        "fc2_w": mat(hidden, c, 9), "fc2_b": vec(c, 10),
    }


# a 4-token sequence: [T_l, one word, T_v, one search patch]
_TWO_LAYER_LAYOUT = TokenLayout(n_words=1, n_template=0, n_search=1, language=True, template=False,
                                word_valid=(True,))


def _two_layer_library(inputs) -> np.ndarray:
    e = nx.Tensor(np.asarray(inputs["tokens"], float))
    for i, kind in enumerate((SHALLOW, DEEP)):
        p = {k: nx.Parameter(np.asarray(v, float), k) for k, v in inputs["layers"][i].items()}
        mask = build_attention_mask(_TWO_LAYER_LAYOUT, kind)
        e = nx.encoder_layer(e, mask, p, inputs["heads"], index=i, eps=inputs["eps"])
    return e.data


def _two_layer_reference(inputs):
    e = [list(map(float, row)) for row in inputs["tokens"]]
    lay = _TWO_LAYER_LAYOUT
    avail = list(lay.available())
    group = list(lay.language_group())
    t = lay.size
    for i, kind in enumerate((SHALLOW, DEEP)):
        allowed = [[avail[q] and avail[k] and (kind == DEEP or group[q] == group[k]) for k in range(t)]
                   for q in range(t)]
        e = reference_layer(e, allowed, inputs["layers"][i], inputs["heads"], inputs["eps"])
    return e


# ---------------------------------------------------------------------------
# vectors


@dataclass
class Vector:
    name: str
    inputs: dict
    expected: object
    tolerance: float


def _blocked_to_mask(blocked):
    return np.where(np.asarray(blocked, bool), nx.NEG_INF, 0.0)


def build_vectors() -> list:
    e1, e3 = math.exp(1.0), math.exp(3.0)
    c, hidden = 4, 8
    tokens = [[(((i * 4 + j) * 7) % 11 - 5) / 5.0 for j in range(c)] for i in range(4)]
    layers = [_hand_weights(c, hidden, 0), _hand_weights(c, hidden, 1)]
    two_layer_inputs = {"tokens": tokens, "layers": layers, "heads": 2, "eps": 1e-6}
    return [
        Vector("masked_softmax_uniform", {"logits": [0.0, 0.0, 0.0], "blocked": [False, False, False]},
               [1 / 3, 1 / 3, 1 / 3], 1e-15),
        Vector("masked_softmax_partial", {"logits": [1.0, 2.0, 3.0], "blocked": [False, True, False]},
               [e1 / (e1 + e3), 0.0, e3 / (e1 + e3)], 1e-15),
        Vector("masked_softmax_all_blocked", {"logits": [5.0, 7.0], "blocked": [True, True]},
               [0.0, 0.0], 0.0),
        Vector("mmc_uniform", {"scores": [0.0] * 16, "box": [0.5, 0.5, 1.0, 1.0], "grid": [4, 4], "patch": 2,
                               "n_neg": 9}, math.log(10.0), 1e-12),
        Vector("distractor_split", {"a_out": [0.5, 0.3, 0.15, 0.05], "beta": 0.75},
               {"distractor": [True, True, False, False], "background": [False, False, True, True]}, 0.0),
        Vector("distractor_split_beta0", {"a_out": [0.5, 0.3, 0.15, 0.05], "beta": 0.0},
               {"distractor": [False] * 4, "background": [True] * 4}, 0.0),
        Vector("box_decode", {"grid": [8, 8], "peak_row": 4, "peak_col": 3, "offset": [0.5, 0.5],
                              "size": [0.25, 0.25], "patch": 8, "search": 64}, [28.0, 36.0, 16.0, 16.0], 0.0),
        Vector("two_layer_forward", two_layer_inputs, _two_layer_reference(two_layer_inputs), 1e-12),
    ]


def _compute(name: str, inputs: dict):
    """Recompute a vector's output through the library."""
    if name.startswith("masked_softmax"):
        out = nx.masked_softmax(np.asarray(inputs["logits"], float), _blocked_to_mask(inputs["blocked"]))
        return out.data.tolist()
    if name == "mmc_uniform":
        scores = np.asarray(inputs["scores"], float)
        pos, neg = mmc_sample(scores, inputs["box"], tuple(inputs["grid"]), inputs["patch"], inputs["n_neg"])
        return float(mmc_loss(nx.Tensor(scores[None]), [pos], [neg]).data)
    if name.startswith("distractor_split"):
        m_d, m_b = split_distractor_background(inputs["a_out"], inputs["beta"])
        return {"distractor": (m_d == 0).tolist(), "background": (m_b == 0).tolist()}
    if name == "box_decode":
        gh, gw = inputs["grid"]
        center = np.full((gh, gw), 0.1)
        center[inputs["peak_row"], inputs["peak_col"]] = 0.9
        offset = np.zeros((gh, gw, 2))
        offset[inputs["peak_row"], inputs["peak_col"]] = inputs["offset"]
        size = np.zeros((gh, gw, 2))
        size[inputs["peak_row"], inputs["peak_col"]] = inputs["size"]
        s = inputs["search"]
        pred = decode_box(center, np.ones((gh, gw)), offset, size, inputs["patch"], s, s)
        return pred.box.tolist()
    if name == "two_layer_forward":
        return _two_layer_library(inputs).tolist()
    raise FixtureError(f"unknown vector {name!r}")


def _max_diff(got, want) -> float:
    if isinstance(want, dict):
        return max((_max_diff(got.get(k), v) for k, v in want.items()), default=0.0)
    a, b = np.asarray(got, float), np.asarray(want, float)
    if a.shape != b.shape:
        return math.inf
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def export_fixtures(path) -> Path:
    from .training import atomic_write_bytes
    doc = {"format": FORMAT_NAME, "version": FORMAT_VERSION,
           "vectors": [{"name": v.name, "tolerance": v.tolerance, "inputs": v.inputs, "expected": v.expected}
                       for v in build_vectors()]}
    atomic_write_bytes(path, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode())
    return Path(path)


@dataclass
class VectorResult:
    name: str
    max_diff: float
    tolerance: float
    message: str = ""

    @property
    def passed(self) -> bool:
        return not self.message and self.max_diff <= self.tolerance


def verify_fixtures(path) -> list:
    path = Path(path)
    if not path.exists():
        raise FixtureError(f"fixture file {path} does not exist")
    doc = json.loads(path.read_text())
    if doc.get("format") != FORMAT_NAME or doc.get("version") != FORMAT_VERSION:
        raise FixtureError(f"unsupported fixture file {doc.get('format')} v{doc.get('version')}")
    results = []
    for v in doc["vectors"]:
        try:
            got = _compute(v["name"], v["inputs"])
            results.append(VectorResult(v["name"], _max_diff(got, v["expected"]), v["tolerance"]))
        except Exception as exc:      # report and keep going
            results.append(VectorResult(v["name"], math.inf, v["tolerance"], f"{type(exc).__name__}: {exc}"))
    return results


def format_results(results) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f" ({r.message})" if r.message else ""
        lines.append(f"{status} {r.name}: max|diff|={r.max_diff:.3e} tol={r.tolerance:.1e}{extra}")
    return "\n".join(lines)

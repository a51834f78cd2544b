"""Finite-difference audit of every adjoint, from single primitives to the full objective.

Primitive cases each exercise one operation on a small random input. Model
cases run the micro network on batches chosen to hit a specific path. The
``all-settings`` case probes every coordinate of every parameter. The others
probe each parameter tensor along random directions, which keeps the whole
audit inside a minute.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .config import ModelConfig, micro_config
from .embedding import Mode, tokenize_language
from .model import Model, SceneBatch, compute_loss, forward

TOLERANCE = 1e-4


@dataclass
class CheckEntry:
    name: str
    kind: str                       # "primitive" or "model"
    worst: float
    worst_param: str
    per_module: dict = field(default_factory=dict)
    n_values: int = 0
    seconds: float = 0.0
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst) and self.worst < self.tolerance)


@dataclass
class GradcheckReport:
    entries: list
    seconds: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def failures(self) -> list:
        return [e for e in self.entries if not e.passed]

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "seconds": round(self.seconds, 3),
            "tolerance": TOLERANCE,
            "entries": [{"name": e.name, "kind": e.kind, "passed": e.passed, "worst": float(e.worst),
                         "worst_param": e.worst_param, "values": e.n_values,
                         "per_module": {k: float(v) for k, v in sorted(e.per_module.items())}}
                        for e in self.entries],
        }


# ---------------------------------------------------------------------------
# primitives


def _p(rng, *shape, name="x", lo=None):
    data = rng.normal(size=shape)
    if lo is not None:
        data = lo + np.abs(data)
    return nx.Parameter(data, name)


def _weighted(t: nx.Tensor, rng) -> nx.Tensor:
    """Reduce to a scalar with fixed random weights so every output entry matters."""
    w = np.random.default_rng(12345).normal(size=t.shape)
    return nx.sum_(nx.mul(t, w))


def _case_add(rng):
    a, b = _p(rng, 3, 4, name="a"), _p(rng, 4, name="b")
    return (lambda: nx.add(a, b)), [a, b]


def _case_sub(rng):
    a, b = _p(rng, 3, 4, name="a"), _p(rng, 3, 1, name="b")
    return (lambda: nx.sub(a, b)), [a, b]


def _case_mul(rng):
    a, b = _p(rng, 2, 3, 4, name="a"), _p(rng, 3, 4, name="b")
    return (lambda: nx.mul(a, b)), [a, b]


def _case_div(rng):
    a, b = _p(rng, 3, 4, name="a"), _p(rng, 3, 4, name="b", lo=0.5)
    return (lambda: nx.div(a, b)), [a, b]


def _case_matmul(rng):
    a, b = _p(rng, 2, 3, 4, name="a"), _p(rng, 2, 4, 5, name="b")
    return (lambda: nx.matmul(a, b)), [a, b]


def _case_linear(rng):
    x, w, b = _p(rng, 2, 3, 4, name="x"), _p(rng, 4, 5, name="w"), _p(rng, 5, name="b")
    return (lambda: nx.linear(x, w, b)), [x, w, b]


def _case_reshape_transpose(rng):
    a = _p(rng, 2, 3, 4, name="a")
    return (lambda: nx.transpose(nx.reshape(a, (6, 4)), (1, 0))), [a]


def _case_concat_slice(rng):
    a, b = _p(rng, 2, 3, name="a"), _p(rng, 2, 2, name="b")
    return (lambda: nx.slice_axis(nx.concat([a, b], axis=1), 1, 4, axis=1)), [a, b]


def _case_take(rng):
    a = _p(rng, 5, 3, name="a")
    idx = np.array([0, 2, 2, 4])
    return (lambda: nx.take(a, idx, axis=0)), [a]


def _case_select(rng):
    a = _p(rng, 3, 5, 2, name="a")
    rows = np.array([[0, 4], [1, 1], [3, 2]])
    return (lambda: nx.select(a, rows)), [a]


def _case_reduce(rng):
    a = _p(rng, 3, 4, name="a")
    return (lambda: nx.add(nx.sum_(a, axis=0), nx.mean(a, axis=0))), [a]


def _case_abs(rng):
    a = nx.Parameter(np.array([[-1.3, 0.4, 2.2], [0.7, -0.2, -3.1]]), "a")
    return (lambda: nx.abs_(a)), [a]


def _case_log(rng):
    a = _p(rng, 3, 4, name="a", lo=0.3)
    return (lambda: nx.log(a)), [a]


def _case_exp(rng):
    a = _p(rng, 3, 4, name="a")
    return (lambda: nx.exp(a)), [a]


def _case_sigmoid(rng):
    a = _p(rng, 3, 4, name="a")
    return (lambda: nx.sigmoid(a)), [a]


def _case_clamp(rng):
    a = nx.Parameter(np.array([0.2, 0.5, 0.8, 1.7, -0.6]), "a")
    return (lambda: nx.clamp(a, 0.0, 1.0)), [a]


def _case_relu(rng):
    a = nx.Parameter(np.array([[-1.1, 0.3, 2.0], [0.6, -0.4, -2.2]]), "a")
    return (lambda: nx.relu(a)), [a]


def _case_gelu(rng):
    a = _p(rng, 3, 5, name="a")
    return (lambda: nx.gelu(a)), [a]


def _case_max_min(rng):
    a, b, c = _p(rng, 4, 3, name="a"), _p(rng, 4, 3, name="b"), _p(rng, 4, 3, name="c")
    return (lambda: nx.add(nx.maximum([a, b, c]), nx.minimum([a, b]))), [a, b, c]


def _case_masked_softmax(rng):
    a = _p(rng, 2, 3, 4, name="logits")
    mask = np.zeros((2, 3, 4))
    mask[0, 1, 2:] = nx.NEG_INF
    mask[1, 2, :] = nx.NEG_INF          # a fully blocked row
    return (lambda: nx.masked_softmax(a, mask)), [a]


def _case_layer_norm(rng):
    x, g, b = _p(rng, 2, 3, 5, name="x"), _p(rng, 5, name="scale"), _p(rng, 5, name="shift")
    return (lambda: nx.layer_norm(x, g, b, 1e-6)), [x, g, b]


def _case_cosine(rng):
    a, b = _p(rng, 2, 4, 3, name="a"), _p(rng, 2, 3, name="b")
    return (lambda: nx.cosine_rows(a, b)), [a, b]


def _case_logsumexp(rng):
    a = _p(rng, 3, 5, name="a")
    return (lambda: nx.logsumexp(a, axis=-1)), [a]


def _case_conv3x3(rng):
    x, w, b = _p(rng, 2, 3, 4, 2, name="x"), _p(rng, 18, 3, name="w"), _p(rng, 3, name="b")
    return (lambda: nx.conv3x3(x, w, b)), [x, w, b]


def _case_attention(rng):
    c = 4
    p = nx.init_layer_params(rng, c, 2 * c, std=0.5, prefix="")
    x = _p(rng, 2, 3, c, name="x")
    mask = np.zeros((2, 3, 3))
    mask[:, 0, 2] = nx.NEG_INF
    return (lambda: nx.encoder_layer(x, mask, p, heads=2)), [x, *p.values()]


PRIMITIVE_CASES = {
    "add": _case_add, "sub": _case_sub, "mul": _case_mul, "div": _case_div,
    "matmul": _case_matmul, "linear": _case_linear, "reshape/transpose": _case_reshape_transpose,
    "concat/slice": _case_concat_slice, "take": _case_take, "select": _case_select,
    "sum/mean": _case_reduce, "abs": _case_abs, "log": _case_log, "exp": _case_exp,
    "sigmoid": _case_sigmoid, "clamp": _case_clamp, "relu": _case_relu, "gelu": _case_gelu,
    "maximum/minimum": _case_max_min, "masked_softmax": _case_masked_softmax,
    "layer_norm": _case_layer_norm, "cosine": _case_cosine, "logsumexp": _case_logsumexp,
    "conv3x3": _case_conv3x3, "encoder_layer": _case_attention,
}


def check_primitive(name: str, seed: int = 0, eps: float = 1e-6) -> CheckEntry:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    build, params = PRIMITIVE_CASES[name](rng)
    wrng = np.random.default_rng(seed + 1)

    def objective():
        return _weighted(build(), wrng)

    nx.zero_grads(params)
    nx.backward(objective())
    numeric = nx.finite_diff_gradient(lambda: float(objective().data), params, eps)
    worst, worst_param = 0.0, ""
    for p, num in zip(params, numeric):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        err = nx.relative_error(g, num)
        if not err <= worst:
            worst, worst_param = err, p.name
    return CheckEntry(name, "primitive", worst, worst_param, {name: worst},
                      sum(p.data.size for p in params), time.perf_counter() - start)


# ---------------------------------------------------------------------------
# full model on the micro configuration


def micro_batch(cfg: ModelConfig, modes, rng, context=None) -> SceneBatch:
    """Random scenes for the micro model; ``context`` flags which scenes carry a context slot."""
    context = context or [False] * len(modes)
    b = len(modes)
    ids, valid = [], []
    sentences = [["red", "square"], ["blue", "circle", "moving", "left"], ["green", "triangle"]]
    for k, mode in enumerate(modes):
        words = [] if mode == Mode.BBOX else sentences[k % len(sentences)]
        i, v = tokenize_language(words, cfg.vocab, cfg.max_words)
        ids.append(i)
        valid.append(v)
    th, tw, sh, sw = cfg.template_h, cfg.template_w, cfg.search_h, cfg.search_w

    def box(h, w):
        bw, bh = rng.uniform(0.35, 0.6) * w, rng.uniform(0.35, 0.6) * h
        return np.array([rng.uniform(0, w - bw), rng.uniform(0, h - bh), bw, bh])

    has_t = [m != Mode.NL for m in modes]
    return SceneBatch(
        modes=list(modes), word_ids=np.array(ids), word_valid=np.array(valid),
        templates=[rng.random((th, tw, 3)) if t else None for t in has_t],
        template_boxes=[box(th, tw) if t else None for t in has_t],
        searches=rng.random((b, sh, sw, 3)),
        context_emb=rng.normal(size=(b, cfg.n_search, cfg.width)),
        context_boxes=[box(sh, sw) if c else None for c in context],
        gt_boxes=np.stack([box(sh, sw) for _ in modes]),
    )


def _module_of(name: str) -> str:
    return name.split(".")[0]


def _objective(model, batch):
    def run():
        total, _ = compute_loss(model, batch, forward(model, batch))
        return total
    return run


def check_model(name: str, model: Model, batch: SceneBatch, mode: str = "full", eps: float = 1e-6,
                n_dirs: int = 2, seed: int = 0) -> CheckEntry:
    """Compare analytic and numeric gradients of the total objective.

    ``full`` probes every coordinate. ``directional`` compares, per tensor, the
    analytic and numeric derivatives along ``n_dirs`` random unit directions.
    """
    start = time.perf_counter()
    run = _objective(model, batch)
    named = model.named_parameters()
    model.zero_grad()
    nx.backward(run())
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in named.items()}
    errors = {}
    rng = np.random.default_rng(seed)
    for key, prm in named.items():
        if mode == "full":
            num = nx.finite_diff_gradient(lambda: float(run().data), [prm], eps, names=[key])[0]
            errors[key] = nx.relative_error(analytic[key], num)
        else:
            a_vals, n_vals = [], []
            base = prm.data.copy()
            for _ in range(n_dirs):
                v = rng.normal(size=base.shape)
                v /= np.linalg.norm(v)
                prm.data[...] = base + eps * v
                fp = float(run().data)
                prm.data[...] = base - eps * v
                fm = float(run().data)
                prm.data[...] = base
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise nx.NumericError(f"non-finite objective probing {key}")
                a_vals.append(float(np.vdot(analytic[key], v)))
                n_vals.append((fp - fm) / (2 * eps))
            errors[key] = nx.relative_error(np.array(a_vals), np.array(n_vals))
    worst_param = max(errors, key=errors.get)
    per_module = {}
    for key, err in errors.items():
        mod = _module_of(key)
        per_module[mod] = max(per_module.get(mod, 0.0), err)
    n_values = sum(p.data.size for p in named.values()) if mode == "full" else n_dirs * len(named)
    return CheckEntry(name, "model", errors[worst_param], worst_param, per_module, n_values,
                      time.perf_counter() - start)


def model_cases(cfg: ModelConfig | None = None, seed: int = 0):
    """Coverage entries: (name, config, batch, probe mode)."""
    cfg = cfg or micro_config().model
    rng = np.random.default_rng(seed)
    all_modes = [Mode.BBOX, Mode.NL, Mode.NL_BBOX, Mode.BBOX]
    return [
        ("all-settings", cfg, micro_batch(cfg, all_modes, rng, [False, False, False, True]), "full"),
        ("bbox", cfg, micro_batch(cfg, [Mode.BBOX, Mode.BBOX], rng), "directional"),
        ("nl-grounding", cfg, micro_batch(cfg, [Mode.NL, Mode.NL], rng), "directional"),
        ("nl+bbox-context", cfg, micro_batch(cfg, [Mode.NL_BBOX, Mode.NL_BBOX], rng, [True, True]),
         "directional"),
        ("beta=0-no-distractors", replace(cfg, beta=0.0),
         micro_batch(cfg, [Mode.BBOX, Mode.NL_BBOX], rng, [True, False]), "directional"),
        ("beta=1-no-background", replace(cfg, beta=1.0),
         micro_batch(cfg, [Mode.BBOX, Mode.NL_BBOX], rng, [True, False]), "directional"),
        ("no-mmc", replace(cfg, lambda_mmc=0.0), micro_batch(cfg, [Mode.NL, Mode.BBOX], rng), "directional"),
    ]


def run_gradcheck(cfg: ModelConfig | None = None, seed: int = 0, primitives: bool = True,
                  only_full: bool = False) -> GradcheckReport:
    start = time.perf_counter()
    entries = []
    if primitives:
        entries.extend(check_primitive(name, seed) for name in PRIMITIVE_CASES)
    for name, mcfg, batch, mode in model_cases(cfg, seed):
        if only_full and mode != "full":
            continue
        model = Model(mcfg, seed=seed + 1)
        entries.append(check_model(name, model, batch, mode, seed=seed))
    return GradcheckReport(entries, time.perf_counter() - start)

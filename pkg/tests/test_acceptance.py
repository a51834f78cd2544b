"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The end-to-end criteria train six models at the default configuration
(three seeds with and without the contrastive term), so this module takes
close to an hour on a single core.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from vltrack import numerics as nx
from vltrack.config import ExperimentConfig, ModelConfig, micro_config
from vltrack.embedding import ALL_MODES, Mode, make_layout, tokenize_language
from vltrack.gradcheck import check_model, micro_batch, model_cases
from vltrack.head import decode_box, encode_box, split_distractor_background, target_score_map
from vltrack.harness import build_report
from vltrack.losses import mmc_loss, mmc_sample
from vltrack.model import Model, SceneBatch, decode, embed, forward, forward_embedded
from vltrack.runtime import evaluate_model, evaluation_sequences
from vltrack.training import build_pool, load_checkpoint, save_checkpoint, train

SEEDS = (0, 1, 2)
RUNTIME_BUDGET_S = 30 * 60


# ---------------------------------------------------------------------------
# 1. full-objective gradient check


def test_c01_gradient_oracle(criterion):
    name, cfg, batch, mode = model_cases()[0]
    assert mode == "full"
    model = Model(cfg, seed=1)
    total = sum(p.data.size for p in model.parameters())
    entry = check_model(name, model, batch, mode)
    ok = entry.worst < 1e-4 and entry.n_values == total and entry.seconds < 60
    criterion(1, "gradient oracle", ok,
              f"{entry.n_values}/{total} values, worst rel err {entry.worst:.2e} ({entry.worst_param}), "
              f"{entry.seconds:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. mask isolation


def _scene(cfg, mode, rng, sentence=("red", "square", "moving", "left")):
    ids, valid = tokenize_language(list(sentence) if mode != Mode.BBOX else [], cfg.vocab, cfg.max_words)
    has_t = mode != Mode.NL
    return SceneBatch(
        modes=[mode], word_ids=ids[None], word_valid=valid[None],
        templates=[rng.random((cfg.template_h, cfg.template_w, 3)) if has_t else None],
        template_boxes=[np.array([8.0, 8.0, 16.0, 16.0]) if has_t else None],
        searches=rng.random((1, cfg.search_h, cfg.search_w, 3)),
    )


def _isolation_trials(model, mode, na_range, rng, trials=20):
    cfg = model.cfg
    batch = _scene(cfg, mode, rng)
    emb, layouts = embed(model, batch)
    base = forward_embedded(model, batch, layouts, emb)
    avail = layouts[0].available()
    base_box = decode(model, base)[0].box
    broken = 0
    for _ in range(trials):
        noisy = emb.data.copy()
        noisy[:, na_range] += rng.normal(0.0, 3.0, size=noisy[:, na_range].shape)
        out = forward_embedded(model, batch, layouts, nx.Tensor(noisy))
        same = (np.array_equal(out.ext.final.data[:, avail], base.ext.final.data[:, avail])
                and np.array_equal(out.center.data, base.center.data)
                and np.array_equal(out.target.data, base.target.data)
                and np.array_equal(decode(model, out)[0].box, base_box))
        broken += not same
    return broken


def test_c02_mask_isolation(criterion, rng):
    cfg = ModelConfig()
    model = Model(cfg, seed=3)
    lay_b = make_layout(cfg, Mode.BBOX)
    lang = slice(0, lay_b.vis_token)
    broken_bbox = _isolation_trials(model, Mode.BBOX, lang, rng)
    lay_n = make_layout(cfg, Mode.NL, tokenize_language(["red", "square"], cfg.vocab, cfg.max_words)[1])
    broken_nl = _isolation_trials(model, Mode.NL, lay_n.template_range, rng)
    ok = broken_bbox == 0 and broken_nl == 0
    criterion(2, "mask isolation", ok,
              f"BBOX {20 - broken_bbox}/20 and NL {20 - broken_nl}/20 perturbations left outputs bitwise equal")
    assert ok


# ---------------------------------------------------------------------------
# 3. shallow layers never leak language into the search tokens


def test_c03_shallow_no_leak(criterion, rng):
    cfg = replace(ModelConfig(), shallow_layers=3, deep_layers=0)
    model = Model(cfg, seed=4)
    search = rng.random((1, cfg.search_h, cfg.search_w, 3))
    words = ModelConfig().vocab[1:]
    reference = None
    differing = 0
    for k in range(20):
        sentence = [words[i] for i in rng.integers(len(words), size=int(rng.integers(1, cfg.max_words + 1)))]
        batch = replace(_scene(cfg, Mode.NL, rng, sentence), searches=search)
        out = forward(model, batch)
        snap = [s.data for s in out.ext.search] + [out.ext.final.data[:, out.layouts[0].search_range]]
        if reference is None:
            reference = snap
        elif not all(np.array_equal(a, b) for a, b in zip(snap, reference)):
            differing += 1
    ok = differing == 0
    criterion(3, "shallow no-leak", ok, f"19 sentence swaps, {differing} changed any search output")
    assert ok


# ---------------------------------------------------------------------------
# 4. contrastive loss on uniform scores


def test_c04_mmc_uniform(criterion):
    grid, p = (4, 4), 8
    scores = np.zeros(16)
    pos, neg = mmc_sample(scores, (8.0, 8.0, 8.0, 8.0), grid, p, n_neg=9)
    loss = float(mmc_loss(nx.Tensor(scores[None]), [pos], [neg]).data)
    err = abs(loss - math.log(10.0))
    ok = len(neg) == 9 and err <= 1e-9
    criterion(4, "MMC uniform case", ok, f"loss {loss:.15f}, |loss - ln 10| = {err:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 5. distractor split against a brute-force oracle


def _split_oracle(a, beta, support):
    """Quadratic enumeration of the mass ranked strictly ahead of each patch."""
    n = len(a)
    dis = np.zeros(n, bool)
    bg = np.zeros(n, bool)
    for i in range(n):
        if not support[i]:
            continue
        ahead = sum(a[j] for j in range(n) if support[j] and (a[j] > a[i] or (a[j] == a[i] and j < i)))
        if ahead < beta:
            dis[i] = True
        else:
            bg[i] = True
    return dis, bg


def test_c05_distractor_split_oracle(criterion, rng):
    mismatches, edge_counts = 0, {"beta=0": 0, "beta=1": 0}
    for k in range(200):
        n = int(rng.integers(1, 24))
        raw = rng.random(n)
        if k % 3 == 0:
            raw = np.round(raw * 4) / 4 + 0.05          # force ties
        support = rng.random(n) < 0.8
        if not support.any():
            support[0] = True
        a = np.where(support, raw, 0.0)
        a = a / a.sum()
        beta = 0.0 if k % 10 == 0 else 1.0 if k % 10 == 1 else float(rng.random())
        m_d, m_b = split_distractor_background(a, beta, support=support)
        dis, bg = _split_oracle(a, beta, support)
        ok = np.array_equal(m_d == 0, dis) and np.array_equal(m_b == 0, bg)
        if beta == 0.0:
            ok &= not dis.any()
            edge_counts["beta=0"] += 1
        if beta == 1.0:
            ok &= not bg[a > 0].any()
            edge_counts["beta=1"] += 1
        mismatches += not ok
    passed = mismatches == 0
    criterion(5, "distractor split oracle", passed,
              f"200 instances ({edge_counts['beta=0']} at beta=0, {edge_counts['beta=1']} at beta=1), "
              f"{mismatches} mismatches")
    assert passed


# ---------------------------------------------------------------------------
# 6. box decode


def test_c06_box_decode(criterion, rng):
    grid, p, side = (8, 8), 8, 64
    center = np.full(grid, 0.1)
    center[4, 3] = 0.9
    offset = np.zeros(grid + (2,))
    offset[4, 3] = (0.5, 0.5)
    size = np.zeros(grid + (2,))
    size[4, 3] = (0.25, 0.25)
    pred = decode_box(center, np.ones(grid), offset, size, p, side, side)
    fixture_ok = np.array_equal(pred.box, [28.0, 36.0, 16.0, 16.0])
    worst_c, worst_s = 0.0, 0.0
    for _ in range(100):
        w, h = rng.uniform(4, 40, size=2)
        x, y = rng.uniform(0, side - w), rng.uniform(0, side - h)
        c, o, s = encode_box((x, y, w, h), grid, p, side, side)
        got = decode_box(c, np.ones(grid), o, s, p, side, side).box
        worst_c = max(worst_c, float(np.max(np.abs(got[:2] - (x + w / 2, y + h / 2)))))
        worst_s = max(worst_s, float(np.max(np.abs(got[2:] - (w, h)))))
    ok = fixture_ok and worst_c <= p / 2 and worst_s == 0.0
    criterion(6, "box decode", ok,
              f"fixture {pred.box.tolist()}, 100 round trips: centre err {worst_c:.2e}, size err {worst_s:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 7. zero bound


def test_c07_zero_bound(criterion, rng):
    c, tau = 16, 0.1
    seen, worst = 0, 0.0
    while seen < 1000:
        feats = rng.normal(size=(1, 64, c))
        protos = rng.normal(size=(3, 1, c))
        a_t = (feats[0] @ protos[0, 0]) / (np.linalg.norm(feats[0], axis=1) * np.linalg.norm(protos[0, 0])) / tau
        alpha = target_score_map(nx.Tensor(feats), nx.Tensor(protos[0]), nx.Tensor(protos[1]),
                                 nx.Tensor(protos[2]), tau).data[0]
        pick = np.flatnonzero(a_t <= 0)[: 1000 - seen]
        seen += pick.size
        if pick.size:
            worst = max(worst, float(alpha[pick].max()))
    ok = worst <= 0.5
    criterion(7, "zero bound", ok, f"1000 patches with non-positive target score, max alpha {worst:.6f}")
    assert ok


# ---------------------------------------------------------------------------
# 8-10. end-to-end training on the default desk configuration


@pytest.fixture(scope="module")
def pool():
    cfg = ExperimentConfig()
    return build_pool(cfg.train.pool_sequences, cfg.world)


@pytest.fixture(scope="module")
def eval_sequences():
    cfg = ExperimentConfig()
    return evaluation_sequences(cfg.world, cfg.eval)


@pytest.fixture(scope="module")
def runs(pool, eval_sequences):
    """Trained models keyed by (lambda_mmc, seed); runtime counts pool build, training and evaluation."""
    out = {}
    pool_seconds = None
    for lam in (0.1, 0.0):
        for seed in SEEDS:
            cfg = ExperimentConfig()
            cfg = replace(cfg, model=replace(cfg.model, lambda_mmc=lam), train=replace(cfg.train, seed=seed))
            start = time.perf_counter()
            if pool_seconds is None:
                t0 = time.perf_counter()
                build_pool(cfg.train.pool_sequences, cfg.world)
                pool_seconds = time.perf_counter() - t0
            result = train(cfg, pool=pool)
            metrics = evaluate_model(result.model, eval_sequences, ALL_MODES, cfg.eval.precision_threshold)
            seconds = time.perf_counter() - start + pool_seconds
            out[(lam, seed)] = {"cfg": cfg, "model": result.model, "metrics": metrics, "seconds": seconds}
            ious = {m.value: round(r.metrics.mean_iou, 4) for m, r in metrics.items()}
            print(f"lambda_mmc={lam} seed={seed}: {ious} in {seconds:.0f}s")
    return out


def test_c08_end_to_end(criterion, runs):
    lines, passes = [], 0
    for seed in SEEDS:
        run = runs[(0.1, seed)]
        iou = {m: r.metrics.mean_iou for m, r in run["metrics"].items()}
        ok = (all(v >= 0.5 for v in iou.values()) and iou[Mode.NL_BBOX] >= iou[Mode.NL]
              and run["seconds"] <= RUNTIME_BUDGET_S)
        passes += ok
        lines.append(f"seed {seed} {'ok' if ok else 'no'} (bbox {iou[Mode.BBOX]:.3f}, nl {iou[Mode.NL]:.3f}, "
                     f"nl+bbox {iou[Mode.NL_BBOX]:.3f}, {run['seconds'] / 60:.1f} min)")
    passed = passes >= 2
    criterion(8, "end-to-end unified training", passed, f"{passes}/3 seeds; " + "; ".join(lines))
    assert passed


def test_c09_mmc_ablation(criterion, runs):
    lines, passes = [], 0
    for seed in SEEDS:
        with_mmc = runs[(0.1, seed)]["metrics"][Mode.NL].metrics.mean_iou
        without = runs[(0.0, seed)]["metrics"][Mode.NL].metrics.mean_iou
        ok = with_mmc - without >= 0.02
        passes += ok
        lines.append(f"seed {seed}: {with_mmc:.3f} vs {without:.3f} ({with_mmc - without:+.3f})")
    passed = passes >= 2
    criterion(9, "MMC ablation direction", passed, f"{passes}/3 seeds; " + "; ".join(lines))
    assert passed


def test_c10_determinism_and_persistence(criterion, runs, eval_sequences, pool, tmp_path):
    # same config and seed: identical report metrics from scratch
    cfg = ExperimentConfig()
    cfg = replace(cfg, train=replace(cfg.train, steps=40), eval=replace(cfg.eval, n_sequences=4))
    seqs = eval_sequences[:4]
    reports = []
    for _ in range(2):
        res = train(cfg, pool=pool[:40])
        metrics = evaluate_model(res.model, seqs, ALL_MODES)
        reports.append(build_report(cfg, metrics, 0.0, {})["settings"])
    same_report = reports[0] == reports[1]

    # checkpoint of a trained acceptance model re-evaluates bitwise
    run = runs[(0.1, SEEDS[0])]
    path = save_checkpoint(run["model"], tmp_path / "accept.ckpt")
    loaded = load_checkpoint(path, expected=run["cfg"].model)
    again = evaluate_model(loaded, eval_sequences, ALL_MODES, run["cfg"].eval.precision_threshold)
    same_ckpt = all(
        again[m].metrics == run["metrics"][m].metrics and np.array_equal(again[m].ious, run["metrics"][m].ious)
        for m in ALL_MODES)
    ok = same_report and same_ckpt
    criterion(10, "determinism and persistence", ok,
              f"repeat run identical: {same_report}; checkpoint re-evaluation identical: {same_ckpt}")
    assert ok

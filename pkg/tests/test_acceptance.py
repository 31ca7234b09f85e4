"""Acceptance criteria, one test each; the terminal summary lists PASS/FAIL per criterion.

Criteria 9 and 10 share one end-to-end desk run (several minutes on one core).
"""

import csv
import json
import math
import time
from collections import Counter, deque
from fractions import Fraction
from pathlib import Path

import mpmath
import numpy as np
import pytest

from weakmil.cli import main
from weakmil.config import PipelineConfig
from weakmil.core import ParamSet, cross_entropy, grad_check
from weakmil.evaluation import roc_auc
from weakmil.mil import MilHyper, attention_scores, init_mil, mil_forward
from weakmil.preprocess import NEAR_WHITE, otsu_threshold, patch_side_pixels, read_grids
from weakmil.ssl import NegativeQueue, encode, info_nce, init_encoder, momentum_update
from weakmil.synthgen import read_manifest

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.toml"


def verdict(record_property, ok: bool, detail: str, number: int):
    record_property("detail", detail)
    print(f"criterion {number} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.mark.acceptance(1, "gradient correctness")
def test_criterion_1_gradients(record_property):
    t0 = time.perf_counter()
    arch = PipelineConfig().ssl.arch
    px = PipelineConfig().ssl.input_px
    enc_errs, mil_errs = [], []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        params = init_encoder(arch, rng)
        x = rng.uniform(0, 255, size=(2, px, px, 3))
        k, negs = unit_rows(rng, 2, arch.feature_dim), unit_rows(rng, 16, arch.feature_dim)
        enc_errs.append(grad_check(lambda t: info_nce(encode(t, x), k, negs, 0.07), params,
                                   epsilon=1e-5, samples=12, seed=seed))

        hyper = MilHyper()
        mp = init_mil(arch.feature_dim, hyper, rng)
        for name in mp:
            if name.endswith(("b", "bv", "bu")):
                mp[name] = rng.normal(0, 0.1, size=mp[name].shape)
        bag = unit_rows(rng, int(rng.integers(3, 40)), arch.feature_dim)
        # central differences across the relu kink measure nothing useful; keep 10 eps clear of it
        while np.min(np.abs(bag @ mp["proj.w"] + mp["proj.b"])) < 1e-4:
            bag = unit_rows(rng, len(bag), arch.feature_dim)
        y = int(rng.integers(0, 2))
        mil_errs.append(grad_check(lambda t: cross_entropy(mil_forward(bag, t), y), mp,
                                   epsilon=1e-5, samples=24, seed=seed))
    elapsed = time.perf_counter() - t0
    ok = max(enc_errs) < 1e-4 and max(mil_errs) < 1e-4 and elapsed < 60
    verdict(record_property, ok, f"max rel err encoder {max(enc_errs):.2e}, MIL {max(mil_errs):.2e}, "
            f"20 seeds each, {elapsed:.1f}s", 1)


def mp_info_nce(q, k, negs, tau):
    mpmath.mp.dps = 50
    pos = mpmath.exp(mpmath.fsum(mpmath.mpf(a) * mpmath.mpf(b) for a, b in zip(q, k)) / tau)
    den = pos + mpmath.fsum(
        mpmath.exp(mpmath.fsum(mpmath.mpf(a) * mpmath.mpf(b) for a, b in zip(q, n)) / tau) for n in negs
    )
    return -mpmath.log(pos / den)


@pytest.mark.acceptance(2, "InfoNCE value oracle")
def test_criterion_2_info_nce(record_property):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        d, m = int(rng.integers(2, 17)), int(rng.integers(1, 33))
        tau = float(rng.uniform(0.05, 1.0))
        q, k, negs = unit_rows(rng, 1, d)[0], unit_rows(rng, 1, d)[0], unit_rows(rng, m, d)
        worst = max(worst, abs(float(info_nce(q, k, negs, tau).data) - float(mp_info_nce(q, k, negs, tau))))

    q, k = unit_rows(rng, 1, 8), unit_rows(rng, 1, 8)
    empty = float(info_nce(q, k, NegativeQueue(1024, 8), 0.07).data)

    # every negative at the positive's similarity: first coordinate fixed, rest random on the circle
    K = 1024
    q = np.zeros(3)
    q[0] = 1.0
    theta = rng.uniform(0, 2 * np.pi, size=K + 1)
    keys = np.column_stack([np.full(K + 1, 0.6), 0.8 * np.cos(theta), 0.8 * np.sin(theta)])
    queue = NegativeQueue(K, 3).enqueue(keys[1:])
    equal = float(info_nce(q, keys[0], queue, 0.07).data)
    ok = worst <= 1e-10 and empty == 0.0 and abs(equal - math.log(K + 1)) <= 1e-10
    verdict(record_property, ok, f"max |err| {worst:.1e} over 1000 configs, empty queue {empty}, "
            f"equal-similarity |err| {abs(equal - math.log(K + 1)):.1e}", 2)


@pytest.mark.acceptance(3, "queue semantics")
def test_criterion_3_queue(record_property):
    rng = np.random.default_rng(3)
    cap, dim = 1024, 4
    sizes = [b for b in (1, 2, 4, 8, 16, 32, 64, 128, 256) if cap % b == 0]
    queue = NegativeQueue(cap, dim)
    ring, head, fill = np.zeros((cap, dim)), 0, 0
    fifo = deque(maxlen=cap)
    mismatches = 0
    for _ in range(1000):
        keys = unit_rows(rng, int(rng.choice(sizes)), dim)
        queue.enqueue(keys)
        for key in keys:
            ring[head] = key
            head = (head + 1) % cap
            fill = min(fill + 1, cap)
        fifo.extend(keys)
        same_order = np.array_equal(queue.ordered(), np.array(fifo))
        same_buffer = np.array_equal(queue.negatives(), ring[:fill]) and queue.head == head
        mismatches += not (same_order and same_buffer)
    verdict(record_property, mismatches == 0, f"{mismatches} mismatches over 1000 enqueues, K={cap}", 3)


@pytest.mark.acceptance(4, "momentum update")
def test_criterion_4_momentum(record_property):
    arch = PipelineConfig().ssl.arch
    rng = np.random.default_rng(4)
    key, query = init_encoder(arch, rng), init_encoder(arch, rng)
    start = key.copy()
    k = key
    for _ in range(100):
        k = momentum_update(k, query, 1.0)
    frozen = all(np.asarray(k[n]).tobytes() == np.asarray(start[n]).tobytes() for n in start)
    copied = momentum_update(key, query, 0.0)
    copies = all(np.asarray(copied[n]).tobytes() == np.asarray(query[n]).tobytes() for n in query)
    worst = 0.0
    for _ in range(50):
        m = float(rng.uniform())
        out = momentum_update(key, query, m)
        for n in key:
            worst = max(worst, float(np.max(np.abs(out[n] - (m * key[n] + (1 - m) * query[n])))))
    ok = frozen and copies and worst <= 1e-15
    verdict(record_property, ok, f"m=1 bitwise {frozen}, m=0 bitwise {copies}, formula max |err| {worst:.1e}", 4)


def brute_force_otsu(hist):
    hist = [int(v) for v in hist]
    total = sum(hist)
    scores = []
    for t in range(255):
        n0 = sum(hist[: t + 1])
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            scores.append(Fraction(0))
            continue
        mu0 = Fraction(sum(i * hist[i] for i in range(t + 1)), n0)
        mu1 = Fraction(sum(i * hist[i] for i in range(t + 1, 256)), n1)
        scores.append(Fraction(n0 * n1, total * total) * (mu0 - mu1) ** 2)
    best = max(scores)
    lo = scores.index(best)
    hi = lo
    while hi + 1 < 255 and scores[hi + 1] == best:
        hi += 1
    return (lo + hi) // 2


@pytest.mark.acceptance(5, "Otsu equivalence")
def test_criterion_5_otsu(record_property):
    rng = np.random.default_rng(5)
    mismatches = plateaus = 0
    for i in range(1000):
        hist = np.zeros(256, dtype=np.int64)
        kind = i % 3
        if kind == 0:
            hist[:] = rng.integers(0, 60, size=256)
        elif kind == 1:
            idx = rng.choice(256, size=int(rng.integers(2, 7)), replace=False)
            hist[idx] = rng.integers(1, 100, size=idx.size)
        else:
            # two equal spikes: the optimum is a plateau between them
            a, b = sorted(rng.choice(256, size=2, replace=False))
            hist[a] = hist[b] = rng.integers(1, 100)
            plateaus += b - a > 1
        if np.count_nonzero(hist) < 2:
            hist[0] = hist[255] = 1
        mismatches += otsu_threshold(hist) != brute_force_otsu(hist)
    verdict(record_property, mismatches == 0,
            f"{mismatches} mismatches on 1000 histograms ({plateaus} multi-threshold plateaus)", 5)


@pytest.mark.acceptance(6, "tiling and QC")
def test_criterion_6_tiling(desk_run, record_property):
    out, _, code = desk_run
    assert code == 0
    cfg = PipelineConfig()
    manifest = read_manifest(out / "corpus" / "manifest.csv")
    px = patch_side_pixels(cfg.microns)
    grids = read_grids(out / "preprocess" / "grids.csv", px)
    expected = (cfg.synth.slide_px // px) ** 2
    bad_count = bad_background = bad_marker = 0
    n_background = n_marker = 0
    for rec in manifest:
        grid = grids[rec.slide_id]
        bad_count += len(grid.records) != expected
        tissue = set(rec.tissue_cells)
        kept = set(grid.kept_coords())
        for r in grid.records:
            if (r.row, r.col) not in tissue:
                n_background += 1
                bad_background += r.kept or r.drop_reason != NEAR_WHITE
        n_marker += len(rec.marker_cells)
        bad_marker += len(set(rec.marker_cells) - kept)
    ok = bad_count == 0 and bad_background == 0 and bad_marker == 0 and n_marker > 0
    verdict(record_property, ok, f"{len(manifest)} slides x {expected} tiles; {n_background} background cells, "
            f"{bad_background} not near_white; {n_marker} marker cells, {bad_marker} dropped", 6)


@pytest.mark.acceptance(7, "AUC oracle")
def test_criterion_7_auc(record_property):
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, size=n)
        y[rng.choice(n, size=2, replace=False)] = [0, 1]
        s = rng.integers(0, 5, size=n) / 4.0 if i % 2 else rng.uniform(size=n)
        pos, neg = s[y == 1], s[y == 0]
        wins = sum(Fraction(1) if p > q else Fraction(1, 2) if p == q else Fraction(0) for p in pos for q in neg)
        worst = max(worst, abs(roc_auc(s, y) - float(wins / (len(pos) * len(neg)))))
    verdict(record_property, worst <= 1e-12, f"max |err| {worst:.1e} over 1000 sets (half tie-heavy)", 7)


@pytest.mark.acceptance(8, "MIL invariants")
def test_criterion_8_mil(record_property):
    rng = np.random.default_rng(8)
    d = 32
    sums = perm = dup = 0.0
    for i in range(100):
        params = init_mil(d, MilHyper(hidden=32, attention=16), np.random.default_rng(i))
        for name in params:
            if name.endswith(("b", "bv", "bu")):
                params[name] = rng.normal(0, 0.2, size=params[name].shape)
        bag = rng.normal(size=(int(rng.integers(1, 60)), d))
        a = attention_scores(bag, params)
        sums = max(sums, float(np.max(np.abs(a.sum(axis=1) - 1.0))))
        logits = mil_forward(bag, params).data
        order = rng.permutation(len(bag))
        perm = max(perm, float(np.max(np.abs(mil_forward(bag[order], params).data - logits))))
        copies = int(rng.integers(2, 5))
        dup = max(dup, float(np.max(np.abs(mil_forward(np.tile(bag, (copies, 1)), params).data - logits))))
    ok = sums <= 1e-6 and perm <= 1e-12 and dup <= 1e-9
    verdict(record_property, ok, f"100 bags: |sum a - 1| {sums:.1e}, permutation {perm:.1e}, duplication {dup:.1e}", 8)


@pytest.mark.slow
@pytest.mark.acceptance(9, "end-to-end synthetic benchmark")
def test_criterion_9_end_to_end(desk_run, record_property):
    out, seconds, code = desk_run
    cfg = PipelineConfig()
    settings_ok = (
        cfg.synth.n_slides == 60 and cfg.synth.positive_fraction == 0.5
        and cfg.ssl.epochs == 20 and cfg.ssl.queue_size == 1024
        and cfg.ssl.temperature == 0.07 and cfg.ssl.learning_rate == 0.06
        and cfg.mil.epochs == 100 and cfg.mil.learning_rate == 1e-3 and cfg.mil.weight_decay == 1e-5
        and cfg.eval.folds == 4 and cfg.eval.stratified and cfg.eval.threshold == 0.5
    )
    assert code == 0
    s = json.loads((out / "metrics" / "summary.json").read_text())
    labels = Counter(r.label for r in read_manifest(out / "corpus" / "manifest.csv"))
    ok = (settings_ok and labels == {0: 30, 1: 30} and s["mean_auc"] >= 0.85
          and (s["ppv"] or 0) >= 0.75 and (s["npv"] or 0) >= 0.75 and seconds <= 15 * 60)
    verdict(record_property, ok, f"mean AUC {s['mean_auc']:.3f} (folds {s['fold_aucs']}), PPV {s['ppv']}, "
            f"NPV {s['npv']}, {seconds / 60:.1f} min on this machine", 9)


@pytest.mark.slow
@pytest.mark.acceptance(10, "heatmap localization")
def test_criterion_10_localization(desk_run, record_property):
    out, _, code = desk_run
    assert code == 0
    manifest = read_manifest(out / "corpus" / "manifest.csv")
    with open(out / "metrics" / "localization.csv") as fh:
        rows = list(csv.DictReader(fh))
    positives = {r.slide_id for r in manifest if r.label == 1}
    covered = {r["slide_id"] for r in rows} == positives
    rate = float(np.mean([r["localized"] == "1" for r in rows]))
    pngs = Counter(p.name.rsplit("_class", 1)[0] for p in (out / "heatmaps").glob("*.png"))
    two_each = set(pngs) == {r.slide_id for r in manifest} and set(pngs.values()) == {2}
    named = all((out / "heatmaps" / f"{r.slide_id}_class{c}.png").exists() for r in manifest for c in (0, 1))
    ok = covered and rate >= 0.8 and two_each and named
    verdict(record_property, ok, f"{rate:.0%} of {len(rows)} positive test slides localized; "
            f"{sum(pngs.values())} PNGs for {len(pngs)} slides", 10)


@pytest.mark.acceptance(11, "determinism")
def test_criterion_11_determinism(tmp_path, record_property):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["run-all", "--config", str(SMOKE), "--out", str(out), "--threads", "1"]) == 0
        runs.append(out)
    a, b = runs
    artifacts = sorted(
        p.relative_to(a) for pattern in ("ssl/*.moco", "mil/*.wmil", "features/bags/*", "metrics/summary.json")
        for p in a.glob(pattern)
    )
    differ = [str(p) for p in artifacts if (a / p).read_bytes() != (b / p).read_bytes()]
    ok = not differ and len(artifacts) > 4
    verdict(record_property, ok, f"{len(artifacts)} checkpoint/bag/metric files compared, "
            f"{len(differ)} differ (smoke config)", 11)

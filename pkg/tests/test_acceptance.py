"""Acceptance criteria 1 to 12, each reported as one PASS/FAIL line."""

import copy
import itertools
import math
import string
import time
from collections import Counter

import numpy as np
import pytest

from fcn_instruct.atlas import AtlasPartition, default_partition, scattered_partition
from fcn_instruct.biomarker import (
    aggregate_saliency,
    analyze,
    group_by_subnetwork,
    max_off_diagonal,
    token_interaction_map,
)
from fcn_instruct.cohort import AttributeDef, CohortSpec, Effect, default_attributes, draw_records
from fcn_instruct.encoder import encode, init_encoder
from fcn_instruct.evalkit import (
    Label,
    Prediction,
    classification_metrics,
    parse_response,
    regression_metrics,
    self_consistency,
)
from fcn_instruct.fcn import AdjacencyMatrix, BoldSeries, normalize_adjacency, pearson_fcn, sliding_windows
from fcn_instruct.gradcheck import run_suite
from fcn_instruct.pipeline import (
    ExperimentConfig,
    evaluate,
    init_models,
    prepare,
    report_metric,
    run_pretrain,
    run_stage1,
    run_stage2,
)
from fcn_instruct.synth import Subject, normalize_value, synth_dataset

# --- criterion 1 --------------------------------------------------------------------


def loop_pearson(x):
    T, D = x.shape
    r = np.zeros((D, D))
    for i in range(D):
        for j in range(D):
            mi, mj = sum(x[:, i]) / T, sum(x[:, j]) / T
            num = sum((x[t, i] - mi) * (x[t, j] - mj) for t in range(T))
            den = math.sqrt(sum((x[t, i] - mi) ** 2 for t in range(T)) * sum((x[t, j] - mj) ** 2 for t in range(T)))
            r[i, j] = num / den
    return r


def test_c01_pearson_oracle(criterion):
    t0 = time.perf_counter()
    r = np.random.default_rng(1)
    worst = 0.0
    for k in range(100):
        D, T = int(r.integers(2, 9)), int(r.integers(3, 51))
        x = r.standard_normal((T, D))
        got = pearson_fcn(BoldSeries(f"s{k}", x)).values
        worst = max(worst, float(np.abs(got - loop_pearson(x)).max()))
    dt = time.perf_counter() - t0
    assert criterion(1, worst <= 1e-10 and dt < 5, f"max abs error {worst:.2e} over 100 series, {dt:.2f}s")


# --- criterion 2 --------------------------------------------------------------------


def test_c02_window_count_grid(criterion):
    t0 = time.perf_counter()
    r = np.random.default_rng(2)
    bad = []
    n = 0
    for T in range(2, 61):
        s = BoldSeries("s", r.standard_normal((T, 2)))
        for L in range(2, T + 1):
            for P in range(1, 11):
                n += 1
                if len(sliding_windows(s, L, P)) != math.floor((T - L) / P) + 1:
                    bad.append((T, L, P))
    ref = sliding_windows(BoldSeries("s", r.standard_normal((180, 2))), 100, 20)
    ok_ref = len(ref) == 5 and [w.window_origin[1] for w in ref] == [0, 20, 40, 60, 80]
    dt = time.perf_counter() - t0
    assert criterion(2, not bad and ok_ref and dt < 1,
                     f"{n} grid cases, {len(bad)} mismatches, (180,100,20)->{len(ref)}, {dt:.2f}s")


# --- criterion 3 --------------------------------------------------------------------


def dense_normalize(a):
    n = a.shape[0]
    ah = [[a[i][j] + (1.0 if i == j else 0.0) for j in range(n)] for i in range(n)]
    deg = [sum(row) for row in ah]
    return np.array([[ah[i][j] / math.sqrt(deg[i] * deg[j]) for j in range(n)] for i in range(n)])


def test_c03_normalization_all_small_graphs(criterion):
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    for n in range(1, 6):
        edges = list(itertools.combinations(range(n), 2))
        for mask in range(1 << len(edges)):
            a = np.zeros((n, n))
            for b, (i, j) in enumerate(edges):
                if mask >> b & 1:
                    a[i, j] = a[j, i] = 1.0
            got = normalize_adjacency(AdjacencyMatrix(a)).values
            worst = max(worst, float(np.abs(got - dense_normalize(a)).max()))
            count += 1
    dt = time.perf_counter() - t0
    assert criterion(3, worst <= 1e-12 and dt < 10, f"{count} graphs, max abs error {worst:.2e}, {dt:.2f}s")


# --- criterion 4 --------------------------------------------------------------------


def test_c04_token_layout(criterion):
    t0 = time.perf_counter()
    part = default_partition(116, 7)
    x = np.random.default_rng(4).standard_normal((60, 116))
    seq = encode(pearson_fcn(BoldSeries("s", x)), part, init_encoder(116, 16, 32, 32))
    layout = seq.layout
    ok = (len(seq) == 124 and seq.tokens.shape == (124, 16)
          and layout == ["roi"] * 116 + ["subnet"] * 7 + ["global"])
    dt = time.perf_counter() - t0
    assert criterion(4, ok and dt < 1, f"{len(seq)} tokens, layout ROI 116 subnet 7 global 1, {dt:.2f}s")


# --- criterion 5 --------------------------------------------------------------------


def test_c05_gradient_suite(criterion):
    t0 = time.perf_counter()
    checks = run_suite(d_model=16, n_layers=2)
    worst = max(checks, key=lambda c: c.rel_error)
    dt = time.perf_counter() - t0
    assert criterion(5, worst.rel_error < 1e-5 and dt < 120,
                     f"{len(checks)} tensors, worst {worst.name} rel error {worst.rel_error:.2e}, {dt:.1f}s")


# --- criterion 6 --------------------------------------------------------------------


def test_c06_synthesis_balance(criterion):
    t0 = time.perf_counter()
    spec = CohortSpec(400, 50, default_partition(), default_attributes(), seed=6)
    subs = [Subject(r.subject_id, r.values, r.split, f"fcn/{r.subject_id}.fcn", ()) for r in draw_records(spec)]
    attrs = list(spec.attributes)
    counts = {"predictive": 2000, "judgment": 4000, "comparative": 4000}
    pairs = synth_dataset(subs, attrs, "two", counts, seed=6)
    judg = Counter(p.answer for p in pairs if p.paradigm == "judgment")
    comp = Counter(p.answer for p in pairs if p.paradigm == "comparative" and p.answer in ("first", "second"))
    yes = judg["yes"] / sum(judg.values())
    first = comp["first"] / sum(comp.values())
    small = {"predictive": 500, "judgment": 500, "comparative": 500}
    owners = {}
    for split in ("train", "test"):
        ps = synth_dataset(subs, attrs, "two", small, seed=7, split=split)
        owners[split] = {s for p in ps for s in p.subjects} | {r[4:-4] for p in ps for r in p.fcn_refs}
    overlap = owners["train"] & owners["test"]
    dt = time.perf_counter() - t0
    ok = len(pairs) == 10_000 and abs(yes - 0.5) <= 0.01 and abs(first - 0.5) <= 0.01 and not overlap and dt < 30
    assert criterion(6, ok, f"yes {yes:.4f}, first {first:.4f} on {len(pairs)} pairs, "
                            f"split overlap {len(overlap)}, {dt:.1f}s")


# --- criterion 7 --------------------------------------------------------------------


def test_c07_normalization_contract(criterion):
    t0 = time.perf_counter()
    lo, hi = 40.0, 160.0
    ends = [normalize_value(v, lo, hi) for v in (lo, (lo + hi) / 2, hi)]
    out = [normalize_value(v, lo, hi) for v in np.linspace(lo, hi, 10_001)]
    monotone = all(a <= b for a, b in zip(out, out[1:]))
    dt = time.perf_counter() - t0
    assert criterion(7, ends == [0, 50, 100] and monotone and dt < 1,
                     f"ends {ends}, monotone {monotone} on 10001 points, {dt:.2f}s")


# --- criterion 8 --------------------------------------------------------------------


def oracle_classification(preds, truths, classes):
    n = len(truths)
    allc = list(classes) + sorted({p for p in preds if p not in classes})
    acc = sum(p == t for p, t in zip(preds, truths)) / n
    X = [[float(p == c) for c in allc] for p in preds]
    Y = [[float(t == c) for c in allc] for t in truths]

    def cov(A, B):
        total = 0.0
        for c in range(len(allc)):
            ma, mb = sum(r[c] for r in A) / n, sum(r[c] for r in B) / n
            total += sum((A[i][c] - ma) * (B[i][c] - mb) for i in range(n))
        return total

    den = math.sqrt(cov(X, X) * cov(Y, Y))
    mcc = cov(X, Y) / den if den else 0.0
    f1 = []
    for c in allc:
        if c not in truths:
            continue
        tp = sum(p == c and t == c for p, t in zip(preds, truths))
        fp = sum(p == c and t != c for p, t in zip(preds, truths))
        fn = sum(p != c and t == c for p, t in zip(preds, truths))
        f1.append(2 * tp / (2 * tp + fp + fn) if tp else 0.0)
    return acc, mcc, sum(f1) / len(f1)


def oracle_regression(v, t):
    n = len(t)
    mae = sum(abs(a - b) for a, b in zip(v, t)) / n
    mv, mt = sum(v) / n, sum(t) / n
    den = math.sqrt(sum((a - mv) ** 2 for a in v) * sum((b - mt) ** 2 for b in t))
    return mae, (sum((a - mv) * (b - mt) for a, b in zip(v, t)) / den if den else 0.0)


def test_c08_metric_oracles(criterion):
    t0 = time.perf_counter()
    r = np.random.default_rng(8)
    classes = ("a", "b", "c")
    worst = 0.0
    for _ in range(200):
        n = int(r.integers(4, 40))
        truths = [classes[i] for i in r.integers(0, 3, n)]
        preds = [classes[i] for i in r.integers(0, 3, n)]
        m = classification_metrics([Label(p) for p in preds], truths, classes)
        acc, mcc, f1 = oracle_classification(preds, truths, classes)
        v, t = r.random(n).tolist(), r.random(n).tolist()
        rm = regression_metrics(v, t)
        mae, pcc = oracle_regression(v, t)
        worst = max(worst, abs(m["acc"] - acc), abs(m["mcc"] - mcc), abs(m["macro_f1"] - f1),
                    abs(rm["mae"] - mae), abs(rm["pcc"] - pcc))
    truths = ["a", "b", "c", "a", "b", "c", "a"]
    const = classification_metrics([Label("a")] * 7, truths, classes)
    perfect = classification_metrics([Label(x) for x in truths], truths, classes)
    edge = (const["mcc"] == 0.0 and perfect["acc"] == 1.0 and perfect["macro_f1"] == 1.0
            and abs(perfect["mcc"] - 1.0) <= 1e-10)
    dt = time.perf_counter() - t0
    assert criterion(8, worst <= 1e-10 and edge and dt < 10,
                     f"max abs error {worst:.2e} over 200 sets, constant MCC {const['mcc']}, "
                     f"perfect MCC {perfect['mcc']:.12f}, {dt:.2f}s")


# --- criteria 9 to 11 ---------------------------------------------------------------

PLANTED = (1, 2)


def planted_config(delta: float) -> ExperimentConfig:
    gender = AttributeDef("gender", "categorical", labels=("male", "female"), effect=Effect(PLANTED, delta, "female"))
    spec = CohortSpec(400, 180, scattered_partition(seed=0), (gender,), seed=1)
    return ExperimentConfig(spec,
                            stage1_counts={"predictive": 2000, "judgment": 2000, "comparative": 1000},
                            stage2_counts={"predictive": 300, "judgment": 300, "comparative": 300},
                            test_counts={"predictive": 300, "judgment": 300, "comparative": 300})


def lm_snapshot(lm):
    return {k: v.copy() for k, v in lm.items()}


@pytest.fixture(scope="module")
def planted():
    t0 = time.perf_counter()
    exp = prepare(planted_config(0.4))
    init_models(exp)
    run_pretrain(exp)
    pretrained_lm = lm_snapshot(exp.lm)
    before = lm_snapshot(exp.lm)
    run_stage1(exp)
    lm_identical = all(np.array_equal(before[k], exp.lm[k]) for k in before)
    stage1 = evaluate(exp)
    stage1_model = (copy.deepcopy(exp.enc), copy.deepcopy(exp.lm))
    run_stage2(exp)
    stage2 = evaluate(exp)

    # text-only pretraining never reads FCN values, so the null run shares it
    null = prepare(planted_config(0.0))
    same_text = null.pairs == exp.pairs and null.tok.vocab == exp.tok.vocab
    init_models(null)
    null.lm = copy.deepcopy(pretrained_lm)
    run_stage1(null)
    null_stage1 = evaluate(null)
    return dict(exp=exp, stage1=stage1, stage2=stage2, null=null_stage1, lm_identical=lm_identical,
                same_text=same_text, stage1_model=stage1_model, seconds=time.perf_counter() - t0)


def test_c09_planted_signal_recovery(planted, criterion):
    acc = report_metric(planted["stage1"], "judgment/gender")
    null = report_metric(planted["null"], "judgment/gender")
    dt = planted["seconds"]
    ok = acc >= 0.80 and 0.40 <= null <= 0.60 and planted["same_text"] and dt < 1800
    assert criterion(9, ok, f"judgment acc {acc:.4f} at delta 0.4, {null:.4f} at delta 0, {dt / 60:.1f} min")


def test_c10_two_stage_ordering(planted, criterion):
    s1 = report_metric(planted["stage1"], "judgment/gender")
    s2 = report_metric(planted["stage2"], "judgment/gender")
    p1 = report_metric(planted["stage1"], "predictive/gender")
    p2 = report_metric(planted["stage2"], "predictive/gender")
    ok = s2 >= s1 - 0.02 and p2 >= p1 - 0.02 and planted["lm_identical"]
    assert criterion(10, ok, f"judgment {s1:.4f} -> {s2:.4f}, predictive {p1:.4f} -> {p2:.4f}, "
                             f"LM bit-identical after stage one {planted['lm_identical']}")


def loop_group(m, part: AtlasPartition):
    D, N = part.roi_count, part.subnet_count
    groups = [[i for i in range(D) if part.subnet_of[i] == g] for g in range(1, N + 1)]
    groups.append([i for i in range(D) if part.subnet_of[i] is None])
    groups.append([D + N])
    out = np.full((N + 2, N + 2), np.nan)
    for a, ga in enumerate(groups):
        for b, gb in enumerate(groups):
            if ga and gb:
                out[a, b] = sum(m[i, j] for i in ga for j in gb) / (len(ga) * len(gb))
    return out


def aggregation_oracle_error() -> float:
    r = np.random.default_rng(11)
    part = AtlasPartition(tuple(f"r{i}" for i in range(8)), (1, 2, None, 3, 1, 2, 3, None), 3)
    worst = 0.0
    for _ in range(5):
        L, H, S = 2, 3, 20
        a = r.random((L, H, S, S)) * np.tril(np.ones((S, S)))
        a /= a.sum(-1, keepdims=True)
        fpos, qpos = list(range(2, 14)), [16, 17, 18]
        sal = np.array([sum(a[l, h, q, f] for l in range(L) for h in range(H) for q in qpos) / L for f in fpos])
        sal /= sal.sum()
        tm = np.array([[sum(a[l, h, i, j] for l in range(L) for h in range(H)) / L for j in fpos] for i in fpos])
        tm = (tm + tm.T) / 2
        tm /= tm.sum()
        got_t = token_interaction_map(a, fpos)
        worst = max(worst, float(np.abs(aggregate_saliency(a, fpos, qpos).scores - sal).max()),
                    float(np.abs(got_t - tm).max()),
                    float(np.nanmax(np.abs(group_by_subnetwork(got_t, part) - loop_group(got_t, part)))))
    return worst


def test_c11_biomarker_concentration(planted, criterion):
    t0 = time.perf_counter()
    exp = planted["exp"]
    females = sorted(s.subject_id for s in exp.subjects if s.split == "test" and s.values["gender"] == "female")
    hits = []
    for seed in range(10):
        chosen = np.random.default_rng(seed).choice(females, size=len(females) // 2, replace=False)
        rep = analyze(exp.pairs["test"], exp.enc, exp.lm, exp.tok, exp.partition, exp.store, subjects=chosen)
        hits.append(max_off_diagonal(rep.subnet_map))
    n_hit = sum(h == PLANTED for h in hits)
    oracle = aggregation_oracle_error()
    dt = time.perf_counter() - t0
    top = Counter(hits).most_common(1)[0]
    ok = n_hit >= 7 and oracle <= 1e-10 and dt < 600
    assert criterion(11, ok, f"block {PLANTED} maximal in {n_hit}/10 runs (most frequent {top[0]} x{top[1]}), "
                             f"aggregation oracle error {oracle:.2e}, {dt:.0f}s")


# --- criterion 12 -------------------------------------------------------------------


def test_c12_parser_totality(criterion):
    t0 = time.perf_counter()
    r = np.random.default_rng(12)
    alphabet = list(string.printable) + ["male", "female", "yes", "no", "42", "100", "101", "-3", "é", " "]
    failures = 0
    for k in range(10_000):
        text = "".join(r.choice(alphabet, size=int(r.integers(0, 30))))
        kind = "categorical" if k % 2 else "continuous"
        try:
            if not isinstance(parse_response(text, kind, ("male", "female")), Prediction):
                failures += 1
        except Exception:
            failures += 1
    bad_votes, n_patterns = 0, 0
    for k in range(1, 6):
        for votes in itertools.product("xyz", repeat=k):
            n_patterns += 1
            counts = Counter(votes)
            top = max(counts.values())
            modes = [c for c in counts if counts[c] == top]
            got = self_consistency([Label(v) for v in votes]).label
            if len(modes) == 1 and got != modes[0] or got not in modes:
                bad_votes += 1
    dt = time.perf_counter() - t0
    assert criterion(12, failures == 0 and bad_votes == 0 and dt < 5,
                     f"{failures} parser failures on 10000 strings, {bad_votes} vote errors over "
                     f"{n_patterns} patterns, {dt:.2f}s")

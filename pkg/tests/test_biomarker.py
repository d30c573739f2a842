import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcn_instruct.atlas import AtlasPartition, default_partition
from fcn_instruct.biomarker import (
    aggregate_saliency,
    analyze,
    emit_plot_data,
    group_by_subnetwork,
    group_labels,
    interaction_map,
    max_off_diagonal,
    read_plot_data,
    token_interaction_map,
)
from fcn_instruct.fcn import InvalidInputError


def causal_attention(L, H, S, seed):
    """Random row-stochastic lower-triangular tensor."""
    r = np.random.default_rng(seed)
    a = r.random((L, H, S, S)) * np.tril(np.ones((S, S)))
    return a / a.sum(-1, keepdims=True)


def loop_saliency(a, fpos, qpos):
    L, H = a.shape[:2]
    s = np.zeros(len(fpos))
    for j, f in enumerate(fpos):
        for l in range(L):
            for h in range(H):
                for q in qpos:
                    s[j] += a[l, h, q, f] / L
    return s / s.sum()


def loop_token_map(a, fpos):
    L, H = a.shape[:2]
    n = len(fpos)
    m = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            for l in range(L):
                for h in range(H):
                    m[i, j] += a[l, h, fpos[i], fpos[j]] / L
    m = (m + m.T) / 2
    return m / m.sum()


# --- saliency -----------------------------------------------------------------------


def test_uniform_attention_gives_uniform_saliency():
    S, n = 12, 7
    a = np.full((2, 3, S, S), 1.0 / S)
    s = aggregate_saliency(a, range(2, 2 + n), [10, 11]).scores
    np.testing.assert_allclose(s, 1.0 / n, atol=1e-15)


def test_one_hot_attention_gives_one_hot_saliency():
    S = 10
    a = np.zeros((2, 2, S, S))
    a[:, :, :, 0] = 1.0
    a[:, :, 8:, 0] = 0.0
    a[:, :, 8:, 4] = 1.0
    s = aggregate_saliency(a, range(1, 8), [8, 9]).scores
    np.testing.assert_array_equal(s, np.eye(7)[3])


@pytest.mark.parametrize("seed", range(4))
def test_saliency_loop_oracle(seed):
    a = causal_attention(2, 4, 15, seed)
    fpos, qpos = list(range(3, 10)), [12, 13, 14]
    s = aggregate_saliency(a, fpos, qpos).scores
    np.testing.assert_allclose(s, loop_saliency(a, fpos, qpos), atol=1e-10)
    assert s.sum() == pytest.approx(1.0, abs=1e-9) and np.all(s >= 0)


def test_saliency_position_errors():
    a = causal_attention(1, 1, 6, 0)
    with pytest.raises(InvalidInputError):
        aggregate_saliency(a, [], [5])
    with pytest.raises(InvalidInputError):
        aggregate_saliency(a, [1, 2], [2, 5])
    with pytest.raises(InvalidInputError):
        aggregate_saliency(a, [1, 2], [6])
    with pytest.raises(InvalidInputError):
        aggregate_saliency(a[0], [1, 2], [5])


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_saliency_answer_order_and_fcn_equivariance(seed):
    r = np.random.default_rng(seed)
    a = causal_attention(2, 2, 14, seed)
    fpos = np.arange(2, 9)
    qpos = np.array([10, 11, 12, 13])
    base = aggregate_saliency(a, fpos, qpos).scores
    np.testing.assert_allclose(aggregate_saliency(a, fpos, r.permutation(qpos)).scores, base, atol=1e-15)
    perm = r.permutation(len(fpos))
    np.testing.assert_allclose(aggregate_saliency(a, fpos[perm], qpos).scores, base[perm], atol=1e-15)


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(0.1, 5), st.floats(0.1, 5))
def test_aggregation_is_linear(seed, c1, c2):
    a1, a2 = causal_attention(2, 2, 10, seed), causal_attention(2, 2, 10, seed + 1)
    fpos, qpos = range(1, 7), [8, 9]
    raw = lambda a: loop_saliency(a, list(fpos), qpos) * a[:, :, qpos][:, :, :, list(fpos)].mean(0).sum()  # noqa: E731
    mix = c1 * a1 + c2 * a2
    # unnormalized aggregate of the mix equals the weighted aggregates
    np.testing.assert_allclose(raw(mix), c1 * raw(a1) + c2 * raw(a2), atol=1e-10)
    np.testing.assert_allclose(aggregate_saliency(mix, fpos, qpos).scores,
                               raw(mix) / raw(mix).sum(), atol=1e-12)
    t = token_interaction_map(mix, fpos)
    m1 = token_interaction_map(a1, fpos) * a1[:, :, 1:7, 1:7].mean(0).sum()
    m2 = token_interaction_map(a2, fpos) * a2[:, :, 1:7, 1:7].mean(0).sum()
    np.testing.assert_allclose(t, (c1 * m1 + c2 * m2) / (c1 * m1 + c2 * m2).sum(), atol=1e-12)


# --- token maps ---------------------------------------------------------------------


def test_token_map_examples():
    a = causal_attention(1, 2, 5, 0)
    np.testing.assert_array_equal(token_interaction_map(a, [0]), [[1.0]])
    eye = np.broadcast_to(np.eye(6), (2, 3, 6, 6))
    m = token_interaction_map(eye, range(6))
    np.testing.assert_allclose(m, np.eye(6) / 6, atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_token_map_loop_oracle(seed):
    a = causal_attention(3, 2, 12, seed)
    fpos = list(range(2, 11))
    m = token_interaction_map(a, fpos)
    np.testing.assert_allclose(m, loop_token_map(a, fpos), atol=1e-10)
    np.testing.assert_array_equal(m, m.T)


# --- subnetwork grouping ------------------------------------------------------------


def test_grouping_oracle_d6_n2():
    part = AtlasPartition(tuple("abcdef"), (1, 2, 1, None, 2, None), 2)
    m = np.random.default_rng(3).random((9, 9))
    got = group_by_subnetwork(m, part)
    groups = [[0, 2], [1, 4], [3, 5], [8]]
    want = np.zeros((4, 4))
    for i, gi in enumerate(groups):
        for j, gj in enumerate(groups):
            want[i, j] = sum(m[x, y] for x in gi for y in gj) / (len(gi) * len(gj))
    np.testing.assert_allclose(got, want, atol=1e-12)
    assert group_labels(part) == ["subnet_1", "subnet_2", "unassigned", "global"]


def test_uniform_map_groups_uniformly():
    part = default_partition(10, 3, assigned=8)
    got = group_by_subnetwork(np.full((14, 14), 0.25), part)
    np.testing.assert_allclose(got, 0.25)


def test_one_subnet_per_roi():
    D = 5
    part = AtlasPartition(tuple("abcde"), tuple(range(1, D + 1)), D)
    m = np.random.default_rng(4).random((2 * D + 1, 2 * D + 1))
    got = group_by_subnetwork(m, part)
    np.testing.assert_allclose(got[:D, :D], m[:D, :D], atol=1e-15)
    assert np.all(np.isnan(got[D])) and np.all(np.isnan(got[:, D]))
    assert got[D + 1, D + 1] == m[-1, -1]


def test_grouping_layout_mismatch():
    with pytest.raises(InvalidInputError):
        group_by_subnetwork(np.zeros((8, 8)), default_partition(6, 2))


def test_max_off_diagonal_only_among_subnets():
    m = np.zeros((5, 5))
    m[0, 2] = m[2, 0] = 0.5
    m[3, 0] = m[0, 3] = 9.0  # unassigned group is ignored
    m[1, 1] = 7.0
    assert max_off_diagonal(m) == (1, 3)


def test_interaction_map_bundle():
    part = default_partition(6, 2, assigned=5)
    a = causal_attention(2, 2, 12, 5)
    im = interaction_map(a, range(1, 10), part)
    assert im.token_map.shape == (9, 9) and im.subnet_map.shape == (4, 4)


# --- plot data ----------------------------------------------------------------------


def test_plot_csv_shape_roundtrip_and_bytes(tmp_path):
    m = np.array([[0.1, 0.2], [0.3, 1 / 3]])
    p = emit_plot_data(m, ["x", "y"], tmp_path / "a.csv")
    rows = p.read_text().splitlines()
    assert len(rows) == 3 and all(len(r.split(",")) == 3 for r in rows)
    assert rows[0] == ",x,y"
    back, labels, cols = read_plot_data(p)
    np.testing.assert_allclose(back, m, atol=1e-12)
    assert labels == cols == ["x", "y"]
    emit_plot_data(m, ["x", "y"], tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    with pytest.raises(InvalidInputError):
        emit_plot_data(m, ["x"], tmp_path / "c.csv")


def test_plot_csv_keeps_nan(tmp_path):
    m = np.array([[np.nan, 1.0]])
    emit_plot_data(m, ["r"], tmp_path / "n.csv", col_labels=["a", "b"])
    back, _, cols = read_plot_data(tmp_path / "n.csv")
    assert np.isnan(back[0, 0]) and back[0, 1] == 1.0 and cols == ["a", "b"]


# --- model level --------------------------------------------------------------------


def test_analyze_on_small_model(small_experiment):
    from fcn_instruct.encoder import init_encoder
    from fcn_instruct.toylm import init_lm

    exp = small_experiment
    enc = init_encoder(20, 16, 16, 16)
    lm = init_lm(len(exp.tok), 16, 2, 2, max_len=96)
    pairs = exp.pairs["test"]
    rep = analyze(pairs, enc, lm, exp.tok, exp.partition, exp.store)
    n_single = sum(len(p.fcn_refs) == 1 for p in pairs)
    assert rep.n_examples == n_single
    assert rep.saliency.shape == (24,) and rep.saliency.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(rep.token_map, rep.token_map.T)
    assert rep.subnet_map.shape == (5, 5)
    some = {pairs[0].subjects[0]}
    sub = analyze(pairs, enc, lm, exp.tok, exp.partition, exp.store, subjects=some)
    assert 0 < sub.n_examples < rep.n_examples
    with pytest.raises(InvalidInputError):
        analyze(pairs, enc, lm, exp.tok, exp.partition, exp.store, subjects=["nobody"])

import csv

import numpy as np
import pytest

from tissdmc import gradengine as ge
from tissdmc import srcmodel as sm
from tissdmc import tiss


def tiny(seed=0, n_sources=2, n_freq=17, n_frames=20, taps=1, hidden=4, n_blocks=2):
    problem = ge.random_problem(n_sources=n_sources, n_freq=n_freq, n_frames=n_frames, taps=taps,
                                seed=seed, K=4)
    net = sm.GluMaskNet(sm.GluConfig(n_freq=problem.xt.shape[1], hidden=hidden, n_blocks=n_blocks))
    params = net.init_params(seed)
    return problem, sm.GluSourceModel(net, None), params


def test_checkpoint_size_formula():
    assert ge.checkpoint_size(513, 5, 2, 20) == 246_240
    # 32-bit accounting: two real values per complex entry
    assert 2 * 4 * ge.checkpoint_size(513, 5, 2, 20) / 2 < 1_000_000
    assert ge.checkpoint_size(513, 5, 2, 20) * 4 < 1_000_000


def test_store_holds_identity_then_one_filter_per_iteration():
    problem, model, params = tiny()
    _, store = ge.forward_collect(problem, model, params, 3)
    assert len(store) == 4 and store.J == 3
    F = problem.xt.shape[1]
    np.testing.assert_array_equal(store[0], tiss.init_filter(2, problem.taps, F))
    assert store.dims == (F, 2, problem.taps, 3)
    assert store.n_values() == ge.checkpoint_size(F, problem.taps, 2, 3)
    assert store.nbytes() == 4 * F * 2 * 2 * (problem.taps + 1) * 16


def test_store_filters_rebuild_every_iterate():
    problem, model, params = tiny(seed=3)
    _, store = ge.forward_collect(problem, model, params, 5)
    P = tiss.init_filter(2, problem.taps, problem.xt.shape[1])
    Y = problem.X.copy()
    for j in range(5):
        P, Y = ge.iteration(P, Y, problem.xt, model, params, j)
        P, Y = P.data, Y.data
        rebuilt = tiss.apply(store[j + 1], problem.xt).data
        assert np.max(np.abs(rebuilt - Y)) <= 1e-12 * max(1.0, np.max(np.abs(Y)))


def test_store_values_and_spill_dir(tmp_path):
    problem, model, params = tiny()
    Y1, mem = ge.forward_collect(problem, model, params, 3)
    Y2, disk = ge.forward_collect(problem, model, params, 3, spill_dir=tmp_path / "spill")
    assert len(list((tmp_path / "spill").glob("*.npy"))) == 4
    np.testing.assert_array_equal(Y1, Y2)
    for j in range(4):
        np.testing.assert_array_equal(mem[j], disk[j])
    a = ge.dmc_backward(problem, model, params, 3, store=disk, Y_final=Y2)
    b = ge.dmc_backward(problem, model, params, 3)
    assert ge.relative_difference(a.grads, b.grads) == 0.0


def test_j_equal_one_matches_bp_exactly():
    problem, model, params = tiny(seed=2)
    d = ge.dmc_backward(problem, model, params, 1)
    b = ge.bp_backward(problem, model, params, 1)
    assert d.loss == b.loss
    assert ge.relative_difference(d.grads, b.grads) <= 1e-12


def test_j_zero_has_no_parameter_gradient():
    problem, model, params = tiny()
    d = ge.dmc_backward(problem, model, params, 0)
    b = ge.bp_backward(problem, model, params, 0)
    assert d.loss == b.loss
    assert all(not np.any(g) for g in d.grads.values())
    assert all(not np.any(g) for g in b.grads.values())


@pytest.mark.parametrize("n_sources,taps,J", [(2, 0, 3), (2, 2, 5), (3, 2, 4), (3, 0, 8)])
def test_dmc_matches_bp(n_sources, taps, J):
    problem, model, params = tiny(seed=J, n_sources=n_sources, taps=taps)
    d = ge.dmc_backward(problem, model, params, J)
    b = ge.bp_backward(problem, model, params, J)
    assert d.loss == pytest.approx(b.loss, abs=1e-12)
    assert ge.relative_difference(d.grads, b.grads) <= 5e-4
    assert ge.relative_difference(d.grads, b.grads) <= 1e-9


def test_dmc_with_training_dropout_matches_bp():
    problem, model, params = tiny(seed=7, n_blocks=4)  # dropout sits after the third block
    d = ge.dmc_backward(problem, model, params, 4, train=True, dropout_seed=11)
    b = ge.bp_backward(problem, model, params, 4, train=True, dropout_seed=11)
    assert ge.relative_difference(d.grads, b.grads) <= 1e-9
    e = ge.bp_backward(problem, model, params, 4, train=True, dropout_seed=12)
    assert ge.relative_difference(e.grads, b.grads) > 1e-6


def test_bp_gradient_matches_directional_finite_differences():
    problem, model, params = tiny(seed=4, n_freq=9, n_frames=14)
    J = 2
    g = ge.bp_backward(problem, model, params, J).grads
    rng = np.random.default_rng(0)
    for _ in range(3):
        d = {k: rng.standard_normal(v.shape) for k, v in params.items()}
        h = 1e-5
        lp = ge.bp_backward(problem, model, {k: params[k] + h * d[k] for k in params}, J).loss
        lm = ge.bp_backward(problem, model, {k: params[k] - h * d[k] for k in params}, J).loss
        fd = (lp - lm) / (2 * h)
        an = sum(np.sum(g[k] * d[k]) for k in params)
        assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an))


def test_bp_gradient_elementwise_fd_on_one_tensor():
    problem, model, params = tiny(seed=5, n_freq=9, n_frames=14)
    name = sorted(params)[-1]
    g = ge.bp_backward(problem, model, params, 2).grads[name]

    def loss_of(v):
        return ge.bp_backward(problem, model, {**params, name: v}, 2).loss

    flat = params[name].ravel()
    worst = 0.0
    for i in range(min(6, flat.size)):
        e = np.zeros_like(flat)
        e[i] = 1e-6
        fd = (loss_of((flat + e).reshape(params[name].shape)) -
              loss_of((flat - e).reshape(params[name].shape))) / 2e-6
        worst = max(worst, abs(fd - g.ravel()[i]) / max(abs(fd), abs(g.ravel()[i]), 1e-8))
    assert worst <= 1e-4


def _r_squared(x, y):
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    return 1 - np.sum(resid**2) / np.sum((y - np.mean(y)) ** 2), slope


def test_memory_scaling_bp_affine_dmc_flat():
    problem, model, params = tiny()
    Js = np.array([1, 5, 10, 20])
    bp = np.array([ge.bp_backward(problem, model, params, J).peak_nodes for J in Js])
    dmc = np.array([ge.dmc_backward(problem, model, params, J).peak_nodes for J in Js])
    r2, slope = _r_squared(Js, bp)
    assert r2 >= 0.99 and slope > 0
    assert (dmc.max() - dmc.min()) / dmc.min() <= 0.05
    single = bp[1] - bp[0]
    assert bp[-1] >= 0.9 * 20 * single / 4


def test_forward_op_ratio_is_two():
    problem, model, params = tiny()
    for J in (5, 10):
        d = ge.dmc_backward(problem, model, params, J)
        b = ge.bp_backward(problem, model, params, J)
        assert d.iteration_forwards == 2 * b.iteration_forwards
        assert 1.7 <= d.forward_ops / b.forward_ops <= 2.1


def test_gradients_are_deterministic():
    problem, model, params = tiny(seed=9)
    a = ge.dmc_backward(problem, model, params, 3, train=True, dropout_seed=1)
    b = ge.dmc_backward(problem, model, params, 3, train=True, dropout_seed=1)
    for k in a.grads:
        np.testing.assert_array_equal(a.grads[k], b.grads[k])


def test_store_fingerprint_mismatch_is_rejected():
    problem, model, params = tiny()
    Y, store = ge.forward_collect(problem, model, params, 2)
    other = {k: v + 1e-3 for k, v in params.items()}
    with pytest.raises(ValueError, match="different"):
        ge.dmc_backward(problem, model, other, 2, store=store, Y_final=Y)
    with pytest.raises(ValueError, match="expected"):
        ge.dmc_backward(problem, model, params, 3, store=store, Y_final=Y)


def test_invalid_arguments():
    problem, model, params = tiny()
    with pytest.raises(ValueError):
        ge.forward_collect(problem, model, params, -1)
    with pytest.raises(ValueError):
        ge.bp_backward(problem, model, params, -1)
    with pytest.raises(ValueError):
        ge.compute_gradient("adjoint", problem, model, params, 1)


def test_reports_are_finite_and_timed():
    problem, model, params = tiny()
    for mode in ("bp", "dmc"):
        rep = ge.compute_gradient(mode, problem, model, params, 2)
        assert np.isfinite(rep.grad_norm()) and rep.grad_norm() > 0
        assert rep.fwd_ms >= 0 and rep.bwd_ms > 0
        assert rep.peak_retained_bytes > 0
        assert (rep.checkpoint_bytes > 0) == (mode == "dmc")


def test_relative_difference():
    a = {"w": np.array([1.0, 2.0])}
    assert ge.relative_difference(a, a) == 0.0
    assert ge.relative_difference({"w": np.array([1.0, 0.0])}, {"w": np.array([0.0, 1.0])}) == pytest.approx(np.sqrt(2))
    assert ge.relative_difference({"w": np.ones(2)}, {"w": np.zeros(2)}) == pytest.approx(np.sqrt(2))


def test_bench_csv_schema(tmp_path):
    problem, model, params = tiny()
    rows = ge.bench([1, 2], sizes=[dict(n_sources=2, n_freq=17, n_frames=20, taps=1)],
                    model=model, params=params)
    assert [(r["mode"], r["J"]) for r in rows] == [("bp", 1), ("dmc", 1), ("bp", 2), ("dmc", 2)]
    path = ge.write_bench_csv(rows, tmp_path / "b" / "bench.csv")
    with open(path) as fh:
        reader = csv.DictReader(fh)
        assert reader.fieldnames[:10] == ["mode", "J", "F", "T", "N", "L", "peak_nodes",
                                          "checkpoint_bytes", "fwd_ms", "bwd_ms"]
        assert len(list(reader)) == 4


def test_problem_layout():
    p = ge.random_problem(n_sources=3, n_freq=33, n_frames=40, taps=2)
    assert p.xt.shape == (9, 33, 40)
    assert p.taps == 2 and p.X.shape == (3, 33, 40)
    assert len(p.projectors) == 3 and p.projectors[0].K == 16
    assert ge.random_problem(loss="si-sdr").projectors[0].K == 1

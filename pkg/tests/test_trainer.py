import json

import numpy as np
import pytest
import yaml

from tissdmc import gradengine as ge
from tissdmc import signal as sig
from tissdmc import srcmodel as sm
from tissdmc import tiss
from tissdmc import trainer as tr

SIM = sig.SimConfig(fs=8000, duration=0.5, t60_range=(0.1, 0.2), seed=3)


def small_config(tmp_path, **kw):
    base = dict(out_dir=str(tmp_path / "run"), batch_size=2, signal_seconds=0.5, J=2, taps=1,
                window=128, hop=32, K=8, lr=1e-3, n_blocks=2, dropout=0.0, seed=0)
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def samples():
    return sig.simulate_many(SIM, 4)


def test_config_defaults_follow_the_documented_recipe():
    c = tr.TrainConfig()
    assert (c.batch_size, c.signal_seconds, c.J, c.lr, c.clip) == (8, 7.0, 20, 1e-4, 5.0)
    assert c.grad_mode == "dmc" and c.loss == "ci-sdr"


def test_config_yaml_round_trip_and_validation(tmp_path):
    c = small_config(tmp_path, grad_mode="bp", max_steps=7)
    c.to_yaml(tmp_path / "c.yaml")
    assert tr.TrainConfig.from_yaml(tmp_path / "c.yaml") == c
    (tmp_path / "bad.yaml").write_text(yaml.safe_dump({"batchsize": 3}))
    with pytest.raises(ValueError, match="unknown"):
        tr.TrainConfig.from_yaml(tmp_path / "bad.yaml")
    for bad in (dict(loss="l1"), dict(grad_mode="adjoint"), dict(J=0), dict(batch_size=0)):
        with pytest.raises(ValueError):
            tr.TrainConfig(**bad)


def test_adam_first_step_moves_by_lr_times_sign():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    grads = {"w": np.array([0.3, -4.0, 0.0])}
    out = tr.Adam(params, lr=0.1).step(params, grads)
    np.testing.assert_allclose(out["w"], [0.9, -1.9, 0.5], atol=1e-6)


def test_adam_matches_hand_recursion():
    rng = np.random.default_rng(0)
    p = {"w": rng.standard_normal(4)}
    adam = tr.Adam(p, lr=0.01, beta1=0.8, beta2=0.9, eps=1e-6)
    m = v = np.zeros(4)
    w = p["w"].copy()
    for t in range(1, 6):
        g = rng.standard_normal(4)
        p = adam.step(p, {"w": g})
        m = 0.8 * m + 0.2 * g
        v = 0.9 * v + 0.1 * g**2
        w = w - 0.01 * (m / (1 - 0.8**t)) / (np.sqrt(v / (1 - 0.9**t)) + 1e-6)
    np.testing.assert_allclose(p["w"], w, rtol=1e-12)


def test_clip_by_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = tr.clip_by_norm(g, 1.0)
    assert norm == 5.0
    assert np.hypot(clipped["a"][0], clipped["b"][0]) == pytest.approx(1.0)
    same, _ = tr.clip_by_norm(g, 10.0)
    assert same is g


def test_state_round_trip(tmp_path):
    params = {"w": np.arange(3.0), "b": np.ones(2)}
    state = tr.TrainState(params=params, adam=tr.Adam(params, 0.1), step=5, epoch=1, best_valid=-3.0)
    state.params = state.adam.step(params, {"w": np.ones(3), "b": np.ones(2)})
    state.save(tmp_path / "s.npz")
    back = tr.TrainState.load(tmp_path / "s.npz", tr.TrainConfig())
    assert (back.step, back.epoch, back.best_valid, back.adam.t) == (5, 1, -3.0, 1)
    for k in params:
        np.testing.assert_array_equal(back.params[k], state.params[k])
        np.testing.assert_array_equal(back.adam.m[k], state.adam.m[k])
    assert not (tmp_path / "s.npz.tmp").exists()


def test_crop_is_seeded_and_in_bounds(samples):
    s = samples[0]
    a = tr._crop(s, 0.25, np.random.default_rng(1))
    b = tr._crop(s, 0.25, np.random.default_rng(1))
    np.testing.assert_array_equal(a[0], b[0])
    assert a[0].shape == (2, 2000) and a[1].shape == (2, 2000)
    full = tr._crop(s, 10.0, np.random.default_rng(1))
    assert full[0] is s.mixture


def _final_params(config, samples, **kw):
    return tr.train(config, samples, **kw).params


def test_training_is_deterministic(tmp_path, samples):
    a = _final_params(small_config(tmp_path / "a", max_steps=2, dropout=0.3, n_blocks=4), samples)
    b = _final_params(small_config(tmp_path / "b", max_steps=2, dropout=0.3, n_blocks=4), samples)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])


def test_dmc_and_bp_trajectories_agree(tmp_path, samples):
    kw = dict(max_steps=10, batch_size=1, epochs=3)
    dmc = tr.train(small_config(tmp_path / "d", grad_mode="dmc", **kw), samples)
    bp = tr.train(small_config(tmp_path / "b", grad_mode="bp", **kw), samples)
    assert len(dmc.history) == len(bp.history) == 10
    for hd, hb in zip(dmc.history, bp.history):
        assert hd["loss"] == pytest.approx(hb["loss"], rel=1e-6)
    assert ge.relative_difference(dmc.params, bp.params) <= 1e-6


def test_resume_reproduces_uninterrupted_run(tmp_path, samples):
    straight = _final_params(small_config(tmp_path / "s", max_steps=4, epochs=2), samples)
    cfg = small_config(tmp_path / "r", max_steps=2, epochs=2)
    tr.train(cfg, samples)
    cfg.max_steps = 4
    resumed = tr.train(cfg, samples)
    assert resumed.step == 4
    for k in straight:
        np.testing.assert_array_equal(straight[k], resumed.params[k])
    lines = (tmp_path / "r" / "run" / "log.jsonl").read_text().splitlines()
    assert [json.loads(l)["step"] for l in lines] == [0, 1, 2, 3]
    assert [h["step"] for h in resumed.history] == [0, 1, 2, 3]


def test_run_directory_contents(tmp_path, samples):
    cfg = small_config(tmp_path, max_steps=2, valid_every=1)
    state = tr.train(cfg, samples[:2], samples[2:3])
    run = tmp_path / "run"
    assert {p.name for p in run.iterdir()} >= {"log.jsonl", "state.npz", "best.npz", "config.yaml"}
    rec = json.loads((run / "log.jsonl").read_text().splitlines()[0])
    assert {"step", "loss", "grad_norm", "lr", "peak_nodes", "wall_ms", "valid_loss"} <= set(rec)
    model, meta = sm.load_checkpoint(run / "best.npz")
    assert meta["window"] == 128 and meta["taps"] == 1
    assert meta["valid_loss"] == state.best_valid


def test_failed_step_is_skipped_and_lr_halved(tmp_path, samples, monkeypatch):
    real = ge.compute_gradient
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 1:
            raise tiss.SingularFilterError("forced")
        return real(*a, **k)

    monkeypatch.setattr(ge, "compute_gradient", flaky)
    state = tr.train(small_config(tmp_path, max_steps=2), samples)
    first, second = state.history
    assert first["skipped"] and first["loss"] is None
    assert second["lr"] == pytest.approx(5e-4) and not second["skipped"]


def test_non_finite_loss_is_skipped(tmp_path, samples, monkeypatch):
    real = ge.compute_gradient

    def poisoned(*a, **k):
        rep = real(*a, **k)
        rep.loss = float("nan")
        return rep

    monkeypatch.setattr(ge, "compute_gradient", poisoned)
    state = tr.train(small_config(tmp_path, max_steps=1), samples)
    assert state.history[0]["skipped"]
    assert state.adam.lr == pytest.approx(5e-4)


def test_no_samples_is_an_error(tmp_path):
    with pytest.raises(ValueError):
        tr.train(small_config(tmp_path), [])


@pytest.mark.parametrize("seed", range(10))
def test_small_gradient_step_decreases_loss(seed, samples):
    cfg = tr.TrainConfig(J=2, taps=1, window=128, hop=32, K=8, n_blocks=2, seed=seed)
    model = tr.build_model(cfg, 65)
    s = samples[seed % len(samples)]
    problem = tr._problem(cfg, s.mixture, s.references)
    rep = ge.dmc_backward(problem, model, model.params, cfg.J)
    step = 1e-4 / rep.grad_norm()
    moved = {k: v - step * rep.grads[k] for k, v in model.params.items()}
    assert ge.dmc_backward(problem, model, moved, cfg.J).loss < rep.loss


def test_overfit_smoke(tmp_path):
    data = sig.simulate_many(sig.SimConfig(fs=8000, duration=0.4, t60_range=(0.1, 0.2), seed=5), 4)
    cfg = small_config(tmp_path, batch_size=4, J=3, lr=3e-3, max_steps=200, epochs=200)
    state = tr.train(cfg, data)
    loss = [h["loss"] for h in state.history]
    assert np.mean(loss[:3]) - np.mean(loss[-10:]) >= 5.0


def test_evaluate_uses_one_path_for_every_model(samples):
    cfg = tr.TrainConfig(n_blocks=2)
    glu = tr.build_model(cfg, 65)
    kw = dict(J=3, taps=1, window=128, hop=32, K=8)
    rows = tr.evaluate("nmf", samples[:2], **kw) + tr.evaluate(glu, samples[:2], name="glu", **kw) \
        + tr.evaluate(sm.IdentityMaskModel(), samples[:2], name="identity", **kw)
    assert [r["model"] for r in rows] == ["nmf"] * 2 + ["glu"] * 2 + ["identity"] * 2
    for r in rows:
        assert set(r) == set(tr.EVAL_COLUMNS)
        assert r["si_sdr_imp"] == pytest.approx(r["si_sdr"] - r["obs_si_sdr"])
        assert np.isfinite(r["ci_sdr"])
    summary = tr.summarize(rows)
    assert set(summary) == {"nmf/2ch", "glu/2ch", "identity/2ch"}
    assert summary["nmf/2ch"]["count"] == 2


def test_default_test_iterations_follow_channel_count():
    three = sig.simulate(sig.SimConfig(n_channels=3, fs=8000, duration=0.4), 0, 0)
    rows = tr.evaluate("nmf", [three], taps=1, window=128, hop=32, K=4)
    assert rows[0]["J"] == 75 and rows[0]["n_channels"] == 3
    assert tr.TEST_ITERATIONS == {2: 50, 3: 75, 4: 100}


def test_checkpoint_round_trip_gives_identical_metrics(tmp_path, samples):
    model = tr.build_model(tr.TrainConfig(n_blocks=2, seed=4), 65)
    path = sm.save_checkpoint(tmp_path / "m.npz", model.config, model.params)
    kw = dict(J=3, taps=1, window=128, hop=32, K=8)
    direct = tr.evaluate(model, samples[:2], **kw)
    loaded = tr.evaluate(str(path), samples[:2], **kw)
    for a, b in zip(direct, loaded):
        for col in tr.EVAL_COLUMNS[4:]:
            assert a[col] == b[col]


def test_score_aligns_permutations(samples):
    s = samples[0]
    swapped = s.references[::-1] * np.array([[2.0], [0.5]])
    row = tr.score(swapped, s, K=4)
    assert row["si_sdr"] == 60.0 and row["si_sir"] == 60.0
    assert tr.best_permutation(swapped, s.references) == (1, 0)


def test_eval_csv(tmp_path, samples):
    rows = tr.evaluate("nmf", samples[:1], J=2, taps=1, window=128, hop=32, K=4)
    path = tr.write_eval_csv(rows, tmp_path / "e" / "eval.csv")
    head = path.read_text().splitlines()[0].split(",")
    assert head == tr.EVAL_COLUMNS


def test_training_data_can_be_simulated_on_the_fly(tmp_path):
    sim = {"count": 2, "fs": 8000, "duration": 0.5, "seed": 9}
    cfg = small_config(tmp_path, max_steps=1, train_sim=sim, valid_sim={**sim, "start": 50})
    cfg.to_yaml(tmp_path / "c.yaml")
    assert tr.TrainConfig.from_yaml(tmp_path / "c.yaml").train_sim == sim
    state = tr.train(cfg)
    assert state.step == 1 and "valid_loss" in state.history[0]

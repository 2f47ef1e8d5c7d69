"""Command-line entry point: ``tissdmc simulate | train | separate | evaluate | gradcheck | bench``."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import gradengine as ge
from . import signal as sig
from . import stft, tiss
from . import trainer as tr


def _parse_range(text: str) -> tuple[float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) != 2 or parts[0] > parts[1]:
        raise click.BadParameter(f"expected 'lo,hi', got {text!r}")
    return parts[0], parts[1]


def _parse_ints(text: str) -> list[int]:
    try:
        vals = [int(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from exc
    if not vals or min(vals) < 0:
        raise click.BadParameter("need at least one non-negative integer")
    return vals


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Joint dereverberation and separation trained through its iterations."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML file with simulator options (SimConfig fields).")
@click.option("--out-manifest", type=click.Path(dir_okay=False), required=True,
              help="Manifest path; audio goes to a sibling '<stem>_audio' directory.")
@click.option("--count", default=16, show_default=True)
@click.option("--channels", default=None, type=int, help="M = N (default 2).")
@click.option("--fs", default=None, type=int, help=f"Sample rate (default {stft.DEFAULT_FS}).")
@click.option("--duration", default=None, type=float, help="Seconds (default 4).")
@click.option("--t60", default=None, help="Range 'lo,hi' in seconds (default 0.2,0.6).")
@click.option("--snr", default=None, help="Range 'lo,hi' in dB (default 10,30).")
@click.option("--corpus", type=click.Path(exists=True, file_okay=False), default=None,
              help="Directory of WAV files used as sources instead of the built-in surrogate.")
@click.option("--seed", default=None, type=int)
@click.option("--start", default=0, show_default=True, help="Index of the first sample.")
def simulate(config_path, out_manifest, count, channels, fs, duration, t60, snr, corpus, seed, start):
    """Write simulated reverberant mixtures and a JSON-lines manifest."""
    cfg = sig.SimConfig.from_yaml(config_path) if config_path else sig.SimConfig()
    overrides = {"n_channels": channels, "fs": fs, "duration": duration, "seed": seed,
                 "corpus_dir": corpus,
                 "t60_range": _parse_range(t60) if t60 else None,
                 "snr_db_range": _parse_range(snr) if snr else None}
    for key, val in overrides.items():
        if val is not None:
            setattr(cfg, key, val)
    samples = sig.simulate_many(cfg, count, start)
    path = sig.write_manifest(samples, out_manifest)
    click.echo(f"wrote {count} samples to {path}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML file with training options.")
@click.option("--train-manifest", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--valid-manifest", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_dir", default=None, help="Run directory (overrides the config).")
@click.option("--grad-mode", type=click.Choice(["dmc", "bp"]), default=None)
@click.option("--fresh", is_flag=True, help="Ignore an existing state and start over.")
def train(config_path, train_manifest, valid_manifest, out_dir, grad_mode, fresh):
    """Train the mask network end to end through the separation iterations."""
    config = tr.TrainConfig.from_yaml(config_path) if config_path else tr.TrainConfig()
    for key, val in (("train_manifest", train_manifest), ("valid_manifest", valid_manifest),
                     ("out_dir", out_dir), ("grad_mode", grad_mode)):
        if val is not None:
            setattr(config, key, val)
    if not (config.train_manifest or config.train_sim):
        raise click.UsageError("training data is required (--train-manifest, or train_manifest / "
                               "train_sim in the config)")

    def progress(rec):
        extra = f" valid={rec['valid_loss']:.3f}" if "valid_loss" in rec else ""
        loss = "skipped" if rec["skipped"] else f"{rec['loss']:.3f}"
        click.echo(f"step {rec['step']:5d} loss={loss} lr={rec['lr']:.2e} "
                   f"nodes={rec['peak_nodes']} {rec['wall_ms'] / 1e3:.1f}s{extra}")

    state = tr.train(config, resume=not fresh, progress=progress)
    from .plotting import plot_training

    plot_training(state.history, Path(config.out_dir) / "training.png")
    click.echo(f"done: {state.step} steps, best validation loss {state.best_valid:.3f}")


@main.command()
@click.option("--in", "mixture", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Multichannel WAV file.")
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Trained mask network; the NMF model is used when omitted.")
@click.option("--iterations", "-J", type=int, default=None,
              help="Defaults to 50/75/100 for 2/3/4 channels.")
@click.option("--window", type=int, default=None)
@click.option("--hop", type=int, default=None)
@click.option("--delay", type=int, default=None)
@click.option("--taps", type=int, default=None)
@click.option("--ref", default=0, show_default=True, help="Reference microphone.")
def separate(mixture, out_dir, checkpoint, iterations, window, hop, delay, taps, ref):
    """Separate a multichannel WAV file into one WAV per source."""
    x, fs = sig.read_wav(mixture)
    meta = {}
    if checkpoint:
        from .srcmodel import load_checkpoint

        model, meta = load_checkpoint(checkpoint)
    else:
        from .srcmodel import NmfModel

        model = NmfModel()
    window = window or meta.get("window", stft.DEFAULT_WINDOW)
    hop = hop or meta.get("hop", stft.DEFAULT_HOP)
    delay = delay or meta.get("delay", 1)
    taps = taps if taps is not None else meta.get("taps", 5)
    J = iterations if iterations is not None else tr.TEST_ITERATIONS.get(x.shape[0], 50)
    res = tiss.separate(x, model, J, delay, taps, window, hop, ref)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for n, est in enumerate(res.estimates):
        sig.write_wav(out / f"source{n}.wav", est, fs)
    click.echo(f"wrote {len(res.estimates)} sources to {out}")


@main.command()
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--nmf/--no-nmf", default=True, show_default=True, help="Also score the NMF model.")
@click.option("--iterations", "-J", type=int, default=None,
              help="Defaults to 50/75/100 for 2/3/4 channels.")
@click.option("--window", type=int, default=None)
@click.option("--hop", type=int, default=None)
@click.option("--K", "K", default=512, show_default=True, help="CI-SDR filter length.")
@click.option("--channels", type=int, default=None,
              help="Expected channel count; samples with another count are an error.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="eval", show_default=True)
def evaluate(manifest, checkpoint, nmf, iterations, window, hop, K, channels, out_dir):
    """Score separation on a manifest; writes eval.csv, summary.json and eval.png."""
    samples = sig.read_manifest(manifest)
    if channels is not None:
        bad = [s.id for s in samples if s.mixture.shape[0] != channels]
        if bad:
            raise click.UsageError(f"{len(bad)} samples do not have {channels} channels (first: {bad[0]})")
    meta = {}
    if checkpoint:
        from .srcmodel import load_checkpoint

        _, meta = load_checkpoint(checkpoint)
    window = window or meta.get("window", stft.DEFAULT_WINDOW)
    hop = hop or meta.get("hop", stft.DEFAULT_HOP)
    kw = dict(J=iterations, delay=meta.get("delay", 1), taps=meta.get("taps", 5),
              window=window, hop=hop, K=K)
    rows = []
    if nmf:
        rows += tr.evaluate("nmf", samples, **kw)
    if checkpoint:
        rows += tr.evaluate(checkpoint, samples, name="glu", **kw)
    if not rows:
        raise click.UsageError("nothing to evaluate: pass --checkpoint or keep --nmf")
    from .plotting import plot_evaluation

    out = Path(out_dir)
    tr.write_eval_csv(rows, out / "eval.csv")
    summary = tr.summarize(rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    plot_evaluation(rows, out / "eval.png", "si_sdr_imp")
    for key, stats in summary.items():
        click.echo(f"{key:10s} n={stats['count']:3d}  SI-SDR imp median {stats['median_si_sdr_imp']:6.2f} dB"
                   f"  CI-SDR median {stats['median_ci_sdr']:6.2f} dB")


@main.command()
@click.option("--full", is_flag=True, help="Run 100 instances instead of 10.")
@click.option("--J", "J", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--tolerance", default=5e-4, show_default=True)
def gradcheck(full, J, seed, tolerance):
    """Compare DMC and BP gradients on random small problems."""
    from .srcmodel import GluConfig, GluMaskNet, GluSourceModel

    worst = 0.0
    count = 100 if full else 10
    for i in range(count):
        problem = ge.random_problem(seed=seed + i)
        net = GluMaskNet(GluConfig(n_freq=problem.xt.shape[1], hidden=8, n_blocks=2))
        params = net.init_params(seed + i)
        model = GluSourceModel(net, params)
        dmc = ge.dmc_backward(problem, model, params, J)
        bp = ge.bp_backward(problem, model, params, J)
        diff = ge.relative_difference(dmc.grads, bp.grads)
        worst = max(worst, diff)
        click.echo(f"instance {i:3d}: |g_dmc - g_bp| / |g_bp| = {diff:.3e}")
    ok = worst <= tolerance
    click.echo(f"worst {worst:.3e} ({'PASS' if ok else 'FAIL'} at {tolerance:g})")
    sys.exit(0 if ok else 1)


@main.command()
@click.option("--j", "J_list", default="1,5,10,20", show_default=True,
              help="Comma-separated iteration counts.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="bench", show_default=True)
@click.option("--freq", default=65, show_default=True, help="Frequency bins of the test problem.")
@click.option("--frames", default=60, show_default=True)
@click.option("--seed", default=0, show_default=True)
def bench(J_list, out_dir, freq, frames, seed):
    """Peak memory and wall time of BP and DMC against J; writes bench.csv and bench.png."""
    from .plotting import plot_bench

    Js = _parse_ints(J_list)
    rows = ge.bench(Js, sizes=[dict(n_sources=2, n_freq=freq, n_frames=frames, taps=2)], seed=seed)
    out = Path(out_dir)
    ge.write_bench_csv(rows, out / "bench.csv")
    plot_bench(rows, out / "bench.png")
    click.echo(f"{'mode':4s} {'J':>3s} {'nodes':>7s} {'ckpt_B':>9s} {'fwd_ms':>9s} {'bwd_ms':>9s} {'ops':>7s}")
    for r in rows:
        click.echo(f"{r['mode']:4s} {r['J']:3d} {r['peak_nodes']:7d} {r['checkpoint_bytes']:9d} "
                   f"{r['fwd_ms']:9.1f} {r['bwd_ms']:9.1f} {r['forward_ops']:7d}")
    click.echo(f"wrote {out / 'bench.csv'} and {out / 'bench.png'}")


if __name__ == "__main__":
    main()

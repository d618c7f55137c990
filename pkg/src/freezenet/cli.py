"""Command-line driver: reproducible runs that emit CSV/JSON artifacts.

Exit codes: 0 success, 2 usage error, 3 data error, 4 codec error,
5 numeric failure (NaN/diverged loss or a failed gradient check).
"""

import csv
import functools
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import data as data_mod
from . import nn, selection, store
from . import train as train_mod
from .errors import (CodecError, DataError, DimensionError, NumericError,
                     ParameterError)
from .rng import RngStream

DATA_ENV = "FREEZENET_DATA_DIR"
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def mapped_errors(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except (ParameterError, DimensionError) as e:
            raise click.UsageError(str(e))
        except DataError as e:
            click.echo(f"data error: {e}", err=True)
            sys.exit(3)
        except CodecError as e:
            click.echo(f"codec error: {e}", err=True)
            sys.exit(4)
        except NumericError as e:
            click.echo(f"numeric failure: {e}", err=True)
            sys.exit(5)
    return wrapper


def _mnist_path(data_dir: Path, stem: str) -> Path:
    for suffix in (".gz", ""):
        p = data_dir / (stem + suffix)
        if p.is_file():
            return p
    raise DataError(f"{data_dir}: missing {stem}[.gz]")


def _load_mnist(data_dir: str, role: str) -> data_mod.Dataset:
    d = Path(data_dir)
    if not d.is_dir():
        raise DataError(f"data directory {d} does not exist")
    img_stem, lab_stem = MNIST_FILES[role]
    return data_mod.load_idx(_mnist_path(d, img_stem), _mnist_path(d, lab_stem),
                             role=role)


@functools.lru_cache(maxsize=2)
def _cached_train(data_dir: str) -> data_mod.Dataset:
    return _load_mnist(data_dir, "train")


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for row in rows:
            w.writerow({c: ("" if row.get(c) is None else row[c]) for c in columns})


def _f64_gradient_check(spec, scheme, seed, batch, tol=1e-4) -> float:
    """Central-difference spot check of a fresh float64 net; NumericError on
    disagreement. Returns the worst relative error seen."""
    params = nn.init_params(spec, scheme, RngStream(seed, "init"), dtype=np.float64)
    x, labels = batch
    logp, cache = nn.forward(spec, params, x)
    grads = nn.backward(spec, params, cache, labels)

    def loss():
        lp, _ = nn.forward(spec, params, x)
        return nn.nll_loss(lp, labels)

    worst = 0.0
    coords = [("w", int(i)) for i in
              np.linspace(0, spec.weight_count - 1, 8).round()]
    coords += [("b", 0), ("b", spec.bias_count - 1)]
    for kind, i in coords:
        arr = params.weights if kind == "w" else params.biases
        g = grads.weights[i] if kind == "w" else grads.biases[i]
        h = 1e-5 * max(1.0, abs(arr[i]))
        orig = arr[i]
        arr[i] = orig + h
        up = loss()
        arr[i] = orig - h
        down = loss()
        arr[i] = orig
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(fd - g) / max(abs(fd), abs(g), 1e-8))
    if worst > tol:
        raise NumericError(f"f64 gradient check failed: relative error {worst:.3e}")
    return worst


def _encode_best(state, cfg, spec):
    """Most compact frozen-reconstruction mode the snapshot actually admits."""
    last = None
    for frozen_mode in ("seed", "zeros", "dense"):
        try:
            return store.encode(state.best_snapshot, state.mask, cfg.seeds["init"],
                                cfg.init_scheme, spec,
                                epoch_of_best=state.epoch_of_best,
                                val_acc=state.best_val_acc,
                                frozen_mode=frozen_mode)
        except store.IntegrityError as e:
            last = e
    raise last


@click.group()
@click.version_option(package_name="freezenet")
def main():
    """Training with one-shot weight freezing, and seed-based checkpoints."""


@main.command("train")
@click.option("--arch", type=click.Choice(sorted(nn.ARCHITECTURES)),
              default="lenet300100", show_default=True)
@click.option("--mode", type=click.Choice(train_mod.MODES), default="baseline",
              show_default=True)
@click.option("--q", type=float, default=0.0, show_default=True,
              help="Freezing rate in [0, 1).")
@click.option("--epochs", type=int, default=30, show_default=True)
@click.option("--lr", type=float, default=0.1, show_default=True)
@click.option("--momentum", type=float, default=0.9, show_default=True)
@click.option("--wd", type=float, default=5e-4, show_default=True)
@click.option("--wd-mode", type=click.Choice(train_mod.WD_MODES),
              default="trainable_only", show_default=True)
@click.option("--split", default="9/1", show_default=True,
              help="train/validation ratio, e.g. 9/1 or 19/1.")
@click.option("--batch-size", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--data-dir", envvar=DATA_ENV, required=True,
              help=f"MNIST IDX directory (or ${DATA_ENV}).")
@click.option("--out-dir", default=None,
              help="Artifact directory [default: runs/<arch>_<mode>_q<q>_s<seed>].")
@click.option("--reinit-scheme", type=click.Choice(nn.INIT_SCHEMES), default=None,
              help="Redraw parameters under this scheme after mask selection.")
@click.option("--f64-verify", is_flag=True,
              help="Spot-check analytic gradients against float64 central "
                   "differences before training.")
@mapped_errors
def cmd_train(arch, mode, q, epochs, lr, momentum, wd, wd_mode, split,
              batch_size, seed, data_dir, out_dir, reinit_scheme, f64_verify):
    """Train one configuration and write manifest/history/summary/checkpoint."""
    if mode == "baseline" and q != 0:
        click.echo(f"warning: --q {q} is ignored in baseline mode", err=True)
        q = 0.0
    spec = nn.ARCHITECTURES[arch]()
    cfg = train_mod.TrainConfig(
        epochs=epochs, lr=lr, momentum=momentum, weight_decay=wd,
        wd_mode=wd_mode, batch_size=batch_size, split=split,
        seeds=train_mod.default_seeds(seed), reinit_scheme=reinit_scheme,
    )
    out = Path(out_dir) if out_dir else Path("runs") / f"{arch}_{mode}_q{q}_s{seed}"
    out.mkdir(parents=True, exist_ok=True)

    config = {
        "arch": arch, "mode": mode, "q": q, "epochs": epochs, "lr": lr,
        "momentum": momentum, "weight_decay": wd, "wd_mode": wd_mode,
        "split": split, "batch_size": batch_size, "seed": seed,
        "seeds": cfg.seeds, "init_scheme": cfg.init_scheme,
        "reinit_scheme": reinit_scheme, "lr_decay_every": cfg.lr_decay_every,
        "lr_decay_factor": cfg.lr_decay_factor,
    }
    config["config_hash"] = hashlib.sha256(
        json.dumps(config, sort_keys=True).encode()).hexdigest()[:12]
    _write_json(out / "manifest.json", config)

    train_ds = _load_mnist(data_dir, "train")
    test_ds = _load_mnist(data_dir, "test")

    if f64_verify:
        err = _f64_gradient_check(spec, cfg.init_scheme, cfg.seeds["init"],
                                  (train_ds.images[:16], train_ds.labels[:16]))
        click.echo(f"f64 gradient check passed (max relative error {err:.2e})")

    state, history = train_mod.train(spec, cfg, train_ds, mode, q)
    columns = ["epoch", "train_loss", "train_acc", "val_acc", "lr",
               "grad_flow", "max_frozen_magnitude"]
    _write_csv(out / "history.csv", history, columns)

    _, test_acc = train_mod.evaluate(spec, state.best_snapshot, test_ds)
    q_beta = selection.real_freezing_rate(state.mask, spec)
    summary = {
        "test_acc": test_acc,
        "q": q,
        "q_beta": float(q_beta),
        "epoch_of_best": state.epoch_of_best,
        "val_acc": state.best_val_acc,
        "rescued": state.mask.rescued,
    }
    _write_json(out / "summary.json", summary)
    (out / "checkpoint.fznt").write_bytes(_encode_best(state, cfg, spec))
    click.echo(f"test_acc={test_acc:.4f} q_beta={float(q_beta):.6f} "
               f"epoch_of_best={state.epoch_of_best} -> {out}")


@functools.lru_cache(maxsize=8)
def _probe_baseline(arch, seed, split, batch_size, limit, data_dir):
    spec = nn.ARCHITECTURES[arch]()
    params, _, probe_ds = _probe_setup(arch, seed, split, batch_size, limit, data_dir)
    rep = train_mod.gradient_flow_probe(spec, params, train_mod.all_ones_mask(spec),
                                        probe_ds, batch_size)
    return rep.mean_abs_grad


def _probe_setup(arch, seed, split, batch_size, limit, data_dir):
    """Init params, the scoring batch, and the probe subset for one seed."""
    spec = nn.ARCHITECTURES[arch]()
    seeds = train_mod.default_seeds(seed)
    params = nn.init_params(spec, "xavier_normal", RngStream(seeds["init"], "init"))
    shuffle = RngStream(seeds["shuffle"], "shuffle")
    tr, _ = data_mod.split_shuffle(_cached_train(data_dir), split, shuffle)
    first = shuffle.permutation(len(tr))[:batch_size]
    batch = (tr.images[first], tr.labels[first])
    probe_ds = tr
    if limit and limit < len(tr):
        probe_ds = data_mod.Dataset(tr.images[:limit], tr.labels[:limit], tr.role)
    return params, batch, probe_ds


def _probe_cell(args):
    arch, method, q, seed, split, batch_size, limit, data_dir = args
    base = _probe_baseline(arch, seed, split, batch_size, limit, data_dir)
    if method == "baseline":
        return {"method": method, "q": 0.0, "seed": seed, "mean_abs_grad": base,
                "baseline_mean": base, "ratio": 1.0}
    spec = nn.ARCHITECTURES[arch]()
    params, batch, probe_ds = _probe_setup(arch, seed, split, batch_size, limit,
                                           data_dir)
    rescue = RngStream(train_mod.default_seeds(seed)["rescue"], "rescue")
    mask = train_mod.build_run_mask(spec, params, method, q, batch, rescue)
    if method in train_mod.PRUNE_MODES:
        params.weights *= mask.bits.astype(params.dtype)
        params.bump()
    rep = train_mod.gradient_flow_probe(spec, params, mask, probe_ds, batch_size,
                                        baseline_mean=base)
    return {"method": method, "q": q, "seed": seed,
            "mean_abs_grad": rep.mean_abs_grad, "baseline_mean": base,
            "ratio": rep.ratio}


@main.command("probe")
@click.option("--arch", type=click.Choice(sorted(nn.ARCHITECTURES)),
              default="lenet300100", show_default=True)
@click.option("--methods", default="freezenet,snip", show_default=True,
              help="Comma list of modes (baseline rows always have ratio 1).")
@click.option("--q", default="0.9,0.999", show_default=True,
              help="Comma list of freezing rates.")
@click.option("--seeds", type=int, default=3, show_default=True,
              help="Number of seeds; runs use seeds 1..N.")
@click.option("--split", default="9/1", show_default=True)
@click.option("--batch-size", type=int, default=100, show_default=True)
@click.option("--limit", type=int, default=10000, show_default=True,
              help="Probe over the first N training images (0 = all).")
@click.option("--parallel", type=int, default=1, show_default=True,
              help="Worker processes for the sweep.")
@click.option("--data-dir", envvar=DATA_ENV, required=True)
@click.option("--out-dir", default="probe", show_default=True)
@mapped_errors
def cmd_probe(arch, methods, q, seeds, split, batch_size, limit, parallel,
              data_dir, out_dir):
    """Gradient-flow sweep: mean |masked gradient| per trainable parameter,
    and its ratio to the dense baseline, per (method, q, seed)."""
    method_list = [m.strip() for m in methods.split(",") if m.strip()]
    for m in method_list:
        if m not in train_mod.MODES:
            raise ParameterError(f"unknown method {m!r}")
    q_list = [float(v) for v in q.split(",") if v.strip()]
    if seeds < 1:
        raise ParameterError("--seeds must be >= 1")
    _load_mnist(data_dir, "train")  # fail fast before any sweep work

    cells = []
    for m in method_list:
        pairs = [(m, 0.0)] if m == "baseline" else [(m, qv) for qv in q_list]
        for method, qv in pairs:
            for seed in range(1, seeds + 1):
                cells.append((arch, method, qv, seed, split, batch_size, limit,
                              data_dir))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            rows = list(ex.map(_probe_cell, cells))
    else:
        rows = [_probe_cell(c) for c in cells]

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns = ["method", "q", "seed", "mean_abs_grad", "baseline_mean", "ratio"]
    _write_csv(out / "gradflow.csv", rows, columns)
    click.echo(f"{len(rows)} rows -> {out / 'gradflow.csv'}")


def _echo_report(rep: store.SizeReport):
    click.echo(f"reported size: {rep.reported_kB:.1f} kB "
               f"(baseline {rep.baseline_kB:.1f} kB, "
               f"compression {rep.compression_factor:.1f}x)")
    click.echo(f"trainable payload: {rep.kept_params_kB:.1f} kB, "
               f"mask {rep.encoded_mask_bytes} B, "
               f"on disk {rep.on_disk_bytes} B")


@main.command("compress")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "-o", default=None, help="Re-encoded checkpoint path.")
@mapped_errors
def cmd_compress(checkpoint, out):
    """Re-encode a checkpoint in its most compact consistent form and report
    storage sizes."""
    params, mask, meta = store.decode(Path(checkpoint).read_bytes())
    last = None
    for frozen_mode in ("seed", "zeros", "dense"):
        try:
            blob = store.encode(params, mask, meta["seed"], meta["scheme"],
                                params.spec, epoch_of_best=meta["epoch_of_best"],
                                val_acc=meta["val_acc"], frozen_mode=frozen_mode)
            break
        except store.IntegrityError as e:
            last = e
    else:
        raise last
    if out:
        Path(out).write_bytes(blob)
        click.echo(f"wrote {out} ({frozen_mode} mode)")
    _echo_report(store.size_report(blob))


@main.command("decompress")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "-o", default=None,
              help="Write a dense-mode checkpoint (no seed needed to read).")
@mapped_errors
def cmd_decompress(checkpoint, out):
    """Restore full parameters from a checkpoint and report storage sizes."""
    blob = Path(checkpoint).read_bytes()
    params, mask, meta = store.decode(blob)
    if out:
        dense = store.encode(params, mask, meta["seed"], meta["scheme"],
                             params.spec, epoch_of_best=meta["epoch_of_best"],
                             val_acc=meta["val_acc"], frozen_mode="dense")
        Path(out).write_bytes(dense)
        click.echo(f"wrote {out} (dense mode)")
    click.echo(f"{params.spec.name}: {params.spec.param_count} parameters "
               f"restored (q={float(mask.q)}, popcount={mask.popcount}, "
               f"epoch_of_best={meta['epoch_of_best']})")
    _echo_report(store.size_report(blob))


if __name__ == "__main__":
    main()

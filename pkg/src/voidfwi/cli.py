"""Command-line orchestration: dataset generation, supervised pretraining,
single-sample inversion, and report aggregation.

Exit statuses: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command is deterministic given config and seeds; existing output files
with different content are never silently replaced (pass --force).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import ConfigError, ExperimentConfig, config_hash, load_config
from .io import OverwriteError, guarded_write_bytes, read_field_raw, write_field
from .network import CheckpointMismatch, checkpoint_to_bytes, prepare_input
from .training import (
    ForwardSetup,
    RunHistory,
    TrainingAborted,
    network_grid,
    run_fwi,
    transfer_weights,
)

__all__ = ["main"]

AP_REFERENCE_LINE = 1.0 - 1e-4  # recovery threshold drawn in the report plots


class UsageError(ValueError):
    """Maps to exit status 2."""


def _load_cfg(args) -> ExperimentConfig:
    if args.config is None:
        return ExperimentConfig()
    return load_config(args.config)


def _check_hash_binding(cfg, manifest, allow_mismatch: bool):
    have = config_hash(cfg)
    if manifest.config_hash != have and not allow_mismatch:
        raise UsageError(
            f"dataset was generated under config hash {manifest.config_hash}, current "
            f"config hashes to {have}; pass --allow-config-mismatch to override"
        )


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    t0 = time.perf_counter()
    manifest, records = data_mod.generate_dataset(cfg, seed=args.seed)
    data_mod.write_dataset(args.out, manifest, records, force=args.force)
    wall = time.perf_counter() - t0
    print(
        f"generated {len(records)} of {manifest.n_samples} samples "
        f"({len(manifest.failures)} failures) into {args.out} in {wall:.1f}s"
    )
    for i, msg in sorted(manifest.failures.items()):
        print(f"  sample {i} failed: {msg}", file=sys.stderr)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_cfg(args)
    manifest = data_mod.load_manifest(args.dataset)
    _check_hash_binding(cfg, manifest, args.allow_config_mismatch)
    train_size = len(manifest.train_ids)
    if args.n_d > train_size:
        raise UsageError(
            f"--n-d {args.n_d} exceeds the training split ({train_size} samples)"
        )
    ids = data_mod.pretrain_subset(manifest, args.n_d)
    seed = cfg.pretrain.seed if args.seed is None else args.seed

    net = cfg.make_network().init_glorot(seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if ids:
        grid = cfg.make_grid()
        inputs, targets = [], []
        for i in ids:
            traces, gamma = data_mod.load_sample(args.dataset, i, grid)
            inputs.append(prepare_input(traces, manifest.channel_scale))
            targets.append(gamma)
        from .training import pretrain

        history = pretrain(
            net, inputs, targets,
            epochs=cfg.pretrain.epochs, lr=cfg.pretrain.lr,
            batch_size=cfg.pretrain.batch_size, seed=seed,
        )
    else:
        history = RunHistory()  # baseline checkpoint: initialization only
    guarded_write_bytes(out / "checkpoint.wfc", checkpoint_to_bytes(net), args.force)
    guarded_write_bytes(
        out / "history.csv",
        history.to_csv(include_timings=args.timings).encode(),
        args.force,
    )
    meta = {
        "kind": "pretrain",
        "config_hash": config_hash(cfg),
        "n_d": args.n_d,
        "seed": seed,
        "sample_ids": ids,
    }
    guarded_write_bytes(
        out / "run_meta.json",
        (json.dumps(meta, sort_keys=True, indent=2) + "\n").encode(),
        args.force,
    )
    last = f", final loss_d {history.rows[-1].loss_d:.6g}" if len(history) else ""
    print(f"pretrained on {len(ids)} samples for {len(history)} epochs{last}")
    return 0


def cmd_invert(args) -> int:
    cfg = _load_cfg(args)
    manifest = data_mod.load_manifest(args.dataset)
    _check_hash_binding(cfg, manifest, args.allow_config_mismatch)
    if args.sample not in manifest.ellipses:
        raise UsageError(f"sample {args.sample} not present in {args.dataset}")
    setup = ForwardSetup.from_config(cfg)
    traces, gamma_true = data_mod.load_sample(args.dataset, args.sample, setup.grid)

    seed = cfg.fwi.seed if args.seed is None else args.seed
    net = cfg.make_network().init_glorot(seed)
    label = "scratch"
    if args.checkpoint is not None:
        freeze = cfg.fwi.freeze_prefix if args.freeze is None else args.freeze
        transfer_weights(args.checkpoint, net, freeze)
        label = "pretrained"
    elif args.freeze:
        net.freeze_prefix(args.freeze)
    if args.label is not None:
        label = args.label
    lr = args.lr if args.lr is not None else (
        cfg.fwi.lr_transfer if args.checkpoint is not None else cfg.fwi.lr
    )
    epochs = cfg.fwi.epochs if args.max_epochs is None else args.max_epochs
    ap_target = None if args.no_early_stop else cfg.fwi.ap_target

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    callback = None
    if args.save_fields:
        def callback(epoch, gamma):
            if epoch % args.save_fields == 0:
                write_field(out / f"gamma_epoch_{epoch:04d}.wfi", gamma, force=args.force)

    history = run_fwi(
        net, traces, setup,
        epochs=epochs, lr=lr,
        gamma_true=gamma_true, ap_target=ap_target,
        channel_scale=manifest.channel_scale,
        snapshot_callback=callback,
    )

    ngrid = network_grid(net, setup.grid.lx, setup.grid.ly)
    from .grid import ScalarField, resample_nearest

    gamma_final = resample_nearest(
        ScalarField.from2d(ngrid, net.forward(prepare_input(traces, manifest.channel_scale))),
        setup.grid,
    )
    write_field(out / "gamma_final.wfi", gamma_final, force=args.force)
    guarded_write_bytes(out / "checkpoint_final.wfc", checkpoint_to_bytes(net), args.force)
    guarded_write_bytes(
        out / "history.csv",
        history.to_csv(include_timings=args.timings).encode(),
        args.force,
    )
    meta = {
        "kind": "invert",
        "label": label,
        "config_hash": config_hash(cfg),
        "sample": args.sample,
        "seed": seed,
        "checkpoint": str(args.checkpoint) if args.checkpoint else None,
        "lr": lr,
    }
    guarded_write_bytes(
        out / "run_meta.json",
        (json.dumps(meta, sort_keys=True, indent=2) + "\n").encode(),
        args.force,
    )
    final = history.rows[-1]
    ap = "n/a" if final.avg_precision is None else f"{final.avg_precision:.6f}"
    print(
        f"inverted sample {args.sample} ({label}): {len(history)} epochs, "
        f"final loss_m {final.loss_m:.6g}, avg precision {ap}"
    )
    return 0


def _load_run(run_dir: Path):
    hist_path = run_dir / "history.csv"
    if not hist_path.exists():
        raise UsageError(f"{run_dir} has no history.csv")
    history = RunHistory.from_csv(hist_path.read_text())
    label = "run"
    meta_path = run_dir / "run_meta.json"
    if meta_path.exists():
        label = json.loads(meta_path.read_text()).get("label", "run")
    return label, history


def cmd_report(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = [(Path(d), *_load_run(Path(d))) for d in args.runs]
    groups: dict[str, list[RunHistory]] = {}
    for _, label, hist in runs:
        groups.setdefault(label, []).append(hist)

    for label, hists in groups.items():
        epochs = [tuple(h.column("epoch")) for h in hists]
        if len(set(epochs)) > 1:
            offenders = [
                str(d) for d, lab, h in runs
                if lab == label and tuple(h.column("epoch")) != epochs[0]
            ]
            raise UsageError(
                f"group {label!r} mixes epoch grids; offending runs: {offenders}"
            )

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    lines = ["group,epoch,loss_m,avg_precision,n_runs"]
    curves = {}
    for label in sorted(groups):
        hists = groups[label]
        epochs = hists[0].column("epoch")
        def col_mean(name):
            cols = np.array(
                [[np.nan if v is None else v for v in h.column(name)] for h in hists]
            )
            return np.nanmean(cols, axis=0)
        loss_m = col_mean("loss_m")
        ap = col_mean("avg_precision")
        curves[label] = (epochs, loss_m, ap)
        for e, lm, a in zip(epochs, loss_m, ap):
            lm_s = "" if np.isnan(lm) else repr(float(lm))
            ap_s = "" if np.isnan(a) else repr(float(a))
            lines.append(f"{label},{e},{lm_s},{ap_s},{len(hists)}")
    guarded_write_bytes(out / "aggregate.csv", ("\n".join(lines) + "\n").encode(), args.force)

    def save_plot(fig, name):
        import io as _io

        buf = _io.BytesIO()
        fig.savefig(buf, format="png", dpi=120)
        plt.close(fig)
        guarded_write_bytes(out / name, buf.getvalue(), args.force)

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (epochs, loss_m, _) in curves.items():
        ax.semilogy(epochs, loss_m, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("measurement misfit")
    ax.legend()
    fig.tight_layout()
    save_plot(fig, "loss_vs_epoch.png")

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (epochs, _, ap) in curves.items():
        ax.plot(epochs, ap, label=label)
    ax.axhline(AP_REFERENCE_LINE, color="red", linestyle=":", label=f"{AP_REFERENCE_LINE}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("average precision")
    ax.legend()
    fig.tight_layout()
    save_plot(fig, "ap_vs_epoch.png")

    for run_dir, _, _ in runs:
        fields = sorted(run_dir.glob("gamma_epoch_*.wfi"))
        if not fields:
            continue
        cols = min(len(fields), 6)
        rows_n = (len(fields) + cols - 1) // cols
        fig, axes = plt.subplots(rows_n, cols, figsize=(2.2 * cols, 1.6 * rows_n), squeeze=False)
        for ax in axes.ravel():
            ax.axis("off")
        for ax, f in zip(axes.ravel(), fields):
            nx, ny, vals = read_field_raw(f)
            ax.imshow(vals.reshape(ny, nx), origin="lower", vmin=0, vmax=1, cmap="gray")
            ax.set_title(f.stem.replace("gamma_epoch_", "epoch "), fontsize=7)
        fig.tight_layout()
        save_plot(fig, f"mosaic_{run_dir.name}.png")

    print(f"report written to {out} ({len(runs)} runs, {len(groups)} groups)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="voidfwi",
        description="Void detection by full-waveform inversion with a neural material ansatz",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_help):
        sp.add_argument("--config", type=Path, default=None, help="TOML config (defaults apply)")
        sp.add_argument("--seed", type=int, default=None, help=seed_help)
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        sp.add_argument("--force", action="store_true", help="replace differing outputs")

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(g, "override dataset.seed")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="supervised pretraining on a dataset subset")
    common(t, "override pretrain.seed")
    t.add_argument("--dataset", type=Path, required=True)
    t.add_argument("--n-d", type=int, required=True, help="pretraining subset size (0 = init only)")
    t.add_argument("--allow-config-mismatch", action="store_true")
    t.add_argument("--timings", action="store_true", help="record wall times in the CSV")
    t.set_defaults(func=cmd_pretrain)

    i = sub.add_parser("invert", help="invert one sample's traces")
    common(i, "override fwi.seed (initialization)")
    i.add_argument("--dataset", type=Path, required=True)
    i.add_argument("--sample", type=int, required=True)
    i.add_argument("--checkpoint", type=Path, default=None, help="pretrained starting point")
    i.add_argument("--max-epochs", type=int, default=None)
    i.add_argument("--freeze", type=int, default=None, help="layers to freeze (prefix)")
    i.add_argument("--lr", type=float, default=None)
    i.add_argument("--label", type=str, default=None, help="report grouping label")
    i.add_argument("--no-early-stop", action="store_true")
    i.add_argument("--save-fields", type=int, default=0, metavar="N",
                   help="write the field every N epochs")
    i.add_argument("--allow-config-mismatch", action="store_true")
    i.add_argument("--timings", action="store_true")
    i.set_defaults(func=cmd_invert)

    r = sub.add_parser("report", help="aggregate run histories and plot")
    r.add_argument("runs", nargs="+", help="inversion output directories")
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, CheckpointMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OverwriteError, TrainingAborted, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())

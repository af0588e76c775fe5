"""Command-line entry point: ``mmrobust <subcommand> [--config F] [--seed N] [--out D] [--data D] [--a.b value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, config_hash, dump_config, load_config, parse_value, train_config
from .data import PRESETS, FMNIST_FILES, IdxFormatError, load_fmnist, split, synth_ecg, synth_spike, write_synth_fmnist
from .diffcore import RngStream
from .gradcheck import run_suite
from .models import SRNN, build_model
from .report import atomic_write, write_json, write_line_svg, write_table
from .training import TrainingDiverged, train
from .verify import clean_accuracy64, verified_accuracy

log = logging.getLogger("mmrobust")

SUBCOMMANDS = ("train", "attack-eval", "mismatch-eval", "landscape", "verify", "membrane-hist", "gradcheck")


class UsageError(ValueError):
    pass


# -- data and models ------------------------------------------------------


def load_datasets(cfg: dict, data_dir) -> dict:
    d = cfg["data"]
    src = d["source"]
    if src in ("fmnist", "synth-fmnist"):
        if data_dir is None:
            raise UsageError(f"data.source {src} needs --data DIR")
        data_dir = Path(data_dir)
        if src == "synth-fmnist" and not all((data_dir / f).exists() for f in FMNIST_FILES.values()):
            pr = PRESETS[d["preset"]]
            write_synth_fmnist(data_dir, seed=d["data_seed"], n_train=pr.n_train + pr.n_val, n_test=pr.n_test)
        return load_fmnist(data_dir, d["preset"])
    rng = RngStream(d["data_seed"]).fork(src)
    if src == "ecg":
        return split(synth_ecg(d["n_sequences"], d["length"], rng, gain=d["gain"]))
    return split(synth_spike(d["n_sequences"], d["length"], rng, n_channels=d["n_channels"], gain=d["gain"]))


def make_model(cfg: dict, ds: dict):
    """Model from the config, with input and class counts filled in from the data."""
    desc = dict(cfg["model"])
    x = ds["train"].x
    kind = desc["kind"]
    desc.setdefault("n_classes", ds["train"].n_classes)
    if kind == "mlp":
        desc.setdefault("n_in", int(np.prod(x.shape[1:])))
    elif kind == "cnn":
        desc.setdefault("image", list(x.shape[1:3]))
    elif kind == "srnn":
        desc.setdefault("n_in", int(x.shape[2]))
    return build_model(desc)


def _checkpoints(paths):
    if not paths:
        raise UsageError("this subcommand needs --checkpoint PATH")
    cks = [load_checkpoint(p) for p in paths]
    arch = cks[0].architecture
    if any(c.architecture != arch for c in cks):
        raise UsageError("all checkpoints must share one architecture")
    return build_model(arch), cks


def _test_set(ds, n=None):
    te = ds["test"]
    return te if n is None or n >= len(te) else te.subset(np.arange(n))


# -- subcommands ----------------------------------------------------------


def cmd_train(cfg, args, out: Path):
    ds = load_datasets(cfg, args.data)
    model = make_model(cfg, ds)
    tcfg = train_config(cfg)
    best, history = train(model, ds, tcfg)
    meta = {"config_hash": config_hash(cfg), "seed": cfg["seed"], "method": tcfg.method, "best_epoch": history["best_epoch"]}
    ck = save_checkpoint(out / "model.mmrt", Checkpoint(model.describe(), best, meta))
    write_table(out / "history.csv", "history", [(r["epoch"], r["train_loss"], r["val_acc"]) for r in history["epochs"]])
    write_json(out / "metrics.json", {"history": history, "checkpoint": str(ck.name), "config_hash": meta["config_hash"]})
    if cfg["output"]["svg"]:
        ep = [r["epoch"] for r in history["epochs"]]
        write_line_svg(out / "history.svg", ep, {"val_acc": [r["val_acc"] for r in history["epochs"]]}, "epoch", "accuracy")
    return f"train: {tcfg.method} best val acc {history['best_val_acc']:.4f} at epoch {history['best_epoch']} -> {ck}"


def cmd_attack_eval(cfg, args, out: Path):
    ds = load_datasets(cfg, args.data)
    model, cks = _checkpoints(args.checkpoint)
    theta, e = cks[0].params, cfg["eval"]
    rng = RngStream(cfg["seed"]).fork("attack-eval")
    te = ds["test"]
    z = e["zetas"]
    kw = dict(n_steps=e["n_steps"], eps_init=e["eps_init"], batch_size=e["batch_size"])
    task = analysis.task_pga_eval(model, theta, z, te, rng=rng.fork("task"), **kw)
    kl = analysis.kl_pga_eval(model, theta, z, te, rng=rng.fork("kl"), **kw)
    rand = analysis.random_perturbation_eval(model, theta, z, te, e["n_samples"], rng.fork("random"))
    rows = list(zip(z, task, kl, rand))
    write_table(out / "attack.csv", "attack", rows)
    write_json(out / "attack.json", {"zetas": z, "task_pga": task, "kl_pga": kl, "random": rand})
    if cfg["output"]["svg"]:
        write_line_svg(out / "attack.svg", z, {"task PGA": task, "KL PGA": kl, "random": rand}, "zeta", "test accuracy")
    return "attack-eval: " + ", ".join(f"zeta {a:g}: pga {b:.3f} random {d:.3f}" for a, b, _, d in rows)


def cmd_mismatch_eval(cfg, args, out: Path):
    ds = load_datasets(cfg, args.data)
    model, cks = _checkpoints(args.checkpoint)
    e = cfg["eval"]
    table = analysis.mismatch_eval(
        model, [c.params for c in cks], e["zetas"], e["n_samples"], ds["test"], RngStream(cfg["seed"]).fork("mismatch-eval")
    )
    write_table(out / "mismatch.csv", "mismatch", [[r[k] for k in ("zeta", "mean", "std", "min")] for r in table.rows])
    write_json(out / "mismatch.json", {"rows": table.rows})
    if cfg["output"]["svg"]:
        write_line_svg(out / "mismatch.svg", e["zetas"], {"mean": [r["mean"] for r in table.rows]}, "zeta", "test accuracy")
    return "mismatch-eval: " + ", ".join(f"zeta {r['zeta']:g}: {r['mean']:.3f}±{r['std']:.3f}" for r in table.rows)


def cmd_landscape(cfg, args, out: Path):
    ds = load_datasets(cfg, args.data)
    model, cks = _checkpoints(args.checkpoint)
    e = cfg["eval"]
    grid = analysis.landscape_sweep(
        model, cks[0].params, ds["test"], e["landscape_zeta"], e["n_trials"], e["n_alphas"], RngStream(cfg["seed"]).fork("landscape")
    )
    mean = grid.mean_curve
    rows = [(float(a), float(mean[j]), t, float(grid.losses[t, j])) for j, a in enumerate(grid.alphas) for t in range(len(grid.losses))]
    write_table(out / "landscape.csv", "landscape", rows)
    write_json(out / "landscape.json", {"flatness": grid.flatness(), "nominal_loss": grid.nominal_loss, "zeta": grid.zeta})
    if cfg["output"]["svg"]:
        write_line_svg(out / "landscape.svg", grid.alphas, {"mean test loss": mean}, "alpha", "cross-entropy")
    return f"landscape: zeta {grid.zeta:g} nominal loss {grid.nominal_loss:.4f} flatness {grid.flatness():.4f}"


def cmd_verify(cfg, args, out: Path):
    ds = load_datasets(cfg, args.data)
    model, cks = _checkpoints(args.checkpoint)
    te = _test_set(ds)
    v = cfg["verify"]
    accs = [verified_accuracy(model, cks[0].params, z, te, batch_size=v["batch_size"]) for z in v["zetas"]]
    write_table(out / "verify.csv", "verify", list(zip(v["zetas"], accs)))
    clean = clean_accuracy64(model, cks[0].params, te)
    write_json(out / "verify.json", {"zetas": v["zetas"], "verified_accuracy": accs, "clean_accuracy": clean})
    if cfg["output"]["svg"]:
        write_line_svg(out / "verify.svg", v["zetas"], {"verified": accs}, "zeta", "verified accuracy")
    return "verify: " + ", ".join(f"zeta {z:g}: {a:.3f}" for z, a in zip(v["zetas"], accs))


def cmd_membrane_hist(cfg, args, out: Path):
    ds = load_datasets(cfg, args.data)
    model, cks = _checkpoints(args.checkpoint)
    if not isinstance(model, SRNN):
        raise UsageError("membrane-hist needs an srnn checkpoint")
    e = cfg["eval"]
    te = _test_set(ds, e["n_examples"])
    h = analysis.membrane_histogram(model, cks[0].params, te.x, n_bins=e["n_bins"])
    edges = h["edges"]
    write_table(out / "membrane.csv", "membrane", [(edges[i], edges[i + 1], int(c)) for i, c in enumerate(h["counts"])])
    write_json(out / "membrane.json", {"near_threshold_fraction": h["near_threshold_fraction"], "total": h["total"]})
    if cfg["output"]["svg"]:
        centers = 0.5 * (edges[1:] + edges[:-1])
        write_line_svg(out / "membrane.svg", centers, {"count": h["counts"]}, "V / B", "count")
    return f"membrane-hist: near-threshold fraction {h['near_threshold_fraction']:.4f} over {h['total']} values"


def cmd_gradcheck(cfg, args, out: Path):
    g = cfg["gradcheck"]
    errors = run_suite(seed=cfg["seed"], step=g["step"])
    worst = max(errors.values())
    ok = worst <= g["tolerance"]
    write_json(out / "gradcheck.json", {"worst_relative_error": worst, "tolerance": g["tolerance"], "passed": ok, "checks": errors})
    line = f"gradcheck: worst relative error {worst:.3e} over {len(errors)} checks ({'pass' if ok else 'FAIL'})"
    if not ok:
        raise GradcheckFailed(line)
    return line


class GradcheckFailed(RuntimeError):
    pass


COMMANDS = {
    "train": cmd_train,
    "attack-eval": cmd_attack_eval,
    "mismatch-eval": cmd_mismatch_eval,
    "landscape": cmd_landscape,
    "verify": cmd_verify,
    "membrane-hist": cmd_membrane_hist,
    "gradcheck": cmd_gradcheck,
}


# -- argument handling ----------------------------------------------------


def parse_overrides(extra: list[str]) -> list[tuple[str, object]]:
    """Turn ``--a.b v`` / ``--a.b=v`` pairs into (path, value) overrides."""
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise UsageError(f"unrecognised argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"override {tok} needs a value")
            val = extra[i + 1]
            i += 2
        out.append((key, parse_value(val)))
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmrobust", description="Mismatch-robust training, attacks and verification.")
    p.add_argument("subcommand", help="one of: " + ", ".join(SUBCOMMANDS))
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--data", help="data directory (IDX files)")
    p.add_argument("--checkpoint", action="append", help="MMRT checkpoint; repeat for several seeds")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.subcommand not in COMMANDS:
            raise UsageError(f"unknown subcommand {args.subcommand!r}; expected one of {', '.join(SUBCOMMANDS)}")
        overrides = parse_overrides(extra)
        if args.seed is not None:
            overrides.append(("seed", args.seed))
        cfg = load_config(args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "config.json", dump_config(cfg))
        print(COMMANDS[args.subcommand](cfg, args, out))
        return 0
    except GradcheckFailed as e:
        print(e, file=sys.stderr)
        return 1
    except (UsageError, ConfigError, CheckpointError, IdxFormatError, FileNotFoundError, TrainingDiverged, ValueError) as e:
        print(f"mmrobust: error: {e}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()

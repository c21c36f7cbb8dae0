"""Command line entry point: ``comatch <command> [options]``.

Every command writes under ``--out`` (or ``$COMATCH_OUT``) with a fixed layout
``checkpoints/``, ``reports/``, ``plots/`` and ``data/``, and drops the resolved
hyper-parameters next to what it produced.

Exit status: 0 success, 1 a requested threshold was missed or a check failed,
2 bad configuration, 3 missing data, 4 numeric failure during training.
"""

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import experiments
from .data import ManifestError, SyntheticConfig, gen_synthetic_dataset, load_pairs, save_pairs
from .evaluation import DEFAULT_ALPHAS, binarize, coseg_report, pck_report
from .geometry import warp
from .gradcheck import gradient_suite
from .objective import (
    CSV_COLUMNS,
    PRESETS,
    HyperParams,
    NumericError,
    history_csv,
    init_state,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("comatch")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
LAYOUT = ("checkpoints", "reports", "plots", "data")
CONFIG_NAME = "resolved_config.ini"


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing


def _out_dir(args):
    out = Path(os.environ.get("COMATCH_OUT") or args.out)
    for sub in LAYOUT:
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _parse_sets(pairs):
    values = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = value.strip()
    return values


def resolve_hyperparams(args):
    """Preset, then ``--config`` file, then ``--set`` overrides, then ``--seed``."""
    try:
        if args.preset not in PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
        hp = HyperParams(**PRESETS[args.preset])
        if args.config:
            path = Path(args.config)
            if not path.is_file():
                raise ConfigError(f"config file {path} not found")
            hp = HyperParams.load(path, base=hp)
        hp = HyperParams.from_mapping(_parse_sets(args.set), base=hp)
        if args.seed is not None:
            hp = hp.replace(seed=args.seed)
    except ConfigError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    except Exception as exc:  # configparser raises its own hierarchy
        raise ConfigError(f"cannot parse configuration: {exc}") from exc
    return hp


def _snapshot(hp, *dirs):
    text = hp.to_config()
    for d in dirs:
        (Path(d) / CONFIG_NAME).write_text(text, encoding="utf-8")


def _load_data(path, size):
    """Pairs from a manifest file or a directory holding ``manifest.csv``."""
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.csv"
    if not p.is_file():
        raise DataError(f"no manifest at {p}")
    try:
        return load_pairs(p, size=size)
    except (FileNotFoundError, ManifestError) as exc:
        raise DataError(str(exc)) from exc


def _dataset(args, hp, split):
    if getattr(args, "data", None):
        return _load_data(args.data, hp.image_size)
    seed = experiments.TRAIN_SEED if split == "train" else experiments.TEST_SEED
    n = args.n_train if split == "train" else args.n_test
    log.info("no --data given; using %d synthetic %s pairs (seed %d)", n, split, seed)
    return gen_synthetic_dataset(n, SyntheticConfig(size=hp.image_size), seed)


def _write(path, text):
    Path(path).write_text(text, encoding="utf-8")
    log.info("wrote %s", path)


def _checkpoint_state(args):
    path = Path(args.checkpoint)
    if not path.is_file():
        raise DataError(f"checkpoint {path} not found")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    hp = resolve_hyperparams(args)
    out = _out_dir(args)
    cfg = SyntheticConfig(size=hp.image_size)
    seed = hp.seed if args.seed is not None else experiments.TRAIN_SEED
    splits = {"train": (args.n_train, seed), "test": (args.n_test, seed + 1)}
    for name, (n, s) in splits.items():
        d = out / "data" / name
        save_pairs(gen_synthetic_dataset(n, cfg, s), d, cfg, s)
        log.info("wrote %d %s pairs to %s", n, name, d)
    _snapshot(hp, out / "data")
    return EXIT_OK


def cmd_train(args):
    hp = resolve_hyperparams(args)
    out = _out_dir(args)
    samples = _dataset(args, hp, "train")
    ckpt_dir = out / "checkpoints"
    _snapshot(hp, out, ckpt_dir, out / "reports")

    def every(state):
        if hp.checkpoint_every and state.step % hp.checkpoint_every == 0:
            save_checkpoint(state, ckpt_dir / f"step_{state.step:06d}.pt")

    state = init_state(hp)
    try:
        train(samples, hp, state=state, callback=every)
    except NumericError as exc:
        _write(out / "reports" / "loss.csv", history_csv(state.history))
        raise exc
    save_checkpoint(state, ckpt_dir / "final.pt")
    _write(out / "reports" / "loss.csv", history_csv(state.history))
    log.info("trained %d steps on %d pairs", state.step, len(samples))
    return EXIT_OK


def _eval_inputs(args):
    state = _checkpoint_state(args)
    out = _out_dir(args)
    samples = _dataset(args, state.hp, "test")
    _snapshot(state.hp, out / "reports")
    return state, out, samples


def cmd_eval_match(args):
    state, out, samples = _eval_inputs(args)
    transforms, _, _ = experiments.predict(state.model, samples)
    try:
        report = pck_report(transforms, samples, args.alphas)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    _write(out / "reports" / "pck.csv", report.to_csv())
    print(report.table(), end="")
    if args.min_pck is not None and report.values.get(0.1, 0.0) < args.min_pck:
        log.error("PCK@0.1 %.4f is below the required %.4f", report.values.get(0.1, 0.0), args.min_pck)
        return EXIT_FAIL
    return EXIT_OK


def cmd_eval_coseg(args):
    state, out, samples = _eval_inputs(args)
    _, masks_a, masks_b = experiments.predict(state.model, samples)
    preds, gts = [], []
    for s, ma, mb in zip(samples, masks_a, masks_b):
        for soft, gt in ((ma, s.gt_mask_a), (mb, s.gt_mask_b)):
            if gt is not None:
                preds.append(binarize(soft, args.method, args.tau))
                gts.append(gt)
    if not preds:
        raise DataError("no ground-truth masks to evaluate against")
    report = coseg_report(preds, gts)
    _write(out / "reports" / "coseg.csv", report.to_csv())
    print(report.table(), end="")
    if args.min_jaccard is not None and report.jaccard < args.min_jaccard:
        log.error("Jaccard %.4f is below the required %.4f", report.jaccard, args.min_jaccard)
        return EXIT_FAIL
    return EXIT_OK


def cmd_gradcheck(args):
    hp = resolve_hyperparams(args)
    out = _out_dir(args)
    results = gradient_suite(seed=hp.seed)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["name", "n_params", "rel_error", "tolerance", "passed"])
    for r in results:
        writer.writerow([r.name, r.n_params, f"{r.rel_error:.3e}", f"{r.tolerance:g}", r.passed])
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<14} rel_err={r.rel_error:.2e}")
    _write(out / "reports" / "gradcheck.csv", buf.getvalue())
    _snapshot(hp, out / "reports")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_ablate(args):
    hp = resolve_hyperparams(args)
    out = _out_dir(args)
    train_set = _dataset(args, hp, "train")
    if args.test_data:
        test_set = _load_data(args.test_data, hp.image_size)
    else:
        test_set = gen_synthetic_dataset(args.n_test, SyntheticConfig(size=hp.image_size), experiments.TEST_SEED)
    _snapshot(hp, out / "reports")
    rows = []

    def report(res):
        rows.append(res)
        log.info("%s: %s", res.name, res.scores.row())

    results = experiments.ablate(hp, train_set, test_set, callback=report)
    buf = io.StringIO()
    cols = ["run"] + list(results[0].scores.row()) + ["seconds"]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for r in results:
        writer.writerow([r.name] + [f"{v:.6f}" for v in r.scores.row().values()] + [f"{r.seconds:.1f}"])
    _write(out / "reports" / "ablation.csv", buf.getvalue())
    print(buf.getvalue(), end="")
    return EXIT_OK


def cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = _out_dir(args)
    loss_csv = Path(args.loss_csv) if args.loss_csv else out / "reports" / "loss.csv"
    made = 0
    if loss_csv.is_file():
        with loss_csv.open(encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        steps = [int(r["step"]) for r in rows]
        fig, ax = plt.subplots(figsize=(7, 4))
        for name in CSV_COLUMNS[1:]:
            ax.plot(steps, [float(r[name]) for r in rows], label=name, lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("symlog", linthresh=1e-2)
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / "plots" / "loss.png", dpi=120)
        plt.close(fig)
        made += 1
    if args.checkpoint:
        state = _checkpoint_state(args)
        samples = _dataset(args, state.hp, "test")[: args.n_panels]
        transforms, masks_a, masks_b = experiments.predict(state.model, samples)
        fig, axes = plt.subplots(len(samples), 5, figsize=(10, 2 * len(samples)), squeeze=False)
        titles = ("image A", "mask A", "image B", "mask B", "A warped to B")
        for row, s, T, ma, mb in zip(axes, samples, transforms, masks_a, masks_b):
            img_a = torch.from_numpy(s.image_a).permute(2, 0, 1)[None].double()
            warped = warp(img_a, T.to(torch.float64)).squeeze(0).permute(1, 2, 0).numpy()
            for ax, im, title in zip(row, (s.image_a, ma, s.image_b, mb, np.clip(warped, 0, 1)), titles):
                ax.imshow(im, cmap="gray", vmin=0, vmax=1)
                ax.set_title(title, fontsize=8)
                ax.axis("off")
        fig.tight_layout()
        fig.savefig(out / "plots" / "panels.png", dpi=120)
        plt.close(fig)
        made += 1
    if not made:
        raise DataError(f"nothing to plot: no loss CSV at {loss_csv} and no --checkpoint")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--config", help="flat key = value file with hyper-parameters")
    p.add_argument("--preset", default="synthetic", help=f"base settings, one of {sorted(PRESETS)}")
    p.add_argument("--seed", type=int, help="override the seed")
    p.add_argument("--out", default="comatch_out", help="output root (COMATCH_OUT takes precedence)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one hyper-parameter")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_opts(p, checkpoint=False):
    p.add_argument("--data", help="manifest.csv or a directory containing one (default: synthetic pairs)")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="checkpoint written by 'train'")


def build_parser():
    parser = argparse.ArgumentParser(prog="comatch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic train/test pairs under data/")
    _common(p)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and write checkpoints/ and reports/loss.csv")
    _common(p)
    _data_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-match", help="PCK of a checkpoint, written to reports/pck.csv")
    _common(p)
    _data_opts(p, checkpoint=True)
    p.add_argument("--alphas", type=float, nargs="+", default=list(DEFAULT_ALPHAS))
    p.add_argument("--min-pck", type=float, help="exit 1 if PCK@0.1 falls below this")
    p.set_defaults(func=cmd_eval_match)

    p = sub.add_parser("eval-coseg", help="precision/Jaccard of a checkpoint, written to reports/coseg.csv")
    _common(p)
    _data_opts(p, checkpoint=True)
    p.add_argument("--method", choices=("otsu", "fixed"), default="otsu")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--min-jaccard", type=float, help="exit 1 if Jaccard falls below this")
    p.set_defaults(func=cmd_eval_coseg)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    _common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="full run plus one run per disabled loss term")
    _common(p)
    _data_opts(p)
    p.add_argument("--test-data", help="held-out manifest (default: synthetic pairs)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="loss curves and qualitative panels under plots/")
    _common(p)
    p.add_argument("--loss-csv", help="loss CSV (default: reports/loss.csv under --out)")
    p.add_argument("--checkpoint", help="draw warp/mask panels from this checkpoint")
    p.add_argument("--data", help="pairs for the panels (default: synthetic)")
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--n-panels", type=int, default=4)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("missing data: %s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

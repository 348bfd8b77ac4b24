"""Command-line entry point: ``scalematch <command> [options]``.

Every command takes ``--config FILE`` (flat ``key = value`` lines) and
``--set key=value`` overrides; explicit flags win over both.  Commands that
write into a directory also drop a ``run.json`` reproducibility record there.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("scalematch")


class CommandError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration plumbing


def _settings(args, defaults: dict) -> dict:
    from .training import parse_value, read_flat_config

    out = dict(defaults)
    if args.config:
        out.update(read_flat_config(args.config))
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CommandError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = parse_value(value.strip())
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
    unknown = set(out) - set(defaults)
    if unknown:
        raise CommandError(f"unknown settings: {', '.join(sorted(unknown))}")
    return out


def _require_seed(cfg: dict) -> int:
    if cfg.get("seed") is None:
        raise CommandError("a seed is required (--seed or 'seed = ...' in the config)")
    return int(cfg["seed"])


def _git_revision() -> str | None:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None if out.returncode == 0 else None


def _write_run_record(out_dir: Path, command: str, cfg: dict) -> None:
    record = {
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "version": __version__,
        "git_revision": _git_revision(),
    }
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _existing(path, what: str) -> Path:
    if path is None:
        raise CommandError(f"missing {what}")
    path = Path(path)
    if not path.exists():
        raise CommandError(f"{what} {path} does not exist")
    return path


def _write_table(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _read_table(path: Path, required: list[str]) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        columns = reader.fieldnames or []
        for col in required:
            if col not in columns:
                raise CommandError(f"{path}: missing column '{col}'")
        return list(reader)


def _fmt(x) -> str:
    return repr(float(x))


def _read_pairs(path: Path):
    """Pairs from a manifest (.jsonl) or a table with path1,path2[,gt_ratio]."""
    from .datagen.manifest import PairRecord, read_manifest

    if path.suffix == ".jsonl":
        records = read_manifest(path)
    else:
        rows = _read_table(path, ["path1", "path2"])
        records = [
            PairRecord(r["path1"], r["path2"], float(r.get("gt_ratio") or 1.0), "annotated")
            for r in rows
        ]
        if rows and not rows[0].get("gt_ratio"):
            for rec in records:
                rec.gt_ratio = float("nan")
    return records, path.parent


# --------------------------------------------------------------------------
# commands


GENERATE_DEFAULTS = {
    "content": None,
    "backgrounds": None,
    "synthetic_content": None,
    "synthetic_backgrounds": None,
    "n": 100,
    "m_min": 0.0,
    "m_max": 7.0,
    "resolution": 160,
    "seed": None,
    "out": None,
}


def cmd_generate(args) -> int:
    from .datagen import generate_dataset, load_corpus, synthetic_corpus

    cfg = _settings(args, GENERATE_DEFAULTS)
    seed = _require_seed(cfg)
    if cfg["out"] is None:
        raise CommandError("missing --out directory")

    def corpus(dir_key, synth_key, offset, style):
        if cfg[dir_key]:
            return load_corpus(_existing(cfg[dir_key], f"{dir_key} corpus"))
        if cfg[synth_key]:
            return synthetic_corpus(int(cfg[synth_key]), 256, seed=seed * 2 + offset, style=style)
        raise CommandError(f"give --{dir_key} DIR or --{synth_key.replace('_', '-')} N")

    try:
        content = corpus("content", "synthetic_content", 0, "content")
        backgrounds = corpus("backgrounds", "synthetic_backgrounds", 1, "background")
    except FileNotFoundError as exc:
        raise CommandError(str(exc)) from exc
    out = Path(cfg["out"])
    records = generate_dataset(
        content, backgrounds, int(cfg["n"]), (float(cfg["m_min"]), float(cfg["m_max"])),
        seed, out, int(cfg["resolution"]),
    )
    _write_run_record(out, "generate", cfg)
    down = sum(r.provenance == "synthetic-down" for r in records)
    ratios = [r.gt_ratio for r in records]
    print(f"wrote {len(records)} pairs to {out / 'manifest.jsonl'}: "
          f"{down} synthetic-down, {len(records) - down} synthetic-up")
    if ratios:
        print(f"gt_ratio range [{min(ratios):.6g}, {max(ratios):.6g}]")
    return 0


def _train_keys():
    from dataclasses import fields

    from .training import TrainConfig

    return {f.name: None for f in fields(TrainConfig)}


def cmd_train(args) -> int:
    import torch

    from .checkpoint import load_checkpoint, save_checkpoint
    from .network import EncoderConfig, ScaleNet
    from .training import (
        NonFiniteLossError, TrainState, make_optimizer, samples_from_manifest,
        train, train_config_from, write_history,
    )

    defaults = {"manifest": None, "out": None, "resume": None, **_train_keys()}
    cfg = _settings(args, defaults)
    _require_seed(cfg)
    manifest = _existing(cfg["manifest"], "manifest")
    if cfg["out"] is None:
        raise CommandError("missing --out directory")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = train_config_from({k: v for k, v in cfg.items() if k in _train_keys() and v is not None})
    samples = samples_from_manifest(manifest)

    if cfg["resume"]:
        model, meta, optim_state = load_checkpoint(_existing(cfg["resume"], "checkpoint"))
        optimizer = make_optimizer(model, train_cfg)
        if optim_state is not None:
            optimizer.load_state_dict(optim_state)
        history = _read_history(Path(cfg["resume"]).with_name("history.csv"))
        state = TrainState(model, optimizer, meta.get("epochs_completed", 0), history)
    else:
        torch.manual_seed(train_cfg.seed)
        encoder = EncoderConfig(train_cfg.encoder_id, 128 if train_cfg.encoder_id == "small-random" else 256)
        model = ScaleNet(encoder, train_cfg.input_resolution, train_cfg.use_covisibility)
        state = TrainState(model, make_optimizer(model, train_cfg))

    def checkpoint(st):
        save_checkpoint(out / "checkpoint.npz", st.model, st.optimizer, st.epochs_completed,
                        {k: v for k, v in cfg.items() if k in _train_keys()})
        write_history(st.history, out / "history.csv")

    _write_run_record(out, "train", cfg)
    try:
        state = train(state.model, samples, train_cfg, state, on_epoch_end=checkpoint)
    except NonFiniteLossError as exc:
        raise CommandError(str(exc)) from exc
    checkpoint(state)
    last = state.history[-1].total if state.history else float("nan")
    print(f"trained {state.epochs_completed} epochs, {len(state.history)} steps; "
          f"last batch loss {last:.6g}; checkpoint {out / 'checkpoint.npz'}")
    return 0


def _read_history(path: Path):
    from .training import HistoryRow

    if not path.exists():
        return []
    rows = _read_table(path, ["epoch", "step", "ld", "lc", "total"])
    return [HistoryRow(int(r["epoch"]), int(r["step"]), float(r["ld"]), float(r["lc"]), float(r["total"]))
            for r in rows]


def cmd_estimate(args) -> int:
    from .checkpoint import load_checkpoint
    from .imaging import load_image
    from .network import estimate_scale_ratio

    cfg = _settings(args, {"checkpoint": None, "pairs": None, "out": None, "both_orders": False})
    ckpt = _existing(cfg["checkpoint"], "checkpoint")
    records, root = _read_pairs(_existing(cfg["pairs"], "pair list"))
    model, _, _ = load_checkpoint(ckpt)
    header = ["pair_id", "gt_ratio", "s_hat", "log2_s_hat"]
    if cfg["both_orders"]:
        header += ["s_hat_swapped", "log2_s_hat_swapped", "product"]
    rows = []
    for idx, rec in enumerate(records):
        p1, p2 = rec.resolve(root)
        i1, i2 = load_image(p1), load_image(p2)
        s = estimate_scale_ratio(i1, i2, model)
        row = [idx, _fmt(rec.gt_ratio), _fmt(s.value), _fmt(s.log2_value)]
        if cfg["both_orders"]:
            sw = estimate_scale_ratio(i2, i1, model)
            row += [_fmt(sw.value), _fmt(sw.log2_value), _fmt(s.value * sw.value)]
        rows.append(row)
    out = Path(cfg["out"]) if cfg["out"] else None
    if out is None:
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    else:
        _write_table(out, header, rows)
        print(f"wrote {len(rows)} estimates to {out}")
    return 0


def cmd_match(args) -> int:
    from .checkpoint import load_checkpoint
    from .imaging import load_image
    from .sdaim import (
        FixedEstimator, NetworkEstimator, SiftAdapter, UnitEstimator,
        inlier_count, match_baseline, match_with_sdaim, write_match_dump,
    )

    defaults = {
        "pairs": None, "out": None, "estimator": "unit", "checkpoint": None,
        "max_keypoints": 2000, "ratio_test": 0.8, "px_threshold": 3.0, "paper_direction": False,
    }
    cfg = _settings(args, defaults)
    records, root = _read_pairs(_existing(cfg["pairs"], "pair list"))
    if cfg["out"] is None:
        raise CommandError("missing --out directory")
    out = Path(cfg["out"])
    (out / "dumps").mkdir(parents=True, exist_ok=True)
    adapter = SiftAdapter(int(cfg["max_keypoints"]), float(cfg["ratio_test"]))
    model = None
    if cfg["estimator"] == "checkpoint":
        model, _, _ = load_checkpoint(_existing(cfg["checkpoint"], "checkpoint"))
    elif cfg["estimator"] not in ("gt", "unit"):
        raise CommandError(f"unknown estimator {cfg['estimator']!r} (checkpoint, gt, unit)")

    rows = []
    for idx, rec in enumerate(records):
        p1, p2 = rec.resolve(root)
        i1, i2 = load_image(p1), load_image(p2)
        if cfg["estimator"] == "gt":
            if not rec.gt_ratio > 0:
                raise CommandError(f"pair {idx} has no ground-truth ratio")
            estimator = FixedEstimator(rec.gt_ratio)
        elif model is not None:
            estimator = NetworkEstimator(model)
        else:
            estimator = UnitEstimator()
        sdaim = match_with_sdaim(i1, i2, estimator, adapter, bool(cfg["paper_direction"]))
        base = match_baseline(i1, i2, adapter)
        write_match_dump(sdaim, out / "dumps" / f"{idx:06d}_sdaim.csv")
        write_match_dump(base, out / "dumps" / f"{idx:06d}_baseline.csv")
        if rec.warp is not None:
            inl = [inlier_count(sdaim, rec, cfg["px_threshold"]), inlier_count(base, rec, cfg["px_threshold"])]
        else:
            inl = ["", ""]
        r1, r2 = sdaim.resize_factors
        rows.append([idx, _fmt(rec.gt_ratio), _fmt(r1 / r2), _fmt(r1), _fmt(r2),
                     len(sdaim), len(base), *inl, len(sdaim.keypoints1), len(base.keypoints1)])
    header = ["pair_id", "gt_ratio", "s_hat", "r1", "r2", "sdaim_matches", "baseline_matches",
              "sdaim_inliers", "baseline_inliers", "sdaim_keypoints1", "baseline_keypoints1"]
    _write_table(out / "summary.csv", header, rows)
    _write_run_record(out, "match", cfg)
    if rows and rows[0][7] != "":
        s_in = np.mean([r[7] for r in rows])
        b_in = np.mean([r[8] for r in rows])
        print(f"{len(rows)} pairs: mean inliers sdaim {s_in:.2f}, baseline {b_in:.2f}")
    else:
        print(f"{len(rows)} pairs matched; summary in {out / 'summary.csv'}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import accuracy_vs_scale_curve, average_accuracy_curve, avg_l1_discrepancy, error_vs_scale_curve, maa

    cfg = _settings(args, {"ratios": None, "poses": None, "matches": None, "pairs": None, "out": None,
                           "max_threshold": 10.0, "fpe_threshold": 20.0, "px_threshold": 3.0})
    if cfg["out"] is None:
        raise CommandError("missing --out directory")
    if not cfg["ratios"] and not cfg["poses"] and not cfg["matches"]:
        raise CommandError("give --ratios, --poses and/or --matches")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    metrics = []

    def floats(rows, col, path):
        try:
            return [float(r[col]) for r in rows]
        except ValueError as exc:
            raise CommandError(f"{path}: column '{col}' holds a non-numeric value") from exc

    if cfg["ratios"]:
        path = _existing(cfg["ratios"], "ratio table")
        rows = _read_table(path, ["gt_ratio", "s_hat"])
        gt, pred = floats(rows, "gt_ratio", path), floats(rows, "s_hat", path)
        metrics.append(["E", _fmt(avg_l1_discrepancy(gt, pred)), len(gt)])
        curve = error_vs_scale_curve(gt, pred)
        _write_table(out / "ratio_error_vs_scale.csv", ["log2_scale_bin", "avg_l1_discrepancy", "count"],
                     [[x, _fmt(y), c] for x, (y, c) in curve.items()])
    if cfg["poses"]:
        path = _existing(cfg["poses"], "pose table")
        rows = _read_table(path, ["fpe", "gt_ratio"])
        fpe, gt = floats(rows, "fpe", path), floats(rows, "gt_ratio", path)
        max_t = float(cfg["max_threshold"])
        metrics.append([f"mAA({max_t:g})", _fmt(maa(fpe, max_t)), len(fpe)])
        taus, acc = average_accuracy_curve(fpe, max_t)
        _write_table(out / "accuracy_curve.csv", ["threshold_deg", "accuracy"],
                     [[_fmt(t), _fmt(a)] for t, a in zip(taus, acc)])
        curve = accuracy_vs_scale_curve(fpe, gt, float(cfg["fpe_threshold"]))
        _write_table(out / "accuracy_vs_scale.csv", ["log2_scale_bin", "accuracy", "count"],
                     [[x, _fmt(y), c] for x, (y, c) in curve.items()])
    if cfg["matches"]:
        metrics += _pck_rows(_existing(cfg["matches"], "match directory"),
                             _existing(cfg["pairs"], "pair manifest"), float(cfg["px_threshold"]))
    _write_table(out / "metrics.csv", ["metric", "value", "count"], metrics)
    _write_run_record(out, "evaluate", cfg)
    for name, value, count in metrics:
        print(f"{name} = {float(value):.6g} over {count}")
    return 0


def _pck_rows(match_dir: Path, pairs: Path, px_threshold: float) -> list:
    """Mean PCK of the sdaim and baseline dumps written by ``match``."""
    from .sdaim import correct_mask, read_match_dump

    records, _ = _read_pairs(pairs)
    rows = []
    for variant in ("sdaim", "baseline"):
        values = []
        for idx, rec in enumerate(records):
            path = match_dir / "dumps" / f"{idx:06d}_{variant}.csv"
            if rec.warp is None or not path.exists():
                continue
            header, table = read_match_dump(path)
            if "n_keypoints1" not in header:
                raise CommandError(f"{path}: header lacks n_keypoints1")
            n = int(header["n_keypoints1"])
            hits = correct_mask(table[:, :2], table[:, 2:4], rec.warp_points, px_threshold).sum()
            values.append(hits / n if n else 0.0)
        if values:
            rows.append([f"PCK({variant},{px_threshold:g}px)", _fmt(np.mean(values)), len(values)])
    if not rows:
        raise CommandError(f"no match dumps with ground-truth warps under {match_dir}")
    return rows


def render_curves(curves: list[Path], out, title: str = ""):
    """Line chart of two-column curve files; returns the axis limits used."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    xlabel = ylabel = None
    for path in curves:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or len(header) < 2:
                raise CommandError(f"{path}: expected at least two columns with a header row")
            try:
                data = np.array([[float(v) for v in row[:2]] for row in reader if row], dtype=np.float64)
            except ValueError as exc:
                raise CommandError(f"{path}: column '{header[0]}' or '{header[1]}' is not numeric") from exc
        xlabel, ylabel = header[0], header[1]
        if len(data):
            ax.plot(data[:, 0], data[:, 1], marker="o", label=path.stem)
    ax.set_xlabel(xlabel or "x")
    ax.set_ylabel(ylabel or "y")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    if len(curves) > 1:
        ax.legend()
    fig.tight_layout()
    limits = ax.get_xlim(), ax.get_ylim()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return limits


def cmd_plot(args) -> int:
    cfg = _settings(args, {"curves": None, "out": None, "title": ""})
    if not cfg["curves"] or cfg["out"] is None:
        raise CommandError("give at least one --curves FILE and --out PNG")
    curves = cfg["curves"] if isinstance(cfg["curves"], list) else [cfg["curves"]]
    render_curves([_existing(c, "curve file") for c in curves], cfg["out"], cfg["title"])
    print(f"wrote {cfg['out']}")
    return 0


def cmd_annotate(args) -> int:
    from .datagen.annotation import annotate_scale_ratio, load_camera_view

    cfg = _settings(args, {"view1": None, "view2": None, "tau": None})
    v1 = load_camera_view(_existing(cfg["view1"], "view file"))
    v2 = load_camera_view(_existing(cfg["view2"], "view file"))
    try:
        ratio = annotate_scale_ratio(v1, v2, None if cfg["tau"] is None else float(cfg["tau"]))
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    print(f"gt_ratio,log2_gt_ratio\n{_fmt(ratio.value)},{_fmt(ratio.log2_value)}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scalematch", description="Scale-ratio estimation and scale-aware image matching."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a setting")
        p.set_defaults(func=func)
        return p

    p = command("generate", cmd_generate, "render synthetic pairs and a manifest")
    p.add_argument("--content", help="directory of content images")
    p.add_argument("--backgrounds", help="directory of background images")
    p.add_argument("--synthetic-content", dest="synthetic_content", type=int,
                   help="render N procedural content images instead")
    p.add_argument("--synthetic-backgrounds", dest="synthetic_backgrounds", type=int,
                   help="render N procedural backgrounds instead")
    p.add_argument("--n", type=int)
    p.add_argument("--m-min", dest="m_min", type=float)
    p.add_argument("--m-max", dest="m_max", type=float)
    p.add_argument("--resolution", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = command("train", cmd_train, "train the scale-ratio network")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--input-resolution", dest="input_resolution", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-covisibility", dest="use_covisibility", action="store_const", const=False)

    p = command("estimate", cmd_estimate, "estimate scale ratios with a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--pairs", help="manifest (.jsonl) or table with path1,path2 columns")
    p.add_argument("--out", help="output table (stdout when omitted)")
    p.add_argument("--both-orders", dest="both_orders", action="store_const", const=True)

    p = command("match", cmd_match, "match pairs with and without scale-difference-aware resizing")
    p.add_argument("--pairs")
    p.add_argument("--out")
    p.add_argument("--estimator", choices=["checkpoint", "gt", "unit"])
    p.add_argument("--checkpoint")
    p.add_argument("--max-keypoints", dest="max_keypoints", type=int)
    p.add_argument("--ratio-test", dest="ratio_test", type=float)
    p.add_argument("--px-threshold", dest="px_threshold", type=float)
    p.add_argument("--paper-direction", dest="paper_direction", action="store_const", const=True,
                   help="resize image1 by s^-0.5 and image2 by s^0.5")

    p = command("evaluate", cmd_evaluate, "compute metric tables and curve files")
    p.add_argument("--ratios", help="table with gt_ratio and s_hat columns")
    p.add_argument("--poses", help="table with fpe and gt_ratio columns")
    p.add_argument("--matches", help="output directory of the match command")
    p.add_argument("--pairs", help="manifest the match directory was produced from")
    p.add_argument("--px-threshold", dest="px_threshold", type=float)
    p.add_argument("--out")
    p.add_argument("--max-threshold", dest="max_threshold", type=float)
    p.add_argument("--fpe-threshold", dest="fpe_threshold", type=float)

    p = command("plot", cmd_plot, "render curve files as line charts")
    p.add_argument("--curves", nargs="+")
    p.add_argument("--out")
    p.add_argument("--title")

    p = command("annotate", cmd_annotate, "ground-truth ratio of two posed views with depth")
    p.add_argument("--view1")
    p.add_argument("--view2")
    p.add_argument("--tau", type=float)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, FileNotFoundError, ValueError) as exc:
        print(f"scalematch {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

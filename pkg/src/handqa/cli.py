"""``handqa`` command line: one binary, one subcommand per pipeline stage.

Every subcommand resolves its settings from built-in defaults, then an
optional ``key = value`` config file, then explicit flags, and writes a
``run_manifest.json`` (resolved config, input/output digests, wall-clock)
next to its outputs.

Exit status: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .applications import (
    DEFAULT_ALPHA,
    DetectionRecord,
    fusion_sweep,
    improve_hand,
    read_detection_records,
    roc_metrics,
    stub_detector,
    write_detection_records,
)
from .forge import (
    DEFAULT_TIER_PROBABILITIES,
    OBJECT_PROBABILITY,
    SEVERITIES,
    ForgeConfig,
    build_dataset,
    dataset_statistics,
    load_dataset,
    parse_record,
    plan_degradation,
    sample_clean_hand,
)
from .metrics import evaluate, read_ratings_csv
from .model import (
    VARIANTS,
    TrainConfig,
    gradcheck,
    load_checkpoint,
    save_checkpoint,
    score_records,
    train,
)
from .report import emit_report, table_csv

GRADCHECK_TOLERANCE = 1e-4
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --- option tables --------------------------------------------------------------
# name -> (parser, default, help); _REQUIRED marks mandatory settings, None optional ones.

def _floats(text):
    return tuple(float(t) for t in str(text).split(",") if t.strip())


def _path(text):
    return str(text)


_REQUIRED = object()
_OPTIONAL = None

COMMON = {
    "seed": (int, 0, "run seed"),
    "out": (_path, _REQUIRED, "output directory"),
}

OPTIONS = {
    "forge": {
        "n": (int, 100, "number of clean/degraded pairs"),
        "object_probability": (float, OBJECT_PROBABILITY, "probability of an object-interaction hand"),
        "tier_probabilities": (_floats, DEFAULT_TIER_PROBABILITIES, "severity mix for 0.4,0.55,0.7"),
        "workers": (int, 1, "worker processes (output is identical for any value)"),
    },
    "stats": {
        "input": (_path, _REQUIRED, "dataset directory"),
    },
    "train": {
        "input": (_path, _REQUIRED, "dataset directory"),
        "epochs": (int, 5, "training epochs"),
        "batch_size": (int, 16, "mini-batch size"),
        "lr": (float, 0.01, "learning rate"),
        "momentum": (float, 0.9, "momentum"),
        "encoder_variant": (str, "gcn", f"one of {', '.join(VARIANTS)}"),
        "heldout_fraction": (float, 0.2, "fraction of pairs held out"),
    },
    "score": {
        "checkpoint": (_path, _REQUIRED, "checkpoint file"),
        "input": (_path, _REQUIRED, "dataset directory or samples.jsonl"),
        "id": (str, _OPTIONAL, "comma-separated record ids to score"),
    },
    "eval": {
        "predictions": (_path, _REQUIRED, "CSV with id,score"),
        "ratings": (_path, _REQUIRED, "ratings CSV: image id, generator id, ratings..."),
        "level": (str, "image", "image or model"),
    },
    "fuse": {
        "input": (_path, _OPTIONAL, "detection records (jsonl)"),
        "dataset": (_path, _OPTIONAL, "dataset directory to build stub detection records from"),
        "checkpoint": (_path, _OPTIONAL, "checkpoint used with --dataset"),
        "stub_auc": (float, 0.6, "target AUC of the stub detector used with --dataset"),
        "alpha": (float, DEFAULT_ALPHA, "fusion weight of the hand score"),
    },
    "sweep": {
        "input": (_path, _OPTIONAL, "detection records (jsonl)"),
        "dataset": (_path, _OPTIONAL, "dataset directory to build stub detection records from"),
        "checkpoint": (_path, _OPTIONAL, "checkpoint used with --dataset"),
        "stub_auc": (float, 0.6, "target AUC of the stub detector used with --dataset"),
        "alphas": (_floats, tuple(round(0.1 * i, 1) for i in range(11)), "comma-separated alpha grid"),
    },
    "gradcheck": {
        "h": (float, 1e-5, "finite-difference step"),
        "batch": (int, 2, "samples in the random problem"),
        "encoder_variant": (str, "gcn", f"one of {', '.join(VARIANTS)}"),
    },
    "improve": {
        "checkpoint": (_path, _REQUIRED, "checkpoint file"),
        "severity": (float, 0.4, "severity tier of the deformation"),
        "steps": (int, 50, "descent steps"),
        "step_size": (float, 0.01, "step size"),
        "smoothing": (float, 1.0, "initial smoothing width (annealed to 0)"),
    },
}

# gradcheck only prints unless asked to write
OUT_OPTIONAL = {"gradcheck"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="handqa", description="Hand-quality scoring toolkit")
    parser.add_argument("--version", action="version", version=f"handqa {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name, help=(COMMANDS[name].__doc__ or "").strip().splitlines()[0])
        p.add_argument("--config", help="key = value settings file")
        for key, (_, default, help_text) in {**COMMON, **opts}.items():
            # defaults are applied after merging the config file
            shown = "required" if default is _REQUIRED else default
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                           help=f"{help_text} (default: {shown})")
    return parser


def read_config(path, allowed) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in allowed:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def resolve(command: str, args: argparse.Namespace) -> dict:
    table = {**COMMON, **OPTIONS[command]}
    raw = read_config(args.config, table) if args.config else {}
    for key in table:
        value = getattr(args, key)
        if value is not None:
            raw[key] = value
    cfg = {}
    for key, (conv, default, _) in table.items():
        if key in raw:
            try:
                cfg[key] = conv(raw[key])
            except ValueError:
                raise UsageError(f"--{key.replace('_', '-')}: invalid value {raw[key]!r}") from None
        elif default is _REQUIRED and not (key == "out" and command in OUT_OPTIONAL):
            raise UsageError(f"--{key.replace('_', '-')} is required")
        else:
            cfg[key] = None if default is _REQUIRED else default
    return cfg


# --- digests and manifest ----------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def path_digests(path) -> dict:
    """File digest, or for a directory one digest over its sorted
    (relative path, file digest) listing."""
    p = Path(path)
    if p.is_dir():
        h = hashlib.sha256()
        for f in sorted(f for f in p.rglob("*") if f.is_file() and f.name != MANIFEST_NAME):
            h.update(f"{f.relative_to(p).as_posix()}\0{file_digest(f)}\n".encode())
        return {str(p): h.hexdigest()}
    return {str(p): file_digest(p)}


def _jsonable(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def write_manifest(out_dir, command, cfg, inputs, outputs, elapsed) -> Path:
    out = Path(out_dir)
    digests = {}
    for path in inputs:
        digests.update(path_digests(path))
    manifest = {
        "tool": "handqa",
        "version": __version__,
        "command": command,
        "config": {k: _jsonable(v) for k, v in sorted(cfg.items())},
        "inputs": digests,
        "outputs": {str(Path(p).relative_to(out)): file_digest(p) for p in sorted(map(str, outputs))},
        "wall_clock_seconds": round(elapsed, 3),
    }
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out}: {e}") from e
    return out


def _require_file(path, what):
    if not Path(path).exists():
        raise DataError(f"{what} not found: {path}")
    return path


# --- subcommands -----------------------------------------------------------------

def cmd_forge(cfg, out):
    """Generate a paired clean/degraded dataset."""
    config = ForgeConfig(n_pairs=cfg["n"], object_probability=cfg["object_probability"],
                         tier_probabilities=tuple(cfg["tier_probabilities"]), workers=cfg["workers"])
    manifest, _ = build_dataset(config, cfg["seed"], out)
    print(f"forged {manifest.n_pairs} pairs into {out} "
          f"(object interaction {manifest.object_interaction_fraction:.4f})")
    return [], sorted(p for p in out.rglob("*") if p.is_file() and p.name != MANIFEST_NAME)


def cmd_stats(cfg, out):
    """Flexion, palm-orientation and defect statistics of a dataset."""
    src = _require_file(cfg["input"], "dataset")
    report = dataset_statistics(load_dataset(src))
    _, written = emit_report(report.tables(), out, title="statistics")
    (out / "statistics_summary.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return [src], written + [out / "statistics_summary.txt"]


def cmd_train(cfg, out):
    """Train the scorer on a dataset with a seeded held-out split."""
    src = _require_file(cfg["input"], "dataset")
    samples = load_dataset(src)
    config = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                         momentum=cfg["momentum"], seed=cfg["seed"],
                         encoder_variant=cfg["encoder_variant"], heldout_fraction=cfg["heldout_fraction"])
    res = train(samples, config, log_fn=lambda e: print(
        f"epoch {e.epoch}: loss {e.train_loss:.6f} held-out acc {e.heldout_accuracy:.6f} auc {e.heldout_auc:.6f}"))
    ckpt = out / "checkpoint.json"
    save_checkpoint(res.params, ckpt, meta={
        "config": {k: _jsonable(v) for k, v in sorted(cfg.items()) if k not in ("out", "input")},
        "heldout_ids": res.heldout_ids,
    })
    log = out / "train_log.csv"
    log.write_text(table_csv(["epoch", "train_loss", "heldout_accuracy", "heldout_auc"],
                             [[e.epoch, e.train_loss, e.heldout_accuracy, e.heldout_auc] for e in res.log]))
    return [src], [ckpt, log]


def _load_records(path):
    p = Path(path)
    jsonl = p / "samples.jsonl" if p.is_dir() else p
    _require_file(jsonl, "samples file")
    ids, labels, recs = [], [], []
    with open(jsonl) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                meta, rec = parse_record(line, jsonl.parent, lineno)
            except ValueError as e:
                raise DataError(f"{jsonl}: {e}") from e
            ids.append(str(meta["id"]))
            labels.append(rec.label)
            recs.append(rec)
    return ids, labels, recs


def cmd_score(cfg, out):
    """Score hand records with a trained checkpoint."""
    params = load_checkpoint(_require_file(cfg["checkpoint"], "checkpoint"))
    ids, labels, recs = _load_records(cfg["input"])
    if cfg["id"]:
        want = [t.strip() for t in cfg["id"].split(",") if t.strip()]
        missing = [w for w in want if w not in ids]
        if missing:
            raise DataError(f"record id(s) not found: {', '.join(missing)}")
        keep = [ids.index(w) for w in want]
        ids, labels, recs = [ids[i] for i in keep], [labels[i] for i in keep], [recs[i] for i in keep]
    if not recs:
        raise DataError("no records to score")
    S = score_records(recs, params)
    rows = [[i, lab, float(s), (float(s) - 1.0) / 4.0] for i, lab, s in zip(ids, labels, S)]
    path = out / "scores.csv"
    path.write_text(table_csv(["id", "label", "s_hand", "p_good"], rows))
    for r in rows[:20]:
        print(f"{r[0]} {r[1]} S_hand={r[2]:.6f}")
    if len(rows) > 20:
        print(f"... {len(rows)} records scored, mean S_hand {float(np.mean(S)):.6f}")
    return [cfg["checkpoint"], cfg["input"]], [path]


def _read_predictions(path):
    _require_file(path, "predictions")
    out = {}
    col = 1
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and row[0].strip().lower() in ("id", "image_id"):
                # a header may name the score column (scores.csv uses s_hand)
                names = [c.strip().lower() for c in row]
                col = next((names.index(n) for n in ("s_hand", "score") if n in names), 1)
                continue
            if len(row) <= col:
                raise DataError(f"{path}:{lineno}: expected id,score")
            try:
                out[row[0].strip()] = float(row[col])
            except ValueError:
                raise DataError(f"{path}:{lineno}: column {col + 1}: not a number: {row[col]!r}") from None
    if not out:
        raise DataError(f"{path}: no predictions")
    return out


def cmd_eval(cfg, out):
    """Correlate predicted scores with revised mean opinion scores."""
    preds = _read_predictions(cfg["predictions"])
    sheets = read_ratings_csv(_require_file(cfg["ratings"], "ratings"))
    if cfg["level"] not in ("image", "model"):
        raise UsageError("--level must be image or model")
    rep = evaluate(preds, sheets, cfg["level"])
    path = out / "correlations.csv"
    path.write_text(table_csv(["level", "n", "plcc", "srcc", "krcc"],
                              [[rep.level, rep.n, rep.plcc, rep.srcc, rep.krcc]]))
    print(f"{rep.level} level (n={rep.n}): PLCC {rep.plcc:.6f} SRCC {rep.srcc:.6f} KRCC {rep.krcc:.6f}")
    return [cfg["predictions"], cfg["ratings"]], [path]


def _detection_records(cfg, out):
    """Records from --input, or built from --dataset with a stub detector."""
    if cfg["input"]:
        return read_detection_records(_require_file(cfg["input"], "detection records")), [cfg["input"]], []
    if not (cfg["dataset"] and cfg["checkpoint"]):
        raise UsageError("give --input, or --dataset together with --checkpoint")
    ids, labels, recs = _load_records(cfg["dataset"])
    params = load_checkpoint(_require_file(cfg["checkpoint"], "checkpoint"))
    S = score_records(recs, params)
    fake = np.array([lab == "bad" for lab in labels])
    p = stub_detector(fake, cfg["stub_auc"], cfg["seed"])
    records = [DetectionRecord(i, "fake" if f else "real", float(pp), float(s))
               for i, f, pp, s in zip(ids, fake, p, S)]
    path = out / "detections.jsonl"
    write_detection_records(records, path)
    return records, [cfg["dataset"], cfg["checkpoint"]], [path]


def cmd_fuse(cfg, out):
    """Fuse detector probabilities with hand scores at one alpha."""
    records, inputs, written = _detection_records(cfg, out)
    fused = [r.fused(cfg["alpha"]) for r in records]
    raw = roc_metrics(records, use_fused=False)
    rep = roc_metrics(fused)
    path = out / "fused.csv"
    path.write_text(table_csv(["id", "label", "p_detector", "s_hand", "alpha", "p_fused"],
                              [[r.image_id, r.label, r.p_detector, r.s_hand, r.alpha, r.p_fused] for r in fused]))
    metrics = out / "fusion_metrics.csv"
    metrics.write_text(table_csv(["scores", "alpha", "auc", "eer", "acc_at_eer"], [
        ["detector", 0.0, raw.auc, raw.eer, raw.acc_at_eer],
        ["fused", cfg["alpha"], rep.auc, rep.eer, rep.acc_at_eer],
    ]))
    print(f"detector AUC {raw.auc:.6f} EER {raw.eer:.6f}; fused (alpha={cfg['alpha']}) "
          f"AUC {rep.auc:.6f} EER {rep.eer:.6f} Acc {rep.acc_at_eer:.6f}")
    return inputs, written + [path, metrics]


def cmd_sweep(cfg, out):
    """ROC metrics of the fused probability over a grid of alphas."""
    records, inputs, written = _detection_records(cfg, out)
    rows = fusion_sweep(records, cfg["alphas"])
    path = out / "sweep.csv"
    path.write_text(table_csv(["alpha", "auc", "eer", "acc"],
                              [[r.alpha, r.report.auc, r.report.eer, r.report.acc_at_eer] for r in rows]))
    print(path.read_text(), end="")
    return inputs, written + [path]


def cmd_gradcheck(cfg, out):
    """Compare analytic gradients with central finite differences."""
    if cfg["encoder_variant"] not in VARIANTS:
        raise UsageError(f"--encoder-variant must be one of {VARIANTS}")
    rep = gradcheck(cfg["seed"], h=cfg["h"], batch=cfg["batch"], variant=cfg["encoder_variant"])
    print(f"seed {rep.seed}: max relative error {rep.max_relative_error:.3e}")
    written = []
    if out is not None:
        path = out / "gradcheck.csv"
        path.write_text(table_csv(["tensor", "max_relative_error"], [[k, v] for k, v in rep.per_tensor.items()]))
        written.append(path)
    if rep.max_relative_error >= GRADCHECK_TOLERANCE:
        raise DataError(f"gradient check failed: {rep.max_relative_error:.3e} >= {GRADCHECK_TOLERANCE:g}")
    return [], written


def cmd_improve(cfg, out):
    """Raise the hand score by descending on the deformation magnitude."""
    if cfg["severity"] not in SEVERITIES:
        raise UsageError(f"--severity must be one of {SEVERITIES}")
    params = load_checkpoint(_require_file(cfg["checkpoint"], "checkpoint"))
    rng = np.random.default_rng([cfg["seed"], 0])
    clean = sample_clean_hand(rng, False)
    plan = plan_degradation(clean, cfg["severity"], ("deformation",), rng)
    traj, mags = improve_hand(clean, plan, params, steps=cfg["steps"], step_size=cfg["step_size"],
                              smoothing=cfg["smoothing"])
    path = out / "trajectory.csv"
    path.write_text(table_csv(["step", "s_hand"], [[i, s] for i, s in enumerate(traj)]))
    print(f"S_hand {traj[0]:.6f} -> {traj[-1]:.6f}; deformation magnitude {mags['deformation']:.6f}")
    return [cfg["checkpoint"]], [path]


COMMANDS = {
    "forge": cmd_forge,
    "stats": cmd_stats,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "fuse": cmd_fuse,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "improve": cmd_improve,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
        cfg = resolve(args.command, args)
        t0 = time.perf_counter()
        out = _out_dir(cfg) if cfg["out"] is not None else None
        inputs, outputs = COMMANDS[args.command](cfg, out)
        if out is not None:
            write_manifest(out, args.command, cfg, inputs, outputs, time.perf_counter() - t0)
    except UsageError as e:
        print(f"handqa: usage error: {e}", file=sys.stderr)
        return 1
    except (DataError, ValueError, OSError, KeyError) as e:
        print(f"handqa: error: {e}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())

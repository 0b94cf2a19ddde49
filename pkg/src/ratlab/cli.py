"""``ratlab`` command-line front end.

Every run writes its artifacts plus ``manifest.json`` into ``--out``. Passing a
manifest back as ``--config`` replays the run with the stored configuration.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import os
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from ratlab import __version__, checkpoint
from ratlab.data import DataError, Example, Splits, fingerprint, to_discrete, write_jsonl
from ratlab.experiments import (ConfigError, PRESETS, load_splits, model_config, run_landscapes,
                                set_key, synth_spec, train_config)
from ratlab.landscape import landscape_tolerance
from ratlab.models import load_embeddings
from ratlab.theory import (ColinearityError, PayoffTable, check_curvature, conditional_entropy,
                           default_grid, find_pure_nash, oracle_attention_landscape,
                           oracle_rationale_landscape)
from ratlab.training import TRAJECTORY_FIELDS, TrainError, build_system, evaluate, train
from ratlab.vocab import Vocab

log = logging.getLogger("ratlab")

COMMANDS = ("gen-data", "train-rnp", "train-a2r", "skew", "bias", "sweep-landscape", "oracle",
            "nash", "eval")
TRAIN_COMMANDS = ("train-rnp", "train-a2r", "skew", "bias")
MANIFEST_FORMAT = "ratlab-manifest-1"

# flag -> dotted config key
OVERRIDES = {"lam": "train.lam", "q": "train.q", "explore": "train.explore",
             "grid": "sweep.grid", "budget": "sweep.budget"}

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ratlab", description="Selective rationalization lab.")
    ap.add_argument("command", choices=COMMANDS, metavar="command",
                    help="one of: " + ", ".join(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON config file, a preset name or a run manifest")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, help="data seed for gen-data, sweep seed for sweep-landscape, else training seed")
    ap.add_argument("--lambda", dest="lam", type=float, help="JS weight for A2R")
    ap.add_argument("--q", type=float, help="fraction of units kept at evaluation")
    ap.add_argument("--explore", type=float, help="uniform mixing rate when sampling masks")
    ap.add_argument("--grid", type=int, help="number of landscape grid points")
    ap.add_argument("--budget", type=int, help="training epochs per landscape point")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    return ap


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# -- config ----------------------------------------------------------------

def _absolutize(cfg: dict, base: Path) -> None:
    """Resolve file paths in the config against the config file's directory."""
    jsonl = (cfg.get("data") or {}).get("jsonl")
    if isinstance(jsonl, dict):
        for k, v in jsonl.items():
            if isinstance(v, str):
                jsonl[k] = str((base / v).resolve())
    for section, key in (("eval", "checkpoint"), ("embeddings", "path")):
        node = cfg.get(section)
        if isinstance(node, dict) and isinstance(node.get(key), str):
            node[key] = str((base / node[key]).resolve())


def read_config(source: str) -> tuple[dict, dict | None]:
    """Returns (config, manifest or None)."""
    if source in PRESETS and not os.path.exists(source):
        return copy.deepcopy(PRESETS[source]), None
    path = Path(source)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {source}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    if raw.get("format") == MANIFEST_FORMAT:
        return copy.deepcopy(raw["config"]), raw
    _absolutize(raw, path.resolve().parent)
    return raw, None


def apply_overrides(cfg: dict, args, command: str) -> dict:
    cfg = copy.deepcopy(cfg)
    for flag, key in OVERRIDES.items():
        value = getattr(args, flag)
        if value is not None:
            set_key(cfg, key, value)
    if args.seed is not None:
        if command == "gen-data":
            set_key(cfg, "data.synth.seed", args.seed)
        elif command == "sweep-landscape":
            set_key(cfg, "sweep.seed", args.seed)
        else:
            set_key(cfg, "train.seed", args.seed)
    mode = {"train-rnp": "rnp", "train-a2r": "a2r"}.get(command)
    if mode is not None:
        set_key(cfg, "train.mode", mode)
    if command == "skew":
        train = cfg.setdefault("train", {})
        if not train.get("skew_epochs"):
            train["skew_epochs"] = 20
        train.setdefault("skew_unit", 1)
    if command == "bias" and not cfg.get("bias"):
        cfg["bias"] = {"alpha": 0.8}
    return cfg


# -- artifacts -------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def write_trajectory(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_FIELDS)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in TRAJECTORY_FIELDS])


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def write_landscape(path, grids) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["grid", "loss", "kind", "failed"])
        for g in grids:
            for x, loss, kind, failed in g.rows():
                w.writerow([repr(float(x)), _fmt(loss), kind, int(bool(failed))])


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def reencode(examples: list[Example], src: Vocab, dst: Vocab) -> list[Example]:
    """Map examples onto another vocabulary; unknown tokens become UNK."""
    return [Example(dst.encode(src.decode(ex.tokens), grow=False), ex.segments, ex.label,
                    ex.gold_spans, dict(ex.meta)) for ex in examples]


def _splits_fingerprint(splits: Splits) -> str:
    h = hashlib.sha256()
    for name, part in splits.items():
        h.update(name.encode())
        h.update(fingerprint(part).encode())
    return h.hexdigest()


# -- commands --------------------------------------------------------------

def cmd_gen_data(cfg, out: Path) -> tuple[list[str], str | None]:
    splits = load_splits(cfg)
    names = []
    for name, part in splits.items():
        write_jsonl(out / f"{name}.jsonl", part, splits.vocab)
        names.append(f"{name}.jsonl")
    stats = {name: {"n": len(part),
                    "mean_tokens": float(np.mean([len(e.tokens) for e in part])) if part else 0.0,
                    "mean_segments": float(np.mean([e.num_units for e in part])) if part else 0.0,
                    "positive_rate": float(np.mean([e.label for e in part])) if part else 0.0}
             for name, part in splits.items()}
    stats["vocab_size"] = len(splits.vocab)
    write_json(out / "data_stats.json", stats)
    return names + ["data_stats.json"], _splits_fingerprint(splits)


def cmd_train(cfg, out: Path) -> tuple[list[str], str | None]:
    splits = load_splits(cfg)
    tcfg = train_config(cfg)
    mcfg = model_config(cfg)
    system = build_system(tcfg, mcfg, len(splits.vocab))
    emb = cfg.get("embeddings")
    if emb:
        for enc in {id(e): e for e in (system.pred_encoder, system.generator.enc)}.values():
            n = load_embeddings(emb["path"], splits.vocab, enc.emb)
        log.info("loaded %d pretrained embedding rows", n)

    def progress(row, _system):
        log.info("epoch %d dev_acc %.4f x1 %.1f", row["epoch"], row["dev_acc"], row["x1_pct"])

    result = train(splits, tcfg, mcfg, system=system, on_epoch=progress)
    write_trajectory(out / "trajectory.csv", result.trajectory)
    report = evaluate(result.system, splits.test, tcfg) if splits.test else None
    files = ["trajectory.csv"]
    if report is not None:
        write_json(out / "metrics.json", report.to_json())
        files.append("metrics.json")
    checkpoint.save(out / "checkpoint.bin", result.system, splits.vocab, tcfg.granularity,
                    {"best_epoch": result.best_epoch})
    summary = {"best_epoch": result.best_epoch, "skipped_batches": result.skipped_batches,
               "nonfinite_grads": result.nonfinite_grads, "skew_gap": result.skew_gap,
               "skew_unit_losses": result.extras.get("skew_unit_losses", []),
               "saturation_warnings": result.extras.get("saturation_warnings", 0),
               "averaging": "macro (mean of per-example P/R/F1)",
               "unit_pct": report.unit_pct if report is not None else []}
    write_json(out / "summary.json", summary)
    return files + ["checkpoint.bin", "summary.json"], _splits_fingerprint(splits)


def cmd_eval(cfg, out: Path) -> tuple[list[str], str | None]:
    ev = cfg.get("eval") or {}
    if "checkpoint" not in ev:
        raise ConfigError("eval needs eval.checkpoint")
    try:
        system, vocab, meta = checkpoint.load(ev["checkpoint"])
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint: {exc}") from None
    section = dict(cfg.get("train") or {})
    granularity = ev.get("granularity", section.get("granularity", meta["granularity"]))
    if granularity != meta["granularity"]:
        raise ConfigError(f"granularity mismatch: checkpoint is {meta['granularity']!r}, "
                          f"dataset is {granularity!r}")
    section.update(mode=meta["mode"], granularity=granularity)
    tcfg = train_config({"train": section})
    splits = load_splits(cfg)
    examples = getattr(splits, ev.get("split", "test"))
    if not examples:
        raise DataError("evaluation split is empty")
    examples = reencode(examples, splits.vocab, vocab)
    report = evaluate(system, examples, tcfg)
    write_json(out / "metrics.json", report.to_json())
    return ["metrics.json"], fingerprint(examples)


def cmd_oracle(cfg, out: Path) -> tuple[list[str], str | None]:
    spec = synth_spec(cfg)
    joint = to_discrete(spec)
    grid = default_grid(int((cfg.get("sweep") or {}).get("grid", 21)))
    res = {"H_y_given_x1": conditional_entropy(joint, [0]),
           "H_y_given_x2": conditional_entropy(joint, [1]) if joint.num_positions > 1 else None,
           "H_y": conditional_entropy(joint, [])}
    grids = [oracle_rationale_landscape(joint, grid)]
    try:
        grids.append(oracle_attention_landscape(joint, grid))
    except ColinearityError as exc:
        res["colinear_pair"] = list(exc.pair)
    tol = float((cfg.get("oracle") or {}).get("tol", 1e-9))
    curv = {g.kind: check_curvature(g, tol).to_dict() for g in grids}
    if len(grids) == 2:
        r, a = grids
        res["endpoint_gap"] = [abs(float(r.loss[0] - a.loss[0])), abs(float(r.loss[-1] - a.loss[-1]))]
    res["verdicts"] = {k: v["verdict"] for k, v in curv.items()}
    write_json(out / "oracle.json", res)
    write_landscape(out / "landscape.csv", grids)
    write_json(out / "curvature.json", curv)
    return ["oracle.json", "landscape.csv", "curvature.json"], None


def cmd_sweep(cfg, out: Path) -> tuple[list[str], str | None]:
    grids = run_landscapes(cfg)
    tol = landscape_tolerance(*grids.values())
    curv = {}
    for kind, g in grids.items():
        d = check_curvature(g, tol).to_dict()
        d["interior_max_excess"] = g.interior_max_excess()
        d["failed_points"] = int(g.failed.sum())
        curv[g.kind] = d
    write_landscape(out / "landscape.csv", grids.values())
    write_json(out / "curvature.json", curv)
    return ["landscape.csv", "curvature.json"], _splits_fingerprint(load_splits(cfg))


def cmd_nash(cfg, out: Path) -> tuple[list[str], str | None]:
    spec = cfg.get("nash") or PRESETS["nash"]["nash"]
    try:
        table = PayoffTable(spec["payoffs"], spec.get("row_labels"), spec.get("col_labels"))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid nash section: {exc}") from None
    eqs = find_pure_nash(table)
    listed = []
    for i, j in eqs:
        item = {"row": i, "col": j, "payoff": table.payoffs[i, j].tolist()}
        if table.row_labels:
            item["row_label"] = table.row_labels[i]
        if table.col_labels:
            item["col_label"] = table.col_labels[j]
        listed.append(item)
    write_json(out / "nash.json", {"equilibria": listed, "count": len(listed)})
    return ["nash.json"], None


HANDLERS = {"gen-data": cmd_gen_data, "train-rnp": cmd_train, "train-a2r": cmd_train,
            "skew": cmd_train, "bias": cmd_train, "sweep-landscape": cmd_sweep,
            "oracle": cmd_oracle, "nash": cmd_nash, "eval": cmd_eval}


def run_experiment(command: str, cfg: dict, out: Path, seed: int | None = None) -> dict:
    """Run ``command`` and write artifacts plus manifest; returns the manifest."""
    out.mkdir(parents=True, exist_ok=True)
    started = datetime.now(timezone.utc).isoformat()
    files, data_hash = HANDLERS[command](cfg, out)
    manifest = {"format": MANIFEST_FORMAT, "command": command, "config": cfg, "seed": seed,
                "dataset_fingerprint": data_hash, "version": version_string(),
                "started": started, "finished": datetime.now(timezone.utc).isoformat(),
                "outputs": {f: sha256_file(out / f) for f in files}}
    write_json(out / "manifest.json", manifest)
    return manifest


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg, manifest = read_config(args.config)
        if manifest is not None and manifest.get("command") != args.command:
            raise UsageError(f"manifest was recorded for {manifest.get('command')!r}, "
                             f"not {args.command!r}")
        if args.command in TRAIN_COMMANDS and args.seed is None and manifest is None:
            raise UsageError(f"--seed is required for {args.command}")
        cfg = apply_overrides(cfg, args, args.command)
        seed = args.seed if args.seed is not None else (manifest or {}).get("seed")
        run_experiment(args.command, cfg, Path(args.out), seed)
    except (UsageError, ConfigError, DataError, checkpoint.CheckpointError) as exc:
        print(f"ratlab: error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    except (TrainError, ColinearityError, FloatingPointError, OSError, ValueError, RuntimeError) as exc:
        print(f"ratlab: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

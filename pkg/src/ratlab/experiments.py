"""Standard desk-scale protocols as plain config dicts, and helpers that run them.

A config has optional sections ``data``, ``bias``, ``model``, ``train``,
``sweep``, ``nash`` and ``eval``; each maps onto the matching dataclass.
"""
from __future__ import annotations

import copy
from dataclasses import fields

import numpy as np

from ratlab.data import (BiasSpec, Splits, SynthSpec, gen_synth, inject_bias, load_jsonl,
                         DataError)
from ratlab.landscape import SweepConfig, empirical_landscape
from ratlab.models import ModelConfig
from ratlab.training import TrainConfig, TrainResult, evaluate, train
from ratlab.vocab import Vocab

# Skew-k on a two-sentence task. The gold slot (1st) draws its cue from 200
# synonyms per polarity, the decoy slot from one, so f_r needs many more
# exposures to read the gold slot. Embeddings start at a pretrained-vector-like
# scale and the policy rate is raised to 1e-3 so the small generator can
# commit within a few epochs (see the decisions ledger).
INTERLOCK = {
    "data": {"synth": {"predictiveness": [1.0, 0.8], "n_train": 2000, "n_dev": 500, "n_test": 500,
                       "sentence_len": 3, "cue_words": [200, 1], "seed": 0}},
    "model": {"d_emb": 32, "hidden": 16, "encoder": "mean", "init_scale": 0.5},
    "train": {"mode": "rnp", "epochs": 50, "batch_size": 32, "lr_policy": 1e-3,
              "skew_epochs": 20, "skew_unit": 1, "seed": 0},
}

# Biased-alpha on a three-sentence task; gold is the middle sentence.
BIAS = {
    "data": {"synth": {"predictiveness": [0.6, 1.0, 0.7], "n_train": 2000, "n_dev": 500,
                       "n_test": 500, "sentence_len": 3, "cue_words": [1, 200, 1], "seed": 0}},
    "bias": {"alpha": 0.8, "apply_to_test": True, "seed": 0},
    "model": {"d_emb": 32, "hidden": 16, "encoder": "mean", "init_scale": 0.5},
    "train": {"mode": "rnp", "epochs": 50, "batch_size": 32, "lr_policy": 1e-3, "seed": 0},
}

# Landscape sweeps: cue-only sentences where slot 2's positive word is slot 1's
# negative word, read by a position-blind mean-pool predictor.
LANDSCAPE = {
    "data": {"synth": {"predictiveness": [1.0, 0.9], "n_train": 1000, "n_dev": 10, "n_test": 10,
                       "sentence_len": 1, "separator": None, "chain_cues": True, "seed": 0}},
    "model": {"d_emb": 16, "encoder": "mean", "r_pooling": "mean", "head": "linear"},
    "sweep": {"budget": 60, "grid": 21, "batch_size": 32, "lr": 1e-3, "seed": 0, "workers": 1,
              "kinds": ["rationale", "attention"]},
}

TOY = {"data": {"synth": {"predictiveness": [1.0, 0.8], "sentence_len": 1, "separator": None}}}

ACCORDANCE = {"nash": {"payoffs": [[[-1, -1], [-10, -10]], [[-20, -20], [-2, -2]]],
                       "row_labels": ["select X1", "select X2"],
                       "col_labels": ["overfit X1", "overfit X2"]}}

PRESETS = {"interlock": INTERLOCK, "bias": BIAS, "landscape": LANDSCAPE, "toy": TOY,
           "nash": ACCORDANCE}


class ConfigError(ValueError):
    pass


def preset(name: str, **overrides) -> dict:
    cfg = copy.deepcopy(PRESETS[name])
    for dotted, value in overrides.items():
        set_key(cfg, dotted, value)
    return cfg


def set_key(cfg: dict, dotted: str, value) -> None:
    node = cfg
    parts = dotted.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def _build(cls, section: dict | None, name: str, drop=()):
    section = dict(section or {})
    for k in drop:
        section.pop(k, None)
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from None


def model_config(cfg: dict) -> ModelConfig:
    return _build(ModelConfig, cfg.get("model"), "model")


def train_config(cfg: dict, **force) -> TrainConfig:
    section = dict(cfg.get("train") or {})
    section.update(force)
    return _build(TrainConfig, section, "train")


def sweep_config(cfg: dict) -> SweepConfig:
    return _build(SweepConfig, cfg.get("sweep"), "sweep", drop=("grid", "kinds"))


def synth_spec(cfg: dict) -> SynthSpec:
    data = cfg.get("data") or {}
    if "synth" not in data:
        raise ConfigError("config has no data.synth section")
    return _build(SynthSpec, data["synth"], "data.synth")


def load_splits(cfg: dict, vocab: Vocab | None = None) -> Splits:
    """Synthetic splits, or JSONL files; then optional bias injection."""
    data = cfg.get("data") or {}
    if "synth" in data:
        splits = gen_synth(synth_spec(cfg), vocab)
    elif "jsonl" in data:
        vocab = vocab if vocab is not None else Vocab()
        parts = []
        for split in ("train", "dev", "test"):
            path = data["jsonl"].get(split)
            if path is None:
                parts.append([])
                continue
            examples, errors, vocab = load_jsonl(path, vocab, data.get("separator", "."))
            if errors:
                first = errors[0]
                raise DataError(f"{path}: {len(errors)} malformed line(s); "
                                f"line {first.line}: {first.message}")
            parts.append(examples)
        splits = Splits(*parts, vocab=vocab)
    else:
        raise ConfigError("config needs data.synth or data.jsonl")
    if cfg.get("bias"):
        b = dict(cfg["bias"])
        seed = int(b.pop("seed", 0))
        spec = _build(BiasSpec, b, "bias")
        splits = inject_bias(splits, spec, np.random.default_rng(seed))
    return splits


def run_training(cfg: dict, **force) -> tuple[Splits, TrainResult, TrainConfig]:
    splits = load_splits(cfg)
    tcfg = train_config(cfg, **force)
    return splits, train(splits, tcfg, model_config(cfg)), tcfg


def final_metrics(splits: Splits, result: TrainResult, tcfg: TrainConfig):
    """Test metrics of the last-epoch parameters (the best-dev ones are restored afterwards)."""
    best = result.system.snapshot()
    result.system.restore(result.final_params)
    try:
        return evaluate(result.system, splits.test, tcfg)
    finally:
        result.system.restore(best)


def run_interlock(mode: str, k: int, seed: int) -> float:
    """Percent of test examples whose final selection is the gold (first) sentence."""
    cfg = preset("interlock", **{"data.synth.seed": seed})
    splits, result, tcfg = run_training(cfg, mode=mode, skew_epochs=k, seed=seed)
    return final_metrics(splits, result, tcfg).gold_unit_pct(0)


def run_bias(mode: str, seed: int = 0) -> float:
    """Percent of test examples whose final selection is the biased first sentence."""
    cfg = preset("bias", **{"data.synth.seed": seed, "bias.seed": seed})
    splits, result, tcfg = run_training(cfg, mode=mode, seed=seed)
    return final_metrics(splits, result, tcfg).x1_pct


def run_landscapes(cfg: dict | None = None):
    cfg = cfg or preset("landscape")
    splits = load_splits(cfg)
    mcfg = model_config(cfg)
    scfg = sweep_config(cfg)
    sweep = cfg.get("sweep") or {}
    grid = np.linspace(0.0, 1.0, int(sweep.get("grid", 21)))
    kinds = sweep.get("kinds", ["rationale", "attention"])
    return {k: empirical_landscape(splits.train, len(splits.vocab), mcfg, k, grid, scfg) for k in kinds}

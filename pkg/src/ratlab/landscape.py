"""Empirical loss landscapes: retrain a fresh predictor at each fixed selection policy.

At grid value g the generator output is pinned to [g, 1-g]. The rationale
kind trains f_r on masks sampled from that policy; the attention kind trains
f_a with alpha = [g, 1-g]. The recorded loss is the exact expected training
loss of the final predictor (for the rationale kind, g*L(e1) + (1-g)*L(e2)),
so no mask-sampling noise enters the landscape itself.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np

from ratlab import autograd as ag
from ratlab.autograd import Tape, no_grad, SaturationWarning
from ratlab.data import Example
from ratlab.models import ModelConfig, RationaleSystem, make_batches, apply_mask, sample_mask
from ratlab.optim import Adam
from ratlab.theory import LandscapeGrid, default_grid

KINDS = ("rationale", "attention")


@dataclass
class SweepConfig:
    budget: int = 60          # epochs per grid point
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.budget < 0 or self.batch_size < 1 or not self.lr > 0 or self.workers < 1:
            raise ValueError("invalid sweep configuration")

    def to_dict(self) -> dict:
        return asdict(self)


def _system(kind: str, vocab_size: int, model_cfg: ModelConfig, seed: int) -> RationaleSystem:
    # "rnp" and "attention" systems draw identical initial values for the
    # shared encoder and for the f_r / f_a head, so corners start level.
    return RationaleSystem("rnp" if kind == "rationale" else "attention", vocab_size, model_cfg, seed)


def _forward(system, kind, batch, policy, rng):
    lay = batch.layout
    if kind == "rationale":
        mask = sample_mask(np.broadcast_to(policy, (len(batch), lay.num_units)), rng, 0.0)
        return system.f_r.rationale(apply_mask(batch.ids, mask, lay), lay, mask)
    alpha = np.broadcast_to(policy, (len(batch), lay.num_units)).copy()
    return system.f_a.attention(batch.ids, lay, alpha)


def expected_loss(system: RationaleSystem, kind: str, examples: list[Example], policy) -> float:
    """Exact expected cross-entropy under the fixed policy (no sampling)."""
    policy = np.asarray(policy, dtype=np.float64)
    total = 0.0
    with no_grad(), warnings.catch_warnings():
        warnings.simplefilter("ignore", SaturationWarning)
        for b in make_batches(examples, 1024):
            lay = b.layout
            if kind == "rationale":
                for u, w in enumerate(policy):
                    if w == 0.0:
                        continue
                    mask = np.zeros((len(b), lay.num_units))
                    mask[:, u] = 1.0
                    p = system.f_r.rationale(apply_mask(b.ids, mask, lay), lay, mask)
                    total += w * float(ag.cross_entropy(p, b.labels).data.sum())
            else:
                alpha = np.broadcast_to(policy, (len(b), lay.num_units)).copy()
                p = system.f_a.attention(b.ids, lay, alpha)
                total += float(ag.cross_entropy(p, b.labels).data.sum())
    return total / len(examples)


def fit_point(examples: list[Example], vocab_size: int, model_cfg: ModelConfig, kind: str,
              g: float, cfg: SweepConfig) -> tuple[float, bool]:
    """Train one predictor at policy [g, 1-g]; returns (final loss, failed)."""
    if kind not in KINDS:
        raise ValueError(f"unknown landscape kind {kind!r}")
    policy = np.array([g, 1.0 - g])
    system = _system(kind, vocab_size, model_cfg, cfg.seed)
    pred = system.f_r if kind == "rationale" else system.f_a
    params = system.pred_encoder.params() + pred.head.params()
    opt = Adam(params, lr=cfg.lr)
    order_rng, mask_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    # divergence is reported through the failed flag, not as numpy warnings
    with warnings.catch_warnings(), np.errstate(over="ignore", invalid="ignore"):
        warnings.simplefilter("ignore", SaturationWarning)
        for _ in range(cfg.budget):
            for b in make_batches(examples, cfg.batch_size, "sentence", order_rng):
                if b.layout.num_units != 2:
                    raise ValueError("landscape sweeps need exactly two segments per example")
                with Tape() as tape:
                    loss = ag.mean(ag.cross_entropy(_forward(system, kind, b, policy, mask_rng), b.labels))
                if not np.isfinite(loss.data):
                    return float("nan"), True
                opt.step(tape.backward(loss, params))
    value = expected_loss(system, kind, examples, policy)
    return value, not np.isfinite(value)


def _job(args):
    return fit_point(*args)


def empirical_landscape(examples: list[Example], vocab_size: int, model_cfg: ModelConfig,
                        kind: str, grid=None, cfg: SweepConfig | None = None) -> LandscapeGrid:
    """Independent fit per grid point; parallel when ``cfg.workers > 1``, merged by index."""
    cfg = cfg or SweepConfig()
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    jobs = [(examples, vocab_size, model_cfg, kind, float(g), cfg) for g in grid]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    loss = np.array([r[0] for r in results])
    failed = np.array([r[1] for r in results])
    return LandscapeGrid(grid, loss, f"{kind}-empirical", failed)


def landscape_tolerance(*grids: LandscapeGrid, frac: float = 0.02) -> float:
    """frac * (loss range over the finite points of all grids)."""
    vals = np.concatenate([g.loss[~g.failed] for g in grids])
    return frac * float(vals.max() - vals.min()) if vals.size else 0.0

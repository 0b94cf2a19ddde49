"""Training objectives and loops for RNP, A2R and the attention-only system."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, asdict, field

import numpy as np

from ratlab import autograd as ag
from ratlab.autograd import Tensor, Tape, no_grad, SaturationWarning
from ratlab.data import Example, Splits
from ratlab.metrics import MetricsReport, summarize
from ratlab.models import (RationaleSystem, ModelConfig, Layout, Batch, make_batches, apply_mask,
                           sample_mask, topq_mask, argmax_mask)
from ratlab.optim import Adam, Optimizer

MODES = ("rnp", "a2r", "attention")
TRAJECTORY_FIELDS = ("epoch", "loss_r", "loss_a", "loss_js", "dev_acc", "dev_f1", "x1_pct", "lambda")


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "rnp"
    epochs: int = 30
    batch_size: int = 32
    lr_main: float = 1e-3
    lr_policy: float = 1e-4
    lr_generator: float | None = None   # A2R generator; defaults to lr_main
    explore: float = 0.2
    lam: float = 1.0
    lam_schedule: str = "constant"       # constant | ramp
    ramp_start: int = 0
    ramp_end: int = 10
    q: float | None = None               # top-q percent for multi-selection at evaluation
    sparsity: float = 20.0
    max_spans: int = 10
    constraint_weight: float = 1.0
    baseline_momentum: float = 0.9
    granularity: str = "sentence"
    skew_epochs: int = 0
    skew_unit: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.granularity not in ("sentence", "token"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.lam_schedule not in ("constant", "ramp"):
            raise ValueError(f"unknown lambda schedule {self.lam_schedule!r}")
        for name in ("lr_main", "lr_policy"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lr_generator is not None and not self.lr_generator >= 0:
            raise ValueError("lr_generator must be non-negative")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0 < self.sparsity <= 100:
            raise ValueError("sparsity target must lie in (0, 100]")
        if not 0.0 <= self.explore <= 1.0:
            raise ValueError("explore must lie in [0, 1]")
        if self.q is not None and not 0 < self.q <= 100:
            raise ValueError("q must lie in (0, 100]")
        if self.epochs < 0 or self.batch_size < 1 or self.skew_epochs < 0:
            raise ValueError("epochs, skew_epochs must be >= 0 and batch_size >= 1")
        if self.lam_schedule == "ramp" and self.ramp_end <= self.ramp_start:
            raise ValueError("ramp_end must exceed ramp_start")

    def to_dict(self) -> dict:
        return asdict(self)


def lambda_schedule(cfg: TrainConfig, epoch: int) -> float:
    """lambda in force during ``epoch`` (1-based); the ramp is linear and clamped."""
    if cfg.lam_schedule == "constant":
        return cfg.lam
    frac = (epoch - cfg.ramp_start) / (cfg.ramp_end - cfg.ramp_start)
    return cfg.lam * min(1.0, max(0.0, frac))


# -- losses ----------------------------------------------------------------

def loss_rationale(p_r: Tensor, labels) -> Tensor:
    return ag.mean(ag.cross_entropy(p_r, labels))


loss_attention = loss_rationale


def loss_js(p_r: Tensor, p_a: Tensor) -> Tensor:
    return ag.mean(ag.js_divergence(p_r, p_a))


def _hinge(x: Tensor) -> Tensor:
    return x * Tensor((x.data > 0).astype(np.float64))


def sparsity_continuity_penalty(sel, sparsity: float = 20.0, max_spans: int = 10,
                                weight: float = 1.0):
    """weight*max(0, frac - s/100) + weight*max(0, spans - max_spans)/T per row.

    ``sel`` is a hard 0/1 mask or per-token selection probabilities, shape
    (T,) or (B, T). With probabilities the span count is its expectation,
    p_1 + sum_t p_t (1 - p_{t-1}), which is exact for hard masks. numpy input
    gives numpy output; a Tensor gives a differentiable Tensor.
    """
    if isinstance(sel, Tensor):
        x = sel if sel.ndim == 2 else ag.reshape(sel, (1, sel.shape[0]))
        t = x.shape[1]
        frac = ag.mean(x, axis=1)
        first = x[:, 0]
        if t > 1:
            starts = x[:, 1:] * (1.0 - x[:, :-1])
            spans = first + ag.sum_(starts, axis=1)
        else:
            spans = first
        pen = weight * _hinge(frac - sparsity / 100.0) + (weight / t) * _hinge(spans - float(max_spans))
        return pen if sel.ndim == 2 else ag.reshape(pen, ())
    x = np.asarray(sel, dtype=np.float64)
    t = x.shape[-1]
    frac = x.mean(axis=-1)
    spans = x[..., 0] + (x[..., 1:] * (1.0 - x[..., :-1])).sum(axis=-1)
    return (weight * np.maximum(0.0, frac - sparsity / 100.0)
            + weight * np.maximum(0.0, spans - max_spans) / t)


def _penalty(cfg: TrainConfig, sel):
    return sparsity_continuity_penalty(sel, cfg.sparsity, cfg.max_spans, cfg.constraint_weight)


def log_prob(probs: Tensor, mask: np.ndarray, granularity: str) -> Tensor:
    """log pi(M | X) per row under the unmixed distribution."""
    if granularity == "token":
        on = ag.log(probs) * Tensor(mask)
        off = ag.log(1.0 - probs) * Tensor(1.0 - mask)
        return ag.sum_(on + off, axis=1)
    return ag.log(ag.sum_(probs * Tensor(mask), axis=1))


def reinforce_surrogate(logp: Tensor, cost: np.ndarray, baseline: float) -> Tensor:
    """Mean of (cost - b) * log pi; its gradient is the REINFORCE estimate."""
    return ag.mean(logp * Tensor(np.asarray(cost, dtype=np.float64) - baseline))


# -- steps -----------------------------------------------------------------

@dataclass
class StepStats:
    loss_r: float = float("nan")
    loss_a: float = float("nan")
    loss_js: float = float("nan")
    penalty: float = 0.0
    skipped: bool = False
    nonfinite_grads: int = 0


@dataclass
class GameState:
    """Everything mutable during training besides the parameters."""
    opt_pred: Optimizer
    opt_gen: Optimizer
    rng: np.random.Generator
    baseline: float = 0.0
    skipped_batches: int = 0
    saturation: int = 0


def new_state(system: RationaleSystem, cfg: TrainConfig, rng: np.random.Generator) -> GameState:
    gen_lr = cfg.lr_policy if cfg.mode == "rnp" else (cfg.lr_generator or cfg.lr_main)
    return GameState(Adam(system.predictor_params(), lr=cfg.lr_main),
                     Adam(system.generator_params(), lr=gen_lr), rng)


def _finite(*vals) -> bool:
    return all(np.all(np.isfinite(v)) for v in vals)


def rnp_step(system: RationaleSystem, batch: Batch, cfg: TrainConfig, state: GameState) -> StepStats:
    lay = batch.layout
    with Tape() as tape:
        probs = system.generator.forward(batch.ids, lay)
        mask = sample_mask(probs.data, state.rng, cfg.explore, lay.granularity)
        p_r = system.f_r.rationale(apply_mask(batch.ids, mask, lay), lay, mask)
        ce = ag.cross_entropy(p_r, batch.labels)
        loss_r = ag.mean(ce)
        cost = ce.data.copy()
        pen = 0.0
        if lay.granularity == "token":
            hard = _penalty(cfg, mask)
            cost += hard
            pen = float(hard.mean())
        surrogate = reinforce_surrogate(log_prob(probs, mask, lay.granularity), cost, state.baseline)
    stats = StepStats(loss_r=float(loss_r.data), penalty=pen)
    if not _finite(loss_r.data, surrogate.data):
        state.skipped_batches += 1
        stats.skipped = True
        return stats
    g_pred = tape.backward(loss_r, system.f_r_params())
    g_gen = tape.backward(surrogate, system.generator_params())
    stats.nonfinite_grads = state.opt_pred.step(g_pred) + state.opt_gen.step(g_gen)
    m = cfg.baseline_momentum
    state.baseline = m * state.baseline + (1.0 - m) * float(cost.mean())
    return stats


def a2r_forward(system: RationaleSystem, batch: Batch, cfg: TrainConfig, rng, lam: float):
    """One A2R forward pass; returns (tape, terms). ``terms['total']`` is the objective.

    The JS term appears twice, each copy differentiable through one
    predictor only. f_r sees a mask drawn with numpy, so no gradient reaches
    the generator from L_r.
    """
    lay = batch.layout
    tape = Tape()
    with tape:
        alpha = system.generator.forward(batch.ids, lay)
        mask = sample_mask(alpha.data, rng, cfg.explore, lay.granularity)
        p_r = system.f_r.rationale(apply_mask(batch.ids, mask, lay), lay, mask)
        p_a = system.f_a.attention(batch.ids, lay, alpha)
        l_r = loss_rationale(p_r, batch.labels)
        l_a = loss_attention(p_a, batch.labels)
        js_r = loss_js(p_r, ag.stop_gradient(p_a))
        js_a = loss_js(ag.stop_gradient(p_r), p_a)
        total = l_r + lam * js_r + l_a + lam * js_a
        pen = None
        if lay.granularity == "token":
            pen = ag.mean(_penalty(cfg, alpha))
            total = total + pen
    terms = dict(alpha=alpha, mask=mask, p_r=p_r, p_a=p_a, l_r=l_r, l_a=l_a,
                 js_r=js_r, js_a=js_a, penalty=pen, total=total)
    return tape, terms


def a2r_step(system: RationaleSystem, batch: Batch, cfg: TrainConfig, state: GameState,
             lam: float) -> StepStats:
    tape, t = a2r_forward(system, batch, cfg, state.rng, lam)
    stats = StepStats(loss_r=float(t["l_r"].data), loss_a=float(t["l_a"].data),
                      loss_js=float(t["js_a"].data),
                      penalty=0.0 if t["penalty"] is None else float(t["penalty"].data))
    if not _finite(t["total"].data):
        state.skipped_batches += 1
        stats.skipped = True
        return stats
    grads = tape.backward(t["total"], system.params())
    stats.nonfinite_grads = state.opt_pred.step(grads) + state.opt_gen.step(grads)
    return stats


def attention_forward(system: RationaleSystem, batch: Batch, cfg: TrainConfig):
    lay = batch.layout
    tape = Tape()
    with tape:
        alpha = system.generator.forward(batch.ids, lay)
        p_a = system.f_a.attention(batch.ids, lay, alpha)
        l_a = loss_attention(p_a, batch.labels)
        total = l_a
        pen = None
        if lay.granularity == "token":
            pen = ag.mean(_penalty(cfg, alpha))
            total = total + pen
    return tape, dict(alpha=alpha, p_a=p_a, l_a=l_a, penalty=pen, total=total)


def attention_step(system: RationaleSystem, batch: Batch, cfg: TrainConfig,
                   state: GameState) -> StepStats:
    """The soft attention system alone: generator and f_a on L_a."""
    tape, t = attention_forward(system, batch, cfg)
    stats = StepStats(loss_a=float(t["l_a"].data))
    if not _finite(t["total"].data):
        state.skipped_batches += 1
        stats.skipped = True
        return stats
    grads = tape.backward(t["total"], system.params())
    stats.nonfinite_grads = state.opt_pred.step(grads) + state.opt_gen.step(grads)
    return stats


# -- skew pre-training -----------------------------------------------------

def rationale_loss_fixed(system: RationaleSystem, examples: list[Example], unit: int,
                         granularity: str = "sentence", batch_size: int = 256) -> float:
    """Mean f_r cross-entropy when every example shows only ``unit``."""
    total, n = 0.0, 0
    with no_grad(), warnings.catch_warnings():
        warnings.simplefilter("ignore", SaturationWarning)
        for b in make_batches(examples, batch_size, granularity):
            mask = np.zeros((len(b), b.layout.num_units))
            mask[:, unit] = 1.0
            p = system.f_r.rationale(apply_mask(b.ids, mask, b.layout), b.layout, mask)
            total += float(ag.cross_entropy(p, b.labels).data.sum())
            n += len(b)
    return total / n


def skew_pretrain(system: RationaleSystem, examples: list[Example], k: int, cfg: TrainConfig,
                  rng: np.random.Generator, unit: int | None = None) -> None:
    """Train f_r for ``k`` epochs on inputs showing only ``unit``; the generator is untouched."""
    if k < 0:
        raise ValueError("k must be non-negative")
    if cfg.granularity != "sentence":
        raise ValueError("skew pre-training needs sentence granularity")
    unit = cfg.skew_unit if unit is None else unit
    if k == 0:
        return
    opt = Adam(system.f_r_params(), lr=cfg.lr_main)
    for _ in range(k):
        for b in make_batches(examples, cfg.batch_size, "sentence", rng):
            if unit >= b.layout.num_units:
                raise ValueError(f"unit {unit} out of range for {b.layout.num_units} units")
            mask = np.zeros((len(b), b.layout.num_units))
            mask[:, unit] = 1.0
            with Tape() as tape:
                p = system.f_r.rationale(apply_mask(b.ids, mask, b.layout), b.layout, mask)
                loss = loss_rationale(p, b.labels)
            if np.isfinite(loss.data):
                opt.step(tape.backward(loss, system.f_r_params()))


# -- evaluation ------------------------------------------------------------

@dataclass
class Predictions:
    labels: np.ndarray
    predicted: np.ndarray
    unit_masks: list[np.ndarray]
    token_masks: list[np.ndarray]


def select(dist: np.ndarray, granularity: str, q: float | None, sparsity: float) -> np.ndarray:
    """Deterministic selection: argmax (single) or top-q (multi / token)."""
    if granularity == "token":
        return topq_mask(dist, q if q is not None else sparsity)
    if q is not None:
        return topq_mask(dist, q)
    return argmax_mask(dist)


def predict(system: RationaleSystem, examples: list[Example], cfg: TrainConfig,
            batch_size: int = 256) -> Predictions:
    if not examples:
        raise ValueError("cannot evaluate an empty set")
    n = len(examples)
    predicted = np.zeros(n, dtype=np.int64)
    unit_masks: list = [None] * n
    token_masks: list = [None] * n
    with no_grad(), warnings.catch_warnings():
        warnings.simplefilter("ignore", SaturationWarning)
        for b in make_batches(examples, batch_size, cfg.granularity):
            lay = b.layout
            dist = system.generator.forward(b.ids, lay).data
            mask = select(dist, lay.granularity, cfg.q, cfg.sparsity)
            if system.f_r is not None:
                p = system.f_r.rationale(apply_mask(b.ids, mask, lay), lay, mask)
            else:
                p = system.f_a.attention(b.ids, lay, dist)
            pred = p.data.argmax(axis=1)
            tok = mask[:, lay.unit_of_token]
            for j, i in enumerate(b.index):
                predicted[i] = pred[j]
                unit_masks[i] = mask[j]
                token_masks[i] = tok[j]
    labels = np.array([e.label for e in examples])
    return Predictions(labels, predicted, unit_masks, token_masks)


def evaluate(system: RationaleSystem, examples: list[Example], cfg: TrainConfig) -> MetricsReport:
    pr = predict(system, examples, cfg)
    first = []
    for ex, tm in zip(examples, pr.token_masks):
        s, e = ex.bounds()[0]
        first.append(bool(np.any(np.asarray(tm)[s:e] > 0)))
    unit_masks = pr.unit_masks if cfg.granularity == "sentence" else None
    return summarize(pr.labels, pr.predicted, [m > 0 for m in pr.token_masks],
                     [ex.gold_mask() for ex in examples], first, unit_masks)


# -- loop ------------------------------------------------------------------

@dataclass
class TrainResult:
    system: RationaleSystem
    trajectory: list[dict]
    best_epoch: int
    final_params: list[np.ndarray]
    skipped_batches: int = 0
    nonfinite_grads: int = 0
    skew_gap: float | None = None
    extras: dict = field(default_factory=dict)


def build_system(cfg: TrainConfig, model_cfg: ModelConfig, vocab_size: int) -> RationaleSystem:
    return RationaleSystem(cfg.mode, vocab_size, model_cfg, cfg.seed)


def train(splits: Splits, cfg: TrainConfig, model_cfg: ModelConfig,
          system: RationaleSystem | None = None, on_epoch=None) -> TrainResult:
    """Run ``cfg.epochs`` epochs; restores the best-dev-accuracy parameters (ties: earlier)."""
    if not splits.train or not splits.dev:
        raise TrainError("train and dev splits must be non-empty")
    if system is None:
        system = build_system(cfg, model_cfg, len(splits.vocab))
    streams = np.random.SeedSequence([cfg.seed, 1]).spawn(2)
    skew_rng = np.random.default_rng(streams[0])
    state = new_state(system, cfg, np.random.default_rng(streams[1]))
    skew_gap, unit_losses = None, []
    if cfg.skew_epochs:
        if system.f_r is None:
            raise TrainError("skew pre-training needs a rationale predictor")
        skew_pretrain(system, splits.train, cfg.skew_epochs, cfg, skew_rng)
        units = range(splits.dev[0].num_units)
        unit_losses = [rationale_loss_fixed(system, splits.dev, u) for u in units]
        others = [v for u, v in enumerate(unit_losses) if u != cfg.skew_unit]
        # positive: f_r now prefers the skewed unit over every other one
        skew_gap = min(others) - unit_losses[cfg.skew_unit] if others else 0.0
    trajectory = []
    best_acc, best_epoch, best_params = -1.0, 0, system.snapshot()
    nonfinite = 0
    for epoch in range(1, cfg.epochs + 1):
        lam = lambda_schedule(cfg, epoch)
        sums = {"loss_r": [], "loss_a": [], "loss_js": []}
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", SaturationWarning)
            for batch in make_batches(splits.train, cfg.batch_size, cfg.granularity, state.rng):
                if cfg.mode == "rnp":
                    st = rnp_step(system, batch, cfg, state)
                elif cfg.mode == "a2r":
                    st = a2r_step(system, batch, cfg, state, lam)
                else:
                    st = attention_step(system, batch, cfg, state)
                nonfinite += st.nonfinite_grads
                for k in sums:
                    sums[k].append(getattr(st, k))
        state.saturation += sum(1 for w in caught if issubclass(w.category, SaturationWarning))
        dev = evaluate(system, splits.dev, cfg)
        row = {"epoch": epoch}
        for k, v in sums.items():
            row[k] = float(np.mean(v)) if v and not np.all(np.isnan(v)) else float("nan")
        row.update(dev_acc=dev.accuracy, dev_f1=dev.f1, x1_pct=dev.x1_pct, **{"lambda": lam})
        trajectory.append(row)
        if on_epoch is not None:
            on_epoch(row, system)
        if dev.accuracy > best_acc:
            best_acc, best_epoch, best_params = dev.accuracy, epoch, system.snapshot()
    final = system.snapshot()
    system.restore(best_params)
    return TrainResult(system, trajectory, best_epoch, final, state.skipped_batches, nonfinite,
                       skew_gap, {"saturation_warnings": state.saturation,
                                  "baseline": state.baseline,
                                  "skew_unit_losses": unit_losses})

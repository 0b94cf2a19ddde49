"""Generator, rationale predictor f_r and attention predictor f_a, plus masking and selection."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from ratlab import autograd as ag
from ratlab.autograd import Tensor
from ratlab.data import Example
from ratlab.vocab import MASKED, Vocab

GRANULARITIES = ("sentence", "token")


class MaskError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_emb: int = 64
    hidden: int = 32            # per direction
    encoder: str = "gru"        # gru | mean
    head: str = "linear"        # linear | mlp
    head_hidden: int = 32
    num_classes: int = 2
    r_pooling: str = "max"      # max | mean
    share_generator_encoder: bool = False
    init_scale: float = 0.1

    def __post_init__(self):
        if self.encoder not in ("gru", "mean"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.head not in ("linear", "mlp"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.r_pooling not in ("max", "mean"):
            raise ValueError(f"unknown pooling {self.r_pooling!r}")
        if min(self.d_emb, self.hidden, self.head_hidden) < 1 or self.num_classes < 2:
            raise ValueError("dimensions must be positive and num_classes >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


def _param(data, name) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Parameters in declaration order; submodules contribute theirs in turn."""

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((key, val))
            elif isinstance(val, Module):
                out.extend((f"{key}.{n}", t) for n, t in val.named_params())
        return out

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]


# -- layout / batching ------------------------------------------------

class Layout:
    """Segment structure shared by every example in a batch."""

    def __init__(self, length: int, starts, granularity: str = "sentence"):
        if granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {granularity!r}")
        if length < 1:
            raise MaskError("empty sequence")
        self.length = length
        self.granularity = granularity
        starts = list(range(length)) if granularity == "token" else list(starts)
        self.starts = starts
        ends = starts[1:] + [length]
        self.bounds = list(zip(starts, ends))
        self.unit_of_token = np.empty(length, dtype=np.int64)
        self.pool = np.zeros((len(starts), length))
        for u, (s, e) in enumerate(self.bounds):
            self.unit_of_token[s:e] = u
            self.pool[u, s:e] = 1.0 / (e - s)

    @property
    def num_units(self) -> int:
        return len(self.starts)

    @classmethod
    def of(cls, ex: Example, granularity: str = "sentence") -> "Layout":
        return cls(len(ex.tokens), ex.segments, granularity)

    def key(self):
        return (self.length, tuple(self.starts), self.granularity)


@dataclass
class Batch:
    ids: np.ndarray          # (B, L) int
    labels: np.ndarray       # (B,)
    layout: Layout
    examples: list[Example]
    index: np.ndarray        # positions in the source list

    def __len__(self):
        return len(self.examples)


def make_batches(examples: list[Example], batch_size: int, granularity: str = "sentence",
                 rng: np.random.Generator | None = None) -> list[Batch]:
    """Group examples with identical layout, then cut into batches.

    With ``rng`` the example order and batch order are shuffled; without it
    the order is deterministic (source order within layout groups).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = np.arange(len(examples)) if rng is None else rng.permutation(len(examples))
    groups: dict[tuple, list[int]] = {}
    for i in order:
        ex = examples[int(i)]
        key = (len(ex.tokens), tuple(ex.segments))
        groups.setdefault(key, []).append(int(i))
    batches = []
    for (length, starts), idx in groups.items():
        layout = Layout(length, list(starts), granularity)
        for k in range(0, len(idx), batch_size):
            chunk = idx[k:k + batch_size]
            exs = [examples[i] for i in chunk]
            batches.append(Batch(np.array([e.tokens for e in exs], dtype=np.int64),
                                 np.array([e.label for e in exs], dtype=np.int64),
                                 layout, exs, np.array(chunk)))
    if rng is not None:
        batches = [batches[int(i)] for i in rng.permutation(len(batches))]
    return batches


# -- masks ------------------------------------------------------------

def apply_mask(ids: np.ndarray, mask: np.ndarray, layout: Layout) -> np.ndarray:
    """Replace tokens of unselected units by MASKED. ``mask`` is (B, U) or (U,)."""
    mask = np.asarray(mask)
    ids = np.asarray(ids)
    if mask.shape[-1] != layout.num_units:
        raise MaskError(f"mask has {mask.shape[-1]} units, layout has {layout.num_units}")
    keep = mask[..., layout.unit_of_token] > 0
    return np.where(keep, ids, MASKED)


def sample_mask(dist: np.ndarray, rng: np.random.Generator, explore: float = 0.0,
                granularity: str = "sentence") -> np.ndarray:
    """Draw from ``(1-explore)*dist + explore*uniform`` (sentence) or Bernoulli (token).

    ``dist`` is (U,) or (B, U); returns a float 0/1 array of the same shape.
    """
    if not 0.0 <= explore <= 1.0:
        raise ValueError("explore must lie in [0, 1]")
    dist = np.asarray(dist, dtype=np.float64)
    single = dist.ndim == 1
    d = dist[None] if single else dist
    if granularity == "token":
        probs = (1.0 - explore) * d + explore * 0.5
        out = (rng.random(d.shape) < probs).astype(np.float64)
    else:
        mixed = (1.0 - explore) * d + explore / d.shape[1]
        cdf = np.cumsum(mixed, axis=1)
        cdf[:, -1] = np.inf
        u = rng.random(d.shape[0])[:, None]
        pick = (u >= cdf).sum(axis=1)
        out = np.zeros_like(d)
        out[np.arange(d.shape[0]), pick] = 1.0
    return out[0] if single else out


def topq_k(q: float, num_units: int) -> int:
    """max(1, round(q*T/100)) with halves rounded up."""
    if not 0.0 < q <= 100.0:
        raise ValueError("q must lie in (0, 100]")
    return max(1, int(np.floor(q * num_units / 100.0 + 0.5)))


def topq_mask(dist: np.ndarray, q: float) -> np.ndarray:
    """Keep the k largest weights; ties go to the lower index."""
    dist = np.asarray(dist, dtype=np.float64)
    single = dist.ndim == 1
    d = dist[None] if single else dist
    k = topq_k(q, d.shape[1])
    order = np.argsort(-d, axis=1, kind="stable")[:, :k]
    out = np.zeros_like(d)
    np.put_along_axis(out, order, 1.0, axis=1)
    return out[0] if single else out


def argmax_mask(dist: np.ndarray) -> np.ndarray:
    dist = np.asarray(dist, dtype=np.float64)
    out = np.zeros_like(dist)
    np.put_along_axis(out, np.expand_dims(dist.argmax(axis=-1), -1), 1.0, axis=-1)
    return out


def count_spans(mask: np.ndarray) -> np.ndarray:
    """Number of maximal runs of selected positions along the last axis."""
    m = np.asarray(mask) > 0
    starts = m.copy()
    starts[..., 1:] &= ~m[..., :-1]
    return starts.sum(axis=-1)


# -- building blocks ----------------------------------------------------

class Linear(Module):
    def __init__(self, rng, d_in, d_out, name):
        self.W = _param(_uniform(rng, (d_in, d_out), d_in), f"{name}.W")
        self.b = _param(np.zeros(d_out), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b


class Head(Module):
    def __init__(self, rng, d_in, d_out, cfg: ModelConfig, name):
        self.kind = cfg.head
        if cfg.head == "mlp":
            self.hid = Linear(rng, d_in, cfg.head_hidden, f"{name}.hid")
            self.out = Linear(rng, cfg.head_hidden, d_out, f"{name}.out")
        else:
            self.out = Linear(rng, d_in, d_out, f"{name}.out")

    def __call__(self, x: Tensor) -> Tensor:
        if self.kind == "mlp":
            x = ag.tanh(self.hid(x))
        return self.out(x)


class GRUDirection(Module):
    def __init__(self, rng, d_in, hidden, name):
        self.W = _param(_uniform(rng, (d_in, 3 * hidden), hidden), f"{name}.W")
        self.U = _param(_uniform(rng, (hidden, 3 * hidden), hidden), f"{name}.U")
        self.b = _param(np.zeros(3 * hidden), f"{name}.b")

    def __call__(self, x: Tensor, reverse: bool) -> Tensor:
        return ag.gru_scan(x @ self.W + self.b, self.U, reverse=reverse)


class Encoder(Module):
    """Embedding table plus a bidirectional GRU, or the embeddings alone (``mean``).

    ``forward`` returns per-token states (B, L, D); segment pooling happens
    in the callers.
    """

    def __init__(self, rng, vocab_size, cfg: ModelConfig, name="enc"):
        self.kind = cfg.encoder
        self.emb = _param(rng.normal(0.0, cfg.init_scale, size=(vocab_size, cfg.d_emb)), f"{name}.emb")
        if cfg.encoder == "gru":
            self.fw = GRUDirection(rng, cfg.d_emb, cfg.hidden, f"{name}.fw")
            self.bw = GRUDirection(rng, cfg.d_emb, cfg.hidden, f"{name}.bw")
            self.out_dim = 2 * cfg.hidden
        else:
            self.out_dim = cfg.d_emb

    def forward(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] == 0:
            raise MaskError("cannot encode an empty sequence")
        x = ag.embedding(self.emb, ids)
        if self.kind == "mean":
            return x
        return ag.concat([self.fw(x, False), self.bw(x, True)], axis=-1)


def unit_reps(states: Tensor, layout: Layout) -> Tensor:
    """Mean of token states inside each unit: (B, L, D) -> (B, U, D)."""
    return Tensor(layout.pool) @ states


def weighted_pool(reps: Tensor, weights) -> Tensor:
    """sum_u w_u * rep_u: (B, U, D) with (B, U) weights -> (B, D)."""
    w = weights if isinstance(weights, Tensor) else Tensor(weights)
    b, u = w.shape
    out = ag.reshape(w, (b, 1, u)) @ reps
    return ag.reshape(out, (b, reps.shape[2]))


# -- the three players ---------------------------------------------------

class Generator(Module):
    """Scores each selectable unit: softmax over units (sentence) or per-unit sigmoid (token)."""

    def __init__(self, rng, encoder: Encoder, cfg: ModelConfig, own_encoder: bool):
        if own_encoder:
            self.encoder = encoder
        else:
            self._shared = encoder
        self.score = Linear(rng, encoder.out_dim, 1, "gen.score")

    @property
    def enc(self) -> Encoder:
        return self.__dict__.get("encoder") or self.__dict__["_shared"]

    def logits(self, ids, layout: Layout) -> Tensor:
        reps = unit_reps(self.enc.forward(ids), layout)
        s = self.score(reps)
        return ag.reshape(s, s.shape[:2])

    def forward(self, ids, layout: Layout) -> Tensor:
        z = self.logits(ids, layout)
        if layout.granularity == "token":
            return ag.sigmoid(z)
        return ag.softmax(z, axis=-1)


class Predictor(Module):
    """Class distribution from either a masked input (f_r) or alpha-weighted units (f_a)."""

    def __init__(self, rng, encoder: Encoder, cfg: ModelConfig, name: str, own_encoder: bool,
                 pooling: str):
        if own_encoder:
            self.encoder = encoder
        else:
            self._shared = encoder
        self.pooling = pooling
        self.head = Head(rng, encoder.out_dim, cfg.num_classes, cfg, f"{name}.head")

    @property
    def enc(self) -> Encoder:
        return self.__dict__.get("encoder") or self.__dict__["_shared"]

    def rationale(self, masked_ids, layout: Layout, mask) -> Tensor:
        """f_r on ``apply_mask`` output. Mean pooling averages the selected units only."""
        states = self.enc.forward(masked_ids)
        if self.pooling == "max":
            pooled = ag.max_pool(states, axis=1)
        else:
            m = np.asarray(mask, dtype=np.float64)
            m = m[None] if m.ndim == 1 else m
            total = m.sum(axis=1, keepdims=True)
            w = np.divide(m, total, out=np.zeros_like(m), where=total > 0)
            pooled = weighted_pool(unit_reps(states, layout), w)
        return ag.softmax(self.head(pooled), axis=-1)

    def attention(self, ids, layout: Layout, alpha) -> Tensor:
        """f_a: full input, units weighted by alpha (normalised to sum 1 in token mode)."""
        a = alpha if isinstance(alpha, Tensor) else Tensor(alpha)
        if a.ndim == 1:
            a = ag.reshape(a, (1, a.shape[0]))
        if layout.granularity == "token":
            total = ag.sum_(a, axis=1, keepdims=True)
            a = a / total
        pooled = weighted_pool(unit_reps(self.enc.forward(ids), layout), a)
        return ag.softmax(self.head(pooled), axis=-1)


class RationaleSystem(Module):
    """Generator plus predictors. ``f_a`` exists for A2R and the attention-only system.

    In A2R, f_r and f_a share one encoder and keep separate heads.
    """

    def __init__(self, mode: str, vocab_size: int, cfg: ModelConfig, seed: int):
        if mode not in ("rnp", "a2r", "attention"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "a2r" and cfg.share_generator_encoder:
            # L_r would reach the generator through the shared encoder
            raise ValueError("a2r needs a generator encoder separate from the predictors")
        self.mode = mode
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.pred_encoder = Encoder(rng, vocab_size, cfg, "pred")
        if cfg.share_generator_encoder:
            gen_enc, own = self.pred_encoder, False
        else:
            gen_enc, own = Encoder(rng, vocab_size, cfg, "gen"), True
        self.generator = Generator(rng, gen_enc, cfg, own)
        self.f_r = Predictor(rng, self.pred_encoder, cfg, "f_r", False, cfg.r_pooling) \
            if mode in ("rnp", "a2r") else None
        self.f_a = Predictor(rng, self.pred_encoder, cfg, "f_a", False, "mean") \
            if mode in ("a2r", "attention") else None

    def named_params(self):
        out, seen = [], set()
        for name, t in super().named_params():
            if id(t) not in seen:
                seen.add(id(t))
                out.append((name, t))
        return out

    def generator_params(self) -> list[Tensor]:
        return self.generator.params()

    def predictor_params(self) -> list[Tensor]:
        gen = {id(t) for t in self.generator_params()}
        return [t for t in self.params() if id(t) not in gen]

    def f_r_params(self) -> list[Tensor]:
        return [] if self.f_r is None else self.pred_encoder.params() + self.f_r.head.params()

    def snapshot(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self.params()]

    def restore(self, arrays) -> None:
        for t, a in zip(self.params(), arrays):
            t.data[...] = a


def load_embeddings(path, vocab: Vocab, table: Tensor, grow: bool = False) -> int:
    """Copy ``token v1 ... vd`` rows into ``table``; returns rows loaded.

    Tokens absent from ``vocab`` are skipped unless ``grow`` (then the table
    must already have room). Rows of other tokens keep their random init.
    """
    d = table.shape[1]
    loaded = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            tok, vals = parts[0], parts[1:]
            if len(vals) != d:
                raise ValueError(f"line {lineno}: expected {d} values, got {len(vals)}")
            if tok not in vocab:
                if not grow:
                    continue
                vocab.add(tok)
            idx = vocab.stoi[tok]
            if idx >= table.shape[0]:
                continue
            table.data[idx] = np.array([float(v) for v in vals])
            loaded += 1
    return loaded

"""Datasets: the synthetic cue/filler corpus, bias injection and JSONL I/O."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from ratlab.theory import DiscreteJoint
from ratlab.vocab import Vocab


class DataError(ValueError):
    pass


@dataclass
class Example:
    tokens: list[int]
    segments: list[int]
    label: int
    gold_spans: list[tuple[int, int]] | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.tokens = [int(t) for t in self.tokens]
        self.segments = [int(s) for s in self.segments]
        n = len(self.tokens)
        if n == 0:
            raise DataError("empty token sequence")
        if not self.segments or self.segments[0] != 0:
            raise DataError("segment boundaries must start at 0")
        if any(b <= a for a, b in zip(self.segments, self.segments[1:])) or self.segments[-1] >= n:
            raise DataError("segment boundaries must be strictly increasing and inside the sequence")
        if self.gold_spans is not None:
            spans = sorted((int(s), int(e)) for s, e in self.gold_spans)
            for s, e in spans:
                if not 0 <= s < e <= n:
                    raise DataError(f"span [{s},{e}) out of bounds")
            if any(b[0] < a[1] for a, b in zip(spans, spans[1:])):
                raise DataError("overlapping spans")
            self.gold_spans = spans

    @property
    def num_units(self) -> int:
        return len(self.segments)

    def bounds(self) -> list[tuple[int, int]]:
        ends = self.segments[1:] + [len(self.tokens)]
        return list(zip(self.segments, ends))

    def gold_mask(self) -> np.ndarray | None:
        if self.gold_spans is None:
            return None
        m = np.zeros(len(self.tokens), dtype=bool)
        for s, e in self.gold_spans:
            m[s:e] = True
        return m

    def as_tokens(self) -> "Example":
        """Same example with every token as its own selectable unit."""
        return Example(self.tokens, list(range(len(self.tokens))), self.label,
                       self.gold_spans, dict(self.meta))


@dataclass
class Splits:
    train: list[Example]
    dev: list[Example]
    test: list[Example]
    vocab: Vocab

    def items(self):
        return (("train", self.train), ("dev", self.dev), ("test", self.test))


# -- synthetic corpus ------------------------------------------------------

@dataclass
class SynthSpec:
    """Layout of the synthetic corpus.

    Each example has one sentence per slot. Sentence t holds one cue word that
    agrees with the label with probability ``predictiveness[t]``, padded with
    filler words, and closed by ``separator`` (None for no separator).
    ``cue_words`` synonyms exist per polarity per slot. With ``chain_cues`` the
    positive words of slot t are the negative words of slot t-1 (a word whose
    meaning depends on where it appears); otherwise cue words are disjoint.
    """
    predictiveness: list[float] = field(default_factory=lambda: [1.0, 0.8])
    n_train: int = 2000
    n_dev: int = 500
    n_test: int = 500
    sentence_len: int = 4
    cue_words: int | list[int] = 1
    filler_words: int = 6
    shared_fillers: bool = False
    chain_cues: bool = False
    separator: str | None = "."
    gold: int | None = None
    seed: int = 0

    def __post_init__(self):
        p = [float(x) for x in self.predictiveness]
        self.predictiveness = p
        if not p or any(not 0.5 <= x <= 1.0 for x in p):
            raise DataError("predictiveness values must lie in [0.5, 1]")
        if self.gold is None:
            self.gold = int(np.argmax(p))
        if not 0 <= self.gold < len(p) or p[self.gold] != max(p):
            raise DataError("the gold slot must be a most-predictive slot")
        if isinstance(self.cue_words, (list, tuple)):
            if len(self.cue_words) != len(p):
                raise DataError("cue_words needs one entry per slot")
            self.cue_words = [int(c) for c in self.cue_words]
        if self.sentence_len < 1 or min(self.words_per_slot()) < 1:
            raise DataError("sentence_len and cue_words must be positive")
        if self.sentence_len > 1 and self.filler_words < 1:
            raise DataError("filler_words must be positive when sentences have fillers")

    @property
    def num_slots(self) -> int:
        return len(self.predictiveness)

    def words_per_slot(self) -> list[int]:
        if isinstance(self.cue_words, list):
            return list(self.cue_words)
        return [int(self.cue_words)] * len(self.predictiveness)

    def cue_lexicon(self) -> list[tuple[list[str], list[str]]]:
        """Per slot: (words meaning Y=1, words meaning Y=0)."""
        out = []
        for t, m in enumerate(self.words_per_slot()):
            if self.chain_cues and t > 0:
                m = len(out[t - 1][1])
            neg = [f"c{t}n{k}" for k in range(m)]
            if self.chain_cues and t > 0:
                pos = out[t - 1][1]
            else:
                pos = [f"c{t}p{k}" for k in range(m)]
            out.append((pos, neg))
        return out

    def fillers(self, slot: int) -> list[str]:
        tag = "f" if self.shared_fillers else f"f{slot}_"
        return [f"{tag}{k}" for k in range(self.filler_words)]


def _gen_split(spec: SynthSpec, n: int, rng: np.random.Generator, vocab: Vocab) -> list[Example]:
    lex = spec.cue_lexicon()
    out = []
    for _ in range(n):
        y = int(rng.integers(2))
        tokens: list[str] = []
        segments = []
        gold = None
        for t, p in enumerate(spec.predictiveness):
            agree = rng.random() < p
            polarity = y if agree else 1 - y
            words = lex[t][0] if polarity == 1 else lex[t][1]
            cue = words[int(rng.integers(len(words)))]
            sent = [cue]
            if spec.sentence_len > 1:
                fill = spec.fillers(t)
                sent = [fill[int(k)] for k in rng.integers(len(fill), size=spec.sentence_len - 1)]
                sent.insert(int(rng.integers(spec.sentence_len)), cue)
            if spec.separator is not None:
                sent.append(spec.separator)
            segments.append(len(tokens))
            if t == spec.gold:
                gold = [(len(tokens), len(tokens) + len(sent))]
            tokens.extend(sent)
        out.append(Example(vocab.encode(tokens), segments, y, gold))
    return out


def gen_synth(spec: SynthSpec, vocab: Vocab | None = None) -> Splits:
    """Draw train/dev/test from independent child streams of ``spec.seed``."""
    vocab = vocab if vocab is not None else Vocab()
    for pos, neg in spec.cue_lexicon():
        vocab.encode(pos + neg)
    for t in range(spec.num_slots):
        if spec.sentence_len > 1:
            vocab.encode(spec.fillers(t))
    if spec.separator is not None:
        vocab.add(spec.separator)
    streams = np.random.SeedSequence(spec.seed).spawn(3)
    sizes = (spec.n_train, spec.n_dev, spec.n_test)
    parts = [_gen_split(spec, n, np.random.default_rng(s), vocab) for n, s in zip(sizes, streams)]
    return Splits(*parts, vocab=vocab)


def to_discrete(spec: SynthSpec) -> DiscreteJoint:
    """Exact joint over (cue_1..cue_T, Y): Y uniform, cues independent given Y.

    Fillers are independent of everything and are marginalised out, so the
    joint covers cue-only sentences exactly and any other layout's cues.
    """
    lex = spec.cue_lexicon()
    alphabets = []
    cond = []  # per slot: P(word | Y) as (|alphabet|, 2)
    for (pos, neg), p in zip(lex, spec.predictiveness):
        alpha = list(dict.fromkeys(pos + neg))
        table = np.zeros((len(alpha), 2))
        for w in pos:
            table[alpha.index(w), 1] += p / len(pos)
            table[alpha.index(w), 0] += (1 - p) / len(pos)
        for w in neg:
            table[alpha.index(w), 0] += p / len(neg)
            table[alpha.index(w), 1] += (1 - p) / len(neg)
        alphabets.append(alpha)
        cond.append(table)
    shape = tuple(len(a) for a in alphabets) + (2,)
    joint = np.zeros(shape)
    for y in (0, 1):
        cell = np.array(0.5)
        for table in cond:
            cell = np.multiply.outer(cell, table[:, y])
        joint[..., y] = cell
    return DiscreteJoint(alphabets, [0, 1], joint)


# -- bias injection ------------------------------------------------------

@dataclass
class BiasSpec:
    alpha: float = 0.8
    positive_token: str = ","
    negative_token: str = "."
    apply_to_test: bool = False

    def __post_init__(self):
        if not 0.5 < self.alpha < 1.0:
            raise DataError("bias strength alpha must lie in (0.5, 1)")


def bias_examples(examples: list[Example], spec: BiasSpec, rng: np.random.Generator,
                  vocab: Vocab) -> list[Example]:
    """Prepend a label-correlated token to the first segment of each example."""
    pos_id, neg_id = vocab.add(spec.positive_token), vocab.add(spec.negative_token)
    out = []
    for ex in examples:
        if ex.label not in (0, 1):
            raise DataError(f"bias injection needs binary labels, got {ex.label}")
        consistent = rng.random() < spec.alpha
        use_pos = (ex.label == 1) == consistent
        tok = pos_id if use_pos else neg_id
        segments = [0] + [s + 1 for s in ex.segments[1:]]
        spans = None if ex.gold_spans is None else [(s + 1, e + 1) for s, e in ex.gold_spans]
        meta = dict(ex.meta, bias_token=vocab.itos[tok])
        out.append(Example([tok] + ex.tokens, segments, ex.label, spans, meta))
    return out


def inject_bias(splits: Splits, spec: BiasSpec, rng: np.random.Generator) -> Splits:
    """Bias train and dev; test only when ``spec.apply_to_test``."""
    train = bias_examples(splits.train, spec, rng, splits.vocab)
    dev = bias_examples(splits.dev, spec, rng, splits.vocab)
    test = bias_examples(splits.test, spec, rng, splits.vocab) if spec.apply_to_test else splits.test
    return Splits(train, dev, test, splits.vocab)


# -- JSONL ---------------------------------------------------------------

@dataclass
class LineError:
    line: int
    message: str


def _segments_from_separator(tokens: list[str], separator: str) -> list[int]:
    starts = [0]
    for i, tok in enumerate(tokens[:-1]):
        if tok == separator:
            starts.append(i + 1)
    return starts


def parse_record(obj, vocab: Vocab, separator: str = ".") -> Example:
    if not isinstance(obj, dict):
        raise DataError("line is not a JSON object")
    for key in ("tokens", "label"):
        if key not in obj:
            raise DataError(f"missing required field '{key}'")
    tokens = obj["tokens"]
    if not isinstance(tokens, list) or not tokens or not all(isinstance(t, str) for t in tokens):
        raise DataError("'tokens' must be a non-empty array of strings")
    label = obj["label"]
    if isinstance(label, bool) or not isinstance(label, int) or label < 0:
        raise DataError("'label' must be a non-negative integer")
    spans = obj.get("rationale_spans")
    if spans is not None:
        if not isinstance(spans, list) or not all(
                isinstance(s, list) and len(s) == 2 and all(isinstance(v, int) for v in s) for s in spans):
            raise DataError("'rationale_spans' must be an array of [start, end] integer pairs")
    segments = obj.get("segments")
    if segments is None:
        segments = _segments_from_separator(tokens, separator)
    elif not isinstance(segments, list) or not all(isinstance(v, int) for v in segments):
        raise DataError("'segments' must be an array of integers")
    ex = Example(vocab.encode(tokens), segments, label,
                 None if spans is None else [tuple(s) for s in spans])
    return ex


def load_jsonl(path, vocab: Vocab | None = None, separator: str = "."
               ) -> tuple[list[Example], list[LineError], Vocab]:
    """Parse a JSONL file; malformed lines are reported, not raised."""
    vocab = vocab if vocab is not None else Vocab()
    examples, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                examples.append(parse_record(json.loads(raw), vocab, separator))
            except json.JSONDecodeError as exc:
                errors.append(LineError(lineno, f"invalid JSON: {exc.msg}"))
            except DataError as exc:
                errors.append(LineError(lineno, str(exc)))
    return examples, errors, vocab


def example_record(ex: Example, vocab: Vocab) -> dict:
    rec = {"tokens": vocab.decode(ex.tokens), "label": ex.label, "segments": ex.segments}
    if ex.gold_spans is not None:
        rec["rationale_spans"] = [list(s) for s in ex.gold_spans]
    return rec


def write_jsonl(path, examples: list[Example], vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_record(ex, vocab)) + "\n")


def spec_dict(spec) -> dict:
    return asdict(spec)


def fingerprint(examples: list[Example]) -> str:
    h = hashlib.sha256()
    for ex in examples:
        h.update(json.dumps([ex.tokens, ex.segments, ex.label, ex.gold_spans]).encode())
    return h.hexdigest()

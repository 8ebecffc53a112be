"""Synthetic sequence-to-sequence tasks, preprocessing and batching.

Three tasks are available. ``copy`` and ``reverse`` are deterministic.
``synonym`` maps every source symbol to a concept with ``m`` equally likely
target synonyms, chosen independently per position, so the exact
conditional entropy of a target with ``L`` content tokens is ``L log m``.

Every source and raw target ends with EOS; targets are then padded with
extra EOS tokens up to a multiple of 4.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, EmptyDatasetError, MissingArtifactError

PAD, BOS, EOS = 0, 1, 2
RESERVED = ("<pad>", "<s>", "</s>")
MAX_LEN = 64
FORMAT_VERSION = 1


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:3]) != RESERVED:
            raise ValueError("vocabulary must start with <pad>, <s>, </s>")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.index[w] for w in words)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def detokenize(self, ids: Sequence[int]) -> str:
        return " ".join(self.decode(strip_eos(ids)))


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "synonym"
    vocab_size: int = 64
    min_len: int = 8
    max_len: int = 32
    m: int = 2
    seed: int = 0
    ref_cap: int = 1024

    def __post_init__(self):
        if self.kind not in ("copy", "reverse", "synonym"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.max_len + 1 > MAX_LEN:
            raise ConfigError(f"content length {self.max_len} + EOS exceeds {MAX_LEN}")
        if self.m < 1:
            raise ConfigError("synonym fan-out m must be >= 1")
        if self.n_symbols < 1:
            raise ConfigError(f"vocab_size {self.vocab_size} too small for task {self.kind}")

    @property
    def n_symbols(self) -> int:
        """Number of source symbols (= concepts for the synonym task)."""
        free = self.vocab_size - len(RESERVED)
        return free // (1 + self.m) if self.kind == "synonym" else free

    def build_vocab(self) -> Vocab:
        if self.kind == "synonym":
            src = [f"s{c}" for c in range(self.n_symbols)]
            tgt = [f"t{c}.{j}" for c in range(self.n_symbols) for j in range(self.m)]
            return Vocab(list(RESERVED) + src + tgt)
        return Vocab(list(RESERVED) + [f"w{i}" for i in range(self.n_symbols)])

    def synonyms(self, symbol: int) -> list[int]:
        """Target ids for source id ``symbol`` (synonym task)."""
        c = symbol - len(RESERVED)
        base = len(RESERVED) + self.n_symbols + c * self.m
        return list(range(base, base + self.m))


@dataclass(frozen=True)
class SequencePair:
    src: tuple[int, ...]
    tgt: tuple[int, ...]
    raw_len: int
    refs: tuple[tuple[int, ...], ...] | None = None

    @property
    def padded_len(self) -> int:
        return len(self.tgt)

    @property
    def content(self) -> tuple[int, ...]:
        return strip_eos(self.tgt)


@dataclass
class Splits:
    spec: TaskSpec
    vocab: Vocab
    train: list[SequencePair]
    dev: list[SequencePair]
    test: list[SequencePair]


def strip_eos(ids: Sequence[int]) -> tuple[int, ...]:
    """Tokens before the first EOS (PAD and BOS dropped)."""
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i not in (PAD, BOS):
            out.append(i)
    return tuple(out)


def pad_to_multiple(ids: Sequence[int], multiple: int = 4) -> tuple[int, ...]:
    ids = tuple(int(i) for i in ids)
    extra = -len(ids) % multiple
    return ids + (EOS,) * extra


def raw_length(tgt: Sequence[int]) -> int:
    """Length up to and including the first EOS."""
    for i, tok in enumerate(tgt):
        if tok == EOS:
            return i + 1
    return len(tgt)


def preprocess(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], max_len: int = MAX_LEN,
               refs: Sequence | None = None) -> list[SequencePair]:
    """Drop pairs longer than ``max_len`` on either side, EOS-pad targets to a multiple of 4."""
    out = []
    for i, (src, tgt) in enumerate(pairs):
        if len(src) > max_len or len(tgt) > max_len:
            continue
        ref = tuple(tuple(r) for r in refs[i]) if refs is not None else None
        out.append(SequencePair(tuple(int(s) for s in src), pad_to_multiple(tgt),
                                len(tgt), ref))
    if not out:
        raise EmptyDatasetError("no sequence pairs left after length filtering")
    return out


def true_conditional_entropy(spec: TaskSpec, length: int) -> float:
    """Exact H(y | x) in nats for a source with ``length`` content tokens."""
    if spec.kind != "synonym":
        return 0.0
    return length * math.log(spec.m)


def optimal_token_ll(spec: TaskSpec, pairs: Sequence[SequencePair], padded: bool = False) -> float:
    """Best achievable per-token test log-likelihood on ``pairs``.

    Token count follows the reporting convention (content tokens plus the
    first EOS) unless ``padded``, which divides by the padded target length.
    """
    nats = sum(true_conditional_entropy(spec, len(strip_eos(p.src))) for p in pairs)
    return -nats / sum(p.padded_len if padded else p.raw_len for p in pairs)


def _target_for(spec: TaskSpec, content: Sequence[int], choices: Sequence[int]) -> list[int]:
    if spec.kind == "copy":
        return list(content)
    if spec.kind == "reverse":
        return list(reversed(content))
    return [spec.synonyms(s)[j] for s, j in zip(content, choices)]


def _references(spec: TaskSpec, content: Sequence[int], target: Sequence[int],
                rng: np.random.Generator) -> tuple[tuple[int, ...], ...]:
    if spec.kind != "synonym" or spec.m == 1:
        return (tuple(target),)
    if spec.m ** len(content) <= spec.ref_cap:
        return tuple(tuple(_target_for(spec, content, ch))
                     for ch in itertools.product(range(spec.m), repeat=len(content)))
    refs = [tuple(target)]
    for _ in range(spec.m - 1):
        refs.append(tuple(_target_for(spec, content, rng.integers(0, spec.m, len(content)))))
    return tuple(refs)


def sample_target(spec: TaskSpec, content: Sequence[int], rng: np.random.Generator) -> list[int]:
    choices = rng.integers(0, spec.m, len(content)) if spec.kind == "synonym" else ()
    return _target_for(spec, content, choices)


def generate_dataset(spec: TaskSpec, n_train: int, n_dev: int, n_test: int) -> Splits:
    """Draw all three splits from ``spec``; a pure function of its arguments."""
    rng = np.random.default_rng(spec.seed)
    lo = len(RESERVED)

    def draw(n: int, with_refs: bool) -> list[SequencePair]:
        raw, refs = [], []
        for _ in range(n):
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            content = [int(c) for c in rng.integers(lo, lo + spec.n_symbols, length)]
            target = sample_target(spec, content, rng)
            raw.append((content + [EOS], target + [EOS]))
            if with_refs:
                refs.append(_references(spec, content, target, rng))
        return preprocess(raw, refs=refs if with_refs else None)

    return Splits(spec, spec.build_vocab(), draw(n_train, False), draw(n_dev, True),
                  draw(n_test, True))


def conditional_unigram_entropy(pairs: Sequence[SequencePair]) -> float:
    """Mean H(target token | aligned source token) in nats, from counts.

    Only meaningful for position-aligned tasks (copy, synonym).
    """
    counts: dict[int, Counter] = defaultdict(Counter)
    for p in pairs:
        for s, t in zip(strip_eos(p.src), p.content):
            counts[s][t] += 1
    total = sum(sum(c.values()) for c in counts.values())
    h = 0.0
    for c in counts.values():
        n = sum(c.values())
        probs = np.array(list(c.values()), dtype=float) / n
        h += n / total * float(-(probs * np.log(probs)).sum())
    return h


# -- batching --------------------------------------------------------------
@dataclass
class Batch:
    src: np.ndarray          # (B, S) ids, PAD beyond each source
    src_pad: np.ndarray      # (B, S) True at padding
    tgt: np.ndarray          # (B, T) ids; EOS-padded, PAD beyond T_i when lengths differ
    raw_len: np.ndarray      # (B,)
    padded_len: np.ndarray   # (B,)
    index: np.ndarray        # (B,) positions in the originating split

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def uniform(self) -> bool:
        return bool((self.padded_len == self.tgt.shape[1]).all())


def collate(pairs: Sequence[SequencePair], index: Sequence[int] | None = None) -> Batch:
    b = len(pairs)
    s = max(len(p.src) for p in pairs)
    t = max(p.padded_len for p in pairs)
    src = np.full((b, s), PAD, dtype=np.int64)
    tgt = np.full((b, t), PAD, dtype=np.int64)
    for i, p in enumerate(pairs):
        src[i, :len(p.src)] = p.src
        tgt[i, :p.padded_len] = p.tgt
    return Batch(src, src == PAD, tgt,
                 np.array([p.raw_len for p in pairs]),
                 np.array([p.padded_len for p in pairs]),
                 np.arange(b) if index is None else np.asarray(index))


def batch_iterator(pairs: Sequence[SequencePair], batch_size: int, seed: int, epoch: int = 0,
                   bucketing: bool = True, shuffle: bool = True) -> Iterator[Batch]:
    """One epoch of batches; each pair appears exactly once.

    With bucketing every batch holds a single padded target length.
    """
    rng = np.random.default_rng([seed, epoch])
    buckets: dict[int, list[int]] = defaultdict(list)
    for i, p in enumerate(pairs):
        buckets[p.padded_len if bucketing else 0].append(i)
    chunks = []
    for key in sorted(buckets):
        ids = np.array(buckets[key])
        if shuffle:
            ids = rng.permutation(ids)
        chunks.extend(ids[j:j + batch_size] for j in range(0, len(ids), batch_size))
    order = rng.permutation(len(chunks)) if shuffle else range(len(chunks))
    for k in order:
        ids = chunks[k]
        yield collate([pairs[i] for i in ids], ids)


# -- files -------------------------------------------------------------------
def _line(vocab: Vocab, ids: Sequence[int]) -> str:
    return " ".join(vocab.decode(ids))


def write_split(path: Path, vocab: Vocab, pairs: Sequence[SequencePair]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(f"{_line(vocab, p.src)}\t{_line(vocab, p.tgt)}\n")


def write_refs(path: Path, vocab: Vocab, pairs: Sequence[SequencePair]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            for r in p.refs or ():
                fh.write(_line(vocab, r) + "\n")
            fh.write("\n")


def read_split(path: Path, vocab: Vocab, refs_path: Path | None = None) -> list[SequencePair]:
    refs = read_refs(refs_path, vocab) if refs_path is not None and refs_path.exists() else None
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            src, tgt = line.rstrip("\n").split("\t")
            tgt_ids = vocab.encode(tgt.split())
            pairs.append(SequencePair(vocab.encode(src.split()), tgt_ids, raw_length(tgt_ids),
                                      refs[i] if refs is not None else None))
    return pairs


def read_refs(path: Path, vocab: Vocab) -> list[tuple[tuple[int, ...], ...]]:
    blocks, cur = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line:
                cur.append(vocab.encode(line.split()))
            else:
                blocks.append(tuple(cur))
                cur = []
    return blocks


def write_ids_cache(path: Path, splits: dict[str, Sequence[SequencePair]]) -> None:
    arrays = {}
    for name, pairs in splits.items():
        for side in ("src", "tgt"):
            seqs = [getattr(p, side) for p in pairs]
            arrays[f"{name}_{side}"] = np.array([i for s in seqs for i in s], dtype=np.int32)
            arrays[f"{name}_{side}_offsets"] = np.cumsum([0] + [len(s) for s in seqs])
    np.savez(path, **arrays)


def save_dataset(directory: Path, splits: Splits, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": FORMAT_VERSION, "task": asdict(splits.spec), **(extra or {})}
    (directory / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (directory / "vocab.txt").write_text("\n".join(splits.vocab.tokens) + "\n")
    for name in ("train", "dev", "test"):
        pairs = getattr(splits, name)
        write_split(directory / f"{name}.txt", splits.vocab, pairs)
        if name != "train":
            write_refs(directory / f"{name}.refs", splits.vocab, pairs)
    write_ids_cache(directory / "ids.npz",
                    {n: getattr(splits, n) for n in ("train", "dev", "test")})


def load_dataset(directory: Path) -> Splits:
    directory = Path(directory)
    if not (directory / "spec.json").exists():
        raise MissingArtifactError(f"no dataset at {directory}; run `seqdensity generate-data` first")
    meta = json.loads((directory / "spec.json").read_text())
    spec = TaskSpec(**meta["task"])
    vocab = Vocab((directory / "vocab.txt").read_text().split("\n")[:-1])
    parts = {}
    for name in ("train", "dev", "test"):
        refs = directory / f"{name}.refs" if name != "train" else None
        parts[name] = read_split(directory / f"{name}.txt", vocab, refs)
    return Splits(spec, vocab, **parts)


def dataset_meta(directory: Path) -> dict:
    return json.loads((Path(directory) / "spec.json").read_text())

"""Held-out log-likelihood, BLEU, pairwise BLEU, speed and correlation analysis."""

from __future__ import annotations

import json
import math
import os
import platform
import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from . import tensor as T
from .data import SequencePair, batch_iterator, collate, strip_eos
from .errors import InsufficientDataError, UndefinedScoreError
from .models import SIGMA_FLOOR
from .tensor import Tensor

# Pearson r between checkpoint LL and BLEU, columns Tr-B / Ga-B / Fl-B
REFERENCE_CHECKPOINT_CORRELATIONS = {
    "raw": {"Tr-B": 0.926, "Ga-B": 0.831, "Fl-B": 0.678},
    "dist": {"Tr-B": -0.758, "Ga-B": -0.897, "Fl-B": -0.873},
}


# -- log-likelihood ---------------------------------------------------------------
@dataclass
class LLEstimate:
    per_sentence: np.ndarray     # log p(y | x) estimates, nats
    n_tokens: np.ndarray         # tokens per sentence (content + first EOS)
    samples: int                 # S, importance samples per sentence (1 = exact)
    per_token: float             # sum(per_sentence) / sum(n_tokens)
    stderr: float                # standard error of per_token across sentences
    warnings: list[str] = field(default_factory=list)

    def renormalized(self, n_tokens) -> tuple[float, float]:
        """Per-token LL and its standard error under another token count."""
        n_tokens = np.asarray(n_tokens, dtype=float)
        return (float(self.per_sentence.sum() / n_tokens.sum()),
                _ratio_stderr(self.per_sentence, n_tokens))

    def to_dict(self) -> dict:
        return {"per_token": self.per_token, "stderr": self.stderr, "samples": self.samples,
                "n_sentences": int(len(self.per_sentence)), "per_token_normalized": True,
                "warnings": self.warnings}


def _ratio_stderr(ll: np.ndarray, n_tok: np.ndarray) -> float:
    n = len(ll)
    if n < 2:
        return 0.0
    r = ll.sum() / n_tok.sum()
    resid = ll - r * n_tok
    return float(math.sqrt((resid ** 2).sum() * n / (n - 1)) / n_tok.sum())


def _estimate(ll: np.ndarray, n_tok: np.ndarray, samples: int, warnings=None) -> LLEstimate:
    if not np.all(np.isfinite(ll)):
        raise ValueError("non-finite log-likelihood estimate")
    return LLEstimate(ll, n_tok, samples, float(ll.sum() / n_tok.sum()),
                      _ratio_stderr(ll, n_tok), list(warnings or []))


def ar_test_ll(model, pairs: Sequence[SequencePair], batch_size: int = 128) -> LLEstimate:
    """Exact log p(y | x) up to and including the first EOS."""
    ll = np.zeros(len(pairs))
    n_tok = np.array([p.raw_len for p in pairs], dtype=float)
    model.eval()
    with T.no_grad():
        for batch in batch_iterator(pairs, batch_size, seed=0, shuffle=False):
            enc = model.encode(batch.src, batch.src_pad)
            lp = model.token_log_probs(enc, batch.tgt).data
            mask = np.arange(batch.tgt.shape[1])[None, :] < batch.raw_len[:, None]
            ll[batch.index] = (lp * mask).sum(axis=1)
    return _estimate(ll, n_tok, 1)


def importance_log_weights(model, enc, tgt, n_samples: int, rng: np.random.Generator,
                           q=None) -> np.ndarray:
    """(B, S) array of log p(y|z,x) + log p(z|x) - log q(z|y,x) at z ~ q."""
    q = q if q is not None else model.posterior(enc, tgt)
    b = tgt.shape[0]
    out = np.zeros((b, n_samples))
    for s in range(n_samples):
        z = q.sample(rng)
        out[:, s] = (model.decoder_log_prob(enc, z, tgt).data + model.prior_log_prob(enc, z).data
                     - q.log_prob(z).data)
    return out


def batch_log_marginal(model, enc, tgt, n_samples: int, rng: np.random.Generator, q=None
                       ) -> np.ndarray:
    """Per-sequence importance-sampling estimate of log p(y | x), shape (B,)."""
    logw = importance_log_weights(model, enc, tgt, n_samples, rng, q)
    return logsumexp(logw, axis=1) - math.log(n_samples)


def lvm_test_ll(model, pairs: Sequence[SequencePair], n_samples: int = 1000, seed: int = 0,
                batch_size: int = 64) -> LLEstimate:
    """Importance-sampled log p(y | x) using the ground-truth padded length.

    log (1/S) sum_s p(y|z_s,x) p(z_s|x) / q(z_s|y,x), reduced by log-sum-exp.
    The full padded target is scored; normalisation is per content token + EOS.
    """
    if n_samples < 1:
        raise ValueError("need at least one importance sample")
    rng = np.random.default_rng(seed)
    ll = np.zeros(len(pairs))
    n_tok = np.array([p.raw_len for p in pairs], dtype=float)
    warnings = []
    model.eval()
    saved = model.counter.decoder_passes if hasattr(model, "counter") else None
    with T.no_grad():
        for batch in batch_iterator(pairs, batch_size, seed=0, shuffle=False):
            enc = model.encode(batch.src, batch.src_pad)
            q = model.posterior(enc, batch.tgt)
            if np.all(q.std.data <= SIGMA_FLOOR * 1.01):
                warnings.append("degenerate posterior: sigma at floor everywhere")
            ll[batch.index] = batch_log_marginal(model, enc, batch.tgt, n_samples, rng, q)
    if saved is not None:
        model.counter.decoder_passes = saved
    return _estimate(ll, n_tok, n_samples, sorted(set(warnings)))


def heldout_ll(model, pairs, n_samples: int = 1000, seed: int = 0) -> LLEstimate:
    if model.family == "ar":
        return ar_test_ll(model, pairs)
    return lvm_test_ll(model, pairs, n_samples, seed)


# -- BLEU ------------------------------------------------------------------------------
MAX_ORDER = 4


def ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@lru_cache(maxsize=8192)
def _reference_stats(refs: tuple) -> tuple[tuple[int, ...], tuple[dict, ...]]:
    """Reference lengths and, per order, the max count of every n-gram over references."""
    lens = tuple(len(r) for r in refs)
    maxes = []
    for n in range(1, MAX_ORDER + 1):
        best: dict = {}
        for r in refs:
            for g, c in ngram_counts(r, n).items():
                if c > best.get(g, 0):
                    best[g] = c
        maxes.append(best)
    return lens, tuple(maxes)


def _closest_length(ref_lens: Sequence[int], hyp_len: int) -> int:
    return min(ref_lens, key=lambda r: (abs(r - hyp_len), r))


def bleu_stats(hyp: Sequence, refs: Sequence[Sequence]) -> np.ndarray:
    """[hyp_len, ref_len, match_1, total_1, ..., match_4, total_4] for one sentence."""
    refs_t = tuple(tuple(r) for r in refs)
    if not refs_t:
        raise UndefinedScoreError("sentence without references")
    lens, maxes = _reference_stats(refs_t)
    hyp = tuple(hyp)
    stats = [len(hyp), _closest_length(lens, len(hyp))]
    for n in range(1, MAX_ORDER + 1):
        counts = ngram_counts(hyp, n)
        match = sum(min(c, maxes[n - 1].get(g, 0)) for g, c in counts.items())
        stats += [match, max(len(hyp) - n + 1, 0)]
    return np.array(stats, dtype=float)


def bleu_from_stats(stats: np.ndarray, smooth: str = "add-one") -> float:
    hyp_len, ref_len = stats[0], stats[1]
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(MAX_ORDER):
        match, total = stats[2 + 2 * n], stats[3 + 2 * n]
        if smooth == "add-one" and n > 0:
            match, total = match + 1.0, total + 1.0
        elif smooth not in ("add-one", "none"):
            raise ValueError(f"unknown smoothing {smooth!r}")
        if match == 0 or total == 0:
            return 0.0
        log_p += math.log(match / total) / MAX_ORDER
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence[Sequence]],
         smooth: str = "add-one") -> float:
    """Corpus BLEU-4 in [0, 100] with multiple references per sentence.

    Brevity penalty uses the closest reference length (ties: shorter).
    ``smooth="add-one"`` adds one to numerator and denominator of the 2..4-gram
    precisions; ``"none"`` is the strict geometric mean.
    """
    if len(hypotheses) == 0:
        raise UndefinedScoreError("empty hypothesis set")
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference counts differ")
    total = np.zeros(2 + 2 * MAX_ORDER)
    for h, refs in zip(hypotheses, references):
        total += bleu_stats(h, refs)
    return bleu_from_stats(total, smooth)


def sentence_bleu(hyp: Sequence, refs: Sequence[Sequence], smooth: str = "add-one") -> float:
    return bleu_from_stats(bleu_stats(hyp, refs), smooth)


def pairwise_bleu(candidate_sets: Sequence[Sequence[Sequence]], smooth: str = "add-one") -> float:
    """Mean over sources of the mean BLEU over ordered pairs (i != j), candidate j as reference."""
    if not candidate_sets:
        raise UndefinedScoreError("no candidate sets")
    per_source = []
    for cands in candidate_sets:
        if len(cands) < 2:
            raise ValueError("pairwise BLEU needs at least 2 candidates per source")
        scores = [sentence_bleu(a, [b], smooth) for i, a in enumerate(cands)
                  for j, b in enumerate(cands) if i != j]
        per_source.append(sum(scores) / len(scores))
    return float(sum(per_source) / len(per_source))


# -- speed ----------------------------------------------------------------------------
def environment_descriptor() -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "machine": platform.machine(), "processor": platform.processor(),
            "cpus": os.cpu_count(), "system": platform.system()}


@dataclass
class SpeedReport:
    sentences_per_second: float
    passes_per_sentence: float
    repetitions: int
    timings: list[float]
    environment: dict

    def to_dict(self) -> dict:
        return asdict(self)


def speed_benchmark(decode_fn, model, sources: Sequence[Sequence[int]], repetitions: int = 5,
                    warmup: int = 1) -> SpeedReport:
    """Time ``decode_fn(model, [src])`` one sentence at a time (batch size 1).

    Reports the median over ``repetitions`` full passes over ``sources`` and the
    decoder forward passes per sentence counted during the last repetition.
    """
    if repetitions < 5:
        raise ValueError("at least 5 repetitions")
    for _ in range(warmup):
        for s in sources[:1]:
            decode_fn(model, [s])
    timings = []
    for _ in range(repetitions):
        model.counter.reset()
        start = time.perf_counter()
        for s in sources:
            decode_fn(model, [s])
        timings.append(time.perf_counter() - start)
    passes = model.counter.decoder_passes / len(sources)
    med = statistics.median(timings)
    return SpeedReport(len(sources) / med, passes, repetitions, timings, environment_descriptor())


# -- correlation -----------------------------------------------------------------------------
def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson expects two equal-length 1-d sequences")
    if len(x) < 3:
        raise InsufficientDataError("correlation needs at least 3 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedScoreError("zero variance: correlation undefined")
    return float(np.clip(dx @ dy / (sx * sy), -1.0, 1.0))


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson correlation of average ranks."""
    return pearson(rankdata(xs), rankdata(ys))


@dataclass
class CorrelationRow:
    group: str
    n: int
    pearson: float | None
    spearman: float | None
    sign_disagreement: bool = False
    note: str = ""


def correlation_report(groups: dict[str, Sequence[tuple[float, float]]]) -> list[CorrelationRow]:
    """r and rho of (LL, BLEU) per group; groups under 3 points are skipped with a note.

    ``sign_disagreement`` flags groups where higher LL goes with lower BLEU.
    """
    rows = []
    for name, pts in groups.items():
        pts = list(pts)
        if len(pts) < 3:
            rows.append(CorrelationRow(name, len(pts), None, None, note="skipped: fewer than 3 points"))
            continue
        ll = [p[0] for p in pts]
        bl = [p[1] for p in pts]
        try:
            r, rho = pearson(ll, bl), spearman(ll, bl)
        except UndefinedScoreError as exc:
            rows.append(CorrelationRow(name, len(pts), None, None, note=f"skipped: {exc}"))
            continue
        rows.append(CorrelationRow(name, len(pts), r, rho, sign_disagreement=rho < 0))
    return rows


def format_correlation_table(table: dict[str, dict[str, float]], columns: Sequence[str] | None = None
                             ) -> str:
    """Rows x columns grid of correlations, three decimals, tab separated."""
    cols = list(columns) if columns else sorted({c for row in table.values() for c in row})
    lines = ["\t" + "\t".join(cols)]
    for name, row in table.items():
        cells = [f"{row[c]:.3f}" if row.get(c) is not None else "-" for c in cols]
        lines.append(name + "\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"


def load_training_log(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def checkpoint_points(log: Sequence[dict]) -> list[tuple[float, float]]:
    return [(r["dev_ll"], r["dev_bleu"]) for r in log if "dev_ll" in r and "dev_bleu" in r]


# -- latent export ---------------------------------------------------------------------------
def export_latents(model, pair: SequencePair, n: int, seed: int = 0, path: Path | None = None
                   ) -> np.ndarray:
    """2n + 1 rows: n prior samples, n posterior samples, then the delta-posterior mean.

    Columns: tag (0 prior, 1 posterior, 2 delta) followed by the flattened
    (T * d_latent) latent block. Written as CSV when ``path`` is given.
    """
    from .inference import encode_sources, iterative_inference

    rng = np.random.default_rng(seed)
    model.eval()
    batch = collate([pair])
    t = batch.tgt.shape[1]
    with T.no_grad():
        enc = encode_sources(model, [pair.src])
        prior = np.concatenate([model.prior_sample(enc, t, rng) for _ in range(n)])
        q = model.posterior(enc, batch.tgt)
        post = np.concatenate([q.sample(rng).data for _ in range(n)])
    res = iterative_inference(model, [pair.src], 1, "gold", [t])
    delta = res.traces[0].steps[-1].mu[None]
    rows = np.concatenate([prior.reshape(n, -1), post.reshape(n, -1), delta.reshape(1, -1)])
    tags = np.array([0] * n + [1] * n + [2], dtype=float)[:, None]
    table = np.concatenate([tags, rows], axis=1)
    if path is not None:
        header = "tag," + ",".join(f"z{i}" for i in range(rows.shape[1]))
        np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.10g")
    return table


# -- reports ----------------------------------------------------------------------------------
@dataclass
class ExperimentReport:
    model_id: str
    family: str
    data: str                      # raw | distilled
    test_ll: float | None
    test_ll_stderr: float | None
    test_bleu: float | None
    pairwise_bleu: dict | None     # k (or "beam") -> pairwise BLEU
    sentences_per_second: float | None
    passes_per_sentence: float | None
    param_count: int | None
    config_hash: str | None = None
    suite_version: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(**d)

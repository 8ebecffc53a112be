"""Generation: greedy/beam search for AR models, delta-posterior refinement for LVMs."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import BOS, EOS, PAD, strip_eos
from .models import EncodedSource
from .tensor import Tensor

REFINE_STEPS = (0, 1, 2, 4, 8)


def encode_sources(model, sources: Sequence[Sequence[int]]) -> EncodedSource:
    s = max(len(x) for x in sources)
    src = np.full((len(sources), s), PAD, dtype=np.int64)
    for i, x in enumerate(sources):
        src[i, :len(x)] = x
    with T.no_grad():
        return model.encode(src, src == PAD)


# -- autoregressive search ---------------------------------------------------------
@dataclass(frozen=True)
class BeamHypothesis:
    tokens: tuple[int, ...]      # generated tokens, BOS excluded; EOS included when finished
    score: float                 # sum of token log-probabilities
    finished: bool


@dataclass
class SearchResult:
    tokens: tuple[int, ...]
    score: float
    finished: bool               # False: best unfinished hypothesis, flagged
    nbest: list[BeamHypothesis] = field(default_factory=list)


def greedy_search(model, sources: Sequence[Sequence[int]], max_len: int,
                  eos_id: int | None = EOS) -> list[SearchResult]:
    """Batched left-to-right argmax decoding (ties go to the lower token id)."""
    with T.no_grad():
        enc = encode_sources(model, sources)
        n = len(sources)
        prefix = np.full((n, 1), BOS, dtype=np.int64)
        scores = np.zeros(n)
        done = np.zeros(n, dtype=bool)
        for _ in range(max_len):
            lp = model.next_log_probs(enc, prefix)
            tok = np.argmax(lp, axis=-1)
            step_lp = lp[np.arange(n), tok]
            tok = np.where(done, EOS if eos_id is not None else 0, tok)
            scores += np.where(done, 0.0, step_lp)
            prefix = np.concatenate([prefix, tok[:, None]], axis=1)
            if eos_id is not None:
                done |= tok == eos_id
                if done.all():
                    break
    out = []
    for i in range(n):
        toks = [int(t) for t in prefix[i, 1:]]
        if eos_id is not None and eos_id in toks:
            toks = toks[: toks.index(eos_id) + 1]
            out.append(SearchResult(tuple(toks), float(scores[i]), True))
        else:
            out.append(SearchResult(tuple(toks), float(scores[i]), eos_id is None))
    return out


def beam_search(model, sources: Sequence[Sequence[int]], width: int, max_len: int,
                eos_id: int | None = EOS, n_best: int = 1) -> list[SearchResult]:
    """Batched beam search with pure sum-of-log-prob scores.

    Candidates are ranked by score, ties broken by lower token id and then by
    lower parent index. A hypothesis ending in ``eos_id`` leaves the beam; the
    search for a source stops when ``n_best`` hypotheses have finished and no
    live one can beat the worst of them. With ``eos_id=None`` exactly
    ``max_len`` tokens are produced.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    n_best = min(max(n_best, 1), width)
    n = len(sources)
    with T.no_grad():
        enc = encode_sources(model, sources)
        alive: list[list[BeamHypothesis]] = [[BeamHypothesis((), 0.0, False)] for _ in range(n)]
        finished: list[list[BeamHypothesis]] = [[] for _ in range(n)]
        for step in range(max_len):
            active = [i for i in range(n) if alive[i] and not _settled(alive[i], finished[i], n_best)]
            if not active:
                break
            rows, owners = [], []
            for i in active:
                for h in alive[i]:
                    rows.append((BOS,) + h.tokens)
                    owners.append(i)
            lp = model.next_log_probs(enc.select(np.array(owners)), np.array(rows, dtype=np.int64))
            r = 0
            last = step == max_len - 1
            for i in active:
                cands = []
                for j, h in enumerate(alive[i]):
                    row = lp[r]
                    r += 1
                    for v in range(row.shape[0]):
                        cands.append((-(h.score + row[v]), v, j, h))
                cands.sort(key=lambda c: (c[0], c[1], c[2]))
                nxt = []
                for neg, v, _, h in cands[:width]:
                    hyp_tokens = h.tokens + (v,)
                    if eos_id is not None and v == eos_id:
                        finished[i].append(BeamHypothesis(hyp_tokens, -neg, True))
                    elif last and eos_id is None:
                        finished[i].append(BeamHypothesis(hyp_tokens, -neg, True))
                    else:
                        nxt.append(BeamHypothesis(hyp_tokens, -neg, False))
                alive[i] = nxt
    out = []
    for i in range(n):
        fin = sorted(finished[i], key=lambda h: (-h.score, h.tokens))
        if fin:
            best = fin[0]
            out.append(SearchResult(best.tokens, best.score, True, fin[:width]))
        else:
            live = sorted(alive[i], key=lambda h: (-h.score, h.tokens))
            best = live[0]
            out.append(SearchResult(best.tokens, best.score, False, live[:width]))
    return out


def _settled(alive: list[BeamHypothesis], finished: list[BeamHypothesis], need: int = 1) -> bool:
    if len(finished) < need:
        return False
    kth = sorted((h.score for h in finished), reverse=True)[need - 1]
    return kth >= max(h.score for h in alive)


# -- latent variable inference ------------------------------------------------------
@dataclass
class RefinementStep:
    mu: np.ndarray               # (T, d_latent)
    tokens: np.ndarray           # (T,) position-wise argmax
    proxy: float                 # log p(y_hat | mu, x) + log p(mu | x)
    elbo: float | None = None    # per-token ELBO of y_hat, when requested


@dataclass
class RefinementTrace:
    steps: list[RefinementStep]
    fixed_point_step: int | None = None   # first step whose output equals its predecessor's

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def proxies(self) -> list[float]:
        return [s.proxy for s in self.steps]

    def summary(self) -> dict:
        return {"steps": len(self.steps) - 1, "proxy": self.proxies,
                "elbo": [s.elbo for s in self.steps], "fixed_point_step": self.fixed_point_step}


@dataclass
class InferenceOutput:
    tokens: list[tuple[int, ...]]          # EOS-stripped outputs per source
    raw: list[np.ndarray]                  # full padded decodes
    traces: list[RefinementTrace]


def init_delta_posterior(model, enc: EncodedSource, length: int) -> np.ndarray:
    return model.prior_mean(enc, length)


def _decode_argmax(model, enc: EncodedSource, mu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Position-wise argmax tokens and their summed log-probabilities."""
    logits = model.decode_logits(enc, Tensor(mu)).data
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    tok = np.argmax(logp, axis=-1)
    best = np.take_along_axis(logp, tok[..., None], axis=-1)[..., 0].sum(axis=-1)
    return tok, best


def _proxy(model, enc: EncodedSource, mu: np.ndarray, dec_lp: np.ndarray) -> np.ndarray:
    return dec_lp + model.prior_log_prob(enc, Tensor(mu)).data


def refine_step(model, enc: EncodedSource, mu: np.ndarray, tokens: np.ndarray
                ) -> tuple[np.ndarray, np.ndarray]:
    """One EM-style update: mu' = E_q[z | y_hat, x], then y' = argmax p(y | mu', x)."""
    with T.no_grad():
        mu2 = model.posterior(enc, tokens).mean.data
        tok2, _ = _decode_argmax(model, enc, mu2)
    return mu2, tok2


def sequence_elbo(model, enc: EncodedSource, tokens: np.ndarray, n_samples: int = 8,
                  seed: int = 0) -> np.ndarray:
    """Per-token ELBO of ``tokens`` (B, T), Monte Carlo with a fixed seed.

    Decoder passes spent here are not counted as generation passes.
    """
    rng = np.random.default_rng(seed)
    saved = model.counter.decoder_passes
    total = np.zeros(tokens.shape[0])
    with T.no_grad():
        q = model.posterior(enc, tokens)
        for _ in range(n_samples):
            z = q.sample(rng)
            rec = model.decoder_log_prob(enc, z, tokens).data
            total += rec - model.prior_kl(enc, q, z).data
    model.counter.decoder_passes = saved
    return total / n_samples / tokens.shape[1]


def _lengths(model, enc: EncodedSource, length_mode: str, gold_lengths) -> np.ndarray:
    if length_mode == "gold":
        if gold_lengths is None:
            raise ValueError("gold length mode needs gold_lengths")
        return np.asarray(gold_lengths, dtype=int)
    if length_mode != "predicted":
        raise ValueError(f"unknown length mode {length_mode!r}")
    with T.no_grad():
        return model.predict_length(enc).predict(enc.lengths, model.cfg.max_len)


def iterative_inference(model, sources: Sequence[Sequence[int]], k: int,
                        length_mode: str = "predicted", gold_lengths=None,
                        elbo_samples: int = 0, seed: int = 0, early_exit: bool = False,
                        init: np.ndarray | None = None) -> InferenceOutput:
    """Decode at the prior mean, then refine ``k`` times.

    Sources are grouped by target length and processed in batches. With
    ``early_exit`` a group stops once every member reached a fixed point; the
    remaining trace entries are copies, so outputs never differ from a full run.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    model.eval()
    enc_all = encode_sources(model, sources)
    lengths = _lengths(model, enc_all, length_mode, gold_lengths)
    groups: dict[int, list[int]] = defaultdict(list)
    for i, t in enumerate(lengths):
        groups[int(t)].append(i)
    n = len(sources)
    traces: list[RefinementTrace | None] = [None] * n
    raw: list[np.ndarray | None] = [None] * n
    for t in sorted(groups):
        idx = np.array(groups[t])
        enc = enc_all.select(idx)
        with T.no_grad():
            mu = init[idx] if init is not None else init_delta_posterior(model, enc, t)
            tok, dec_lp = _decode_argmax(model, enc, mu)
            proxy = _proxy(model, enc, mu, dec_lp)
        elbo = sequence_elbo(model, enc, tok, elbo_samples, seed) if elbo_samples else None
        hist = [(mu, tok, proxy, elbo)]
        fixed = np.full(len(idx), -1)
        for step in range(1, k + 1):
            if early_exit and (fixed >= 0).all():
                hist.append(hist[-1])
                continue
            with T.no_grad():
                mu = model.posterior(enc, tok).mean.data
                new_tok, dec_lp = _decode_argmax(model, enc, mu)
                proxy = _proxy(model, enc, mu, dec_lp)
            same = (new_tok == tok).all(axis=1)
            fixed = np.where((fixed < 0) & same, step, fixed)
            tok = new_tok
            elbo = sequence_elbo(model, enc, tok, elbo_samples, seed) if elbo_samples else None
            hist.append((mu, tok, proxy, elbo))
        for j, i in enumerate(idx):
            steps = [RefinementStep(h[0][j], h[1][j], float(h[2][j]),
                                    None if h[3] is None else float(h[3][j])) for h in hist]
            traces[i] = RefinementTrace(steps, int(fixed[j]) if fixed[j] >= 0 else None)
            raw[i] = hist[-1][1][j]
    tokens = [strip_eos(r) for r in raw]
    return InferenceOutput(tokens, raw, traces)


def decode(model, sources: Sequence[Sequence[int]], k: int = 0, width: int = 4,
           max_len: int | None = None) -> list[tuple[int, ...]]:
    """Family-agnostic decode to EOS-stripped token tuples (beam for AR)."""
    if model.family == "ar":
        cap = max_len or model.cfg.max_len
        return [strip_eos(r.tokens) for r in beam_search(model, sources, width, cap)]
    return iterative_inference(model, sources, k).tokens


# -- candidates -------------------------------------------------------------------------
@dataclass
class CandidateSet:
    candidates: list[tuple[int, ...]]
    duplicates: int
    short: bool = False      # AR beam returned fewer than n distinct hypotheses


def sample_candidates(model, sources: Sequence[Sequence[int]], n: int, seed: int = 0,
                      k: int = 0, length_mode: str = "predicted", gold_lengths=None
                      ) -> list[CandidateSet]:
    """n candidates per source: the n-best beam (AR) or n prior draws refined k times (LVM)."""
    if n < 2:
        raise ValueError("need at least 2 candidates")
    out = []
    if model.family == "ar":
        for r in beam_search(model, sources, n, model.cfg.max_len, n_best=n):
            cands = [strip_eos(h.tokens) for h in r.nbest]
            out.append(CandidateSet(cands, len(cands) - len(set(cands)), len(set(cands)) < n))
        return out
    rng = np.random.default_rng(seed)
    enc = encode_sources(model, sources)
    lengths = _lengths(model, enc, length_mode, gold_lengths)
    per_source: list[list[tuple[int, ...]]] = [[] for _ in sources]
    for _ in range(n):
        inits = {}
        for t in sorted(set(int(x) for x in lengths)):
            idx = np.where(lengths == t)[0]
            inits[t] = (idx, model.prior_sample(enc.select(idx), t, rng))
        for t, (idx, z) in inits.items():
            res = iterative_inference(model, [sources[i] for i in idx], k, "gold",
                                      np.full(len(idx), t), init=z)
            for j, i in enumerate(idx):
                per_source[i].append(res.tokens[j])
    for cands in per_source:
        out.append(CandidateSet(cands, len(cands) - len(set(cands))))
    return out

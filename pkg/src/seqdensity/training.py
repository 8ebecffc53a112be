"""Losses, schedules, the Adam update, distillation and the training loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import EOS, Batch, SequencePair, batch_iterator, collate, pad_to_multiple
from .errors import NumericalError
from .tensor import Tensor

ALPHA = 1e-4
DEFAULT_W0 = 500
DEFAULT_W1 = 2000


# -- losses ----------------------------------------------------------------------
@dataclass
class ELBOBreakdown:
    """Per-token loss terms of one batch. ``total`` carries the autograd graph."""

    reconstruction: float     # E_q log p(y | z, x), one reparameterised sample
    kl: float                 # KL[q || p], analytic (Gaussian) or one-sample (flow)
    alpha_reg: float          # KL[q || N(0, I)]
    length_loss: float
    kl_weight: float
    total: Tensor
    n_tokens: int

    def as_dict(self) -> dict:
        return {"reconstruction": self.reconstruction, "kl": self.kl,
                "alpha_reg": self.alpha_reg, "length_loss": self.length_loss,
                "kl_weight": self.kl_weight, "total": float(self.total.data)}


def _term(name: str, fn: Callable[[], object]):
    """Evaluate one loss ingredient, tagging numerical failures with its name."""
    try:
        out = fn()
    except NumericalError as exc:
        raise NumericalError(f"non-finite {name} term: {exc}") from exc
    data = out.data if isinstance(out, Tensor) else getattr(getattr(out, "states", None), "data", 0.0)
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite {name} term")
    return out


def elbo_loss(model, batch: Batch, beta: float, alpha: float = ALPHA,
              rng: np.random.Generator | None = None) -> ELBOBreakdown:
    """Negative ELBO per target position plus the length loss.

    total = (-rec + beta * kl + alpha * areg) / N + length_loss, where N = B * T
    counts every (EOS-padded) target position of the batch.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"kl weight {beta} outside [0, 1]")
    rng = rng if rng is not None else np.random.default_rng(0)
    enc = _term("encoder", lambda: model.encode(batch.src, batch.src_pad, rng))
    q = _term("posterior", lambda: model.posterior(enc, batch.tgt, rng))
    z = q.sample(rng)
    rec = _term("reconstruction", lambda: model.decoder_log_prob(enc, z, batch.tgt, rng))
    kl = _term("kl", lambda: model.prior_kl(enc, q, z, rng))
    areg = _term("alpha_reg", lambda: q.kl_standard_normal())
    length = _term("length", lambda: model.length_loss(enc, batch.padded_len))
    n = int(batch.tgt.shape[0] * batch.tgt.shape[1])
    inv = 1.0 / n
    total = (rec.sum() * -1.0 + kl.sum() * beta + areg.sum() * alpha) * inv + length
    return ELBOBreakdown(float(rec.data.sum() * inv), float(kl.data.sum() * inv),
                         float(areg.data.sum() * inv), float(length.data), beta, total, n)


def ar_loss(model, batch: Batch, rng=None) -> Tensor:
    try:
        return model.loss(batch, rng)
    except NumericalError as exc:
        raise NumericalError(f"non-finite nll term: {exc}") from exc


# -- schedules ---------------------------------------------------------------------
def kl_weight(step: int, w0: int = DEFAULT_W0, w1: int = DEFAULT_W1) -> float:
    """0 before ``w0``, then a linear ramp reaching 1 at ``w0 + w1``."""
    if step < w0:
        return 0.0
    if w1 <= 0:
        return 1.0
    return min(1.0, (step - w0) / w1)


def lr_schedule(step: int, d_model: int, warmup: int) -> float:
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    s = max(step, 1)
    return d_model ** -0.5 * min(s ** -0.5, s * warmup ** -1.5)


# -- optimiser -----------------------------------------------------------------------
@dataclass
class TrainState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]
    updates: int = 0                  # Adam bias-correction counter (skipped steps excluded)
    skipped: int = 0
    best_dev: float = -math.inf
    best_step: int = -1
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def fresh(cls, params: Sequence[Tensor], seed: int = 0) -> "TrainState":
        return cls(0, [np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], rng=np.random.default_rng(seed))


@dataclass
class StepReport:
    grad_norm: float
    clipped: bool
    skipped: bool


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float = 1.0
                   ) -> tuple[list[np.ndarray], float]:
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


def sgd_step(state: TrainState, params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
             lr: float, max_norm: float = 1.0, betas=(0.9, 0.98), eps: float = 1e-9
             ) -> StepReport:
    """Clip to ``max_norm`` then apply one Adam update in place.

    Non-finite gradients skip the update (counted in ``state.skipped``); the
    step counter advances either way.
    """
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    state.step += 1
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        return StepReport(math.nan, False, True)
    grads, norm = clip_grad_norm(grads, max_norm)
    state.updates += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.updates
    c2 = 1.0 - b2 ** state.updates
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return StepReport(norm, norm > max_norm, False)


# -- distillation -----------------------------------------------------------------------
@dataclass
class DistillResult:
    pairs: list[SequencePair]
    failures: int


def distill_dataset(teacher, pairs: Sequence[SequencePair], beam_width: int = 4,
                    batch_size: int = 64, max_len: int | None = None) -> DistillResult:
    """Replace every target by the teacher's beam output (sources untouched)."""
    from .inference import beam_search

    out: list[SequencePair] = []
    failures = 0
    cap = max_len or teacher.cfg.max_len
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        try:
            results = beam_search(teacher, [p.src for p in chunk], beam_width,
                                  max_len=cap)
        except NumericalError:
            results = [None] * len(chunk)
        for p, r in zip(chunk, results):
            if r is None or not r.finished or len(r.tokens) > cap:
                failures += 1
                out.append(p)
                continue
            tgt = pad_to_multiple(r.tokens)
            out.append(SequencePair(p.src, tgt, len(r.tokens), p.refs))
    return DistillResult(out, failures)


# -- training loop -------------------------------------------------------------------------
@dataclass
class TrainSchedule:
    steps: int = 5000
    batch_size: int = 64
    warmup: int = 1000
    lr_scale: float = 1.0
    w0: int = DEFAULT_W0
    w1: int = DEFAULT_W1
    alpha: float = ALPHA
    eval_every: int = 250
    checkpoint_every: int = 250
    patience: int = 10
    max_bad_steps: int = 5
    max_norm: float = 1.0
    dev_is_samples: int = 20
    dev_limit: int = 200


@dataclass
class TrainResult:
    state: TrainState
    log: list[dict]
    checkpoints: list[Path]
    stopped_early: bool
    best_step: int


class DivergenceError(NumericalError):
    pass


def _loss(model, batch: Batch, beta: float, alpha: float, rng) -> tuple[Tensor, dict]:
    if model.family == "ar":
        loss = ar_loss(model, batch, rng)
        return loss, {"nll": float(loss.data)}
    br = elbo_loss(model, batch, beta, alpha, rng)
    return br.total, br.as_dict()


def evaluate_dev(model, dev: Sequence[SequencePair], is_samples: int, seed: int) -> dict:
    """Dev per-token log-likelihood and BLEU in eval mode."""
    from .inference import decode
    from .metrics import ar_test_ll, bleu, lvm_test_ll

    model.eval()
    if model.family == "ar":
        ll = ar_test_ll(model, dev)
    else:
        ll = lvm_test_ll(model, dev, is_samples, seed)
    hyps = decode(model, [p.src for p in dev])
    refs = [p.refs if p.refs else (p.content,) for p in dev]
    return {"dev_ll": ll.per_token, "dev_ll_se": ll.stderr, "dev_bleu": bleu(hyps, refs)}


def train(model, train_pairs: Sequence[SequencePair], dev_pairs: Sequence[SequencePair],
          schedule: TrainSchedule, seed: int = 0, out_dir: Path | None = None,
          save_fn: Callable | None = None, state: TrainState | None = None,
          log_fn: Callable[[dict], None] | None = None) -> TrainResult:
    """Train ``model`` in place.

    Every ``eval_every`` steps a record is appended to ``train_log.jsonl`` and
    every ``checkpoint_every`` steps ``save_fn(path, model, state)`` writes a
    checkpoint. Early stopping watches dev BLEU.
    """
    from .priors import FlowPrior, actnorm_init

    params = model.parameters()
    state = state or TrainState.fresh(params, seed)
    dev = list(dev_pairs)[: schedule.dev_limit]
    log: list[dict] = []
    ckpts: list[Path] = []
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
    bad = 0
    since_best = 0
    stopped = False
    epoch = state.step // max(1, math.ceil(len(train_pairs) / schedule.batch_size))
    running: list[dict] = []
    t0 = time.time()
    needs_init = (getattr(model, "family", "ar") == "flow" and isinstance(model.prior, FlowPrior)
                  and not model.prior.actnorm_initialized)
    while state.step < schedule.steps and not stopped:
        for batch in batch_iterator(train_pairs, schedule.batch_size, seed, epoch):
            if state.step >= schedule.steps:
                break
            if needs_init and state.step >= schedule.w0:
                _init_actnorm(model, batch, state.rng)
                needs_init = False
            model.train()
            beta = kl_weight(state.step, schedule.w0, schedule.w1)
            lr = schedule.lr_scale * lr_schedule(state.step + 1, model.cfg.d_model, schedule.warmup)
            try:
                loss, terms = _loss(model, batch, beta, schedule.alpha, state.rng)
            except NumericalError as exc:
                bad += 1
                state.step += 1
                state.skipped += 1
                if bad >= schedule.max_bad_steps:
                    raise DivergenceError(
                        f"loss non-finite {bad} consecutive times at step {state.step}: {exc}")
                continue
            model.zero_grad()
            loss.backward()
            report = sgd_step(state, params, [p.grad for p in params], lr, schedule.max_norm)
            bad = bad + 1 if report.skipped else 0
            if bad >= schedule.max_bad_steps:
                raise DivergenceError(f"gradients non-finite {bad} consecutive times")
            terms.update(grad_norm=report.grad_norm, lr=lr, beta=beta)
            running.append(terms)
            step = state.step
            if step % schedule.eval_every == 0 or step == schedule.steps:
                rec = {"step": step, **_average(running), **evaluate_dev(model, dev,
                       schedule.dev_is_samples, seed), "elapsed": time.time() - t0}
                running = []
                log.append(rec)
                if log_path is not None:
                    with open(log_path, "a") as fh:
                        fh.write(json.dumps(rec) + "\n")
                if log_fn is not None:
                    log_fn(rec)
                if rec["dev_bleu"] > state.best_dev:
                    state.best_dev, state.best_step = rec["dev_bleu"], step
                    since_best = 0
                else:
                    since_best += 1
                    if since_best >= schedule.patience:
                        stopped = True
            if save_fn is not None and out_dir is not None and (
                    step % schedule.checkpoint_every == 0 or step == schedule.steps or stopped):
                path = out_dir / f"ckpt_{step:07d}.npz"
                save_fn(path, model, state)
                ckpts.append(path)
            if stopped:
                break
        epoch += 1
    model.eval()
    return TrainResult(state, log, ckpts, stopped, state.best_step)


def _average(records: list[dict]) -> dict:
    if not records:
        return {}
    keys = records[0].keys()
    return {k: float(np.mean([r[k] for r in records])) for k in keys}


def _init_actnorm(model, batch: Batch, rng) -> None:
    from .priors import actnorm_init

    with T.no_grad():
        model.eval()
        enc = model.encode(batch.src, batch.src_pad)
        q = model.posterior(enc, batch.tgt)
        z = q.sample(rng).data
        actnorm_init(model.prior, enc, z)

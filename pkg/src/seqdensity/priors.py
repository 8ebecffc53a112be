"""Conditional priors over (B, T, d) latent blocks.

The flow prior is a multi-scale stack. Each level is a sequence of steps
(actnorm, block-diagonal 1x1 mixing, affine coupling). Between levels the
block is squeezed in time, ``(T, d) -> (T/2, 2d)`` with row ``i`` holding
positions ``2i`` and ``2i+1``, and the first ``d`` channels (the earlier
position of each pair) are factored out to a standard normal. Three levels
therefore need ``T`` divisible by 4.

Coupling split patterns, used cyclically with alternating orientation:

* ``feature-halves``: first half of the features is kept;
* ``time-alternate``: even positions are kept;
* ``feature-interleave``: even-indexed features are kept.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InsufficientDataError, NumericalError, ShapeError
from .models import (LOG_2PI, EncodedSource, GaussianSequence, ModelConfig, gaussian_head,
                     _inverse_softplus, SIGMA_FLOOR)
from .nn import Linear, Module, Stack, TransformerLayer, WeightNormLinear, sinusoid_positions
from .tensor import Tensor

PATTERNS = ("feature-halves", "time-alternate", "feature-interleave")
SCALE_FLOOR = 1e-3
SCALE_SHIFT = 2.0
SINGULAR_SCALE = 1e-12


def standard_normal_log_prob(x: Tensor) -> Tensor:
    """Per-sequence log N(x; 0, I) for a (B, T, d) block, shape (B,)."""
    return (x * x * -0.5 - 0.5 * LOG_2PI).sum(axis=(1, 2))


class GaussianPrior(Module):
    """Transformer decoder over T positional encodings attending to the source."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.stack = Stack(cfg.prior_layers, cfg.d_model, cfg.heads, cfg.d_filter, rng,
                           cross=True, dropout=cfg.dropout_rate)
        self.head = WeightNormLinear(cfg.d_model, 2 * cfg.d_latent, rng)
        self.head.bias.data[cfg.d_latent:] = _inverse_softplus(1.0 - SIGMA_FLOOR)
        self.cfg = cfg

    def __call__(self, enc: EncodedSource, length: int, rng=None) -> GaussianSequence:
        pos = sinusoid_positions(length, self.cfg.d_model)
        x = Tensor(np.broadcast_to(pos, (enc.batch, length, self.cfg.d_model)))
        h = self.stack(x, None, enc.states, enc.pad, rng=rng)
        return gaussian_head(self.head(h), self.cfg.d_latent)

    def log_prob(self, enc: EncodedSource, z: Tensor, rng=None) -> Tensor:
        return self(enc, z.shape[1], rng).log_prob(z)

    def mean(self, enc: EncodedSource, length: int) -> np.ndarray:
        return self(enc, length).mean.data

    def sample(self, enc: EncodedSource, length: int, rng: np.random.Generator) -> np.ndarray:
        return self(enc, length).sample(rng).data


# -- flow layers ---------------------------------------------------------------
@dataclass(frozen=True)
class FlowLayerSpec:
    kind: str            # actnorm | mix1x1 | affine-coupling
    level: int
    pattern: str | None = None
    flip: bool = False
    heads: int = 1

    def to_dict(self) -> dict:
        return {"kind": self.kind, "level": self.level, "pattern": self.pattern,
                "flip": self.flip, "heads": self.heads}


def split_mask(pattern: str, flip: bool, length: int, d: int) -> np.ndarray:
    """(length, d) array, 1 where the coordinate passes through unchanged."""
    if pattern == "feature-halves":
        keep = np.zeros((length, d))
        keep[:, : d // 2] = 1.0
    elif pattern == "time-alternate":
        keep = np.zeros((length, d))
        keep[0::2, :] = 1.0
    elif pattern == "feature-interleave":
        keep = np.zeros((length, d))
        keep[:, 0::2] = 1.0
    else:
        raise ValueError(f"unknown split pattern {pattern!r}")
    return 1.0 - keep if flip else keep


class ActNorm(Module):
    def __init__(self, d: int, level: int):
        self.loc = T.Tensor(np.zeros(d), requires_grad=True)
        self.log_scale = T.Tensor(np.zeros(d), requires_grad=True)
        self.spec = FlowLayerSpec("actnorm", level)

    def forward(self, z: Tensor, enc=None) -> tuple[Tensor, Tensor]:
        b, t, _ = z.shape
        y = (z + self.loc) * T.exp(self.log_scale)
        ld = T.expand(self.log_scale.sum() * float(t), (b,))
        return y, ld

    def inverse(self, y: Tensor, enc=None) -> Tensor:
        return y * T.exp(-self.log_scale) - self.loc

    def initialize(self, z: np.ndarray) -> None:
        flat = z.reshape(-1, z.shape[-1])
        std = flat.std(axis=0)
        self.loc.data = -flat.mean(axis=0)
        self.log_scale.data = -np.log(np.maximum(std, 1e-12))


def random_rotation(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


class Mix1x1(Module):
    """Block-diagonal invertible channel mixing; one square block per head."""

    def __init__(self, d: int, heads: int, level: int, rng: np.random.Generator):
        if d % heads:
            raise ShapeError(f"{d} features do not split into {heads} heads")
        self.heads = heads
        c = d // heads
        self.weight = T.Tensor(np.stack([random_rotation(rng, c) for _ in range(heads)]),
                               requires_grad=True)
        self.spec = FlowLayerSpec("mix1x1", level, heads=heads)

    def _apply(self, z: Tensor, w_t) -> Tensor:
        b, t, d = z.shape
        h = self.heads
        zr = z.reshape(b * t, h, d // h).transpose(1, 0, 2)        # (h, BT, c)
        return (zr @ w_t).transpose(1, 0, 2).reshape(b, t, d)

    def log_abs_det(self) -> Tensor:
        total = None
        for i in range(self.heads):
            ld = T.logabsdet(self.weight[i])
            total = ld if total is None else total + ld
        return total

    def forward(self, z: Tensor, enc=None) -> tuple[Tensor, Tensor]:
        b, t, _ = z.shape
        y = self._apply(z, self.weight.transpose(0, 2, 1))
        return y, T.expand(self.log_abs_det() * float(t), (b,))

    def inverse(self, y: Tensor, enc=None) -> Tensor:
        inv_t = np.linalg.inv(self.weight.data).transpose(0, 2, 1)
        return self._apply(y, Tensor(inv_t))


class AffineCoupling(Module):
    """z' = m*z + (1-m)*(s*z + b), with (s, b) = g(m*z, x)."""

    def __init__(self, cfg: ModelConfig, pattern: str, flip: bool, level: int, index: int,
                 rng: np.random.Generator):
        d, dm = cfg.d_latent, cfg.d_model
        self.inp = Linear(2 * d, dm, rng)
        self.layer = TransformerLayer(dm, cfg.flow_heads, cfg.d_filter, rng, cross=True,
                                      dropout=cfg.dropout_rate)
        self.head = WeightNormLinear(dm, 2 * d, rng)
        self.d = d
        self.d_model = dm
        self.spec = FlowLayerSpec("affine-coupling", level, pattern, flip)
        self.layer_id = f"level{level}.step{index}"

    def mask(self, length: int) -> np.ndarray:
        return split_mask(self.spec.pattern, self.spec.flip, length, self.d)

    def scale_shift(self, kept: Tensor, mask: np.ndarray, enc: EncodedSource, rng=None
                    ) -> tuple[Tensor, Tensor]:
        b, t, d = kept.shape
        m = Tensor(np.broadcast_to(mask, (b, t, d)))
        x = self.inp(T.concat([kept, m], axis=-1)) + Tensor(sinusoid_positions(t, self.d_model))
        h = self.layer(x, None, enc.states, enc.pad, rng=rng)
        out = self.head(h)
        s = T.sigmoid(out[..., :d] + SCALE_SHIFT) + SCALE_FLOOR
        return s, out[..., d:]

    def forward(self, z: Tensor, enc: EncodedSource, rng=None) -> tuple[Tensor, Tensor]:
        return coupling_forward(self, z, enc, rng)

    def inverse(self, y: Tensor, enc: EncodedSource) -> Tensor:
        return coupling_inverse(self, y, enc)


def coupling_forward(layer: AffineCoupling, z: Tensor, enc: EncodedSource, rng=None
                     ) -> tuple[Tensor, Tensor]:
    """Apply one affine coupling; returns (z', per-sequence log|det J|)."""
    m = layer.mask(z.shape[1])
    keep = Tensor(m)
    moved = Tensor(1.0 - m)
    try:
        s, b = layer.scale_shift(z * keep, m, enc, rng)
        log_s = T.log(s)
    except NumericalError as exc:
        raise NumericalError(f"coupling {layer.layer_id}: {exc}") from exc
    y = z * keep + (s * z + b) * moved
    return y, (log_s * moved).sum(axis=(1, 2))


def coupling_inverse(layer: AffineCoupling, y: Tensor, enc: EncodedSource) -> Tensor:
    m = layer.mask(y.shape[1])
    keep = Tensor(m)
    moved = Tensor(1.0 - m)
    s, b = layer.scale_shift(y * keep, m, enc)
    if np.any(s.data * (1.0 - m) < SINGULAR_SCALE * (1.0 - m)):
        raise NumericalError(f"coupling {layer.layer_id}: scale below {SINGULAR_SCALE}")
    # on kept coordinates s may be anything; divide by 1 there
    safe_s = s * moved + keep
    return y * keep + ((y - b) / safe_s) * moved


# -- the stack -----------------------------------------------------------------
def squeeze(h: Tensor) -> Tensor:
    b, t, d = h.shape
    if t % 2:
        raise ShapeError(f"cannot squeeze odd length {t}")
    return h.reshape(b, t // 2, 2 * d)


def unsqueeze(h: Tensor) -> Tensor:
    b, t, d2 = h.shape
    return h.reshape(b, t * 2, d2 // 2)


@dataclass
class LatentBlock:
    values: np.ndarray      # (B, T, d)
    log_det: np.ndarray     # (B,) log|det d z / d eps| accumulated by the inverse pass

    @property
    def length(self) -> int:
        return self.values.shape[1]


class FlowPrior(Module):
    """Multi-scale affine-coupling flow; f maps latents z to base noise eps."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.d = cfg.d_latent
        self.levels = []
        for lvl, depth in enumerate(cfg.flow_depths):
            steps = []
            for i in range(depth):
                pattern = PATTERNS[i % len(PATTERNS)]
                flip = bool(i % 2)
                steps.append(FlowStep(cfg, pattern, flip, lvl, i, rng))
            self.levels.append(steps)
        self.actnorm_initialized = False

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def multiple(self) -> int:
        return 2 ** (self.n_levels - 1)

    def topology(self) -> list[dict]:
        return [layer.spec.to_dict() for steps in self.levels for st in steps
                for layer in (st.actnorm, st.mix, st.coupling)]

    def extra_state(self) -> dict:
        return {"actnorm_initialized": self.actnorm_initialized, "flow_topology": self.topology()}

    def load_extra_state(self, state: dict) -> None:
        self.actnorm_initialized = bool(state.get("actnorm_initialized", False))

    def _check_length(self, t: int) -> None:
        if t % self.multiple:
            raise ShapeError(f"latent length {t} must be a multiple of {self.multiple}")

    def forward(self, z: Tensor, enc: EncodedSource, rng=None, taps: list | None = None,
                layer_log_dets: list | None = None) -> tuple[Tensor, Tensor]:
        """f(z; x) -> (eps block shaped like z, per-sequence total log|det|)."""
        self._check_length(z.shape[1])
        h = z
        log_det = None
        factored = []
        for lvl, steps in enumerate(self.levels):
            for st in steps:
                h, ld = st.forward(h, enc, rng, taps, layer_log_dets)
                log_det = ld if log_det is None else log_det + ld
            if lvl < self.n_levels - 1:
                sq = squeeze(h)
                factored.append(sq[:, :, : self.d])
                h = sq[:, :, self.d:]
        for out in reversed(factored):
            h = unsqueeze(T.concat([out, h], axis=-1))
        if log_det is None:
            log_det = Tensor(np.zeros(z.shape[0]))
        return h, log_det

    def inverse(self, eps: Tensor, enc: EncodedSource) -> Tensor:
        """f^{-1}(eps; x)."""
        self._check_length(eps.shape[1])
        h = eps
        factored = []
        for _ in range(self.n_levels - 1):
            sq = squeeze(h)
            factored.append(sq[:, :, : self.d])
            h = sq[:, :, self.d:]
        for lvl in reversed(range(self.n_levels)):
            if lvl < self.n_levels - 1:
                h = unsqueeze(T.concat([factored[lvl], h], axis=-1))
            for st in reversed(self.levels[lvl]):
                h = st.inverse(h, enc)
        return h

    def log_prob(self, enc: EncodedSource, z: Tensor, rng=None) -> Tensor:
        eps, log_det = self.forward(z, enc, rng)
        return standard_normal_log_prob(eps) + log_det

    def mean(self, enc: EncodedSource, length: int) -> np.ndarray:
        """f^{-1}(0; x): the image of the base mode."""
        zero = Tensor(np.zeros((enc.batch, length, self.d)))
        return self.inverse(zero, enc).data

    def sample(self, enc: EncodedSource, length: int, rng: np.random.Generator) -> np.ndarray:
        eps = Tensor(rng.standard_normal((enc.batch, length, self.d)))
        return self.inverse(eps, enc).data


class FlowStep(Module):
    def __init__(self, cfg: ModelConfig, pattern: str, flip: bool, level: int, index: int,
                 rng: np.random.Generator):
        self.actnorm = ActNorm(cfg.d_latent, level)
        self.mix = Mix1x1(cfg.d_latent, cfg.mix_heads, level, rng)
        self.coupling = AffineCoupling(cfg, pattern, flip, level, index, rng)

    def forward(self, z, enc, rng=None, taps=None, layer_log_dets=None):
        h, ld1 = self.actnorm.forward(z)
        if taps is not None:
            taps.append(h.data)
        h, ld2 = self.mix.forward(h)
        h, ld3 = self.coupling.forward(h, enc, rng)
        if layer_log_dets is not None:
            layer_log_dets.extend([ld1.data, ld2.data, ld3.data])
        return h, ld1 + ld2 + ld3

    def inverse(self, y, enc):
        h = self.coupling.inverse(y, enc)
        h = self.mix.inverse(h)
        return self.actnorm.inverse(h)


def flow_log_density(flow: FlowPrior, enc: EncodedSource, z) -> Tensor:
    return flow.log_prob(enc, z if isinstance(z, Tensor) else Tensor(z))


def flow_sample(flow: FlowPrior, enc: EncodedSource, length: int, seed: int) -> LatentBlock:
    """Exact sample z = f^{-1}(eps), eps ~ N(0, I), with its log-det bookkeeping."""
    rng = np.random.default_rng(seed)
    with T.no_grad():
        eps = Tensor(rng.standard_normal((enc.batch, length, flow.d)))
        z = flow.inverse(eps, enc)
        _, log_det = flow.forward(z, enc)
    return LatentBlock(z.data, -log_det.data)


def actnorm_init(flow: FlowPrior, enc: EncodedSource, z: np.ndarray) -> None:
    """Data-dependent actnorm initialisation from a batch of latents (once only)."""
    if flow.actnorm_initialized:
        raise RuntimeError("actnorm parameters were already initialised")
    if z.shape[0] < 2:
        raise InsufficientDataError("actnorm initialisation needs at least 2 sequences")
    flow._check_length(z.shape[1])
    with T.no_grad():
        h = Tensor(z)
        for lvl, steps in enumerate(flow.levels):
            for st in steps:
                st.actnorm.initialize(h.data)
                h, _ = st.forward(h, enc)
            if lvl < flow.n_levels - 1:
                h = squeeze(h)[:, :, flow.d:]
    flow.actnorm_initialized = True


def prior_mean(prior, enc: EncodedSource, length: int) -> np.ndarray:
    with T.no_grad():
        return prior.mean(enc, length)

"""Linear-Gaussian latent variable model with a closed-form marginal.

Per position and feature: z ~ N(m, s^2), y = a * z + c + r * noise. It speaks
the same duck-typed protocol as :class:`LatentVariableModel` (encode,
posterior, decoder_log_prob, prior_log_prob, prior_kl, length_loss), so the
ELBO and importance-sampling code can be checked against exact answers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import LOG_2PI, GaussianSequence, PassCounter
from .tensor import Tensor


@dataclass
class ToyBatch:
    src: np.ndarray
    src_pad: np.ndarray
    tgt: np.ndarray          # (B, T, d) real-valued observations
    padded_len: np.ndarray


class LinearGaussianToy:
    family = "gauss"

    def __init__(self, m, s, a, c, r, q_mean=None, q_std=None):
        self.m = Tensor(np.asarray(m, float), requires_grad=True)
        self.log_s = Tensor(np.log(np.asarray(s, float)), requires_grad=True)
        self.a = Tensor(np.asarray(a, float), requires_grad=True)
        self.c = Tensor(np.asarray(c, float), requires_grad=True)
        self.log_r = Tensor(np.log(np.asarray(r, float)), requires_grad=True)
        # None -> exact posterior; arrays of shape (B, T, d) -> that fixed q
        self.q_mean = q_mean
        self.q_std = q_std
        self.counter = PassCounter()

    @classmethod
    def random(cls, rng: np.random.Generator, d: int = 3, exact_q: bool = False,
               shape: tuple | None = None) -> "LinearGaussianToy":
        toy = cls(rng.normal(0, 1, d), rng.uniform(0.3, 2.0, d), rng.normal(0, 1.5, d),
                  rng.normal(0, 1, d), rng.uniform(0.2, 1.5, d))
        if not exact_q:
            if shape is None:
                raise ValueError("shape needed for a random q")
            toy.q_mean = rng.normal(0, 1.5, shape)
            toy.q_std = rng.uniform(0.1, 2.0, shape)
        return toy

    # protocol -----------------------------------------------------------
    def eval(self):
        return self

    def parameters(self) -> list[Tensor]:
        return [self.m, self.log_s, self.a, self.c, self.log_r]

    def encode(self, src, src_pad, rng=None):
        return None

    def _prior(self, shape) -> GaussianSequence:
        b, t, d = shape
        return GaussianSequence(T.expand(self.m, shape), T.expand(T.exp(self.log_s), shape))

    def posterior(self, enc, y, rng=None) -> GaussianSequence:
        if self.q_mean is not None:
            return GaussianSequence(Tensor(self.q_mean), Tensor(self.q_std))
        mean, std = self.exact_posterior(np.asarray(y))
        return GaussianSequence(Tensor(mean), Tensor(std))

    def decoder_log_prob(self, enc, z, y, rng=None) -> Tensor:
        self.counter.decoder_passes += 1
        z = z if isinstance(z, Tensor) else Tensor(z)
        shape = z.shape
        r = T.expand(T.exp(self.log_r), shape)
        resid = (Tensor(np.asarray(y)) - z * T.expand(self.a, shape) - T.expand(self.c, shape)) / r
        per = resid * resid * -0.5 - T.log(r) - 0.5 * LOG_2PI
        return per.sum(axis=(1, 2))

    def prior_log_prob(self, enc, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z)
        return self._prior(z.shape).log_prob(z)

    def prior_kl(self, enc, q: GaussianSequence, z, rng=None) -> Tensor:
        return q.kl(self._prior(q.mean.shape))

    def length_loss(self, enc, padded_len) -> Tensor:
        return Tensor(np.zeros(()))

    # closed forms -------------------------------------------------------------
    def _arrays(self):
        return (self.m.data, np.exp(self.log_s.data), self.a.data, self.c.data,
                np.exp(self.log_r.data))

    def exact_posterior(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        m, s, a, c, r = self._arrays()
        prec = 1.0 / s ** 2 + a ** 2 / r ** 2
        mean = (m / s ** 2 + a * (y - c) / r ** 2) / prec
        return mean, np.broadcast_to(1.0 / np.sqrt(prec), y.shape).copy()

    def log_marginal(self, y: np.ndarray) -> np.ndarray:
        """Exact log p(y), per sequence."""
        m, s, a, c, r = self._arrays()
        var = a ** 2 * s ** 2 + r ** 2
        per = -0.5 * ((y - a * m - c) ** 2 / var + np.log(var) + LOG_2PI)
        return per.sum(axis=(1, 2))

    def analytic_elbo(self, y: np.ndarray) -> np.ndarray:
        """Exact ELBO of the current q, per sequence."""
        m, s, a, c, r = self._arrays()
        q = self.posterior(None, y)
        mu, sd = q.mean.data, q.std.data
        rec = -0.5 * (((y - a * mu - c) ** 2 + a ** 2 * sd ** 2) / r ** 2 + np.log(r ** 2) + LOG_2PI)
        kl = np.log(s / sd) + (sd ** 2 + (mu - m) ** 2) / (2 * s ** 2) - 0.5
        return (rec - kl).sum(axis=(1, 2))

    def sample(self, rng: np.random.Generator, shape: tuple) -> np.ndarray:
        m, s, a, c, r = self._arrays()
        z = m + s * rng.standard_normal(shape)
        return a * z + c + r * rng.standard_normal(shape)


def toy_batch(y: np.ndarray) -> ToyBatch:
    b, t, _ = y.shape
    return ToyBatch(np.ones((b, 1), dtype=np.int64), np.zeros((b, 1), bool), y, np.full(b, t))

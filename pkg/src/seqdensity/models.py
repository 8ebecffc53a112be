"""Network roles: source encoder, AR decoder, NAR decoder, posterior, length predictor."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import BOS, EOS, Batch
from .errors import ConfigError, LengthError
from .nn import (Embedding, LayerNorm, Linear, Module, Stack, WeightNormLinear,
                 sinusoid_positions)
from .tensor import Tensor

LENGTH_OFFSETS = 30
N_LENGTH_CLASSES = 2 * LENGTH_OFFSETS + 1
SIGMA_FLOOR = 1e-3
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    family: str = "ar"                 # ar | gauss | flow
    d_model: int = 64
    d_latent: int = 32
    d_filter: int = 128
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    posterior_layers: int = 2
    prior_layers: int = 2
    flow_depths: tuple = (4, 8, 6)
    flow_heads: int = 4
    mix_heads: int = 4
    vocab_size: int = 64
    max_len: int = 64
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.family not in ("ar", "gauss", "flow"):
            raise ConfigError(f"unknown model family {self.family!r}")
        if self.d_model % self.heads or self.d_model % self.flow_heads:
            raise ConfigError("d_model must be divisible by the head counts")
        if self.max_len < 8 or self.max_len % 4:
            raise ConfigError("max_len must be >= 8 and a multiple of 4")
        if self.family == "flow" and self.d_latent % self.mix_heads:
            raise ConfigError("d_latent must be divisible by mix_heads")
        object.__setattr__(self, "flow_depths", tuple(self.flow_depths))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flow_depths"] = list(self.flow_depths)
        return d


REGISTRY = {
    "ar-tiny": ModelConfig("ar", d_model=32, d_filter=64, heads=2, encoder_layers=1,
                           decoder_layers=1),
    "ar-small": ModelConfig("ar", d_model=64, d_filter=128, heads=2, encoder_layers=2,
                            decoder_layers=2),
    "ar-base": ModelConfig("ar", d_model=64, d_filter=256, heads=4, encoder_layers=3,
                           decoder_layers=3),
    "gauss-base-toy": ModelConfig("gauss", d_model=64, d_latent=32, d_filter=128, heads=4,
                                  encoder_layers=2, decoder_layers=2, posterior_layers=2,
                                  prior_layers=2),
    "gauss-large-toy": ModelConfig("gauss", d_model=64, d_latent=32, d_filter=256, heads=8,
                                   encoder_layers=2, decoder_layers=3, posterior_layers=3,
                                   prior_layers=2),
    "flow-small-toy": ModelConfig("flow", d_model=64, d_latent=32, d_filter=128, heads=4,
                                  encoder_layers=2, decoder_layers=2, posterior_layers=2,
                                  flow_depths=(4, 4, 2), flow_heads=4),
    "flow-base-toy": ModelConfig("flow", d_model=64, d_latent=32, d_filter=128, heads=4,
                                 encoder_layers=2, decoder_layers=2, posterior_layers=2,
                                 flow_depths=(4, 8, 6), flow_heads=4),
}


def get_config(name: str, **overrides) -> ModelConfig:
    if name not in REGISTRY:
        raise ConfigError(f"unknown model size {name!r}; known: {sorted(REGISTRY)}")
    return replace(REGISTRY[name], **overrides)


def count_params(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))


# -- domain types ------------------------------------------------------------
@dataclass
class EncodedSource:
    states: Tensor        # (B, S, d_model)
    pad: np.ndarray       # (B, S) True at padding
    lengths: np.ndarray   # (B,)

    @property
    def batch(self) -> int:
        return self.states.shape[0]

    def tile(self, n: int) -> "EncodedSource":
        """Repeat every row ``n`` times (row-major: item-major blocks)."""
        idx = np.repeat(np.arange(self.batch), n)
        return self.select(idx)

    def select(self, idx) -> "EncodedSource":
        idx = np.asarray(idx)
        return EncodedSource(self.states[idx], self.pad[idx], self.lengths[idx])


@dataclass
class GaussianSequence:
    """Diagonal Gaussian over a (B, T, d) latent block."""

    mean: Tensor
    std: Tensor

    def log_prob(self, z) -> Tensor:
        """Per-sequence log density, shape (B,)."""
        z = z if isinstance(z, Tensor) else Tensor(z)
        u = (z - self.mean) / self.std
        per = u * u * -0.5 - T.log(self.std) - 0.5 * LOG_2PI
        return per.sum(axis=(1, 2))

    def sample(self, rng: np.random.Generator) -> Tensor:
        """Reparameterised draw mean + std * eps."""
        eps = Tensor(rng.standard_normal(self.mean.shape))
        return self.mean + self.std * eps

    def kl(self, other: "GaussianSequence") -> Tensor:
        """Analytic KL[self || other] per sequence, shape (B,)."""
        var_ratio = (self.std / other.std) ** 2
        diff = (self.mean - other.mean) / other.std
        per = (var_ratio + diff * diff - 1.0) * 0.5 - T.log(self.std / other.std)
        return per.sum(axis=(1, 2))

    def kl_standard_normal(self) -> Tensor:
        per = (self.std * self.std + self.mean * self.mean - 1.0) * 0.5 - T.log(self.std)
        return per.sum(axis=(1, 2))


@dataclass
class LengthDistribution:
    logits: Tensor                     # (B, 61) over offsets -30..30

    def predict(self, src_lengths, max_len: int) -> np.ndarray:
        offsets = np.argmax(self.logits.data, axis=-1) - LENGTH_OFFSETS
        raw = np.clip(np.asarray(src_lengths) + offsets, 1, max_len)
        return np.minimum(-(-raw // 4) * 4, max_len)

    def probs(self) -> np.ndarray:
        e = np.exp(self.logits.data - self.logits.data.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)


def gaussian_head(out: Tensor, d_latent: int) -> GaussianSequence:
    mean = out[..., :d_latent]
    std = T.softplus(out[..., d_latent:]) + SIGMA_FLOOR
    return GaussianSequence(mean, std)


def _inverse_softplus(y: float) -> float:
    return math.log(math.expm1(y))


# -- shared pieces -------------------------------------------------------------
class SourceEncoder(Module):
    def __init__(self, cfg: ModelConfig, embed: Embedding, rng: np.random.Generator):
        self.embed = embed
        self.stack = Stack(cfg.encoder_layers, cfg.d_model, cfg.heads, cfg.d_filter, rng,
                           cross=False, dropout=cfg.dropout_rate)
        self.max_len = cfg.max_len
        self.d_model = cfg.d_model

    def __call__(self, src: np.ndarray, src_pad: np.ndarray, rng=None) -> EncodedSource:
        b, s = src.shape
        if s > self.max_len:
            raise LengthError(f"source length {s} exceeds max_len {self.max_len}")
        x = self.embed(src) + Tensor(sinusoid_positions(s, self.d_model))
        h = self.stack(x, src_pad, rng=rng)
        return EncodedSource(h, src_pad, (~src_pad).sum(axis=1))


class LengthPredictor(Module):
    """Two-layer MLP over mean-pooled source states, predicting T - T'."""

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.hidden = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, N_LENGTH_CLASSES, rng)

    def __call__(self, enc: EncodedSource) -> LengthDistribution:
        keep = (~enc.pad).astype(float)
        w = keep / keep.sum(axis=1, keepdims=True)
        pooled = (enc.states * Tensor(w[..., None].repeat(enc.states.shape[-1], -1))).sum(axis=1)
        return LengthDistribution(self.out(T.relu(self.hidden(pooled))))

    def loss(self, enc: EncodedSource, padded_len: np.ndarray) -> Tensor:
        """Mean cross-entropy of the true (padded) length offset."""
        offset = np.clip(np.asarray(padded_len) - enc.lengths, -LENGTH_OFFSETS, LENGTH_OFFSETS)
        return T.cross_entropy(self(enc).logits, offset + LENGTH_OFFSETS)


class PassCounter:
    """Counts sequential decoder forward passes (hardware-independent speed)."""

    def __init__(self):
        self.decoder_passes = 0

    def reset(self) -> None:
        self.decoder_passes = 0


# -- autoregressive model --------------------------------------------------------
class ARModel(Module):
    family = "ar"

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.embed = Embedding(cfg.vocab_size, cfg.d_model, rng)
        self.encoder = SourceEncoder(cfg, self.embed, rng)
        self.decoder = Stack(cfg.decoder_layers, cfg.d_model, cfg.heads, cfg.d_filter, rng,
                             cross=True, dropout=cfg.dropout_rate)
        self.out = Linear(cfg.d_model, cfg.vocab_size, rng)
        self.counter = PassCounter()

    def encode(self, src: np.ndarray, src_pad: np.ndarray, rng=None) -> EncodedSource:
        return self.encoder(src, src_pad, rng)

    def logits(self, enc: EncodedSource, tgt_in: np.ndarray, rng=None) -> Tensor:
        t = tgt_in.shape[1]
        if t > self.cfg.max_len + 1:
            raise LengthError(f"target length {t} exceeds max_len {self.cfg.max_len}")
        x = self.embed(tgt_in) + Tensor(sinusoid_positions(t, self.cfg.d_model))
        h = self.decoder(x, None, enc.states, enc.pad, causal=True, rng=rng)
        return self.out(h)

    def token_log_probs(self, enc: EncodedSource, tgt: np.ndarray, rng=None) -> Tensor:
        """log p(y_t | y_<t, x) for every target position, shape (B, T)."""
        tgt_in = np.concatenate([np.full((tgt.shape[0], 1), BOS), tgt[:, :-1]], axis=1)
        return T.token_log_probs(self.logits(enc, tgt_in, rng), tgt)

    def next_log_probs(self, enc: EncodedSource, prefixes: np.ndarray) -> np.ndarray:
        """Next-token log-probabilities given BOS-led prefixes, shape (N, V)."""
        self.counter.decoder_passes += 1
        logits = self.logits(enc, prefixes).data[:, -1]
        shifted = logits - logits.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def loss(self, batch: Batch, rng=None) -> Tensor:
        """Mean per-token NLL over positions up to and including the first EOS."""
        enc = self.encode(batch.src, batch.src_pad, rng)
        mask = np.arange(batch.tgt.shape[1])[None, :] < batch.raw_len[:, None]
        lp = self.token_log_probs(enc, batch.tgt, rng)
        return -(lp * Tensor(mask.astype(float))).sum() * (1.0 / mask.sum())


def ar_log_prob(model: ARModel, enc: EncodedSource, tgt: np.ndarray) -> Tensor:
    return model.token_log_probs(enc, tgt)


# -- latent variable model ----------------------------------------------------------
class Posterior(Module):
    """q(z | y, x): Transformer over target embeddings attending to the source."""

    def __init__(self, cfg: ModelConfig, embed: Embedding, rng: np.random.Generator):
        self.embed = embed
        self.stack = Stack(cfg.posterior_layers, cfg.d_model, cfg.heads, cfg.d_filter, rng,
                           cross=True, dropout=cfg.dropout_rate)
        self.head = WeightNormLinear(cfg.d_model, 2 * cfg.d_latent, rng)
        self.head.bias.data[cfg.d_latent:] = _inverse_softplus(1.0 - SIGMA_FLOOR)
        self.cfg = cfg

    def __call__(self, enc: EncodedSource, tgt: np.ndarray, rng=None) -> GaussianSequence:
        t = tgt.shape[1]
        x = self.embed(tgt) + Tensor(sinusoid_positions(t, self.cfg.d_model))
        h = self.stack(x, None, enc.states, enc.pad, rng=rng)
        return gaussian_head(self.head(h), self.cfg.d_latent)


class NARDecoder(Module):
    """p(y | z, x) = prod_t p(y_t | z, x), all positions in one pass."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.inp = Linear(cfg.d_latent, cfg.d_model, rng)
        self.stack = Stack(cfg.decoder_layers, cfg.d_model, cfg.heads, cfg.d_filter, rng,
                           cross=True, dropout=cfg.dropout_rate)
        self.out = Linear(cfg.d_model, cfg.vocab_size, rng)
        self.cfg = cfg

    def __call__(self, enc: EncodedSource, z: Tensor, rng=None) -> Tensor:
        t = z.shape[1]
        if t > self.cfg.max_len:
            raise LengthError(f"latent length {t} exceeds max_len {self.cfg.max_len}")
        x = self.inp(z) + Tensor(sinusoid_positions(t, self.cfg.d_model))
        return self.out(self.stack(x, None, enc.states, enc.pad, rng=rng))


class LatentVariableModel(Module):
    """Non-autoregressive decoder with a Gaussian or flow conditional prior."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        from .priors import FlowPrior, GaussianPrior

        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.family = cfg.family
        self.embed = Embedding(cfg.vocab_size, cfg.d_model, rng)
        self.encoder = SourceEncoder(cfg, self.embed, rng)
        self.length = LengthPredictor(cfg.d_model, rng)
        self.posterior_net = Posterior(cfg, self.embed, rng)
        self.decoder = NARDecoder(cfg, rng)
        if cfg.family == "gauss":
            self.prior = GaussianPrior(cfg, rng)
        elif cfg.family == "flow":
            self.prior = FlowPrior(cfg, rng)
        else:
            raise ConfigError(f"family {cfg.family!r} is not a latent variable model")
        self.counter = PassCounter()

    # roles -------------------------------------------------------------
    def encode(self, src: np.ndarray, src_pad: np.ndarray, rng=None) -> EncodedSource:
        return self.encoder(src, src_pad, rng)

    def posterior(self, enc: EncodedSource, tgt: np.ndarray, rng=None) -> GaussianSequence:
        return self.posterior_net(enc, tgt, rng)

    def decode_logits(self, enc: EncodedSource, z, rng=None) -> Tensor:
        self.counter.decoder_passes += 1
        return self.decoder(enc, z if isinstance(z, Tensor) else Tensor(z), rng)

    def decoder_log_prob(self, enc: EncodedSource, z, tgt: np.ndarray, rng=None) -> Tensor:
        """log p(y | z, x) per sequence, shape (B,)."""
        logits = self.decode_logits(enc, z, rng)
        if logits.shape[1] != tgt.shape[1]:
            raise LengthError(f"latent length {logits.shape[1]} != target length {tgt.shape[1]}")
        return T.token_log_probs(logits, tgt).sum(axis=1)

    def prior_log_prob(self, enc: EncodedSource, z) -> Tensor:
        return self.prior.log_prob(enc, z if isinstance(z, Tensor) else Tensor(z))

    def prior_kl(self, enc: EncodedSource, q: GaussianSequence, z: Tensor, rng=None) -> Tensor:
        """KL[q || p] per sequence: analytic for the Gaussian prior, one-sample otherwise."""
        if self.family == "gauss":
            return q.kl(self.prior(enc, z.shape[1], rng))
        return q.log_prob(z) - self.prior.log_prob(enc, z, rng)

    def prior_mean(self, enc: EncodedSource, length: int) -> np.ndarray:
        with T.no_grad():
            return self.prior.mean(enc, length)

    def prior_sample(self, enc: EncodedSource, length: int, rng: np.random.Generator) -> np.ndarray:
        with T.no_grad():
            return self.prior.sample(enc, length, rng)

    def predict_length(self, enc: EncodedSource) -> LengthDistribution:
        return self.length(enc)

    def length_loss(self, enc: EncodedSource, padded_len) -> Tensor:
        return self.length.loss(enc, padded_len)

    def extra_state(self) -> dict:
        return self.prior.extra_state() if hasattr(self.prior, "extra_state") else {}

    def load_extra_state(self, state: dict) -> None:
        if hasattr(self.prior, "load_extra_state"):
            self.prior.load_extra_state(state)


def build_model(cfg: ModelConfig, seed: int = 0) -> Module:
    return ARModel(cfg, seed) if cfg.family == "ar" else LatentVariableModel(cfg, seed)

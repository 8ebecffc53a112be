"""Small builders and oracles shared by the test modules."""

import math
from dataclasses import replace

import numpy as np

from seqdensity.models import EncodedSource, ModelConfig
from seqdensity.priors import FlowPrior
from seqdensity.tensor import Tensor


def small_flow(d=4, depths=(2, 2, 2), mix_heads=2, pattern=None, seed=0, jitter=0.3):
    """A tiny conditional flow with perturbed (non-identity) parameters."""
    cfg = ModelConfig("flow", d_model=16, d_latent=d, d_filter=32, heads=2, flow_heads=2,
                      mix_heads=mix_heads, flow_depths=depths, dropout_rate=0.0)
    rng = np.random.default_rng(seed)
    flow = FlowPrior(cfg, rng)
    if pattern is not None:
        for steps in flow.levels:
            for st in steps:
                c = st.coupling
                c.spec = replace(c.spec, pattern=pattern)
    for p in flow.parameters():
        p.data = p.data + jitter * rng.standard_normal(p.shape)
    flow.eval()
    return flow


def random_source(batch, d_model=16, length=5, seed=1):
    rng = np.random.default_rng(seed)
    return EncodedSource(Tensor(rng.standard_normal((batch, length, d_model))),
                         np.zeros((batch, length), dtype=bool), np.full(batch, length))


def tiny_config(family, vocab_size=12, **kw):
    base = dict(d_model=16, d_latent=4, d_filter=32, heads=2, flow_heads=2, mix_heads=2,
                encoder_layers=1, decoder_layers=1, posterior_layers=1, prior_layers=1,
                flow_depths=(1, 1, 1), vocab_size=vocab_size, max_len=16, dropout_rate=0.0)
    base.update(kw)
    return ModelConfig(family, **base)


def tiny_pairs(kind="synonym", n=8, vocab_size=12, min_len=2, max_len=6, seed=0):
    from seqdensity.data import TaskSpec, generate_dataset
    spec = TaskSpec(kind, vocab_size=vocab_size, min_len=min_len, max_len=max_len, seed=seed)
    return generate_dataset(spec, n, n, n)


class TabularAR:
    """Autoregressive model given by an explicit next-token table over a V-token alphabet.

    ``table(prefix) -> probabilities`` for prefixes excluding BOS. Sources are ignored.
    """

    family = "ar"

    def __init__(self, table, vocab):
        from seqdensity.models import PassCounter
        self.table = table
        self.vocab = vocab
        self.counter = PassCounter()

    def encode(self, src, src_pad, rng=None):
        b = src.shape[0]
        return EncodedSource(Tensor(np.zeros((b, 1, 1))), np.zeros((b, 1), bool), np.ones(b))

    def next_log_probs(self, enc, prefixes):
        self.counter.decoder_passes += 1
        return np.log(np.array([self.table(tuple(int(t) for t in row[1:])) for row in prefixes]))

    def score(self, seq):
        return float(sum(np.log(self.table(tuple(seq[:i]))[t]) for i, t in enumerate(seq)))


def random_table(rng, vocab=3, concentration=0.5):
    cache = {}

    def table(prefix):
        if prefix not in cache:
            cache[prefix] = rng.dirichlet(np.full(vocab, concentration))
        return cache[prefix]
    return table


def garden_path_table(first=(0.55, 0.45, 0.0), tail=0.9, vocab=3, good=1):
    """Greedy takes token 0 first (flat continuations); the optimum starts with ``good``."""
    flat = np.full(vocab, 1.0 / vocab)

    def table(prefix):
        if not prefix:
            p = np.array(first, float) + 1e-3
            return p / p.sum()
        if prefix[0] == good:
            p = np.full(vocab, (1 - tail) / (vocab - 1))
            p[(prefix[-1] + 1) % vocab] = tail
            return p
        return flat
    return table


def ref_bleu(hyps, refss, smooth=True):
    """Straight-line corpus BLEU-4 used as an independent oracle."""
    hl = rl = 0
    match = [0] * 4
    total = [0] * 4
    for h, refs in zip(hyps, refss):
        hl += len(h)
        rl += sorted(refs, key=lambda r: (abs(len(r) - len(h)), len(r)))[0].__len__()
        for n in range(1, 5):
            grams = [tuple(h[i:i + n]) for i in range(len(h) - n + 1)]
            for g in set(grams):
                best = max(sum(1 for i in range(len(r) - n + 1) if tuple(r[i:i + n]) == g)
                           for r in refs)
                match[n - 1] += min(grams.count(g), best)
            total[n - 1] += len(grams)
    if hl == 0:
        return 0.0
    ps = []
    for n in range(4):
        m, t = match[n], total[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        if m == 0:
            return 0.0
        ps.append(m / t)
    bp = 1.0 if hl > rl else math.exp(1 - rl / hl)
    return 100 * bp * math.exp(sum(math.log(p) for p in ps) / 4)

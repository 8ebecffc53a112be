import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seqdensity.data import (EOS, PAD, TaskSpec, Vocab, batch_iterator, collate,
                             conditional_unigram_entropy, generate_dataset, load_dataset,
                             optimal_token_ll, pad_to_multiple, preprocess, raw_length,
                             sample_target, save_dataset, strip_eos, true_conditional_entropy)
from seqdensity.errors import ConfigError, EmptyDatasetError, MissingArtifactError


def test_copy_and_reverse():
    sp = generate_dataset(TaskSpec("copy", 16, 2, 9), 20, 5, 5)
    assert all(p.content == strip_eos(p.src) for p in sp.train)
    sp = generate_dataset(TaskSpec("reverse", 16, 2, 9), 20, 5, 5)
    assert all(p.content == tuple(reversed(strip_eos(p.src))) for p in sp.train)


def test_synonym_references_enumerated():
    spec = TaskSpec("synonym", 64, 3, 3, m=2)
    sp = generate_dataset(spec, 5, 5, 5)
    for p in sp.test:
        assert len(set(p.refs)) == 8
        assert p.content in p.refs
        for ref in p.refs:
            assert all(t in spec.synonyms(s) for s, t in zip(strip_eos(p.src), ref))


def test_references_sampled_above_cap():
    spec = TaskSpec("synonym", 64, 12, 12, m=2, ref_cap=100)
    p = generate_dataset(spec, 1, 1, 1).test[0]
    assert len(p.refs) == 2 and p.refs[0] == p.content


def test_preprocess_rules():
    out = preprocess([((3, EOS), (3, 4, 5, 6, 7, EOS))])
    assert out[0].tgt == (3, 4, 5, 6, 7, EOS, EOS, EOS) and out[0].raw_len == 6
    assert preprocess([((3,), (3, 4, 5, EOS))])[0].tgt == (3, 4, 5, EOS)
    kept = preprocess([((3,) * 64, (4,) * 64), ((3,) * 65, (4,) * 3)])
    assert len(kept) == 1 and kept[0].padded_len == 64
    with pytest.raises(EmptyDatasetError):
        preprocess([((3,) * 65, (4,))])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(3, 9), min_size=0, max_size=30))
def test_padding_invariants(content):
    tgt = pad_to_multiple(content + [EOS])
    assert len(tgt) % 4 == 0 and len(tgt) - len(content) - 1 < 4
    assert raw_length(tgt) == len(content) + 1
    assert strip_eos(tgt) == tuple(content)


def test_entropy_values():
    spec = TaskSpec("synonym", 64, 4, 4, m=2)
    assert true_conditional_entropy(spec, 4) == pytest.approx(4 * math.log(2))
    assert true_conditional_entropy(TaskSpec("synonym", 64, 4, 4, m=1), 4) == 0.0
    assert true_conditional_entropy(TaskSpec("copy", 64, 4, 4), 4) == 0.0


def test_empirical_entropy_matches_analytic():
    spec = TaskSpec("synonym", 64, 4, 4, m=2)
    rng = np.random.default_rng(0)
    content = [3, 4, 5, 6]
    counts = Counter(tuple(sample_target(spec, content, rng)) for _ in range(100_000))
    probs = np.array(list(counts.values())) / 100_000
    h = float(-(probs * np.log(probs)).sum())
    assert abs(h - true_conditional_entropy(spec, 4)) / true_conditional_entropy(spec, 4) < 0.02


def test_optimal_token_ll_and_unigram_entropy():
    spec = TaskSpec("synonym", 64, 3, 7, m=2)
    sp = generate_dataset(spec, 2000, 10, 10)
    n_content = sum(len(p.content) for p in sp.train)
    expect = -n_content * math.log(2) / sum(p.raw_len for p in sp.train)
    assert optimal_token_ll(spec, sp.train) == pytest.approx(expect)
    assert conditional_unigram_entropy(sp.train) == pytest.approx(math.log(2), rel=0.01)


def test_generation_is_deterministic_and_vocab_reserved():
    spec = TaskSpec("synonym", 40, 2, 6, seed=3)
    a, b = generate_dataset(spec, 30, 5, 5), generate_dataset(spec, 30, 5, 5)
    assert a.train == b.train and a.test == b.test
    assert all(min(p.src + p.tgt) >= EOS for p in a.train)
    with pytest.raises(ConfigError):
        TaskSpec("synonym", 5)
    with pytest.raises(ValueError):
        Vocab(["a", "b", "c"])


def test_batches_cover_epoch_and_bucket():
    sp = generate_dataset(TaskSpec("synonym", 64, 1, 14), 203, 2, 2)
    ids = []
    for b in batch_iterator(sp.train, 16, seed=1):
        assert b.uniform and len(set(b.padded_len)) == 1
        ids.extend(b.index.tolist())
    assert sorted(ids) == list(range(203))
    order = lambda: [tuple(b.index) for b in batch_iterator(sp.train, 16, seed=1)]
    assert order() == order()
    assert order() != [tuple(b.index) for b in batch_iterator(sp.train, 16, seed=1, epoch=1)]


def test_collate_pads():
    sp = generate_dataset(TaskSpec("copy", 16, 1, 9), 10, 2, 2)
    b = collate(sp.train)
    assert b.src.shape[0] == 10 and np.all(b.src_pad == (b.src == PAD))


def test_save_load_round_trip(tmp_path):
    sp = generate_dataset(TaskSpec("synonym", 32, 2, 5), 20, 4, 4)
    save_dataset(tmp_path / "d", sp, {"note": 1})
    back = load_dataset(tmp_path / "d")
    assert back.train == sp.train and back.test == sp.test and back.spec == sp.spec
    first = (tmp_path / "d" / "test.refs").read_bytes()
    save_dataset(tmp_path / "e", generate_dataset(sp.spec, 20, 4, 4), {"note": 1})
    assert (tmp_path / "e" / "test.refs").read_bytes() == first
    with pytest.raises(MissingArtifactError):
        load_dataset(tmp_path / "nothing")

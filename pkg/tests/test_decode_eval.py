import numpy as np
import pytest
from hypothesis import given, strategies as st

from peso_cl.adapters import AdapterStack, LoraAdapter
from peso_cl.decode_eval import (CodeTrie, RankedList, constrained_beam, decode_many, hit_at_k,
                                 metrics_from_items, ndcg_at_k)
from peso_cl.errors import PreconditionError
from peso_cl.model import SITES, ModelDims, ToyRecModel, forward
from peso_cl.proximal import log_softmax


def _setup(seed=0, n_items=20, d=3, L=3, K=3):
    rng = np.random.default_rng(seed)
    dims = ModelDims(d=d, rank=2, L=L, K=K)
    model = ToyRecModel.init(dims, rng)
    model.W_out = [w * 3.0 for w in model.W_out]     # sharpen so ranks are well separated
    stacks = {s: AdapterStack(s, "sum_all", LoraAdapter(s, rng.normal(size=(2, d)),
                                                        0.3 * rng.normal(size=(d, 2))))
              for s in SITES}
    all_codes = np.array(np.meshgrid(*[range(K)] * L, indexing="ij")).reshape(L, -1).T
    codes = all_codes[rng.permutation(len(all_codes))[:n_items]]
    return model, stacks, CodeTrie(codes, dims.ks), rng


def exhaustive(model, stacks, trie, history):
    """Score every item by the sum of its per-token log-probabilities."""
    hist = [tuple(trie.codes[i]) for i in history]
    scores = []
    for item, code in enumerate(trie.codes):
        z = forward(model, stacks, hist, list(code))
        scores.append(sum(float(log_softmax(zj)[t]) for zj, t in zip(z, code)))
    scores = np.array(scores)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return order, scores


@pytest.mark.parametrize("seed", range(5))
def test_wide_beam_matches_exhaustive(seed):
    model, stacks, trie, rng = _setup(seed)
    history = list(rng.integers(0, len(trie), size=6))
    order, scores = exhaustive(model, stacks, trie, history)
    ranked = constrained_beam(model, stacks, history, trie, beam_width=27, k=10)
    assert ranked.items() == list(order[:10])
    assert np.allclose([s for _, s in ranked.entries], scores[order[:10]], atol=1e-12, rtol=0)


def test_beam_only_returns_trie_items():
    model, stacks, trie, rng = _setup(7, n_items=11)
    ranked = constrained_beam(model, stacks, [0, 3, 5], trie, beam_width=10, k=10)
    assert len(set(ranked.items())) == len(ranked) == 10
    assert all(0 <= i < 11 for i in ranked.items())


def test_single_item_trie():
    model, stacks, _, _ = _setup()
    trie = CodeTrie([[2, 0, 1]], (3, 3, 3))
    ranked = constrained_beam(model, stacks, [0], trie, beam_width=5, k=5)
    assert ranked.items() == [0]


def test_uniform_logits_return_smallest_ids():
    model, stacks, trie, _ = _setup(n_items=27)
    model.W_out = [np.zeros_like(w) for w in model.W_out]
    ranked = constrained_beam(model, stacks, [4, 9], trie, beam_width=10, k=10)
    assert ranked.items() == list(range(10))
    assert all(s == pytest.approx(-3 * np.log(3)) for _, s in ranked.entries)


def test_decode_many_matches_single():
    model, stacks, trie, rng = _setup(2)
    hists = [list(rng.integers(0, len(trie), size=int(rng.integers(1, 30)))) for _ in range(9)]
    batch = decode_many(model, stacks, hists, trie, beam_width=12, k=10)
    for row, h in zip(batch, hists):
        assert list(row) == constrained_beam(model, stacks, h, trie, 12, 10).items()


def test_beam_preconditions():
    model, stacks, trie, _ = _setup()
    with pytest.raises(PreconditionError):
        constrained_beam(model, stacks, [0], trie, beam_width=5, k=10)
    with pytest.raises(PreconditionError):
        constrained_beam(model, stacks, [0], CodeTrie(np.zeros((0, 3), int), (3, 3, 3)))


def test_trie_validation():
    with pytest.raises(PreconditionError):
        CodeTrie([[0, 1], [0, 1]], (2, 2))
    with pytest.raises(PreconditionError):
        CodeTrie([[0, 2]], (2, 2))
    trie = CodeTrie([[1, 0], [0, 1]], (2, 2))
    assert trie.contains((1, 0)) and not trie.contains((1, 1)) and not trie.contains((5, 0))
    assert list(trie.subtree_min[1]) == [1, 0]


def test_metric_examples():
    ranked = RankedList([(7, -1.0), (3, -2.0), (9, -3.0)])
    assert hit_at_k(ranked, 3, 2) == 1 and hit_at_k(ranked, 9, 2) == 0
    assert ndcg_at_k(ranked, 7, 3) == 1.0
    assert ndcg_at_k(ranked, 3, 3) == pytest.approx(1 / np.log2(3))
    assert ndcg_at_k(ranked, 9, 3) == 0.5
    assert ndcg_at_k(ranked, 4, 3) == 0.0
    with pytest.raises(PreconditionError):
        ndcg_at_k(ranked, 7, 5)


def test_metrics_from_items_by_hand():
    items = [[1, 2, 3, 4, 5, 6, 7, 8, 9, 10], [10, 9, 8, 7, 6, 5, 4, 3, 2, 1]]
    out = metrics_from_items(items, [3, 1], ks=(5, 10))
    assert out[("hit", 5)] == 0.5 and out[("hit", 10)] == 1.0
    assert out[("ndcg", 5)] == pytest.approx(0.5 * 0.5)
    assert out[("ndcg", 10)] == pytest.approx(0.5 * (0.5 + 1 / np.log2(11)))


@given(st.lists(st.integers(0, 30), min_size=10, max_size=10, unique=True), st.integers(0, 40))
def test_metrics_monotone_in_k(items, truth):
    h = [hit_at_k(items, truth, k) for k in range(1, 11)]
    n = [ndcg_at_k(items, truth, k) for k in range(1, 11)]
    assert all(a <= b for a, b in zip(h, h[1:]))
    assert all(a <= b for a, b in zip(n, n[1:]))
    assert all(x <= y for x, y in zip(n, h))

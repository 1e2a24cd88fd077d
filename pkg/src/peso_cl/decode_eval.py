"""Trie-constrained beam decoding and Hit@k / NDCG@k."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError
from .model import encode, site_weights
from .proximal import log_softmax

KS = (5, 10)
BEAM_WIDTH = 20
CHUNK = 512


class CodeTrie:
    """L-level prefix tree over item codes.

    Nodes of level j are numbered in lexicographic order of their prefixes.
    ``child[j][node, token]`` is the level-(j+1) node or -1, and
    ``subtree_min[j][node]`` the smallest item id below a node; at the leaf
    level that is the item itself.
    """

    def __init__(self, codes, ks):
        codes = np.asarray(codes, dtype=np.int64)
        self.ks = tuple(int(k) for k in ks)
        L = len(self.ks)
        if codes.ndim != 2 or codes.shape[1] != L:
            raise PreconditionError(f"codes must be an items x {L} array")
        if codes.size and (codes.min() < 0 or np.any(codes >= np.array(self.ks))):
            raise PreconditionError("code token outside its codebook")
        if len({tuple(c) for c in codes.tolist()}) != codes.shape[0]:
            raise PreconditionError("two items share a code")
        self.codes = codes
        self.n_items = codes.shape[0]
        self.child = []
        self.subtree_min = []
        item_ids = np.arange(self.n_items)
        # level j nodes are the distinct prefixes of length j (level 0 = root)
        parent_of = np.zeros(self.n_items, dtype=np.int64)
        n_parents = 1
        mins = [np.array([item_ids.min()]) if self.n_items else np.zeros(0, np.int64)]
        for j in range(L):
            prefixes = codes[:, :j + 1]
            uniq, node_of = np.unique(prefixes, axis=0, return_inverse=True)
            node_of = node_of.ravel()
            table = np.full((n_parents, self.ks[j]), -1, dtype=np.int64)
            table[parent_of, codes[:, j]] = node_of
            self.child.append(table)
            m = np.full(uniq.shape[0], np.iinfo(np.int64).max)
            np.minimum.at(m, node_of, item_ids)
            mins.append(m)
            parent_of, n_parents = node_of, uniq.shape[0]
        self.subtree_min = mins
        self.leaf_item = np.full(n_parents, -1, dtype=np.int64)
        if self.n_items:
            self.leaf_item[parent_of] = item_ids

    @property
    def L(self):
        return len(self.ks)

    def __len__(self):
        return self.n_items

    def contains(self, code):
        node = 0
        for j, tok in enumerate(code):
            if not 0 <= tok < self.ks[j]:
                return False
            node = self.child[j][node, tok]
            if node < 0:
                return False
        return True


@dataclass
class RankedList:
    entries: list   # (item_id, log_score), best first

    def items(self):
        return [i for i, _ in self.entries]

    def __len__(self):
        return len(self.entries)


def _beam_search(model, stacks, counts, trie: CodeTrie, beam_width, k):
    """Batched search for rows of pooling weights; returns (items, scores) of shape n x k."""
    n = counts.shape[0]
    w_enc, w_dec = site_weights(model, stacks)
    state = np.tanh((counts @ model.embed) @ w_enc.T)[:, None, :]   # n x b x d
    nodes = np.zeros((n, 1), dtype=np.int64)
    scores = np.zeros((n, 1))
    rows = np.arange(n)[:, None]
    for j in range(trie.L):
        lp = log_softmax(state @ model.W_out[j].T)                  # n x b x K
        kids = trie.child[j][np.maximum(nodes, 0)]                   # n x b x K
        ok = (kids >= 0) & (nodes >= 0)[:, :, None]
        cand = np.where(ok, scores[:, :, None] + lp, -np.inf)
        width = cand.shape[1] * cand.shape[2]
        cand = cand.reshape(n, width)
        kid_flat = kids.reshape(n, width)
        tie = np.where(kid_flat >= 0, trie.subtree_min[j + 1][np.maximum(kid_flat, 0)],
                       np.iinfo(np.int64).max)
        order = np.lexsort((tie, -cand), axis=-1)
        keep = order[:, :min(beam_width, width)]
        scores = np.take_along_axis(cand, keep, axis=1)
        nodes = np.where(np.isfinite(scores), np.take_along_axis(kid_flat, keep, axis=1), -1)
        if j < trie.L - 1:
            b_idx = keep // trie.ks[j]
            tok = keep % trie.ks[j]
            prev = state[rows, b_idx]
            x = prev + model.embed[model.offsets[j] + tok]
            state = np.tanh(x @ w_dec.T)
    items = np.where(nodes >= 0, trie.leaf_item[np.maximum(nodes, 0)], -1)
    return items[:, :k], scores[:, :k]


def constrained_beam(model, stacks, history, trie: CodeTrie, beam_width=BEAM_WIDTH, k=10,
                     window=20) -> RankedList:
    """Top-k items for one history of item ids under the code trie."""
    if len(trie) == 0:
        raise PreconditionError("trie is empty")
    if beam_width < k:
        raise PreconditionError(f"beam_width {beam_width} < k {k}")
    batch = encode([history], [0], trie.codes, trie.ks, window)
    items, scores = _beam_search(model, stacks, batch.counts, trie, beam_width, k)
    return RankedList([(int(i), float(s)) for i, s in zip(items[0], scores[0]) if i >= 0])


def decode_many(model, stacks, histories, trie, beam_width=BEAM_WIDTH, k=10, window=20):
    """Item ids (n x k, -1 padded) for many histories, processed in chunks."""
    if len(trie) == 0:
        raise PreconditionError("trie is empty")
    if beam_width < k:
        raise PreconditionError(f"beam_width {beam_width} < k {k}")
    out = []
    for start in range(0, len(histories), CHUNK):
        hs = histories[start:start + CHUNK]
        batch = encode(hs, [0] * len(hs), trie.codes, trie.ks, window)
        out.append(_beam_search(model, stacks, batch.counts, trie, beam_width, k)[0])
    return np.concatenate(out, axis=0) if out else np.zeros((0, k), np.int64)


def _rank_of(ranked, truth, k):
    items = ranked.items() if isinstance(ranked, RankedList) else list(ranked)
    if k > len(items):
        raise PreconditionError(f"k={k} exceeds list length {len(items)}")
    for pos, item in enumerate(items[:k], start=1):
        if item == truth:
            return pos
    return None


def hit_at_k(ranked, truth, k) -> int:
    return int(_rank_of(ranked, truth, k) is not None)


def ndcg_at_k(ranked, truth, k) -> float:
    r = _rank_of(ranked, truth, k)
    return 0.0 if r is None else 1.0 / np.log2(r + 1)


def metrics_from_items(items, truths, ks=KS):
    """Mean Hit@k and NDCG@k over rows of a decoded item matrix."""
    items = np.asarray(items)
    truths = np.asarray(truths)
    if items.shape[0] == 0:
        raise PreconditionError("no test pairs to evaluate")
    match = items == truths[:, None]
    out = {}
    for k in ks:
        if k > items.shape[1]:
            raise PreconditionError(f"k={k} exceeds list length {items.shape[1]}")
        m = match[:, :k]
        gain = (m / np.log2(np.arange(2, k + 2))).sum(axis=1)
        out[("hit", k)] = float(m.any(axis=1).mean())
        out[("ndcg", k)] = float(gain.mean())
    return out


def evaluate_pairs(model, stacks, pairs, trie, ks=KS, beam_width=BEAM_WIDTH):
    if len(pairs) == 0:
        raise PreconditionError("no test pairs to evaluate")
    kmax = max(ks)
    items = decode_many(model, stacks, pairs.histories, trie, max(beam_width, kmax), kmax)
    return metrics_from_items(items, pairs.targets, ks)


def evaluate_block(model, stacks, block, trie, ks=KS, beam_width=BEAM_WIDTH, which="test"):
    """Hit@k and NDCG@k averaged over a block's test (or validation) users."""
    pairs = block.test_pairs if which == "test" else block.val_pairs
    return evaluate_pairs(model, stacks, pairs, trie, ks, beam_width)

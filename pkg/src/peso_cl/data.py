"""Interaction logs: synthetic drifting preferences, CSV ingestion, splits and pairs."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, PreconditionError, SplitError

WINDOW = 20
MIN_INTERACTIONS = 5


@dataclass
class InteractionLog:
    users: np.ndarray          # dense user ids
    items: np.ndarray          # dense item ids
    timestamps: np.ndarray     # seconds, non-decreasing
    user_names: list = None    # raw ids, indexed by dense id
    item_names: list = None
    n_users: int = 0
    n_items: int = 0
    item_clusters: np.ndarray = None
    mixtures: np.ndarray = None       # users x stages x clusters (generated logs only)
    innovations: np.ndarray = None    # users x stages x clusters

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if not self.n_users:
            self.n_users = int(self.users.max()) + 1 if self.users.size else 0
        if not self.n_items:
            self.n_items = int(self.items.max()) + 1 if self.items.size else 0

    def __len__(self):
        return int(self.users.size)

    def records(self):
        return list(zip(self.users.tolist(), self.items.tolist(), self.timestamps.tolist()))

    def user_sequences(self):
        """user -> record indices in time order."""
        order = np.argsort(self.users, kind="stable")
        bounds = np.flatnonzero(np.diff(self.users[order])) + 1
        out = {}
        for chunk in np.split(order, bounds):
            if chunk.size:
                out[int(self.users[chunk[0]])] = chunk
        return out


# ------------------------------------------------------------------ generation

@dataclass
class DriftSpec:
    """Cluster-mixture drift: pi_t = alpha_t pi_{t-1} + (1 - alpha_t) q_t.

    ``stage_sizes`` counts interactions per user per stage. Innovations
    ``q_t`` are Dirichlet draws; with ``trend_strength > 0`` their base measure
    is tilted toward a stage-level trend shared by all users, so the
    population's favourite clusters move between stages. ``trend_strength=0``
    gives the symmetric Dirichlet.
    """
    n_users: int = 2000
    n_items: int = 256
    n_clusters: int = 16
    stage_sizes: tuple = (30, 5, 5, 5, 5)
    alpha: object = 0.7
    dirichlet_conc: float = 3.0
    trend_strength: float = 3.0
    stage_span: int = 1_000_000
    seed: int = 0

    def alphas(self):
        t = len(self.stage_sizes)
        if np.isscalar(self.alpha):
            out = [float(self.alpha)] * t
        else:
            out = [float(a) for a in self.alpha]
        if len(out) != t or any(not 0.0 <= a <= 1.0 for a in out):
            raise PreconditionError(f"alpha must give {t} values in [0, 1]")
        return out


def _softmax(x):
    z = np.exp(x - x.max())
    return z / z.sum()


def generate_drift(spec: DriftSpec) -> InteractionLog:
    rng = np.random.default_rng(spec.seed)
    n_u, n_i, n_c = spec.n_users, spec.n_items, spec.n_clusters
    if n_c > n_i:
        raise PreconditionError("more clusters than items")
    alphas = spec.alphas()
    n_t = len(spec.stage_sizes)
    if any(s > spec.stage_span for s in spec.stage_sizes):
        raise PreconditionError("stage_span too short for distinct timestamps")
    item_cluster = rng.permutation(n_i) % n_c
    members = [np.flatnonzero(item_cluster == c) for c in range(n_c)]
    trends = [_softmax(spec.trend_strength * rng.normal(size=n_c)) for _ in range(n_t)]

    mixtures = np.zeros((n_u, n_t, n_c))
    innovations = np.zeros((n_u, n_t, n_c))
    for t in range(n_t):
        conc = np.maximum(spec.dirichlet_conc * n_c * trends[t], 1e-3)
        q = rng.dirichlet(conc, size=n_u)
        innovations[:, t] = q
        if t == 0:
            mixtures[:, 0] = q
        else:
            mixtures[:, t] = alphas[t] * mixtures[:, t - 1] + (1.0 - alphas[t]) * q

    users, items, stamps = [], [], []
    for t in range(n_t):
        n = spec.stage_sizes[t]
        if n == 0:
            continue
        cum = np.cumsum(mixtures[:, t], axis=1)
        cum[:, -1] = 1.0
        u = rng.random((n_u, n))
        clusters = np.minimum((u[:, :, None] >= cum[:, None, :]).sum(-1), n_c - 1)
        pick = rng.random((n_u, n))
        sizes = np.array([m.size for m in members])
        within = np.minimum((pick * sizes[clusters]).astype(np.int64), sizes[clusters] - 1)
        it = np.array([[members[c][k] for c, k in zip(cr, kr)]
                       for cr, kr in zip(clusters, within)], dtype=np.int64)
        offs = np.sort(np.stack([rng.choice(spec.stage_span, size=n, replace=False)
                                 for _ in range(n_u)]), axis=1)
        users.append(np.repeat(np.arange(n_u), n))
        items.append(it.ravel())
        stamps.append((t * spec.stage_span + offs).ravel())
    users = np.concatenate(users)
    items = np.concatenate(items)
    stamps = np.concatenate(stamps).astype(np.float64)
    order = np.lexsort((users, stamps))
    return InteractionLog(users[order], items[order], stamps[order],
                          n_users=n_u, n_items=n_i, item_clusters=item_cluster,
                          mixtures=mixtures, innovations=innovations)


# ------------------------------------------------------------------ CSV

HEADER = ["user_id", "item_id", "timestamp"]


def ingest_csv(path) -> InteractionLog:
    """Read ``user_id,item_id,timestamp`` rows; ids are reindexed densely.

    Records are stably sorted by timestamp and dense ids follow first
    appearance in that order. Duplicates are kept.
    """
    path = Path(path)
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise PreconditionError(f"{path}: empty file")
        if [h.strip() for h in header] != HEADER:
            raise ParseError(1, f"expected header {','.join(HEADER)}, got {','.join(header)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(line, f"expected 3 fields, got {len(row)}")
            u, i, ts = (c.strip() for c in row)
            if not u or not i:
                raise ParseError(line, "empty id")
            try:
                t = float(ts)
            except ValueError:
                raise ParseError(line, f"non-numeric timestamp {ts!r}") from None
            if not np.isfinite(t):
                raise ParseError(line, f"non-finite timestamp {ts!r}")
            rows.append((u, i, t))
    if not rows:
        raise PreconditionError(f"{path}: no records")
    order = sorted(range(len(rows)), key=lambda k: rows[k][2])
    uid, iid = {}, {}
    users, items, stamps = [], [], []
    for k in order:
        u, i, t = rows[k]
        users.append(uid.setdefault(u, len(uid)))
        items.append(iid.setdefault(i, len(iid)))
        stamps.append(t)
    return InteractionLog(users, items, stamps, user_names=list(uid), item_names=list(iid),
                          n_users=len(uid), n_items=len(iid))


def _fmt_ts(t):
    return str(int(t)) if float(t).is_integer() else repr(float(t))


def write_csv(log: InteractionLog, path):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for u, i, t in zip(log.users.tolist(), log.items.tolist(), log.timestamps.tolist()):
            un = log.user_names[u] if log.user_names else u
            iname = log.item_names[i] if log.item_names else i
            w.writerow([un, iname, _fmt_ts(t)])


def write_item_clusters(log: InteractionLog, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["item_id", "cluster"])
        for i, c in enumerate(log.item_clusters.tolist()):
            w.writerow([log.item_names[i] if log.item_names else i, c])


def read_item_clusters(log: InteractionLog, path) -> np.ndarray:
    """Cluster per dense item id; items missing from the file raise."""
    names = {(log.item_names[i] if log.item_names else str(i)): i for i in range(log.n_items)}
    out = np.full(log.n_items, -1, dtype=np.int64)
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["item_id", "cluster"]:
            raise ParseError(1, "expected header item_id,cluster")
        for row in reader:
            if not row:
                continue
            try:
                key, c = row[0].strip(), int(row[1])
            except (ValueError, IndexError):
                raise ParseError(reader.line_num, "bad cluster row") from None
            if key in names:
                out[names[key]] = c
    if np.any(out < 0):
        raise PreconditionError("cluster file does not cover every item")
    return out


# ------------------------------------------------------------------ splits

@dataclass
class BlockInput:
    stage_index: int            # 1-based
    record_idx: np.ndarray      # indices into the log, time-ordered
    users: np.ndarray           # users kept after the per-block filter

    @property
    def size(self):
        return int(self.record_idx.size)


def _time_order(log):
    return np.argsort(log.timestamps, kind="stable")


def _filter_users(log, idx, stage_index, min_interactions):
    counts = np.bincount(log.users[idx], minlength=log.n_users)
    present = np.flatnonzero(counts)
    if stage_index == 1:
        return present
    kept = present[counts[present] >= min_interactions]
    if kept.size == 0:
        raise SplitError(f"block {stage_index} is empty after the >= {min_interactions} user filter")
    return kept


def chronological_sizes(n, n_stages=5, pretrain_frac=0.6):
    if n_stages < 2:
        raise PreconditionError("need at least two stages")
    n1 = int(round(pretrain_frac * n))
    rest = n - n1
    base, extra = divmod(rest, n_stages - 1)
    return [n1] + [base + (1 if k < extra else 0) for k in range(n_stages - 1)]


def split_chronological(log, n_stages=5, pretrain_frac=0.6,
                        min_interactions=MIN_INTERACTIONS) -> list:
    order = _time_order(log)
    sizes = chronological_sizes(len(log), n_stages, pretrain_frac)
    if min(sizes) == 0:
        raise SplitError(f"not enough records for {n_stages} stages: sizes {sizes}")
    blocks, start = [], 0
    for t, n in enumerate(sizes, start=1):
        idx = order[start:start + n]
        start += n
        blocks.append(BlockInput(t, idx, _filter_users(log, idx, t, min_interactions)))
    return blocks


def split_user_disjoint(log, n_stages=5, pretrain_frac=0.6, seed=0, tol=0.05,
                        max_tries=100, min_interactions=MIN_INTERACTIONS) -> list:
    """Random user partition with block sizes matched to the chronological split."""
    targets = chronological_sizes(len(log), n_stages, pretrain_frac)
    seqs = log.user_sequences()
    users = np.array(sorted(seqs))
    counts = np.array([seqs[u].size for u in users])
    if users.size < n_stages:
        raise SplitError(f"{users.size} users cannot fill {n_stages} blocks")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        perm = rng.permutation(users.size)
        assign = np.full(users.size, n_stages - 1)
        block, filled, left = 0, 0, users.size
        for pos, k in enumerate(perm):
            if block < n_stages - 1:
                must_open = left <= (n_stages - 1 - block)
                if filled > 0 and (must_open or abs(filled + counts[k] - targets[block])
                                   >= abs(filled - targets[block])):
                    block += 1
                    filled = 0
            assign[k] = block
            filled += counts[k]
            left -= 1
        got = np.bincount(assign, weights=counts, minlength=n_stages)
        if np.all(np.abs(got - targets) <= tol * np.asarray(targets)) and np.all(got > 0):
            break
    else:
        raise SplitError(f"could not match block sizes {targets} within {tol:.0%} "
                         f"after {max_tries} reshuffles")
    order_in_time = np.empty(len(log), dtype=np.int64)
    order_in_time[_time_order(log)] = np.arange(len(log))
    blocks = []
    for t in range(n_stages):
        members = users[assign == t]
        idx = np.concatenate([seqs[u] for u in members])
        idx = idx[np.argsort(order_in_time[idx], kind="stable")]
        blocks.append(BlockInput(t + 1, idx, _filter_users(log, idx, t + 1, min_interactions)))
    return blocks


# ------------------------------------------------------------------ pairs

@dataclass
class Pairs:
    histories: list = field(default_factory=list)   # tuples of item ids, oldest first
    targets: list = field(default_factory=list)
    users: list = field(default_factory=list)

    def __len__(self):
        return len(self.targets)

    def add(self, history, target, user):
        self.histories.append(tuple(int(h) for h in history))
        self.targets.append(int(target))
        self.users.append(int(user))


@dataclass
class StageBlock:
    stage_index: int
    pairs: Pairs
    val_pairs: Pairs
    test_pairs: Pairs
    n_records: int = 0


def make_pairs(block: BlockInput, log: InteractionLog, window=WINDOW) -> StageBlock:
    """Sliding-window training pairs plus leave-one-out validation/test pairs.

    Histories reach into the user's whole past (earlier blocks included),
    truncated to the last ``window`` items. The last item of each kept user's
    block sequence is the test target, the one before it the validation
    target; the rest are training targets whenever some history precedes them.
    """
    seqs = log.user_sequences()
    in_block = np.zeros(len(log), dtype=bool)
    in_block[block.record_idx] = True
    order_in_time = np.empty(len(log), dtype=np.int64)
    order_in_time[_time_order(log)] = np.arange(len(log))
    train, val, test = Pairs(), Pairs(), Pairs()
    for u in block.users.tolist():
        seq = seqs[u]
        seq = seq[np.argsort(order_in_time[seq], kind="stable")]
        items = log.items[seq]
        pos = np.flatnonzero(in_block[seq])
        if pos.size >= 3:
            held = {int(pos[-2]): val, int(pos[-1]): test}
        else:
            held = {}
        for p in pos.tolist():
            if p == 0:
                continue
            hist = items[max(0, p - window):p]
            held.get(p, train).add(hist, items[p], u)
    return StageBlock(block.stage_index, train, val, test, block.size)


# ------------------------------------------------------------------ codes

def assign_codes(clusters, L=4, K=16, seed=0):
    """Hierarchical item codes: token 1 from the cluster, the rest count within it.

    Returns ``(codes, trie)`` with ``codes[item]`` the L tokens of that item.
    """
    from .decode_eval import CodeTrie

    clusters = np.asarray(clusters, dtype=np.int64)
    n_items = clusters.size
    n_clusters = int(clusters.max()) + 1 if n_items else 0
    if n_clusters > K:
        raise PreconditionError(f"{n_clusters} clusters exceed codebook size {K}")
    if n_items > K ** L:
        raise PreconditionError(f"{n_items} items exceed code capacity {K ** L}")
    rng = np.random.default_rng(seed)
    first = rng.permutation(K)[:max(n_clusters, 1)]
    codes = np.zeros((n_items, L), dtype=np.int64)
    for c in range(n_clusters):
        members = np.flatnonzero(clusters == c)
        if members.size > K ** (L - 1):
            raise PreconditionError(f"cluster {c} has {members.size} items, capacity {K ** (L - 1)}")
        codes[members, 0] = first[c]
        rank = np.arange(members.size)
        for j in range(L - 1, 0, -1):
            codes[members, j] = rank % K
            rank //= K
    return codes, CodeTrie(codes, (K,) * L)

"""LoRA factor pairs and the composition policies compared across stages.

A policy name encodes three things: the family (``single``, ``sum``, ``sd``,
``inf``), which frozen adapters contribute (``all`` or ``latest``), and
whether the live adapter inherits the previous stage's factors. ``peso`` and
``single_evolving`` both compose as a single inherited adapter; they differ
only in the training objective.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import NormalizationError, PreconditionError
from .linalg import sym_eig

INIT_STD = 0.02

POLICIES = (
    "single_evolving",
    "sum_all", "sum_latest", "sum_all_inherit", "sum_latest_inherit",
    "sd_all", "sd_latest", "sd_all_inherit", "sd_latest_inherit",
    "inf_all", "inf_latest", "inf_all_inherit", "inf_latest_inherit",
    "peso",
)
CUMULATIVE_FAMILIES = ("sum", "sd", "inf")


@dataclass(frozen=True)
class PolicySpec:
    family: str      # single | sum | sd | inf
    scope: str       # none | all | latest
    inherit: bool

    @property
    def cumulative(self):
        return self.family in CUMULATIVE_FAMILIES


def parse_policy(name: str) -> PolicySpec:
    if name not in POLICIES:
        raise PreconditionError(f"unknown policy {name!r}")
    if name in ("single_evolving", "peso"):
        return PolicySpec("single", "none", True)
    parts = name.split("_")
    return PolicySpec(parts[0], parts[1], len(parts) == 3)


@dataclass
class LoraAdapter:
    site_id: str
    A: np.ndarray   # r x d_in
    B: np.ndarray   # d_out x r
    train_A: bool = True

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[0] != self.B.shape[1]:
            raise PreconditionError(
                f"{self.site_id}: incompatible factors A{self.A.shape} B{self.B.shape}")
        if self.rank > min(self.A.shape[1], self.B.shape[0]):
            raise PreconditionError(f"{self.site_id}: rank {self.rank} too large")

    @property
    def rank(self):
        return self.A.shape[0]

    @property
    def shape(self):
        return (self.B.shape[0], self.A.shape[1])

    def delta(self):
        return self.B @ self.A

    def copy(self):
        return LoraAdapter(self.site_id, self.A.copy(), self.B.copy(), self.train_A)


def fresh_adapter(site_id, d_in, d_out, rank, rng) -> LoraAdapter:
    """Standard LoRA start: Gaussian A, zero B."""
    a = rng.normal(0.0, INIT_STD, size=(rank, d_in))
    return LoraAdapter(site_id, a, np.zeros((d_out, rank)))


@dataclass
class FrozenAdapter:
    A_hat: np.ndarray
    B_hat: np.ndarray
    alpha: float

    def direction(self):
        return self.B_hat @ self.A_hat


@dataclass
class AdapterStack:
    site_id: str
    policy: str
    live: LoraAdapter
    frozen: list = field(default_factory=list)

    def __post_init__(self):
        self.spec = parse_policy(self.policy)

    def active(self) -> list:
        """Indices of frozen entries that enter the effective update."""
        if not self.spec.cumulative or not self.frozen:
            return []
        if self.spec.scope == "latest":
            return [len(self.frozen) - 1]
        return list(range(len(self.frozen)))

    def frozen_delta(self):
        out = np.zeros(self.live.shape)
        for i in self.active():
            f = self.frozen[i]
            out += f.alpha * f.direction()
        return out

    def copy(self):
        return copy.deepcopy(self)


def effective_delta(stack: AdapterStack) -> np.ndarray:
    """Effective weight update of a site under its policy."""
    live = stack.live
    for i in stack.active():
        f = stack.frozen[i]
        if f.A_hat.shape[1] != live.A.shape[1] or f.B_hat.shape[0] != live.B.shape[0]:
            raise PreconditionError(f"{stack.site_id}: frozen entry {i} has mismatched shape")
    return stack.frozen_delta() + live.delta()


def seal_stage(stack: AdapterStack, trained: LoraAdapter, inherit=None, rng=None,
               sd_magnitude="unit", trim=False) -> AdapterStack:
    """Close a stage: freeze ``trained`` per the policy and set up the next live adapter.

    Cumulative families push the normalized factors with a magnitude. Sum and
    InfLoRA use the function-preserving magnitude ``|B|_F |A|_F``; SD-LoRA
    starts at 1.0 in ``"unit"`` mode and at the preserving value otherwise.
    """
    if trained.shape != stack.live.shape or trained.rank != stack.live.rank:
        raise PreconditionError(f"{stack.site_id}: trained adapter does not match site shapes")
    spec = stack.spec
    if inherit is None:
        inherit = spec.inherit
    frozen = [FrozenAdapter(f.A_hat.copy(), f.B_hat.copy(), f.alpha) for f in stack.frozen]
    if spec.cumulative:
        na = float(np.linalg.norm(trained.A))
        nb = float(np.linalg.norm(trained.B))
        if na == 0.0 or nb == 0.0:
            raise NormalizationError(
                f"{stack.site_id}: cannot normalize zero factor (|A|={na}, |B|={nb})")
        alpha = na * nb
        if spec.family == "sd" and sd_magnitude == "unit":
            alpha = 1.0
        frozen.append(FrozenAdapter(trained.A / na, trained.B / nb, alpha))
        if trim and spec.scope == "latest":
            frozen = frozen[-1:]
    if inherit:
        live = trained.copy()
        live.train_A = True
    else:
        if rng is None:
            raise PreconditionError("a generator is required for fresh initialization")
        live = fresh_adapter(stack.site_id, trained.A.shape[1], trained.B.shape[0],
                             trained.rank, rng)
    return AdapterStack(stack.site_id, stack.policy, live, frozen)


def inflora_init(inputs, rank, site_id="site", d_out=None, B=None) -> LoraAdapter:
    """LoRA with A fixed to the top eigenvectors of the input second moment.

    ``B`` starts at zero unless an inherited ``B`` is passed. The returned
    adapter has ``train_A=False``.
    """
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2:
        raise PreconditionError("inputs must be a list of equal-length vectors")
    n, d_in = x.shape
    if n < rank:
        raise PreconditionError(f"need at least {rank} inputs, got {n}")
    cov = x.T @ x / n
    eig = sym_eig(0.5 * (cov + cov.T))
    a = eig.vectors[:, :rank].T.copy()
    if B is None:
        if d_out is None:
            raise PreconditionError("d_out is required when B is not given")
        B = np.zeros((d_out, rank))
    return LoraAdapter(site_id, a, np.array(B, dtype=np.float64), train_A=False)


@dataclass
class ParamVector:
    """Ordered named groups of a flat parameter vector."""
    groups: list   # list of (group_id, 1-D array)

    def __post_init__(self):
        ids = [g for g, _ in self.groups]
        if len(set(ids)) != len(ids):
            raise PreconditionError(f"duplicate group ids in {ids}")
        self.groups = [(g, np.asarray(v, dtype=np.float64).ravel()) for g, v in self.groups]

    @property
    def ids(self):
        return [g for g, _ in self.groups]

    @property
    def sizes(self):
        return [v.size for _, v in self.groups]

    @property
    def total_dim(self):
        return int(sum(self.sizes))

    @property
    def flat(self):
        if not self.groups:
            return np.zeros(0)
        return np.concatenate([v for _, v in self.groups])

    def group(self, gid):
        for g, v in self.groups:
            if g == gid:
                return v
        raise KeyError(gid)

    def like(self, flat) -> "ParamVector":
        """Same group layout, new values."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.total_dim,):
            raise PreconditionError(f"expected {self.total_dim} values, got {flat.shape}")
        out, start = [], 0
        for g, v in self.groups:
            out.append((g, flat[start:start + v.size].copy()))
            start += v.size
        return ParamVector(out)

    def same_layout(self, other):
        return self.ids == other.ids and self.sizes == other.sizes

    def require_layout(self, other):
        if not self.same_layout(other):
            raise PreconditionError(
                f"group structure mismatch: {list(zip(self.ids, self.sizes))} vs "
                f"{list(zip(other.ids, other.sizes))}")


def pack(stacks) -> ParamVector:
    """One group per live factor matrix, ordered by site then (A, B)."""
    groups = []
    for s in stacks:
        groups.append((f"{s.site_id}.A", s.live.A.ravel().copy()))
        groups.append((f"{s.site_id}.B", s.live.B.ravel().copy()))
    return ParamVector(groups)


def unpack(v: ParamVector, template) -> list:
    """Live adapters carrying the values of ``v`` in the shapes of ``template``."""
    ref = pack(template)
    v.require_layout(ref)
    out = []
    for s in template:
        a = v.group(f"{s.site_id}.A").reshape(s.live.A.shape).copy()
        b = v.group(f"{s.site_id}.B").reshape(s.live.B.shape).copy()
        out.append(LoraAdapter(s.site_id, a, b, s.live.train_A))
    return out

"""Penalties anchoring the live LoRA parameters to the previous stage.

All values and gradients include the strength ``lam``. Parameters travel as
:class:`~peso_cl.adapters.ParamVector`; ``lora_output_kl``, ``orthogonality``
and ``softmax_kl_per_rank`` also need the factor shapes (and, for the output
KL, probe inputs per site), supplied through :class:`RegContext`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import ParamVector
from .errors import PreconditionError

REGULARIZERS = (
    "l2",
    "softmax_kl_per_module",
    "softmax_kl_per_rank",
    "lora_output_kl",
    "orthogonality",
)
ALIASES = {"softmax_kl": "softmax_kl_per_module", "per_rank": "softmax_kl_per_rank",
           "output_kl": "lora_output_kl", "ortho": "orthogonality"}
MAX_PROBES = 64


def canonical_kind(kind: str) -> str:
    kind = ALIASES.get(kind, kind)
    if kind not in REGULARIZERS:
        raise PreconditionError(f"unknown regularizer {kind!r}")
    return kind


def log_softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax(x, axis=-1):
    return np.exp(log_softmax(x, axis=axis))


def _kl_rows(logits_t, logits_prev):
    """KL(softmax(t) || softmax(prev)) per row and its gradient w.r.t. ``t``."""
    lq = log_softmax(logits_t)
    lp = log_softmax(logits_prev)
    q = np.exp(lq)
    u = lq - lp
    val = np.sum(q * u, axis=-1)
    grad = q * (u - val[..., None])
    return val, grad


@dataclass
class RegContext:
    shapes: dict                                  # site -> (rank, d_in, d_out)
    probes: dict = field(default_factory=dict)    # site -> (n, d_in) inputs


@dataclass
class ProximalMetric:
    blocks: list    # list of (group_id, PSD matrix)
    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise PreconditionError("lambda must be non-negative")
        for gid, h in self.blocks:
            h = np.asarray(h)
            if h.ndim != 2 or h.shape[0] != h.shape[1]:
                raise PreconditionError(f"block {gid} is not square")

    def matrix(self):
        sizes = [np.asarray(h).shape[0] for _, h in self.blocks]
        out = np.zeros((sum(sizes), sum(sizes)))
        start = 0
        for (_, h), n in zip(self.blocks, sizes):
            out[start:start + n, start:start + n] = h
            start += n
        return out


def _check(v_t: ParamVector, v_prev: ParamVector):
    v_t.require_layout(v_prev)


def _grouped_kl(flat_t, flat_prev, index_groups, lam):
    value = 0.0
    grad = np.zeros_like(flat_t)
    for idx in index_groups:
        val, g = _kl_rows(flat_t[idx], flat_prev[idx])
        value += float(val)
        grad[idx] += g
    return lam * value, lam * grad


def _module_groups(v: ParamVector):
    out, start = [], 0
    for n in v.sizes:
        out.append(np.arange(start, start + n))
        start += n
    return out


def softmax_kl_value(v_t: ParamVector, v_prev: ParamVector, lam=1.0) -> float:
    _check(v_t, v_prev)
    value, _ = _grouped_kl(v_t.flat, v_prev.flat, _module_groups(v_t), lam)
    return value


def softmax_kl_grad(v_t: ParamVector, v_prev: ParamVector, lam=1.0) -> ParamVector:
    _check(v_t, v_prev)
    _, grad = _grouped_kl(v_t.flat, v_prev.flat, _module_groups(v_t), lam)
    return v_t.like(grad)


def kl_local_hessian(v_prev_group) -> np.ndarray:
    """Second derivative of the group KL at zero displacement: diag(p) - p p^T."""
    p = softmax(np.asarray(v_prev_group, dtype=np.float64).ravel())
    return np.diag(p) - np.outer(p, p)


def l2_value_grad(v_t: ParamVector, v_prev: ParamVector, lam=1.0):
    _check(v_t, v_prev)
    diff = v_t.flat - v_prev.flat
    return 0.5 * lam * float(diff @ diff), v_t.like(lam * diff)


def _site_slices(v: ParamVector, context: RegContext):
    """site -> (A slice, B slice) offsets into the flat vector."""
    offsets, start = {}, 0
    for gid, n in zip(v.ids, v.sizes):
        offsets[gid] = (start, start + n)
        start += n
    out = {}
    for site, (r, d_in, d_out) in context.shapes.items():
        ka, kb = f"{site}.A", f"{site}.B"
        if ka not in offsets or kb not in offsets:
            raise PreconditionError(f"site {site!r} missing from parameter groups")
        if offsets[ka][1] - offsets[ka][0] != r * d_in or offsets[kb][1] - offsets[kb][0] != d_out * r:
            raise PreconditionError(f"site {site!r}: group sizes do not match shapes")
        out[site] = (slice(*offsets[ka]), slice(*offsets[kb]))
    return out


def rank_groups(v: ParamVector, context: RegContext):
    """Index groups with one group per A row and one per B column."""
    if context is None:
        raise PreconditionError("per-rank KL needs factor shapes in the context")
    groups = []
    for site, (sa, sb) in _site_slices(v, context).items():
        r, d_in, d_out = context.shapes[site]
        for k in range(r):
            groups.append(sa.start + k * d_in + np.arange(d_in))
        for k in range(r):
            groups.append(sb.start + np.arange(d_out) * r + k)
    return groups


def _factors(flat, sl, shape):
    sa, sb = sl
    r, d_in, d_out = shape
    return flat[sa].reshape(r, d_in), flat[sb].reshape(d_out, r)


def lora_output_kl_value_grad(v_t, v_prev, lam, context: RegContext):
    if context is None or not context.probes:
        raise PreconditionError("LoRA-output KL needs probe inputs in the context")
    ft, fp = v_t.flat, v_prev.flat
    grad = np.zeros_like(ft)
    value = 0.0
    for site, sl in _site_slices(v_t, context).items():
        if site not in context.probes:
            raise PreconditionError(f"no probe inputs for site {site!r}")
        x = np.asarray(context.probes[site], dtype=np.float64)[:MAX_PROBES]
        if x.shape[0] == 0:
            continue
        a_t, b_t = _factors(ft, sl, context.shapes[site])
        a_p, b_p = _factors(fp, sl, context.shapes[site])
        ax = x @ a_t.T
        val, g = _kl_rows(ax @ b_t.T, (x @ a_p.T) @ b_p.T)
        n = x.shape[0]
        value += float(np.sum(val)) / n
        g = g / n
        grad[sl[1]] += (g.T @ ax).ravel()
        grad[sl[0]] += ((g @ b_t).T @ x).ravel()
    return lam * value, v_t.like(lam * grad)


def orthogonality_value_grad(v_t, v_prev, lam, context: RegContext):
    if context is None:
        raise PreconditionError("orthogonality needs factor shapes in the context")
    ft, fp = v_t.flat, v_prev.flat
    grad = np.zeros_like(ft)
    value = 0.0
    for site, sl in _site_slices(v_t, context).items():
        a_t, b_t = _factors(ft, sl, context.shapes[site])
        a_p, b_p = _factors(fp, sl, context.shapes[site])
        ca = a_t @ a_p.T
        cb = b_t.T @ b_p
        value += float(np.sum(ca * ca) + np.sum(cb * cb))
        grad[sl[0]] += (2.0 * ca @ a_p).ravel()
        grad[sl[1]] += (2.0 * b_p @ cb.T).ravel()
    return lam * value, v_t.like(lam * grad)


def variant_value_grad(kind, v_t: ParamVector, v_prev: ParamVector, lam=1.0, context=None):
    """Value and gradient of any supported regularizer."""
    kind = canonical_kind(kind)
    _check(v_t, v_prev)
    if kind == "l2":
        return l2_value_grad(v_t, v_prev, lam)
    if kind == "softmax_kl_per_module":
        value, grad = _grouped_kl(v_t.flat, v_prev.flat, _module_groups(v_t), lam)
        return value, v_t.like(grad)
    if kind == "softmax_kl_per_rank":
        value, grad = _grouped_kl(v_t.flat, v_prev.flat, rank_groups(v_t, context), lam)
        return value, v_t.like(grad)
    if kind == "lora_output_kl":
        return lora_output_kl_value_grad(v_t, v_prev, lam, context)
    return orthogonality_value_grad(v_t, v_prev, lam, context)


def local_metric(kind, v_prev: ParamVector, lam=1.0, context=None):
    """Quadratic metric of the regularizer at zero displacement, if it has a closed form.

    Returns ``(index_groups, kind_tag, data)`` usable by
    :func:`precondition`, or ``None`` for the output-KL and orthogonality
    penalties.
    """
    kind = canonical_kind(kind)
    flat = v_prev.flat
    if kind == "l2":
        return ("identity", None)
    if kind == "softmax_kl_per_module":
        groups = _module_groups(v_prev)
    elif kind == "softmax_kl_per_rank":
        groups = rank_groups(v_prev, context)
    else:
        return None
    return ("softmax", [(idx, softmax(flat[idx])) for idx in groups])


def precondition(flat_grad, metric, step_lam):
    """Apply ``(I + step_lam * H)^{-1}`` with ``H`` from :func:`local_metric`.

    Softmax blocks ``diag(p) - p p^T`` are inverted with Sherman-Morrison.
    """
    if metric is None or step_lam == 0.0:
        return flat_grad
    tag, data = metric
    if tag == "identity":
        return flat_grad / (1.0 + step_lam)
    out = flat_grad.copy()
    for idx, p in data:
        dinv = 1.0 / (1.0 + step_lam * p)
        g = flat_grad[idx]
        y = dinv * g
        w = dinv * p
        denom = 1.0 - step_lam * float(p @ w)
        out[idx] = y + step_lam * w * float(p @ y) / denom
    return out


def metric_for_theory(v_prev: ParamVector, lam=1.0) -> ProximalMetric:
    """Block-diagonal softmax-KL metric over the module groups."""
    return ProximalMetric([(gid, kl_local_hessian(vals)) for gid, vals in v_prev.groups], lam)

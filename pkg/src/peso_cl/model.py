"""Desk-scale next-item scorer with two LoRA sites and its training loop.

The scorer mean-pools token embeddings of the (windowed) history, encodes
through ``tanh((W_enc + D_enc) h)`` and then emits one code token per
position, feeding the teacher-forced token back through
``tanh((W_dec + D_dec)(s + e))``. Gradients are a hand-written reverse
sweep over that graph.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .adapters import (AdapterStack, LoraAdapter, ParamVector, effective_delta,
                       fresh_adapter, inflora_init, pack)
from .errors import DivergenceError, NumericError, PreconditionError
from .proximal import (RegContext, canonical_kind, local_metric, log_softmax,
                       precondition, variant_value_grad)

log = logging.getLogger(__name__)

SITES = ("enc", "dec")
WINDOW = 20
DIVERGENCE_LOSS = 1e6


@dataclass
class ModelDims:
    d: int = 32
    rank: int = 4
    L: int = 4
    K: int = 16

    @property
    def ks(self):
        return (self.K,) * self.L


class ToyRecModel:
    def __init__(self, embed, W_enc, W_dec, W_out):
        self.embed = np.asarray(embed, dtype=np.float64)
        self.W_enc = np.asarray(W_enc, dtype=np.float64)
        self.W_dec = np.asarray(W_dec, dtype=np.float64)
        self.W_out = [np.asarray(w, dtype=np.float64) for w in W_out]
        self.ks = tuple(w.shape[0] for w in self.W_out)
        self.offsets = np.concatenate([[0], np.cumsum(self.ks)[:-1]]).astype(np.int64)
        if self.embed.shape[0] != sum(self.ks):
            raise PreconditionError("embedding rows must equal the summed codebook sizes")

    @classmethod
    def init(cls, dims: ModelDims, rng):
        d = dims.d
        v = sum(dims.ks)
        return cls(rng.normal(0.0, 1.0, size=(v, d)),
                   rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)),
                   rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)),
                   [rng.normal(0.0, 1.0 / np.sqrt(d), size=(k, d)) for k in dims.ks])

    @property
    def d(self):
        return self.embed.shape[1]

    @property
    def L(self):
        return len(self.ks)

    def base_params(self):
        out = [("base.embed", self.embed), ("base.W_enc", self.W_enc), ("base.W_dec", self.W_dec)]
        out += [(f"base.W_out.{j}", w) for j, w in enumerate(self.W_out)]
        return out

    def copy(self):
        return ToyRecModel(self.embed.copy(), self.W_enc.copy(), self.W_dec.copy(),
                           [w.copy() for w in self.W_out])


def init_stacks(model: ToyRecModel, policy, rank, rng) -> dict:
    d = model.d
    return {s: AdapterStack(s, policy, fresh_adapter(s, d, d, rank, rng)) for s in SITES}


# ------------------------------------------------------------------ batches

@dataclass
class Batch:
    counts: np.ndarray     # N x V, each row sums to 1 (mean pooling weights)
    targets: np.ndarray    # N x L token ids per position

    def __len__(self):
        return self.targets.shape[0]

    def take(self, idx):
        return Batch(self.counts[idx], self.targets[idx])


def encode(histories, targets, codes, ks, window=WINDOW) -> Batch:
    """Turn item-id histories and targets into pooling weights and target tokens."""
    codes = np.asarray(codes)
    offsets = np.concatenate([[0], np.cumsum(ks)[:-1]]).astype(np.int64)
    n = len(histories)
    counts = np.zeros((n, int(sum(ks))))
    for r, h in enumerate(histories):
        if len(h) == 0:
            raise PreconditionError(f"example {r} has an empty history")
        h = np.asarray(h[-window:], dtype=np.int64)
        toks = (codes[h] + offsets).ravel()
        np.add.at(counts[r], toks, 1.0 / toks.size)
    tgt = codes[np.asarray(targets, dtype=np.int64)] if n else np.zeros((0, len(ks)), np.int64)
    return Batch(counts, np.asarray(tgt, dtype=np.int64).reshape(n, len(ks)))


# ------------------------------------------------------------------ forward/backward

def site_weights(model, stacks):
    return (model.W_enc + effective_delta(stacks["enc"]),
            model.W_dec + effective_delta(stacks["dec"]))


def forward_batch(model, stacks, batch: Batch):
    """Teacher-forced logits per position, plus the cache for the reverse sweep."""
    w_enc, w_dec = site_weights(model, stacks)
    h = batch.counts @ model.embed
    states = [np.tanh(h @ w_enc.T)]
    inputs = []
    logits = []
    for j in range(model.L):
        logits.append(states[j] @ model.W_out[j].T)
        if j < model.L - 1:
            x = states[j] + model.embed[model.offsets[j] + batch.targets[:, j]]
            inputs.append(x)
            states.append(np.tanh(x @ w_dec.T))
    return logits, {"h": h, "states": states, "inputs": inputs, "w_enc": w_enc, "w_dec": w_dec}


def forward(model, stacks, history, target_codes, window=WINDOW):
    """Logits per code position for one (code-level) history; teacher-forced on ``target_codes``."""
    history = [tuple(c) for c in history]
    if not history:
        raise PreconditionError("history is empty")
    history = history[-window:]
    counts = np.zeros((1, sum(model.ks)))
    toks = np.array([model.offsets[j] + c[j] for c in history for j in range(model.L)])
    np.add.at(counts[0], toks, 1.0 / toks.size)
    batch = Batch(counts, np.asarray(target_codes, dtype=np.int64).reshape(1, model.L))
    logits, _ = forward_batch(model, stacks, batch)
    return [z[0] for z in logits]


def nll_per_example(logits, targets):
    out = np.zeros(targets.shape[0])
    for j, z in enumerate(logits):
        lp = log_softmax(z)
        out -= lp[np.arange(targets.shape[0]), targets[:, j]]
    return out


def backward(model, stacks, batch, logits, cache, scale):
    """Gradients of ``scale * sum(nll)`` w.r.t. base weights and effective site weights."""
    n = len(batch)
    rows = np.arange(n)
    grads = {}
    states, inputs = cache["states"], cache["inputs"]
    d_states = [None] * model.L
    for j in range(model.L):
        p = np.exp(log_softmax(logits[j]))
        p[rows, batch.targets[:, j]] -= 1.0
        p *= scale
        grads[f"base.W_out.{j}"] = p.T @ states[j]
        d_states[j] = p @ model.W_out[j]
    d_embed = np.zeros_like(model.embed)
    d_wdec = np.zeros_like(model.W_dec)
    for j in range(model.L - 2, -1, -1):
        s_next = states[j + 1]
        d_pre = d_states[j + 1] * (1.0 - s_next * s_next)
        d_wdec += d_pre.T @ inputs[j]
        d_x = d_pre @ cache["w_dec"]
        d_states[j] = d_states[j] + d_x
        np.add.at(d_embed, model.offsets[j] + batch.targets[:, j], d_x)
    d_pre0 = d_states[0] * (1.0 - states[0] * states[0])
    d_wenc = d_pre0.T @ cache["h"]
    d_embed += batch.counts.T @ (d_pre0 @ cache["w_enc"])
    grads["base.embed"] = d_embed
    grads["base.W_enc"] = d_wenc
    grads["base.W_dec"] = d_wdec
    grads["site.enc"] = d_wenc
    grads["site.dec"] = d_wdec
    return grads


def sd_magnitude_grad(stack: AdapterStack, site_grad) -> np.ndarray:
    """d loss / d alpha_i for the active frozen entries: <G, B_hat_i A_hat_i>_F."""
    if stack.spec.family != "sd":
        raise PreconditionError(f"policy {stack.policy!r} has no learnable magnitudes")
    g = np.asarray(site_grad)
    return np.array([float(np.sum(g * stack.frozen[i].direction())) for i in stack.active()])


# ------------------------------------------------------------------ trainable set

def trainable_names(stacks, stage):
    names = []
    for s in SITES:
        if stacks[s].live.train_A:
            names.append(f"{s}.A")
        names.append(f"{s}.B")
    if stage >= 2:
        for s in SITES:
            if stacks[s].spec.family == "sd" and stacks[s].active():
                names.append(f"{s}.alpha")
    return names


def get_param(model, stacks, name):
    if name.startswith("base."):
        return dict(model.base_params())[name]
    site, what = name.split(".")
    st = stacks[site]
    if what == "A":
        return st.live.A
    if what == "B":
        return st.live.B
    return np.array([st.frozen[i].alpha for i in st.active()])


def set_param(model, stacks, name, value):
    if name.startswith("base."):
        target = dict(model.base_params())[name]
        target[...] = value
        return
    site, what = name.split(".")
    st = stacks[site]
    if what == "A":
        st.live.A[...] = value
    elif what == "B":
        st.live.B[...] = value
    else:
        for i, a in zip(st.active(), np.asarray(value).ravel()):
            st.frozen[i].alpha = float(a)


def param_names(model, stacks, stage):
    base = [n for n, _ in model.base_params()] if stage == 1 else []
    return base + trainable_names(stacks, stage)


def param_vector(model, stacks, names) -> ParamVector:
    return ParamVector([(n, np.array(get_param(model, stacks, n), dtype=np.float64).ravel())
                        for n in names])


# ------------------------------------------------------------------ objective

@dataclass
class TrainConfig:
    lr: float = 1.0
    lr_scale: float = 0.1
    epochs: int = 10
    pretrain_epochs: int = 10
    batch_size: int = 128
    lam: float = 0.0
    regularizer: str = None
    policy: str = "single_evolving"
    seed: int = 0
    sd_magnitude: str = "unit"         # unit | preserving
    precondition: bool = True
    track_objective: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise PreconditionError("lr must be positive")
        if self.lam < 0:
            raise PreconditionError("lambda must be non-negative")
        if self.sd_magnitude not in ("unit", "preserving"):
            raise PreconditionError(f"sd_magnitude must be unit or preserving, got {self.sd_magnitude!r}")
        if self.regularizer is not None:
            self.regularizer = canonical_kind(self.regularizer)


@dataclass
class Anchor:
    """Previous-stage state the regularizer pulls toward."""
    v_prev: ParamVector
    stacks: dict

    @classmethod
    def of(cls, stacks):
        order = [stacks[s] for s in SITES]
        return cls(pack(order), {s: stacks[s].copy() for s in SITES})


def reg_context(model, stacks, anchor: Anchor, batch=None, kind=None):
    shapes = {s: (stacks[s].live.rank, stacks[s].live.A.shape[1], stacks[s].live.B.shape[0])
              for s in SITES}
    probes = {}
    if kind == "lora_output_kl" and batch is not None:
        _, cache = forward_batch(model, anchor.stacks, batch)
        probes["enc"] = cache["h"][:64]
        dec_in = np.stack(cache["inputs"], axis=1).reshape(-1, model.d) if cache["inputs"] else \
            np.zeros((0, model.d))
        probes["dec"] = dec_in[:64]
    return RegContext(shapes, probes)


def loss_and_grad(model, stacks, batch: Batch, anchor: Anchor = None, config: TrainConfig = None,
                  stage=2, with_reg=True):
    """Mean sequence cross-entropy (+ regularizer) and gradients over the trainable set.

    Returns ``(loss, grad ParamVector, parts)`` where ``parts`` holds the
    cross-entropy and regularizer values separately.
    """
    config = config or TrainConfig()
    n = len(batch)
    if n == 0:
        raise PreconditionError("empty batch")
    logits, cache = forward_batch(model, stacks, batch)
    per = nll_per_example(logits, batch.targets)
    bad = np.flatnonzero(~np.isfinite(per))
    if bad.size:
        raise NumericError(f"non-finite loss at example {int(bad[0])}")
    ce = float(per.mean())
    g = backward(model, stacks, batch, logits, cache, 1.0 / n)
    names = param_names(model, stacks, stage)
    out = {}
    for name in names:
        if name.startswith("base."):
            out[name] = g[name]
            continue
        site, what = name.split(".")
        gs = g[f"site.{site}"]
        live = stacks[site].live
        if what == "A":
            out[name] = live.B.T @ gs
        elif what == "B":
            out[name] = gs @ live.A.T
        else:
            out[name] = sd_magnitude_grad(stacks[site], gs)
    reg = 0.0
    kind = config.regularizer
    if with_reg and stage >= 2 and kind is not None and anchor is not None and config.lam > 0:
        v_t = pack([stacks[s] for s in SITES])
        ctx = reg_context(model, stacks, anchor, batch, kind)
        reg, rg = variant_value_grad(kind, v_t, anchor.v_prev, config.lam, ctx)
        for gid, vals in rg.groups:
            if gid in out:
                out[gid] = out[gid] + vals.reshape(out[gid].shape)
    grad = ParamVector([(nm, np.asarray(out[nm]).ravel()) for nm in names])
    return ce + reg, grad, {"ce": ce, "reg": reg}


# ------------------------------------------------------------------ training

@dataclass
class StageLog:
    stage: int
    epochs: list = field(default_factory=list)
    initial_objective: float = None

    def to_dict(self):
        return {"stage": self.stage, "initial_objective": self.initial_objective,
                "epochs": self.epochs}


def stage_rng(seed, stage, stream=0):
    return np.random.default_rng([int(seed), int(stage), int(stream)])


def objective(model, stacks, batch, anchor, config, stage, chunk=4096):
    """Full-block objective: mean cross-entropy plus regularizer value."""
    total = 0.0
    for start in range(0, len(batch), chunk):
        sub = batch.take(slice(start, start + chunk))
        logits, _ = forward_batch(model, stacks, sub)
        total += float(nll_per_example(logits, sub.targets).sum())
    ce = total / max(len(batch), 1)
    reg = 0.0
    if stage >= 2 and config.regularizer and anchor is not None and config.lam > 0:
        v_t = pack([stacks[s] for s in SITES])
        ctx = reg_context(model, stacks, anchor, batch.take(slice(0, 64)), config.regularizer)
        reg, _ = variant_value_grad(config.regularizer, v_t, anchor.v_prev, config.lam, ctx)
    return ce, reg


def site_inputs(model, stacks, batch, limit=None):
    """Inputs seen by each LoRA site under the current composition."""
    if limit is not None:
        batch = batch.take(slice(0, limit))
    _, cache = forward_batch(model, stacks, batch)
    dec = np.concatenate(cache["inputs"], axis=0) if cache["inputs"] else np.zeros((0, model.d))
    return {"enc": cache["h"], "dec": dec}


def prepare_inflora(model, stacks, batch, limit=4096):
    """Replace each live A by the top input-covariance directions of its site."""
    inputs = site_inputs(model, stacks, batch, limit)
    for s in SITES:
        live = stacks[s].live
        new = inflora_init(inputs[s], live.rank, s, B=live.B)
        stacks[s].live = new


def train_stage(model, stacks, block: Batch, anchor: Anchor, config: TrainConfig, stage,
                val: Batch = None):
    """Run minibatch first-order updates on one block; mutates ``model``/``stacks`` in place.

    At stage 1 base weights and the live adapters train with step ``lr``;
    afterwards only adapter parameters (and SD magnitudes) train with step
    ``lr * lr_scale``. When the regularizer has a closed-form local metric
    ``H`` the step is taken through the fixed preconditioner
    ``(I + step * lam * H)^{-1}`` computed at the anchor, which equals the
    plain step at ``lam = 0``.
    """
    rng = stage_rng(config.seed, stage)
    step = config.lr if stage == 1 else config.lr * config.lr_scale
    epochs = config.pretrain_epochs if stage == 1 else config.epochs
    slog = StageLog(stage)
    if epochs == 0 or len(block) == 0:
        return stacks, slog
    use_reg = stage >= 2 and config.regularizer is not None and config.lam > 0 and anchor is not None
    metric = None
    if use_reg and config.precondition:
        ctx = reg_context(model, stacks, anchor)
        metric = local_metric(config.regularizer, anchor.v_prev, config.lam, ctx)
    lora_names = [f"{s}.{f}" for s in SITES for f in ("A", "B")]
    if config.track_objective:
        ce, reg = objective(model, stacks, block, anchor, config, stage)
        slog.initial_objective = ce + reg
    n = len(block)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        seen = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            loss, grad, _ = loss_and_grad(model, stacks, block.take(idx), anchor, config, stage)
            if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
                raise DivergenceError(epoch, loss)
            seen += loss * idx.size
            if metric is not None:
                # precondition the adapter block jointly, in pack order
                flat = np.concatenate([grad.group(nm) if nm in grad.ids else
                                       np.zeros(get_param(model, stacks, nm).size)
                                       for nm in lora_names])
                flat = precondition(flat, metric, step * config.lam)
                off = 0
                pre = {}
                for nm in lora_names:
                    size = get_param(model, stacks, nm).size
                    pre[nm] = flat[off:off + size]
                    off += size
            for name, g in grad.groups:
                if metric is not None and name in pre:
                    g = pre[name]
                cur = get_param(model, stacks, name)
                set_param(model, stacks, name, cur - step * g.reshape(np.shape(cur)))
        entry = {"epoch": epoch, "train_loss": seen / n}
        if config.track_objective:
            ce, reg = objective(model, stacks, block, anchor, config, stage)
            entry.update(objective=ce + reg, ce=ce, reg=reg)
            if not np.isfinite(ce + reg) or ce + reg > DIVERGENCE_LOSS:
                raise DivergenceError(epoch, ce + reg)
        if val is not None and len(val):
            entry["val_nll"], _ = objective(model, stacks, val, None, config, 1)
        slog.epochs.append(entry)
        log.debug("stage %d epoch %d %s", stage, epoch, entry)
    return stacks, slog

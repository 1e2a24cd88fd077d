import dataclasses

import numpy as np
import pytest

from peso_cl.adapters import AdapterStack, FrozenAdapter, LoraAdapter, pack, seal_stage
from peso_cl.errors import DivergenceError, NumericError, PreconditionError
from peso_cl.model import (SITES, Anchor, Batch, ModelDims, ToyRecModel, TrainConfig, encode,
                           forward, get_param, init_stacks, loss_and_grad, param_names,
                           sd_magnitude_grad, set_param, train_stage)
from peso_cl.proximal import REGULARIZERS

FD_STEP = 1e-5


def _fixture(policy="single_evolving", d=3, rank=2, L=3, K=3, seed=0, n=6, history=3):
    rng = np.random.default_rng(seed)
    dims = ModelDims(d=d, rank=rank, L=L, K=K)
    model = ToyRecModel.init(dims, rng)
    stacks = {s: AdapterStack(s, policy, LoraAdapter(s, rng.normal(size=(rank, d)),
                                                     rng.normal(size=(d, rank))))
              for s in SITES}
    n_items = K ** 2
    codes = np.array([[i // K, i % K] + [(i + j) % K for j in range(L - 2)] for i in range(n_items)])
    hists = [list(rng.integers(0, n_items, size=history)) for _ in range(n)]
    batch = encode(hists, rng.integers(0, n_items, size=n), codes, dims.ks)
    return model, stacks, batch, rng


def _add_history(stacks, rng, n_frozen=2):
    for st in stacks.values():
        r, d = st.live.A.shape
        for _ in range(n_frozen):
            a = rng.normal(size=(r, d))
            b = rng.normal(size=(st.live.B.shape[0], r))
            st.frozen.append(FrozenAdapter(a / np.linalg.norm(a), b / np.linalg.norm(b),
                                           float(rng.uniform(0.5, 1.5))))


def _perturbed_anchor(stacks, rng):
    prev = {s: st.copy() for s, st in stacks.items()}
    for st in prev.values():
        st.live.A += 0.3 * rng.normal(size=st.live.A.shape)
        st.live.B += 0.3 * rng.normal(size=st.live.B.shape)
    return Anchor.of(prev)


def fd_sweep(model, stacks, batch, anchor, cfg, stage):
    """Max relative error of loss_and_grad against central differences over every coordinate."""
    _, grad, _ = loss_and_grad(model, stacks, batch, anchor, cfg, stage)
    worst = 0.0
    count = 0
    for name, g in grad.groups:
        base = np.array(get_param(model, stacks, name), dtype=np.float64)
        flat = base.ravel()
        for i in range(flat.size):
            vals = []
            for sign in (1.0, -1.0):
                trial = flat.copy()
                trial[i] += sign * FD_STEP
                set_param(model, stacks, name, trial.reshape(base.shape))
                vals.append(loss_and_grad(model, stacks, batch, anchor, cfg, stage)[0])
            set_param(model, stacks, name, base)
            fd = (vals[0] - vals[1]) / (2 * FD_STEP)
            worst = max(worst, abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1e-6))
            count += 1
    return worst, count


def test_forward_hand_fixture():
    model = ToyRecModel(embed=[[0.5, -1.0], [2.0, 0.25]], W_enc=[[1.0, 2.0], [0.0, -1.0]],
                        W_dec=np.zeros((2, 2)), W_out=[[[1.0, 0.0], [0.5, -0.5]]])
    stacks = {s: AdapterStack(s, "single_evolving", LoraAdapter(s, np.zeros((1, 2)), np.zeros((2, 1))))
              for s in SITES}
    z = forward(model, stacks, [(1,)], [0])
    # h = (2, 0.25); W_enc h = (2.5, -0.25); s0 = (tanh 2.5, -tanh 0.25)
    s0 = np.array([0.9866142981514303, -0.24491866240370913])
    assert np.allclose(z[0], [s0[0], 0.5 * s0[0] - 0.5 * s0[1]], atol=1e-12, rtol=0)


def test_forward_zero_weights_uniform():
    dims = ModelDims(d=4, rank=1, L=4, K=4)
    model = ToyRecModel(np.zeros((16, 4)), np.zeros((4, 4)), np.zeros((4, 4)),
                        [np.zeros((4, 4))] * 4)
    stacks = init_stacks(model, "single_evolving", 1, np.random.default_rng(0))
    assert all(not z.any() for z in forward(model, stacks, [(0, 1, 2, 3)], [0, 0, 0, 0]))
    codes = np.array([[0, 1, 2, 3], [3, 2, 1, 0]])
    batch = encode([[0]], [1], codes, dims.ks)
    loss, _, _ = loss_and_grad(model, stacks, batch, stage=2)
    assert loss == pytest.approx(4 * np.log(4), abs=1e-12)


def test_forward_zero_adapter_is_base():
    model, stacks, _, _ = _fixture()
    zero = {s: AdapterStack(s, "single_evolving", LoraAdapter(s, st.live.A, np.zeros_like(st.live.B)))
            for s, st in stacks.items()}
    plain = ToyRecModel(model.embed, model.W_enc, model.W_dec, model.W_out)
    hist = [(0, 1, 2), (2, 2, 1)]
    a = forward(model, zero, hist, [1, 0, 2])
    b = forward(plain, {s: AdapterStack(s, "single_evolving", LoraAdapter(s, np.zeros((2, 3)),
                                                                          np.zeros((3, 2))))
                        for s in SITES}, hist, [1, 0, 2])
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_forward_empty_history():
    model, stacks, _, _ = _fixture()
    with pytest.raises(PreconditionError):
        forward(model, stacks, [], [0, 0, 0])


def test_window_truncation():
    model, stacks, _, rng = _fixture()
    hist = [tuple(rng.integers(0, 3, size=3)) for _ in range(35)]
    a = forward(model, stacks, hist, [0, 1, 2])
    b = forward(model, stacks, hist[-20:], [0, 1, 2])
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_stage1_gradient_finite_differences():
    model, stacks, batch, _ = _fixture()
    worst, count = fd_sweep(model, stacks, batch, None, TrainConfig(), 1)
    assert count == 27 + 9 + 9 + 27 + 24
    assert worst <= 1e-4


@pytest.mark.parametrize("kind", REGULARIZERS)
@pytest.mark.parametrize("policy", ["peso", "sum_all_inherit", "sd_latest", "inf_all"])
def test_stage2_gradient_finite_differences(kind, policy):
    model, stacks, batch, rng = _fixture(policy, seed=hash((kind, policy)) % 1000)
    _add_history(stacks, rng)
    if policy.startswith("inf"):
        for st in stacks.values():
            st.live.train_A = False
    anchor = _perturbed_anchor(stacks, rng)
    cfg = TrainConfig(lam=1.7, regularizer=kind, policy=policy)
    names = param_names(model, stacks, 2)
    assert not any(n.startswith("base.") for n in names)
    assert ("enc.A" in names) == (not policy.startswith("inf"))
    assert ("enc.alpha" in names) == policy.startswith("sd")
    worst, _ = fd_sweep(model, stacks, batch, anchor, cfg, 2)
    assert worst <= 1e-4


def test_regularizer_vanishes_at_anchor():
    model, stacks, batch, _ = _fixture("peso")
    cfg = TrainConfig(lam=5.0, regularizer="softmax_kl_per_module")
    plain = loss_and_grad(model, stacks, batch, None, TrainConfig(), 2)
    anchored = loss_and_grad(model, stacks, batch, Anchor.of(stacks), cfg, 2)
    assert anchored[2]["reg"] == 0.0
    assert anchored[0] == plain[0]
    assert np.array_equal(anchored[1].flat, plain[1].flat)


def test_nan_loss_names_example():
    model, stacks, batch, _ = _fixture()
    counts = batch.counts.copy()
    counts[3, 0] = np.nan
    with pytest.raises(NumericError, match="example 3"):
        loss_and_grad(model, stacks, Batch(counts, batch.targets), stage=1)


def test_sd_magnitude_grad_examples():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(1, 3))
    b = rng.normal(size=(2, 1))
    f = FrozenAdapter(a / np.linalg.norm(a), b / np.linalg.norm(b), 1.0)
    st = AdapterStack("enc", "sd_all", LoraAdapter("enc", a, b), [f])
    assert not sd_magnitude_grad(st, np.zeros((2, 3))).any()
    d = f.direction()
    assert sd_magnitude_grad(st, d)[0] == pytest.approx(np.sum(d * d), abs=1e-15)
    with pytest.raises(PreconditionError):
        sd_magnitude_grad(AdapterStack("enc", "sum_all", st.live, [f]), d)


def test_sd_magnitude_grad_finite_differences():
    model, stacks, batch, rng = _fixture("sd_all")
    _add_history(stacks, rng, 3)
    _, grad, _ = loss_and_grad(model, stacks, batch, None, TrainConfig(), 2)
    for site in SITES:
        base = get_param(model, stacks, f"{site}.alpha")
        for i in range(base.size):
            vals = []
            for sign in (1, -1):
                trial = base.copy()
                trial[i] += sign * FD_STEP
                set_param(model, stacks, f"{site}.alpha", trial)
                vals.append(loss_and_grad(model, stacks, batch, None, TrainConfig(), 2)[0])
            set_param(model, stacks, f"{site}.alpha", base)
            fd = (vals[0] - vals[1]) / (2 * FD_STEP)
            assert abs(grad.group(f"{site}.alpha")[i] - fd) <= 1e-5


def _train_fixture(policy="peso", seed=0):
    model, stacks, batch, rng = _fixture(policy, n=40, seed=seed)
    return model, stacks, batch


def test_zero_epochs_is_a_no_op():
    model, stacks, batch = _train_fixture()
    before = pack([stacks[s] for s in SITES]).flat
    _, log = train_stage(model, stacks, batch, Anchor.of(stacks), TrainConfig(epochs=0), 2)
    assert log.epochs == []
    assert np.array_equal(pack([stacks[s] for s in SITES]).flat, before)


def test_base_frozen_after_stage_one():
    model, stacks, batch = _train_fixture()
    before = [w.copy() for _, w in model.base_params()]
    train_stage(model, stacks, batch, Anchor.of(stacks), TrainConfig(epochs=3, batch_size=8), 2)
    assert all(np.array_equal(a, b) for a, (_, b) in zip(before, model.base_params()))


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        model, stacks, batch = _train_fixture()
        cfg = TrainConfig(epochs=3, batch_size=8, lam=2.0, regularizer="softmax_kl_per_module")
        _, log = train_stage(model, stacks, batch, Anchor.of(stacks), cfg, 2)
        runs.append((pack([stacks[s] for s in SITES]).flat, log.to_dict()))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_zero_lambda_matches_unregularized():
    out = []
    for cfg in (TrainConfig(epochs=3, batch_size=8, lam=0.0, regularizer="softmax_kl_per_module",
                            policy="peso"),
                TrainConfig(epochs=3, batch_size=8, policy="single_evolving")):
        model, stacks, batch = _train_fixture()
        train_stage(model, stacks, batch, Anchor.of(stacks), cfg, 2)
        out.append(pack([stacks[s] for s in SITES]).flat)
    assert np.max(np.abs(out[0] - out[1])) <= 1e-12


def test_huge_lambda_pins_parameters():
    moved = {}
    for lam in (0.0, 1e6):
        model, stacks, batch = _train_fixture()
        anchor = Anchor.of(stacks)
        cfg = TrainConfig(epochs=3, batch_size=8, lam=lam, regularizer="l2")
        train_stage(model, stacks, batch, anchor, cfg, 2)
        moved[lam] = np.linalg.norm(pack([stacks[s] for s in SITES]).flat - anchor.v_prev.flat)
    assert moved[0.0] > 0
    assert moved[1e6] <= 1e-3 * moved[0.0]


def test_divergence_reports_epoch():
    model, stacks, batch = _train_fixture()
    rng = np.random.default_rng(1)
    _add_history(stacks, rng)
    anchor = _perturbed_anchor(stacks, rng)
    # explicit steps on a stiff quadratic overshoot geometrically
    cfg = TrainConfig(lam=1e4, regularizer="l2", precondition=False, epochs=5, batch_size=8)
    with pytest.raises(DivergenceError) as info:
        train_stage(model, stacks, batch, anchor, cfg, 2)
    assert info.value.epoch >= 0


def test_invalid_train_config():
    with pytest.raises(PreconditionError):
        TrainConfig(lr=0.0)
    with pytest.raises(PreconditionError):
        TrainConfig(lam=-1.0)


def test_objective_mostly_decreases():
    model, stacks, batch = _train_fixture()
    _, log = train_stage(model, stacks, batch, None, TrainConfig(lr=0.2, pretrain_epochs=10,
                                                                 batch_size=8), 1)
    objs = [log.initial_objective] + [e["objective"] for e in log.epochs]
    drops = sum(b <= a for a, b in zip(objs, objs[1:]))
    assert drops >= 0.9 * (len(objs) - 1)

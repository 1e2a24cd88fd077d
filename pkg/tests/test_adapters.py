import numpy as np
import pytest
from hypothesis import given, strategies as st

from peso_cl.adapters import (INIT_STD, POLICIES, AdapterStack, FrozenAdapter, LoraAdapter,
                              ParamVector, effective_delta, fresh_adapter, inflora_init, pack,
                              parse_policy, seal_stage, unpack)
from peso_cl.errors import NormalizationError, PreconditionError


def _adapter(rng, d_in=3, d_out=2, r=1, site="s"):
    return LoraAdapter(site, rng.normal(size=(r, d_in)), rng.normal(size=(d_out, r)))


def test_policy_names_parse():
    assert parse_policy("sd_latest_inherit").inherit
    assert parse_policy("sum_all").scope == "all"
    assert not parse_policy("inf_all").inherit
    assert parse_policy("peso") == parse_policy("single_evolving")
    with pytest.raises(PreconditionError):
        parse_policy("sum_everything")
    assert len(POLICIES) == 14


def test_effective_delta_zero_adapter():
    live = LoraAdapter("s", np.ones((1, 3)), np.zeros((2, 1)))
    assert np.array_equal(effective_delta(AdapterStack("s", "sum_all", live)), np.zeros((2, 3)))


def test_effective_delta_frozen_only():
    a_hat = np.array([[1.0, 0.0]])
    b_hat = np.array([[1.0], [0.0]])
    live = LoraAdapter("s", np.ones((1, 2)), np.zeros((2, 1)))
    st_ = AdapterStack("s", "sum_all", live, [FrozenAdapter(a_hat, b_hat, 1.0)])
    assert np.array_equal(effective_delta(st_), b_hat @ a_hat)


def test_effective_delta_latest_uses_only_last(rng):
    f1 = FrozenAdapter(rng.normal(size=(1, 3)), rng.normal(size=(2, 1)), 2.0)
    f2 = FrozenAdapter(rng.normal(size=(1, 3)), rng.normal(size=(2, 1)), 0.0)
    live = _adapter(rng)
    latest = AdapterStack("s", "sum_latest", live, [f1, f2])
    full = AdapterStack("s", "sum_all", live, [f1, f2])
    assert np.array_equal(effective_delta(latest), 0.0 * (f2.B_hat @ f2.A_hat) + live.B @ live.A)
    assert np.allclose(effective_delta(full), 2.0 * f1.B_hat @ f1.A_hat + live.B @ live.A)


def test_effective_delta_single_ignores_frozen(rng):
    live = _adapter(rng)
    f = FrozenAdapter(rng.normal(size=(1, 3)), rng.normal(size=(2, 1)), 1.0)
    assert np.array_equal(effective_delta(AdapterStack("s", "single_evolving", live, [f])),
                          live.delta())


def test_effective_delta_shape_mismatch(rng):
    f = FrozenAdapter(np.ones((1, 4)), np.ones((2, 1)), 1.0)
    with pytest.raises(PreconditionError):
        effective_delta(AdapterStack("s", "sum_all", _adapter(rng), [f]))


@pytest.mark.parametrize("policy", POLICIES)
def test_no_history_is_plain_lora(policy, rng):
    live = _adapter(rng)
    assert np.array_equal(effective_delta(AdapterStack("s", policy, live)), live.B @ live.A)


def test_sum_with_zero_magnitudes_equals_single(rng):
    live = _adapter(rng)
    frozen = [FrozenAdapter(rng.normal(size=(1, 3)), rng.normal(size=(2, 1)), 0.0) for _ in range(3)]
    assert np.array_equal(effective_delta(AdapterStack("s", "sum_all", live, frozen)),
                          effective_delta(AdapterStack("s", "single_evolving", live)))


def test_seal_normalizes_b():
    trained = LoraAdapter("s", np.array([[1.0, 0.0]]), np.array([[3.0], [4.0]]))
    stack = AdapterStack("s", "sum_all_inherit", trained.copy())
    out = seal_stage(stack, trained)
    assert np.allclose(out.frozen[0].B_hat, [[0.6], [0.8]])
    assert out.frozen[0].alpha == pytest.approx(5.0)


def test_seal_preserves_function_for_sum(rng):
    trained = _adapter(rng)
    stack = AdapterStack("s", "sum_all", trained.copy())
    out = seal_stage(stack, trained, rng=rng)
    # fresh live adapter has B = 0, so the composed update is unchanged
    assert np.allclose(effective_delta(out), trained.delta(), atol=1e-14)


def test_seal_sd_unit_mode_starts_at_one(rng):
    trained = _adapter(rng)
    out = seal_stage(AdapterStack("s", "sd_all", trained.copy()), trained, rng=rng)
    assert out.frozen[0].alpha == 1.0
    kept = seal_stage(AdapterStack("s", "sd_all", trained.copy()), trained, rng=rng,
                      sd_magnitude="preserving")
    assert np.allclose(effective_delta(kept), trained.delta(), atol=1e-14)


def test_seal_fresh_init():
    rng = np.random.default_rng(5)
    trained = _adapter(rng, d_in=50, d_out=40, r=4)
    out = seal_stage(AdapterStack("s", "sum_latest", trained.copy()), trained,
                     rng=np.random.default_rng(0))
    assert np.array_equal(out.live.B, np.zeros((40, 4)))
    assert abs(out.live.A.std() - INIT_STD) < 0.1 * INIT_STD
    with pytest.raises(PreconditionError):
        seal_stage(AdapterStack("s", "sum_latest", trained.copy()), trained)


def test_seal_inherit_copies(rng):
    trained = _adapter(rng)
    out = seal_stage(AdapterStack("s", "sum_all_inherit", trained.copy()), trained)
    assert np.array_equal(out.live.A, trained.A) and np.array_equal(out.live.B, trained.B)
    out.live.A[0, 0] += 1.0
    assert out.live.A[0, 0] != trained.A[0, 0]


def test_seal_grows_history_by_one(rng):
    stack = AdapterStack("s", "sum_all", _adapter(rng))
    for n in range(1, 4):
        stack = seal_stage(stack, _adapter(rng), rng=rng)
        assert len(stack.frozen) == n


def test_seal_zero_factor(rng):
    trained = LoraAdapter("s", np.ones((1, 3)), np.zeros((2, 1)))
    with pytest.raises(NormalizationError):
        seal_stage(AdapterStack("s", "sum_all", trained.copy()), trained, rng=rng)


def test_seal_single_keeps_no_history(rng):
    trained = _adapter(rng)
    out = seal_stage(AdapterStack("s", "peso", trained.copy()), trained)
    assert out.frozen == [] and np.array_equal(out.live.A, trained.A)


@given(st.integers(0, 10_000))
def test_sealed_directions_have_unit_norm(seed):
    rng = np.random.default_rng(seed)
    trained = LoraAdapter("s", rng.normal(size=(2, 4)) * 10 ** rng.uniform(-3, 3),
                          rng.normal(size=(3, 2)) * 10 ** rng.uniform(-3, 3))
    out = seal_stage(AdapterStack("s", "sd_all_inherit", trained.copy()), trained)
    assert abs(np.linalg.norm(out.frozen[0].A_hat) - 1) <= 1e-10
    assert abs(np.linalg.norm(out.frozen[0].B_hat) - 1) <= 1e-10


def test_inflora_rank_one():
    x = np.tile([1.0, 0.0, 0.0], (5, 1))
    a = inflora_init(x, 1, d_out=2)
    assert np.allclose(np.abs(a.A), [[1.0, 0.0, 0.0]])
    assert not a.train_A and np.array_equal(a.B, np.zeros((2, 1)))


def test_inflora_isotropic_span():
    a = inflora_init(np.array([[1.0, 0, 0], [0, 1.0, 0]]), 2, d_out=2)
    proj = a.A.T @ a.A
    assert np.allclose(proj, np.diag([1.0, 1.0, 0.0]), atol=1e-12)


def test_inflora_max_variance_axis():
    rng = np.random.default_rng(0)
    rot, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    x = rng.normal(size=(500, 4)) * np.array([5.0, 2.0, 1.0, 0.5]) @ rot.T
    a = inflora_init(x, 1, d_out=2).A[0]
    w, v = np.linalg.eigh(x.T @ x / len(x))      # oracle
    cos = abs(a @ v[:, -1])
    assert np.arccos(min(cos, 1.0)) <= 1e-6


def test_inflora_too_few_inputs():
    with pytest.raises(PreconditionError):
        inflora_init(np.ones((1, 3)), 2, d_out=2)


def _stacks(rng):
    return [AdapterStack(s, "single_evolving", LoraAdapter(s, rng.normal(size=(1, 2)),
                                                           rng.normal(size=(2, 1))))
            for s in ("enc", "dec")]


def test_pack_counts(rng):
    v = pack(_stacks(rng))
    assert v.ids == ["enc.A", "enc.B", "dec.A", "dec.B"]
    assert v.total_dim == 8 and v.sizes == [2, 2, 2, 2]


@given(st.integers(0, 10_000))
def test_pack_unpack_round_trip(seed):
    rng = np.random.default_rng(seed)
    template = _stacks(rng)
    v = pack(template).like(rng.normal(size=8))
    live = unpack(v, template)
    again = pack([AdapterStack(s.site_id, s.policy, a) for s, a in zip(template, live)])
    assert np.array_equal(again.flat, v.flat)


def test_unpack_layout_mismatch(rng):
    with pytest.raises(PreconditionError):
        unpack(ParamVector([("enc.A", np.zeros(3))]), _stacks(rng))


def test_param_vector_rejects_duplicates():
    with pytest.raises(PreconditionError):
        ParamVector([("a", [1.0]), ("a", [2.0])])


def test_fresh_adapter_shapes(rng):
    a = fresh_adapter("s", 5, 3, 2, rng)
    assert a.A.shape == (2, 5) and a.B.shape == (3, 2) and not a.B.any()


def test_lora_rank_too_large():
    with pytest.raises(PreconditionError):
        LoraAdapter("s", np.ones((3, 2)), np.ones((2, 3)))

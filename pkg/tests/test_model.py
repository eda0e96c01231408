import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedpt.errors import ConfigError, FormatError, IntegrityError
from fedpt.model import (
    FreezePlan,
    LayerSpec,
    ModelSpec,
    apply_freeze_plan,
    build_model,
    emnist_cnn_spec,
    flatten_trainable,
    load_checkpoint,
    mlp_spec,
    reconstruct,
    save_checkpoint,
    trainable_fraction,
    unflatten,
)

from checks import emnist_model_gradcheck

EMNIST = build_model(emnist_cnn_spec())
EMNIST_TOTAL = 1_690_174


def test_emnist_layer_counts():
    counts = EMNIST.layer_param_counts()
    assert counts["conv2d_0"] == 832
    assert counts["conv2d_1"] == 51_264
    assert counts["groupnorm_0"] == 128
    assert counts["dense_0"] == 1_606_144
    assert counts["dense_1"] == 31_806
    assert EMNIST.param_count == EMNIST_TOTAL
    shapes = dict(zip([l.name for l in EMNIST.spec.layers], EMNIST.output_shapes))
    assert shapes["conv2d_0"] == (28, 28, 32)
    assert shapes["maxpool_0"] == (14, 14, 32)
    assert shapes["groupnorm_0"] == (14, 14, 64)
    assert shapes["maxpool_1"] == (7, 7, 64)
    assert shapes["flatten_0"] == (3136,)


@given(st.integers(1, 50), st.integers(1, 50), st.integers(2, 20))
def test_mlp_count_closed_form(d, h, k):
    assert build_model(mlp_spec(d, h, k)).param_count == d * h + h + h * k + k


def test_empty_and_inconsistent_specs_rejected():
    with pytest.raises(ConfigError):
        build_model(ModelSpec((4,), ()))
    with pytest.raises(ConfigError):
        build_model(ModelSpec((4, 4, 1), (LayerSpec("dense", units=3),)))
    with pytest.raises(ConfigError):
        build_model(ModelSpec((5, 5, 1), (LayerSpec("maxpool"),)))
    with pytest.raises(ConfigError):
        ModelSpec((4,), (LayerSpec("dense", "a", units=2), LayerSpec("dense", "a", units=2)))


def test_freeze_dense_0_fraction():
    pp = apply_freeze_plan(EMNIST, FreezePlan({"dense_0"}), seed=3)
    assert pp.y.size == EMNIST_TOTAL - 1_606_144 == 84_030
    assert round(100 * trainable_fraction(FreezePlan({"dense_0"}), EMNIST), 2) == 4.97


def test_empty_plan_and_single_bias():
    assert trainable_fraction(FreezePlan(), EMNIST) == 1.0
    all_but_bias = FreezePlan({"conv2d_0", "conv2d_1", "groupnorm_0", "dense_0", "dense_1/kernel"}, protect_norm=False)
    assert trainable_fraction(all_but_bias, EMNIST) == 62 / EMNIST_TOTAL


def test_plan_errors():
    with pytest.raises(ConfigError, match="dense_9"):
        FreezePlan({"dense_9"}).resolve(EMNIST)
    everything = FreezePlan({"conv2d_0", "conv2d_1", "groupnorm_0", "dense_0", "dense_1"}, protect_norm=False)
    with pytest.raises(ConfigError):
        everything.resolve(EMNIST)


def test_protect_norm_keeps_groupnorm_trainable():
    pp = apply_freeze_plan(EMNIST, FreezePlan({"groupnorm_0"}), seed=0)
    assert pp.y.size == EMNIST_TOTAL
    assert pp.warnings and "groupnorm_0" in pp.warnings[0]
    off = apply_freeze_plan(EMNIST, FreezePlan({"groupnorm_0"}, protect_norm=False), seed=0)
    assert off.y.size == EMNIST_TOTAL - 128


def test_round_trip_is_bit_exact():
    full = EMNIST.init_params(11)
    pp = apply_freeze_plan(EMNIST, FreezePlan({"dense_0", "conv2d_0/kernel"}), seed=11)
    again = pp.reconstruct()
    for name, v in full.items():
        assert again[name].tobytes() == v.tobytes()


def test_frozen_blocks_independent_of_y():
    model = build_model(mlp_spec(8, 16, 3))
    pp = apply_freeze_plan(model, FreezePlan({"dense_0"}), seed=5)
    a = pp.reconstruct()
    b = pp.reconstruct(np.random.default_rng(0).standard_normal(pp.y.size).astype(np.float32))
    for blk in pp.frozen_blocks:
        assert a[blk.name].tobytes() == b[blk.name].tobytes()


def test_different_seed_changes_frozen_blocks():
    model = build_model(mlp_spec(32, 64, 4))
    a = apply_freeze_plan(model, FreezePlan({"dense_0/kernel"}), seed=1).reconstruct()
    b = apply_freeze_plan(model, FreezePlan({"dense_0/kernel"}), seed=2).reconstruct()
    assert np.mean(a["dense_0/kernel"] != b["dense_0/kernel"]) > 0.99


def test_reconstruct_length_mismatch():
    pp = apply_freeze_plan(build_model(mlp_spec(4, 4, 2)), FreezePlan({"dense_0"}), seed=0)
    with pytest.raises(IntegrityError):
        reconstruct(np.zeros(pp.y.size + 1, np.float32), pp.seed, pp.blocks)


def test_flatten_order_uses_sentinels():
    model = build_model(mlp_spec(3, 2, 2))
    blocks, _ = FreezePlan().resolve(model)
    params = {b.name: np.full(b.shape, i + 1, np.float32) for i, b in enumerate(blocks)}
    flat = flatten_trainable(params, blocks)
    expected = np.concatenate([np.full(b.size, i + 1) for i, b in enumerate(blocks)])
    assert np.array_equal(flat, expected)
    back = unflatten(flat, blocks)
    assert all(np.array_equal(back[k], v) for k, v in params.items())
    with pytest.raises(IntegrityError):
        unflatten(flat[:-1], blocks)


LAYERS = ["conv2d_0", "conv2d_1", "groupnorm_0", "dense_0", "dense_1/kernel", "dense_1/bias", "conv2d_0/bias"]


@given(st.lists(st.sampled_from(LAYERS), unique=True, max_size=5), st.sampled_from(LAYERS))
@settings(max_examples=40)
def test_fraction_monotone_in_plan(plan, extra):
    before = trainable_fraction(FreezePlan(set(plan)), EMNIST)
    try:
        after = trainable_fraction(FreezePlan(set(plan) | {extra}), EMNIST)
    except ConfigError:
        return
    assert after <= before


def test_checkpoint_round_trip(tmp_path):
    model = build_model(mlp_spec(6, 5, 3))
    pp = apply_freeze_plan(model, FreezePlan({"dense_0"}), seed=99)
    pp = pp.with_y(pp.y + 0.25)
    save_checkpoint(tmp_path / "c.bin", pp)
    head, _, payload = (tmp_path / "c.bin").read_bytes().partition(b"\n")
    assert len(payload) == 4 * pp.y.size
    back = load_checkpoint(tmp_path / "c.bin")
    assert back.seed == 99 and back.plan == pp.plan
    assert back.y.tobytes() == pp.y.tobytes()
    assert back.reconstruct()["dense_0/kernel"].tobytes() == pp.reconstruct()["dense_0/kernel"].tobytes()


def test_checkpoint_corruption(tmp_path):
    pp = apply_freeze_plan(build_model(mlp_spec(2, 2, 2)), FreezePlan(), seed=0)
    save_checkpoint(tmp_path / "c.bin", pp)
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-4])
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "short.bin")
    (tmp_path / "bad.bin").write_bytes(b"{not json\n")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.bin")


def test_forward_shapes_emnist():
    from fedpt import tensor as T

    params = {k: T.Tensor(v) for k, v in EMNIST.init_params(0).items()}
    out = EMNIST.forward(params, T.Tensor(np.zeros((2, 28, 28, 1), np.float32)))
    assert out.shape == (2, 62)


def test_full_model_gradient_check():
    errors, _ = emnist_model_gradcheck(seed=1, coords_per_block=3)
    assert max(errors.values()) < 1e-4

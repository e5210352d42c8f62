"""Student/teacher encoder stack: subsampling arithmetic, block structure,
adapter fusion, the frozen text encoder, and checkpoint round-trips."""

import numpy as np
import pytest

import otasr.autodiff as ad
from otasr import arrayio
from otasr.encoders import (
    EncoderConfig,
    Model,
    checkpoint_arrays,
    load_checkpoint,
    model_from_arrays,
    save_checkpoint,
    subsampled_length,
)

TINY = EncoderConfig(num_blocks=2, model_dim=16, ffn_dim=32, conv_kernel=3,
                     teacher_dim=24, teacher_layers=2, vocab=30, input_dim=16)


def np_layer_norm(x, eps=1e-5):
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps)


def test_subsampled_length_values():
    assert subsampled_length(32) == 7
    assert subsampled_length(8) == 1
    for t in range(8, 201):
        once = (t - 3) // 2 + 1
        twice = (once - 3) // 2 + 1
        assert subsampled_length(t) == twice
        assert subsampled_length(t + 1) >= subsampled_length(t)


def test_subsample_rejects_short_inputs():
    model = Model(TINY, seed=0)
    with pytest.raises(ValueError, match="minimum 8"):
        model.subsample(np.zeros((7, TINY.input_dim)))


def test_encoder_output_shapes():
    model = Model(TINY, seed=1)
    for frames in (8, 11, 32, 45):
        x = np.random.default_rng(frames).normal(size=(frames, TINY.input_dim))
        h_tilde, h_teacher = model.encode_acoustic(x)
        t_a = subsampled_length(frames)
        assert h_tilde.value.shape == (t_a, TINY.model_dim)
        assert h_teacher.value.shape == (t_a, TINY.teacher_dim)
        logp = model.predict(h_tilde)
        assert logp.value.shape == (t_a, TINY.vocab_total)


def _zero_block(model, block, keep=()):
    for name, arr in model.params.items():
        if not name.startswith(f"block{block}."):
            continue
        if any(k in name for k in keep):
            continue
        if ".ln.g" in name or name.endswith("out_ln.g"):
            model.params[name] = np.ones_like(arr)
        elif ".ln.b" in name or name.endswith("out_ln.b"):
            model.params[name] = np.zeros_like(arr)
        else:
            model.params[name] = np.zeros_like(arr)


def test_zeroed_block_reduces_to_row_normalization():
    model = Model(TINY, seed=2)
    _zero_block(model, 0)
    x = np.random.default_rng(3).normal(size=(5, TINY.model_dim))
    out = model.conformer_block(ad.constant(x), 0).value
    assert np.allclose(out, np_layer_norm(x), atol=1e-12)


def test_first_feedforward_enters_at_half_strength():
    model = Model(TINY, seed=4)
    _zero_block(model, 0, keep=("ffn1",))
    x = np.random.default_rng(5).normal(size=(4, TINY.model_dim))

    w1 = model.params["block0.ffn1.w1"]
    b1 = model.params["block0.ffn1.b1"]
    w2 = model.params["block0.ffn1.w2"]
    b2 = model.params["block0.ffn1.b2"]

    def ffn(v):
        pre = np_layer_norm(v) @ w1 + b1
        act = pre / (1.0 + np.exp(-pre)) * 1.0  # swish
        return act @ w2 + b2

    out = model.conformer_block(ad.constant(x), 0).value
    assert np.allclose(out, np_layer_norm(x + 0.5 * ffn(x)), atol=1e-10)

    model.params["block0.ffn1.w2"] = 2.0 * w2
    model.params["block0.ffn1.b2"] = 2.0 * b2
    doubled = model.conformer_block(ad.constant(x), 0).value
    assert np.allclose(doubled, np_layer_norm(x + ffn(x)), atol=1e-10)


def test_block_preserves_shape_and_is_deterministic():
    model = Model(TINY, seed=6)
    x = np.random.default_rng(7).normal(size=(6, TINY.model_dim))
    a = model.conformer_block(ad.constant(x), 1).value
    b = model.conformer_block(ad.constant(x), 1).value
    assert a.shape == x.shape
    assert np.array_equal(a, b)


def test_adapter_fuse_scale_zero_is_identity():
    model = Model(TINY, seed=8)
    h_tilde = ad.constant(np.random.default_rng(9).normal(size=(3, TINY.model_dim)))
    h = ad.constant(np.random.default_rng(10).normal(size=(3, TINY.teacher_dim)))
    fused = model.adapter_fuse(h_tilde, h, s=0.0)
    assert np.array_equal(fused.value, h_tilde.value)
    # a fresh model's adapter branch is gated closed (zero output-norm gain),
    # so the branch only moves the features once that gain is opened
    assert np.array_equal(model.adapter_fuse(h_tilde, h, s=1.0).value,
                          h_tilde.value)
    model.params["adapter.ln_out.g"] = np.ones_like(
        model.params["adapter.ln_out.g"])
    moved = model.adapter_fuse(h_tilde, h, s=1.0)
    assert not np.array_equal(moved.value, h_tilde.value)


def test_predict_rows_are_log_distributions():
    model = Model(TINY, seed=11)
    feats = ad.constant(np.random.default_rng(12).normal(size=(5, TINY.model_dim)))
    logp = model.predict(feats).value
    row_mass = np.log(np.exp(logp).sum(axis=1))
    assert np.abs(row_mass).max() < 1e-9


def test_predict_with_zero_weights_reproduces_bias():
    model = Model(TINY, seed=13)
    v = TINY.vocab_total
    model.params["fc1.w"] = np.zeros_like(model.params["fc1.w"])
    bias = np.random.default_rng(14).normal(size=(1, v))
    model.params["fc1.b"] = bias
    feats = ad.constant(np.random.default_rng(15).normal(size=(4, TINY.model_dim)))
    logp = model.predict(feats).value
    want = bias - np.log(np.exp(bias).sum())
    for row in logp:
        assert np.allclose(row, want[0], atol=1e-12)

    model.params["fc1.b"] = np.zeros((1, v))
    uniform = model.predict(feats).value
    assert np.allclose(uniform, -np.log(v), atol=1e-12)


def test_text_encoder_shape_and_determinism():
    model = Model(TINY, seed=16)
    tokens = [5, 9, 3]
    out1 = model.encode_text(tokens)
    out2 = model.encode_text(list(tokens))
    assert out1.shape == (len(tokens) + 2, TINY.teacher_dim)
    assert np.array_equal(out1, out2)
    assert model.teacher_calls == 2


def test_text_encoder_is_order_sensitive():
    model = Model(TINY, seed=17)
    ab = model.encode_text([4, 7])
    ba = model.encode_text([7, 4])
    assert not np.allclose(ab[1], ba[2])  # same token, different context


def test_text_encoder_rejects_reserved_and_out_of_range_ids():
    model = Model(TINY, seed=18)
    for bad in (0, 1, 2):
        with pytest.raises(ValueError, match="reserved"):
            model.encode_text([5, bad])
    with pytest.raises(ValueError, match="vocabulary"):
        model.encode_text([TINY.vocab_total])


def test_student_and_teacher_parameters_are_disjoint():
    model = Model(TINY, seed=19)
    nodes = model.parameter_nodes()
    assert set(nodes) == set(model.params)
    assert not any(name.startswith("teacher") for name in nodes)
    # gradients from a student loss never touch teacher arrays
    x = np.random.default_rng(20).normal(size=(8, TINY.input_dim))
    h_tilde, _ = model.encode_acoustic(x, nodes)
    grads = ad.backward(ad.reduce_sum(h_tilde))
    teacher_before = {k: v.copy() for k, v in model.teacher.items()}
    for k in model.teacher:
        assert np.array_equal(model.teacher[k], teacher_before[k])


def test_different_seeds_give_different_parameters():
    a = Model(TINY, seed=0)
    b = Model(TINY, seed=1)
    assert not np.array_equal(a.params["fc1.w"], b.params["fc1.w"])
    assert not np.array_equal(a.teacher["embed"], b.teacher["embed"])
    again = Model(TINY, seed=0)
    for k in a.params:
        assert np.array_equal(a.params[k], again.params[k])


def test_checkpoint_roundtrip(tmp_path):
    model = Model(TINY, seed=21)
    path = tmp_path / "model.arr"
    save_checkpoint(path, model, use_adapter=True, adapter_scale=0.5)
    loaded, meta = load_checkpoint(path)

    assert meta["use_adapter"] == 1.0
    assert meta["adapter_scale"] == 0.5
    for k in model.params:
        assert np.array_equal(loaded.params[k], model.params[k])
    for k in model.teacher:
        assert np.array_equal(loaded.teacher[k], model.teacher[k])

    x = np.random.default_rng(22).normal(size=(10, TINY.input_dim))
    before = model.predict(model.encode_acoustic(x)[0]).value
    after = loaded.predict(loaded.encode_acoustic(x)[0]).value
    assert np.array_equal(before, after)


def test_checkpoint_rejects_mismatches(tmp_path):
    model = Model(TINY, seed=23)
    arrays = checkpoint_arrays(model, use_adapter=False)

    broken = dict(arrays)
    del broken["meta.vocab"]
    with pytest.raises(ValueError, match="meta"):
        model_from_arrays(broken)

    broken = dict(arrays)
    del broken["student.fc1.w"]
    with pytest.raises(ValueError, match="student"):
        model_from_arrays(broken)

    broken = dict(arrays)
    broken["student.fc1.w"] = np.zeros((2, 2))
    with pytest.raises(ValueError, match="shape"):
        model_from_arrays(broken)

    broken = dict(arrays)
    broken["teacher.bogus"] = np.zeros((1, 1))
    with pytest.raises(ValueError, match="teacher"):
        model_from_arrays(broken)


def test_checkpoint_file_is_named_array_container(tmp_path):
    model = Model(TINY, seed=24)
    path = tmp_path / "model.arr"
    save_checkpoint(path, model, use_adapter=False)
    arrays = arrayio.load_arrays(path)
    assert "meta.num_blocks" in arrays
    assert arrays["student.fc1.w"].shape == model.params["fc1.w"].shape

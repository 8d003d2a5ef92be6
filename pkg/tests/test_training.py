import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsscnet import tensor as T
from dsscnet.model import build, desk_clone, preset
from dsscnet.training import (
    Adam,
    Dataset,
    NonFiniteGradientError,
    TrainConfig,
    cross_entropy_from_probs,
    derive_class_weights,
    evaluate_loss,
    finetune,
    load_checkpoint,
    resolve_class_weights,
    save_checkpoint,
    train,
    weighted_cross_entropy,
    write_log_csv,
)


def toy_dataset(n=12, size=16, n_classes=4, seed=0):
    r = np.random.default_rng(seed)
    labels = np.arange(n) % n_classes
    planes = r.standard_normal((n, size, size)).astype(np.float32) + labels[:, None, None]
    return Dataset(planes, labels, [f"u{i}" for i in range(n)], [f"s{i % 3}" for i in range(n)])


def small_model(n_classes=4, seed=0, dtype=np.float32):
    return build(desk_clone(preset("C1", n_classes=n_classes), input_size=16), seed=seed, dtype=dtype)


# --------------------------------------------------------------------------
# class weights


def test_torgo_weights_before_normalization():
    w = derive_class_weights([2542, 801, 2157], normalize=False)
    np.testing.assert_allclose(w, [0.721, 2.289, 0.850], atol=1e-3)


def test_derived_weights_have_unit_mean():
    w = derive_class_weights([2542, 801, 2157])
    assert abs(w.mean() - 1.0) < 1e-9
    assert np.all(w > 0)


def test_equal_counts_give_unit_weights():
    np.testing.assert_array_equal(derive_class_weights([7, 7, 7, 7]), np.ones(4))


def test_small_counts_ratio():
    w = derive_class_weights([1, 1, 2])
    np.testing.assert_allclose(w / w[2], [2, 2, 1])


def test_zero_count_points_to_other_modes():
    with pytest.raises(ValueError, match="uniform|explicit"):
        derive_class_weights([3, 0, 2])


def test_resolve_modes():
    counts = np.array([2, 1, 1])
    assert np.array_equal(resolve_class_weights(TrainConfig(class_weight_mode="uniform"), counts), np.ones(3))
    got = resolve_class_weights(TrainConfig(class_weight_mode="explicit", class_weights=(1.0, 2.0, 3.0)), counts)
    np.testing.assert_array_equal(got, [1, 2, 3])


# --------------------------------------------------------------------------
# loss


def test_perfect_prediction_has_zero_loss():
    logits = np.array([[0.0, 800.0, 0.0, 0.0]])
    assert float(weighted_cross_entropy(logits, np.array([1]), np.ones(4))) < 1e-9


def test_uniform_prediction_is_ln4():
    loss = float(weighted_cross_entropy(np.zeros((1, 4)), np.array([2]), np.ones(4)))
    assert abs(loss - math.log(4)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.1, 10.0))
def test_loss_is_linear_in_weight(seed, scale):
    r = np.random.default_rng(seed)
    z = r.standard_normal((1, 4)) * 3
    y = r.integers(0, 4, 1)
    w = r.uniform(0.1, 3, 4)
    a = float(weighted_cross_entropy(z, y, w))
    b = float(weighted_cross_entropy(z, y, w * scale))
    assert b == pytest.approx(scale * a, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000))
def test_logit_form_matches_probability_form(seed):
    r = np.random.default_rng(seed)
    z = r.standard_normal(5) * 4
    y = int(r.integers(0, 5))
    w = r.uniform(0.1, 3, 5)
    p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    direct = float(weighted_cross_entropy(z[None], np.array([y]), w))
    assert abs(direct - cross_entropy_from_probs(p, y, w[y])) < 1e-9


def test_batch_loss_is_mean(rng):
    z = rng.standard_normal((5, 3))
    y = np.array([0, 1, 2, 0, 1])
    w = np.array([1.0, 2.0, 0.5])
    per = [float(weighted_cross_entropy(z[i : i + 1], y[i : i + 1], w)) for i in range(5)]
    assert float(weighted_cross_entropy(z, y, w)) == pytest.approx(np.mean(per), rel=1e-12)


def test_minority_gradient_ratio_equals_weight_ratio(rng):
    w = derive_class_weights([30, 10])
    z = rng.standard_normal((1, 2))
    grads = []
    for label in (0, 1):
        tape = T.GradTape()
        # mirrored logits so both samples are equally wrong
        zz = z if label == 0 else z[:, ::-1].copy()
        v = tape.param("zz", zz)
        grads.append(tape.backward(weighted_cross_entropy(v, np.array([label]), w))["zz"])
    ratio = np.abs(grads[1]).sum() / np.abs(grads[0]).sum()
    assert ratio == pytest.approx(w[1] / w[0], rel=1e-12)


# --------------------------------------------------------------------------
# Adam


def test_zero_gradient_leaves_params_and_decays_moments():
    opt = Adam()
    p = {"w": np.array([1.0, -2.0])}
    opt.step(p, {"w": np.array([1.0, 1.0])})
    before = p["w"].copy()
    m_before, v_before = opt.m["w"].copy(), opt.v["w"].copy()
    opt.step(p, {"w": np.zeros(2)})
    # the bias-corrected first moment is still non-zero, so the parameter
    # moves; only the raw moments are checked to decay here
    np.testing.assert_allclose(opt.m["w"], 0.9 * m_before)
    np.testing.assert_allclose(opt.v["w"], 0.999 * v_before)
    fresh = Adam()
    q = {"w": before.copy()}
    fresh.step(q, {"w": np.zeros(2)})
    np.testing.assert_array_equal(q["w"], before)


def test_first_step_is_minus_lr():
    opt = Adam(lr=1e-3)
    p = {"w": np.array([0.0])}
    opt.step(p, {"w": np.array([1.0])})
    assert p["w"][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_constant_gradient_approaches_lr_sign():
    opt = Adam(lr=1e-2)
    p = {"w": np.zeros(3)}
    g = np.array([0.3, -5.0, 2e-3])
    for _ in range(2000):
        prev = p["w"].copy()
        opt.step(p, {"w": g})
    np.testing.assert_allclose(p["w"] - prev, -1e-2 * np.sign(g), rtol=1e-4)


@pytest.mark.parametrize("seed", range(100))
def test_one_step_reduces_quadratic(seed):
    r = np.random.default_rng(seed)
    target = r.standard_normal(6)
    w = r.standard_normal(6) * 3
    f = lambda x: float(((x - target) ** 2).sum())
    before = f(w)
    p = {"w": w}
    Adam(lr=1e-3).step(p, {"w": 2 * (w - target)})
    assert f(p["w"]) < before


def test_nan_gradient_names_parameter():
    opt = Adam()
    p = {"a": np.zeros(2), "b.weight": np.zeros(2)}
    with pytest.raises(NonFiniteGradientError, match="b.weight"):
        opt.step(p, {"a": np.zeros(2), "b.weight": np.array([0.0, np.nan])})
    np.testing.assert_array_equal(p["a"], 0)


# --------------------------------------------------------------------------
# training


def test_single_sample_overfits():
    data = toy_dataset(n=1)
    model = small_model(seed=2)
    # one sample covers one class, so derived weights are undefined
    _, rows = train(model, data, TrainConfig(epochs=10, seed=0, class_weight_mode="uniform"))
    assert rows[-1]["loss"] < 1e-2


def test_zero_learning_rate_is_bit_identical():
    data = toy_dataset()
    model = small_model()
    before = model.params.copy()
    train(model, data, TrainConfig(epochs=2, learning_rate=0.0))
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def test_same_seed_same_log_and_checkpoint(tmp_path):
    data = toy_dataset()
    digests, logs = [], []
    for run in range(2):
        model, rows = train(small_model(), data, TrainConfig(epochs=2, seed=4))
        path = save_checkpoint(tmp_path / f"r{run}.dsck", model)
        digests.append(hashlib.sha256(path.read_bytes()).hexdigest())
        logs.append(rows)
    assert logs[0] == logs[1]
    assert digests[0] == digests[1]


def test_log_columns(tmp_path):
    _, rows = train(small_model(), toy_dataset(), TrainConfig(epochs=2))
    write_log_csv(rows, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,loss,accuracy"
    assert len(lines) == 3


def test_empty_dataset_and_bad_labels():
    with pytest.raises(ValueError, match="empty"):
        train(small_model(), Dataset(np.zeros((0, 16, 16)), np.zeros(0)), TrainConfig())
    bad = toy_dataset()
    bad.labels[0] = 7
    with pytest.raises(ValueError, match="labels"):
        train(small_model(), bad, TrainConfig())


@pytest.mark.parametrize("field,value", [("batch_size", 0), ("epochs", 0), ("learning_rate", -1.0)])
def test_train_config_invariants(field, value):
    assert TrainConfig(**{field: value}).validate()


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_is_exact(tmp_path):
    model, _ = train(small_model(), toy_dataset(), TrainConfig(epochs=1))
    opt = Adam()
    opt.step(model.params.copy(), {k: np.ones_like(v) for k, v in model.params.items()})
    p1 = save_checkpoint(tmp_path / "a.dsck", model, opt, {"corpus_id": "toy"})
    ck = load_checkpoint(p1)
    assert all(np.array_equal(ck.params[k], model.params[k]) and ck.params[k].dtype == model.params[k].dtype
               for k in model.params)
    assert list(ck.params) == list(model.params)
    for k, s in model.bn_state.items():
        assert np.array_equal(ck.bn_state[k].mean, s.mean) and np.array_equal(ck.bn_state[k].var, s.var)
    assert ck.provenance == {"corpus_id": "toy"}
    p2 = save_checkpoint(tmp_path / "b.dsck", ck.to_model(), ck.optimizer, ck.provenance)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_header(tmp_path):
    path = save_checkpoint(tmp_path / "m.dsck", small_model())
    blob = path.read_bytes()
    assert blob[:4] == b"DSCK"
    assert b'"conv_filters"' in blob[:2000]


# --------------------------------------------------------------------------
# fine-tuning


def test_same_class_transfer_restores_exactly(tmp_path):
    data = toy_dataset()
    model, _ = train(small_model(), data, TrainConfig(epochs=1))
    ck = load_checkpoint(save_checkpoint(tmp_path / "c.dsck", model))
    ref = evaluate_loss(model, data)
    tuned, rows = finetune(ck, data, TrainConfig(epochs=1, learning_rate=0.0))
    assert evaluate_loss(ck.to_model(), data) == ref
    assert rows[0]["split"] == "finetune"


def test_four_to_three_class_head_reinit(tmp_path):
    source, _ = train(small_model(), toy_dataset(), TrainConfig(epochs=1))
    ck = load_checkpoint(save_checkpoint(tmp_path / "c.dsck", source))
    target = toy_dataset(n=9, n_classes=3, seed=1)
    tuned, _ = finetune(ck, target, TrainConfig(epochs=1, learning_rate=0.0), n_classes=3)
    assert tuned.params["head.weight"].shape == (3, source.config.embedding_dim)
    fresh = build(tuned.config, seed=0, dtype=np.float32)
    assert np.array_equal(tuned.params["head.weight"], fresh.params["head.weight"])
    for k in source.params:
        if not k.startswith("head."):
            assert np.array_equal(tuned.params[k], source.params[k]), k


def test_width_mismatch_is_rejected(tmp_path):
    ck = load_checkpoint(save_checkpoint(tmp_path / "c.dsck", small_model()))
    other = desk_clone(preset("C4"), input_size=16)
    with pytest.raises(ValueError, match="incompatible"):
        finetune(ck, toy_dataset(), TrainConfig(epochs=1), arch=other)

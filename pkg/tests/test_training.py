import json

import numpy as np
import pytest

from spatialattn.config import ExperimentConfig
from spatialattn.gradcheck import eps_sweep, gradcheck_variant, rel_error
from spatialattn.scene import SimConfig, generate_dataset
from spatialattn.training import (
    AdamState,
    ModelCheckpoint,
    PlateauSchedule,
    TrainingError,
    adam_step,
    clip_global_norm,
    derive_seed,
    initial_checkpoint,
    read_tensor_file,
    split_train_val,
    train,
    write_tensor_file,
)


def scalar_adam(p, g, steps, lr=0.001, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
    return p


def test_adam_zero_gradient():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    adam_step(params, {"w": np.zeros(2)}, state, 0.001)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_hand_value():
    params = {"w": np.array(0.0)}
    adam_step(params, {"w": np.array(1.0)}, AdamState(), 0.001)
    assert float(params["w"]) == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-18)


def test_adam_matches_scalar_reimplementation():
    params = {"w": np.array([0.3])}
    state = AdamState()
    for _ in range(2):
        adam_step(params, {"w": np.array([0.7])}, state, 0.001)
    assert abs(params["w"][0] - scalar_adam(0.3, 0.7, 2)) <= 1e-15


def test_adam_nan_names_tensor():
    params = {"frontend.W_re": np.zeros(3)}
    with pytest.raises(TrainingError, match="frontend.W_re"):
        adam_step(params, {"frontend.W_re": np.array([0.0, np.nan, 0.0])}, AdamState(), 0.001)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(g, 1.0) == pytest.approx(5.0)
    assert np.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
    g = {"a": np.array([0.3])}
    clip_global_norm(g, 5.0)
    assert g["a"][0] == 0.3


def test_plateau_schedule_counts_non_decreases():
    losses = [1.0, 0.9, 0.95, 0.8, 0.8, 0.7, 0.71, 0.72]
    s = PlateauSchedule(0.001, patience=1)
    k = 0
    prev = None
    for v in losses:
        if prev is not None and not v < prev:
            k += 1
        prev = v
        assert s.update(v) == 0.001 * 2.0 ** (-k)


def test_derive_seed_is_stable_and_stage_dependent():
    assert derive_seed(0, "split") == derive_seed(0, "split")
    assert derive_seed(0, "split") != derive_seed(0, "shuffle")
    assert derive_seed(0, "split") != derive_seed(1, "split")


def test_split_is_seeded_and_disjoint(tmp_path):
    m = generate_dataset(SimConfig(count=20, duration_s=0.3, reflection_order=0), tmp_path)
    tr, va = split_train_val(m, 0.1, 7)
    assert len(va) == 2 and not set(tr) & set(va) and len(tr) + len(va) == 20
    assert split_train_val(m, 0.1, 7) == (tr, va)


def test_tensor_file_round_trip(tmp_path):
    tensors = {"b": np.arange(6, dtype=np.int64).reshape(2, 3), "a": np.random.default_rng(0).standard_normal((3, 1)),
               "s": np.array(2.5), "u": np.frombuffer(b"xyz", dtype=np.uint8)}
    digest = "ab" * 32
    write_tensor_file(tmp_path / "t.bin", digest, tensors)
    d, back = read_tensor_file(tmp_path / "t.bin")
    assert d == digest and sorted(back) == sorted(tensors)
    for k in tensors:
        np.testing.assert_array_equal(back[k], tensors[k])
    (tmp_path / "bad.bin").write_bytes(b"nonsense" * 8)
    with pytest.raises(ValueError):
        read_tensor_file(tmp_path / "bad.bin")


def tiny_config(**training):
    return ExperimentConfig().with_overrides(
        simulation={"duration_s": 0.6, "reflection_order": 0},
        frontend={"p": 2, "l": 4},
        attention={"hidden": 4, "layers": 1, "window": 5},
        backend={"hidden": 8, "layers": 1},
        training={"batch_size": 4, **training},
    )


def test_checkpoint_save_load_save_identical(tmp_path):
    cfg = tiny_config()
    ck = initial_checkpoint(cfg, "attention-online")
    ck.save(tmp_path / "a.bin")
    back = ModelCheckpoint.load(tmp_path / "a.bin", expect_config=cfg)
    back.save(tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    for k, v in ck.params.items():
        np.testing.assert_array_equal(back.params[k], v)
    with pytest.raises(ValueError, match="different config"):
        ModelCheckpoint.load(tmp_path / "a.bin", expect_config=cfg.with_overrides(training={"seed": 9}))


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    return generate_dataset(SimConfig(count=12, duration_s=0.6, reflection_order=0), root)


def test_zero_epochs_returns_initial_checkpoint(tiny_data, tmp_path):
    cfg = tiny_config(epochs=0)
    ck, metrics = train(cfg, tiny_data, tmp_path, "average")
    init = initial_checkpoint(cfg, "average")
    assert metrics == [] and ck.epoch == 0 and ck.optimizer.step == 0
    for k in init.params:
        np.testing.assert_array_equal(ck.params[k], init.params[k])
    assert (tmp_path / "metrics.jsonl").read_text() == ""


def test_training_is_bit_deterministic(tiny_data, tmp_path):
    cfg = tiny_config(epochs=2)
    train(cfg, tiny_data, tmp_path / "a", "attention-online")
    train(cfg, tiny_data, tmp_path / "b", "attention-online")
    for name in ("metrics.jsonl", "checkpoint.bin", "config.ini"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    records = [json.loads(line) for line in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [1, 2]
    assert all(np.isfinite(r["train_loss"]) and 0 <= r["val_frame_acc"] <= 1 for r in records)
    ck = ModelCheckpoint.load(tmp_path / "a" / "checkpoint.bin", expect_config=cfg)
    assert ck.epoch == 2 and ck.optimizer.step > 0


# gradient checker ------------------------------------------------------------

def test_rel_error_metric():
    assert rel_error(np.zeros(3), np.zeros(3)) == 0.0
    assert rel_error(np.array([1.0, 2.0]), np.array([1.0, 1.0])) == pytest.approx(0.5)


@pytest.mark.parametrize("variant", ["average", "attention-offline"])
def test_gradcheck_variant(variant):
    rep = gradcheck_variant(variant)
    assert rep.passed and rep.max_rel_err <= 1e-4
    absent = [t.name for t in rep.tensors if t.status == "absent"]
    if variant == "average":
        assert absent and all(n.startswith("attention.") for n in absent)
    else:
        assert not absent


def test_gradcheck_detects_a_broken_gradient(monkeypatch):
    import spatialattn.model as model

    orig = model.Network.backward

    def broken(self, dlogits, need_input_grad=False):
        g = orig(self, dlogits, need_input_grad)
        g["backend.proj.b"] = g["backend.proj.b"] * 1.01
        return g

    monkeypatch.setattr(model.Network, "backward", broken)
    rep = gradcheck_variant("average")
    assert not rep.passed
    assert [t.name for t in rep.tensors if t.status == "FAIL"] == ["backend.proj.b"]


def test_eps_sweep_is_convex():
    errs, convex = eps_sweep("average")
    assert convex, errs
    assert errs[1e-6] < errs[1e-5] and errs[1e-6] < errs[1e-7]

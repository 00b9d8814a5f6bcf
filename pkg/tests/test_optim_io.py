"""Optimizer trajectory oracle, LR schedule shape, checkpoint round-trips."""

import numpy as np
import pytest

from nap import tensor as T
from nap.errors import CheckpointError, ConfigError, DivergenceError
from nap.tensor import AdamW, Tensor, assign_params, load_params, lr_at, save_params
from oracles import adamw_scalar_trajectory


def test_adamw_matches_scalar_reference():
    grads = [0.3, -1.2, 0.05, 0.9, -0.4, 0.0, 2.0, -0.7]
    want = adamw_scalar_trajectory(1.5, grads, lr=0.01)
    p = Tensor(1.5, requires_grad=True, name="w")
    opt = AdamW([p], lr=0.01)
    got = []
    for g in grads:
        p.grad = np.asarray(g, dtype=np.float64)
        opt.step()
        got.append(p.item())
        p.zero_grad()
    assert got == pytest.approx(want, rel=1e-12)


def test_adamw_decoupled_decay_moves_param_with_zero_grad():
    p = Tensor(2.0, requires_grad=True, name="w")
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = np.asarray(0.0)
    opt.step()
    # pure decay: p -= lr * wd * p
    assert p.item() == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_adamw_pure_decay_factor():
    p = Tensor(4.0, requires_grad=True, name="w")
    opt = AdamW([p], lr=1.0, weight_decay=0.1)
    p.grad = np.asarray(0.0)
    opt.step()
    assert p.item() == pytest.approx(4.0 * (1.0 - 0.1))


def test_adamw_zero_lr_never_moves_params(rng):
    p = Tensor(rng.normal(size=(3, 3)), requires_grad=True, name="w")
    before = p.data.copy()
    opt = AdamW([p], lr=0.0, weight_decay=0.3)
    for _ in range(4):
        p.grad = rng.normal(size=(3, 3))
        opt.step()
        p.zero_grad()
    assert np.array_equal(p.data, before)


def test_adamw_skips_params_without_grad():
    a = Tensor(1.0, requires_grad=True, name="a")
    b = Tensor(1.0, requires_grad=True, name="b")
    opt = AdamW([a, b], lr=0.1, weight_decay=0.0)
    a.grad = np.asarray(1.0)
    opt.step()
    assert b.item() == 1.0
    assert a.item() != 1.0


def test_adamw_divergence_names_parameter():
    p = Tensor(1.0, requires_grad=True, name="layer.weight")
    opt = AdamW([p], lr=1.0)
    p.grad = np.asarray(np.inf)
    with pytest.raises(DivergenceError) as exc:
        opt.step()
    assert exc.value.param_name == "layer.weight"


def test_adamw_requires_named_unique_params():
    with pytest.raises(ConfigError):
        AdamW([Tensor(1.0, requires_grad=True)])
    with pytest.raises(ConfigError):
        AdamW([Tensor(1.0, requires_grad=True, name="x"),
               Tensor(2.0, requires_grad=True, name="x")])


def test_lr_schedule_shape():
    max_lr, warmup, total = 1e-3, 10, 100
    values = [lr_at(s, max_lr, warmup, total) for s in range(total + 20)]
    assert values[0] == pytest.approx(max_lr / warmup)      # first step is nonzero
    assert values[warmup - 1] == pytest.approx(max_lr)      # peak reached at end of warmup
    assert max(values) == pytest.approx(max_lr)
    assert values[total - 1] == pytest.approx(max_lr / (total - warmup))
    assert all(v == 0.0 for v in values[total:])             # clamped after the end
    ramp = values[:warmup]
    decay = values[warmup:total]
    assert all(x < y for x, y in zip(ramp, ramp[1:]))
    assert all(x > y for x, y in zip(decay, decay[1:]))


def test_lr_schedule_validation():
    with pytest.raises(ConfigError):
        lr_at(0, 1e-3, 10, 10)
    with pytest.raises(ConfigError):
        lr_at(0, 1e-3, 0, 0)


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    params = {
        "emb.weight": rng.normal(size=(17, 8)),
        "ln.bias": np.array([-0.0, 1e-300, 2.5]),   # signed zero + subnormal
        "scalar": np.asarray(3.141592653589793),
        "wide": rng.normal(size=(3, 4, 5)),
    }
    path = tmp_path / "model.napt"
    save_params(path, params)
    loaded = load_params(path)
    assert set(loaded) == set(params)
    for name, arr in params.items():
        assert loaded[name].shape == np.asarray(arr).shape
        assert np.array_equal(loaded[name], arr)
        # bit-for-bit, including the sign of zero
        assert loaded[name].tobytes() == np.ascontiguousarray(arr, dtype=np.float64).tobytes()


def test_checkpoint_save_is_deterministic(tmp_path, rng):
    params = {"b": rng.normal(size=(4,)), "a": rng.normal(size=(2, 2))}
    p1, p2 = tmp_path / "one.napt", tmp_path / "two.napt"
    save_params(p1, params)
    save_params(p2, dict(reversed(list(params.items()))))  # insertion order must not matter
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path, rng):
    path = tmp_path / "model.napt"
    save_params(path, {"w": rng.normal(size=(3,))})
    raw = bytearray(path.read_bytes())

    bad_magic = tmp_path / "magic.napt"
    bad_magic.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(CheckpointError, match="magic"):
        load_params(bad_magic)

    truncated = tmp_path / "short.napt"
    truncated.write_bytes(bytes(raw[:-4]))
    with pytest.raises(CheckpointError, match="truncated"):
        load_params(truncated)

    trailing = tmp_path / "long.napt"
    trailing.write_bytes(bytes(raw) + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_params(trailing)

    with pytest.raises(CheckpointError):
        load_params(tmp_path / "missing.napt")


def test_checkpoint_version_check(tmp_path, rng):
    path = tmp_path / "model.napt"
    save_params(path, {"w": rng.normal(size=(2,))})
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_params(path)


def test_assign_params_matches_by_name(tmp_path, rng):
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True, name="a")
    b = Tensor(rng.normal(size=(4,)), requires_grad=True, name="b")
    path = tmp_path / "model.napt"
    save_params(path, [a, b])
    a2 = Tensor(np.zeros((2, 3)), requires_grad=True, name="a")
    b2 = Tensor(np.zeros(4), requires_grad=True, name="b")
    assign_params([a2, b2], load_params(path))
    assert np.array_equal(a2.data, a.data)
    assert np.array_equal(b2.data, b.data)


def test_assign_params_error_contracts(tmp_path, rng):
    path = tmp_path / "model.napt"
    save_params(path, {"a": rng.normal(size=(2,)), "zz": rng.normal(size=(2,))})
    table = load_params(path)
    with pytest.raises(CheckpointError, match="mismatch"):
        assign_params([Tensor(np.zeros(2), name="a")], table)
    with pytest.raises(CheckpointError, match="shape"):
        assign_params([Tensor(np.zeros(3), name="a"), Tensor(np.zeros(2), name="zz")], table)

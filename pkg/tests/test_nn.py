import numpy as np
import pytest

from shapefill import nn, tape
from shapefill.nn import AdamConfig, Mlp, ParamSet, adam_step


def make_ps():
    ps = ParamSet("theta_G")
    ps.register("w", np.zeros(3))
    return ps


def test_adam_config_validation():
    with pytest.raises(ValueError):
        AdamConfig(beta1=1.0)
    with pytest.raises(ValueError):
        AdamConfig(lr=0.0)


def test_adam_first_step_moves_by_lr():
    ps = make_ps()
    ps.params["w"].grad = np.ones(3)
    adam_step(ps, AdamConfig(lr=5e-4))
    # bias-corrected first step: delta = -lr * g/|g| (+eps wiggle)
    assert np.allclose(ps.params["w"].data, -5e-4, atol=1e-8)
    assert ps.step_count == 1
    assert ps.params["w"].grad is None  # zeroed after the step


def test_adam_zero_gradient_leaves_param():
    ps = make_ps()
    ps.params["w"].grad = np.zeros(3)
    adam_step(ps, AdamConfig())
    assert np.array_equal(ps.params["w"].data, np.zeros(3))


def test_adam_frozen_is_bit_identical_noop():
    ps = make_ps()
    ps.params["w"].grad = np.ones(3)
    before = ps.state_bytes()
    ps.freeze()
    adam_step(ps, AdamConfig())
    assert ps.state_bytes() == before
    assert ps.skipped_steps == 1
    assert ps.step_count == 0


def test_adam_sign_pattern_invariant_to_gradient_scale():
    rng = np.random.default_rng(3)
    g = rng.normal(size=12)
    deltas = []
    for c in (1.0, 7.5):
        ps = ParamSet("p")
        ps.register("w", np.zeros(12))
        ps.params["w"].grad = c * g
        adam_step(ps, AdamConfig())
        deltas.append(ps.params["w"].data.copy())
    assert np.array_equal(np.sign(deltas[0]), np.sign(deltas[1]))


def test_adam_determinism_over_steps():
    def run():
        rng = np.random.default_rng(11)
        ps = ParamSet("p")
        mlp = Mlp(ps, "f", (2, 4, 1), rng)
        x = np.array([[0.3, -0.2], [1.0, 0.5]])
        for _ in range(20):
            loss = tape.tsum(tape.square(mlp(tape.Tensor(x))))
            tape.backward(loss)
            adam_step(ps, AdamConfig())
        return ps.state_bytes()

    assert run() == run()


def test_mlp_zero_weights_zero_output():
    ps = ParamSet("p")
    rng = np.random.default_rng(0)
    mlp = Mlp(ps, "f", (3, 4, 2), rng)
    for w in mlp.weights:
        w.data[:] = 0.0
    out = mlp(tape.Tensor(np.ones((5, 3))))
    assert np.array_equal(out.data, np.zeros((5, 2)))


def test_single_linear_layer_is_affine():
    ps = ParamSet("p")
    rng = np.random.default_rng(1)
    mlp = Mlp(ps, "f", (3, 2), rng, final_activation=None)
    x = rng.normal(size=(4, 3))
    out = mlp(tape.Tensor(x))
    expected = x @ mlp.weights[0].data + mlp.biases[0].data
    assert np.allclose(out.data, expected)


def test_mlp_gradient_vs_finite_differences():
    ps = ParamSet("p")
    rng = np.random.default_rng(2)
    mlp = Mlp(ps, "f", (3, 6, 1), rng, activation="tanh")
    err = tape.grad_check(lambda t: tape.tsum(mlp(t)), rng.normal(size=(4, 3)))
    assert err < 1e-4


def test_mlp_dimension_error():
    ps = ParamSet("p")
    mlp = Mlp(ps, "f", (3, 4), np.random.default_rng(0))
    with pytest.raises(tape.ShapeError):
        mlp(tape.Tensor(np.ones((5, 2))))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    sets = []
    for name in ("theta_G", "theta_U", "theta_T"):
        ps = ParamSet(name)
        Mlp(ps, "net", (3, 4, 2), rng)
        for p in ps.params.values():
            p.grad = rng.normal(size=p.data.shape)
        adam_step(ps, AdamConfig())
        sets.append(ps)
    path = tmp_path / "model.ivck"
    nn.save_checkpoint(path, sets)
    loaded = nn.load_checkpoint(path)
    assert set(loaded) == {"theta_G", "theta_U", "theta_T"}
    for ps in sets:
        lp = loaded[ps.name]
        assert lp.step_count == ps.step_count
        for k, p in ps.params.items():
            assert np.array_equal(lp.params[k].data, p.data)
            assert np.array_equal(lp.adam_m[k], ps.adam_m[k])
            assert np.array_equal(lp.adam_v[k], ps.adam_v[k])


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ivck"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        nn.load_checkpoint(path)


def test_checkpoint_magic_bytes(tmp_path):
    ps = ParamSet("theta_T")
    ps.register("w", np.zeros(2))
    path = tmp_path / "m.ivck"
    nn.save_checkpoint(path, [ps])
    assert path.read_bytes()[:4] == b"IVCK"

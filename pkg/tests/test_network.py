from dataclasses import replace

import numpy as np
import pytest

from spineseg import tensor_core as tc
from spineseg.errors import ConfigError, GeometryError, StateError
from spineseg.losses import combined_loss_from_logits
from spineseg.network import ModelConfig, ablate, backward, forward, init_model


def store_bytes(model):
    return {n: v.tobytes() for n, v in model.params.items()}


def test_init_deterministic(tiny_config):
    assert store_bytes(init_model(tiny_config)) == store_bytes(init_model(tiny_config))
    other = init_model(replace(tiny_config, seed=1))
    assert store_bytes(other) != store_bytes(init_model(tiny_config))


@pytest.mark.parametrize("dims", [(8, 8, 8), (4, 8, 12), (8, 4, 4)])
def test_output_shape(tiny_config, rng, dims):
    model = init_model(tiny_config)
    logits = forward(model, rng.normal(size=(1,) + dims))
    assert logits.shape == (3,) + dims


def test_two_stage_shape(two_stage_config, rng):
    model = init_model(two_stage_config)
    assert forward(model, rng.normal(size=(1, 8, 8, 16))).shape == (3, 8, 8, 16)


def test_forward_deterministic_and_normalized(tiny_config, rng):
    model = init_model(tiny_config)
    x = rng.normal(size=(1, 8, 8, 8))
    a = forward(model, x)
    b = forward(model, x)
    assert a.tobytes() == b.tobytes()
    probs = tc.softmax(a, axis=0)
    assert np.max(np.abs(probs.sum(axis=0) - 1.0)) <= 1e-12


def test_geometry_error_names_axis(tiny_config, rng):
    model = init_model(tiny_config)
    with pytest.raises(GeometryError, match="axis W"):
        forward(model, rng.normal(size=(1, 8, 6, 8)))
    with pytest.raises(GeometryError):
        forward(model, rng.normal(size=(2, 8, 8, 8)))


def test_config_errors():
    with pytest.raises(ConfigError):
        ModelConfig(embed_dim=10, heads=(3, 3))
    with pytest.raises(ConfigError):
        ModelConfig(depths=(2, 2), heads=(3,))
    with pytest.raises(ConfigError):
        ModelConfig(lam=-1.0)


def test_ablate_semantics(tiny_config):
    m = ablate(tiny_config, "multiscale")
    assert not m.use_multiscale and m.use_adaptive
    a = ablate(tiny_config, "adaptive")
    assert a.use_multiscale and not a.use_adaptive
    assert ablate(tiny_config, "both") == ablate(ablate(tiny_config, "multiscale"), "adaptive")
    with pytest.raises(ConfigError):
        ablate(tiny_config, "decoder")


def test_parameter_counts(tiny_config):
    full = init_model(tiny_config)
    no_ms = init_model(ablate(tiny_config, "multiscale"))
    no_ad = init_model(ablate(tiny_config, "adaptive"))
    base = init_model(ablate(tiny_config, "both"))
    assert base.num_params() < min(no_ms.num_params(), no_ad.num_params())
    assert max(no_ms.num_params(), no_ad.num_params()) < full.num_params()
    assert not any("fusion" in n for n in no_ms.params.names())
    assert not any(".gate." in n for n in no_ad.params.names())
    assert any(".gate." in n for n in full.params.names())


def test_backward_contract(tiny_config, rng):
    model = init_model(tiny_config)
    x = rng.normal(size=(1, 8, 8, 8))
    logits = forward(model, x)
    model.params.zero_grad()
    backward(model, np.zeros_like(logits))
    for name in model.params.names():
        assert not model.params.grad(name).any(), name
    assert model.input_grad.shape == x.shape
    with pytest.raises(StateError):
        backward(model, np.zeros_like(logits))
    model.predict(x)
    with pytest.raises(StateError):
        backward(model, np.zeros_like(logits))


def model_gradcheck(config, dims, probes=5, seed=0):
    model = init_model(config)
    r = np.random.default_rng(seed)
    x = r.normal(size=(config.in_channels,) + dims)
    labels = r.integers(0, config.num_classes, size=dims)

    def f():
        model.params.zero_grad()
        logits = model.forward(x)
        loss, _, _, d = combined_loss_from_logits(logits, labels, config.lam)
        model.backward(d)
        return loss

    return tc.gradcheck_report(f, model.params, probes=probes, h=1e-4, seed=seed)


@pytest.mark.parametrize("which", [None, "both"])
def test_model_gradcheck_tiny(tiny_config, which):
    cfg = tiny_config if which is None else ablate(tiny_config, which)
    report = model_gradcheck(cfg, (4, 4, 4), probes=3)
    worst = max(report, key=report.get)
    assert report[worst] < 1e-5, (worst, report[worst])


def test_model_gradcheck_two_stage(two_stage_config):
    # deep gate weights carry gradients near 1e-9 where roundoff dominates, and
    # the fusion logits are curved enough that h=1e-4 leaves O(h^2) truncation
    # near 4e-5; a smaller step with a mixed tolerance separates both from bugs
    model = init_model(two_stage_config)
    r = np.random.default_rng(1)
    x = r.normal(size=(1, 8, 8, 8))
    labels = r.integers(0, 3, size=(8, 8, 8))

    def f():
        model.params.zero_grad()
        loss, _, _, d = combined_loss_from_logits(model.forward(x), labels, 1.0)
        model.backward(d)
        return loss

    f()
    analytic = {n: model.params.grad(n).copy() for n in model.params}
    for name in model.params.names():
        flat = model.params[name].reshape(-1)
        for idx in r.choice(flat.size, size=min(2, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + 1e-5
            fp = f()
            flat[idx] = old - 1e-5
            fm = f()
            flat[idx] = old
            a, n = analytic[name].reshape(-1)[idx], (fp - fm) / 2e-5
            assert abs(a - n) <= 1e-5 * max(abs(a), abs(n)) + 1e-10, (name, a, n)


def test_input_gradient(tiny_config):
    model = init_model(tiny_config)
    r = np.random.default_rng(2)
    x = r.normal(size=(1, 4, 4, 4))
    labels = r.integers(0, 3, size=(4, 4, 4))
    logits = model.forward(x)
    _, _, _, d = combined_loss_from_logits(logits, labels, 1.0)
    model.backward(d)
    flat = x.reshape(-1)
    for idx in (0, 17, 63):
        old = flat[idx]
        flat[idx] = old + 1e-4
        fp = combined_loss_from_logits(model.forward(x), labels, 1.0)[0]
        flat[idx] = old - 1e-4
        fm = combined_loss_from_logits(model.forward(x), labels, 1.0)[0]
        flat[idx] = old
        assert tc.relative_error(model.input_grad.reshape(-1)[idx], (fp - fm) / 2e-4) < 1e-5


def test_threads_bit_identical(two_stage_config, rng):
    x = rng.normal(size=(1, 8, 8, 8))
    model = init_model(two_stage_config)
    ref = forward(model, x)
    try:
        tc.set_threads(3)
        again = forward(model, x)
    finally:
        tc.set_threads(1)
    assert ref.tobytes() == again.tobytes()

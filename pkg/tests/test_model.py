import numpy as np
import pytest

from ccil import model as mdl
from ccil import numerics as nx
from ccil.concept import MeanBank, RegularizerKind, cms_loss
from ccil.train import TrainConfig, total_loss
from oracles import central_diff, rel_err

SMALL = mdl.ModelConfig(in_channels=2, window_len=16, kernel_len=3, num_classes=3, channels_block1=3, channels_block2=4)


def test_build_model_is_deterministic():
    a, b = mdl.build_model(SMALL, 7), mdl.build_model(SMALL, 7)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    c = mdl.build_model(SMALL, 8)
    assert c.W.tobytes() != a.W.tobytes()


def test_build_model_initialization():
    p = mdl.build_model(SMALL, 0)
    assert np.all(p.params["block1.gamma"] == 1) and not p.params["block2.beta"].any()
    bound = 1 / np.sqrt(2 * 3)
    assert np.all(np.abs(p.params["block1.kernel"]) <= bound)
    assert p.W.shape == (SMALL.feature_dim, 3)


def test_window_shorter_than_kernel_rejected():
    with pytest.raises(nx.DegenerateInputError):
        mdl.build_model(mdl.ModelConfig(in_channels=1, window_len=4, kernel_len=6, num_classes=2), 0)
    # long enough for one conv but not for the second block
    with pytest.raises(nx.DegenerateInputError):
        mdl.build_model(mdl.ModelConfig(in_channels=1, window_len=8, kernel_len=6, num_classes=2), 0)


@pytest.mark.parametrize("preset", sorted(mdl.PRESETS))
def test_preset_feature_dim_matches_forward(preset, rng):
    cfg = mdl.PRESETS[preset]
    params = mdl.build_model(cfg, 0)
    x = rng.normal(size=(2, cfg.in_channels, 1, cfg.window_len))
    z, o, _ = mdl.forward(params, x, "eval")
    assert z.shape == (2, cfg.feature_dim)
    assert o.shape == (2, cfg.num_classes)


def test_dsads_preset_shape():
    cfg = mdl.PRESETS["dsads"]
    assert (cfg.in_channels, cfg.window_len, cfg.kernel_len, cfg.num_classes) == (45, 125, 9, 19)


def test_zero_input_gives_zero_outputs():
    params = mdl.build_model(SMALL, 1)
    z, o, _ = mdl.forward(params, np.zeros((3, 2, 1, 16)), "eval")
    assert not z.any() and not o.any()


def test_logits_are_classifier_times_features(rng):
    params = mdl.build_model(SMALL, 2)
    z, o, _ = mdl.forward(params, rng.normal(size=(5, 2, 1, 16)), "train")
    ref = np.array([[sum(params.W[j, c] * z[n, j] for j in range(z.shape[1])) for c in range(3)] for n in range(5)])
    assert np.max(np.abs(o - ref)) < 1e-12


def test_eval_forward_is_pure(rng):
    params = mdl.build_model(SMALL, 3)
    before = {k: v.copy() for k, v in params.buffers.items()}
    mdl.forward(params, rng.normal(size=(4, 2, 1, 16)), "eval")
    for k, v in params.buffers.items():
        assert v.tobytes() == before[k].tobytes()
    mdl.forward(params, rng.normal(size=(4, 2, 1, 16)), "train")
    assert params.buffers["block1.running_mean"].tobytes() != before["block1.running_mean"].tobytes()
    assert params.buffers["input.mean"].tobytes() == before["input.mean"].tobytes()


def test_forward_shape_mismatch():
    with pytest.raises(nx.DimensionError):
        mdl.forward(mdl.build_model(SMALL, 0), np.zeros((2, 3, 1, 16)))


def test_input_normalization_is_applied(rng):
    params = mdl.build_model(SMALL, 4)
    x = rng.normal(size=(3, 2, 1, 16))
    z_ref, _, _ = mdl.forward(params, x, "eval")
    params.set_input_normalization(np.array([1.0, -2.0]), np.array([2.0, 0.5]))
    shifted = x * np.array([2.0, 0.5])[None, :, None, None] + np.array([1.0, -2.0])[None, :, None, None]
    z, _, _ = mdl.forward(params, shifted, "eval")
    np.testing.assert_allclose(z, z_ref, atol=1e-12)


def _flat_loss(params, x, grad_z_weight, grad_o_weight):
    z, o, _ = mdl.forward(params, x, "train")
    return float(np.sum(z * grad_z_weight) + np.sum(o * grad_o_weight))


@pytest.mark.parametrize("order", [("conv", "act", "pool", "bn"), ("conv", "bn", "act", "pool")])
def test_backward_matches_finite_differences(rng, order):
    cfg = mdl.ModelConfig(**{**SMALL.to_dict(), "block_order": order})
    params = mdl.build_model(cfg, 5)
    x = rng.normal(size=(2, 2, 1, 16))
    gz_w = rng.normal(size=(2, cfg.feature_dim))
    go_w = rng.normal(size=(2, 3))
    _, _, cache = mdl.forward(params, x, "train")
    grads = mdl.backward(cache, gz_w, go_w)
    for name, value in params.params.items():
        def f(v, name=name):
            p = params.copy()
            p.params[name] = v
            return _flat_loss(p, x, gz_w, go_w)

        assert rel_err(grads[name], central_diff(f, value)) < 1e-4, name


def test_backward_paths_reduce(rng):
    params = mdl.build_model(SMALL, 6)
    x = rng.normal(size=(4, 2, 1, 16))
    y = np.array([0, 1, 2, 0])
    z, o, cache = mdl.forward(params, x, "train")
    _, g_o = nx.softmax_cross_entropy(o, y)
    only_ce = mdl.backward(cache, np.zeros_like(z), g_o)
    none_z = mdl.backward(cache, None, g_o)
    for k in only_ce:
        assert only_ce[k].tobytes() == none_z[k].tobytes()
    gz = rng.normal(size=z.shape)
    only_z = mdl.backward(cache, gz, None)
    assert not only_z["classifier.W"].any()
    both = mdl.backward(cache, gz, g_o)
    for k in both:
        np.testing.assert_allclose(both[k], only_z[k] + only_ce[k], atol=1e-12)


def test_combined_objective_finite_differences(rng):
    params = mdl.build_model(SMALL, 9)
    x = rng.normal(size=(6, 2, 1, 16))
    y = np.array([0, 1, 2, 2, 1, 0])
    bank = MeanBank(rng.normal(scale=0.2, size=(3, SMALL.feature_dim, 3)), np.ones(3, dtype=bool), 0.9)
    cfg = TrainConfig(alpha=0.7, regularizer=RegularizerKind.CONCEPT_MATRIX)
    res = total_loss(params, x, y, bank, cfg)

    z, o, _ = mdl.forward(params, x, "train")
    expected = nx.softmax_cross_entropy(o, y)[0] + 0.7 * cms_loss(z, params.W, y, bank).loss
    assert res.loss == pytest.approx(expected, rel=1e-12)
    for name, value in params.params.items():
        def f(v, name=name):
            p = params.copy()
            p.params[name] = v
            return total_loss(p, x, y, bank, cfg).loss

        assert rel_err(res.grads[name], central_diff(f, value)) < 1e-4, name


def test_backward_rejects_mismatched_cache(rng):
    params = mdl.build_model(SMALL, 0)
    _, _, cache = mdl.forward(params, rng.normal(size=(2, 2, 1, 16)), "train")
    with pytest.raises(nx.DimensionError):
        mdl.backward(cache, np.zeros((3, SMALL.feature_dim)), None)


def test_checkpoint_round_trip(tmp_path, rng):
    params = mdl.build_model(SMALL, 11)
    mdl.forward(params, rng.normal(size=(4, 2, 1, 16)), "train")
    mdl.save_checkpoint(tmp_path / "m.ckpt", params, epoch=3, extra={"note": "x"})
    loaded, header = mdl.load_checkpoint(tmp_path / "m.ckpt")
    assert header["epoch"] == 3 and loaded.extra == {"note": "x"}
    assert loaded.config == SMALL
    for group in ("params", "buffers"):
        a, b = getattr(params, group), getattr(loaded, group)
        assert a.keys() == b.keys()
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()
    mdl.save_checkpoint(tmp_path / "m2.ckpt", loaded, epoch=3, extra={"note": "x"})
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_layout(tmp_path):
    import json
    import struct

    params = mdl.build_model(SMALL, 0)
    mdl.save_checkpoint(tmp_path / "m.ckpt", params)
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == b"CCILF64\0"
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    entry = next(e for e in header["tensors"] if e["name"] == "param/classifier.W")
    start = 16 + hlen + entry["offset"]
    W = np.frombuffer(raw[start : start + params.W.nbytes], dtype="<f8").reshape(entry["shape"])
    assert W.tobytes() == params.W.tobytes()

import numpy as np
import pytest

from contrimix import imaging as I
from contrimix import tensor as T
from contrimix.config import TrainConfig
from contrimix.encoders import (
    Model,
    arch_descriptor,
    backbone_forward,
    generate,
    init_params,
    load_model,
    save_model,
    softmax,
)
from contrimix.errors import ConfigError, ShapeError

SMALL = TrainConfig(content_width=4, content_blocks=1, attr_width=4, attr_stages=2, backbone_widths=(4, 4), backbone_groups=2)


def model(seed=0, cfg=SMALL, channels=3) -> Model:
    return Model(init_params(np.random.default_rng(seed), arch_descriptor(cfg, channels)))


def images(n=3, size=16, seed=0):
    return np.random.default_rng(seed).uniform(0.05, 1.0, size=(n, size, size, 3)).astype(np.float32)


def test_shape_contracts():
    m = model()
    x = T.Tensor(images(2, 12))
    assert m.encode_content(x).shape == (2, 12, 12, SMALL.num_attributes)
    assert m.encode_attribute(x).shape == (2, SMALL.num_attributes, 3)
    zc, za = m.encode_content(x), m.encode_attribute(x)
    assert m.generate(zc, za).shape == (2, 12, 12, 3)
    assert m.logits(x).shape == (2, 2)


def test_encoders_are_deterministic():
    m = model()
    x = images()
    a = m.encodings(x)
    b = m.encodings(x.copy())
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()


def test_channel_mismatch_rejected():
    m = model()
    with pytest.raises(ShapeError):
        m.encode_content(T.Tensor(np.ones((1, 8, 8, 4))))
    with pytest.raises(ShapeError):
        m.logits(T.Tensor(np.ones((1, 8, 8, 1))))


def test_generate_identity_attribute():
    zc = T.Tensor(np.random.default_rng(1).normal(size=(2, 4, 4, 3)))
    za = T.Tensor(np.broadcast_to(np.eye(3), (2, 3, 3)).copy())
    np.testing.assert_allclose(generate(zc, za).data, zc.data)


def test_generate_od_is_beer_lambert():
    zc = np.random.default_rng(2).uniform(0, 1, size=(1, 3, 3, 2))
    za = np.random.default_rng(3).uniform(0, 1, size=(1, 2, 3))
    out = generate(T.Tensor(zc), T.Tensor(za), "od", 0.9).data
    ref = 0.9 * np.exp(-np.einsum("nhwl,nlc->nhwc", zc, za))
    np.testing.assert_allclose(out, ref, rtol=1e-5)


def test_generate_oracle_plug_in_reproduces_image():
    rng = np.random.default_rng(4)
    d = I.DomainSpec(0, I.sample_stain_matrix(rng, 3), np.ones(3), 0.0, "fluorescence")
    c, _ = I.sample_concentration(rng, 16, 16, 3)
    img = I.render_fluorescence(c, d, clamp=False)
    with T.precision(np.float64):
        out = generate(T.Tensor(c.values[None]), T.Tensor(d.stain_matrix[None])).data[0]
    np.testing.assert_allclose(out, img, atol=1e-12)


def test_generate_mixing_shape_and_bilinearity():
    rng = np.random.default_rng(5)
    zc = T.Tensor(rng.normal(size=(4, 5, 5, 3)))
    za = T.Tensor(rng.normal(size=(4, 3, 3)))
    donors = T.take(za, [1, 2, 3, 0])
    assert generate(zc, donors).shape == (4, 5, 5, 3)
    np.testing.assert_allclose(generate(zc * 2.5, za).data, 2.5 * generate(zc, za).data, rtol=1e-5, atol=1e-6)


def test_generate_l_mismatch():
    with pytest.raises(ShapeError):
        generate(T.zeros((1, 2, 2, 3)), T.zeros((1, 4, 3)))


def test_softmax_rows_sum_to_one():
    logits = model().predict(images(5))
    np.testing.assert_allclose(softmax(logits).sum(axis=1), 1, atol=1e-6)


def test_init_deterministic_and_scaled():
    cfg = TrainConfig(content_width=64)
    a = init_params(np.random.default_rng(9), arch_descriptor(cfg))
    b = init_params(np.random.default_rng(9), arch_descriptor(cfg))
    for k in a.tensors:
        assert a[k].data.tobytes() == b[k].data.tobytes()
    w = a["content.block0.conv1.w"].data.astype(np.float64)
    fan_in = 3 * 3 * 64
    assert abs(w.var() * fan_in / 2 - 1) < 0.2
    for k in a.tensors:
        if k.endswith(".b"):
            assert np.all(a[k].data == 0)


def test_zero_width_layer_rejected():
    with pytest.raises(ConfigError):
        init_params(np.random.default_rng(0), arch_descriptor(TrainConfig(content_width=0)))


def test_each_parameter_once():
    p = model().params
    ids = [id(t) for t in p.tensors.values()]
    assert len(ids) == len(set(ids))
    assert set(p.groups()) == {"content", "attr", "backbone"}


def test_quadrant_swap_moves_content_more_than_attribute():
    ds = I.make_dataset(I.GenConfig(n_train=100, n_val=2, n_test=2), 0)
    x = ds.train.images
    h = x.shape[1] // 2
    swapped = np.concatenate([np.concatenate([x[:, h:, h:], x[:, h:, :h]], 2), np.concatenate([x[:, :h, h:], x[:, :h, :h]], 2)], 1)
    m = model(1)
    zc0, za0 = m.encodings(x)
    zc1, za1 = m.encodings(swapped)

    def rel(a, b):
        a = a.reshape(len(a), -1).astype(np.float64)
        b = b.reshape(len(b), -1).astype(np.float64)
        return np.linalg.norm(a - b, axis=1) / np.linalg.norm(a, axis=1)

    assert np.mean(rel(za0, za1) < rel(zc0, zc1)) >= 0.9


def test_encoder_gradients_check():
    cfg = TrainConfig(num_attributes=2, content_width=2, content_blocks=1, attr_width=2, attr_stages=2)
    params = init_params(np.random.default_rng(3), arch_descriptor(cfg))
    names = [n for n in params.tensors if not n.startswith("backbone")]
    x = images(2, 6, seed=3)
    rng = np.random.default_rng(4)
    proj_c = rng.normal(size=(2, 6, 6, 2))
    proj_a = rng.normal(size=(2, 2, 3))

    def f(*ts):
        p = params.copy()
        p.tensors.update(dict(zip(names, ts)))
        m = Model(p)
        xt = T.Tensor(x)
        return T.reduce(m.encode_content(xt) * T.Tensor(proj_c), "sum") + T.reduce(
            m.encode_attribute(xt) * T.Tensor(proj_a), "sum"
        )

    rep = T.gradient_check(f, [params[n] for n in names], max_elements=4, skip_kinks=True)
    assert rep.passed, rep


def test_backbone_cross_entropy_gradient_check():
    cfg = TrainConfig(backbone_widths=(2, 2), backbone_groups=1)
    params = init_params(np.random.default_rng(5), arch_descriptor(cfg))
    names = params.names("backbone")
    x = images(3, 6, seed=5)

    def f(*ts):
        p = params.copy()
        p.tensors.update(dict(zip(names, ts)))
        return T.cross_entropy(backbone_forward(T.Tensor(x), p), [0, 1, 1])

    rep = T.gradient_check(f, [params[n] for n in names], max_elements=6, skip_kinks=True)
    assert rep.passed, rep


def test_checkpoint_roundtrip_preserves_predictions(tmp_path):
    m = model(7)
    x = images(4, 12, seed=7)
    save_model(tmp_path / "m.ctmx", m.params, {"step": 3})
    back, manifest = load_model(tmp_path / "m.ctmx")
    assert manifest["step"] == 3 and manifest["arch"] == m.arch
    assert back.predict(x).tobytes() == m.predict(x).tobytes()

import csv
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contrimix import imaging as I
from contrimix.config import TrainConfig
from contrimix.encoders import Model, arch_descriptor, init_params, save_model
from contrimix.errors import DomainError, UsageError
from contrimix.evaluation import (
    balanced_probe_indices,
    domain_probe,
    evaluate_classifier,
    export_embedding_csv,
    macro_f1,
    normalize_panel,
    pca_embed,
    per_class_f1,
    probe_encoders,
    render_content_channels,
    render_mix_grid,
)

SMALL = TrainConfig(content_width=4, content_blocks=1, attr_width=4, attr_stages=2, backbone_widths=(4, 4), backbone_groups=2)


def small_model(seed=0) -> Model:
    return Model(init_params(np.random.default_rng(seed), arch_descriptor(SMALL)))


# -- F1 ---------------------------------------------------------------------------------

def test_f1_hand_example():
    pred = np.array([0, 0, 1, 1, 1])
    labels = np.array([0, 1, 1, 1, 0])
    # class 0: tp 1, fp 1, fn 1 -> 0.5 ; class 1: tp 2, fp 1, fn 1 -> 2/3
    np.testing.assert_allclose(per_class_f1(pred, labels, 2), [0.5, 2 / 3])
    assert macro_f1(pred, labels, 2) == pytest.approx((0.5 + 2 / 3) / 2)


def test_perfect_prediction_has_unit_f1():
    y = np.array([0, 1, 1, 0])
    assert macro_f1(y, y, 2) == 1.0


def test_absent_class_warns_and_counts_zero():
    y = np.zeros(4, dtype=int)
    with pytest.warns(UserWarning, match="class 1"):
        assert macro_f1(y, y, 2) == 0.5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40))
def test_f1_bounded(pairs):
    pred, labels = map(np.array, zip(*pairs))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        f = per_class_f1(pred, labels, 3)
    assert np.all((f >= 0) & (f <= 1))


def test_evaluate_classifier_report():
    ds = I.make_dataset(I.GenConfig(n_train=4, n_val=30, n_test=30), 0)
    m = small_model()
    rep = evaluate_classifier(m, ds.val_ood)
    pred = m.predict(ds.val_ood.images).argmax(1)
    assert rep.accuracy == pytest.approx(np.mean(pred == ds.val_ood.labels))
    assert rep.n == 30 and set(rep.per_domain_accuracy) == set(np.unique(ds.val_ood.domains).tolist())
    assert set(rep.to_json()) >= {"accuracy", "macro_f1", "per_domain_accuracy"}


def test_empty_split_rejected():
    ds = I.make_dataset(I.GenConfig(n_train=4, n_val=4, n_test=4), 0)
    with pytest.raises(UsageError):
        evaluate_classifier(small_model(), ds.val_ood.subset(np.array([], dtype=int)))


# -- probes ------------------------------------------------------------------------------

def test_probe_separates_domains_and_ignores_noise():
    rng = np.random.default_rng(0)
    doms = np.repeat([0, 1, 2], 100)
    separable = rng.normal(size=(300, 4)) + 4 * np.eye(4)[doms]
    assert domain_probe(separable, doms) >= 0.95
    noise = rng.normal(size=(300, 4))
    assert domain_probe(noise, doms) <= 1 / 3 + 0.15


def test_content_pooled_features_average_space():
    enc = np.random.default_rng(1).normal(size=(10, 4, 4, 3))
    doms = np.repeat([0, 1], 5)
    a = domain_probe(enc, doms, "content-pooled", seed=3)
    b = domain_probe(enc.mean(axis=(1, 2)), doms, "attribute", seed=3)
    assert a == b


def test_probe_needs_two_domains():
    with pytest.raises(UsageError):
        domain_probe(np.ones((4, 2)), np.zeros(4))
    with pytest.raises(UsageError):
        domain_probe(np.ones((4, 2)), np.array([0, 1, 0, 1]), "pooled")


def test_balanced_indices_equal_per_cell():
    doms = np.array([0] * 30 + [1] * 30)
    labels = np.array([0] * 25 + [1] * 5 + [0] * 10 + [1] * 20)
    idx = balanced_probe_indices(doms, labels, 100, np.random.default_rng(0))
    counts = {(d, l): int(np.sum((doms[idx] == d) & (labels[idx] == l))) for d in (0, 1) for l in (0, 1)}
    assert set(counts.values()) == {5}
    assert len(np.unique(idx)) == len(idx)


def test_probe_encoders_runs_on_model():
    ds = I.make_dataset(I.GenConfig(n_train=90, n_val=2, n_test=2), 0)
    pa, pc = probe_encoders(small_model(), ds.train, per_cell=10)
    assert 0 <= pa <= 1 and 0 <= pc <= 1


# -- PCA ------------------------------------------------------------------------------------

def test_pca_matches_eigendecomposition():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 5)) @ np.diag([5, 3, 1, 0.5, 0.1])
    res = pca_embed(x, out_dims=2)
    evals, evecs = np.linalg.eigh(np.cov(x.T))
    for k in range(2):
        ref = evecs[:, -1 - k]
        assert abs(abs(res.components[k] @ ref) - 1) < 1e-6
        assert res.explained_variance[k] == pytest.approx(evals[-1 - k], rel=1e-6)


def test_pca_sign_convention_and_determinism():
    x = np.random.default_rng(2).normal(size=(50, 6))
    a, b = pca_embed(x, 3), pca_embed(x.copy(), 3)
    assert a.coords.tobytes() == b.coords.tobytes()
    for v in a.components:
        assert v[np.argmax(np.abs(v))] > 0


def test_pca_full_rank_reconstruction():
    x = np.random.default_rng(3).normal(size=(20, 3))
    res = pca_embed(x, 3)
    np.testing.assert_allclose(res.reconstruct(), x, atol=1e-4)


def test_pca_row_order_invariant():
    x = np.random.default_rng(4).normal(size=(40, 4)) @ np.diag([4, 2, 1, 0.5])
    perm = np.random.default_rng(5).permutation(40)
    a, b = pca_embed(x, 2), pca_embed(x[perm], 2)
    np.testing.assert_allclose(np.abs(a.coords[perm]), np.abs(b.coords), atol=1e-5)


def test_pca_degenerate_inputs():
    with pytest.raises(DomainError):
        pca_embed(np.ones((10, 4)))
    with pytest.raises(UsageError):
        pca_embed(np.ones((1, 4)))


def test_embedding_csv(tmp_path):
    coords = np.array([[0.5, -1.0], [2.0, 3.25]])
    export_embedding_csv(tmp_path / "e.csv", coords, [3, 4], ["train", "test_ood"])
    rows = list(csv.reader(open(tmp_path / "e.csv", encoding="utf-8")))
    assert rows[0] == ["x", "y", "domain_id", "split"]
    assert rows[2] == ["2.0", "3.25", "4", "test_ood"]


# -- image grids -------------------------------------------------------------------------------

def test_mix_grid_layout(tmp_path):
    m = small_model()
    ds = I.make_dataset(I.GenConfig(n_train=6, n_val=2, n_test=2, height=16, width=16), 0)
    src, don = ds.train.images[:2], ds.train.images[2:5]
    save_model(tmp_path / "m.ctmx", m.params)
    grid = render_mix_grid(tmp_path / "m.ctmx", src, don, path=tmp_path / "g.ppm")
    assert grid.shape == (3 * 16, 4 * 16, 3)
    assert np.all(grid[:16, :16] == 1.0)
    np.testing.assert_array_equal(grid[:16, 16:32], np.clip(don[0], 0, 1))
    np.testing.assert_array_equal(grid[16:32, :16], np.clip(src[0], 0, 1))
    assert I.read_ppm(tmp_path / "g.ppm").shape == grid.shape


def test_mix_grid_diagonal_is_self_reconstruction():
    m = small_model()
    x = np.random.default_rng(0).uniform(0.1, 1, size=(2, 8, 8, 3)).astype(np.float32)
    grid = render_mix_grid(m, x, x)
    zc, za = m.encodings(x)
    import contrimix.tensor as T

    rec = m.generate(T.Tensor(zc), T.Tensor(za)).data
    np.testing.assert_allclose(grid[8:16, 8:16], np.clip(rec[0], 0, 1), atol=1e-6)
    np.testing.assert_allclose(grid[16:24, 16:24], np.clip(rec[1], 0, 1), atol=1e-6)


def test_content_panels_shape_and_range():
    m = small_model()
    x = np.random.default_rng(1).uniform(0.1, 1, size=(2, 8, 8, 3)).astype(np.float32)
    grid = render_content_channels(m, x)
    assert grid.shape == (16, (SMALL.num_attributes + 1) * 8, 3)
    assert grid.min() >= 0 and grid.max() <= 1


def test_normalize_panel_constant_and_range():
    assert np.all(normalize_panel(np.full((3, 3), 7.0)) == 0.5)
    p = normalize_panel(np.array([[1.0, 3.0], [2.0, 5.0]]))
    assert p.min() == 0 and p.max() == 1

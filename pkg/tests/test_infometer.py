import csv
import math

import numpy as np
import pytest

from remem import data as D
from remem.errors import UsageError
from remem.infometer import (INFO_PLANE_HEADER, MiEstimate, estimate_from_features, info_plane_point,
                             mean_image_bce, mi_proxy, train_decoder, write_info_plane)
from remem.nn import VitConfig, VitModel


@pytest.fixture(scope="module")
def shapes():
    return D.preset("separable", samples_per_class=40)


def test_mean_image_bce_by_hand():
    train = np.array([[0.0, 1.0], [1.0, 1.0]])
    ev = np.array([[1.0, 0.0]])
    p = np.array([0.5, 1 - 1e-7])
    expected = -(np.log(p[0]) + np.log(1 - p[1])) / 2
    assert abs(mean_image_bce(train, ev) - expected) < 1e-9


def test_zero_updates_is_ln2(shapes):
    z = np.zeros((len(shapes), 4), np.float32)
    dec = train_decoder(z, shapes.flat, 0)
    assert abs(dec.loss(z, shapes.flat) - math.log(2)) < 1e-3


def test_identity_features_reconstruct(shapes):
    y = shapes.flat
    dec = train_decoder(y, y, 400, seed=0)
    assert dec.loss(y, y) < 0.05


def test_constant_features_reach_baseline(shapes):
    y = shapes.flat
    z = np.zeros((len(y), 8), np.float32)
    dec = train_decoder(z, y, 2000, seed=0)
    base = mean_image_bce(y, y)
    assert abs(dec.loss(z, y) - base) <= 0.02 * base


def test_full_batch_when_small(shapes):
    y = shapes.flat[:10]
    a = train_decoder(y, y, 5, seed=1, batch_size=64)
    b = train_decoder(y, y, 5, seed=1, batch_size=10)
    # both runs see the whole set every update
    assert a.loss(y, y) == b.loss(y, y)


def test_ordering_projection_beats_constant(shapes):
    rng = np.random.default_rng(0)
    proj = shapes.flat @ rng.normal(0, 1 / np.sqrt(768), (768, 32))
    const = np.zeros_like(proj)
    a = estimate_from_features(proj.astype(np.float32), shapes.images, 600, seed=0)
    b = estimate_from_features(const.astype(np.float32), shapes.images, 600, seed=0)
    assert a > b
    assert a.baseline_loss == b.baseline_loss


def test_training_fit_never_worse_than_constant(shapes):
    # the decoder starts at the constant predictor, so even noise features
    # cannot push its training loss above the mean-image baseline
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(len(shapes), 16)).astype(np.float32)
    y = shapes.flat
    dec = train_decoder(feats, y, 600, seed=0)
    assert dec.loss(feats, y) <= mean_image_bce(y, y) + 0.02


def test_incomparable_widths():
    a, b = MiEstimate(0.1, 0.2, 10, 32), MiEstimate(0.1, 0.2, 10, 64)
    with pytest.raises(UsageError):
        a < b  # noqa: B015
    assert MiEstimate(0.1, 0.2, 10, 32).mi_proxy == -0.1


def test_model_estimate_is_deterministic(shapes):
    cfg = VitConfig(image_size=16, n_classes=2, n_layers=1)
    m = VitModel(cfg, seed=0)
    small = shapes.subset(np.arange(0, 80, 4))
    assert mi_proxy(m, None, small, 50, seed=3) == mi_proxy(m, None, small, 50, seed=3)


def test_untrained_model_is_at_chance(tmp_path):
    ds = D.preset("standard", samples_per_class=20)
    m = VitModel(VitConfig(n_classes=ds.n_classes, n_layers=1), seed=0)
    pt = info_plane_point(m, None, ds, updates=20, seed=0, tag="init")
    assert abs(pt.teacher_err - (1 - 1 / ds.n_classes)) <= 0.1
    write_info_plane([pt], tmp_path / "plane.csv")
    rows = list(csv.DictReader(open(tmp_path / "plane.csv")))
    assert tuple(rows[0]) == INFO_PLANE_HEADER and rows[0]["tag"] == "init"

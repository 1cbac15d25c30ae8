
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from cosalkit.backend import ToyBackend
from cosalkit.concept import Concept, concept_from_token
from cosalkit.data import load_dataset
from cosalkit.errors import BackendUnavailableError, ValidationError
from cosalkit.metrics import iou
from cosalkit.segmentation import (
    AttentionMap,
    ImageSegmentationError,
    PretrainedHead,
    SegmentConfig,
    SegmentationHead,
    binarize,
    extract_attention,
    fine_segment,
    make_head,
    minmax_normalize,
    resize_bilinear,
    segment_group,
    segment_image,
)
from cosalkit.synthetic import bundled_dataset

LATTICE = [k / 10 for k in range(11)]


@pytest.fixture(scope="module")
def dataset():
    return load_dataset(*bundled_dataset())


@pytest.fixture(scope="module")
def target_concept():
    backend = ToyBackend(seed=0)
    return Concept(embedding=backend.target, backend=backend.descriptor)


# thresholding

def test_binarize_worked_example():
    soft = np.array([[0.2, 0.5], [0.7, 0.49]])
    np.testing.assert_array_equal(binarize(soft, 0.5), [[0, 1], [1, 0]])
    assert binarize(soft, 0.5).dtype == np.uint8


def test_binarize_lattice_boundaries():
    # every (value, position, threshold) combination on the lattice
    for pos in range(9):
        for v in LATTICE:
            grid = np.full(9, 0.0)
            grid[pos] = v
            grid = grid.reshape(3, 3)
            for lam in LATTICE:
                out = binarize(grid, lam)
                assert out.flat[pos] == (1 if v >= lam else 0)
                if v == lam:
                    assert out.flat[pos] == 1


def test_binarize_monotone_on_lattice_grids():
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 11, size=(50_000, 3, 3))
    grids = np.array(LATTICE)[idx]
    prev = None
    for lam in LATTICE:
        out = binarize(grids, lam)
        np.testing.assert_array_equal(out, (idx >= round(lam * 10)).astype(np.uint8))
        if prev is not None:
            assert np.all(out <= prev)
        prev = out


def test_binarize_extremes():
    soft = np.random.default_rng(1).random((5, 5))
    assert binarize(soft, 0.0).all()
    assert binarize(np.ones((2, 2)), 1.0).all()
    assert not binarize(soft * 0.999, 1.0).any()


@pytest.mark.parametrize("lam", [-0.1, 1.1, float("nan")])
def test_binarize_rejects_threshold(lam):
    with pytest.raises(ValidationError):
        binarize(np.zeros((2, 2)), lam)


@given(arrays(np.float64, (3, 3), elements=st.floats(0, 1)), st.floats(0, 1), st.floats(0, 1))
def test_binarize_monotone_property(soft, a, b):
    lo, hi = min(a, b), max(a, b)
    assert np.all(binarize(soft, hi) <= binarize(soft, lo))


# resizing

def test_bilinear_matches_oracle():
    src = np.arange(16, dtype=float).reshape(4, 4) / 15
    out = resize_bilinear(src, (8, 8))
    ref = [[oracles.bilinear_at(src.tolist(), 8, 8, i, j) for j in range(8)] for i in range(8)]
    np.testing.assert_allclose(out, ref, atol=1e-12)


@settings(max_examples=40)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(0, 1)),
       st.integers(1, 12), st.integers(1, 12))
def test_bilinear_oracle_property(src, oh, ow):
    out = resize_bilinear(src, (oh, ow))
    assert out.shape == (oh, ow)
    for i, j in [(0, 0), (oh - 1, ow - 1), (oh // 2, ow // 3)]:
        assert out[i, j] == pytest.approx(oracles.bilinear_at(src.tolist(), oh, ow, i, j), abs=1e-12)
    assert out.min() >= src.min() - 1e-12 and out.max() <= src.max() + 1e-12


def test_bilinear_constant_and_identity():
    np.testing.assert_allclose(resize_bilinear(np.full((3, 5), 0.4), (7, 2)), 0.4)
    src = np.random.default_rng(2).random((4, 6))
    np.testing.assert_array_equal(resize_bilinear(src, (4, 6)), src)


def test_minmax_normalize():
    np.testing.assert_allclose(minmax_normalize(np.array([[2.0, 4.0], [3.0, 2.0]])), [[0, 1], [0.5, 0]])
    np.testing.assert_array_equal(minmax_normalize(np.full((2, 3), 7.0)), np.zeros((2, 3)))


# attention and heads

def test_attention_is_normalized_and_deterministic(dataset, target_concept, toy):
    img = dataset.groups[0].records[0].image()
    a = extract_attention(img, target_concept, 400, toy)
    b = extract_attention(img, target_concept, 400, toy)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.values.min() == 0.0 and a.values.max() == 1.0
    assert a.source_timestep == 400
    # two coarsest resolutions of the toy model are 4x4 and 8x8
    assert a.resolution == (8, 8)
    assert set(a.layers) == {"down.8", "down.4", "up.4", "up.8"}


def test_attention_layer_selection(dataset, target_concept, toy):
    img = dataset.groups[0].records[0].image()
    coarse = extract_attention(img, target_concept, 400, toy, SegmentConfig(layers=("down.4",)))
    assert coarse.resolution == (4, 4)
    with pytest.raises(ValidationError):
        extract_attention(img, target_concept, 400, toy, SegmentConfig(layers=("mid.2",)))


def test_attention_rejects_bad_timestep(dataset, target_concept, toy):
    img = dataset.groups[0].records[0].image()
    with pytest.raises(ValidationError):
        extract_attention(img, target_concept, 1000, toy)


def test_passthrough_with_zero_attention(toy, target_concept, block_image):
    attn = AttentionMap(np.zeros((8, 8)), 400)
    soft = fine_segment(block_image, target_concept, attn, SegmentationHead(), 400, toy)
    assert soft.shape == (64, 64)
    assert not soft.any()


def test_passthrough_upsamples(toy, target_concept, block_image):
    vals = np.random.default_rng(0).random((8, 8))
    soft = fine_segment(block_image, target_concept, AttentionMap(vals, 400), SegmentationHead(), 400, toy)
    np.testing.assert_allclose(soft, resize_bilinear(vals, (64, 64)))


def test_pretrained_head_requires_factory(toy):
    with pytest.raises(BackendUnavailableError):
        make_head(SegmentConfig(head="pretrained"), toy)
    with pytest.raises(BackendUnavailableError):
        PretrainedHead("no_such_module:build", toy)


def constant_head_factory(backend):
    return lambda z_t, t, text, attention: np.full((4, 4), 0.75)


def test_pretrained_head_adapter(toy, target_concept, block_image):
    head = make_head(SegmentConfig(head="pretrained", head_factory="test_segmentation:constant_head_factory"),
                     toy)
    soft = fine_segment(block_image, target_concept, AttentionMap(np.zeros((8, 8)), 400), head, 400, toy)
    np.testing.assert_allclose(soft, 0.75)


# images and groups

def test_good_concept_segments_objects(dataset, target_concept, toy):
    cfg = SegmentConfig()
    for group in dataset.groups:
        for rec in group.records:
            soft, binary = segment_image(rec.image(), target_concept, cfg, toy, SegmentationHead())
            assert soft.shape == binary.shape == rec.mask().shape
            assert iou(binary, rec.mask()) > 0.5


def test_learned_concept_beats_init_token(dataset, toy):
    rec = dataset.groups[0].records[0]
    cfg = SegmentConfig()
    good, _ = segment_image(rec.image(), Concept(toy.target, toy.descriptor), cfg, toy, SegmentationHead())
    poor, _ = segment_image(rec.image(), concept_from_token("object", toy), cfg, toy, SegmentationHead())
    gt = rec.mask().astype(bool)
    assert good[gt].mean() - good[~gt].mean() > poor[gt].mean() - poor[~gt].mean()


def test_working_size_none_keeps_native(dataset, target_concept, toy):
    img = dataset.groups[0].records[0].image()
    soft, _ = segment_image(img, target_concept, SegmentConfig(working_size=None), toy, SegmentationHead())
    assert soft.shape == img.shape[:2]


def test_group_order_and_equivariance(dataset, target_concept, toy):
    images = list(dataset.groups[0].images())
    cfg = SegmentConfig(working_size=None)
    base = segment_group(images, target_concept, cfg, toy)
    perm = [3, 0, 5, 1, 4, 2]
    permuted = segment_group([images[i] for i in perm], target_concept, cfg, toy)
    for k, i in enumerate(perm):
        np.testing.assert_array_equal(permuted[k][0], base[i][0])


def test_duplicates_get_identical_maps(dataset, target_concept, toy):
    img = dataset.groups[0].records[0].image()
    out = segment_group([img, img], target_concept, SegmentConfig(working_size=None), toy)
    np.testing.assert_array_equal(out[0][0], out[1][0])


def test_threaded_matches_serial(dataset, target_concept, toy):
    group = dataset.groups[1]
    serial = segment_group(group, target_concept, SegmentConfig(working_size=None), toy)
    threaded = segment_group(group, target_concept, SegmentConfig(working_size=None, workers=3), toy)
    for (a, _), (b, _) in zip(serial, threaded):
        np.testing.assert_array_equal(a, b)


def test_group_inputs_not_mutated(dataset, target_concept, toy):
    images = list(dataset.groups[0].images())
    copies = [im.copy() for im in images]
    segment_group(images, target_concept, SegmentConfig(), toy)
    for a, b in zip(images, copies):
        np.testing.assert_array_equal(a, b)


def test_group_errors(dataset, target_concept, toy):
    good = dataset.groups[0].records[0].image()
    bad = np.zeros((10, 10, 3))  # not a multiple of the toy latent grid
    with pytest.raises(ImageSegmentationError) as info:
        segment_group([good, bad], target_concept, SegmentConfig(working_size=None), toy)
    assert info.value.image_id == "1"
    errors = {}
    out = segment_group([good, bad], target_concept, SegmentConfig(working_size=None, fail_fast=False),
                        toy, errors=errors)
    assert out[0][0] is not None and out[1] == (None, None)
    assert list(errors) == ["1"]


def test_group_rejects_foreign_concept(dataset, toy):
    other = ToyBackend(seed=1, d_text=8)
    concept = Concept(other.target, other.descriptor)
    with pytest.raises(ValidationError):
        segment_group(dataset.groups[0], concept, SegmentConfig(), toy)


def test_segment_config_round_trip():
    cfg = SegmentConfig(layers=["down.4"], t=300)
    assert SegmentConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValidationError):
        SegmentConfig(head="crf")
    with pytest.raises(ValidationError):
        SegmentConfig(threshold=2)

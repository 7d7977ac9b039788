import numpy as np
import pytest

from drm.featurizer import (
    RELATIVE_LAYOUT,
    SPATIAL_LAYOUT,
    EmbeddingTables,
    FeatureError,
    featurize,
    make_tables,
    proposal_labels,
    relative_spatial,
    spatial_encoding,
)
from drm.synthgraph import EntityInstance, RelationAnnotation, SceneGraphSample

REL = {name: k for k, name in enumerate(RELATIVE_LAYOUT)}
SP = {name: k for k, name in enumerate(SPATIAL_LAYOUT)}


def _sample(boxes, cats=None):
    cats = cats or list(range(len(boxes)))
    ents = tuple(EntityInstance(c, b, 100 + k) for k, (c, b) in enumerate(zip(cats, boxes)))
    return SceneGraphSample("s", ents, (RelationAnnotation(0, 1, 0),) if len(boxes) > 1 else ())


@pytest.fixture
def tables():
    return make_tables(5, d_v=16, d_s=8, d_u=24, seed=0)


def test_two_entities_give_two_pairs(tables):
    b = featurize(_sample([(0.1, 0.1, 0.3, 0.3), (0.5, 0.5, 0.7, 0.9)]), tables)
    assert b.pair_index.tolist() == [[0, 1], [1, 0]]
    assert b.union.shape == (2, 24)
    assert b.entity_features.shape == (2, 16)


def test_pair_count_is_n_times_n_minus_one(tables):
    boxes = [(0.1 * k, 0.1, 0.1 * k + 0.05, 0.2) for k in range(5)]
    b = featurize(_sample(boxes, [0, 1, 2, 3, 4]), tables)
    assert b.num_pairs == 20
    pairs = [tuple(p) for p in b.pair_index]
    assert len(set(pairs)) == 20 and all(i != j for i, j in pairs)


def test_same_category_same_semantic_row(tables):
    b = featurize(_sample([(0.1, 0.1, 0.3, 0.3), (0.5, 0.5, 0.7, 0.9)], [2, 2]), tables)
    np.testing.assert_array_equal(b.semantic[0], b.semantic[1])
    assert np.linalg.norm(b.semantic[0]) == pytest.approx(1.0)


def test_identical_boxes_relative_part(tables):
    box = (0.2, 0.2, 0.4, 0.5)
    b = featurize(_sample([box, box]), tables)
    rel = b.union[0, : len(RELATIVE_LAYOUT)]
    assert rel[REL["dx"]] == 0 and rel[REL["dy"]] == 0
    assert rel[REL["log_w_ratio"]] == 0 and rel[REL["log_h_ratio"]] == 0
    assert rel[REL["iou"]] == pytest.approx(1.0)


def test_single_entity_rejected(tables):
    with pytest.raises(FeatureError):
        featurize(_sample([(0.1, 0.1, 0.2, 0.2)]), tables)


def test_unit_box_spatial_encoding():
    v = spatial_encoding((0.0, 0.0, 1.0, 1.0))
    assert v[SP["w"]] == 1 and v[SP["h"]] == 1 and v[SP["area"]] == 1
    assert v[SP["cx"]] == 0.5 and v[SP["cy"]] == 0.5


def test_relative_spatial_self_and_disjoint():
    b = (0.1, 0.2, 0.3, 0.6)
    r = relative_spatial(b, b)
    assert r[REL["dx"]] == 0 and r[REL["log_area_ratio"]] == 0 and r[REL["iou"]] == 1
    assert relative_spatial((0.0, 0.0, 0.1, 0.1), (0.5, 0.5, 0.6, 0.6))[REL["iou"]] == 0


def test_degenerate_box_rejected():
    with pytest.raises(FeatureError):
        spatial_encoding((0.2, 0.2, 0.2, 0.3))
    with pytest.raises(FeatureError):
        relative_spatial((0.1, 0.1, 0.2, 0.2), (0.3, 0.3, 0.3, 0.3))


def test_featurize_is_pure(tables):
    s = _sample([(0.1, 0.1, 0.3, 0.3), (0.5, 0.5, 0.7, 0.9), (0.2, 0.6, 0.4, 0.8)], [0, 1, 1])
    a, b = featurize(s, tables, seed=3), featurize(s, tables, seed=3)
    np.testing.assert_array_equal(a.entity_features, b.entity_features)
    np.testing.assert_array_equal(a.union, b.union)
    assert not np.array_equal(a.entity_features, featurize(s, tables, seed=4).entity_features)
    assert np.isfinite(a.union).all()


def test_permutation_equivariance(tables):
    boxes = [(0.1, 0.1, 0.3, 0.3), (0.5, 0.5, 0.7, 0.9), (0.2, 0.6, 0.4, 0.8), (0.6, 0.1, 0.9, 0.3)]
    cats = [0, 1, 1, 3]
    s = _sample(boxes, cats)
    perm = [2, 0, 3, 1]  # new position k holds old entity perm[k]
    ps = SceneGraphSample("s", tuple(s.entities[i] for i in perm), ())
    a, b = featurize(s, tables), featurize(ps, tables)
    np.testing.assert_allclose(b.entity_features, a.entity_features[perm])
    np.testing.assert_allclose(b.semantic, a.semantic[perm])
    row_a = {tuple(p): k for k, p in enumerate(a.pair_index)}
    for k, (i, j) in enumerate(b.pair_index):
        np.testing.assert_allclose(b.union[k], a.union[row_a[(perm[i], perm[j])]])


def test_tables_round_trip_arrays():
    t = make_tables(4, seed=2)
    back = EmbeddingTables.from_arrays(t.to_arrays())
    np.testing.assert_array_equal(back.prototypes, t.prototypes)
    np.testing.assert_array_equal(back.union_proj, t.union_proj)
    assert back.appearance_noise == t.appearance_noise


def test_proposal_labels_mostly_correct():
    t = make_tables(8, seed=0)
    boxes = [(0.05 * k, 0.1, 0.05 * k + 0.04, 0.2) for k in range(8)]
    b = featurize(_sample(boxes, list(range(8))), t)
    assert (proposal_labels(b, t) == b.labels).mean() >= 0.75

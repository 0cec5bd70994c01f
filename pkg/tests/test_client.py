import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from fedprok.client import (ClientState, LocalHyper, PrototypeEntry, compute_prototypes, cosine_relation,
                            deserialize_prototypes, local_train_round, prototype_record_size, select_base_class,
                            serialize_prototypes, translate_features)
from fedprok.data import DatasetSpec, PartitionConfig, Samples, build_task_stream, generate_dataset
from fedprok.errors import ArgumentError, DimensionError, FormatError, NumericError
from fedprok.nn import ModelParams, forward_features, init_params, serialize_params


def identity_extractor(d, classes=2):
    """One ReLU layer with identity weights: features equal non-negative inputs."""
    return ModelParams(((np.eye(d), np.zeros(d)),), (np.zeros((classes, d)), np.zeros(classes)))


# compute_prototypes

def test_single_sample_prototype_is_its_feature():
    p = init_params(4, [5], 3, 2, 0)
    s = Samples(np.random.default_rng(0).normal(size=(2, 4)), [0, 1])
    protos = compute_prototypes(p, s)
    feats = forward_features(p, s.X)
    assert np.array_equal(protos[0].prototype, feats[0]) and np.array_equal(protos[1].prototype, feats[1])
    assert protos[0].sample_count == 1


def test_opposite_features_average_to_zero():
    p = ModelParams((), (np.zeros((1, 3)), np.zeros(1)))
    v = np.array([1.0, -2.0, 3.0])
    protos = compute_prototypes(p, Samples(np.stack([v, -v]), [0, 0]))
    assert not protos[0].prototype.any()


def test_prototype_mean_matches_scalar_loop_on_five_samples():
    rng = np.random.default_rng(1)
    p = init_params(3, [4], 3, 2, 1)
    s = Samples(rng.normal(size=(5, 3)), [0, 1, 0, 0, 1])
    feats = forward_features(p, s.X)
    for c, entry in compute_prototypes(p, s).items():
        rows = [feats[i].tolist() for i in range(5) if s.y[i] == c]
        np.testing.assert_allclose(entry.prototype, oracles.mean_of(rows), atol=1e-12, rtol=0)
        assert entry.sample_count == len(rows)


def test_empty_samples_rejected():
    with pytest.raises(ArgumentError):
        compute_prototypes(init_params(2, [], 2, 2, 0), Samples(np.zeros((0, 2)), []))


def test_frozen_extractor_reproduces_stored_prototypes():
    p = init_params(4, [6], 3, 2, 3)
    s = Samples(np.random.default_rng(2).normal(size=(8, 4)), [0, 1] * 4)
    a, b = compute_prototypes(p, s), compute_prototypes(p, s)
    assert all(a[c].prototype.tobytes() == b[c].prototype.tobytes() for c in a)


# cosine_relation

def test_cosine_cases():
    a = np.array([1.0, 2.0, 3.0])
    assert cosine_relation(a, a) == pytest.approx(1.0, abs=1e-15)
    assert cosine_relation([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine_relation(a, -a) == pytest.approx(-1.0, abs=1e-15)


def test_cosine_errors():
    with pytest.raises(NumericError):
        cosine_relation([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(DimensionError):
        cosine_relation([1.0], [1.0, 2.0])


# select_base_class

def test_single_candidate():
    assert select_base_class([1.0, 0.0], {7: [0.0, 1.0]}) == 7


def test_equal_prototype_wins():
    cands = {0: [1.0, 0.0, 0.0], 1: [0.3, 0.4, 0.5], 2: [0.0, 0.0, 1.0]}
    assert select_base_class([0.3, 0.4, 0.5], cands) == 1


def test_literal_argmin_rule_picks_least_similar():
    cands = {0: [1.0, 0.0], 1: [-1.0, 0.1], 2: [0.0, 1.0]}
    assert select_base_class([1.0, 0.0], cands, "literal_argmin") == 1


def test_ties_go_to_smallest_id():
    assert select_base_class([1.0, 1.0], {5: [2.0, 2.0], 3: [1.0, 1.0]}) == 3


def test_select_errors():
    with pytest.raises(ArgumentError):
        select_base_class([1.0], {})
    with pytest.raises(ArgumentError):
        select_base_class([1.0], {0: [1.0]}, "nearest")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(2, 8))
def test_select_matches_brute_force_and_is_scale_free(seed, n, d):
    rng = np.random.default_rng(seed)
    prev = rng.normal(size=d)
    cands = {int(c): rng.normal(size=d) for c in rng.choice(50, size=n, replace=False)}
    expected = oracles.nearest_by_cosine(prev.tolist(), {c: v.tolist() for c, v in cands.items()})
    assert select_base_class(prev, cands) == expected
    scaled = {c: v * rng.uniform(0.1, 10.0) for c, v in cands.items()}
    assert select_base_class(prev * 3.0, scaled) == expected


# translate_features

def test_zero_translation():
    f = np.random.default_rng(3).normal(size=(3, 4))
    mu = np.ones(4)
    assert np.array_equal(translate_features(f, mu, mu), f)


def test_centroid_maps_to_centroid():
    mu_n, mu_p = np.array([1.0, 2.0]), np.array([-3.0, 0.5])
    out = translate_features(np.stack([mu_n, mu_n]), mu_n, mu_p)
    np.testing.assert_allclose(out, np.stack([mu_p, mu_p]), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 6))
def test_translation_matches_scalar_loop_and_preserves_geometry(seed, rows, d):
    rng = np.random.default_rng(seed)
    f, mu_n, mu_p = rng.normal(size=(rows, d)), rng.normal(size=d), rng.normal(size=d)
    out = translate_features(f, mu_n, mu_p)
    np.testing.assert_allclose(out, oracles.translate(f.tolist(), mu_n.tolist(), mu_p.tolist()), atol=1e-12, rtol=0)
    np.testing.assert_allclose(out[:, None] - out[None], f[:, None] - f[None], atol=1e-12)


def test_full_base_set_mean_lands_on_previous_prototype():
    rng = np.random.default_rng(4)
    f = rng.normal(size=(9, 3))
    mu_p = rng.normal(size=3)
    np.testing.assert_allclose(translate_features(f, f.mean(axis=0), mu_p).mean(axis=0), mu_p, atol=1e-14)


def test_translate_shape_errors():
    with pytest.raises(DimensionError):
        translate_features(np.zeros((2, 3)), np.zeros(2), np.zeros(3))


# wire format

def test_prototype_records_round_trip():
    protos = {4: PrototypeEntry(4, [1.0, 2.0], 3, 1), 1: PrototypeEntry(1, [-1.0, 0.5], 7, 1)}
    data = serialize_prototypes(protos)
    assert len(data) == 2 * prototype_record_size(2) == 2 * (8 + 16)
    assert data[:8] == bytes([1, 0, 0, 0, 7, 0, 0, 0])
    back = deserialize_prototypes(data, 2, 1)
    assert sorted(back) == [1, 4]
    assert back[4].sample_count == 3 and np.array_equal(back[4].prototype, [1.0, 2.0])


def test_prototype_records_reject_bad_payloads():
    with pytest.raises(FormatError):
        deserialize_prototypes(b"\0" * 10, 2)
    rec = serialize_prototypes({0: PrototypeEntry(0, [1.0], 1, 1)})
    with pytest.raises(FormatError):
        deserialize_prototypes(rec + rec, 1)


def test_entry_validation():
    with pytest.raises(ArgumentError):
        PrototypeEntry(0, [1.0], 0, 1)
    with pytest.raises(NumericError):
        PrototypeEntry(0, [np.nan], 1, 1)


# local_train_round

@pytest.fixture
def scripted():
    spec = DatasetSpec(num_classes=4, input_dim=6, train_per_class=20, seed=1)
    train, _ = generate_dataset(spec)
    stream = build_task_stream(0, train, PartitionConfig(num_tasks=2), 1, [0, 1, 2, 3])
    params = init_params(6, [8], 5, 2, 0)
    return stream, ClientState(0, params, {})


def test_first_task_trains_on_real_samples_only(scripted):
    stream, state = scripted
    hyper = LocalHyper(epochs=1, batch_size=8)
    s1, u1 = local_train_round(state, stream.task(1), None, hyper, np.random.default_rng(0))
    s2, u2 = local_train_round(state, stream.task(1), None, LocalHyper(epochs=1, batch_size=8, translate=False),
                               np.random.default_rng(0))
    assert u1.params == u2.params
    assert sorted(u1.prototypes) == [0, 1] and u1.num_samples == 40


def test_upload_byte_count_is_exact(scripted):
    stream, state = scripted
    _, u = local_train_round(state, stream.task(1), None, LocalHyper(epochs=1), np.random.default_rng(0))
    assert u.bytes_uploaded == len(serialize_params(u.params)) + 2 * prototype_record_size(5)
    _, u = local_train_round(state, stream.task(1), None, LocalHyper(epochs=1, share_prototypes=False),
                             np.random.default_rng(0))
    assert u.prototypes == {} and u.bytes_uploaded == len(serialize_params(u.params))


def test_zero_pseudo_count_matches_no_translation(scripted):
    stream, state = scripted
    s1, _ = local_train_round(state, stream.task(1), None, LocalHyper(epochs=1), np.random.default_rng(0))
    frozen = dict(train_extractor=False, epochs=2)
    _, a = local_train_round(s1, stream.task(2), None, LocalHyper(pseudo_per_class=0, **frozen), np.random.default_rng(5))
    _, b = local_train_round(s1, stream.task(2), None, LocalHyper(translate=False, **frozen), np.random.default_rng(5))
    _, c = local_train_round(s1, stream.task(2), None, LocalHyper(**frozen), np.random.default_rng(5))
    assert a.params == b.params
    assert not c.params == b.params


def test_prototype_bookkeeping_over_two_tasks(scripted):
    stream, state = scripted
    s1, _ = local_train_round(state, stream.task(1), None, LocalHyper(epochs=1), np.random.default_rng(0))
    s2, u2 = local_train_round(s1, stream.task(2), None, LocalHyper(epochs=1, train_extractor=False),
                               np.random.default_rng(1))
    assert set(s2.prototypes) == {0, 1, 2, 3}
    assert s2.seen_classes == (0, 1) and s2.current_classes == (2, 3)
    assert sorted(u2.prototypes) == [2, 3]
    assert s2.params.num_classes == 4
    # extractor was frozen, so previous prototypes are still valid
    assert s2.params.extractor[0][0].tobytes() == s1.params.extractor[0][0].tobytes()


def test_global_prototypes_override_local(scripted):
    stream, state = scripted
    s1, _ = local_train_round(state, stream.task(1), None, LocalHyper(epochs=1), np.random.default_rng(0))
    g = {0: PrototypeEntry(0, np.full(5, 0.25), 99, 1)}
    s2, _ = local_train_round(s1, stream.task(2), g, LocalHyper(epochs=1, train_extractor=False),
                              np.random.default_rng(1))
    assert np.array_equal(s2.prototypes[0].prototype, np.full(5, 0.25))


def test_missing_previous_prototype_is_an_error(scripted):
    stream, state = scripted
    s1, _ = local_train_round(state, stream.task(1), None, LocalHyper(epochs=1), np.random.default_rng(0))
    broken = ClientState(0, s1.params, {}, s1.seen_classes, s1.current_task, s1.current_classes)
    with pytest.raises(RuntimeError, match="previous classes"):
        local_train_round(broken, stream.task(2), None, LocalHyper(epochs=1), np.random.default_rng(1))


def test_reappearing_classes_rejected(scripted):
    stream, state = scripted
    s1, _ = local_train_round(state, stream.task(1), None, LocalHyper(epochs=1), np.random.default_rng(0))
    s2, _ = local_train_round(s1, stream.task(2), None, LocalHyper(epochs=1), np.random.default_rng(0))
    from fedprok.data import Task
    with pytest.raises(ArgumentError):
        local_train_round(s2, Task(3, (0,), stream.task(1).samples.of_classes([0])), None, LocalHyper(epochs=1),
                          np.random.default_rng(0))

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cginv.errors import InvalidParams, MalformedInput, NormalityViolation, OutOfVocabulary
from cginv.groups import GroupFamily, image_family, transposition_family
from cginv.tasks import (JoinSampler, SCMSpec, couple, couple_batch, deserialize_dataset, glyph_bitmaps,
                         glyph_scm, make_glyph_dataset, reconstruct, rod_demo, sample_extrapolation,
                         sample_training, seq_invariant_pairs, seq_target, sequence_scm, serialize_dataset,
                         target_range, uniform_join_draw)


def test_seq_target_examples():
    assert seq_target(1, [3, 1, 2]) == 6
    assert seq_target(4, [25, 30, 5, 40]) == 2
    assert seq_target(3, [1, 4, 2, 9]) == 10
    assert seq_target(2, [5, 1, 2]) == 3
    with pytest.raises(OutOfVocabulary):
        seq_target(1, [0, 3])
    with pytest.raises(OutOfVocabulary):
        seq_target(1, [100])
    with pytest.raises(InvalidParams):
        seq_target(3, [1, 2, 3])


def test_target_ranges():
    assert target_range(1) == (10, 990)
    assert target_range(4) == (0, 10)
    assert sequence_scm(1).n_classes == 981
    assert sequence_scm(4).n_classes == 11


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.lists(st.integers(1, 99), min_size=10, max_size=10), st.data())
def test_target_invariance(task, seq, data):
    pairs = seq_invariant_pairs(task)
    y = seq_target(task, seq)
    for _ in range(5):
        if not pairs:
            break
        i, j = data.draw(st.sampled_from(pairs))
        seq = list(seq)
        seq[i - 1], seq[j - 1] = seq[j - 1], seq[i - 1]
        assert seq_target(task, seq) == y


def test_target_sensitivity_outside_invariant_set():
    rng = np.random.default_rng(0)
    all_pairs = seq_invariant_pairs(1)
    for task in (2, 3, 4):
        inv = set(seq_invariant_pairs(task))
        for i, j in all_pairs:
            if (i, j) in inv:
                continue
            found = False
            for _ in range(200):
                s = list(rng.integers(1, 100, size=10))
                t = list(s)
                t[i - 1], t[j - 1] = t[j - 1], t[i - 1]
                if seq_target(task, s) != seq_target(task, t):
                    found = True
                    break
            assert found, (task, i, j)


def test_training_sequences_sorted():
    spec = sequence_scm(1)
    ds = sample_training(spec, 500, seed=0)
    assert np.all(np.diff(ds.inputs, axis=1) >= 0)
    assert np.array_equal(ds.labels + 10, ds.inputs.sum(axis=1))


def test_extrapolation_permuted_with_same_sum():
    spec = sequence_scm(1)
    ds = sample_extrapolation(spec, 500, seed=0)
    assert np.mean(np.all(np.diff(ds.inputs, axis=1) >= 0, axis=1)) < 0.05
    assert np.array_equal(ds.labels + 10, ds.inputs.sum(axis=1))
    assert np.array_equal(np.sort(ds.inputs, axis=1), ds.hidden)


def test_task2_keeps_first_position():
    ds = sample_extrapolation(sequence_scm(2), 300, seed=1)
    assert np.array_equal(ds.inputs[:, 0], ds.hidden[:, 0])


def test_task4_training_uses_d():
    spec = sequence_scm(4)
    ds = sample_training(spec, 300, seed=0)
    assert not spec.sampler("D").materialized
    assert np.mean(np.all(np.diff(ds.inputs, axis=1) >= 0, axis=1)) < 0.05
    assert np.array_equal(reconstruct(ds), ds.inputs)
    labels = np.array([seq_target(4, x) for x in ds.inputs.astype(int)])
    assert np.array_equal(labels, ds.labels)


def test_empty_i_and_d_is_identity():
    f = transposition_family(4)
    spec = SCMSpec(f, (), (), lambda rng, n: (rng.standard_normal((n, 4)), None),
                   lambda x, td, m: np.zeros(len(x), dtype=int), 1)
    ds = sample_training(spec, 20, seed=3)
    assert np.array_equal(ds.inputs, ds.hidden)
    ex = sample_extrapolation(spec, 20, seed=3)
    assert np.array_equal(ex.inputs, ds.inputs)
    p = couple(spec, 0)
    assert np.array_equal(p.x_factual, p.x_counterfactual)


def test_single_order_two_group_draw():
    f = transposition_family(2)
    d = uniform_join_draw(f, [0], np.random.default_rng(0), n=4000)
    frac = np.mean(d.perms[:, 0] == 1)
    assert abs(frac - 0.5) < 3 * np.sqrt(0.25 / 4000)
    ident = uniform_join_draw(f, [], np.random.default_rng(0), n=5)
    assert np.all(ident.perms == np.arange(2))


def _chi_square(perms, order):
    keys, counts = np.unique(perms, axis=0, return_counts=True)
    assert len(keys) == order
    exp = len(perms) / order
    return np.sum((counts - exp) ** 2 / exp)


def test_materialized_draw_uniform():
    f = transposition_family(3)
    d = uniform_join_draw(f, range(3), np.random.default_rng(0), n=6000)
    assert _chi_square(d.perms, 6) < 20.5  # chi2(5) 0.999 quantile


def test_composed_draw_uniform():
    f = transposition_family(3)
    d = uniform_join_draw(f, range(3), np.random.default_rng(1), n=6000, cap=2)
    assert d.index is None
    assert _chi_square(d.perms, 6) < 20.5


def test_composed_draw_stays_in_join():
    f = transposition_family(5)
    idx = f.indices(["(1,3)", "(3,5)", "(2,4)"])
    d = uniform_join_draw(f, idx, np.random.default_rng(2), n=2000, cap=2)
    join = f.join(idx)
    perms = {tuple(e.perm) for e in join.elements}
    assert {tuple(p) for p in d.perms} <= perms


def test_normality_violation():
    f = image_family((1, 3, 3), names=("rot90", "vflip"))
    spec = SCMSpec(f, (1,), (0,), lambda rng, n: (rng.standard_normal((n, 9)), None),
                   lambda x, td, m: np.zeros(len(x), dtype=int), 1)
    with pytest.raises(NormalityViolation):
        sample_training(spec, 5, seed=0)
    sample_training(spec, 5, seed=0, check_normality=False)


@pytest.mark.parametrize("I", [["rot", "vflip"], ["color"], ["rot", "color", "vflip"], []])
def test_glyph_normality_certificates(I):
    assert glyph_scm(I).verify_normality() in ("checked", "trivial")


def test_glyph_bitmaps_asymmetric():
    g = glyph_bitmaps()
    assert g.shape == (2, 9, 9)


def test_glyph_color_invariant_task():
    spec, (tr, va), te = make_glyph_dataset(["color"], n_train=400, n_test=200, seed=0)
    assert spec.n_classes == 16
    img = tr.inputs.reshape(-1, 3, 9, 9)
    assert np.all(img[:, 1:] == 0)  # red only
    assert len(np.unique(tr.td.index)) == 8
    tim = te.inputs.reshape(-1, 3, 9, 9)
    assert np.mean(tim[:, 0].sum(axis=(1, 2)) == 0) > 0.3
    assert np.array_equal(reconstruct(tr), tr.inputs)


def test_glyph_rot_flip_invariant_task():
    spec = glyph_scm(["rot", "vflip"])
    tr = sample_training(spec, 300, seed=0)
    img = tr.inputs.reshape(-1, 3, 9, 9)
    masks = glyph_bitmaps()
    for x, cls in zip(img, tr.meta):
        active = (x.sum(axis=0) > 0).astype(float)
        assert np.array_equal(active, masks[cls])  # upright, unflipped


def test_glyph_full_invariance_two_classes():
    spec = glyph_scm(["rot", "color", "vflip"])
    assert spec.n_classes == 2
    tr = sample_training(spec, 50, seed=0)
    assert set(np.unique(tr.labels)) <= {0, 1}


def test_coupled_labels_equal():
    for spec in [sequence_scm(t) for t in (1, 2, 3, 4)] + [glyph_scm(["color"]), glyph_scm(["rot"])]:
        for p in couple_batch(spec, 200, seed=5):
            assert p.label_factual == p.label_counterfactual == p.label


def test_sequence_pair_views():
    p = couple(sequence_scm(1), 11)
    assert np.all(np.diff(p.x_factual) >= 0)
    assert sorted(p.x_counterfactual) == list(p.x_factual)
    assert seq_target(1, p.x_counterfactual) - 10 == p.label


def test_glyph_rot_pair_is_rotation():
    spec = glyph_scm(["rot"])
    p = couple(spec, 4)
    a = p.x_factual.reshape(3, 9, 9)
    b = p.x_counterfactual.reshape(3, 9, 9)
    assert any(np.array_equal(np.rot90(a, k, axes=(1, 2)), b) for k in range(4))


def test_rod_demo():
    r = rod_demo(2)
    assert r.translation_invariant and r.separates_labels
    assert r.witness_k == 2 and r.witness_values == (5.0, 0.0)
    assert rod_demo(4).passed
    with pytest.raises(InvalidParams):
        rod_demo(1)


def test_dataset_roundtrip():
    spec = glyph_scm(["color"])
    ds = sample_training(spec, 30, seed=0)
    back = deserialize_dataset(serialize_dataset(ds), spec.sampler("D").group)
    assert np.array_equal(back.inputs, ds.inputs)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(reconstruct(back), ds.inputs)
    seq = sample_training(sequence_scm(4), 20, seed=0)
    back = deserialize_dataset(serialize_dataset(seq))
    assert np.array_equal(reconstruct(back), seq.inputs)
    with pytest.raises(MalformedInput):
        deserialize_dataset(b"[1, 2")
    with pytest.raises(MalformedInput):
        deserialize_dataset(b'{"version": 9}')


def test_sampling_deterministic():
    spec = sequence_scm(3)
    a = sample_extrapolation(spec, 100, seed=9)
    b = sample_extrapolation(spec, 100, seed=9)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)

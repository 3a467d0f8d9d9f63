import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cginv.errors import (CapExceeded, DimensionMismatch, InvalidParams, NonInvertibleGenerator,
                          NotASubgroup)
from cginv.groups import (FiniteGroup, GroupElement, builtin_group, generate_group, image_family,
                          is_normal_subgroup, join_groups, permutation_matrix, reynolds_operator,
                          transposition_family)


def test_builtin_orders():
    shape = (3, 3, 3)
    assert builtin_group("rot90", shape=shape).order == 4
    assert builtin_group("color_perm", shape=shape).order == 6
    assert builtin_group("vflip", shape=shape).order == 2
    assert builtin_group("h_translate", shape=(1, 4, 4)).order == 4
    assert builtin_group("transposition", i=1, j=3, n=4).order == 2


def test_rot90_matches_numpy_on_images():
    g = builtin_group("rot90", shape=(2, 4, 4))
    x = np.arange(32.0)
    imgs = {e.apply(x).reshape(2, 4, 4).tobytes() for e in g}
    ref = {np.rot90(x.reshape(2, 4, 4), k, axes=(1, 2)).tobytes() for k in range(4)}
    assert imgs == ref


def test_join_rot_color_has_order_24():
    f = image_family((3, 3, 3), names=("rot90", "color_perm"))
    assert f.join([0, 1]).order == 24


def test_join_rot_vflip_is_dihedral():
    f = image_family((1, 5, 5), names=("rot90", "vflip"))
    assert f.join([0, 1]).order == 8


def test_transposition_join_is_symmetric_group():
    f = transposition_family(4)
    assert f.join(range(f.m)).order == 24


def test_empty_generators_give_trivial_group():
    g = generate_group([], dimension=3)
    assert g.order == 1
    assert np.allclose(g.matrices[0], np.eye(3))


def test_cap_exceeded():
    f = transposition_family(6)
    with pytest.raises(CapExceeded):
        f.join(range(f.m), cap=100)


def test_non_invertible_generator():
    with pytest.raises(NonInvertibleGenerator):
        generate_group([np.array([[1.0, 1.0], [1.0, 1.0]])])


def test_dimension_mismatch_in_join():
    a = builtin_group("transposition", i=1, j=2, n=3)
    b = builtin_group("transposition", i=1, j=2, n=4)
    with pytest.raises(DimensionMismatch):
        join_groups([a, b])


def test_invalid_params():
    with pytest.raises(InvalidParams):
        builtin_group("rot90", shape=(1, 3, 4))
    with pytest.raises(InvalidParams):
        builtin_group("transposition", i=3, j=2, n=4)
    with pytest.raises(InvalidParams):
        builtin_group("nope")


def test_non_permutation_group_closure():
    r = np.array([[0.0, -1.0], [1.0, 0.0]])
    g = generate_group([r])
    assert g.order == 4
    assert not g.is_permutation_group


def test_normality():
    f = image_family((3, 3, 3), names=("rot90", "color_perm", "vflip"))
    d4 = f.join([0, 2])
    assert is_normal_subgroup(f.groups[0], d4)
    assert not is_normal_subgroup(f.groups[2], d4)  # one reflection is not normal in D4
    full = f.join([0, 1, 2])
    assert is_normal_subgroup(f.groups[1], full)
    with pytest.raises(NotASubgroup):
        is_normal_subgroup(f.groups[1], d4)


def test_inverse_and_identity():
    g = image_family((1, 3, 3), names=("rot90",)).groups[0]
    e = g.identity_index()
    for i, el in enumerate(g.elements):
        j = g.inverse_index(i)
        assert (el @ g.elements[j]) == g.elements[e]


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([(3, 3, 3), (1, 4, 4), (2, 5, 5)]), st.sampled_from(["rot90", "color_perm", "vflip"]))
def test_reynolds_projection(shape, name):
    if name == "color_perm" and shape[0] == 1:
        shape = (2, *shape[1:])
    g = builtin_group(name, shape=shape)
    r = reynolds_operator(g)
    assert np.max(np.abs(r @ r - r)) < 1e-10
    for t in g.matrices:
        assert np.max(np.abs(t @ r - r)) < 1e-10
        assert np.max(np.abs(r @ t - r)) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(6))), st.permutations(list(range(6))))
def test_composition_matches_matrix_product(p, q):
    a = GroupElement(permutation_matrix(p))
    b = GroupElement(permutation_matrix(q))
    c = a @ b
    assert np.array_equal(c.matrix, a.matrix @ b.matrix)
    x = np.arange(6.0)
    assert np.array_equal(c.apply(x), a.apply(b.apply(x)))


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 6))
def test_closure_is_closed(n):
    f = transposition_family(n)
    g = f.join([0, 1])
    keys = g.key_set()
    for a in g.elements:
        for b in g.elements:
            assert (a @ b).key() in keys

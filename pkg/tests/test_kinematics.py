import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jetlab.kinematics import (
    BoostVector,
    FourVector,
    KinematicsError,
    boost,
    boost_array,
    feature_rows,
    jet_features,
    mass2_array,
    sample_boost,
    sample_boosts,
    wrap_phi,
)


def boost_matrix(n, y):
    """Textbook 4x4 active boost with velocity beta = tanh(y) along n."""
    beta = math.tanh(y) * np.asarray(n, dtype=float)
    b2 = beta @ beta
    gamma = 1.0 / math.sqrt(1.0 - b2)
    L = np.eye(4)
    L[0, 0] = gamma
    L[0, 1:] = gamma * beta
    L[1:, 0] = gamma * beta
    if b2 > 0:
        L[1:, 1:] += (gamma - 1.0) * np.outer(beta, beta) / b2
    return L


def massive(rng, size):
    p = rng.normal(0, 50, (size, 3))
    m = rng.uniform(0, 20, size)
    E = np.sqrt(m**2 + np.sum(p**2, axis=1))
    return np.concatenate([E[:, None], p], axis=1)


def test_identity_boost():
    v = FourVector(5, 0, 0, 5)
    assert boost(v, BoostVector((0.0, 0.0, 1.0), 0.0)) == v


def test_boost_matches_dense_matrix():
    v = FourVector(2, 0, 0, 1)
    out = boost(v, BoostVector((0.0, 0.0, 1.0), 0.5))
    expected = boost_matrix((0, 0, 1), 0.5) @ v.as_array()
    np.testing.assert_allclose(out.as_array(), expected, rtol=1e-14, atol=1e-14)


def test_boost_matches_dense_matrix_random_directions():
    rng = np.random.default_rng(3)
    p4 = massive(rng, 50)
    n, y = sample_boosts(rng, 2.0, 50)
    out = boost_array(p4, n, y)
    expected = np.stack([boost_matrix(n[i], y[i]) @ p4[i] for i in range(50)])
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-9)


def test_mass_invariance_under_boosts():
    rng = np.random.default_rng(0)
    p4 = massive(rng, 10_000)
    n, y = sample_boosts(rng, 3.0, 10_000)
    out = boost_array(p4, n, y)
    m2_in, m2_out = mass2_array(p4), mass2_array(out)
    diff = np.abs(m2_out - m2_in)
    # E^2 - p^2 cancels; its rounding floor scales with E'^2, not with m^2
    assert np.max(diff / out[:, 0] ** 2) < 1e-9
    conditioned = m2_in > 1e-2 * p4[:, 0] ** 2
    assert conditioned.sum() > 1000
    assert np.max(diff[conditioned] / m2_in[conditioned]) < 1e-9


def test_inverse_boost_roundtrip():
    rng = np.random.default_rng(1)
    for _ in range(200):
        v = FourVector.from_array(massive(rng, 1)[0])
        b = sample_boost(rng, 2.0)
        back = boost(boost(v, b), b.negate())
        np.testing.assert_allclose(back.as_array(), v.as_array(), rtol=1e-9, atol=1e-9 * v.E)


@given(
    y1=st.floats(0, 2),
    y2=st.floats(0, 2),
    seed=st.integers(0, 2**16),
)
@settings(max_examples=50, deadline=None)
def test_collinear_boosts_compose_additively(y1, y2, seed):
    rng = np.random.default_rng(seed)
    v = massive(rng, 1)[0]
    n, _ = sample_boosts(rng, 1.0, 1)
    two = boost_array(boost_array(v, n[0], y1), n[0], y2)
    one = boost_array(v, n[0], y1 + y2)
    np.testing.assert_allclose(two, one, rtol=1e-9, atol=1e-9 * abs(one[0]))


def test_boost_vector_invariants():
    with pytest.raises(ValueError):
        BoostVector((1.0, 1.0, 0.0), 0.1)
    with pytest.raises(ValueError):
        BoostVector((1.0, 0.0, 0.0), -0.1)
    assert BoostVector((0.0, 1.0, 0.0), 30.0).beta <= 1.0


def test_sample_boost_determinism():
    a = sample_boost(np.random.default_rng(42), 1.5)
    b = sample_boost(np.random.default_rng(42), 1.5)
    assert a == b


def test_sample_boost_rejects_nonpositive_ymax():
    with pytest.raises(ValueError):
        sample_boost(np.random.default_rng(0), 0.0)


def test_sample_boost_distribution():
    y_max = 1.7
    n, y = sample_boosts(np.random.default_rng(7), y_max, 100_000)
    assert np.all(np.abs(n.mean(axis=0)) < 0.02)
    assert np.max(np.abs(np.linalg.norm(n, axis=1) - 1)) < 1e-12
    ys = np.sort(y) / y_max
    ecdf = np.arange(1, len(ys) + 1) / len(ys)
    assert np.max(np.abs(ecdf - ys)) < 0.01


def test_wrap_phi_range():
    x = np.linspace(-20, 20, 10_001)
    w = wrap_phi(x)
    assert np.all(w > -np.pi) and np.all(w <= np.pi)
    np.testing.assert_allclose(np.cos(w), np.cos(x), atol=1e-12)
    assert wrap_phi(np.pi) == np.pi
    assert wrap_phi(-np.pi) == np.pi


def _ptetaphie(pt, eta, phi, m=0.0):
    px, py, pz = pt * math.cos(phi), pt * math.sin(phi), pt * math.sinh(eta)
    return FourVector(math.sqrt(m * m + px * px + py * py + pz * pz), px, py, pz)


def test_features_self_case():
    jet = _ptetaphie(100.0, 0.3, 1.0, m=10.0)
    row = feature_rows(jet_features([jet], jet))[0]
    assert row.d_eta == 0 and row.d_phi == 0 and row.d_r == 0
    assert row.log_pt_rel == 0 and row.log_e_rel == 0


def test_features_phi_wraparound():
    c = _ptetaphie(10.0, 0.0, 3.0)
    jet = _ptetaphie(50.0, 0.0, -3.0)
    row = feature_rows(jet_features([c], jet))[0]
    assert row.d_phi == pytest.approx(6.0 - 2 * math.pi, abs=1e-12)
    assert row.d_phi == pytest.approx(-0.28318530717958623, abs=1e-12)


def test_features_hand_computed():
    cons = [_ptetaphie(40.0, 0.1, 0.2), _ptetaphie(25.0, -0.2, 0.05), _ptetaphie(5.0, 0.4, -0.3)]
    jet = cons[0] + cons[1] + cons[2]
    got = jet_features(cons, jet)
    jpt = math.hypot(jet.px, jet.py)
    jeta = math.asinh(jet.pz / jpt)
    jphi = math.atan2(jet.py, jet.px)
    for i, c in enumerate(cons):
        pt = math.hypot(c.px, c.py)
        deta = math.asinh(c.pz / pt) - jeta
        dphi = math.atan2(c.py, c.px) - jphi
        dphi = (dphi + math.pi) % (2 * math.pi) - math.pi
        expected = [
            deta,
            dphi,
            math.log(pt / jpt),
            math.log(pt),
            math.log(c.E / jet.E),
            math.log(c.E),
            math.sqrt(deta**2 + dphi**2),
        ]
        np.testing.assert_allclose(got[i], expected, rtol=1e-12, atol=1e-12)


def test_features_reject_nonpositive_pt():
    jet = _ptetaphie(50.0, 0.0, 0.0)
    with pytest.raises(KinematicsError, match="constituent 1"):
        jet_features([_ptetaphie(10.0, 0, 0), FourVector(5.0, 0.0, 0.0, 5.0)], jet)
    with pytest.raises(KinematicsError, match="jet"):
        jet_features([_ptetaphie(10.0, 0, 0)], FourVector(5.0, 0.0, 0.0, 5.0))


def test_features_permutation_equivariant():
    rng = np.random.default_rng(5)
    cons = [_ptetaphie(rng.uniform(1, 50), rng.normal(0, 0.3), rng.normal(0, 0.3)) for _ in range(8)]
    jet = cons[0]
    for c in cons[1:]:
        jet = jet + c
    perm = rng.permutation(8)
    np.testing.assert_array_equal(jet_features([cons[i] for i in perm], jet), jet_features(cons, jet)[perm])


def test_azimuthal_rotation_invariance():
    rng = np.random.default_rng(6)
    cons = [_ptetaphie(rng.uniform(1, 50), rng.normal(0, 0.3), 3.0 + rng.normal(0, 0.2)) for _ in range(6)]
    rot = [_ptetaphie(math.hypot(c.px, c.py), c.eta, c.phi + 1.3) for c in cons]

    def total(cs):
        j = cs[0]
        for c in cs[1:]:
            j = j + c
        return j

    a = jet_features(cons, total(cons))
    b = jet_features(rot, total(rot))
    np.testing.assert_allclose(a[:, 0], b[:, 0], atol=1e-9)
    np.testing.assert_allclose(a[:, 6], b[:, 6], atol=1e-9)
    np.testing.assert_allclose(wrap_phi(a[:, 1] - b[:, 1]), 0.0, atol=1e-9)


def test_d_r_matches_components():
    rng = np.random.default_rng(8)
    cons = [_ptetaphie(rng.uniform(1, 50), rng.normal(0, 1), rng.uniform(-3, 3)) for _ in range(20)]
    f = jet_features(cons, cons[0])
    np.testing.assert_allclose(f[:, 6], np.sqrt(f[:, 0] ** 2 + f[:, 1] ** 2), atol=1e-9)
    assert np.all(f[:, 1] > -np.pi) and np.all(f[:, 1] <= np.pi)

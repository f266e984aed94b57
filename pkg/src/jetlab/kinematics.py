"""Four-vector algebra, Lorentz boosts and per-constituent jet features.

Four-vectors are ordered (E, px, py, pz) in GeV.  Scalar helpers operate on
:class:`FourVector`; the ``*_array`` variants broadcast over leading axes of
``(..., 4)`` arrays and are what the training loop uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

FEATURE_NAMES = ("d_eta", "d_phi", "log_pt_rel", "log_pt", "log_e_rel", "log_e", "d_r")
N_FEATURES = len(FEATURE_NAMES)


class KinematicsError(ValueError):
    """Raised when a four-vector falls outside the feature domain."""


@dataclass(frozen=True)
class FourVector:
    E: float
    px: float
    py: float
    pz: float

    @classmethod
    def from_array(cls, a) -> FourVector:
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def as_array(self) -> np.ndarray:
        return np.array([self.E, self.px, self.py, self.pz], dtype=np.float64)

    @property
    def pt(self) -> float:
        return math.hypot(self.px, self.py)

    @property
    def p(self) -> float:
        return math.sqrt(self.px**2 + self.py**2 + self.pz**2)

    @property
    def eta(self) -> float:
        return math.asinh(self.pz / self.pt)

    @property
    def phi(self) -> float:
        return math.atan2(self.py, self.px)

    @property
    def mass2(self) -> float:
        return self.E**2 - self.p**2

    def __add__(self, other: FourVector) -> FourVector:
        return FourVector(self.E + other.E, self.px + other.px, self.py + other.py, self.pz + other.pz)


@dataclass(frozen=True)
class BoostVector:
    """Pure boost along unit direction ``n`` with rapidity ``y >= 0``."""

    n: tuple[float, float, float]
    y: float

    def __post_init__(self):
        norm = math.sqrt(sum(c * c for c in self.n))
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"boost direction must be a unit vector, |n|={norm!r}")
        if not self.y >= 0.0 or not math.isfinite(self.y):
            raise ValueError(f"rapidity must be finite and >= 0, got {self.y!r}")

    @property
    def beta(self) -> float:
        return math.tanh(self.y)

    def negate(self) -> BoostVector:
        return BoostVector((-self.n[0], -self.n[1], -self.n[2]), self.y)


class FeatureRow(NamedTuple):
    d_eta: float
    d_phi: float
    log_pt_rel: float
    log_pt: float
    log_e_rel: float
    log_e: float
    d_r: float


def wrap_phi(dphi):
    """Reduce angles into (-pi, pi]."""
    return dphi + 2.0 * np.pi * np.floor((np.pi - dphi) / (2.0 * np.pi))


def boost_array(p4, n, y):
    """Boost ``(..., 4)`` momenta along ``n`` (``(..., 3)``) by rapidity ``y``.

    ``n`` and ``y`` broadcast against the leading axes of ``p4``.
    """
    p4 = np.asarray(p4, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ch = np.cosh(y)[..., None]
    sh = np.sinh(y)[..., None]
    E = p4[..., :1]
    p = p4[..., 1:]
    p_par = np.sum(p * n, axis=-1, keepdims=True)
    E_new = ch * E + sh * p_par
    p_new = p + ((ch - 1.0) * p_par + sh * E) * n
    return np.concatenate([E_new, p_new], axis=-1)


def boost(v: FourVector, b: BoostVector) -> FourVector:
    return FourVector.from_array(boost_array(v.as_array(), np.array(b.n), b.y))


def sample_boost(rng: np.random.Generator, y_max: float) -> BoostVector:
    """Direction uniform on the sphere, rapidity uniform on ``[0, y_max]``."""
    n, y = sample_boosts(rng, y_max, 1)
    return BoostVector(tuple(float(c) for c in n[0]), float(y[0]))


def sample_boosts(rng: np.random.Generator, y_max: float, size: int) -> tuple[np.ndarray, np.ndarray]:
    if not y_max > 0:
        raise ValueError(f"y_max must be positive, got {y_max!r}")
    g = rng.standard_normal((size, 3))
    n = g / np.linalg.norm(g, axis=1, keepdims=True)
    # renormalise once more so |n| - 1 sits at the rounding floor
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    y = rng.uniform(0.0, y_max, size)
    return n, y


def pt_eta_phi(p4, pt_floor: float = 0.0):
    p4 = np.asarray(p4, dtype=np.float64)
    pt = np.hypot(p4[..., 1], p4[..., 2])
    if pt_floor > 0:
        pt = np.maximum(pt, pt_floor)
    with np.errstate(divide="ignore", invalid="ignore"):
        eta = np.arcsinh(p4[..., 3] / pt)
    phi = np.arctan2(p4[..., 2], p4[..., 1])
    return pt, eta, phi


def mass2_array(p4):
    p4 = np.asarray(p4, dtype=np.float64)
    return p4[..., 0] ** 2 - np.sum(p4[..., 1:] ** 2, axis=-1)


def features_array(p4, mask, jet_p4=None, pt_floor: float = 0.0):
    """Seven-feature matrix for padded constituents.

    ``p4`` is ``(B, N, 4)``, ``mask`` ``(B, N)``.  The jet axis defaults to the
    sum of unmasked constituents.  Masked slots come back as zeros.  With
    ``pt_floor > 0`` constituent pT and E are clamped from below instead of
    being rejected; returns ``(features, n_clamped)``.
    """
    p4 = np.asarray(p4, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if jet_p4 is None:
        jet_p4 = np.sum(p4 * mask[..., None], axis=-2)
    jet_p4 = np.asarray(jet_p4, dtype=np.float64)
    pt, eta, phi = pt_eta_phi(p4)
    E = p4[..., 0]
    jpt, jeta, jphi = pt_eta_phi(jet_p4)
    jE = jet_p4[..., 0]
    n_clamped = 0
    if pt_floor > 0:
        low = mask & ((pt < pt_floor) | (E < pt_floor))
        n_clamped = int(low.sum())
        pt = np.where(mask, np.maximum(pt, pt_floor), 1.0)
        E = np.where(mask, np.maximum(E, pt_floor), 1.0)
        jpt = np.maximum(jpt, pt_floor)
        jE = np.maximum(jE, pt_floor)
    else:
        pt = np.where(mask, pt, 1.0)
        E = np.where(mask, E, 1.0)
    eta = np.arcsinh(np.where(mask, p4[..., 3], 0.0) / pt)
    jeta = np.arcsinh(jet_p4[..., 3] / jpt)
    d_eta = eta - jeta[..., None]
    d_phi = wrap_phi(phi - jphi[..., None])
    log_pt = np.log(pt)
    log_e = np.log(E)
    out = np.stack(
        [
            d_eta,
            d_phi,
            log_pt - np.log(jpt)[..., None],
            log_pt,
            log_e - np.log(jE)[..., None],
            log_e,
            np.sqrt(d_eta**2 + d_phi**2),
        ],
        axis=-1,
    )
    out = np.where(mask[..., None], out, 0.0)
    return out, n_clamped


def jet_features(constituents: Sequence[FourVector] | np.ndarray, jet: FourVector | np.ndarray) -> np.ndarray:
    """Feature rows (columns in ``FEATURE_NAMES`` order) against the jet axis.

    Raises :class:`KinematicsError` naming the first constituent (or the jet)
    with non-positive pT or E.
    """
    c = np.array([x.as_array() if isinstance(x, FourVector) else x for x in constituents], dtype=np.float64)
    c = c.reshape(-1, 4)
    j = jet.as_array() if isinstance(jet, FourVector) else np.asarray(jet, dtype=np.float64)
    jpt = math.hypot(j[1], j[2])
    if not (jpt > 0 and j[0] > 0):
        raise KinematicsError(f"jet has non-positive pT or E (pT={jpt!r}, E={j[0]!r})")
    pt = np.hypot(c[:, 1], c[:, 2])
    bad = np.flatnonzero(~((pt > 0) & (c[:, 0] > 0)))
    if bad.size:
        i = int(bad[0])
        raise KinematicsError(f"constituent {i} has non-positive pT or E (pT={pt[i]!r}, E={c[i, 0]!r})")
    feats, _ = features_array(c[None], np.ones((1, len(c)), dtype=bool), j[None])
    return feats[0]


def feature_rows(features: np.ndarray) -> list[FeatureRow]:
    return [FeatureRow(*map(float, row)) for row in features]

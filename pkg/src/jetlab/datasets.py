"""Toy jet generation, jetlines-v1 file I/O, splitting and pT smearing."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .kinematics import boost_array, features_array, mass2_array

log = logging.getLogger(__name__)

N_MAX = 32
SCHEMA_HEADER = "#schema=jetlines-v1"
K_FLOOR = 0.01


class DataError(ValueError):
    """Malformed or unusable jet data."""


@dataclass(frozen=True)
class Jet:
    """pT-sorted constituents ``(n, 4)`` as (E, px, py, pz) plus a class label."""

    constituents: np.ndarray
    label: int
    class_name: str = ""

    def __post_init__(self):
        c = np.array(self.constituents, dtype=np.float64, copy=True).reshape(-1, 4)
        c.setflags(write=False)
        object.__setattr__(self, "constituents", c)

    @property
    def p4(self) -> np.ndarray:
        return self.constituents.sum(axis=0)

    @property
    def pt(self) -> np.ndarray:
        return np.hypot(self.constituents[:, 1], self.constituents[:, 2])

    @property
    def mass(self) -> float:
        return float(np.sqrt(max(mass2_array(self.p4), 0.0)))

    def __eq__(self, other):
        if not isinstance(other, Jet):
            return NotImplemented
        return (
            self.label == other.label
            and self.class_name == other.class_name
            and np.array_equal(self.constituents, other.constituents)
        )

    __hash__ = None


@dataclass(frozen=True)
class DatasetSplit:
    train: list[Jet]
    val: list[Jet]
    test: list[Jet]
    seed: int = 0
    provenance: str = ""
    warnings: int = 0

    def splits(self) -> dict[str, list[Jet]]:
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass(frozen=True)
class ToyClassSpec:
    """One toy jet class.

    ``n_prongs == 1`` gives a wide single-parton shower whose angular spread
    is ``radiation_softness``; ``n_prongs >= 2`` decays a resonance of mass
    ~ N(mass_peak, width) into that many prongs, each showering with spread
    ``radiation_softness``.  ``z_alpha`` is the Dirichlet concentration of
    momentum sharing inside a prong (small = few hard constituents).
    """

    n_prongs: int
    mass_peak: float
    width: float
    radiation_softness: float
    multiplicity: int = 24
    z_alpha: float = 0.6
    name: str = ""

    def __post_init__(self):
        if self.n_prongs < 1:
            raise ValueError("n_prongs must be >= 1")
        if self.mass_peak < 0:
            raise ValueError("mass_peak must be >= 0")
        if not self.width > 0:
            raise ValueError(f"width must be > 0, got {self.width!r}")
        if not self.radiation_softness > 0:
            raise ValueError("radiation_softness must be > 0")
        if self.multiplicity < self.n_prongs:
            raise ValueError("multiplicity must be at least n_prongs")


# Desk-scale surrogates for the hls4ml classes.
GLUON = ToyClassSpec(n_prongs=1, mass_peak=0.0, width=1.0, radiation_softness=0.10, multiplicity=22, z_alpha=0.5, name="gluon")
WBOSON = ToyClassSpec(n_prongs=2, mass_peak=80.4, width=5.0, radiation_softness=0.05, multiplicity=20, z_alpha=0.6, name="wboson")
ZBOSON = ToyClassSpec(n_prongs=2, mass_peak=91.2, width=5.0, radiation_softness=0.05, multiplicity=20, z_alpha=0.6, name="zboson")
TOP = ToyClassSpec(n_prongs=3, mass_peak=173.0, width=8.0, radiation_softness=0.05, multiplicity=26, z_alpha=0.6, name="top")

PT_RANGE = (400.0, 700.0)
ETA_SIGMA = 0.5


def _rambo(rng: np.random.Generator, n: int, mass: float) -> np.ndarray:
    """Uniform massless n-body phase space in the rest frame of ``mass``."""
    c = 2.0 * rng.random(n) - 1.0
    phi = 2.0 * np.pi * rng.random(n)
    q0 = -np.log(rng.random(n) * rng.random(n))
    s = np.sqrt(1.0 - c * c)
    q = np.stack([q0, q0 * s * np.cos(phi), q0 * s * np.sin(phi), q0 * c], axis=1)
    Q = q.sum(axis=0)
    M = np.sqrt(Q[0] ** 2 - Q[1:] @ Q[1:])
    b = -Q[1:] / M
    x = mass / M
    gamma = Q[0] / M
    a = 1.0 / (1.0 + gamma)
    bq = q[:, 1:] @ b
    out = np.empty_like(q)
    out[:, 0] = x * (gamma * q[:, 0] + bq)
    out[:, 1:] = x * (q[:, 1:] + b[None, :] * (q[:, :1] + a * bq[:, None]))
    return out


def _shower(rng: np.random.Generator, parton: np.ndarray, k: int, spread: float, alpha: float) -> np.ndarray:
    """Split a massless parton into ``k`` massless constituents around its axis.

    Softer constituents sit at wider angles.  The transverse momentum sum is
    rescaled to the parton's.
    """
    pt = np.hypot(parton[1], parton[2])
    eta = np.arcsinh(parton[3] / pt)
    phi = np.arctan2(parton[2], parton[1])
    z = rng.dirichlet(np.full(k, alpha))
    z = np.maximum(z, 1e-4)
    z /= z.sum()
    width = spread * np.clip(np.sqrt(1.0 / (k * z)), 0.25, 4.0)
    ceta = eta + width * rng.standard_normal(k)
    cphi = phi + width * rng.standard_normal(k)
    cpt = pt * z
    c = np.empty((k, 4))
    c[:, 1] = cpt * np.cos(cphi)
    c[:, 2] = cpt * np.sin(cphi)
    c[:, 3] = cpt * np.sinh(ceta)
    c[:, 0] = cpt * np.cosh(ceta)
    return c


def _toy_jet(rng: np.random.Generator, spec: ToyClassSpec) -> np.ndarray:
    pt = rng.uniform(*PT_RANGE)
    eta = ETA_SIGMA * rng.standard_normal()
    phi = rng.uniform(-np.pi, np.pi)
    mult = max(spec.n_prongs, int(rng.poisson(spec.multiplicity)))
    if spec.n_prongs == 1:
        parton = np.array([pt * np.cosh(eta), pt * np.cos(phi), pt * np.sin(phi), pt * np.sinh(eta)])
        parts = [_shower(rng, parton, mult, spec.radiation_softness, spec.z_alpha)]
    else:
        m = spec.mass_peak + spec.width * rng.standard_normal()
        m = max(m, 1.0)
        daughters = _rambo(rng, spec.n_prongs, m)
        # lab frame: resonance with the drawn pT, eta, phi
        p = pt * np.cosh(eta)
        E = np.hypot(p, m)
        direction = np.array([np.cos(phi) / np.cosh(eta), np.sin(phi) / np.cosh(eta), np.tanh(eta)])
        y = np.arctanh(p / E)
        lab = boost_array(daughters, direction, y)
        shares = rng.multinomial(mult - spec.n_prongs, lab[:, 0] / lab[:, 0].sum()) + 1
        parts = [_shower(rng, d, int(k), spec.radiation_softness, spec.z_alpha) for d, k in zip(lab, shares)]
    c = np.concatenate(parts, axis=0)
    return sort_by_pt(c)[:N_MAX]


def sort_by_pt(c: np.ndarray) -> np.ndarray:
    pt = np.hypot(c[:, 1], c[:, 2])
    return c[np.argsort(-pt, kind="stable")]


def _is_sorted(c: np.ndarray) -> bool:
    pt = np.hypot(c[:, 1], c[:, 2])
    return bool(np.all(pt[:-1] >= pt[1:]))


def _split(jets: list[Jet], rng: np.random.Generator) -> tuple[list[Jet], list[Jet], list[Jet]]:
    """Class-stratified 60/20/20 partition, shuffled within each split."""
    by_label: dict[int, list[Jet]] = {}
    for j in jets:
        by_label.setdefault(j.label, []).append(j)
    out: tuple[list[Jet], list[Jet], list[Jet]] = ([], [], [])
    for label in sorted(by_label):
        group = by_label[label]
        n = len(group)
        n_train = (6 * n) // 10
        n_val = (n - n_train) // 2
        out[0].extend(group[:n_train])
        out[1].extend(group[n_train : n_train + n_val])
        out[2].extend(group[n_train + n_val :])
    return tuple([part[i] for i in rng.permutation(len(part))] for part in out)


def generate_toy(spec_a: ToyClassSpec, spec_b: ToyClassSpec, n_per_class: int, seed: int) -> DatasetSplit:
    """Balanced two-class toy dataset (label 0 = ``spec_a``, 1 = ``spec_b``)."""
    if n_per_class < 10:
        raise ValueError(f"n_per_class must be >= 10, got {n_per_class}")
    rng = np.random.default_rng(seed)
    jets = []
    for label, spec in enumerate((spec_a, spec_b)):
        name = spec.name or f"class{label}"
        jets.extend(Jet(_toy_jet(rng, spec), label, name) for _ in range(n_per_class))
    train, val, test = _split(jets, rng)
    cfg = json.dumps({"a": asdict(spec_a), "b": asdict(spec_b), "n": n_per_class, "seed": seed}, sort_keys=True)
    provenance = "toy:" + hashlib.sha256(cfg.encode()).hexdigest()[:16]
    return DatasetSplit(train, val, test, seed=seed, provenance=provenance)


def smear_pt(jet: Jet, sigma: float, rng: np.random.Generator) -> Jet:
    """Scale each constituent's three-momentum by ``max(1 + sigma*eps, K_FLOOR)``.

    Energy is recomputed to keep each constituent's mass; direction is kept.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    c = jet.constituents
    eps = rng.standard_normal(len(c))
    if sigma == 0:
        return jet
    k = np.maximum(1.0 + sigma * eps, K_FLOOR)
    m2 = mass2_array(c)
    p = c[:, 1:] * k[:, None]
    E = np.sqrt(np.maximum(m2 + np.sum(p * p, axis=1), 0.0))
    out = np.concatenate([E[:, None], p], axis=1)
    return Jet(sort_by_pt(out), jet.label, jet.class_name)


# ---------------------------------------------------------------- file format


def save_jets(path: str | Path, jets: list[Jet]) -> None:
    with open(path, "w") as fh:
        fh.write(SCHEMA_HEADER + "\n")
        for j in jets:
            rec = {"label": int(j.label), "class": j.class_name, "constituents": j.constituents.tolist()}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_jets(path: str | Path) -> tuple[list[Jet], int]:
    """Parse one jetlines-v1 file.  Returns ``(jets, n_warnings)``.

    Warnings count re-sorted jets and constituents dropped for pT <= 0.
    """
    jets: list[Jet] = []
    warnings = 0
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        return jets, 0
    if lines[0].strip() != SCHEMA_HEADER:
        raise DataError(f"{path}:1: missing '{SCHEMA_HEADER}' header")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            label = int(rec["label"])
            name = str(rec.get("class", ""))
            c = np.asarray(rec["constituents"], dtype=np.float64)
            if c.size == 0:
                raise ValueError("no constituents")
            if c.ndim != 2 or c.shape[1] != 4:
                raise ValueError(f"constituents must be [E,px,py,pz] rows, got shape {c.shape}")
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: malformed record ({exc})") from exc
        pt = np.hypot(c[:, 1], c[:, 2])
        keep = (pt > 0) & (c[:, 0] > 0)
        if not keep.all():
            dropped = int((~keep).sum())
            log.warning("%s:%d: dropped %d constituent(s) with pT <= 0", path, lineno, dropped)
            warnings += dropped
            c = c[keep]
            if len(c) == 0:
                continue
        if not _is_sorted(c):
            warnings += 1
            c = sort_by_pt(c)
        if len(c) > N_MAX:
            c = c[:N_MAX]
        jets.append(Jet(c, label, name))
    return jets, warnings


SPLIT_NAMES = ("train", "val", "test")


def save_split(directory: str | Path, data: DatasetSplit, prefix: str = "") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, jets in data.splits().items():
        p = directory / f"{prefix}{name}.jsonl"
        save_jets(p, jets)
        paths.append(p)
    return paths


def load_jets(path: str | Path, prefix: str = "") -> DatasetSplit:
    """Load a dataset from a jetlines file or a directory of split files.

    A single file becomes the test split (the usual shape of converted
    evaluation sets); a directory must hold ``{prefix}{train,val,test}.jsonl``.
    """
    path = Path(path)
    if path.is_dir():
        parts = {}
        warnings = 0
        digest = hashlib.sha256()
        for name in SPLIT_NAMES:
            p = path / f"{prefix}{name}.jsonl"
            if not p.exists():
                raise DataError(f"missing split file {p}")
            parts[name], w = read_jets(p)
            warnings += w
            digest.update(p.read_bytes())
        return DatasetSplit(parts["train"], parts["val"], parts["test"], provenance="jetlines:" + digest.hexdigest()[:16], warnings=warnings)
    if not path.exists():
        raise DataError(f"no such jet file: {path}")
    jets, warnings = read_jets(path)
    provenance = "jetlines:" + hashlib.sha256(path.read_bytes()).hexdigest()[:16]
    return DatasetSplit([], [], jets, provenance=provenance, warnings=warnings)


# ------------------------------------------------------------------ packing


@dataclass
class PackedJets:
    """Zero-padded ``(J, n_max, 4)`` momenta with mask and labels."""

    p4: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    _features: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.labels)

    @property
    def features(self) -> np.ndarray:
        if self._features is None:
            self._features, _ = features_array(self.p4, self.mask)
        return self._features

    def take(self, idx) -> PackedJets:
        f = None if self._features is None else self._features[idx]
        return PackedJets(self.p4[idx], self.mask[idx], self.labels[idx], f)


def pack(jets: list[Jet], n_max: int = N_MAX) -> PackedJets:
    J = len(jets)
    p4 = np.zeros((J, n_max, 4))
    mask = np.zeros((J, n_max), dtype=bool)
    labels = np.zeros(J)
    for i, j in enumerate(jets):
        c = j.constituents[:n_max]
        p4[i, : len(c)] = c
        mask[i, : len(c)] = True
        labels[i] = j.label
    return PackedJets(p4, mask, labels)

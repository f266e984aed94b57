"""Command-line entry point: config-driven experiment runs and report emission.

Every command resolves an :class:`ExperimentConfig` (defaults, then an
optional JSON file, then ``--set key=value`` overrides), freezes it into
``<out>/<tag>/config.json`` together with its content hash, and stamps that
hash on every artifact it writes.

Layout of a run directory::

    config.json                      resolved config + hash
    data/{train,val,test}.jsonl      in-distribution toy splits
    data/near_*.jsonl, data/far_*.jsonl
    ensemble.json                    champions, summaries, failures
    <variant>/<seed>/checkpoint.bin  (+ checkpoint.json, runrecord.json, timing.json)
    <variant>/curvature.json         eigenpair, trace, slice, ratio tables
    <variant>/slice.csv, goldstone.csv, nu1.bin
    curvature_ratios.json
    metrics.csv                      variant, seed, dataset, sigma, accuracy, auc
    <variant>/distill.csv, distill_comparison.json
    report.json, report.txt

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
5 partial report.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import curvature as cv
from .datasets import GLUON, TOP, WBOSON, ZBOSON, DataError, DatasetSplit, ToyClassSpec, generate_toy, load_jets, pack, save_split
from .diffengine import NonFiniteError, make_hvp
from .distill import DistillRecord, compare_distillation, distill
from .evalrobust import DEFAULT_SIGMAS, ood_eval, robustness_sweep
from .kinematics import BoostVector, sample_boosts
from .model import DESK_STUDENT, DESK_TEACHER, Batch, Checkpoint, ModelConfig, load_checkpoint, save_checkpoint
from .objectives import LossConfig, boosted_view, total_loss_with_view
from .trainer import TrainConfig, TrainingError, canonical_json, content_hash, run_ensemble, stream

log = logging.getLogger("jetlab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4, 5

VARIANTS = ("unconstrained", "constrained")
TOY_CLASSES = {s.name: s for s in (GLUON, WBOSON, ZBOSON, TOP)}
METRIC_FIELDS = ["config_hash", "variant", "seed", "dataset", "sigma", "accuracy", "auc", "auc_std"]
DISTILL_FIELDS = ["config_hash", "epoch", "train_mse", "heldout_mse", "teacher", "seed"]

# stream ids for the diagnostic draws, disjoint from the trainer's
_DIAG_BATCH, _DIAG_BOOSTS, _GOLDSTONE_BOOST = 21, 22, 23


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class DataSpec:
    path: str | None = None
    class_a: str = "gluon"
    class_b: str = "wboson"
    near: str = "zboson"
    far: str = "top"
    n_per_class: int = 6000
    ood_n_per_class: int = 1000
    seed: int = 1234


@dataclass(frozen=True)
class DiagnosticSpec:
    batch_size: int = 1024
    seed: int = 99
    lanczos_max_iter: int = 40
    lanczos_tol: float = 1e-3
    trace_probes: int = 30
    slice_points: int = 11
    slice_fraction: float = 0.1
    goldstone_rapidity: float | None = None
    sigmas: tuple[float, ...] = DEFAULT_SIGMAS
    robustness_seed: int = 0
    robustness_repeats: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = DESK_TEACHER
    student: ModelConfig = DESK_STUDENT
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig(epochs=40)
    distill_train: TrainConfig = TrainConfig(epochs=8, seeds=(0,))
    data: DataSpec = DataSpec()
    diagnostics: DiagnosticSpec = DiagnosticSpec()
    tag: str = "toy"

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("train", "distill_train"):
            d[key]["seeds"] = list(d[key]["seeds"])
        for key in ("model", "student"):
            d[key]["head_dims"] = list(d[key]["head_dims"])
        d["diagnostics"]["sigmas"] = list(d["diagnostics"]["sigmas"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {
            "model": ModelConfig,
            "student": ModelConfig,
            "loss": LossConfig,
            "train": TrainConfig,
            "distill_train": TrainConfig,
            "data": DataSpec,
            "diagnostics": DiagnosticSpec,
        }
        unknown = set(d) - set(known) - {"tag"}
        if unknown:
            raise CliError(f"unknown config section(s): {sorted(unknown)}", EXIT_CONFIG)
        kwargs = {}
        for key, typ in known.items():
            if key in d:
                try:
                    kwargs[key] = typ(**d[key])
                except (TypeError, ValueError) as exc:
                    raise CliError(f"invalid [{key}] config: {exc}", EXIT_CONFIG) from exc
        if "diagnostics" in kwargs:
            diag = kwargs["diagnostics"]
            kwargs["diagnostics"] = DiagnosticSpec(**{**asdict(diag), "sigmas": tuple(float(s) for s in diag.sigmas)})
        if "tag" in d:
            kwargs["tag"] = str(d["tag"])
        return cls(**kwargs)

    @property
    def hash(self) -> str:
        return content_hash(self.to_dict())

    def variant_configs(self, variants=VARIANTS) -> dict:
        out = {}
        for v in variants:
            lc = self.loss if v == "constrained" else LossConfig(lambda_seal=0.0, boost_y_max=self.loss.boost_y_max)
            out[v] = (self.model, lc, self.train)
        return out


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON when possible."""
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}", EXIT_CONFIG)
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise CliError(f"--set {key}: no config section {p!r}", EXIT_CONFIG)
            node = node[p]
        if parts[-1] not in node:
            raise CliError(f"--set {key}: unknown key {parts[-1]!r}", EXIT_CONFIG)
        node[parts[-1]] = _parse_value(raw)
    return doc


def resolve_config(path: str | None = None, overrides=()) -> ExperimentConfig:
    doc = ExperimentConfig().to_dict()
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise CliError(f"config file not found: {path}", EXIT_CONFIG) from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON ({exc})", EXIT_CONFIG) from exc
        if not isinstance(user, dict):
            raise CliError(f"{path}: top level must be an object", EXIT_CONFIG)
        for key, value in user.items():
            if isinstance(value, dict) and isinstance(doc.get(key), dict):
                unknown = set(value) - set(doc[key])
                if unknown:
                    raise CliError(f"{path}: unknown key(s) in [{key}]: {sorted(unknown)}", EXIT_CONFIG)
                doc[key].update(value)
            else:
                doc[key] = value
    return ExperimentConfig.from_dict(apply_overrides(doc, overrides))


# ------------------------------------------------------------------ run directory


class RunDir:
    def __init__(self, root: Path, config: ExperimentConfig):
        self.root = Path(root)
        self.config = config
        self.hash = config.hash

    @classmethod
    def open(cls, out: str | None, config: ExperimentConfig) -> RunDir:
        base = Path(out or os.environ.get("JETLAB_OUT", "runs"))
        rd = cls(base / config.tag, config)
        rd.root.mkdir(parents=True, exist_ok=True)
        frozen = rd.root / "config.json"
        if frozen.exists():
            prior = json.loads(frozen.read_text())
            if prior.get("config_hash") != rd.hash:
                log.info("resolved config differs from %s (was %s, now %s)", frozen, prior.get("config_hash"), rd.hash)
        frozen.write_text(canonical_json({"config_hash": rd.hash, "config": config.to_dict()}))
        return rd

    def path(self, *parts) -> Path:
        return self.root.joinpath(*map(str, parts))

    def guard(self, target: Path, force: bool) -> None:
        """Refuse to overwrite ``target`` unless ``force``; report whether the hashes match."""
        if not target.exists() or force:
            return
        prior = _artifact_hash(target)
        same = "matches" if prior == self.hash else f"differs (existing {prior})"
        raise CliError(f"{target} exists; config hash {same}; pass --force to overwrite", EXIT_CONFIG)

    def write_json(self, target: Path, obj: dict) -> None:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(canonical_json({"config_hash": self.hash, **obj}))

    def data(self, which: str = "") -> DatasetSplit:
        spec = self.config.data
        if spec.path and not which:
            return load_jets(spec.path)
        d = self.path("data")
        prefix = f"{which}_" if which else ""
        if not (d / f"{prefix}train.jsonl").exists():
            raise CliError(f"no dataset at {d} (prefix {prefix!r}); run `jetlab gen-data` first", EXIT_DATA)
        return load_jets(d, prefix)

    def ensemble(self) -> dict:
        p = self.path("ensemble.json")
        if not p.exists():
            raise CliError(f"{p} missing; run `jetlab train` first", EXIT_DATA)
        return json.loads(p.read_text())

    def checkpoint(self, variant: str, seed: int) -> Checkpoint:
        p = self.path(variant, seed, "checkpoint.bin")
        if not p.exists():
            raise CliError(f"checkpoint {p} missing; run `jetlab train` first", EXIT_DATA)
        return load_checkpoint(p)

    def champions(self, variants=VARIANTS) -> dict[str, int]:
        ens = self.ensemble()
        out = {}
        for v in variants:
            entry = ens.get("variants", {}).get(v)
            if entry is None:
                continue
            if entry.get("champion") is None:
                raise CliError(f"ensemble.json has no champion for {v!r}; rerun `jetlab train` (run_ensemble output)", EXIT_DATA)
            out[v] = int(entry["champion"])
        if not out:
            raise CliError("ensemble.json lists no champions; rerun `jetlab train`", EXIT_DATA)
        return out

    def all_runs(self) -> list[tuple[str, int]]:
        ens = self.ensemble()
        return [(v, int(s)) for v in VARIANTS for s in ens.get("variants", {}).get(v, {}).get("seeds", [])]


def _artifact_hash(path: Path) -> str | None:
    try:
        if path.suffix == ".json":
            return json.loads(path.read_text()).get("config_hash")
        if path.suffix == ".csv":
            rows = list(csv.DictReader(io.StringIO(path.read_text())))
            return rows[0].get("config_hash") if rows else None
    except (OSError, ValueError):
        return None
    return None


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path: Path, fields: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in fields})
    path.write_text(buf.getvalue())


def read_csv(path: Path) -> list[dict]:
    return list(csv.DictReader(io.StringIO(path.read_text())))


def _upsert_metrics(rd: RunDir, rows: list[dict], datasets: set[str]) -> Path:
    """Replace the rows of ``datasets`` in metrics.csv and keep a canonical order."""
    p = rd.path("metrics.csv")
    kept = [r for r in read_csv(p) if r["dataset"] not in datasets] if p.exists() else []
    merged = kept + [{k: _fmt(v) for k, v in r.items()} for r in rows]
    merged.sort(key=lambda r: (r["variant"], int(r["seed"]), r["dataset"], float(r["sigma"])))
    write_csv(p, METRIC_FIELDS, merged)
    return p


def _timed(rd: RunDir, stage: str, t0: float) -> None:
    # wall-clock numbers live outside every hashed artifact
    p = rd.path("timings.json")
    d = json.loads(p.read_text()) if p.exists() else {}
    d[stage] = time.perf_counter() - t0
    p.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ commands


def _toy(name: str) -> ToyClassSpec:
    try:
        return TOY_CLASSES[name]
    except KeyError:
        raise CliError(f"unknown toy class {name!r}; choose from {sorted(TOY_CLASSES)}", EXIT_CONFIG) from None


def cmd_gen_data(rd: RunDir, force: bool = False) -> list[Path]:
    spec = rd.config.data
    if spec.path:
        raise CliError("data.path is set; gen-data only writes toy data", EXIT_CONFIG)
    d = rd.path("data")
    rd.guard(d / "meta.json", force)
    t0 = time.perf_counter()
    paths = []
    sets = {
        "": (spec.class_a, spec.class_b, spec.n_per_class, spec.seed),
        "near_": (spec.class_a, spec.near, spec.ood_n_per_class, spec.seed + 1),
        "far_": (spec.class_a, spec.far, spec.ood_n_per_class, spec.seed + 2),
    }
    meta = {}
    for prefix, (a, b, n, seed) in sets.items():
        split = generate_toy(_toy(a), _toy(b), n, seed)
        paths += save_split(d, split, prefix)
        meta[prefix.rstrip("_") or "id"] = {"classes": [a, b], "n_per_class": n, "seed": seed, "provenance": split.provenance}
    rd.write_json(d / "meta.json", {"datasets": meta})
    _timed(rd, "gen-data", t0)
    return paths


def cmd_train(rd: RunDir, variants=VARIANTS, seeds=None, jobs: int = 1, force: bool = False) -> dict:
    data = rd.data()
    if not data.train or not data.val:
        raise CliError("training needs train and val splits", EXIT_DATA)
    seeds = tuple(seeds) if seeds else rd.config.train.seeds
    for v in variants:
        for s in seeds:
            rd.guard(rd.path(v, s, "runrecord.json"), force)
    t0 = time.perf_counter()
    results = run_ensemble(rd.config.variant_configs(variants), data, seeds=seeds, jobs=jobs)
    ens_path = rd.path("ensemble.json")
    ens = json.loads(ens_path.read_text()) if ens_path.exists() else {"variants": {}}
    ens.pop("config_hash", None)
    failures = []
    for v, res in results.items():
        for seed, (ckpt, rec) in sorted(res.runs.items()):
            d = rd.path(v, seed)
            d.mkdir(parents=True, exist_ok=True)
            ckpt.meta["run_config_hash"] = rd.hash
            save_checkpoint(d / "checkpoint.bin", ckpt)
            rd.write_json(d / "runrecord.json", rec.to_dict())
            (d / "timing.json").write_text(json.dumps({"wall_time": rec.wall_time}, indent=2) + "\n")
        failures += [f"{v}/{s}: {msg}" for s, msg in sorted(res.failed.items())]
        ens["variants"][v] = {
            "seeds": sorted(res.runs),
            "failed": {str(s): m for s, m in sorted(res.failed.items())},
            "champion": res.champion,
            "summary": res.summary,
            "lambda_seal": rd.config.variant_configs((v,))[v][1].lambda_seal,
        }
    rd.write_json(ens_path, ens)
    _timed(rd, "train", t0)
    if not any(r.runs for r in results.values()):
        raise CliError("every training run failed: " + "; ".join(failures), EXIT_NUMERIC)
    return ens


def diagnostic_batch(rd: RunDir) -> tuple[Batch, Batch]:
    """Fixed training-split batch and its frozen boosted view, shared by both variants."""
    dg = rd.config.diagnostics
    tr = pack(rd.data().train, rd.config.model.n_max)
    n = min(dg.batch_size, len(tr))
    idx = np.sort(stream(dg.seed, _DIAG_BATCH).choice(len(tr), n, replace=False))
    batch = Batch.from_packed(tr, idx)
    y_max = rd.config.loss.boost_y_max
    if y_max > 0:
        nv, y = sample_boosts(stream(dg.seed, _DIAG_BOOSTS), y_max, n)
    else:
        nv, y = np.tile([0.0, 0.0, 1.0], (n, 1)), np.zeros(n)
    return batch, boosted_view(batch, nv, y).batch


def _objective(rd: RunDir, variant: str, batch: Batch, view: Batch):
    lc = rd.config.variant_configs((variant,))[variant][1]
    cfg = rd.config.model
    return lambda theta: total_loss_with_view(theta, cfg, batch, view, lc.lambda_seal)


def cmd_hessian(rd: RunDir, force: bool = False) -> dict:
    """Eigenpair, trace and loss slice for each champion on its own objective."""
    dg = rd.config.diagnostics
    champs = rd.champions()
    for v in champs:
        rd.guard(rd.path(v, "curvature.json"), force)
    t0 = time.perf_counter()
    batch, view = diagnostic_batch(rd)
    found = {}
    for v, seed in champs.items():
        ckpt = rd.checkpoint(v, seed)
        loss = _objective(rd, v, batch, view)
        op = make_hvp(loss, ckpt.params)
        eig = cv.top_eigenpair(op, max_iter=dg.lanczos_max_iter, tol=dg.lanczos_tol, seed=dg.seed)
        tr = cv.hutchinson_trace(op, n_probes=dg.trace_probes, seed=dg.seed)
        loss0 = float(loss(ckpt.params.torch()))
        found[v] = (seed, ckpt, loss, eig, tr, loss0)

    # one grid for both models, scaled on the unconstrained one when present
    ref = "unconstrained" if "unconstrained" in found else next(iter(found))
    scale = cv.slice_scale(found[ref][5], found[ref][3].lambda_1, dg.slice_fraction)
    grid = cv.slice_grid(scale, dg.slice_points)

    out = {}
    for v, (seed, ckpt, loss, eig, tr, loss0) in found.items():
        sl = cv.loss_slice(ckpt.params, eig.nu_1, grid, lambda p, loss=loss: float(loss(p.torch())))
        doc = {
            "variant": v,
            "seed": seed,
            "diagnostic_batch": {"size": len(batch), "seed": dg.seed},
            "eigen": eig.to_dict(),
            "trace": tr.to_dict(),
            "loss0": loss0,
            "slice": {
                "scale": scale,
                "scale_source": ref,
                "epsilons": sl.epsilons,
                "losses": sl.losses,
                "missing": sl.missing,
                "max_increase": sl.max_increase(),
            },
        }
        rd.write_json(rd.path(v, "curvature.json"), doc)
        rd.path(v, "nu1.bin").write_bytes(np.asarray(eig.nu_1, dtype="<f8").tobytes())
        write_csv(
            rd.path(v, "slice.csv"),
            ["config_hash", "epsilon", "loss"],
            [{"config_hash": rd.hash, "epsilon": e, "loss": l} for e, l in zip(sl.epsilons, sl.losses)],
        )
        out[v] = doc
    if len(found) == 2:
        ratios = cv.curvature_ratios(
            found["constrained"][3:5],
            found["unconstrained"][3:5],
            {"champions": champs, "diagnostic_batch": len(batch)},
        )
        rd.write_json(rd.path("curvature_ratios.json"), ratios)
        out["ratios"] = ratios
    _timed(rd, "hessian", t0)
    return out


def goldstone_boost(rd: RunDir) -> BoostVector:
    dg = rd.config.diagnostics
    y = dg.goldstone_rapidity if dg.goldstone_rapidity is not None else rd.config.loss.boost_y_max
    if y <= 0:
        return BoostVector((0.0, 0.0, 1.0), 0.0)
    n, _ = sample_boosts(stream(dg.seed, _GOLDSTONE_BOOST), 1.0, 1)
    return BoostVector(tuple(float(c) for c in n[0]), float(y))


def cmd_goldstone(rd: RunDir, force: bool = False) -> dict:
    champs = rd.champions()
    t0 = time.perf_counter()
    batch, _ = diagnostic_batch(rd)
    g = goldstone_boost(rd)
    out = {}
    for v, seed in champs.items():
        cpath = rd.path(v, "curvature.json")
        if not cpath.exists():
            raise CliError(f"{cpath} missing; run `jetlab hessian` first", EXIT_DATA)
        doc = json.loads(cpath.read_text())
        if "goldstone" in doc and not force:
            raise CliError(f"{cpath} already holds a goldstone table; pass --force to overwrite", EXIT_CONFIG)
        ckpt = rd.checkpoint(v, seed)
        nu = np.frombuffer(rd.path(v, "nu1.bin").read_bytes(), dtype="<f8")
        res = cv.goldstone_ratio(ckpt.params, nu, doc["slice"]["epsilons"], rd.config.model, batch, g)
        doc.pop("config_hash", None)
        doc["goldstone"] = {
            "boost": {"n": list(g.n), "y": g.y},
            "epsilons": res.epsilons,
            "median_ratio": res.ratios,
            "iqr": res.dispersion,
            "median_abs_deviation": res.median_abs_deviation,
            "excluded": res.excluded,
        }
        rd.write_json(cpath, doc)
        write_csv(
            rd.path(v, "goldstone.csv"),
            ["config_hash", "epsilon", "median_ratio", "iqr", "median_abs_deviation", "excluded"],
            [
                {"config_hash": rd.hash, "epsilon": e, "median_ratio": r, "iqr": q, "median_abs_deviation": m, "excluded": x}
                for e, r, q, m, x in zip(res.epsilons, res.ratios, res.dispersion, res.median_abs_deviation, res.excluded)
            ],
        )
        out[v] = doc["goldstone"]
    _timed(rd, "goldstone", t0)
    return out


def cmd_robustness(rd: RunDir, force: bool = False) -> Path:
    dg = rd.config.diagnostics
    t0 = time.perf_counter()
    test = rd.data().test
    rows = []
    for v, seed in rd.all_runs():
        ckpt = rd.checkpoint(v, seed)
        for rep in robustness_sweep(ckpt, test, dg.sigmas, seed=dg.robustness_seed, repeats=dg.robustness_repeats):
            rows.append(
                {
                    "config_hash": rd.hash,
                    "variant": v,
                    "seed": seed,
                    "dataset": "test",
                    "sigma": rep.provenance["sigma"],
                    "accuracy": rep.accuracy,
                    "auc": rep.roc_auc,
                    "auc_std": rep.auc_std,
                }
            )
    p = _upsert_metrics(rd, rows, {"test"})
    _timed(rd, "robustness", t0)
    return p


def cmd_ood(rd: RunDir, force: bool = False) -> Path:
    t0 = time.perf_counter()
    near, far = rd.data("near"), rd.data("far")
    rows = []
    for v, seed in rd.all_runs():
        for name, rep in ood_eval(rd.checkpoint(v, seed), near, far).items():
            rows.append(
                {
                    "config_hash": rd.hash,
                    "variant": v,
                    "seed": seed,
                    "dataset": name,
                    "sigma": 0.0,
                    "accuracy": rep.accuracy,
                    "auc": rep.roc_auc,
                    "auc_std": None,
                }
            )
    p = _upsert_metrics(rd, rows, {"near", "far"})
    _timed(rd, "ood", t0)
    return p


def cmd_distill(rd: RunDir, force: bool = False) -> dict:
    champs = rd.champions()
    for v in champs:
        rd.guard(rd.path(v, "distill.csv"), force)
    t0 = time.perf_counter()
    data = rd.data()
    tc = rd.config.distill_train
    seed = tc.seeds[0]
    records: dict[str, DistillRecord] = {}
    for v, teacher_seed in champs.items():
        teacher = rd.checkpoint(v, teacher_seed)
        student, rec = distill(teacher, rd.config.student, data, tc, seed=seed, teacher_id=f"{v}/{teacher_seed}")
        save_checkpoint(rd.path(v, "student.bin"), student)
        write_csv(
            rd.path(v, "distill.csv"),
            DISTILL_FIELDS,
            [
                {"config_hash": rd.hash, "epoch": i, "train_mse": a, "heldout_mse": b, "teacher": rec.teacher, "seed": seed}
                for i, (a, b) in enumerate(zip(rec.train_mse, rec.heldout_mse))
            ],
        )
        records[v] = rec
    out = {v: {"final_heldout_mse": r.heldout_mse[-1], "teacher": r.teacher} for v, r in records.items()}
    if len(records) == 2:
        cmp = compare_distillation(records["constrained"], records["unconstrained"])
        out["comparison"] = {"a": "constrained", "b": "unconstrained", **cmp}
        rd.write_json(rd.path("distill_comparison.json"), out["comparison"])
    _timed(rd, "distill", t0)
    return out


# ------------------------------------------------------------------ report


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def _collect_hashes(root: Path) -> dict[str, str]:
    found = {}
    for p in sorted(root.rglob("*")):
        if p.name in ("config.json", "timings.json", "timing.json", "report.json") or p.name.startswith("checkpoint") or p.name.startswith("student"):
            continue
        if p.suffix in (".json", ".csv") and p.is_file():
            h = _artifact_hash(p)
            if h is not None:
                found[str(p.relative_to(root))] = h
    return found


def build_report(root: Path, allow_mixed: bool = False) -> tuple[dict, bool]:
    """Assemble the consolidated report; returns ``(report, complete)``."""
    root = Path(root)
    hashes = _collect_hashes(root)
    if not hashes:
        raise CliError(f"no result files under {root}", EXIT_DATA)
    distinct = sorted(set(hashes.values()))
    if len(distinct) > 1 and not allow_mixed:
        raise CliError(f"artifacts carry {len(distinct)} different config hashes {distinct}; pass --allow-mixed to merge", EXIT_CONFIG)

    report: dict = {"config_hashes": distinct, "missing": []}
    verdicts: dict = {}

    def missing(section):
        report[section] = "missing"
        report["missing"].append(section)

    # in-distribution performance from RunRecords
    table1 = {}
    for v in VARIANTS:
        recs = sorted(root.glob(f"{v}/*/runrecord.json"))
        if recs:
            fm = [json.loads(p.read_text())["final_metrics"] for p in recs]
            table1[v] = {
                "n_seeds": len(fm),
                "accuracy_mean": _mean([m["accuracy"] for m in fm if "accuracy" in m]),
                "accuracy_std": float(np.std([m["accuracy"] for m in fm], ddof=1)) if len(fm) > 1 else 0.0,
                "auc_mean": _mean([m["auc"] for m in fm if "auc" in m]),
                "auc_std": float(np.std([m["auc"] for m in fm], ddof=1)) if len(fm) > 1 else 0.0,
            }
    if table1:
        report["in_distribution"] = table1
        if len(table1) == 2:
            gap = abs(table1["constrained"]["auc_mean"] - table1["unconstrained"]["auc_mean"])
            verdicts["id_auc_gap_below_0.02"] = {"gap": gap, "holds": gap < 0.02}
    else:
        missing("in_distribution")

    p = root / "curvature_ratios.json"
    if p.exists():
        r = json.loads(p.read_text())
        report["curvature_ratios"] = r
        verdicts["curvature_ratios_below_1"] = {
            "lambda1_ratio": r["lambda1_ratio"],
            "trace_ratio": r["trace_ratio"],
            "holds": r["lambda1_ratio"] < 1 and r["trace_ratio"] < 1,
            "degraded": r["degraded"],
        }
    else:
        missing("curvature_ratios")

    curv = {v: json.loads((root / v / "curvature.json").read_text()) for v in VARIANTS if (root / v / "curvature.json").exists()}
    if curv:
        report["loss_slice"] = {v: {k: c["slice"][k] for k in ("epsilons", "losses", "max_increase", "scale")} for v, c in curv.items()}
        if len(curv) == 2:
            a, b = curv["constrained"]["slice"]["max_increase"], curv["unconstrained"]["slice"]["max_increase"]
            verdicts["constrained_slice_flatter"] = {"constrained": a, "unconstrained": b, "holds": a < b}
    else:
        missing("loss_slice")
    gold = {v: c["goldstone"] for v, c in curv.items() if "goldstone" in c}
    if gold:
        report["goldstone"] = gold
        if len(gold) == 2:
            a = gold["constrained"]["median_abs_deviation"]
            b = gold["unconstrained"]["median_abs_deviation"]
            # a point with every probe jet excluded (None) cannot support the claim
            ok = len(a) == len(b) and all(x is not None and y is not None and x < y for x, y in zip(a, b))
            verdicts["goldstone_smaller_everywhere"] = {"constrained": a, "unconstrained": b, "holds": ok}
    else:
        missing("goldstone")

    mp = root / "metrics.csv"
    rows = read_csv(mp) if mp.exists() else []
    smear = [r for r in rows if r["dataset"] == "test"]
    if smear:
        table = {}
        for v in VARIANTS:
            vr = [r for r in smear if r["variant"] == v]
            if not vr:
                continue
            sigmas = sorted({float(r["sigma"]) for r in vr})
            curve = {s: _mean([float(r["auc"]) for r in vr if float(r["sigma"]) == s]) for s in sigmas}
            per_seed = {}
            for seed in sorted({int(r["seed"]) for r in vr}):
                sr = {float(r["sigma"]): float(r["auc"]) for r in vr if int(r["seed"]) == seed}
                per_seed[seed] = sr[0.0] - sr[max(sr)]
            table[v] = {
                "sigmas": sigmas,
                "auc_mean": [curve[s] for s in sigmas],
                "degradation_per_seed": per_seed,
                "degradation_mean": _mean(list(per_seed.values())),
            }
        report["robustness"] = table
        if len(table) == 2:
            a, b = table["constrained"]["degradation_mean"], table["unconstrained"]["degradation_mean"]
            verdicts["constrained_smaller_smearing_degradation"] = {"constrained": a, "unconstrained": b, "holds": a < b}
    else:
        missing("robustness")
    ood = [r for r in rows if r["dataset"] in ("near", "far")]
    if ood:
        table = {}
        for v in VARIANTS:
            vr = [r for r in ood if r["variant"] == v]
            if vr:
                table[v] = {
                    ds: {
                        "auc_mean": _mean([float(r["auc"]) for r in vr if r["dataset"] == ds]),
                        "accuracy_mean": _mean([float(r["accuracy"]) for r in vr if r["dataset"] == ds]),
                    }
                    for ds in ("near", "far")
                }
        report["ood"] = table
        if len(table) == 2:
            a, b = table["constrained"]["far"]["auc_mean"], table["unconstrained"]["far"]["auc_mean"]
            verdicts["constrained_far_ood_auc_not_lower"] = {"constrained": a, "unconstrained": b, "holds": a >= b}
    else:
        missing("ood")

    dist = {}
    for v in VARIANTS:
        dp = root / v / "distill.csv"
        if dp.exists():
            dr = read_csv(dp)
            dist[v] = {"heldout_mse": [float(r["heldout_mse"]) for r in dr], "train_mse": [float(r["train_mse"]) for r in dr]}
    if dist:
        report["distillation"] = dist
        if len(dist) == 2:
            a, b = dist["constrained"]["heldout_mse"][-1], dist["unconstrained"]["heldout_mse"][-1]
            verdicts["constrained_teacher_distills_no_worse"] = {"constrained": a, "unconstrained": b, "holds": a <= b}
    else:
        missing("distillation")

    report["verdicts"] = verdicts
    return report, not report["missing"]


def render_text(report: dict) -> str:
    lines = ["jetlab report", f"config hash(es): {', '.join(report['config_hashes'])}", ""]
    t1 = report.get("in_distribution")
    if isinstance(t1, dict):
        lines.append("in-distribution (test split, mean +- std over seeds)")
        for v, r in t1.items():
            lines.append(f"  {v:14s} acc {r['accuracy_mean']:.4f} +- {r['accuracy_std']:.4f}  auc {r['auc_mean']:.4f} +- {r['auc_std']:.4f}  (n={r['n_seeds']})")
    r = report.get("curvature_ratios")
    if isinstance(r, dict):
        lines.append(f"curvature ratios: lambda1 {r['lambda1_ratio']:.4f}, trace {r['trace_ratio']:.4f}{'  [degraded]' if r['degraded'] else ''}")
    rb = report.get("robustness")
    if isinstance(rb, dict):
        lines.append("smearing AUC (mean over seeds)")
        for v, t in rb.items():
            pts = "  ".join(f"{s:g}:{a:.4f}" for s, a in zip(t["sigmas"], t["auc_mean"]))
            lines.append(f"  {v:14s} {pts}  degradation {t['degradation_mean']:.4f}")
    od = report.get("ood")
    if isinstance(od, dict):
        for v, t in od.items():
            lines.append(f"ood {v:14s} near auc {t['near']['auc_mean']:.4f}  far auc {t['far']['auc_mean']:.4f}")
    ds = report.get("distillation")
    if isinstance(ds, dict):
        for v, t in ds.items():
            lines.append(f"distill {v:14s} final held-out mse {t['heldout_mse'][-1]:.5f}")
    lines.append("")
    lines.append("verdicts")
    for name, v in report["verdicts"].items():
        lines.append(f"  {'HOLDS' if v['holds'] else 'FAILS'}  {name}")
    if report["missing"]:
        lines.append("missing sections: " + ", ".join(report["missing"]))
    return "\n".join(lines) + "\n"


def cmd_report(root: Path, allow_mixed: bool = False) -> tuple[dict, int]:
    root = Path(root)
    if not root.is_dir():
        raise CliError(f"no run directory at {root}", EXIT_DATA)
    report, complete = build_report(root, allow_mixed)
    (root / "report.json").write_text(canonical_json(report))
    (root / "report.txt").write_text(render_text(report))
    return report, EXIT_OK if complete else EXIT_PARTIAL


# ------------------------------------------------------------------ argparse


def _seeds(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in raw.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key, e.g. train.epochs=5")
    common.add_argument("--out", help="output root (default $JETLAB_OUT or ./runs)")
    common.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for training")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="jetlab", description="Train and probe boost-consistency jet classifiers.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write toy jet files")
    t = sub.add_parser("train", parents=[common], help="train seed ensembles")
    t.add_argument("--variant", choices=[*VARIANTS, "both"], default="both")
    t.add_argument("--seeds", type=_seeds)
    for name, text in (
        ("hessian", "top eigenpair, trace and loss slice of the champions"),
        ("goldstone", "invariance ratio along the top eigenvector"),
        ("robustness", "AUC under pT smearing"),
        ("ood", "near and far out-of-distribution evaluation"),
        ("distill", "distil each champion into the student"),
    ):
        c = sub.add_parser(name, parents=[common], help=text)
        c.add_argument("--champions", action="store_true", default=True, help="use the ensemble champions (default)")
    r = sub.add_parser("report", parents=[common], help="consolidate results")
    r.add_argument("--dir", help="run directory (default <out>/<tag>)")
    r.add_argument("--allow-mixed", action="store_true", help="merge artifacts with different config hashes")
    pl = sub.add_parser("pipeline", parents=[common], help="every stage in order")
    pl.add_argument("--allow-mixed", action="store_true")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = resolve_config(args.config, args.set)
        if args.command == "report" and args.dir:
            _, code = cmd_report(Path(args.dir), args.allow_mixed)
            return code
        base = Path(args.out or os.environ.get("JETLAB_OUT", "runs"))
        if args.command == "report":
            _, code = cmd_report(base / config.tag, args.allow_mixed)
            return code
        rd = RunDir.open(str(base), config)
        if args.command == "gen-data":
            cmd_gen_data(rd, args.force)
        elif args.command == "train":
            variants = VARIANTS if args.variant == "both" else (args.variant,)
            cmd_train(rd, variants, args.seeds, args.jobs, args.force)
        elif args.command == "hessian":
            cmd_hessian(rd, args.force)
        elif args.command == "goldstone":
            cmd_goldstone(rd, args.force)
        elif args.command == "robustness":
            cmd_robustness(rd, args.force)
        elif args.command == "ood":
            cmd_ood(rd, args.force)
        elif args.command == "distill":
            cmd_distill(rd, args.force)
        elif args.command == "pipeline":
            return run_pipeline(rd, jobs=args.jobs, force=args.force, allow_mixed=args.allow_mixed)
        return EXIT_OK
    except CliError as exc:
        print(f"jetlab: error: {exc}", file=sys.stderr)
        return exc.code
    except DataError as exc:
        print(f"jetlab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, TrainingError, cv.LanczosBreakdown) as exc:
        print(f"jetlab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def run_pipeline(rd: RunDir, jobs: int = 1, force: bool = False, allow_mixed: bool = False) -> int:
    if rd.config.data.path is None:
        cmd_gen_data(rd, force)
    cmd_train(rd, VARIANTS, None, jobs, force)
    cmd_hessian(rd, force)
    cmd_goldstone(rd, force)
    cmd_robustness(rd, force)
    if rd.config.data.path is None:
        cmd_ood(rd, force)
    cmd_distill(rd, force)
    _, code = cmd_report(rd.root, allow_mixed)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

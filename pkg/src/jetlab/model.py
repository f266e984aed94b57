"""Set-transformer jet classifier on a flat float64 parameter vector.

Layout per model::

    embed         Linear(input_dim -> d_model) + ReLU
    enc{i}        post-norm encoder layer: LN(h + MHA(h)), LN(h + FF(h))
    pool          masked mean over constituents
    head{k}       Linear + ReLU, widths ``head_dims``
    out           Linear(head_dims[-1] -> 1)

Parameter count (all linear layers carry a bias, each layer norm a gain and
an offset)::

    P = (I + 1) d
      + L (4 d^2 + 2 d F + 9 d + F)
      + sum_k (h_{k-1} + 1) h_k          with h_0 = d
      + h_K + 1

for input width I, model width d, depth L and feed-forward width F.
"""

from __future__ import annotations

import itertools
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import diffengine as de
from .diffengine import Layout, ParamVector
from .kinematics import N_FEATURES


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = N_FEATURES
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    ff_dim: int = 32
    head_dims: tuple[int, ...] = (16, 16, 16)
    n_max: int = 32

    def __post_init__(self):
        object.__setattr__(self, "head_dims", tuple(int(h) for h in self.head_dims))
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not self.head_dims:
            raise ValueError("head_dims must be non-empty")
        if min(self.input_dim, self.d_model, self.ff_dim, self.n_heads, self.n_max, *self.head_dims) < 1:
            raise ValueError("all widths must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_dims"] = list(self.head_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**{**d, "head_dims": tuple(d["head_dims"])})


# full-scale teacher; head widths are the plain reading (see reconcile_param_count)
FULL_TEACHER = ModelConfig(d_model=256, n_layers=3, n_heads=4, ff_dim=256, head_dims=(128, 128, 128))
# closest same-topology reduction found by reconcile_param_count(487_665, ...)
FULL_STUDENT = ModelConfig(d_model=128, n_layers=3, n_heads=4, ff_dim=320, head_dims=(112, 112, 112))
DESK_TEACHER = ModelConfig()
DESK_STUDENT = ModelConfig(d_model=16, n_layers=1, n_heads=2, ff_dim=16, head_dims=(8,))


def layout(config: ModelConfig) -> Layout:
    d, F = config.d_model, config.ff_dim
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("embed.weight", (config.input_dim, d)),
        ("embed.bias", (d,)),
    ]
    for i in range(config.n_layers):
        p = f"enc{i}."
        shapes += [
            (p + "attn.in_weight", (d, 3 * d)),
            (p + "attn.in_bias", (3 * d,)),
            (p + "attn.out_weight", (d, d)),
            (p + "attn.out_bias", (d,)),
            (p + "norm1.gain", (d,)),
            (p + "norm1.offset", (d,)),
            (p + "ff1.weight", (d, F)),
            (p + "ff1.bias", (F,)),
            (p + "ff2.weight", (F, d)),
            (p + "ff2.bias", (d,)),
            (p + "norm2.gain", (d,)),
            (p + "norm2.offset", (d,)),
        ]
    prev = d
    for k, h in enumerate(config.head_dims):
        shapes += [(f"head{k}.weight", (prev, h)), (f"head{k}.bias", (h,))]
        prev = h
    shapes += [("out.weight", (prev, 1)), ("out.bias", (1,))]
    return Layout.build(shapes)


def param_count(config: ModelConfig) -> int:
    d, F, L, I = config.d_model, config.ff_dim, config.n_layers, config.input_dim
    total = (I + 1) * d + L * (4 * d * d + 2 * d * F + 9 * d + F)
    prev = d
    for h in config.head_dims:
        total += (prev + 1) * h
        prev = h
    return total + prev + 1


def init_params(config: ModelConfig, seed: int) -> ParamVector:
    """Weights ~ U(-sqrt(3/fan_in), sqrt(3/fan_in)); biases 0; LN gain 1, offset 0."""
    lay = layout(config)
    rng = np.random.default_rng(seed)
    values = np.zeros(lay.size)
    for e in lay:
        sl = slice(e.offset, e.offset + e.size)
        if e.name.endswith("gain"):
            values[sl] = 1.0
        elif len(e.shape) == 2:
            bound = math.sqrt(3.0 / e.shape[0])
            values[sl] = rng.uniform(-bound, bound, e.size)
    return ParamVector(values, lay)


@dataclass
class Batch:
    """Model input.  ``p4`` (B, N, 4) is kept when the batch may be boosted."""

    features: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    p4: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_packed(cls, packed, idx=None) -> Batch:
        if idx is not None:
            packed = packed.take(idx)
        return cls(packed.features, packed.mask, packed.labels, packed.p4)

    def slice(self, sl) -> Batch:
        return Batch(self.features[sl], self.mask[sl], self.labels[sl], None if self.p4 is None else self.p4[sl])


def _tensor_params(params, config: ModelConfig):
    if isinstance(params, ParamVector):
        params = params.torch()
    lay = layout(config)
    if params.shape[0] != lay.size:
        raise ValueError(f"parameter vector has {params.shape[0]} entries, config needs {lay.size}")
    return lay.split(params)


def forward(params, config: ModelConfig, batch: Batch) -> torch.Tensor:
    """One logit per jet, as a float64 tensor differentiable in ``params``."""
    mask_np = np.asarray(batch.mask, dtype=bool)
    empty = np.flatnonzero(~mask_np.any(axis=1))
    if empty.size:
        raise ValueError(f"jet {int(empty[0])} in batch has no unmasked constituents")
    w = _tensor_params(params, config)
    x = torch.as_tensor(np.asarray(batch.features, dtype=np.float64))
    mask = torch.as_tensor(mask_np)
    B, N, _ = x.shape
    d, H = config.d_model, config.n_heads
    dh = d // H
    key_mask = mask[:, None, None, :]

    h = de.relu(de.linear(x, w["embed.weight"], w["embed.bias"], name="embed"), name="embed.relu")
    for i in range(config.n_layers):
        p = f"enc{i}."
        qkv = de.linear(h, w[p + "attn.in_weight"], w[p + "attn.in_bias"], name=p + "attn.in")
        q, k, v = (t.reshape(B, N, H, dh).transpose(1, 2) for t in qkv.split(d, dim=-1))
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        att = de.masked_softmax(scores, key_mask, name=p + "attn.softmax")
        o = (att @ v).transpose(1, 2).reshape(B, N, d)
        a = de.linear(o, w[p + "attn.out_weight"], w[p + "attn.out_bias"], name=p + "attn.out")
        h = de.layer_norm(h + a, w[p + "norm1.gain"], w[p + "norm1.offset"], name=p + "norm1")
        f = de.relu(de.linear(h, w[p + "ff1.weight"], w[p + "ff1.bias"], name=p + "ff1"), name=p + "ff1.relu")
        f = de.linear(f, w[p + "ff2.weight"], w[p + "ff2.bias"], name=p + "ff2")
        h = de.layer_norm(h + f, w[p + "norm2.gain"], w[p + "norm2.offset"], name=p + "norm2")
    z = de.masked_mean(h, mask)
    for k in range(len(config.head_dims)):
        z = de.relu(de.linear(z, w[f"head{k}.weight"], w[f"head{k}.bias"], name=f"head{k}"), name=f"head{k}.relu")
    return de.linear(z, w["out.weight"], w["out.bias"], name="out")[:, 0]


def predict(params, config: ModelConfig, batch: Batch, chunk: int = 1024) -> np.ndarray:
    """Logits as a numpy array, evaluated without building a graph."""
    out = []
    with torch.no_grad():
        for s in range(0, len(batch), chunk):
            out.append(forward(params, config, batch.slice(slice(s, s + chunk))).numpy())
    return np.concatenate(out) if out else np.zeros(0)


# -------------------------------------------------------------- checkpoints

MAGIC = b"JLCKPT01"
SCHEMA = "jetlab-checkpoint-v1"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamVector
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Binary checkpoint plus a ``.json`` provenance sidecar."""
    path = Path(path)
    header = json.dumps(
        {"schema": SCHEMA, "config": ckpt.config.to_dict(), "layout": ckpt.params.layout.to_json()},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(ckpt.params.values.astype("<f8").tobytes())
    path.with_suffix(".json").write_text(json.dumps(ckpt.meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a jetlab checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n])
    if header.get("schema") != SCHEMA:
        raise ValueError(f"{path}: unsupported schema {header.get('schema')!r}")
    config = ModelConfig.from_dict(header["config"])
    lay = Layout.from_json(header["layout"])
    if lay != layout(config):
        raise ValueError(f"{path}: layout table does not match config")
    values = np.frombuffer(raw[16 + n :], dtype="<f8")
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return Checkpoint(config, ParamVector(values, lay), meta)


# ------------------------------------------------------- count reconciliation


def _linear_count(a: int, b: int, bias: bool) -> int:
    return a * b + (b if bias else 0)


def reading_count(
    d: int,
    ff: int,
    n_layers: int,
    head: tuple[int, ...],
    *,
    input_dim: int = N_FEATURES,
    bias: bool = True,
    encoder_norms: bool = True,
    final_norm: bool = False,
    head_norms: bool = False,
    out_bias: bool = True,
) -> int:
    """Parameter count of one reading of the architecture description."""
    enc = (
        _linear_count(d, 3 * d, bias)
        + _linear_count(d, d, bias)
        + _linear_count(d, ff, bias)
        + _linear_count(ff, d, bias)
        + (4 * d if encoder_norms else 0)
    )
    total = _linear_count(input_dim, d, bias) + n_layers * enc + (2 * d if final_norm else 0)
    prev = d
    for h in head:
        total += _linear_count(prev, h, bias) + (2 * h if head_norms else 0)
        prev = h
    return total + _linear_count(prev, 1, out_bias)


def reconcile_param_count(target: int, candidates) -> list[tuple[int, int, dict]]:
    """Rank readings by distance to ``target``; entries are ``(|diff|, count, reading)``."""
    ranked = []
    for reading in candidates:
        count = reading_count(**reading)
        ranked.append((abs(count - target), count, reading))
    ranked.sort(key=lambda r: (r[0], json.dumps(r[2], sort_keys=True)))
    return ranked


def teacher_readings():
    """Ambiguity space of the 256-wide, 3-layer teacher description.

    Interior head widths (two unknowns, the last stage fixed at 128), bias and
    layer-norm conventions, and whether the output layer carries a bias.
    """
    widths = range(128, 257, 16)
    heads = [(a, b, 128) for a in widths for b in widths if a >= b]
    flags = itertools.product([True, False], repeat=5)
    for head, (bias, enc_n, fin_n, head_n, out_b) in itertools.product(heads, list(flags)):
        yield dict(
            d=256, ff=256, n_layers=3, head=head, bias=bias, encoder_norms=enc_n,
            final_norm=fin_n, head_norms=head_n, out_bias=out_b,
        )


def student_readings():
    """Same topology as the teacher with every width reduced (multiples of 16)."""
    for d in range(16, 257, 16):
        for n_layers in (1, 2, 3):
            for ff in range(16, 1025, 16):
                for h in range(16, d + 1, 16):
                    yield dict(d=d, ff=ff, n_layers=n_layers, head=(h, h, h))

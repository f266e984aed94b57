"""Teacher-to-student logit distillation as a compressibility probe."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .datasets import DatasetSplit, pack
from .diffengine import value_and_grad
from .model import Batch, Checkpoint, ModelConfig, forward, init_params, predict
from .objectives import distill_loss
from .trainer import AdamState, TrainConfig, adam_step, stream

_SHUFFLE = 11


@dataclass
class DistillRecord:
    train_mse: list[float]
    heldout_mse: list[float]
    teacher: str
    student_config: dict
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


def _unlabelled(packed) -> Batch:
    # labels are never read; zeros keep the Batch shape contract
    return Batch(packed.features, packed.mask, np.zeros(len(packed)))


def distill(
    teacher: Checkpoint,
    student_config: ModelConfig,
    data: DatasetSplit,
    train_config: TrainConfig,
    seed: int,
    teacher_id: str = "",
    student_init=None,
) -> tuple[Checkpoint, DistillRecord]:
    """Fit a student to the frozen teacher's logits on the train split.

    Held-out MSE on the test split is recorded after every epoch.
    """
    tr = _unlabelled(pack(data.train, teacher.config.n_max))
    te = _unlabelled(pack(data.test, teacher.config.n_max))
    t_train = predict(teacher.params, teacher.config, tr)
    t_test = predict(teacher.params, teacher.config, te)

    params = student_init if student_init is not None else init_params(student_config, seed)
    state = AdamState.zeros(len(params))
    tc = train_config
    n = len(tr)
    train_curve, held_curve = [], []
    for epoch in range(tc.epochs):
        order = stream(seed, _SHUFFLE, epoch).permutation(n)
        running = 0.0
        for start in range(0, n, tc.batch_size):
            idx = order[start : start + tc.batch_size]
            batch = tr.slice(idx)
            target = t_train[idx]
            value, grad = value_and_grad(lambda th: distill_loss(forward(th, student_config, batch), target), params)
            params, state = adam_step(params, grad, state, tc)
            running += value * len(idx)
        train_curve.append(running / n)
        held_curve.append(float(np.mean((predict(params, student_config, te) - t_test) ** 2)))
    record = DistillRecord(train_curve, held_curve, teacher_id, student_config.to_dict(), seed)
    meta = {"teacher": teacher_id, "seed": seed, "epochs": tc.epochs, "final_heldout_mse": held_curve[-1]}
    return Checkpoint(student_config, params, meta), record


def first_crossing(curve, threshold: float) -> int | None:
    for i, v in enumerate(curve):
        if v <= threshold:
            return i
    return None


def compare_distillation(a: DistillRecord, b: DistillRecord, threshold: float | None = None) -> dict:
    """Final held-out MSE ratio ``a / b`` and first epochs below ``threshold``.

    The default threshold is twice the larger of the two final MSEs.
    """
    if len(a.heldout_mse) != len(b.heldout_mse):
        raise ValueError("distillation records have different epoch counts")
    if a.student_config != b.student_config:
        raise ValueError("distillation records use different student configs")
    fa, fb = a.heldout_mse[-1], b.heldout_mse[-1]
    if threshold is None:
        threshold = 2.0 * max(fa, fb)
    ratio = fa / fb if fb > 0 else (1.0 if fa == 0 else float("inf"))
    return {
        "final_mse": {"a": fa, "b": fb},
        "final_mse_ratio": ratio,
        "threshold": threshold,
        "crossing_epoch": {"a": first_crossing(a.heldout_mse, threshold), "b": first_crossing(b.heldout_mse, threshold)},
        "teachers": {"a": a.teacher, "b": b.teacher},
    }

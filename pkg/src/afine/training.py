"""Three-phase pairwise learning-to-rank training.

Phase 1 warms up the naturalness branch (backbone + head), phase 2 learns the
fidelity channel weights on a frozen backbone, phase 3 learns the adaptive
scale and the two logistic calibrations.  Every phase minimizes the batch mean
of the fidelity loss between the label ``p`` and the Thurstone probability
that ``y`` beats ``z``.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_model
from .errors import ConfigError, DataError, NumericError
from .ranking import fidelity_loss, preference_probability

log = logging.getLogger(__name__)

PHASE_DEFAULTS = {
    1: {"learning_rate": 5e-6, "max_iters": 40_000},
    2: {"learning_rate": 5e-4, "max_iters": 40_000},
    3: {"learning_rate": 1e-3, "max_iters": 10_000},
}
PHASE_GROUPS = {
    1: ("backbone", "naturalness"),
    2: ("fidelity",),
    3: ("scale", "calibration"),
}


@dataclass
class TrainConfig:
    phase: int = 1
    learning_rate: float | None = None
    weight_decay: float = 1e-3
    cosine_period_iters: int = 10_000
    batch_size: int = 128
    max_iters: int | None = None
    seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.phase not in PHASE_DEFAULTS:
            raise ConfigError(f"phase must be 1, 2 or 3, got {self.phase!r}")
        defaults = PHASE_DEFAULTS[self.phase]
        if self.learning_rate is None:
            self.learning_rate = defaults["learning_rate"]
        if self.max_iters is None:
            self.max_iters = defaults["max_iters"]
        if self.batch_size < 1 or self.max_iters < 1 or self.cosine_period_iters < 1:
            raise ConfigError("batch_size, max_iters and cosine_period_iters must be positive")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be positive and weight_decay non-negative")


@dataclass
class TraceRow:
    iter: int
    phase: int
    lr: float
    loss: float
    val_accuracy: float | None = None


@dataclass
class TrainResult:
    model: torch.nn.Module
    trace: list[TraceRow] = field(default_factory=list)
    best_val_accuracy: float | None = None

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.trace]


def set_trainable(model, phase: int | None) -> list[torch.nn.Parameter]:
    """Enable gradients only for the phase's parameter groups (all groups if phase is None)."""
    active = set(PHASE_GROUPS[phase]) if phase is not None else None
    params = []
    for group, named in model.parameter_groups().items():
        on = active is None or group in active
        for _, p in named:
            p.requires_grad_(on)
            if on:
                params.append(p)
    return params


def _stack(store, ids, dtype):
    return torch.stack([store[i] for i in ids]).to(dtype)


def _group_by_shape(triplets, store):
    groups = defaultdict(list)
    for t in triplets:
        groups[tuple(store[t.reference_id].shape)].append(t)
    return list(groups.values())


def triplet_scores(model, x, y, z, phase: int | None = None):
    """Scores (d_y, d_z) for stacked triplet images; phase 1 scores by calibrated naturalness alone."""
    b = x.shape[0]
    pyr = model.pyramid(torch.cat([x, y, z]))
    px, py, pz = (pyr.select(slice(i * b, (i + 1) * b)) for i in range(3))
    if phase == 1:
        return model.calibrated_naturalness(py), model.calibrated_naturalness(pz)
    n_x = model.calibrated_naturalness(px)
    d_y = model.terms(px, py, n_ref=n_x)["score"]
    d_z = model.terms(px, pz, n_ref=n_x)["score"]
    return d_y, d_z


def batch_loss(model, triplets, store, phase: int | None = None) -> torch.Tensor:
    """Mean fidelity loss over a batch of triplets (images may differ in size across triplets)."""
    if not triplets:
        raise DataError("empty batch")
    dtype = next(model.parameters()).dtype
    total = 0.0
    for group in _group_by_shape(triplets, store):
        x = _stack(store, [t.reference_id for t in group], dtype)
        y = _stack(store, [t.y_id for t in group], dtype)
        z = _stack(store, [t.z_id for t in group], dtype)
        p = torch.tensor([t.p for t in group], dtype=dtype)
        d_y, d_z = triplet_scores(model, x, y, z, phase)
        total = total + fidelity_loss(p, preference_probability(d_y, d_z)).sum()
    return total / len(triplets)


def mean_loss(model, triplets, store, phase: int | None = None, batch_size: int = 256) -> float:
    """Dataset-level mean loss without gradients."""
    with torch.no_grad():
        acc = 0.0
        for i in range(0, len(triplets), batch_size):
            chunk = triplets[i : i + batch_size]
            acc += float(batch_loss(model, chunk, store, phase)) * len(chunk)
    return acc / len(triplets)


def iterate_batches(triplets, batch_size: int, seed: int):
    """Endless stream of batches; each epoch is a fresh seeded permutation."""
    n = len(triplets)
    if n == 0:
        raise DataError("no training triplets")
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield [triplets[j] for j in order[i : i + batch_size]]


def _nonfinite_params(model):
    return [n for n, p in model.named_parameters() if not torch.isfinite(p).all()]


def train_phase(model, triplets, store, config: TrainConfig, validation=None, checkpoint_dir=None) -> TrainResult:
    """Run one training phase in place and return the model with its loss trace.

    ``validation`` is an optional ``(pairs, store)`` tuple of evaluation pairs;
    every ``checkpoint_every`` iterations the 2AFC accuracy is measured and the
    best-scoring trainable state is restored at the end.
    """
    from .evaluation import AfineMetric, evaluate

    triplets = list(triplets)
    if not triplets:
        raise DataError("no training triplets")
    torch.manual_seed(config.seed)
    params = set_trainable(model, config.phase)
    model.train()
    opt = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(opt, T_0=config.cosine_period_iters)
    batches = iterate_batches(triplets, config.batch_size, config.seed)
    result = TrainResult(model)
    best_state = None

    def validate():
        pairs, vstore = validation
        model.eval()
        report = evaluate(AfineMetric(model), pairs, vstore)
        model.train()
        return report.overall.accuracy

    for it in range(1, config.max_iters + 1):
        lr = opt.param_groups[0]["lr"]
        loss = batch_loss(model, next(batches), store, config.phase)
        if not torch.isfinite(loss):
            raise NumericError(
                f"non-finite loss {float(loss.detach())} at phase {config.phase} iteration {it} (lr={lr:.3g}); "
                f"non-finite parameters: {_nonfinite_params(model) or 'none'}"
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        row = TraceRow(it, config.phase, lr, float(loss.detach()))
        if validation is not None and (it % config.checkpoint_every == 0 or it == config.max_iters):
            row.val_accuracy = validate()
            acc = row.val_accuracy if row.val_accuracy is not None else -math.inf
            if result.best_val_accuracy is None or acc > result.best_val_accuracy:
                result.best_val_accuracy = acc
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            log.info("phase %d iter %d: val 2AFC %.4f", config.phase, it, acc)
        if checkpoint_dir is not None and it % config.checkpoint_every == 0:
            save_model(model, Path(checkpoint_dir) / f"phase{config.phase}_iter{it:06d}.safetensors")
        result.trace.append(row)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(True)
    return result


def write_trace(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "phase", "lr", "loss", "val_accuracy"])
        for r in rows:
            w.writerow([r.iter, r.phase, repr(r.lr), repr(r.loss), "" if r.val_accuracy is None else repr(r.val_accuracy)])


@dataclass
class GradCheckResult:
    group: str
    max_rel_error: float
    analytic: list[float]
    numeric: list[float]


def _rel_err(a: float, n: float, floor: float = 1e-8) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradient_check(model, triplets, store, groups=None, phase: int | None = None,
                   coords_per_group: int = 6, step: float = 1e-3, seed: int = 0,
                   extrapolate: bool = False) -> dict[str, GradCheckResult]:
    """Compare autograd gradients of the batch loss with central finite differences.

    Runs on a float64 copy of ``model``.  ``phase`` selects both the objective
    and the trainable mask: groups outside the mask report analytic gradients
    of exactly zero.  ``coords_per_group`` coordinates are sampled per group.
    With ``extrapolate`` the central differences at ``step`` and ``step / 2``
    are combined by Richardson extrapolation, cancelling the O(step^2)
    truncation term that dominates for strongly curved backbone weights.
    """
    m = copy.deepcopy(model).double()
    m.eval()
    set_trainable(m, phase)
    named = m.parameter_groups()
    groups = list(groups) if groups is not None else list(named)
    loss = batch_loss(m, triplets, store, phase)
    loss.backward()
    rng = np.random.default_rng(seed)
    out = {}
    for g in groups:
        coords = [(p, i) for _, p in named[g] for i in range(p.numel())]
        if not coords:
            continue
        pick = rng.choice(len(coords), size=min(coords_per_group, len(coords)), replace=False)
        analytic, numeric = [], []
        for c in sorted(pick):
            p, i = coords[c]
            flat = p.data.view(-1)
            a = 0.0 if p.grad is None else float(p.grad.view(-1)[i])
            orig = float(flat[i])

            def central(h):
                with torch.no_grad():
                    flat[i] = orig + h
                    f_plus = float(batch_loss(m, triplets, store, phase))
                    flat[i] = orig - h
                    f_minus = float(batch_loss(m, triplets, store, phase))
                    flat[i] = orig
                return (f_plus - f_minus) / (2 * h)

            d = central(step)
            if extrapolate:
                d = (4 * central(step / 2) - d) / 3
            analytic.append(a)
            numeric.append(d)
        frozen = not any(p.requires_grad for _, p in named[g])
        err = 0.0 if frozen else max(_rel_err(a, n) for a, n in zip(analytic, numeric))
        out[g] = GradCheckResult(g, err, analytic, numeric)
    return out

"""Accuracy, sparsity and gradient-sign robustness evaluation.

The attack perturbs a random half (by default) of the input coordinates
by ``epsilon`` times the sign of the loss gradient, clipped back to
[0, 1].  Gradients always come from the baseline net; the implicit
model under evaluation only answers predictions, and both models face
the same perturbed pixels.  Masks are drawn one per evaluation batch
from a counter-derived stream, so reports are reproducible for a fixed
seed and batch size.
"""

import csv
import math
import time
from dataclasses import dataclass

import numpy as np

from .baseline_net import accuracy, augment_inputs, input_gradient, net_nnz
from .implicit_core import ImplicitModel, predict
from .matrix_store import as_matrix
from .seeding import STREAM_ATTACK_MASK, derive_rng
from .sim_trainer import TrainedModel, subsample_columns, train

SWEEP_COLUMNS = [
    "label",
    "objective",
    "weight",
    "lambda1",
    "lambda2",
    "kappa",
    "mode",
    "samples",
    "workers",
    "seed",
    "epsilon",
    "mask_fraction",
    "status",
    "clean_accuracy",
    "adversarial_accuracy",
    "sparsity_pct",
    "accuracy_drop_pct",
    "train_seconds",
    "error",
]


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    mask_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not 0.0 <= self.mask_fraction <= 1.0:
            raise ValueError("mask_fraction must lie in [0, 1]")


@dataclass
class EvalReport:
    clean_accuracy: float
    adversarial_accuracy: float
    sparsity_pct: float
    accuracy_drop_pct: float


def _model_of(model_like):
    if isinstance(model_like, TrainedModel):
        return model_like.model
    if isinstance(model_like, ImplicitModel):
        return model_like
    raise TypeError("expected an ImplicitModel or TrainedModel")


def model_nnz(model_like):
    """Exact nonzero count over the four parameter blocks."""
    if isinstance(model_like, TrainedModel):
        return model_like.nnz
    model = _model_of(model_like)
    return int(sum(np.count_nonzero(b) for b in (model.A, model.B, model.C, model.D)))


def sparsity_pct(model_like, net):
    """Percentage of baseline parameters absent from the trained model."""
    return 100.0 * (1.0 - model_nnz(model_like) / net_nnz(net))


def perturbation_mask(dim, fraction, rng):
    """Boolean mask selecting ceil(fraction * dim) coordinates."""
    if dim < 1:
        raise ValueError("dim must be positive")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    k = math.ceil(fraction * dim)
    mask = np.zeros(dim, dtype=bool)
    if k:
        mask[rng.choice(dim, size=k, replace=False)] = True
    return mask


def fgsm_attack(net, u, label, config, rng=None):
    """Masked gradient-sign perturbation, clipped to the pixel box.

    Accepts one input vector or a matrix of input columns; a single
    mask covers the whole call, matching the one-mask-per-batch
    protocol.
    """
    if rng is None:
        rng = derive_rng(config.seed, STREAM_ATTACK_MASK)
    u_arr = np.asarray(u, dtype=np.float64)
    single = u_arr.ndim == 1
    U = u_arr[:, None] if single else u_arr
    mask = perturbation_mask(U.shape[0], config.mask_fraction, rng)
    grad = input_gradient(net, U, np.atleast_1d(label))
    step = config.epsilon * np.sign(grad) * mask[:, None]
    out = np.clip(U + step, 0.0, 1.0)
    return out[:, 0] if single else out


def evaluate(
    model_like,
    net,
    inputs,
    labels,
    attack,
    batch_size=1024,
    picard_tol=1e-6,
    picard_max_iter=20000,
):
    """Clean and attacked accuracy of an implicit model.

    ``accuracy_drop_pct`` is the baseline's clean accuracy minus the
    model's, in points: the price paid for sparsity before any attack.
    """
    model = _model_of(model_like)
    inputs = as_matrix(inputs, "inputs")
    labels = np.asarray(labels, dtype=np.int64)
    m = inputs.shape[1]
    if labels.shape != (m,):
        raise ValueError("one label per input column")
    if m == 0:
        raise ValueError("empty input")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")

    clean_logits = predict(
        model, augment_inputs(net, inputs), tol=picard_tol, max_iter=picard_max_iter
    )
    clean = float(np.mean(np.argmax(clean_logits, axis=0) == labels))

    hits = 0
    for b, start in enumerate(range(0, m, batch_size)):
        cols = slice(start, min(start + batch_size, m))
        rng = derive_rng(attack.seed, STREAM_ATTACK_MASK, b)
        perturbed = fgsm_attack(net, inputs[:, cols], labels[cols], attack, rng)
        logits = predict(
            model, augment_inputs(net, perturbed), tol=picard_tol, max_iter=picard_max_iter
        )
        hits += int(np.sum(np.argmax(logits, axis=0) == labels[cols]))
    adversarial = hits / m

    baseline_clean = accuracy(net, inputs, labels)
    return EvalReport(
        clean_accuracy=clean,
        adversarial_accuracy=adversarial,
        sparsity_pct=sparsity_pct(model_like, net),
        accuracy_drop_pct=100.0 * (baseline_clean - clean),
    )


@dataclass(frozen=True)
class SweepItem:
    """One grid point: training setup, attack, optional column budget."""

    train: object
    attack: AttackConfig
    samples: int | None = None
    label: str = ""


def sweep(bundle, net, items, inputs, labels, out_path=None):
    """Train and evaluate every item; failures become rows, not crashes.

    Returns one dict per item in SWEEP_COLUMNS order; optionally also
    written as CSV.
    """
    rows = []
    for item in items:
        cfg = item.train
        row = {
            "label": item.label,
            "objective": cfg.objective.kind,
            "weight": cfg.objective.weight,
            "lambda1": cfg.lam1,
            "lambda2": cfg.lam2,
            "kappa": cfg.kappa,
            "mode": cfg.mode,
            "samples": item.samples if item.samples else bundle.n_columns,
            "workers": cfg.workers,
            "seed": cfg.seed,
            "epsilon": item.attack.epsilon,
            "mask_fraction": item.attack.mask_fraction,
            "status": "ok",
            "clean_accuracy": "",
            "adversarial_accuracy": "",
            "sparsity_pct": "",
            "accuracy_drop_pct": "",
            "train_seconds": "",
            "error": "",
        }
        try:
            sub = bundle
            if item.samples is not None and item.samples != bundle.n_columns:
                sub = subsample_columns(bundle, item.samples, cfg.seed)
            started = time.perf_counter()
            trained = train(sub, cfg, activation=net.activation, baseline_nnz=net_nnz(net))
            row["train_seconds"] = round(time.perf_counter() - started, 3)
            report = evaluate(trained, net, inputs, labels, item.attack)
            row["clean_accuracy"] = report.clean_accuracy
            row["adversarial_accuracy"] = report.adversarial_accuracy
            row["sparsity_pct"] = report.sparsity_pct
            row["accuracy_drop_pct"] = report.accuracy_drop_pct
        except Exception as err:  # noqa: BLE001 - sweep rows must not crash the grid
            row["status"] = "error"
            row["error"] = str(err)
        rows.append(row)
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
    return rows

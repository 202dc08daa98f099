"""Pre-training and fine-tuning loops.

Molecules are prepared once, then each epoch runs seeded-shuffled batches
through the batch objective, backpropagates a single total, and applies Adam
with decoupled weight decay. Everything downstream of the (seed, config,
dataset order) triple is deterministic, so reruns produce byte-identical
metrics CSVs and checkpoints.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_params, save_params
from .config import LossConfig, TrainConfig
from .losses import LossReport, NonFiniteLoss, compose_total, total_loss
from .model import (
    PreparedMolecule,
    batch_parts,
    embed,
    init_params,
    params_from_arrays,
    prepare_molecule,
)
from .molio import Molecule

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class LabelMismatch(ValueError):
    pass


# -- optimizer ------------------------------------------------------------------


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: Optional[dict],
    lr: float,
    wd: float,
    t: int,
) -> tuple[dict[str, np.ndarray], dict]:
    """One Adam step with decoupled weight decay; returns fresh arrays."""
    if state is None:
        state = {
            "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()},
        }
    new_params = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise T.ShapeMismatch(f"adam_step: grad {g.shape} vs param {p.shape}")
        m = ADAM_BETA1 * state["m"][name] + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state["v"][name] + (1 - ADAM_BETA2) * (g * g)
        state["m"][name] = m
        state["v"][name] = v
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        new_params[name] = p - lr * wd * p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return new_params, state


# -- pre-training ----------------------------------------------------------------


@dataclass
class PretrainResult:
    reports: list[LossReport]
    final_params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    best_epoch: int
    metrics_csv: str
    paths: dict[str, str] = field(default_factory=dict)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _format_row(epoch: int, rep: LossReport) -> str:
    cells = [str(epoch)] + [repr(getattr(rep, f)) for f in LossReport.CSV_FIELDS]
    return ",".join(cells)


def metrics_header() -> str:
    return ",".join(("epoch",) + LossReport.CSV_FIELDS)


def pretrain(
    molecules: Sequence[Molecule],
    cfg: TrainConfig,
    out_dir: Optional[str] = None,
    log=None,
) -> PretrainResult:
    """Optimize the full objective over an unlabeled corpus.

    Emits one CSV row per epoch whose columns satisfy the loss-composition
    identity exactly, and writes final/best checkpoints when ``out_dir`` is
    given (best = lowest epoch total).
    """
    if len(molecules) < 2:
        raise ValueError("pre-training needs at least 2 molecules")
    preps = [prepare_molecule(m, cfg.model) for m in molecules]
    params = {k: v.data for k, v in init_params(cfg.model, cfg.seed).items()}
    init_arrays = {k: v.copy() for k, v in params.items()}
    state = None
    rng = np.random.default_rng(cfg.seed)
    step = 0

    lines = [metrics_header()]
    reports: list[LossReport] = []
    best_total = np.inf
    best_params = {k: v.copy() for k, v in params.items()}
    best_epoch = 0

    for epoch in range(1, cfg.epochs + 1):
        sums = dict.fromkeys(
            ("l_skl", "l_jsmi", "l_2d", "l_3d", "l_2d_to_3d", "l_3d_to_2d"), 0.0
        )
        n_batches = 0
        for batch_idx in _batches(len(preps), cfg.batch_size, rng):
            tensors = params_from_arrays(params)
            try:
                parts = batch_parts(
                    [preps[i] for i in batch_idx], tensors, cfg.model, cfg.loss, rng
                )
                total_t, report = total_loss(parts, cfg.loss, context=f"epoch {epoch}")
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(exc.name, f"epoch {epoch}: {exc.context}") from None
            T.backward(total_t)
            grads = {
                k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in tensors.items()
            }
            step += 1
            params, state = adam_step(
                params, grads, state, cfg.lr, cfg.weight_decay, step
            )
            for name in sums:
                sums[name] += getattr(report, name)
            n_batches += 1

        avg = {k: v / n_batches for k, v in sums.items()}
        l_mi, total = compose_total(cfg=cfg.loss, **avg)
        epoch_report = LossReport(l_mi=l_mi, total=total, **avg)
        reports.append(epoch_report)
        lines.append(_format_row(epoch, epoch_report))
        if log:
            log(f"epoch {epoch}/{cfg.epochs} total={total:.6f}")
        if total < best_total:
            best_total = total
            best_params = {k: v.copy() for k, v in params.items()}
            best_epoch = epoch

    if cfg.epochs == 0:
        params = init_arrays
        best_params = {k: v.copy() for k, v in init_arrays.items()}

    metrics_csv = "\n".join(lines) + "\n"
    result = PretrainResult(
        reports=reports,
        final_params=params,
        best_params=best_params,
        best_epoch=best_epoch,
        metrics_csv=metrics_csv,
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        with open(metrics_path, "w", encoding="utf-8") as fh:
            fh.write(metrics_csv)
        final_path = os.path.join(out_dir, "final.ckpt")
        best_path = os.path.join(out_dir, "best.ckpt")
        save_params(final_path, params)
        save_params(best_path, best_params)
        result.paths = {
            "metrics": metrics_path,
            "final": final_path,
            "best": best_path,
        }
    return result


# -- downstream ------------------------------------------------------------------


@dataclass
class DownstreamHead:
    task: str  # "cls" or "reg"
    w: np.ndarray  # (2g, n_tasks)
    b: np.ndarray  # (1, n_tasks)

    def logits(self, z: np.ndarray) -> np.ndarray:
        return z @ self.w + self.b

    def predict_proba(self, z: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits(z)))


def split_indices(n: int, seed: int,
                  ratios=(0.6, 0.2, 0.2)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random train/valid/test split (default 6:2:2)."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def _head_loss(task, logits: T.Tensor, y: np.ndarray) -> T.Tensor:
    target = T.constant(y)
    if task == "cls":
        # log(1+e^z) - z*y, the stable binary cross-entropy with logits
        return T.mean(T.sub(T.softplus(logits), T.mul(logits, target)))
    diff = T.sub(logits, target)
    return T.mean(T.mul(diff, diff))


def train_probe(
    z: np.ndarray,
    y: np.ndarray,
    task: str,
    seed: int = 0,
    epochs: int = 300,
    lr: float = 0.05,
) -> DownstreamHead:
    """Fit a linear head on frozen embeddings with full-batch Adam."""
    if y.ndim == 1:
        y = y.reshape(-1, 1)
    if task == "cls" and not np.isin(y, (0.0, 1.0)).all():
        raise LabelMismatch("classification labels must be 0/1")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(z.shape[1])
    arrays = {
        "w": rng.uniform(-bound, bound, (z.shape[1], y.shape[1])),
        "b": np.zeros((1, y.shape[1])),
    }
    state = None
    for step in range(1, epochs + 1):
        tensors = params_from_arrays(arrays)
        logits = T.add_rowvec(T.matmul(T.constant(z), tensors["w"]), tensors["b"])
        loss = _head_loss(task, logits, y)
        T.backward(loss)
        grads = {k: t.grad for k, t in tensors.items()}
        arrays, state = adam_step(arrays, grads, state, lr, 0.0, step)
    return DownstreamHead(task=task, w=arrays["w"], b=arrays["b"])


@dataclass
class FinetuneResult:
    head: DownstreamHead
    encoder_params: dict[str, np.ndarray]
    val_metric: float
    test_metric: float
    metric_name: str


def compute_embeddings(
    preps: Sequence[PreparedMolecule],
    arrays: dict[str, np.ndarray],
    cfg: TrainConfig,
) -> np.ndarray:
    tensors = params_from_arrays(arrays)
    return np.stack([embed(p, tensors, cfg.model) for p in preps])


def finetune(
    checkpoint: dict[str, np.ndarray] | str,
    molecules: Sequence[Molecule],
    labels: Sequence[float],
    task: str,
    cfg: TrainConfig,
    unfreeze: bool = False,
    head_epochs: int = 300,
    unfreeze_epochs: int = 30,
) -> FinetuneResult:
    """6:2:2 split, then either a linear probe on frozen encoders (default)
    or full fine-tuning when ``unfreeze`` is set."""
    from .evalx import metric

    if task not in ("cls", "reg"):
        raise ValueError("task must be 'cls' or 'reg'")
    if len(labels) != len(molecules):
        raise LabelMismatch("one label per molecule required")
    labels_arr = np.asarray([float(l) for l in labels])
    if not np.isfinite(labels_arr).all():
        raise LabelMismatch("labels must be finite numbers")

    arrays = load_params(checkpoint) if isinstance(checkpoint, str) else dict(checkpoint)
    preps = [prepare_molecule(m, cfg.model) for m in molecules]
    tr, va, te = split_indices(len(preps), cfg.seed)

    if unfreeze:
        arrays = _unfreeze_train(
            arrays, [preps[i] for i in tr], labels_arr[tr], task, cfg, unfreeze_epochs
        )

    z = compute_embeddings(preps, arrays, cfg)
    head = train_probe(z[tr], labels_arr[tr], task, seed=cfg.seed, epochs=head_epochs)

    if task == "cls":
        name = "rocauc"
        val = metric(head.predict_proba(z[va]).ravel(), labels_arr[va], "rocauc")
        test = metric(head.predict_proba(z[te]).ravel(), labels_arr[te], "rocauc")
    else:
        name = "rmse"
        val = metric(head.logits(z[va]).ravel(), labels_arr[va], "rmse")
        test = metric(head.logits(z[te]).ravel(), labels_arr[te], "rmse")
    return FinetuneResult(
        head=head,
        encoder_params=arrays,
        val_metric=val,
        test_metric=test,
        metric_name=name,
    )


def _unfreeze_train(arrays, preps, y, task, cfg: TrainConfig, epochs: int):
    """Joint encoder+head training on the train split (deterministic)."""
    rng = np.random.default_rng(cfg.seed + 1)
    g = arrays["head2d.w_mu"].shape[1]
    bound = 1.0 / np.sqrt(2 * g)
    arrays = dict(arrays)
    arrays["probe.w"] = rng.uniform(-bound, bound, (2 * g, 1))
    arrays["probe.b"] = np.zeros((1, 1))
    state = None
    step = 0
    y = y.reshape(-1, 1)
    for _ in range(epochs):
        for start in range(0, len(preps), cfg.batch_size):
            batch = preps[start : start + cfg.batch_size]
            yb = y[start : start + cfg.batch_size]
            tensors = params_from_arrays(arrays)
            zs = []
            for p in batch:
                from .model import molecule_forward

                fwd = molecule_forward(p, tensors, cfg.model)
                zs.append(T.concat([fwd.p2d.mean, fwd.p3d.mean], axis=1))
            zmat = T.concat(zs, axis=0)
            logits = T.add_rowvec(
                T.matmul(zmat, tensors["probe.w"]), tensors["probe.b"]
            )
            loss = _head_loss(task, logits, yb)
            T.backward(loss)
            grads = {
                k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in tensors.items()
            }
            step += 1
            arrays, state = adam_step(arrays, grads, state, cfg.lr * 10, 0.0, step)
    arrays.pop("probe.w")
    arrays.pop("probe.b")
    return arrays

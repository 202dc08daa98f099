"""Representation-quality and downstream metrics.

Fidelity follows the probability-of-predicted-class convention: node removal
zeroes features and drops incident edges, and the deltas are taken against
the unperturbed prediction. Group divergences use diagonal-Gaussian fits and
a fixed-seed Monte-Carlo Jensen-Shannon estimate (no closed form exists).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .model import (
    PreparedMolecule,
    molecule_forward,
    params_from_arrays,
    prepare_molecule,
)
from .molio import Molecule
from .trainer import DownstreamHead, compute_embeddings

JSD_MC_SAMPLES = 2048
JSD_MC_SEED = 17


class UntrainedModel(ValueError):
    pass


class SingletonGroup(ValueError):
    pass


class DegenerateLabels(ValueError):
    pass


# -- explanations -----------------------------------------------------------------


@dataclass(frozen=True)
class Explanation:
    molecule_id: str
    selected: frozenset[int]
    scores: tuple[float, ...]


def explanation_from_scores(molecule_id: str, scores: Sequence[float]) -> Explanation:
    """Top half of the atoms by attention score (ties to the lower index)."""
    n = len(scores)
    k = math.ceil(n / 2)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    return Explanation(
        molecule_id=molecule_id,
        selected=frozenset(order[:k]),
        scores=tuple(float(s) for s in scores),
    )


def explain_molecule(mol: Molecule, arrays: dict[str, np.ndarray],
                     cfg: TrainConfig) -> Explanation:
    from .model import attention_scores

    prep = prepare_molecule(mol, cfg.model)
    scores = attention_scores(prep, params_from_arrays(arrays), cfg.model)
    return explanation_from_scores(mol.id, scores)


# -- fidelity ---------------------------------------------------------------------


def _predicted_class_prob(arrays, head: DownstreamHead, mol: Molecule,
                          cfg: TrainConfig, removed: frozenset[int]):
    prep = prepare_molecule(mol, cfg.model, removed=removed)
    z = compute_embeddings([prep], arrays, cfg)
    p = float(head.predict_proba(z).ravel()[0])
    return p


def fidelity_pair(
    arrays: dict[str, np.ndarray],
    head: DownstreamHead,
    mol: Molecule,
    explanation: Explanation,
    cfg: TrainConfig,
) -> tuple[float, float]:
    """(fidelity-, fidelity+) for one molecule.

    fidelity- drops everything but the explanation (small is good);
    fidelity+ drops the explanation itself (large is good).
    """
    if head is None or head.task != "cls":
        raise UntrainedModel("fidelity needs a trained classifier head")
    n = mol.n_atoms
    selected = frozenset(explanation.selected)
    p_full = _predicted_class_prob(arrays, head, mol, cfg, frozenset())
    predicted_positive = p_full >= 0.5

    def prob_of_predicted(removed):
        if not removed:
            return p_full
        p = _predicted_class_prob(arrays, head, mol, cfg, frozenset(removed))
        return p if predicted_positive else 1.0 - p

    p_hat_full = p_full if predicted_positive else 1.0 - p_full
    complement = frozenset(range(n)) - selected
    fid_minus = p_hat_full - prob_of_predicted(complement)  # keep only selected
    fid_plus = p_hat_full - prob_of_predicted(selected)  # remove selected
    return fid_minus, fid_plus


# -- JSD between embedding groups ---------------------------------------------------


def _fit_diag_gaussian(rows: np.ndarray):
    if rows.shape[0] < 2:
        raise SingletonGroup("need >= 2 embeddings per group")
    mu = rows.mean(axis=0)
    var = np.maximum(rows.var(axis=0), 1e-6)
    return mu, var


def _log_pdf(x, mu, var):
    return -0.5 * (((x - mu) ** 2) / var + np.log(2 * np.pi * var)).sum(axis=1)


def _jsd_gaussians(p, q, rng) -> float:
    """Monte-Carlo Jensen-Shannon divergence between diagonal Gaussians."""

    def draw(params):
        mu, var = params
        return mu + np.sqrt(var) * rng.standard_normal((JSD_MC_SAMPLES, mu.size))

    def log_mix(x):
        lp = _log_pdf(x, *p)
        lq = _log_pdf(x, *q)
        m = np.maximum(lp, lq)
        return m + np.log(0.5 * np.exp(lp - m) + 0.5 * np.exp(lq - m))

    xp, xq = draw(p), draw(q)
    jsd = 0.5 * (_log_pdf(xp, *p) - log_mix(xp)).mean()
    jsd += 0.5 * (_log_pdf(xq, *q) - log_mix(xq)).mean()
    return float(np.clip(jsd, 0.0, math.log(2.0)))


def jsd_groups(embeds: Sequence[tuple[np.ndarray, object]], mode: str) -> float:
    """Jensen-Shannon separation/alignment of embedding groups.

    ``distinguish``: entries are (vector, class_label) from one view; returns
    the mean pairwise JSD between class groups (higher = better separated).
    ``align``: entries are (vector, (class_label, view_tag)); returns the mean
    over classes of the JSD between the two views' distributions (lower =
    better aligned).
    """
    rng = np.random.default_rng(JSD_MC_SEED)
    if mode == "distinguish":
        groups: dict = {}
        for vec, label in embeds:
            groups.setdefault(label, []).append(np.asarray(vec))
        if len(groups) < 2:
            raise DegenerateLabels("distinguish mode needs >= 2 labels")
        fits = {k: _fit_diag_gaussian(np.stack(v)) for k, v in groups.items()}
        keys = sorted(fits, key=repr)
        vals = [
            _jsd_gaussians(fits[a], fits[b], rng)
            for i, a in enumerate(keys)
            for b in keys[i + 1 :]
        ]
        return float(np.mean(vals))
    if mode == "align":
        by_class: dict = {}
        for vec, label in embeds:
            cls, view = label
            by_class.setdefault(cls, {}).setdefault(view, []).append(np.asarray(vec))
        vals = []
        for cls, views in sorted(by_class.items(), key=lambda kv: repr(kv[0])):
            if len(views) != 2:
                raise DegenerateLabels(f"class {cls!r} must appear in exactly 2 views")
            (a, b) = (np.stack(v) for v in views.values())
            vals.append(_jsd_gaussians(_fit_diag_gaussian(a), _fit_diag_gaussian(b), rng))
        if not vals:
            raise DegenerateLabels("no classes given")
        return float(np.mean(vals))
    raise ValueError(f"unknown mode {mode!r}")


# -- cross-view reconstruction --------------------------------------------------------


@dataclass(frozen=True)
class CrossViewReport:
    mse_2d_from_3d: float  # adjacency recovered from 3D representations
    mse_dist_from_2d: float  # distances recovered from 2D representations
    baseline_2d: float  # best-constant predictor on the same entries
    baseline_dist: float


def cross_view_reconstruct(
    arrays: dict[str, np.ndarray],
    molecules: Sequence[Molecule | PreparedMolecule],
    cfg: TrainConfig,
) -> CrossViewReport:
    """Evaluate both reconstruction directions on held-out molecules.

    Self-pairs (the diagonal) are excluded from both directions; baselines
    are the best constant predictors for the pooled targets.
    """
    from . import tensor as T
    from .encoders import _mlp

    if not molecules:
        raise ValueError("no molecules given")
    tensors = params_from_arrays(arrays)
    adj_pred, adj_true, dist_pred, dist_true = [], [], [], []
    for item in molecules:
        prep = item if isinstance(item, PreparedMolecule) else prepare_molecule(
            item, cfg.model
        )
        n = prep.n_atoms
        if n < 2:
            continue
        fwd = molecule_forward(prep, tensors, cfg.model)
        q = T.cosine_matrix(fwd.attention.h3d_attended).data
        off = ~np.eye(n, dtype=bool)
        adj_pred.append(q[off])
        adj_true.append(prep.adjacency[off])

        ii = np.repeat(np.arange(n), n)
        jj = np.tile(np.arange(n), n)
        diff = T.sub(
            T.gather_rows(fwd.attention.h2d_attended, ii),
            T.gather_rows(fwd.attention.h2d_attended, jj),
        )
        pred = _mlp(tensors, "dist", diff).data.reshape(n, n)
        dist_pred.append(pred[off])
        dist_true.append(prep.dist[off])

    adj_pred = np.concatenate(adj_pred)
    adj_true = np.concatenate(adj_true)
    dist_pred = np.concatenate(dist_pred)
    dist_true = np.concatenate(dist_true)
    return CrossViewReport(
        mse_2d_from_3d=float(((adj_pred - adj_true) ** 2).mean()),
        mse_dist_from_2d=float(((dist_pred - dist_true) ** 2).mean()),
        baseline_2d=float(adj_true.var()),
        baseline_dist=float(dist_true.var()),
    )


# -- scalar metrics ---------------------------------------------------------------------


def metric(preds: Sequence[float], labels: Sequence[float], kind: str) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} vs labels {labels.shape}")
    if kind == "rmse":
        return float(np.sqrt(((preds - labels) ** 2).mean()))
    if kind == "mae":
        return float(np.abs(preds - labels).mean())
    if kind == "rocauc":
        pos = labels == 1.0
        n_pos = int(pos.sum())
        n_neg = int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            raise DegenerateLabels("ROC-AUC needs both classes present")
        order = np.argsort(preds, kind="mergesort")
        ranks = np.empty(len(preds))
        sorted_preds = preds[order]
        i = 0
        while i < len(preds):
            j = i
            while j + 1 < len(preds) and sorted_preds[j + 1] == sorted_preds[i]:
                j += 1
            ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
            i = j + 1
        rank_sum = ranks[pos].sum()
        return float((rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
    raise ValueError(f"unknown metric kind {kind!r}")

"""Training objectives.

``skl_term`` plus the (negated, weighted) Jensen-Shannon mutual-information
estimate form the bound term; the four self-supervised reconstruction losses
(2D adjacency, 3D denoising, 2D->3D distances, 3D->2D connectivity) are
weighted by beta. ``compose_total`` is the single source of truth for the
composition identity, used both when building the differentiable total and
when writing/verifying metrics rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import LossConfig
from .encoders import LatentPosterior, _mlp, _uniform
from .tensor import Tensor

LN2 = math.log(2.0)


class BatchTooSmall(ValueError):
    pass


class NonFiniteLoss(ValueError):
    def __init__(self, name: str, context: str = ""):
        suffix = f" ({context})" if context else ""
        super().__init__(f"non-finite loss term {name!r}{suffix}")
        self.name = name
        self.context = context


@dataclass
class LossParts:
    """Differentiable loss terms for one batch."""

    l_skl: Tensor
    l_jsmi: Tensor
    l_2d: Tensor
    l_3d: Tensor
    l_2d_to_3d: Tensor
    l_3d_to_2d: Tensor


@dataclass(frozen=True)
class LossReport:
    l_mi: float
    l_skl: float
    l_jsmi: float
    l_2d: float
    l_3d: float
    l_2d_to_3d: float
    l_3d_to_2d: float
    total: float

    CSV_FIELDS = ("l_skl", "l_jsmi", "l_2d", "l_3d", "l_2d_to_3d", "l_3d_to_2d", "total")


def compose_total(l_skl: float, l_jsmi: float, l_2d: float, l_3d: float,
                  l_2d_to_3d: float, l_3d_to_2d: float,
                  cfg: LossConfig) -> tuple[float, float]:
    """(l_mi, total) with the exact float arithmetic used everywhere."""
    l_mi = l_skl - cfg.alpha * l_jsmi
    total = l_mi + cfg.beta * (((l_2d + l_3d) + l_2d_to_3d) + l_3d_to_2d)
    return l_mi, total


# -- bound terms ----------------------------------------------------------------


def skl_term(p2d: LatentPosterior, p3d: LatentPosterior) -> Tensor:
    """Symmetrized KL between the two diagonal-Gaussian posteriors."""
    if p2d.mean.shape != p3d.mean.shape:
        raise T.ShapeMismatch(f"skl_term: {p2d.mean.shape} vs {p3d.mean.shape}")
    kl_a = T.gaussian_kl(p2d.mean, p2d.logvar, p3d.mean, p3d.logvar)
    kl_b = T.gaussian_kl(p3d.mean, p3d.logvar, p2d.mean, p2d.logvar)
    return T.scale(T.add(kl_a, kl_b), 0.5)


def init_js_scorer(rng, latent: int) -> dict[str, Tensor]:
    hidden = 2 * latent
    return {
        "jsd.w0": _uniform(rng, 2 * latent, (2 * latent, hidden)),
        "jsd.b0": _uniform(rng, 2 * latent, (1, hidden)),
        "jsd.w1": _uniform(rng, hidden, (hidden, 1)),
        "jsd.b1": _uniform(rng, hidden, (1, 1)),
    }


def js_mi(z2d: Tensor, z3d: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Jensen-Shannon mutual-information estimate over a batch of paired
    latents: E_pos[-softplus(-T)] - E_neg[softplus(T)] + 2 ln 2.

    The 2 ln 2 shift zeroes the estimate at an uninformative scorer, so it
    reads as a (lower-bound-style) MI score: ~0 for independent pairs,
    growing with dependence, capped at 2 ln 2. Negatives pair each row with
    its shift-by-one derangement.
    """
    if z2d.shape != z3d.shape:
        raise T.ShapeMismatch(f"js_mi: {z2d.shape} vs {z3d.shape}")
    b = z2d.shape[0]
    if b < 2:
        raise BatchTooSmall(f"js_mi needs a batch of >= 2, got {b}")
    perm = np.roll(np.arange(b, dtype=np.int64), 1)
    pos = _mlp(params, "jsd", T.concat([z2d, z3d], axis=1))
    neg = _mlp(params, "jsd", T.concat([z2d, T.gather_rows(z3d, perm)], axis=1))
    e_pos = T.mean(T.scale(T.softplus(T.scale(pos, -1.0)), -1.0))
    e_neg = T.mean(T.softplus(neg))
    return T.add_scalar(T.sub(e_pos, e_neg), 2.0 * LN2)


# -- reconstruction losses --------------------------------------------------------


def loss_2d_recon(h2d_attended: Tensor, a: np.ndarray) -> Tensor:
    """|A - P|_F^2 / N^2 where P is row-wise cosine similarity."""
    n = h2d_attended.shape[0]
    if a.shape != (n, n):
        raise T.ShapeMismatch(f"adjacency {a.shape} vs {n} atoms")
    p = T.cosine_matrix(h2d_attended)
    return T.scale(T.frobenius_sq(T.sub(T.constant(a), p)), 1.0 / (n * n))


def loss_3d_to_2d(h3d_attended: Tensor, a: np.ndarray) -> Tensor:
    """Connectivity recovered from the 3D view; same form as loss_2d_recon."""
    return loss_2d_recon(h3d_attended, a)


def inject_noise(coords: np.ndarray, sigma: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Perturb coordinates with scaled standard Gaussian noise; returns the
    perturbed coordinates and the raw noise (the denoising target)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal(np.asarray(coords).shape)
    return np.asarray(coords) + sigma * eps, eps


def loss_3d_denoise(eps_true: np.ndarray, eps_pred: Tensor,
                    batch_index: np.ndarray) -> Tensor:
    """Mean over graphs of the summed per-atom (1 - cos(eps, eps_hat))."""
    rows = eps_pred.shape[0]
    eps_true = np.asarray(eps_true, dtype=np.float64)
    batch_index = np.asarray(batch_index, dtype=np.int64)
    if eps_true.shape != (rows, eps_pred.shape[1]) or batch_index.shape != (rows,):
        raise T.ShapeMismatch("loss_3d_denoise: inconsistent shapes")
    n_graphs = int(batch_index.max()) + 1 if rows else 1
    cos = T.cosine_rows(T.constant(eps_true), eps_pred)
    one_minus = T.add_scalar(T.scale(cos, -1.0), 1.0)
    per_graph = T.segment_sum(one_minus, batch_index, n_graphs)
    return T.mean(per_graph)


def init_dist_head(rng, in_dim: int, hidden: int) -> dict[str, Tensor]:
    return {
        "dist.w0": _uniform(rng, in_dim, (in_dim, hidden)),
        "dist.b0": _uniform(rng, in_dim, (1, hidden)),
        "dist.w1": _uniform(rng, hidden, (hidden, 1)),
        "dist.b1": _uniform(rng, hidden, (1, 1)),
    }


def loss_2d_to_3d(h2d_attended: Tensor, dist: np.ndarray,
                  params: dict[str, Tensor], pair_norm: str = "n2") -> Tensor:
    """Mean absolute deviation between f(H_i - H_j) and the true interatomic
    distance over all ordered pairs (diagonal included)."""
    n = h2d_attended.shape[0]
    if dist.shape != (n, n):
        raise T.ShapeMismatch(f"distance matrix {dist.shape} vs {n} atoms")
    ii = np.repeat(np.arange(n, dtype=np.int64), n)
    jj = np.tile(np.arange(n, dtype=np.int64), n)
    diff = T.sub(T.gather_rows(h2d_attended, ii), T.gather_rows(h2d_attended, jj))
    pred = _mlp(params, "dist", diff)
    target = T.constant(dist.reshape(n * n, 1))
    total = T.sum_all(T.abs_(T.sub(pred, target)))
    denom = float(n * n) if pair_norm == "n2" else float(n)
    return T.scale(total, 1.0 / denom)


def init_noise_head(rng, in_dim: int) -> dict[str, Tensor]:
    # pluggable noise-prediction head; default is a plain linear map
    return {"eps.w": _uniform(rng, in_dim, (in_dim, 3))}


def predict_noise(h3d: Tensor, params: dict[str, Tensor]) -> Tensor:
    return T.matmul(h3d, params["eps.w"])


# -- composition ------------------------------------------------------------------


def total_loss(parts: LossParts, cfg: LossConfig,
               context: str = "") -> tuple[Tensor, LossReport]:
    """Combine the batch terms into the differentiable total and a report.

    Raises NonFiniteLoss naming the first offending term.
    """
    values = {}
    for name in ("l_skl", "l_jsmi", "l_2d", "l_3d", "l_2d_to_3d", "l_3d_to_2d"):
        value = getattr(parts, name).item()
        if not math.isfinite(value):
            raise NonFiniteLoss(name, context)
        values[name] = value

    l_mi_t = T.add(parts.l_skl, T.scale(parts.l_jsmi, -cfg.alpha))
    recon = T.add(
        T.add(T.add(parts.l_2d, parts.l_3d), parts.l_2d_to_3d), parts.l_3d_to_2d
    )
    total_t = T.add(l_mi_t, T.scale(recon, cfg.beta))

    l_mi, total = compose_total(cfg=cfg, **values)
    if not math.isfinite(total):
        raise NonFiniteLoss("total", context)
    report = LossReport(l_mi=l_mi, total=total, **values)
    return total_t, report

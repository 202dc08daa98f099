"""Full-model composition: both view encoders, cross-attention, latent heads,
and the per-molecule/per-batch training objective.

``prepare_molecule`` does all structure-dependent work once (subgraphs,
fragments, featurization, target matrices); the per-step forward then only
touches tensors, so repeated epochs stay cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .align import AlignParams, AttentionOutput, cross_attend
from .config import LossConfig, ModelConfig
from .encoders import (
    LatentPosterior,
    encode_view,
    init_egnn,
    init_gin,
    init_posterior_head,
    posterior_head,
    readout,
    view_features,
)
from .fragments import FragmentSet, Subgraph, brics_fragment, ego_network, radius_ball
from .losses import (
    LossParts,
    init_dist_head,
    init_js_scorer,
    init_noise_head,
    inject_noise,
    loss_2d_recon,
    loss_2d_to_3d,
    loss_3d_denoise,
    loss_3d_to_2d,
    predict_noise,
    skl_term,
)
from .molio import Molecule, ensure_coords
from .tensor import Tensor
from . import kernels


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """All learnable blocks, in the fixed declaration order used by
    checkpoints."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    params.update(init_gin(rng, "gin2d", cfg.feat_dim, cfg.hidden, cfg.depth))
    params.update(init_egnn(rng, "egnn3d", cfg.feat_dim, cfg.hidden, cfg.depth))
    two_h = 2 * cfg.hidden
    bound = 1.0 / np.sqrt(two_h)
    params["align.w2d"] = T.parameter(rng.uniform(-bound, bound, (two_h, cfg.proj)))
    params["align.w3d"] = T.parameter(rng.uniform(-bound, bound, (two_h, cfg.proj)))
    params.update(init_posterior_head(rng, "head2d", two_h, cfg.latent))
    params.update(init_posterior_head(rng, "head3d", two_h, cfg.latent))
    params.update(init_js_scorer(rng, cfg.latent))
    params.update(init_dist_head(rng, two_h, cfg.hidden))
    params.update(init_noise_head(rng, two_h))
    return params


def params_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {name: T.parameter(value) for name, value in arrays.items()}


@dataclass(frozen=True)
class PreparedMolecule:
    """Structure-dependent, parameter-independent per-molecule state."""

    mol: Molecule  # coords and edges_3d guaranteed present
    feats: np.ndarray  # (N, F), rows of removed nodes zeroed
    frags: FragmentSet
    egos: tuple[Subgraph, ...]
    balls: tuple[Subgraph, ...]
    adjacency: np.ndarray  # (N, N) binary
    dist: np.ndarray  # (N, N) clean interatomic distances

    @property
    def n_atoms(self) -> int:
        return self.mol.n_atoms


def prepare_molecule(
    mol: Molecule,
    cfg: ModelConfig,
    removed: frozenset[int] = frozenset(),
) -> PreparedMolecule:
    """Featurize and sample subgraphs once per molecule.

    ``removed`` implements node removal as feature-zeroing plus incident-edge
    dropping (the graph keeps its size); subgraphs and fragments are computed
    on the filtered graph.
    """
    mol = ensure_coords(mol, cfg.cutoff_3d)
    feats = view_features(mol, cfg)
    if removed:
        bonds = tuple(
            (i, j, o) for i, j, o in mol.bonds_2d if i not in removed and j not in removed
        )
        edges = tuple(
            (i, j) for i, j in mol.edges_3d if i not in removed and j not in removed
        )
        mol = replace(mol, bonds_2d=bonds, edges_3d=edges)
        feats = feats.copy()
        feats[sorted(removed)] = 0.0

    frags = brics_fragment(mol)
    egos = tuple(ego_network(mol, v, cfg.k_hop) for v in range(mol.n_atoms))
    balls = tuple(radius_ball(mol, v, cfg.ball_radius) for v in range(mol.n_atoms))
    dist = np.sqrt(np.maximum(kernels.pairwise_sq_dists(mol.coords), 0.0))
    return PreparedMolecule(
        mol=mol,
        feats=feats,
        frags=frags,
        egos=egos,
        balls=balls,
        adjacency=mol.adjacency(),
        dist=dist,
    )


@dataclass
class MoleculeForward:
    attention: AttentionOutput
    p2d: LatentPosterior
    p3d: LatentPosterior
    l_skl: Tensor
    l_2d: Tensor
    l_3d: Optional[Tensor]
    l_2d_to_3d: Tensor
    l_3d_to_2d: Tensor


def molecule_forward(
    prep: PreparedMolecule,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    loss_cfg: Optional[LossConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> MoleculeForward:
    """One molecule through both encoders, attention, heads, and the
    per-molecule loss terms.

    Training mode (``rng`` given) perturbs the 3D input coordinates with
    scaled Gaussian noise (graph structure stays anchored to the clean
    geometry), predicts the noise from the fused 3D rows, and samples the
    posteriors by reparameterization. Evaluation mode uses clean coordinates
    and posterior means.
    """
    loss_cfg = loss_cfg or LossConfig()
    train = rng is not None
    if train:
        noisy, eps_true = inject_noise(prep.mol.coords, loss_cfg.sigma_noise, rng)
        eps2d = rng.standard_normal((1, params["head2d.w_mu"].shape[1]))
        eps3d = rng.standard_normal((1, params["head3d.w_mu"].shape[1]))
        coords = noisy
    else:
        coords, eps_true, eps2d, eps3d = np.asarray(prep.mol.coords), None, None, None

    emb2d = encode_view(prep.mol, prep.frags, params, "2d", cfg,
                        feats=prep.feats, contexts=prep.egos)
    emb3d = encode_view(prep.mol, prep.frags, params, "3d", cfg,
                        feats=prep.feats, coords=coords, contexts=prep.balls)
    att = cross_attend(
        emb2d.fused, emb3d.fused,
        AlignParams(w2d=params["align.w2d"], w3d=params["align.w3d"]),
        cfg.temperature,
    )
    p2d = posterior_head(readout(att.h2d_attended), params, "head2d", eps=eps2d)
    p3d = posterior_head(readout(att.h3d_attended), params, "head3d", eps=eps3d)

    l_3d = None
    if train:
        eps_pred = predict_noise(emb3d.fused, params)
        l_3d = loss_3d_denoise(
            eps_true, eps_pred, np.zeros(prep.n_atoms, dtype=np.int64)
        )
    return MoleculeForward(
        attention=att,
        p2d=p2d,
        p3d=p3d,
        l_skl=skl_term(p2d, p3d),
        l_2d=loss_2d_recon(att.h2d_attended, prep.adjacency),
        l_3d=l_3d,
        l_2d_to_3d=loss_2d_to_3d(att.h2d_attended, prep.dist, params,
                                 loss_cfg.pair_norm),
        l_3d_to_2d=loss_3d_to_2d(att.h3d_attended, prep.adjacency),
    )


def batch_parts(
    preps: Sequence[PreparedMolecule],
    params: dict[str, Tensor],
    cfg: ModelConfig,
    loss_cfg: LossConfig,
    rng: np.random.Generator,
) -> LossParts:
    """Batch objective: per-molecule terms averaged, JS-MI over the batch of
    latent samples. Molecules are processed in the given order, which, with
    a seeded generator, makes the whole step deterministic."""
    from .losses import NonFiniteLoss, js_mi

    if len(preps) < 2:
        raise ValueError("batch must hold >= 2 molecules")
    per = {"l_skl": [], "l_2d": [], "l_3d": [], "l_2d_to_3d": [], "l_3d_to_2d": []}
    z2d_rows, z3d_rows = [], []
    for prep in preps:
        fwd = molecule_forward(prep, params, cfg, loss_cfg, rng)
        for name in per:
            term = getattr(fwd, name)
            if not np.isfinite(term.item()):
                raise NonFiniteLoss(name, f"molecule {prep.mol.id}")
            per[name].append(term)
        z2d_rows.append(fwd.p2d.sample)
        z3d_rows.append(fwd.p3d.sample)

    def avg(terms):
        return T.mean(T.concat(terms, axis=0))

    l_jsmi = js_mi(T.concat(z2d_rows, axis=0), T.concat(z3d_rows, axis=0), params)
    return LossParts(
        l_skl=avg(per["l_skl"]),
        l_jsmi=l_jsmi,
        l_2d=avg(per["l_2d"]),
        l_3d=avg(per["l_3d"]),
        l_2d_to_3d=avg(per["l_2d_to_3d"]),
        l_3d_to_2d=avg(per["l_3d_to_2d"]),
    )


# -- evaluation-time views -----------------------------------------------------


def embed(prep: PreparedMolecule, params: dict[str, Tensor], cfg: ModelConfig,
          mode: str = "full") -> np.ndarray:
    """Deterministic molecule embedding (posterior means).

    ``full``: concat of both views' latents after cross-attention.
    ``2d``: the 2D latent head on the un-attended 2D rows only; molecules
    identical in the bond graph embed identically regardless of geometry.
    """
    if mode == "2d":
        emb2d = encode_view(prep.mol, prep.frags, params, "2d", cfg,
                            feats=prep.feats, contexts=prep.egos)
        p = posterior_head(readout(emb2d.fused), params, "head2d")
        return p.mean.data.reshape(-1).copy()
    if mode != "full":
        raise ValueError(f"unknown embed mode {mode!r}")
    fwd = molecule_forward(prep, params, cfg)
    return np.concatenate(
        [fwd.p2d.mean.data.reshape(-1), fwd.p3d.mean.data.reshape(-1)]
    )


def attention_scores(prep: PreparedMolecule, params: dict[str, Tensor],
                     cfg: ModelConfig) -> np.ndarray:
    """Per-atom attention salience: the maximum cross-view weight assigned
    when the atom's 2D representation queries the 3D view."""
    fwd = molecule_forward(prep, params, cfg)
    return fwd.attention.xi.data.max(axis=1)

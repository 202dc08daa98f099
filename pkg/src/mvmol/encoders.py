"""View encoders: GIN message passing for the bond graph, an E(3)-equivariant
network for the geometric graph, subgraph readouts, FUSE, and the diagonal-
Gaussian latent heads.

Subgraphs are encoded on their disjoint union: each subgraph contributes its
own copies of the nodes, message passing runs on the union's induced edges,
and per-subgraph readouts fall out as segment sums. This keeps the per-
molecule op count small enough for pure-tensor training at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .fragments import FragmentSet, Subgraph, ego_network, radius_ball
from .molio import MissingCoordinates, Molecule, featurize, signed_volume_features
from .tensor import Tensor


class EmptyInput(ValueError):
    pass


@dataclass
class NodeEmbeddings:
    context: Tensor  # (N, h)
    semantics: Tensor  # (N, h)
    fused: Tensor  # (N, 2h) = [context | semantics]


@dataclass
class LatentPosterior:
    mean: Tensor  # (1, g)
    logvar: Tensor  # (1, g), clamped to [-8, 8]
    sample: Tensor  # (1, g); equals mean in eval mode
    eps: Optional[np.ndarray] = None  # recorded reparameterization noise


# -- parameter initialization ---------------------------------------------------


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return T.parameter(rng.uniform(-bound, bound, size=shape))


def _mlp_params(rng, name, dims) -> dict[str, Tensor]:
    out = {}
    for k, (a, b) in enumerate(zip(dims, dims[1:])):
        out[f"{name}.w{k}"] = _uniform(rng, a, (a, b))
        out[f"{name}.b{k}"] = _uniform(rng, a, (1, b))
    return out


def init_gin(rng, name: str, in_dim: int, width: int, depth: int) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for layer in range(depth):
        d_in = in_dim if layer == 0 else width
        params.update(_mlp_params(rng, f"{name}.layer{layer}", (d_in, width, width)))
        params[f"{name}.layer{layer}.eps"] = T.parameter(np.zeros((1, 1)))
    return params


def init_egnn(rng, name: str, in_dim: int, width: int, depth: int) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {name + ".w_in": _uniform(rng, in_dim, (in_dim, width))}
    params[name + ".b_in"] = _uniform(rng, in_dim, (1, width))
    for layer in range(depth):
        base = f"{name}.layer{layer}"
        params.update(_mlp_params(rng, base + ".edge", (2 * width + 1, width, width)))
        if layer < depth - 1:
            # the last layer's coordinate update could never reach an output
            # (only scalar features are read out), so it owns no weights
            params.update(_mlp_params(rng, base + ".coord", (width, width, 1)))
        params.update(_mlp_params(rng, base + ".node", (2 * width, width, width)))
    return params


def _mlp(params, name, x: Tensor, n_layers: int = 2) -> Tensor:
    for k in range(n_layers):
        x = T.add_rowvec(T.matmul(x, params[f"{name}.w{k}"]), params[f"{name}.b{k}"])
        if k < n_layers - 1:
            x = T.relu(x)
    return x


# -- union-graph bookkeeping ----------------------------------------------------


@dataclass
class SubgraphUnion:
    """Disjoint union of subgraphs with flattened node/edge index arrays."""

    node_map: np.ndarray  # union row -> parent atom index
    segments: np.ndarray  # union row -> subgraph id
    src: np.ndarray  # directed edges (both orientations)
    dst: np.ndarray
    inv_deg: np.ndarray  # (rows, 1); 1/degree with 1 for isolated rows
    n_subgraphs: int


def build_union(subgraphs: Sequence[Subgraph]) -> SubgraphUnion:
    node_map: list[int] = []
    segments: list[int] = []
    src: list[int] = []
    dst: list[int] = []
    offset = 0
    for sid, sub in enumerate(subgraphs):
        local = {node: offset + k for k, node in enumerate(sub.nodes)}
        node_map.extend(sub.nodes)
        segments.extend([sid] * len(sub.nodes))
        for i, j in sub.edges:
            a, b = local[i], local[j]
            src.extend((a, b))
            dst.extend((b, a))
        offset += len(sub.nodes)
    deg = np.zeros(offset, dtype=np.int64)
    for d in dst:
        deg[d] += 1
    inv_deg = 1.0 / np.maximum(deg, 1)
    return SubgraphUnion(
        node_map=np.asarray(node_map, dtype=np.int64),
        segments=np.asarray(segments, dtype=np.int64),
        src=np.asarray(src, dtype=np.int64),
        dst=np.asarray(dst, dtype=np.int64),
        inv_deg=inv_deg.reshape(-1, 1),
        n_subgraphs=len(subgraphs),
    )


# -- GIN ------------------------------------------------------------------------


def gin_stack(params, name: str, feats: Tensor, src, dst, depth: int) -> Tensor:
    """`depth` rounds of h <- MLP((1 + eps) h + sum_neighbors h)."""
    h = feats
    n = feats.shape[0]
    for layer in range(depth):
        base = f"{name}.layer{layer}"
        if len(src):
            agg = T.segment_sum(T.gather_rows(h, src), dst, n)
        else:
            agg = T.scale(h, 0.0)
        one_plus_eps = T.add_scalar(params[base + ".eps"], 1.0)
        pre = T.add(T.mul_scalar_tensor(h, one_plus_eps), agg)
        h = _mlp(params, base, pre)
    return h


def gin_forward(params, name: str, sub: Subgraph, feats: np.ndarray,
                depth: int) -> Tensor:
    """Encode one subgraph; row k corresponds to sub.nodes[k]."""
    local = {node: k for k, node in enumerate(sub.nodes)}
    if max(sub.nodes) >= feats.shape[0]:
        raise T.ShapeMismatch("subgraph node index outside feature matrix")
    src, dst = [], []
    for i, j in sub.edges:
        src.extend((local[i], local[j]))
        dst.extend((local[j], local[i]))
    x = T.constant(feats[list(sub.nodes)])
    return gin_stack(params, name, x,
                     np.asarray(src, dtype=np.int64),
                     np.asarray(dst, dtype=np.int64), depth)


# -- EGNN -----------------------------------------------------------------------


def egnn_stack(params, name: str, feats: Tensor, coords: Tensor, src, dst,
               inv_deg: np.ndarray, depth: int) -> tuple[Tensor, Tensor]:
    """Returns (invariant node features, equivariantly updated coordinates).

    Edge messages see only squared distances, so the scalar outputs are
    E(3)-invariant; coordinate updates are built from coordinate differences
    and thus transform with the input frame.
    """
    h = T.add_rowvec(T.matmul(feats, params[name + ".w_in"]), params[name + ".b_in"])
    x = coords
    n = h.shape[0]
    inv = T.constant(inv_deg)
    for layer in range(depth):
        base = f"{name}.layer{layer}"
        if len(src):
            h_src = T.gather_rows(h, src)
            h_dst = T.gather_rows(h, dst)
            xd = T.sub(T.gather_rows(x, dst), T.gather_rows(x, src))
            d2 = T.sum_rows(T.mul(xd, xd))
            m = _mlp(params, base + ".edge", T.concat([h_dst, h_src, d2], axis=1))
            if f"{base}.coord.w0" in params:
                w_e = _mlp(params, base + ".coord", m)
                x = T.add(
                    x, T.mul_colvec(T.segment_sum(T.mul_colvec(xd, w_e), dst, n), inv)
                )
            agg = T.segment_sum(m, dst, n)
        else:
            agg = T.scale(h, 0.0)
        h = T.add(h, _mlp(params, base + ".node", T.concat([h, agg], axis=1)))
    return h, x


def egnn_forward(params, name: str, sub: Subgraph, feats: np.ndarray,
                 coords: np.ndarray, depth: int) -> tuple[Tensor, Tensor]:
    """Encode one geometric subgraph; rows follow sub.nodes order."""
    if coords is None:
        raise MissingCoordinates("egnn_forward")
    if max(sub.nodes) >= feats.shape[0] or max(sub.nodes) >= coords.shape[0]:
        raise T.ShapeMismatch("subgraph node index outside inputs")
    union = build_union([sub])
    x = T.constant(feats[list(sub.nodes)])
    c = T.constant(coords[list(sub.nodes)])
    return egnn_stack(params, name, x, c, union.src, union.dst, union.inv_deg, depth)


# -- readout / fuse ---------------------------------------------------------------


def readout(node_embeds: Tensor) -> Tensor:
    """Permutation-invariant summation over rows: (m, h) -> (1, h)."""
    if node_embeds.shape[0] < 1:
        raise EmptyInput("readout needs at least one row")
    return T.sum_pool(node_embeds)


def fuse(context: Tensor, semantics: Tensor) -> Tensor:
    """Concatenate context and semantics (context first)."""
    if context.shape != semantics.shape:
        raise T.ShapeMismatch(f"fuse: {context.shape} vs {semantics.shape}")
    return T.concat([context, semantics], axis=1)


# -- full view encoding -----------------------------------------------------------


def view_features(mol: Molecule, cfg: ModelConfig) -> np.ndarray:
    x = featurize(mol)
    if cfg.signed_volume:
        x = np.concatenate([x, signed_volume_features(mol)], axis=1)
    return x


def encode_view(
    mol: Molecule,
    frags: FragmentSet,
    params: dict[str, Tensor],
    view: str,
    cfg: ModelConfig,
    feats: np.ndarray | None = None,
    coords: np.ndarray | None = None,
    contexts: Sequence[Subgraph] | None = None,
) -> NodeEmbeddings:
    """Per-node context/semantics/fused embeddings for one view.

    The context of node v is the readout over its ego-network (2D) or radius
    ball (3D); the semantics row is the readout over v's fragment, so nodes
    sharing a fragment share a semantics row. All subgraphs of the view are
    encoded in one disjoint union.
    """
    n = mol.n_atoms
    if feats is None:
        feats = view_features(mol, cfg)
    if view == "2d":
        name = "gin2d"
        if contexts is None:
            contexts = [ego_network(mol, v, cfg.k_hop) for v in range(n)]
        frag_subs = list(frags.fragments)
    elif view == "3d":
        name = "egnn3d"
        if coords is None:
            if mol.coords is None:
                raise MissingCoordinates(mol.id)
            coords = np.asarray(mol.coords)
        if contexts is None:
            contexts = [radius_ball(mol, v, cfg.ball_radius) for v in range(n)]
        # fragments share node sets across views but take the view's edges
        e3d = set(mol.edges_3d)
        frag_subs = [
            Subgraph(
                root=None,
                nodes=f.nodes,
                edges=tuple(
                    sorted(
                        (min(i, j), max(i, j))
                        for i, j in e3d
                        if i in f.nodes and j in f.nodes
                    )
                ),
                kind="fragment",
            )
            for f in frags.fragments
        ]
    else:
        raise ValueError(f"view must be '2d' or '3d', got {view!r}")

    union = build_union(list(contexts) + frag_subs)
    x = T.gather_rows(T.constant(feats), union.node_map)
    if view == "2d":
        h = gin_stack(params, name, x, union.src, union.dst, cfg.depth)
    else:
        c = T.gather_rows(T.constant(coords), union.node_map)
        h, _ = egnn_stack(params, name, x, c, union.src, union.dst,
                          union.inv_deg, cfg.depth)

    pooled = T.segment_sum(h, union.segments, union.n_subgraphs)
    # subgraphs were ordered [context(v=0..N-1), fragment(0..m-1)]
    ctx = T.gather_rows(pooled, np.arange(n, dtype=np.int64))
    frag_pool = T.gather_rows(pooled, n + np.arange(len(frag_subs), dtype=np.int64))
    sem = T.gather_rows(frag_pool, np.asarray(frags.assignment, dtype=np.int64))
    return NodeEmbeddings(context=ctx, semantics=sem, fused=fuse(ctx, sem))


# -- latent heads -----------------------------------------------------------------

LOGVAR_CLAMP = 8.0


_HEAD_INIT_SCALE = 0.125  # keeps initial logvar inside the clamp on sum-readouts


def init_posterior_head(rng, name: str, in_dim: int, latent: int) -> dict[str, Tensor]:
    # The latent heads consume sum-readouts whose entries are O(N); at the
    # standard 1/sqrt(fan) scale their logvar outputs saturate the clamp and
    # the initial divergence dwarfs every other objective, so these two
    # weight matrices start smaller.
    bound = _HEAD_INIT_SCALE / np.sqrt(in_dim)
    return {
        f"{name}.w_mu": T.parameter(rng.uniform(-bound, bound, (in_dim, latent))),
        f"{name}.b_mu": T.parameter(np.zeros((1, latent))),
        f"{name}.w_lv": T.parameter(rng.uniform(-bound, bound, (in_dim, latent))),
        f"{name}.b_lv": T.parameter(np.zeros((1, latent))),
    }


def posterior_head(
    graph_embed: Tensor,
    params: dict[str, Tensor],
    name: str,
    eps: np.ndarray | None = None,
) -> LatentPosterior:
    """Diagonal-Gaussian parameters from a graph embedding, with
    reparameterized sampling when ``eps`` is given (training) and the mean
    used as the sample otherwise (evaluation)."""
    mu = T.add_rowvec(T.matmul(graph_embed, params[f"{name}.w_mu"]),
                      params[f"{name}.b_mu"])
    logvar = T.clamp(
        T.add_rowvec(T.matmul(graph_embed, params[f"{name}.w_lv"]),
                     params[f"{name}.b_lv"]),
        -LOGVAR_CLAMP,
        LOGVAR_CLAMP,
    )
    if eps is None:
        sample = mu
    else:
        if eps.shape != mu.shape:
            raise T.ShapeMismatch(f"eps shape {eps.shape} != {mu.shape}")
        std = T.exp(T.scale(logvar, 0.5))
        sample = T.add(mu, T.mul(std, T.constant(eps)))
    return LatentPosterior(mean=mu, logvar=logvar, sample=sample, eps=eps)

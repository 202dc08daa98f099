"""Graph-distinguishability harness: 1d-WL color refinement, per-node
ego-network WL signatures, embedding-based pair testing with untrained
encoder ensembles, and generators for geometry-only isomer pairs.

WL color ids are canonicalized per iteration by sorting the distinct
signatures, so histograms from independently-refined graphs are directly
comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import ModelConfig
from .datasets import graph_molecule
from .fragments import ego_network
from .model import embed, init_params, prepare_molecule
from .molio import Molecule, ensure_coords

Histogram = tuple[tuple[int, int], ...]


class CoordsRequiredFor3dPairs(ValueError):
    pass


@dataclass(frozen=True)
class GraphPair:
    g1: Molecule
    g2: Molecule
    expected: str  # "isomorphic" | "non-isomorphic" | "isomer-pair"

    def __post_init__(self):
        if self.expected not in ("isomorphic", "non-isomorphic", "isomer-pair"):
            raise ValueError(f"bad expected kind {self.expected!r}")
        if self.g1.n_atoms != self.g2.n_atoms:
            raise ValueError("pairs under test must have equal atom counts")


# -- 1d-WL -----------------------------------------------------------------------


def _refine(n: int, neighbors: list[list[int]], colors: list[int],
            iterations: Optional[int]) -> list[int]:
    cap = iterations if iterations is not None else n
    for _ in range(max(cap, 0)):
        sigs = [
            (colors[v], tuple(sorted(colors[w] for w in neighbors[v])))
            for v in range(n)
        ]
        mapping = {sig: k for k, sig in enumerate(sorted(set(sigs)))}
        new_colors = [mapping[sig] for sig in sigs]
        if new_colors == colors:
            break
        colors = new_colors
    return colors


def _histogram(colors: Sequence[int]) -> Histogram:
    counts: dict[int, int] = {}
    for c in colors:
        counts[c] = counts.get(c, 0) + 1
    return tuple(sorted(counts.items()))


def wl1_refine(mol: Molecule, iterations: Optional[int] = None) -> Histogram:
    """Stable color histogram of iterative neighborhood refinement.

    Initial colors come from the atomic numbers, canonicalized by sorted
    order, so histograms of independently refined graphs are comparable.
    """
    n = mol.n_atoms
    elements = sorted({a.element for a in mol.atoms})
    colors = [elements.index(a.element) for a in mol.atoms]
    return _histogram(_refine(n, mol.neighbors(), colors, iterations))


def ego_wl_signature(mol: Molecule, k: int) -> tuple[Histogram, ...]:
    """Sorted multiset of per-root WL histograms over k-hop ego-networks."""
    if k < 1:
        raise ValueError("k must be >= 1")
    out = []
    elements = sorted({a.element for a in mol.atoms})
    for v in range(mol.n_atoms):
        sub = ego_network(mol, v, k)
        local = {node: i for i, node in enumerate(sub.nodes)}
        nbrs: list[list[int]] = [[] for _ in sub.nodes]
        for i, j in sub.edges:
            nbrs[local[i]].append(local[j])
            nbrs[local[j]].append(local[i])
        colors = [elements.index(mol.atoms[node].element) for node in sub.nodes]
        out.append(_histogram(_refine(len(sub.nodes), nbrs, colors, None)))
    return tuple(sorted(out))


# -- embedding-based pair testing ---------------------------------------------------


def _pair_with_coords(pair: GraphPair) -> tuple[Molecule, Molecule]:
    if pair.expected == "isomer-pair":
        if pair.g1.coords is None or pair.g2.coords is None:
            raise CoordsRequiredFor3dPairs(
                "isomer pairs carry real geometry; refusing to synthesize"
            )
        return pair.g1, pair.g2
    return ensure_coords(pair.g1), ensure_coords(pair.g2)


def embed_distinguish(
    pairs: Sequence[GraphPair],
    cfg: ModelConfig,
    tol: float = 1e-4,
    draws: int = 10,
    seed: int = 0,
    mode: str = "full",
) -> int:
    """Count pairs an untrained encoder ensemble fails to distinguish.

    A pair is distinguished when the infinity-norm gap between the two
    embeddings exceeds ``tol`` for a majority of ``draws`` random parameter
    initializations. Coordinate-free pairs get deterministic synthetic
    geometry; isomer pairs must carry their own.
    """
    params_ensemble = [init_params(cfg, seed + k) for k in range(draws)]
    undistinguished = 0
    for pair in pairs:
        g1, g2 = _pair_with_coords(pair)
        p1 = prepare_molecule(g1, cfg)
        p2 = prepare_molecule(g2, cfg)
        votes = 0
        for params in params_ensemble:
            z1 = embed(p1, params, cfg, mode=mode)
            z2 = embed(p2, params, cfg, mode=mode)
            if np.abs(z1 - z2).max() > tol:
                votes += 1
        if votes <= draws // 2:
            undistinguished += 1
    return undistinguished


# -- reference hard instances --------------------------------------------------------


def rook_graph_4x4() -> Molecule:
    """4x4 rook's graph: SRG(16, 6, 2, 2); contains 4-cliques."""
    edges = []
    for a in range(16):
        for b in range(a + 1, 16):
            if a // 4 == b // 4 or a % 4 == b % 4:
                edges.append((a, b))
    return graph_molecule(16, edges, "rook4x4")


def shrikhande_graph() -> Molecule:
    """Shrikhande graph: SRG(16, 6, 2, 2); locally a 6-cycle, no 4-clique."""
    deltas = {(1, 0), (3, 0), (0, 1), (0, 3), (1, 1), (3, 3)}
    edges = []
    for a in range(16):
        for b in range(a + 1, 16):
            d = ((a // 4 - b // 4) % 4, (a % 4 - b % 4) % 4)
            if d in deltas or (-d[0] % 4, -d[1] % 4) in deltas:
                edges.append((a, b))
    return graph_molecule(16, edges, "shrikhande")


def random_graph_pairs(count: int, seed: int = 0, n_max: int = 12) -> list[GraphPair]:
    """Random same-size graph pairs labeled by an exact isomorphism oracle."""
    import networkx as nx

    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < count:
        n = int(rng.integers(5, n_max + 1))
        m = int(rng.integers(n - 1, min(n * (n - 1) // 2, 2 * n) + 1))
        g1 = nx.gnm_random_graph(n, m, seed=int(rng.integers(1 << 31)))
        g2 = nx.gnm_random_graph(n, m, seed=int(rng.integers(1 << 31)))
        expected = (
            "isomorphic" if nx.is_isomorphic(g1, g2) else "non-isomorphic"
        )
        pairs.append(
            GraphPair(
                g1=graph_molecule(n, g1.edges(), f"rand{len(pairs)}a"),
                g2=graph_molecule(n, g2.edges(), f"rand{len(pairs)}b"),
                expected=expected,
            )
        )
    return pairs


# -- isomer generators -----------------------------------------------------------------

_SUBSTITUENTS = (6, 8, 9, 17, 35)  # C, O, F, Cl, Br


def make_cis_trans_pair(seed: int) -> GraphPair:
    """Same 2D graph, substituents on the same (cis) vs opposite (trans)
    side of a rigid double bond; distance matrices differ."""
    rng = np.random.default_rng(seed)
    s1, s2 = rng.choice(_SUBSTITUENTS, size=2)
    elements = [int(s1), 6, 6, int(s2)]
    bonds = [(0, 1, 1.0), (1, 2, 2.0), (2, 3, 1.0)]
    cc = 1.33 + rng.uniform(-0.02, 0.02)
    b1 = 1.40 + rng.uniform(-0.05, 0.05)
    b2 = 1.40 + rng.uniform(-0.05, 0.05)
    phi = math.radians(60.0 + rng.uniform(-5, 5))
    jitter = rng.normal(0.0, 0.01, size=(4, 3))

    def coords(same_side: bool):
        c1 = np.array([0.0, 0.0, 0.0])
        c2 = np.array([cc, 0.0, 0.0])
        # substituent 1 always points up-left; substituent 2 goes up-right
        # (cis, same side) or down-right (trans)
        sub1 = c1 + b1 * np.array([-math.cos(phi), math.sin(phi), 0.0])
        sign = 1.0 if same_side else -1.0
        sub2 = c2 + b2 * np.array([math.cos(phi), sign * math.sin(phi), 0.0])
        return np.stack([sub1, c1, c2, sub2]) + jitter

    from .datasets import _assemble
    from dataclasses import replace

    base = _assemble(elements, bonds, f"cistrans{seed}")
    cis = replace(base, id=f"cis{seed}", coords=coords(True))
    trans = replace(base, id=f"trans{seed}", coords=coords(False))
    return GraphPair(g1=cis, g2=trans, expected="isomer-pair")


def make_enantiomer_pair(seed: int) -> GraphPair:
    """Chiral-center template and its exact mirror image: identical 2D graph
    and identical distance matrices; only orientation-sensitive features can
    tell them apart."""
    rng = np.random.default_rng(seed)
    subs = rng.choice(_SUBSTITUENTS, size=4, replace=False)
    elements = [6] + [int(s) for s in subs]
    bonds = [(0, k, 1.0) for k in range(1, 5)]
    directions = np.array(
        [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float
    ) / math.sqrt(3)
    lengths = 1.35 + rng.uniform(0.0, 0.15, size=4)
    coords = np.zeros((5, 3))
    coords[1:] = directions * lengths[:, None]
    coords += rng.normal(0.0, 0.01, size=(5, 3))

    from .datasets import _assemble
    from dataclasses import replace

    base = _assemble(elements, bonds, f"chiral{seed}")
    left = replace(base, id=f"enantioL{seed}", coords=coords)
    mirrored = coords * np.array([-1.0, 1.0, 1.0])
    right = replace(base, id=f"enantioR{seed}", coords=mirrored)
    return GraphPair(g1=left, g2=right, expected="isomer-pair")


def isomer_suite(kind: str, count: int = 500, seed: int = 0) -> list[GraphPair]:
    maker = {"cistrans": make_cis_trans_pair, "enantiomer": make_enantiomer_pair}[kind]
    return [maker(seed * 1_000_003 + k) for k in range(count)]


# -- graph files -----------------------------------------------------------------------


def write_graph_file(path, mol: Molecule) -> None:
    lines = [str(mol.n_atoms)]
    lines += [f"{i} {j}" for i, j, _ in mol.bonds_2d]
    if mol.coords is not None:
        lines.append("coords:")
        lines += [f"{x} {y} {z}" for x, y, z in mol.coords]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_graph_file(path) -> Molecule:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    n = int(lines[0])
    edges = []
    coords = None
    idx = 1
    while idx < len(lines) and lines[idx] != "coords:":
        i, j = lines[idx].split()
        edges.append((int(i), int(j)))
        idx += 1
    if idx < len(lines) and lines[idx] == "coords:":
        rows = [tuple(map(float, ln.split())) for ln in lines[idx + 1 :]]
        if len(rows) != n:
            raise ValueError(f"expected {n} coordinate rows, got {len(rows)}")
        coords = np.asarray(rows)
    import os

    name = os.path.splitext(os.path.basename(str(path)))[0]
    return graph_molecule(n, edges, name, coords=coords)

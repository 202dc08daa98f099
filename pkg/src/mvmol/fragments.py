"""Subgraph families used as alignment anchors.

Two kinds of contextual subgraphs (k-hop ego-networks over bonds, r-Angstrom
balls over coordinates) plus semantic fragments from a BRICS-style bond
cleavage. The cleavage rules are a curated, transparent subset of the
classic retrosynthetic environments, expressed as predicates on the two
endpoints of a single acyclic bond; connected components after cleavage form
the fragment partition, so fragments are always disjoint and covering.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from .molio import MissingCoordinates, Molecule, ring_bond_set

SubgraphKind = Literal["ego2d", "ball3d", "fragment"]


class InvalidNode(ValueError):
    pass


@dataclass(frozen=True)
class Subgraph:
    root: Optional[int]
    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]
    kind: SubgraphKind

    def __post_init__(self):
        if not self.nodes:
            raise ValueError("subgraph must be non-empty")
        if self.kind != "fragment" and self.root not in self.nodes:
            raise ValueError("root must belong to the subgraph")


@dataclass(frozen=True)
class FragmentSet:
    fragments: tuple[Subgraph, ...]
    assignment: tuple[int, ...]  # node index -> fragment index


def _induced_edges(nodes: set[int], edges) -> tuple[tuple[int, int], ...]:
    return tuple(
        sorted((min(i, j), max(i, j)) for i, j in edges if i in nodes and j in nodes)
    )


def ego_network(mol: Molecule, v: int, k: int) -> Subgraph:
    """Induced subgraph on all nodes within k bond-hops of v."""
    if not (0 <= v < mol.n_atoms):
        raise InvalidNode(f"node {v} out of range")
    if k < 0:
        raise ValueError("k must be >= 0")
    nbrs = mol.neighbors()
    seen = {v}
    frontier = deque([(v, 0)])
    while frontier:
        node, depth = frontier.popleft()
        if depth == k:
            continue
        for w in nbrs[node]:
            if w not in seen:
                seen.add(w)
                frontier.append((w, depth + 1))
    edges = _induced_edges(seen, ((i, j) for i, j, _ in mol.bonds_2d))
    return Subgraph(root=v, nodes=tuple(sorted(seen)), edges=edges, kind="ego2d")


def radius_ball(mol: Molecule, v: int, r: float) -> Subgraph:
    """Nodes within r Angstrom of v; edges induced from edges_3d."""
    if mol.coords is None:
        raise MissingCoordinates(mol.id)
    if not (0 <= v < mol.n_atoms):
        raise InvalidNode(f"node {v} out of range")
    if r <= 0:
        raise ValueError("r must be positive")
    d = np.sqrt(((mol.coords - mol.coords[v]) ** 2).sum(axis=1))
    nodes = {int(i) for i in np.nonzero(d <= r)[0]}
    edges = _induced_edges(nodes, mol.edges_3d)
    return Subgraph(root=v, nodes=tuple(sorted(nodes)), edges=edges, kind="ball3d")


# -- BRICS-style cleavage rules ------------------------------------------------


def _has_double_bonded_o(mol: Molecule, i: int) -> bool:
    for a, b, order in mol.bonds_2d:
        if order == 2.0 and (
            (a == i and mol.atoms[b].element == 8)
            or (b == i and mol.atoms[a].element == 8)
        ):
            return True
    return False


def _carbonyl_c(mol, i, j):
    a = mol.atoms[i]
    return a.element == 6 and not a.aromatic and _has_double_bonded_o(mol, i)


def _ester_ether_o(mol, i, j):
    # oxygen of an ester linkage, seen from the acyl side
    a = mol.atoms[i]
    return a.element == 8 and not a.aromatic and a.degree >= 2


def _plain_ether_o(mol, i, j):
    # dialkyl ether oxygen: neither neighbor is a carbonyl carbon
    a = mol.atoms[i]
    if a.element != 8 or a.aromatic or a.degree < 2:
        return False
    for x, y, order in mol.bonds_2d:
        if order != 1.0:
            continue
        other = y if x == i else (x if y == i else None)
        if other is not None and _has_double_bonded_o(mol, other):
            return False
    return True


def _amine_n(mol, i, j):
    a = mol.atoms[i]
    return a.element == 7 and not a.aromatic and a.degree >= 2


def _plain_amine_n(mol, i, j):
    # amine nitrogen that is not part of an amide (no carbonyl-carbon nbr);
    # keeps the N on the alkyl side, mirroring the ester-oxygen convention
    if not _amine_n(mol, i, j):
        return False
    for x, y, order in mol.bonds_2d:
        if order != 1.0:
            continue
        other = y if x == i else (x if y == i else None)
        if other is not None and _has_double_bonded_o(mol, other):
            return False
    return True


def _thioether_s(mol, i, j):
    a = mol.atoms[i]
    return a.element == 16 and not a.aromatic and a.degree == 2


def _aliphatic_c_sub(mol, i, j):
    # substituted aliphatic carbon that is not itself a carbonyl carbon
    a = mol.atoms[i]
    return (
        a.element == 6
        and not a.aromatic
        and a.degree >= 2
        and not _has_double_bonded_o(mol, i)
    )


def _aromatic_atom(mol, i, j):
    return mol.atoms[i].aromatic


# (name, predicate on endpoint A, predicate on endpoint B); a single acyclic
# bond is cleaved when some rule matches in either orientation.
CLEAVAGE_RULES = (
    ("acyl-O", _carbonyl_c, _ester_ether_o),
    ("acyl-N", _carbonyl_c, _amine_n),
    ("C-N amine", _aliphatic_c_sub, _plain_amine_n),
    ("C-O ether", _aliphatic_c_sub, _plain_ether_o),
    ("C-S thioether", _aliphatic_c_sub, _thioether_s),
    ("aryl-aliphatic", _aromatic_atom, _aliphatic_c_sub),
    ("aryl-aryl", _aromatic_atom, _aromatic_atom),
)


def cleavable_bonds(mol: Molecule) -> list[tuple[int, int]]:
    """Single, acyclic bonds matched by the rule table."""
    ring = ring_bond_set(mol)
    out = []
    for i, j, order in mol.bonds_2d:
        if order != 1.0 or (i, j) in ring:
            continue
        for _, pa, pb in CLEAVAGE_RULES:
            if (pa(mol, i, j) and pb(mol, j, i)) or (pa(mol, j, i) and pb(mol, i, j)):
                out.append((i, j))
                break
    return out


def brics_fragment(mol: Molecule) -> FragmentSet:
    """Partition atoms into fragments by cleaving every rule-matched bond.

    A molecule with no cleavable bond yields a single whole-molecule
    fragment; disconnected inputs yield one fragment per component.
    """
    cleaved = set(cleavable_bonds(mol))
    keep = [(i, j) for i, j, _ in mol.bonds_2d if (i, j) not in cleaved]

    adj: list[list[int]] = [[] for _ in range(mol.n_atoms)]
    for i, j in keep:
        adj[i].append(j)
        adj[j].append(i)

    assignment = [-1] * mol.n_atoms
    components: list[list[int]] = []
    for start in range(mol.n_atoms):
        if assignment[start] != -1:
            continue
        comp_id = len(components)
        comp = []
        stack = [start]
        assignment[start] = comp_id
        while stack:
            v = stack.pop()
            comp.append(v)
            for w in adj[v]:
                if assignment[w] == -1:
                    assignment[w] = comp_id
                    stack.append(w)
        components.append(sorted(comp))

    fragments = tuple(
        Subgraph(
            root=None,
            nodes=tuple(comp),
            edges=_induced_edges(set(comp), keep),
            kind="fragment",
        )
        for comp in components
    )
    return FragmentSet(fragments=fragments, assignment=tuple(assignment))

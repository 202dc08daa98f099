"""Synthetic molecule corpora for tests, demos, and desk-scale experiments.

Everything here is seed-deterministic. Generated molecules stay inside the
supported SMILES subset so they round-trip through the parser.
"""

from __future__ import annotations

import numpy as np

from .molio import AtomFeature, Molecule, Record, parse_smiles, to_smiles

_HETERO = (7, 8, 16)  # N, O, S
_HALO = (9, 17, 35)  # F, Cl, Br


def _assemble(elements, bonds, mol_id, aromatic=frozenset(), charges=None):
    degrees = [0] * len(elements)
    for i, j, _ in bonds:
        degrees[i] += 1
        degrees[j] += 1
    ring = _ring_atoms(len(elements), bonds)
    charges = charges or {}
    atoms = tuple(
        AtomFeature(
            element=el,
            formal_charge=charges.get(k, 0),
            degree=degrees[k],
            aromatic=k in aromatic,
            in_ring=k in ring,
        )
        for k, el in enumerate(elements)
    )
    return Molecule(id=mol_id, atoms=atoms, bonds_2d=tuple(sorted(bonds)))


def _ring_atoms(n, bonds):
    from .molio import _find_ring_bonds

    return {i for ij in _find_ring_bonds(n, list(bonds)) for i in ij}


def random_molecule(rng: np.random.Generator, n_min: int = 4, n_max: int = 12,
                    mol_id: str = "") -> Molecule:
    """Random connected heavy-atom graph: a tree with occasional extra ring
    edge, heteroatoms, halogens, and scattered double bonds."""
    n = int(rng.integers(n_min, n_max + 1))
    elements = []
    for k in range(n):
        r = rng.random()
        if r < 0.70 or k == 0:
            elements.append(6)
        elif r < 0.90:
            elements.append(int(rng.choice(_HETERO)))
        else:
            elements.append(int(rng.choice(_HALO)))

    bonds: list[tuple[int, int, float]] = []
    degree = [0] * n
    for k in range(1, n):
        candidates = [
            m for m in range(k)
            if degree[m] < (1 if elements[m] in _HALO else 3)
        ]
        if not candidates:
            candidates = [k - 1]
        m = int(rng.choice(candidates))
        order = 2.0 if (rng.random() < 0.12 and elements[k] not in _HALO
                        and elements[m] not in _HALO) else 1.0
        bonds.append((m, k, order))
        degree[m] += 1
        degree[k] += 1

    if n >= 5 and rng.random() < 0.45:
        open_nodes = [
            k for k in range(n)
            if degree[k] < 3 and elements[k] not in _HALO
        ]
        rng.shuffle(open_nodes)
        existing = {(min(i, j), max(i, j)) for i, j, _ in bonds}
        for a in open_nodes:
            partners = [
                b for b in open_nodes
                if b > a + 1 and (a, b) not in existing
            ]
            if partners:
                b = int(rng.choice(partners))
                bonds.append((a, b, 1.0))
                break

    return _assemble(elements, bonds, mol_id or f"rand{rng.integers(1 << 30)}")


def random_smiles(rng: np.random.Generator) -> str:
    return to_smiles(random_molecule(rng))


def toy_corpus(n: int, seed: int = 0) -> list[Molecule]:
    """Unlabeled pre-training corpus of random molecules."""
    rng = np.random.default_rng(seed)
    return [random_molecule(rng, mol_id=f"toy{k:04d}") for k in range(n)]


def toy_records(n: int, seed: int = 0) -> list[Record]:
    return [Record(m.id, to_smiles(m)) for m in toy_corpus(n, seed)]


# -- planted-motif classification corpus --------------------------------------

MOTIF_SMILES = "C(=O)F"  # acyl fluoride: carbonyl carbon, =O, and F


def motif_corpus(n: int, seed: int = 0) -> list[tuple[Molecule, int, frozenset[int]]]:
    """Binary classification corpus where the positive class contains an acyl
    fluoride motif. Negatives carry decoys (plain carbonyls, detached
    fluorines) so the label is not readable from atom counts alone.

    Returns (molecule, label, ground-truth motif atom indices) triples.
    """
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        label = k % 2
        base = random_molecule(rng, n_min=5, n_max=10, mol_id=f"motif{k:04d}")
        elements = [a.element for a in base.atoms]
        bonds = list(base.bonds_2d)
        idx = len(elements)
        attach_candidates = [
            i for i, a in enumerate(base.atoms)
            if a.element == 6 and a.degree < 3
        ] or [0]
        attach = int(rng.choice(attach_candidates))
        if label == 1:
            # carbonyl carbon idx, =O at idx+1, F at idx+2
            elements += [6, 8, 9]
            bonds += [(attach, idx, 1.0), (idx, idx + 1, 2.0), (idx, idx + 2, 1.0)]
            motif = frozenset({idx, idx + 1, idx + 2})
        else:
            decoy = rng.random()
            if decoy < 0.5:
                # plain carbonyl, fluorine elsewhere
                elements += [6, 8, 9]
                far = int(rng.choice([
                    i for i in range(len(base.atoms))
                    if i != attach and base.atoms[i].element == 6
                    and base.atoms[i].degree < 3
                ] or [attach]))
                bonds += [(attach, idx, 1.0), (idx, idx + 1, 2.0), (far, idx + 2, 1.0)]
            else:
                # fluorine on a plain carbon, no carbonyl
                elements += [6, 9]
                bonds += [(attach, idx, 1.0), (idx, idx + 1, 1.0)]
            motif = frozenset()
        mol = _assemble(elements, bonds, f"motif{k:04d}")
        out.append((mol, label, motif))
    return out


def motif_records(n: int, seed: int = 0) -> list[Record]:
    return [
        Record(m.id, to_smiles(m), None, float(label))
        for m, label, _ in motif_corpus(n, seed)
    ]


def cycle_molecule(n: int, mol_id: str = "") -> Molecule:
    """All-carbon simple cycle C_n (single bonds)."""
    bonds = [(i, (i + 1) % n, 1.0) for i in range(n)]
    bonds = [(min(i, j), max(i, j), o) for i, j, o in bonds]
    return _assemble([6] * n, bonds, mol_id or f"C{n}cycle")


def disjoint_cycles(sizes: tuple[int, ...], mol_id: str = "") -> Molecule:
    """Disjoint union of all-carbon cycles (not SMILES-representable here)."""
    elements: list[int] = []
    bonds: list[tuple[int, int, float]] = []
    offset = 0
    for s in sizes:
        for i in range(s):
            bonds.append((offset + i, offset + (i + 1) % s, 1.0))
        elements += [6] * s
        offset += s
    bonds = [(min(i, j), max(i, j), o) for i, j, o in bonds]
    return _assemble(elements, bonds, mol_id or "cycles" + "x".join(map(str, sizes)))


def graph_molecule(n: int, edges, mol_id: str = "graph",
                   coords: np.ndarray | None = None) -> Molecule:
    """Wrap a plain (all-carbon, single-bond) graph as a Molecule."""
    bonds = tuple(sorted((min(i, j), max(i, j), 1.0) for i, j in edges))
    mol = _assemble([6] * n, list(bonds), mol_id)
    if coords is not None:
        from dataclasses import replace

        mol = replace(mol, coords=np.asarray(coords, dtype=np.float64))
    return mol


__all__ = [
    "MOTIF_SMILES",
    "cycle_molecule",
    "disjoint_cycles",
    "graph_molecule",
    "motif_corpus",
    "motif_records",
    "random_molecule",
    "random_smiles",
    "toy_corpus",
    "toy_records",
]

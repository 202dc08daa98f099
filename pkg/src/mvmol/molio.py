"""Molecule ingestion: SMILES parsing, XYZ coordinates, featurization.

The parser covers the organic subset (B, C, N, O, P, S, F, Cl, Br, I),
aromatic lowercase atoms, branches, ring closures (including %nn), bond
orders ``- = #``, and bracket atoms with charges. Hydrogens are implicit and
never become graph nodes. Stereo markers (``/ \\ @ @@``) are accepted and
recorded but do not alter the topology. Isotopes and wildcard atoms are
rejected.

Atom order is SMILES token order, so parsing is byte-deterministic.
"""

from __future__ import annotations

import base64
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from . import kernels

DEFAULT_CUTOFF_3D = 1.5  # Angstrom; radius-graph edge threshold

SYMBOL_TO_Z = {
    "B": 5, "C": 6, "N": 7, "O": 8, "F": 9,
    "P": 15, "S": 16, "Cl": 17, "Br": 35, "I": 53,
}
Z_TO_SYMBOL = {z: s for s, z in SYMBOL_TO_Z.items()}
AROMATIC_SYMBOLS = {"b", "c", "n", "o", "p", "s"}

# One-hot element classes for featurization: 15 named + "other" = 16 slots.
ELEMENT_CLASSES = (6, 7, 8, 16, 15, 9, 17, 35, 53, 5, 14, 34, 3, 11, 19)
FEATURE_DIM = len(ELEMENT_CLASSES) + 1 + 4  # one-hot + degree/charge/aromatic/ring


class ParseError(ValueError):
    """SMILES rejection; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class CountMismatch(ValueError):
    pass


class ElementMismatch(ValueError):
    def __init__(self, index: int):
        super().__init__(f"element mismatch at atom {index}")
        self.index = index


class MalformedLine(ValueError):
    def __init__(self, lineno: int, reason: str = ""):
        super().__init__(f"malformed XYZ line {lineno}: {reason}")
        self.lineno = lineno


class MissingCoordinates(ValueError):
    pass


@dataclass(frozen=True)
class AtomFeature:
    element: int
    formal_charge: int
    degree: int
    aromatic: bool
    in_ring: bool


@dataclass(frozen=True)
class Molecule:
    """Paired 2D/3D molecular graph.

    ``bonds_2d`` holds undirected (i, j, order) triples with i < j; aromatic
    bonds carry order 1.5. ``coords`` (N x 3, Angstrom) and the derived
    ``edges_3d`` are optional.
    """

    id: str
    atoms: tuple[AtomFeature, ...]
    bonds_2d: tuple[tuple[int, int, float], ...]
    coords: Optional[np.ndarray] = None
    edges_3d: tuple[tuple[int, int], ...] = ()
    stereo_marks: tuple[tuple[int, str], ...] = ()

    def __post_init__(self):
        n = len(self.atoms)
        for i, j, _ in self.bonds_2d:
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"bond index out of range: ({i}, {j})")
            if i == j:
                raise ValueError(f"self-loop bond at atom {i}")
        if self.coords is not None:
            coords = np.asarray(self.coords, dtype=np.float64)
            if coords.shape != (n, 3):
                raise ValueError(f"coords shape {coords.shape} != ({n}, 3)")
            coords.setflags(write=False)
            object.__setattr__(self, "coords", coords)
        elif self.edges_3d:
            raise ValueError("edges_3d require coords")

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def adjacency(self) -> np.ndarray:
        """Binary symmetric adjacency with zero diagonal."""
        a = np.zeros((self.n_atoms, self.n_atoms))
        for i, j, _ in self.bonds_2d:
            a[i, j] = a[j, i] = 1.0
        return a

    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.n_atoms)]
        for i, j, _ in self.bonds_2d:
            nbrs[i].append(j)
            nbrs[j].append(i)
        return [sorted(n) for n in nbrs]


def _find_ring_bonds(n: int, bonds: list[tuple[int, int, float]]) -> set[tuple[int, int]]:
    """Bonds that lie on a cycle = non-bridge edges (iterative Tarjan)."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for eid, (i, j, _) in enumerate(bonds):
        adj[i].append((j, eid))
        adj[j].append((i, eid))

    disc = [-1] * n
    low = [0] * n
    bridges: set[int] = set()
    timer = 0
    for start in range(n):
        if disc[start] != -1:
            continue
        stack = [(start, -1, iter(adj[start]))]
        disc[start] = low[start] = timer
        timer += 1
        while stack:
            v, in_edge, it = stack[-1]
            advanced = False
            for to, eid in it:
                if eid == in_edge:
                    continue
                if disc[to] == -1:
                    disc[to] = low[to] = timer
                    timer += 1
                    stack.append((to, eid, iter(adj[to])))
                    advanced = True
                    break
                low[v] = min(low[v], disc[to])
            if not advanced:
                stack.pop()
                if stack:
                    parent = stack[-1][0]
                    low[parent] = min(low[parent], low[v])
                    if low[v] > disc[parent]:
                        bridges.add(in_edge)
    return {
        (min(i, j), max(i, j))
        for eid, (i, j, _) in enumerate(bonds)
        if eid not in bridges
    }


def ring_bond_set(mol: Molecule) -> set[tuple[int, int]]:
    return _find_ring_bonds(mol.n_atoms, list(mol.bonds_2d))


@dataclass
class _RawAtom:
    element: int
    aromatic: bool
    charge: int
    offset: int


def parse_smiles(smiles: str, mol_id: str = "") -> Molecule:
    """Parse a SMILES string from the supported subset into a Molecule."""
    if not smiles:
        raise ParseError("empty SMILES", 0)

    atoms: list[_RawAtom] = []
    bonds: dict[tuple[int, int], float] = {}
    stereo: list[tuple[int, str]] = []
    branch_stack: list[int] = []
    ring_open: dict[int, tuple[int, Optional[float], int]] = {}
    prev: Optional[int] = None
    pending_order: Optional[float] = None
    pending_offset = 0

    def add_atom(raw: _RawAtom) -> None:
        nonlocal prev, pending_order
        idx = len(atoms)
        atoms.append(raw)
        if prev is not None:
            _add_bond(prev, idx, pending_order, raw.offset)
        prev = idx
        pending_order = None

    def _add_bond(i: int, j: int, order: Optional[float], offset: int) -> None:
        if i == j:
            raise ParseError("self-loop bond", offset)
        key = (min(i, j), max(i, j))
        if key in bonds:
            raise ParseError("duplicate bond", offset)
        if order is None:
            # unspecified bond between two aromatic atoms becomes aromatic
            # only if it turns out to be a ring bond (resolved below)
            order = -1.0 if atoms[i].aromatic and atoms[j].aromatic else 1.0
        bonds[key] = order

    pos = 0
    n = len(smiles)
    while pos < n:
        ch = smiles[pos]
        if ch in "-=#":
            if pending_order is not None:
                raise ParseError("two bond symbols in a row", pos)
            pending_order = {"-": 1.0, "=": 2.0, "#": 3.0}[ch]
            pending_offset = pos
            pos += 1
        elif ch in "/\\":
            stereo.append((pos, ch))
            pos += 1
        elif ch == "(":
            if prev is None:
                raise ParseError("branch before any atom", pos)
            branch_stack.append(prev)
            pos += 1
        elif ch == ")":
            if not branch_stack:
                raise ParseError("unmatched ')'", pos)
            prev = branch_stack.pop()
            pos += 1
        elif ch.isdigit() or ch == "%":
            if ch == "%":
                if pos + 2 >= n or not smiles[pos + 1 : pos + 3].isdigit():
                    raise ParseError("'%' needs two digits", pos)
                num = int(smiles[pos + 1 : pos + 3])
                width = 3
            else:
                num = int(ch)
                width = 1
            if prev is None:
                raise ParseError("ring closure before any atom", pos)
            if num in ring_open:
                other, open_order, _ = ring_open.pop(num)
                order = pending_order if pending_order is not None else open_order
                _add_bond(other, prev, order, pos)
            else:
                ring_open[num] = (prev, pending_order, pos)
            pending_order = None
            pos += width
        elif ch == "[":
            raw, width = _parse_bracket(smiles, pos, stereo)
            add_atom(raw)
            pos += width
        elif ch == ".":
            raise ParseError("disconnected components ('.') unsupported", pos)
        elif ch == "*":
            raise ParseError("wildcard atoms unsupported", pos)
        else:
            two = smiles[pos : pos + 2]
            if two in ("Cl", "Br"):
                add_atom(_RawAtom(SYMBOL_TO_Z[two], False, 0, pos))
                pos += 2
            elif ch in SYMBOL_TO_Z:
                add_atom(_RawAtom(SYMBOL_TO_Z[ch], False, 0, pos))
                pos += 1
            elif ch in AROMATIC_SYMBOLS:
                add_atom(_RawAtom(SYMBOL_TO_Z[ch.upper()], True, 0, pos))
                pos += 1
            else:
                raise ParseError(f"unknown element symbol {ch!r}", pos)

    if branch_stack:
        raise ParseError("unclosed '('", n)
    if ring_open:
        first = min(off for (_, _, off) in ring_open.values())
        raise ParseError("unclosed ring bond", first)
    if pending_order is not None:
        raise ParseError("dangling bond symbol", pending_offset)

    bond_list = sorted((i, j, order) for (i, j), order in bonds.items())
    degrees = [0] * len(atoms)
    for i, j, _ in bond_list:
        degrees[i] += 1
        degrees[j] += 1
    ring_bonds = _find_ring_bonds(len(atoms), bond_list)
    ring_atoms = {i for ij in ring_bonds for i in ij}
    bond_list = [
        (i, j, (1.5 if (i, j) in ring_bonds else 1.0) if order == -1.0 else order)
        for i, j, order in bond_list
    ]

    features = tuple(
        AtomFeature(
            element=a.element,
            formal_charge=a.charge,
            degree=degrees[idx],
            aromatic=a.aromatic,
            in_ring=idx in ring_atoms,
        )
        for idx, a in enumerate(atoms)
    )
    return Molecule(
        id=mol_id or smiles,
        atoms=features,
        bonds_2d=tuple(bond_list),
        stereo_marks=tuple(stereo),
    )


def _parse_bracket(smiles: str, start: int, stereo: list) -> tuple[_RawAtom, int]:
    end = smiles.find("]", start)
    if end == -1:
        raise ParseError("unclosed '['", start)
    body = smiles[start + 1 : end]
    pos = 0
    if not body:
        raise ParseError("empty brackets", start)
    if body[0].isdigit():
        raise ParseError("isotopes unsupported", start + 1)

    aromatic = False
    two = body[pos : pos + 2]
    if two in ("Cl", "Br"):
        element = SYMBOL_TO_Z[two]
        pos += 2
    elif body[pos] in SYMBOL_TO_Z:
        element = SYMBOL_TO_Z[body[pos]]
        pos += 1
    elif body[pos] in AROMATIC_SYMBOLS:
        element = SYMBOL_TO_Z[body[pos].upper()]
        aromatic = True
        pos += 1
    elif body[pos] == "H":
        raise ParseError("explicit hydrogen atoms unsupported", start + 1)
    else:
        raise ParseError(f"unknown element symbol {body[pos]!r}", start + 1)

    while pos < len(body) and body[pos] == "@":
        stereo.append((start + 1 + pos, "@"))
        pos += 1
    if pos < len(body) and body[pos] == "H":
        pos += 1
        while pos < len(body) and body[pos].isdigit():
            pos += 1

    charge = 0
    if pos < len(body) and body[pos] in "+-":
        sign = 1 if body[pos] == "+" else -1
        symbol = body[pos]
        pos += 1
        if pos < len(body) and body[pos].isdigit():
            num = 0
            while pos < len(body) and body[pos].isdigit():
                num = num * 10 + int(body[pos])
                pos += 1
            charge = sign * num
        else:
            charge = sign
            while pos < len(body) and body[pos] == symbol:
                charge += sign
                pos += 1
    if pos != len(body):
        raise ParseError(f"unsupported bracket content {body[pos:]!r}", start + 1 + pos)
    return _RawAtom(element, aromatic, charge, start), end - start + 1


def to_smiles(mol: Molecule) -> str:
    """Emit a SMILES string for a connected molecule (DFS spanning tree)."""
    n = mol.n_atoms
    if n == 0:
        raise ValueError("empty molecule")
    order = {(min(i, j), max(i, j)): o for i, j, o in mol.bonds_2d}
    nbrs = mol.neighbors()

    visited = [False] * n
    ring_digit: dict[tuple[int, int], int] = {}
    next_digit = [1]
    closures: dict[int, list[tuple[int, float]]] = {i: [] for i in range(n)}

    # Assign ring-closure digits to non-tree edges found during DFS.
    parent = [-1] * n
    stack = [0]
    visited[0] = True
    tree_children: dict[int, list[int]] = {i: [] for i in range(n)}
    seen_edges: set[tuple[int, int]] = set()
    dfs_order = []
    while stack:
        v = stack.pop()
        dfs_order.append(v)
        for w in reversed(nbrs[v]):
            key = (min(v, w), max(v, w))
            if not visited[w]:
                visited[w] = True
                parent[w] = v
                tree_children[v].append(w)
                seen_edges.add(key)
                stack.append(w)
            elif key not in seen_edges:
                seen_edges.add(key)
                digit = next_digit[0]
                next_digit[0] += 1
                if digit > 99:
                    raise ValueError("too many ring closures")
                ring_digit[key] = digit
                closures[v].append((digit, order[key]))
                closures[w].append((digit, order[key]))
    if not all(visited):
        raise ValueError("to_smiles requires a connected molecule")

    def atom_token(idx: int) -> str:
        a = mol.atoms[idx]
        sym = Z_TO_SYMBOL[a.element]
        if a.aromatic:
            sym = sym.lower()
        if a.formal_charge == 0:
            return sym if len(sym) <= 2 else f"[{sym}]"
        q = a.formal_charge
        sign = "+" if q > 0 else "-"
        mag = "" if abs(q) == 1 else str(abs(q))
        return f"[{sym}{sign}{mag}]"

    def bond_token(i: int, j: int) -> str:
        o = order[(min(i, j), max(i, j))]
        if o == 2.0:
            return "="
        if o == 3.0:
            return "#"
        return ""

    def closure_tokens(idx: int) -> str:
        parts = []
        for digit, o in closures[idx]:
            b = {2.0: "=", 3.0: "#"}.get(o, "")
            parts.append(f"{b}%{digit:02d}" if digit > 9 else f"{b}{digit}")
        return "".join(parts)

    out: list[str] = []

    def emit(v: int) -> None:
        out.append(atom_token(v))
        out.append(closure_tokens(v))
        kids = tree_children[v]
        for w in kids[:-1]:
            out.append("(" + bond_token(v, w))
            emit(w)
            out.append(")")
        for w in kids[-1:]:
            out.append(bond_token(v, w))
            emit(w)

    import sys

    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, 10 * n + 100))
    try:
        emit(0)
    finally:
        sys.setrecursionlimit(old_limit)
    return "".join(out)


# -- XYZ ----------------------------------------------------------------------


def load_xyz(text: str, mol: Molecule) -> Molecule:
    """Attach coordinates from an XYZ block; element symbols must match."""
    lines = text.splitlines()
    if not lines:
        raise MalformedLine(1, "empty block")
    try:
        count = int(lines[0].strip())
    except ValueError:
        raise MalformedLine(1, "expected atom count") from None
    if count != mol.n_atoms:
        raise CountMismatch(f"XYZ has {count} atoms, molecule has {mol.n_atoms}")
    if len(lines) < count + 2:
        raise MalformedLine(len(lines) + 1, "truncated block")

    coords = np.zeros((count, 3))
    for i in range(count):
        lineno = i + 3
        parts = lines[i + 2].split()
        if len(parts) < 4:
            raise MalformedLine(lineno, "expected 'symbol x y z'")
        sym = parts[0]
        if SYMBOL_TO_Z.get(sym) != mol.atoms[i].element:
            raise ElementMismatch(i)
        try:
            coords[i] = [float(x) for x in parts[1:4]]
        except ValueError:
            raise MalformedLine(lineno, "non-numeric coordinate") from None
    return replace(mol, coords=coords, edges_3d=())


def to_xyz(mol: Molecule, comment: str = "") -> str:
    if mol.coords is None:
        raise MissingCoordinates(mol.id)
    lines = [str(mol.n_atoms), comment]
    for a, row in zip(mol.atoms, mol.coords):
        lines.append(f"{Z_TO_SYMBOL[a.element]} {row[0]:.6f} {row[1]:.6f} {row[2]:.6f}")
    return "\n".join(lines)


def build_radius_graph(mol: Molecule, cutoff: float = DEFAULT_CUTOFF_3D) -> Molecule:
    """Derive edges_3d: all unordered pairs within ``cutoff`` Angstrom."""
    if mol.coords is None:
        raise MissingCoordinates(mol.id)
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    d2 = kernels.pairwise_sq_dists(mol.coords)
    limit = cutoff * cutoff
    edges = tuple(
        (i, j)
        for i in range(mol.n_atoms)
        for j in range(i + 1, mol.n_atoms)
        if d2[i, j] <= limit
    )
    return replace(mol, edges_3d=edges)


# -- featurization ------------------------------------------------------------


def featurize(mol: Molecule) -> np.ndarray:
    """Per-atom feature rows: element one-hot (15 classes + other), degree/4,
    formal charge, aromatic flag, ring flag. Shape (N, 20)."""
    x = np.zeros((mol.n_atoms, FEATURE_DIM))
    for i, a in enumerate(mol.atoms):
        try:
            slot = ELEMENT_CLASSES.index(a.element)
        except ValueError:
            slot = len(ELEMENT_CLASSES)
        x[i, slot] = 1.0
        x[i, -4] = a.degree / 4.0
        x[i, -3] = float(a.formal_charge)
        x[i, -2] = 1.0 if a.aromatic else 0.0
        x[i, -1] = 1.0 if a.in_ring else 0.0
    return x


def signed_volume_features(mol: Molecule) -> np.ndarray:
    """Orientation-sensitive per-atom scalar: normalized triple product of the
    first three neighbor displacement vectors (neighbors in index order).
    Flips sign under reflection, so it separates mirror geometries that
    distance-based features cannot. Zero for atoms with fewer than three
    neighbors."""
    if mol.coords is None:
        raise MissingCoordinates(mol.id)
    out = np.zeros((mol.n_atoms, 1))
    nbrs = mol.neighbors()
    for i, nb in enumerate(nbrs):
        if len(nb) < 3:
            continue
        a, b, c = (mol.coords[j] - mol.coords[i] for j in nb[:3])
        vol = float(np.dot(a, np.cross(b, c)))
        norm = float(np.linalg.norm(a) * np.linalg.norm(b) * np.linalg.norm(c))
        out[i, 0] = vol / (norm + 1e-12)
    return out


# -- synthetic coordinates ----------------------------------------------------

_SPRING_REST = 1.2
_SPRING_ITERS = 200
_JITTER_XY = 0.06
_JITTER_Z = 0.15


def synthesize_coords(mol: Molecule) -> Molecule:
    """Deterministic pseudo-3D coordinates for molecules without conformers.

    Planar spring relaxation of the bond graph (rest length 1.2 A with
    all-pairs repulsion), then a per-atom jitter whose RNG is seeded by the
    atom index, which breaks planarity and ties to nothing run-specific.
    """
    n = mol.n_atoms
    if n == 1:
        pos = np.zeros((1, 2))
    else:
        radius = max(1.0, _SPRING_REST * n / (2 * math.pi) * 1.6)
        angles = 2 * math.pi * np.arange(n) / n
        pos = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        bonds = [(i, j) for i, j, _ in mol.bonds_2d]
        bonded = np.zeros((n, n), dtype=bool)
        for i, j in bonds:
            bonded[i, j] = bonded[j, i] = True
        for _ in range(_SPRING_ITERS):
            force = np.zeros_like(pos)
            diff = pos[:, None, :] - pos[None, :, :]
            dist = np.sqrt((diff * diff).sum(axis=2)) + 1e-9
            rep = 0.35 / (dist * dist)
            np.fill_diagonal(rep, 0.0)
            rep[bonded] = 0.0  # springs alone set bond lengths
            force += (diff / dist[:, :, None] * rep[:, :, None]).sum(axis=1)
            for i, j in bonds:
                d = dist[i, j]
                pull = 2.0 * (d - _SPRING_REST) * diff[i, j] / d
                force[i] -= pull
                force[j] += pull
            step = np.clip(0.08 * force, -0.3, 0.3)
            pos = pos + step

    coords = np.zeros((n, 3))
    coords[:, :2] = pos
    for i in range(n):
        rng = np.random.default_rng(100003 + 7919 * i)
        eps = rng.standard_normal(3)
        coords[i] += eps * np.array([_JITTER_XY, _JITTER_XY, _JITTER_Z])
    return replace(mol, coords=coords, edges_3d=())


def ensure_coords(mol: Molecule, cutoff: float = DEFAULT_CUTOFF_3D) -> Molecule:
    """Guarantee coords and edges_3d, synthesizing coordinates if needed."""
    m = mol if mol.coords is not None else synthesize_coords(mol)
    if not m.edges_3d:
        m = build_radius_graph(m, cutoff)
    return m


def permute_molecule(mol: Molecule, perm: list[int]) -> Molecule:
    """Relabel atoms: new index of old atom i is perm[i]."""
    n = mol.n_atoms
    if sorted(perm) != list(range(n)):
        raise ValueError("perm must be a permutation of atom indices")
    atoms = [None] * n
    for i, a in enumerate(mol.atoms):
        atoms[perm[i]] = a
    bonds = tuple(
        sorted(
            (min(perm[i], perm[j]), max(perm[i], perm[j]), o)
            for i, j, o in mol.bonds_2d
        )
    )
    coords = None
    if mol.coords is not None:
        coords = np.zeros_like(mol.coords)
        for i in range(n):
            coords[perm[i]] = mol.coords[i]
    edges = tuple(
        sorted((min(perm[i], perm[j]), max(perm[i], perm[j])) for i, j in mol.edges_3d)
    )
    return Molecule(
        id=mol.id,
        atoms=tuple(atoms),
        bonds_2d=bonds,
        coords=coords,
        edges_3d=edges,
        stereo_marks=mol.stereo_marks,
    )


# -- dataset files ------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    id: str
    smiles: str
    xyz: Optional[str] = None
    label: Optional[float] = None


def parse_record_line(line: str, lineno: int) -> Record:
    parts = line.rstrip("\n").split("\t")
    if len(parts) < 2 or not parts[0] or not parts[1]:
        raise ValueError(f"line {lineno}: expected 'id<TAB>smiles[...]'")
    xyz = None
    label = None
    if len(parts) >= 3 and parts[2]:
        xyz = base64.b64decode(parts[2]).decode("utf-8")
    if len(parts) >= 4 and parts[3]:
        label = float(parts[3])
    return Record(parts[0], parts[1], xyz, label)


def load_records(path) -> list[Record]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                records.append(parse_record_line(line, lineno))
    return records


def record_to_molecule(rec: Record) -> Molecule:
    mol = parse_smiles(rec.smiles, mol_id=rec.id)
    if rec.xyz is not None:
        mol = load_xyz(rec.xyz, mol)
    return mol


def write_records(path, records: Iterable[Record]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            parts = [rec.id, rec.smiles]
            if rec.xyz is not None or rec.label is not None:
                parts.append(
                    base64.b64encode(rec.xyz.encode()).decode() if rec.xyz else ""
                )
            if rec.label is not None:
                parts.append(repr(rec.label))
            fh.write("\t".join(parts) + "\n")

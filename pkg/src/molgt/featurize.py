"""Numeric featurization of molecular graphs.

Produces the three encoder inputs: a node feature matrix X (n x 115), a
dense directed edge feature tensor E (n x n x 12, zero off-bond), and the
all-pairs shortest-path hop matrix A (n x n, capped).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .smiles import (
    AROMATIC,
    ATOMIC_NUMBER,
    BOND_ORDER_VALUE,
    DOUBLE,
    ORGANIC_SUBSET,
    SINGLE,
    TRIPLE,
    Atom,
    Bond,
    MolGraph,
)

F_NODE = 115
F_EDGE = 12
MAX_ATOMS = 100
DEFAULT_DISTANCE_CAP = 10

# offsets into the 115-entry atom vector
_ATOM_TYPE_SLOTS = 101  # atomic number 1..100, last slot = unknown
_HYBRID_SLOTS = 6       # sp, sp2, sp3, sp3d, sp3d2, unknown
NUM_H_SLOT = 107
DEGREE_SLOT = 108
FORMAL_CHARGE_SLOT = 109
VALENCE_SLOT = 110
GASTEIGER_SLOT = 111        # zero-filled; see feature override sidecar
GASTEIGER_H_SLOT = 112      # zero-filled
AROMATIC_SLOT = 113
IN_RING_SLOT = 114

_BOND_TYPE_INDEX = {SINGLE: 0, DOUBLE: 1, TRIPLE: 2, AROMATIC: 3}


class TooManyAtoms(ValueError):
    """Molecule exceeds the 100-atom ingestion cap."""


@dataclass
class FeaturizedGraph:
    X: np.ndarray           # (n, 115) float64
    E: np.ndarray           # (n, n, 12) float64, zero at non-bonded pairs
    A: np.ndarray           # (n, n) int64 hop distances, capped
    n: int


def atom_features(a: Atom, g: MolGraph) -> np.ndarray:
    v = np.zeros(F_NODE)
    z = ATOMIC_NUMBER.get(a.element, 0)
    v[z - 1 if 1 <= z <= 100 else _ATOM_TYPE_SLOTS - 1] = 1.0
    v[_ATOM_TYPE_SLOTS + _hybridization(a, g)] = 1.0
    v[NUM_H_SLOT] = a.total_h
    v[DEGREE_SLOT] = a.degree
    v[FORMAL_CHARGE_SLOT] = a.formal_charge
    v[VALENCE_SLOT] = _order_sum(a, g) + a.total_h
    v[AROMATIC_SLOT] = float(a.aromatic)
    v[IN_RING_SLOT] = float(a.in_ring)
    return v


def _order_sum(a: Atom, g: MolGraph) -> float:
    return sum(
        BOND_ORDER_VALUE[b.order] for b in g.bonds if a.index in (b.src, b.dst)
    )


def _hybridization(a: Atom, g: MolGraph) -> int:
    """Slot 0..5 = sp, sp2, sp3, sp3d, sp3d2, unknown."""
    if a.element not in ORGANIC_SUBSET:
        return 5
    doubles = triples = 0
    for b in g.bonds:
        if a.index in (b.src, b.dst):
            if b.order == DOUBLE:
                doubles += 1
            elif b.order == TRIPLE:
                triples += 1
    valence = _order_sum(a, g) + a.total_h
    if a.element in ("P", "S"):
        if valence == 5:
            return 3
        if valence == 6:
            return 4
    if triples >= 1 or doubles >= 2:
        return 0
    if doubles == 1 or a.aromatic:
        return 1
    return 2


def bond_features(b: Bond) -> np.ndarray:
    v = np.zeros(F_EDGE)
    v[_BOND_TYPE_INDEX[b.order]] = 1.0
    v[4] = 1.0  # stereo one-hot: always the "none" slot
    v[10] = float(b.in_ring)
    v[11] = float(b.conjugated)
    return v


def shortest_paths(g: MolGraph, cap: int = DEFAULT_DISTANCE_CAP) -> np.ndarray:
    """BFS hop counts between all atom pairs; unreachable pairs and
    distances beyond the cap clamp to cap. Diagonal is zero."""
    n = g.n_atoms
    A = np.full((n, n), cap, dtype=np.int64)
    for start in range(n):
        A[start, start] = 0
        queue = deque([start])
        dist = {start: 0}
        while queue:
            u = queue.popleft()
            if dist[u] >= cap:
                continue
            for v in g.adjacency[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    A[start, v] = min(dist[v], cap)
                    queue.append(v)
    return A


def build_featurized(g: MolGraph, distance_cap: int = DEFAULT_DISTANCE_CAP) -> FeaturizedGraph:
    """Assemble X, E and A for one molecule; raises TooManyAtoms over 100."""
    n = g.n_atoms
    if n > MAX_ATOMS:
        raise TooManyAtoms(f"{n} atoms exceeds the {MAX_ATOMS}-atom cap")
    X = np.zeros((n, F_NODE))
    for a in g.atoms:
        X[a.index] = atom_features(a, g)
    E = np.zeros((n, n, F_EDGE))
    for b in g.bonds:
        fv = bond_features(b)
        E[b.src, b.dst] = fv
        E[b.dst, b.src] = fv
    return FeaturizedGraph(X=X, E=E, A=shortest_paths(g, distance_cap), n=n)

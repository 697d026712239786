"""SMILES parsing into attributed molecular graphs.

Supports the organic subset (B C N O P S F Cl Br I), lowercase aromatic
atoms (b c n o p s), bracket atoms with isotope/charge/H-count, bond
symbols - = # :, branches, ring closures (digits and %nn) and dot-separated
fragments. Stereo markers (/ \\ @ @@) are consumed and discarded. Implicit
hydrogens are filled from standard valences; ring membership is perceived
by cycle detection; molecular frameworks (ring systems plus linkers) can be
extracted and hashed into permutation-invariant grouping keys.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

SINGLE = "single"
DOUBLE = "double"
TRIPLE = "triple"
AROMATIC = "aromatic"

BOND_ORDER_VALUE = {SINGLE: 1.0, DOUBLE: 2.0, TRIPLE: 3.0, AROMATIC: 1.5}

# Element symbols indexed by atomic number 1..100.
_SYMBOLS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca "
    "Sc Ti V Cr Mn Fe Co Ni Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr "
    "Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce Pr Nd "
    "Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg "
    "Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm"
).split()
ATOMIC_NUMBER = {sym: z for z, sym in enumerate(_SYMBOLS, start=1)}

ORGANIC_SUBSET = {"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"}
AROMATIC_SUBSET = {"b", "c", "n", "o", "p", "s"}

# Standard valences used to fill implicit hydrogens. Multi-valent elements
# list alternatives in increasing order.
STANDARD_VALENCES = {
    "B": (3,),
    "C": (4,),
    "N": (3,),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}

_BOND_SYMBOLS = {"-": SINGLE, "=": DOUBLE, "#": TRIPLE, ":": AROMATIC}


class SmilesError(ValueError):
    """Parse failure with the byte offset where it was detected."""

    def __init__(self, message: str, text: str, offset: int):
        super().__init__(f"{message} (offset {offset} in {text!r})")
        self.text = text
        self.offset = offset


class UnclosedRing(SmilesError):
    """A ring-closure digit was opened but never closed, or misused."""


class UnbalancedParen(SmilesError):
    """Branch parentheses do not balance."""


class UnknownAtom(SmilesError):
    """Atom symbol outside the supported subset."""


class BadBracket(SmilesError):
    """Malformed bracket atom."""


@dataclass
class Atom:
    element: str
    aromatic: bool = False
    formal_charge: int = 0
    explicit_h: int | None = None
    implicit_h: int = 0
    in_ring: bool = False
    degree: int = 0
    index: int = 0

    @property
    def total_h(self) -> int:
        return self.implicit_h + (self.explicit_h or 0)


@dataclass
class Bond:
    src: int
    dst: int
    order: str = SINGLE
    in_ring: bool = False
    conjugated: bool = False


@dataclass
class MolGraph:
    atoms: list[Atom] = field(default_factory=list)
    bonds: list[Bond] = field(default_factory=list)
    adjacency: list[list[int]] = field(default_factory=list)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def bond_between(self, u: int, v: int) -> Bond | None:
        for b in self.bonds:
            if (b.src, b.dst) in ((u, v), (v, u)):
                return b
        return None

    @classmethod
    def from_edges(cls, elements: list[str], edges: list[tuple[int, int, str]]) -> "MolGraph":
        """Build a graph directly from element symbols and (u, v, order) edges.

        Convenience constructor for tests and demos; runs ring perception
        but leaves hydrogen counts at zero.
        """
        atoms = [Atom(element=e, aromatic=e.islower(), index=i) for i, e in enumerate(elements)]
        for a in atoms:
            a.element = a.element.capitalize()
        g = cls(atoms=atoms)
        g.adjacency = [[] for _ in atoms]
        for u, v, order in edges:
            g.bonds.append(Bond(src=u, dst=v, order=order))
            g.adjacency[u].append(v)
            g.adjacency[v].append(u)
        for a in g.atoms:
            a.degree = len(g.adjacency[a.index])
        perceive_rings(g)
        return g


@dataclass
class _PendingRing:
    atom: int
    order: str | None
    offset: int


def parse_smiles(text: str) -> MolGraph:
    """Parse a SMILES string into a MolGraph.

    Ring closures are resolved, ring membership is perceived, implicit
    hydrogens are filled from standard valences and conjugation flags are
    assigned. Raises UnclosedRing, UnbalancedParen, UnknownAtom or
    BadBracket on malformed input, each carrying the byte offset.
    """
    if not text:
        raise UnknownAtom("empty SMILES", text, 0)
    g = MolGraph()
    branch_stack: list[int] = []
    open_rings: dict[int, _PendingRing] = {}
    prev: int | None = None
    pending_order: str | None = None
    i = 0
    n = len(text)

    def add_atom(atom: Atom) -> int:
        atom.index = len(g.atoms)
        g.atoms.append(atom)
        g.adjacency.append([])
        return atom.index

    def add_bond(u: int, v: int, order: str, offset: int) -> None:
        if u == v:
            raise UnclosedRing("ring closure bonds an atom to itself", text, offset)
        if g.bond_between(u, v) is not None:
            raise UnclosedRing("duplicate bond between atoms", text, offset)
        g.bonds.append(Bond(src=u, dst=v, order=order))
        g.adjacency[u].append(v)
        g.adjacency[v].append(u)

    def attach(new_idx: int, offset: int) -> None:
        nonlocal prev, pending_order
        if prev is not None:
            order = pending_order
            if order is None:
                both_aromatic = g.atoms[prev].aromatic and g.atoms[new_idx].aromatic
                order = AROMATIC if both_aromatic else SINGLE
            elif order == AROMATIC and not (g.atoms[prev].aromatic and g.atoms[new_idx].aromatic):
                order = SINGLE
            add_bond(prev, new_idx, order, offset)
        pending_order = None
        prev = new_idx

    def close_ring(number: int, offset: int) -> None:
        nonlocal pending_order
        if prev is None:
            raise UnclosedRing("ring closure digit before any atom", text, offset)
        if number in open_rings:
            pend = open_rings.pop(number)
            order = pending_order if pending_order is not None else pend.order
            if pending_order is not None and pend.order is not None and pending_order != pend.order:
                raise UnclosedRing(f"conflicting bond orders on ring closure {number}", text, offset)
            if order is None:
                both_aromatic = g.atoms[pend.atom].aromatic and g.atoms[prev].aromatic
                order = AROMATIC if both_aromatic else SINGLE
            elif order == AROMATIC and not (g.atoms[pend.atom].aromatic and g.atoms[prev].aromatic):
                order = SINGLE
            add_bond(pend.atom, prev, order, offset)
        else:
            open_rings[number] = _PendingRing(atom=prev, order=pending_order, offset=offset)
        pending_order = None

    while i < n:
        c = text[i]
        if c == "(":
            if prev is None:
                raise UnbalancedParen("branch opened before any atom", text, i)
            branch_stack.append(prev)
            i += 1
        elif c == ")":
            if not branch_stack:
                raise UnbalancedParen("unmatched closing parenthesis", text, i)
            prev = branch_stack.pop()
            i += 1
        elif c == ".":
            prev = None
            pending_order = None
            i += 1
        elif c in _BOND_SYMBOLS:
            pending_order = _BOND_SYMBOLS[c]
            i += 1
        elif c in "/\\":
            # directional single bonds; stereo information is discarded
            pending_order = SINGLE
            i += 1
        elif c == "%":
            if i + 2 >= n or not (text[i + 1].isdigit() and text[i + 2].isdigit()):
                raise UnclosedRing("%% ring closure needs two digits", text, i)
            close_ring(int(text[i + 1 : i + 3]), i)
            i += 3
        elif c.isdigit():
            close_ring(int(c), i)
            i += 1
        elif c == "[":
            atom, consumed = _parse_bracket(text, i)
            attach(add_atom(atom), i)
            i += consumed
        elif c.isupper():
            two = text[i : i + 2]
            if two in ("Cl", "Br"):
                symbol, step = two, 2
            elif c in ORGANIC_SUBSET:
                symbol, step = c, 1
            else:
                raise UnknownAtom(f"atom symbol {c!r} outside organic subset", text, i)
            attach(add_atom(Atom(element=symbol)), i)
            i += step
        elif c in AROMATIC_SUBSET:
            attach(add_atom(Atom(element=c.upper(), aromatic=True)), i)
            i += 1
        else:
            raise UnknownAtom(f"unexpected character {c!r}", text, i)

    if branch_stack:
        raise UnbalancedParen("branch never closed", text, n)
    if open_rings:
        number, pend = next(iter(open_rings.items()))
        raise UnclosedRing(f"ring closure {number} never closed", text, pend.offset)
    if pending_order is not None:
        raise UnknownAtom("dangling bond symbol at end of input", text, n)
    if not g.atoms:
        raise UnknownAtom("no atoms in SMILES", text, 0)

    for atom in g.atoms:
        atom.degree = len(g.adjacency[atom.index])
    perceive_rings(g)
    _demote_nonring_aromatic_bonds(g)
    _fill_implicit_hydrogens(g)
    _assign_conjugation(g)
    return g


def _parse_bracket(text: str, start: int) -> tuple[Atom, int]:
    """Parse a bracket atom beginning at text[start] == '['.

    Returns the atom and the number of characters consumed. Accepts the
    field order isotope, symbol, then any mix of stereo/H-count/charge.
    """
    end = text.find("]", start)
    if end < 0:
        raise BadBracket("bracket atom never closed", text, start)
    body = text[start + 1 : end]
    i = 0
    m = len(body)
    while i < m and body[i].isdigit():  # isotope, ignored
        i += 1
    if i >= m:
        raise BadBracket("bracket atom has no element symbol", text, start)

    aromatic = False
    if body[i].isupper():
        if i + 1 < m and body[i + 1].islower() and body[i : i + 2] in ATOMIC_NUMBER:
            symbol = body[i : i + 2]
            i += 2
        else:
            symbol = body[i]
            i += 1
    elif body[i] in AROMATIC_SUBSET:
        symbol = body[i].upper()
        aromatic = True
        i += 1
    else:
        raise BadBracket(f"bad element symbol in bracket: {body[i]!r}", text, start + 1 + i)
    if symbol not in ATOMIC_NUMBER:
        raise UnknownAtom(f"unknown element {symbol!r}", text, start + 1 + i - len(symbol))

    explicit_h = 0
    charge = 0
    while i < m:
        c = body[i]
        if c == "@":  # chirality, discarded
            i += 1
            while i < m and body[i] == "@":
                i += 1
        elif c == "H":
            i += 1
            digits = ""
            while i < m and body[i].isdigit():
                digits += body[i]
                i += 1
            explicit_h = int(digits) if digits else 1
        elif c in "+-":
            sign = 1 if c == "+" else -1
            i += 1
            digits = ""
            while i < m and body[i].isdigit():
                digits += body[i]
                i += 1
            if digits:
                charge = sign * int(digits)
            else:
                charge = sign
                while i < m and body[i] == c:
                    charge += sign
                    i += 1
        else:
            raise BadBracket(f"unexpected {c!r} in bracket atom", text, start + 1 + i)

    return (
        Atom(element=symbol, aromatic=aromatic, formal_charge=charge, explicit_h=explicit_h),
        end - start + 1,
    )


def perceive_rings(g: MolGraph) -> MolGraph:
    """Set in_ring on atoms and bonds: a bond is in a ring iff removing it
    keeps its endpoints connected; an atom iff it lies on some ring bond."""
    for atom in g.atoms:
        atom.in_ring = False
    for k, bond in enumerate(g.bonds):
        bond.in_ring = _connected_without(g, bond.src, bond.dst, k)
        if bond.in_ring:
            g.atoms[bond.src].in_ring = True
            g.atoms[bond.dst].in_ring = True
    return g


def _connected_without(g: MolGraph, src: int, dst: int, skip_bond: int) -> bool:
    # BFS from src to dst with bond skip_bond removed
    blocked = {(g.bonds[skip_bond].src, g.bonds[skip_bond].dst),
               (g.bonds[skip_bond].dst, g.bonds[skip_bond].src)}
    seen = {src}
    frontier = [src]
    while frontier:
        nxt = []
        for u in frontier:
            for v in g.adjacency[u]:
                if (u, v) in blocked or v in seen:
                    continue
                if v == dst:
                    return True
                seen.add(v)
                nxt.append(v)
        frontier = nxt
    return False


def _demote_nonring_aromatic_bonds(g: MolGraph) -> None:
    # An aromatic bond outside every ring (e.g. a biphenyl linker) is single.
    changed = False
    for bond in g.bonds:
        if bond.order == AROMATIC and not bond.in_ring:
            bond.order = SINGLE
            changed = True
    if changed:
        perceive_rings(g)


def _fill_implicit_hydrogens(g: MolGraph) -> None:
    order_sums = [0.0] * g.n_atoms
    for bond in g.bonds:
        value = BOND_ORDER_VALUE[bond.order]
        order_sums[bond.src] += value
        order_sums[bond.dst] += value
    for atom in g.atoms:
        if atom.explicit_h is not None:
            atom.implicit_h = 0
            continue
        valences = STANDARD_VALENCES.get(atom.element)
        if valences is None:
            atom.implicit_h = 0
            continue
        current = int(-(-order_sums[atom.index] // 1))  # ceil
        if atom.aromatic:
            # the pi system consumes the excess over the lowest valence
            atom.implicit_h = max(0, valences[0] - current)
        else:
            target = next((v for v in valences if v >= current), None)
            atom.implicit_h = (target - current) if target is not None else 0


def _assign_conjugation(g: MolGraph) -> None:
    multi = [False] * g.n_atoms  # endpoint of a double/triple/aromatic bond
    for bond in g.bonds:
        if bond.order in (DOUBLE, TRIPLE, AROMATIC):
            multi[bond.src] = True
            multi[bond.dst] = True
    for bond in g.bonds:
        if bond.order == AROMATIC:
            bond.conjugated = True
        elif bond.order == SINGLE:
            bond.conjugated = multi[bond.src] and multi[bond.dst]
        else:
            bond.conjugated = False


def extract_scaffold(g: MolGraph) -> MolGraph:
    """Return the molecular framework: iteratively prune non-ring atoms of
    degree <= 1 until a fixpoint. Acyclic molecules give the empty graph."""
    keep = [True] * g.n_atoms
    degree = [len(adj) for adj in g.adjacency]
    changed = True
    while changed:
        changed = False
        for atom in g.atoms:
            i = atom.index
            if keep[i] and not atom.in_ring and degree[i] <= 1:
                keep[i] = False
                changed = True
                for j in g.adjacency[i]:
                    if keep[j]:
                        degree[j] -= 1

    remap = {}
    atoms = []
    for atom in g.atoms:
        if keep[atom.index]:
            remap[atom.index] = len(atoms)
            atoms.append(replace(atom, index=len(atoms)))
    scaffold = MolGraph(atoms=atoms)
    scaffold.adjacency = [[] for _ in atoms]
    for bond in g.bonds:
        if keep[bond.src] and keep[bond.dst]:
            nb = replace(bond, src=remap[bond.src], dst=remap[bond.dst])
            scaffold.bonds.append(nb)
            scaffold.adjacency[nb.src].append(nb.dst)
            scaffold.adjacency[nb.dst].append(nb.src)
    for atom in scaffold.atoms:
        atom.degree = len(scaffold.adjacency[atom.index])
    perceive_rings(scaffold)
    return scaffold


ACYCLIC_KEY = "ACYCLIC"


def scaffold_key(g: MolGraph) -> str:
    """Permutation-invariant hash of a scaffold graph.

    Iterative neighborhood refinement (at least n_atoms rounds) over
    (element, aromatic) atom labels and bond-order multisets; relabelings
    of the same graph map to equal keys. Empty graphs map to "ACYCLIC".
    """
    if g.n_atoms == 0:
        return ACYCLIC_KEY
    labels = [_digest(f"{a.element}|{int(a.aromatic)}") for a in g.atoms]
    order_of = {}
    for bond in g.bonds:
        order_of[(bond.src, bond.dst)] = bond.order
        order_of[(bond.dst, bond.src)] = bond.order
    for _ in range(g.n_atoms):
        labels = [
            _digest(labels[i] + "".join(
                sorted(f"{order_of[(i, j)]}:{labels[j]}" for j in g.adjacency[i])
            ))
            for i in range(g.n_atoms)
        ]
    return _digest(f"{g.n_atoms}|{len(g.bonds)}|" + "|".join(sorted(labels)))


def _digest(s: str) -> str:
    return hashlib.sha256(s.encode()).hexdigest()[:16]


def relabel(g: MolGraph, perm: list[int]) -> MolGraph:
    """Relabel atoms so old index i becomes perm[i]; graph structure kept."""
    inv = [0] * len(perm)
    for old, new in enumerate(perm):
        inv[new] = old
    atoms = [replace(g.atoms[inv[new]], index=new) for new in range(g.n_atoms)]
    out = MolGraph(atoms=atoms)
    out.adjacency = [[] for _ in atoms]
    for bond in g.bonds:
        nb = replace(bond, src=perm[bond.src], dst=perm[bond.dst])
        out.bonds.append(nb)
        out.adjacency[nb.src].append(nb.dst)
        out.adjacency[nb.dst].append(nb.src)
    for atom in out.atoms:
        atom.degree = len(out.adjacency[atom.index])
    return out

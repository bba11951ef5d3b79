"""Elements, atom bags, the 3D canvas, and the local placement frame.

The placement frame maps the agent's spherical subaction (d, alpha, psi)
to a Cartesian position anchored at a focal atom. Axes are derived from
distance vectors to the focal atom's nearest neighbors, so the map is
discontinuous when the neighbor ordering permutes; that behavior is kept
deliberately (see tests).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Element",
    "ELEMENTS",
    "SYMBOL_ORDER",
    "element",
    "element_by_number",
    "Bag",
    "Canvas",
    "State",
    "LocalFrame",
    "build_frame",
    "place_atom",
    "recover_coords",
    "parse_formula",
    "read_xyz",
    "write_xyz",
    "ALPHA_EPS",
]

# alpha is clamped to [ALPHA_EPS, pi - ALPHA_EPS] before placement so the
# inverse map has no pole singularity.
ALPHA_EPS = 1e-6


@dataclass(frozen=True)
class Element:
    symbol: str
    atomic_number: int
    covalent_radius: float  # Angstrom
    target_valence: int

    def __post_init__(self):
        if self.covalent_radius <= 0:
            raise ValueError(f"covalent radius must be positive: {self}")
        if self.target_valence < 1:
            raise ValueError(f"target valence must be >= 1: {self}")


# Fixed small-organic element vocabulary. Covalent radii are the standard
# tabulated single-bond values.
ELEMENTS: dict[str, Element] = {
    "H": Element("H", 1, 0.31, 1),
    "C": Element("C", 6, 0.76, 4),
    "N": Element("N", 7, 0.71, 3),
    "O": Element("O", 8, 0.66, 2),
    "S": Element("S", 16, 1.05, 2),
}

_BY_NUMBER = {e.atomic_number: e for e in ELEMENTS.values()}

# Canonical symbol order used for formula keys and for fixed-size count
# vectors fed to the policy: C, H, then alphabetical (Hill-like).
SYMBOL_ORDER: tuple[str, ...] = ("C", "H", "N", "O", "S")


def element(symbol: str) -> Element:
    try:
        return ELEMENTS[symbol]
    except KeyError:
        raise ValueError(f"unknown element symbol {symbol!r}") from None


def element_by_number(z: int) -> Element:
    try:
        return _BY_NUMBER[z]
    except KeyError:
        raise ValueError(f"unknown atomic number {z}") from None


class Bag:
    """Multiset of atoms remaining to be placed."""

    __slots__ = ("counts",)

    def __init__(self, counts: dict[Element, int]):
        for el, n in counts.items():
            if n < 0:
                raise ValueError(f"negative count for {el.symbol}: {n}")
        self.counts = {el: n for el, n in counts.items() if n > 0}

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def formula_key(self) -> str:
        parts = []
        for sym in SYMBOL_ORDER:
            n = self.counts.get(ELEMENTS[sym], 0)
            if n == 1:
                parts.append(sym)
            elif n > 1:
                parts.append(f"{sym}{n}")
        return "".join(parts)

    def count(self, el: Element) -> int:
        return self.counts.get(el, 0)

    def remove(self, el: Element) -> "Bag":
        n = self.counts.get(el, 0)
        if n == 0:
            raise ValueError(f"no {el.symbol} left in bag {self.formula_key}")
        out = dict(self.counts)
        out[el] = n - 1
        return Bag(out)

    def count_vector(self) -> np.ndarray:
        """Remaining counts in SYMBOL_ORDER, as float64."""
        return np.array(
            [self.counts.get(ELEMENTS[s], 0) for s in SYMBOL_ORDER], dtype=np.float64
        )

    def __eq__(self, other):
        return isinstance(other, Bag) and self.counts == other.counts

    def __hash__(self):
        return hash(frozenset(self.counts.items()))

    def __repr__(self):
        return f"Bag({self.formula_key or 'empty'})"


_FORMULA_TOKEN = re.compile(r"([A-Z][a-z]?)(\d*)")


def parse_formula(text: str) -> Bag:
    """Parse an element-count formula like "C3H8O" into a Bag.

    Order-insensitive: "H8C3O" parses to the same bag and formula key.
    """
    if not text or not text.strip():
        raise ValueError("empty formula")
    text = text.strip()
    counts: dict[Element, int] = {}
    pos = 0
    while pos < len(text):
        m = _FORMULA_TOKEN.match(text, pos)
        if not m or m.start() != pos or not m.group(1):
            raise ValueError(f"bad formula {text!r} at position {pos}")
        sym, digits = m.group(1), m.group(2)
        el = element(sym)
        n = int(digits) if digits else 1
        if n == 0:
            raise ValueError(f"zero count for {sym} in formula {text!r}")
        counts[el] = counts.get(el, 0) + n
        pos = m.end()
    return Bag(counts)


class Canvas:
    """The partially built molecule: an append-only list of placed atoms."""

    __slots__ = ("elements", "positions", "_policy_feats")

    def __init__(self, elements: list[Element] | None = None, positions=None):
        self._policy_feats = None  # lazily filled featurization cache
        self.elements: list[Element] = list(elements) if elements else []
        if positions is None:
            self.positions = np.zeros((0, 3), dtype=np.float64)
        else:
            self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if len(self.elements) != len(self.positions):
            raise ValueError("element/position count mismatch")
        if self.positions.size and not np.all(np.isfinite(self.positions)):
            raise ValueError("non-finite atom position")

    def __len__(self) -> int:
        return len(self.elements)

    def add(self, el: Element, position) -> "Canvas":
        position = np.asarray(position, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(position)):
            raise ValueError("non-finite atom position")
        return Canvas(self.elements + [el], np.vstack([self.positions, position[None, :]]))

    def formula_key(self) -> str:
        counts: dict[Element, int] = {}
        for el in self.elements:
            counts[el] = counts.get(el, 0) + 1
        return Bag(counts).formula_key

    def min_pair_distance(self) -> float:
        if len(self) < 2:
            return math.inf
        d = self.positions[:, None, :] - self.positions[None, :, :]
        r = np.sqrt((d * d).sum(-1))
        return float(r[np.triu_indices(len(self), k=1)].min())

    def __repr__(self):
        return f"Canvas({self.formula_key() or 'empty'}, n={len(self)})"


@dataclass(frozen=True)
class State:
    """MDP state: canvas so far + remaining bag. step + bag total = horizon."""

    canvas: Canvas
    bag: Bag
    step: int
    episode_horizon: int

    def __post_init__(self):
        if self.step + self.bag.total != self.episode_horizon:
            raise ValueError(
                f"state invariant violated: step {self.step} + bag {self.bag.total}"
                f" != horizon {self.episode_horizon}"
            )

    @property
    def done(self) -> bool:
        return self.bag.total == 0


@dataclass(frozen=True)
class LocalFrame:
    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray

    def axes(self) -> np.ndarray:
        return np.stack([self.e1, self.e2, self.e3])


_GLOBAL_AXES = np.eye(3)

# parallel-cross-product cutoff for falling back to the 2-atom rule
_DEGENERATE_CROSS = 1e-9


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("zero-length vector has no direction")
    return v / n


def _two_atom_axes(e1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # pick the global axis least parallel to e1, then complete the triad
    g = _GLOBAL_AXES[int(np.argmin(np.abs(e1)))]
    e3 = _unit(np.cross(e1, g))
    e2 = np.cross(e3, e1)
    return e2, e3


def build_frame(canvas: Canvas, focus: int) -> LocalFrame:
    """Right-handed orthonormal frame anchored at the focal atom.

    1 atom: global axes. 2 atoms: e1 toward the other atom, completed with
    the global axis least parallel to it. >= 3 atoms: e1 toward the nearest
    non-focal neighbor, e3 = e1 x (second-nearest - focus), ties broken by
    lower atom index; degenerate collinear geometry falls back to the
    2-atom rule.
    """
    n = len(canvas)
    if n == 0:
        raise ValueError("cannot build a frame on an empty canvas")
    if not 0 <= focus < n:
        raise ValueError(f"focus index {focus} out of range for {n} atoms")
    f = canvas.positions[focus]
    if n == 1:
        return LocalFrame(f.copy(), *_GLOBAL_AXES.copy())

    others = [i for i in range(n) if i != focus]
    dists = np.linalg.norm(canvas.positions[others] - f, axis=1)
    # stable sort keeps lower atom index first on exact ties
    order = np.argsort(dists, kind="stable")
    n1 = others[order[0]]
    e1 = _unit(canvas.positions[n1] - f)

    if n == 2:
        e2, e3 = _two_atom_axes(e1)
        return LocalFrame(f.copy(), e1, e2, e3)

    n2 = others[order[1]]
    cross = np.cross(e1, canvas.positions[n2] - f)
    if np.linalg.norm(cross) < _DEGENERATE_CROSS:
        e2, e3 = _two_atom_axes(e1)
        return LocalFrame(f.copy(), e1, e2, e3)
    e3 = _unit(cross)
    e2 = np.cross(e3, e1)
    return LocalFrame(f.copy(), e1, e2, e3)


def place_atom(frame: LocalFrame, d: float, alpha: float, psi: float) -> np.ndarray:
    """Spherical-to-Cartesian placement in the local frame."""
    if d <= 0:
        raise ValueError(f"placement distance must be positive, got {d}")
    sa = math.sin(alpha)
    direction = (
        math.cos(alpha) * frame.e1
        + sa * math.cos(psi) * frame.e2
        + sa * math.sin(psi) * frame.e3
    )
    return frame.origin + d * direction


def recover_coords(frame: LocalFrame, position: np.ndarray) -> tuple[float, float, float]:
    """Invert place_atom. psi is 0 by convention at the alpha poles."""
    v = np.asarray(position, dtype=np.float64) - frame.origin
    d = float(np.linalg.norm(v))
    if d == 0.0:
        raise ValueError("position coincides with the frame origin")
    c1 = float(np.dot(v, frame.e1)) / d
    alpha = math.acos(min(1.0, max(-1.0, c1)))
    c2 = float(np.dot(v, frame.e2))
    c3 = float(np.dot(v, frame.e3))
    if math.hypot(c2, c3) < 1e-12:
        return d, alpha, 0.0
    return d, alpha, math.atan2(c3, c2)


def read_xyz(path) -> Canvas:
    """Read a single-geometry XYZ file (count line, comment, Sym x y z rows)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines:
        raise ValueError(f"empty xyz file {path}")
    try:
        n = int(lines[0].split()[0])
    except (IndexError, ValueError):
        raise ValueError(f"bad atom count line in {path!s}: {lines[0]!r}") from None
    rows = lines[2 : 2 + n]
    if len(rows) < n:
        raise ValueError(f"xyz file {path!s} truncated: expected {n} atoms")
    elements, positions = [], []
    for row in rows:
        fields = row.split()
        if len(fields) < 4:
            raise ValueError(f"bad xyz row {row!r}")
        elements.append(element(fields[0]))
        positions.append([float(x) for x in fields[1:4]])
    return Canvas(elements, positions)


def write_xyz(path, canvas: Canvas, comment: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_xyz(canvas, comment))


def format_xyz(canvas: Canvas, comment: str = "") -> str:
    lines = [str(len(canvas)), comment.replace("\n", " ")]
    for el, pos in zip(canvas.elements, canvas.positions):
        lines.append(f"{el.symbol} {pos[0]:.10f} {pos[1]:.10f} {pos[2]:.10f}")
    return "\n".join(lines) + "\n"

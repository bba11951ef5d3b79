"""Calculators: the built-in surrogate potential, atomization, relaxation.

The surrogate is a Morse pair potential plus a smooth coordination-number
penalty toward each element's target valence. It is not thermochemistry;
its job is a smooth, rotation/permutation-invariant energy with analytic
forces that ranks better-bonded geometries lower.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .chem import Canvas, Element, ELEMENTS

__all__ = [
    "CalculatorResult",
    "SurrogateParams",
    "SurrogateCalculator",
    "CalculatorError",
    "atomization_delta",
    "relax",
    "RelaxResult",
]

HARTREE_TO_EV = 27.211386245988
BOHR_TO_ANGSTROM = 0.529177210903


class CalculatorError(RuntimeError):
    """Raised when a calculator cannot produce a result."""


@dataclass
class CalculatorResult:
    energy: float  # eV
    forces: np.ndarray | None = None  # (n, 3) eV/Angstrom
    dipole: np.ndarray | None = None  # (3,) Debye

    def __post_init__(self):
        if not math.isfinite(self.energy):
            raise CalculatorError(f"non-finite energy {self.energy}")
        if self.forces is not None:
            self.forces = np.asarray(self.forces, dtype=np.float64)


# Pair well depths in eV, keyed by frozenset of symbols. Order-of-magnitude
# bond energies; S pairs and unlisted pairs fall back below.
_DE_TABLE = {
    frozenset(["H"]): 4.5,
    frozenset(["C", "H"]): 4.3,
    frozenset(["C"]): 3.6,
    frozenset(["N", "H"]): 4.0,
    frozenset(["O", "H"]): 4.8,
    frozenset(["C", "N"]): 3.2,
    frozenset(["C", "O"]): 3.7,
    frozenset(["N"]): 2.0,
    frozenset(["O"]): 1.5,
}
_DE_SULFUR = 2.5
_DE_DEFAULT = 2.0

# Charges for the geometry-dependent dipole stub (test plumbing for the
# coefficient-scheduling machinery, not physics).
_STUB_CHARGES = {"H": 0.15, "C": 0.0, "N": -0.25, "O": -0.35, "S": -0.1}
_DEBYE_PER_E_ANGSTROM = 4.803204


def _default_de(a: str, b: str) -> float:
    if "S" in (a, b):
        return _DE_SULFUR
    return _DE_TABLE.get(frozenset([a, b]), _DE_DEFAULT)


@dataclass
class SurrogateParams:
    """Morse + coordination-penalty parameters.

    Pair equilibrium distances default to the sum of covalent radii and can
    be overridden per pair; the coordination cutoff is cutoff_factor * r_e
    with a half-cosine switch.
    """

    well_depth: dict[frozenset, float] = field(default_factory=dict)
    equilibrium: dict[frozenset, float] = field(default_factory=dict)
    width: float = 2.0  # 1/Angstrom
    valence_weight: float = 0.5  # eV
    cutoff_factor: float = 1.3

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("Morse width must be positive")
        if self.valence_weight < 0:
            raise ValueError("valence penalty weight must be >= 0")
        if self.cutoff_factor <= 0:
            raise ValueError("coordination cutoff factor must be positive")
        for pair, de in self.well_depth.items():
            if de <= 0:
                raise ValueError(f"well depth must be positive for {set(pair)}")
        for pair, re_ in self.equilibrium.items():
            if re_ <= 0:
                raise ValueError(f"equilibrium distance must be positive for {set(pair)}")

    def de(self, a: str, b: str) -> float:
        return self.well_depth.get(frozenset([a, b]), _default_de(a, b))

    def re(self, a: Element, b: Element) -> float:
        return self.equilibrium.get(
            frozenset([a.symbol, b.symbol]), a.covalent_radius + b.covalent_radius
        )


class SurrogateCalculator:
    """Differentiable surrogate potential with analytic forces.

    Isolated-atom reference energies are defined as 0, so the atomization
    argument reduces to minus the molecular energy.
    """

    name = "surrogate"
    supports_dipole = False

    def __init__(self, params: SurrogateParams | None = None, dipole_stub: bool = False):
        self.params = params or SurrogateParams()
        self.dipole_stub = dipole_stub
        if dipole_stub:
            self.supports_dipole = True

    def isolated_energy(self, el: Element) -> float:
        return 0.0

    def _pair_tables(self, elements: list[Element]):
        n = len(elements)
        de = np.empty((n, n))
        re_ = np.empty((n, n))
        for i, a in enumerate(elements):
            for j, b in enumerate(elements):
                de[i, j] = self.params.de(a.symbol, b.symbol)
                re_[i, j] = self.params.re(a, b)
        return de, re_

    def calculate(
        self, canvas: Canvas, forces: bool = True, dipole: bool = False
    ) -> CalculatorResult:
        if len(canvas) == 0:
            raise CalculatorError("empty canvas")
        p = self.params
        n = len(canvas)
        x = canvas.positions
        valences = np.array([el.target_valence for el in canvas.elements], dtype=float)

        if n == 1:
            e = p.valence_weight * float(valences[0] ** 2)
            res = CalculatorResult(e, np.zeros((1, 3)) if forces else None)
            if dipole:
                res.dipole = self._stub_dipole(canvas)
            return res

        de, re_ = self._pair_tables(canvas.elements)
        rc = p.cutoff_factor * re_

        diff = x[:, None, :] - x[None, :, :]  # (n, n, 3)
        r = np.sqrt((diff * diff).sum(-1))
        np.fill_diagonal(r, 1.0)  # dummy, masked below
        mask = ~np.eye(n, dtype=bool)

        # Morse term, counted over i<j
        ex = np.exp(-p.width * (r - re_))
        morse = de * ((1.0 - ex) ** 2 - 1.0)
        e_pair = float(morse[np.triu_indices(n, k=1)].sum())

        # smooth coordination numbers
        inside = (r < rc) & mask
        fcut = np.where(inside, 0.5 * (np.cos(np.pi * r / rc) + 1.0), 0.0)
        coord = fcut.sum(axis=1)
        dev = coord - valences
        e_val = p.valence_weight * float((dev * dev).sum())

        energy = e_pair + e_val
        result = CalculatorResult(energy)

        if forces:
            # dE/dr_ij: one Morse term per pair plus the penalty chain rule
            # through c_i and c_j
            dmorse = 2.0 * de * (1.0 - ex) * ex * p.width
            dfcut = np.where(inside, -0.5 * np.pi / rc * np.sin(np.pi * r / rc), 0.0)
            dval = 2.0 * p.valence_weight * (dev[:, None] + dev[None, :]) * dfcut
            dedr = np.where(mask, dmorse + dval, 0.0)
            unit = diff / r[:, :, None]
            grad = (dedr[:, :, None] * unit).sum(axis=1)
            result.forces = -grad
        if dipole:
            result.dipole = self._stub_dipole(canvas)
        return result

    def _stub_dipole(self, canvas: Canvas) -> np.ndarray:
        if not self.dipole_stub:
            return None
        q = np.array([_STUB_CHARGES[el.symbol] for el in canvas.elements])
        centroid = canvas.positions.mean(axis=0)
        return _DEBYE_PER_E_ANGSTROM * (q[:, None] * (canvas.positions - centroid)).sum(
            axis=0
        )


def atomization_delta(canvas: Canvas, calc) -> float:
    """Sum of isolated-atom energies minus molecular energy (positive = bound).

    Both terms come from the same calculator so relative rankings stay
    internally consistent.
    """
    if len(canvas) == 0:
        raise ValueError("empty canvas")
    e_mol = calc.calculate(canvas, forces=False).energy
    e_atoms = sum(calc.isolated_energy(el) for el in canvas.elements)
    return e_atoms - e_mol


@dataclass
class RelaxResult:
    canvas: Canvas
    steps: int
    energy: float
    converged: bool
    stalled: bool
    trace: list[float]


def relax(
    canvas: Canvas,
    calc,
    max_steps: int = 500,
    fmax: float = 1e-3,
    step_size: float = 0.05,
    armijo_c: float = 1e-4,
    shrink: float = 0.5,
    max_shrinks: int = 30,
) -> RelaxResult:
    """Gradient descent with Armijo backtracking; energy never increases.

    Stops when the max per-atom force drops below fmax or after max_steps.
    A failed line search (max_shrinks shrinks without decrease) returns the
    current geometry flagged as stalled.
    """
    current = canvas
    res = calc.calculate(current, forces=True)
    if res.forces is None:
        raise CalculatorError("relaxation needs forces from the calculator")
    trace = [res.energy]
    steps = 0
    for _ in range(max_steps):
        fnorm = float(np.sqrt((res.forces**2).sum(axis=1)).max())
        if fnorm < fmax:
            return RelaxResult(current, steps, res.energy, True, False, trace)
        direction = res.forces  # descent: x + a * F lowers E
        gsq = float((direction * direction).sum())
        alpha = step_size / max(fnorm, 1e-12)
        accepted = False
        for _ in range(max_shrinks):
            trial = Canvas(current.elements, current.positions + alpha * direction)
            tres = calc.calculate(trial, forces=True)
            if tres.energy <= res.energy - armijo_c * alpha * gsq:
                current, res = trial, tres
                trace.append(res.energy)
                steps += 1
                accepted = True
                break
            alpha *= shrink
        if not accepted:
            return RelaxResult(current, steps, res.energy, False, True, trace)
    fnorm = float(np.sqrt((res.forces**2).sum(axis=1)).max())
    return RelaxResult(current, steps, res.energy, fnorm < fmax, False, trace)

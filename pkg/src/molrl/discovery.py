"""Evaluation machinery: discovery accounting, energy/geometry metrics,
weighted aggregation, and the checkpoint sampling protocols."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .chem import Bag, Canvas, element, format_xyz, parse_formula
from .energy import relax
from .molgraph import canonical_key, is_valid, perceive_bonds
from .isomers import enumerate_isomers

__all__ = [
    "ReferenceSet",
    "DiscoveryBuffer",
    "BagMetrics",
    "ratios",
    "rae",
    "rmsd",
    "relax_stability",
    "aggregate",
    "rollout_episode",
    "sample_protocol",
    "evaluate_records",
]


class ReferenceSet:
    """Known isomer keys, each with an optional energy, per formula."""

    def __init__(self):
        # formula -> {canonical key -> energy_ev or None}
        self.entries: dict[str, dict[str, float | None]] = {}

    def add(self, formula: str, key: str, energy_ev: float | None = None) -> None:
        formula = parse_formula(formula).formula_key
        if energy_ev is not None and not math.isfinite(energy_ev):
            raise ValueError(f"non-finite reference energy for {formula}")
        per = self.entries.setdefault(formula, {})
        if energy_ev is not None or key not in per:
            per[key] = energy_ev if energy_ev is not None else per.get(key)

    @property
    def keys(self) -> dict[str, set[str]]:
        return {f: set(per) for f, per in self.entries.items()}

    def energies_for(self, formula: str) -> list[float]:
        return [e for e in self.entries.get(formula, {}).values() if e is not None]

    def formulas(self) -> list[str]:
        return sorted(self.entries)

    def count(self, formula: str) -> int:
        return len(self.entries.get(formula, ()))

    @classmethod
    def from_jsonl(cls, path) -> "ReferenceSet":
        """Records: {"formula": str, "canonical_key": str | "xyz": str,
        "energy_ev": float?}. XYZ entries are keyed with this package's own
        bond perception so generated and reference molecules share one
        canonicalization."""
        ref = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                if "canonical_key" in rec:
                    key = rec["canonical_key"]
                elif "xyz" in rec:
                    canvas = _canvas_from_xyz_text(rec["xyz"])
                    key = canonical_key(perceive_bonds(canvas)).key
                else:
                    raise ValueError(
                        f"{path!s}:{line_no}: need canonical_key or xyz"
                    )
                ref.add(rec["formula"], key, rec.get("energy_ev"))
        return ref

    @classmethod
    def from_enumeration(cls, formulas) -> "ReferenceSet":
        """Exhaustive valence-model enumeration (no energies)."""
        ref = cls()
        for formula in formulas:
            for key in enumerate_isomers(formula):
                ref.add(formula, key)
        return ref

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for formula in self.formulas():
                for key in sorted(self.entries[formula]):
                    rec = {"formula": formula, "canonical_key": key}
                    energy = self.entries[formula][key]
                    if energy is not None:
                        rec["energy_ev"] = energy
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _canvas_from_xyz_text(text: str) -> Canvas:
    lines = [ln for ln in text.strip().splitlines()]
    n = int(lines[0].split()[0])
    elements, positions = [], []
    for row in lines[2 : 2 + n]:
        fields = row.split()
        elements.append(element(fields[0]))
        positions.append([float(v) for v in fields[1:4]])
    return Canvas(elements, positions)


@dataclass
class DiscoveryRecord:
    first_iteration: int
    best_delta_e: float
    xyz: str | None = None
    hits: int = 1


class DiscoveryBuffer:
    """Cumulative store of every generated molecule, keyed by isomer.

    Counts are monotone; the best (largest) atomization delta per isomer
    is retained along with its geometry.
    """

    def __init__(self, keep_geometry: bool = True):
        self.records: dict[str, dict[str, DiscoveryRecord]] = {}
        self.sampled: dict[str, int] = {}
        self.valid: dict[str, int] = {}
        self.keep_geometry = keep_geometry

    def record(
        self,
        formula: str,
        canvas: Canvas | None,
        delta_e: float | None,
        iteration: int,
        valid: bool | None = None,
    ) -> str | None:
        """Account one generated molecule; returns its key when valid."""
        self.sampled[formula] = self.sampled.get(formula, 0) + 1
        if valid is None:
            valid = canvas is not None and is_valid(canvas)
        if not valid or canvas is None:
            return None
        self.valid[formula] = self.valid.get(formula, 0) + 1
        key = canonical_key(perceive_bonds(canvas)).key
        per_formula = self.records.setdefault(formula, {})
        delta = float("-inf") if delta_e is None else float(delta_e)
        existing = per_formula.get(key)
        if existing is None:
            per_formula[key] = DiscoveryRecord(
                iteration,
                delta,
                format_xyz(canvas, f"{formula} dE={delta:.6f}") if self.keep_geometry else None,
            )
        else:
            existing.hits += 1
            if delta > existing.best_delta_e:
                existing.best_delta_e = delta
                if self.keep_geometry:
                    existing.xyz = format_xyz(canvas, f"{formula} dE={delta:.6f}")
        return key

    def unique_count(self, formula: str) -> int:
        return len(self.records.get(formula, {}))

    def keys_for(self, formula: str) -> set[str]:
        return set(self.records.get(formula, {}))


def ratios(
    buffer: DiscoveryBuffer, reference: ReferenceSet, formula: str
) -> tuple[float | None, float | None, int, int, int]:
    """(rediscovery_ratio, expansion_ratio, n_unique, n_rediscovered, n_novel).

    Ratios are None when the reference lacks the formula (no denominator).
    """
    discovered = buffer.keys_for(formula)
    ref_keys = set(reference.entries.get(formula, ()))
    if not ref_keys:
        return None, None, len(discovered), 0, len(discovered)
    n_re = len(discovered & ref_keys)
    n_novel = len(discovered) - n_re
    assert n_re + n_novel == len(discovered)
    return n_re / len(ref_keys), n_novel / len(ref_keys), len(discovered), n_re, n_novel


def rae(canvas_energy: float, reference_energies) -> float:
    """Energy minus the mean reference energy of the same formula."""
    refs = list(reference_energies)
    if not refs:
        raise ValueError("empty reference energy list")
    return float(canvas_energy) - float(np.mean(refs))


def rmsd(before: Canvas, after: Canvas) -> float:
    """Root-mean-square per-atom displacement, no alignment."""
    if len(before) != len(after):
        raise ValueError(f"atom count mismatch: {len(before)} vs {len(after)}")
    diff = before.positions - after.positions
    return float(np.sqrt((diff * diff).sum(axis=1).mean()))


def relax_stability(before: Canvas, after: Canvas) -> bool:
    """True iff relaxation kept the bond-connectivity canonical key."""
    return (
        canonical_key(perceive_bonds(before)).key
        == canonical_key(perceive_bonds(after)).key
    )


@dataclass
class BagMetrics:
    formula: str
    n_sampled: int
    validity: float
    n_unique: int = 0
    n_rediscovered: int = 0
    n_novel: int = 0
    rediscovery_ratio: float | None = None
    expansion_ratio: float | None = None
    mean_rrae: float | None = None
    n_rrae: int = 0  # molecules entering the rRAE mean (valid + converged)
    mean_rmsd: float | None = None
    relax_stability: float | None = None
    # unique/sampled is misleading under formula-conditioned sampling, so it
    # stays out of standard reports and only fills behind an explicit flag
    uniqueness: float | None = None


_WEIGHTED_FIELDS = (
    "validity",
    "rediscovery_ratio",
    "expansion_ratio",
    "mean_rrae",
    "mean_rmsd",
    "relax_stability",
    "uniqueness",
)


def aggregate(per_bag: list[tuple[BagMetrics, float]]) -> BagMetrics:
    """N_i-weighted average of every metric field.

    Fields missing (None) for some bags are averaged over the bags that do
    report them, with weights renormalized accordingly.
    """
    if not per_bag:
        raise ValueError("nothing to aggregate")
    total_n = sum(w for _, w in per_bag)
    if total_n <= 0:
        raise ValueError("aggregate weights must be positive")
    out = BagMetrics(
        formula="ALL",
        n_sampled=sum(m.n_sampled for m, _ in per_bag),
        validity=0.0,
        n_unique=sum(m.n_unique for m, _ in per_bag),
        n_rediscovered=sum(m.n_rediscovered for m, _ in per_bag),
        n_novel=sum(m.n_novel for m, _ in per_bag),
        n_rrae=sum(m.n_rrae for m, _ in per_bag),
    )
    for name in _WEIGHTED_FIELDS:
        entries = [(getattr(m, name), w) for m, w in per_bag if getattr(m, name) is not None]
        if not entries:
            setattr(out, name, None)
            continue
        denom = sum(w for _, w in entries)
        setattr(out, name, sum(v * w for v, w in entries) / denom)
    return out


def rollout_episode(policy, env, bag: Bag, rng, greedy: bool = False, iteration: int = 0):
    """One full episode under the given policy; returns the episode record."""
    state = env.reset(bag)
    total = 0.0
    components_sum: dict[str, float] = {}
    outcome = None
    while True:
        action, _, _, _ = policy.sample(state, rng, greedy=greedy)
        outcome = env.step(state, action, iteration)
        total += outcome.reward
        for k, v in outcome.reward_components.items():
            components_sum[k] = components_sum.get(k, 0.0) + v
        if outcome.done:
            break
        state = outcome.next_state
    return {
        "bag": bag.formula_key,
        "canvas": outcome.next_state.canvas,
        "episode_return": total,
        "terminal_reward": outcome.reward,
        "components": components_sum,
        "kill": outcome.kill,
        "valid": bool(outcome.valid) if outcome.valid is not None else False,
        "delta_e": outcome.delta_e,
        "dipole": outcome.dipole_magnitude,
    }


def sample_protocol(
    policy,
    make_env,
    bags: list[Bag],
    mode: str = "fixed_count",
    count: int = 1,
    proportionality: int = 100,
    reference: ReferenceSet | None = None,
    seed: int = 0,
    greedy: bool = False,
):
    """Yield episode records from a single checkpoint.

    fixed_count: `count` episodes per bag. proportional: P * N_ref(bag)
    episodes per bag (reference required). Greedy collection emits one
    deterministic molecule per bag.
    """
    if mode not in ("fixed_count", "proportional"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if mode == "proportional" and reference is None:
        raise ValueError("proportional sampling needs a reference set")
    rng = np.random.default_rng(seed)
    env = make_env()
    for bag in bags:
        if greedy:
            n = 1
        elif mode == "fixed_count":
            n = count
        else:
            n = proportionality * reference.count(bag.formula_key)
        for i in range(n):
            rec = rollout_episode(policy, env, bag, rng, greedy=greedy)
            rec["sample_index"] = i
            yield rec


def evaluate_records(
    records,
    reference: ReferenceSet | None,
    calc=None,
    relax_max_steps: int = 200,
    relax_fmax: float = 1e-2,
    include_uniqueness: bool = False,
) -> tuple[list[BagMetrics], BagMetrics | None]:
    """Per-bag metrics (+ weighted aggregate) from episode records.

    Records need: bag, valid, canvas (or xyz), delta_e. When a calculator
    is given, valid molecules are relaxed for the rRAE / RMSD / stability
    metrics; rRAE also needs reference energies.
    """
    buffer = DiscoveryBuffer(keep_geometry=False)
    by_bag: dict[str, list[dict]] = {}
    for rec in records:
        by_bag.setdefault(rec["bag"], []).append(rec)

    per_bag: list[BagMetrics] = []
    for formula in sorted(by_bag):
        recs = by_bag[formula]
        rrae_vals: list[float] = []
        rmsd_vals: list[float] = []
        stable_vals: list[bool] = []
        for rec in recs:
            canvas = rec.get("canvas")
            if canvas is None and rec.get("xyz"):
                canvas = _canvas_from_xyz_text(rec["xyz"])
            valid = rec.get("valid", False)
            buffer.record(formula, canvas, rec.get("delta_e"), 0, valid=valid)
            if not valid or canvas is None or calc is None:
                continue
            relaxed = relax(canvas, calc, max_steps=relax_max_steps, fmax=relax_fmax)
            rmsd_vals.append(rmsd(canvas, relaxed.canvas))
            stable_vals.append(relax_stability(canvas, relaxed.canvas))
            ref_energies = (
                reference.energies_for(formula) if reference is not None else []
            )
            if ref_energies and relaxed.converged:
                rrae_vals.append(rae(relaxed.energy, ref_energies))
        n = len(recs)
        validity = sum(1 for r in recs if r.get("valid")) / n if n else 0.0
        metrics = BagMetrics(formula=formula, n_sampled=n, validity=validity)
        if reference is not None:
            re_ratio, ex_ratio, n_unique, n_re, n_novel = ratios(buffer, reference, formula)
            metrics.rediscovery_ratio = re_ratio
            metrics.expansion_ratio = ex_ratio
            metrics.n_unique, metrics.n_rediscovered, metrics.n_novel = (
                n_unique,
                n_re,
                n_novel,
            )
        else:
            metrics.n_unique = buffer.unique_count(formula)
            metrics.n_novel = metrics.n_unique
        if rmsd_vals:
            metrics.mean_rmsd = float(np.mean(rmsd_vals))
            metrics.relax_stability = float(np.mean(stable_vals))
        if rrae_vals:
            metrics.mean_rrae = float(np.mean(rrae_vals))
            metrics.n_rrae = len(rrae_vals)
        if include_uniqueness and n:
            metrics.uniqueness = metrics.n_unique / n
        per_bag.append(metrics)

    if not per_bag:
        return [], None
    agg = aggregate([(m, float(m.n_sampled)) for m in per_bag])
    return per_bag, agg

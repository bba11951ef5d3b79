"""The molecule-construction MDP: deterministic transitions, kill rule,
terminal/per-step reward algebra, and linear coefficient schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .chem import Bag, Canvas, State, build_frame, place_atom
from .energy import CalculatorError, atomization_delta
from .molgraph import BOND_SCALE_DEFAULT, is_valid
from .policy import Action

__all__ = [
    "LinearSchedule",
    "schedule_value",
    "RewardConfig",
    "StepOutcome",
    "MolEnv",
    "agent_preset",
    "AGENT_PRESETS",
    "atomization_transform",
]

REWARD_COMPONENT_KEYS = ("A", "F", "V", "shape", "kill", "dipole")


@dataclass(frozen=True)
class LinearSchedule:
    start_iter: int
    end_iter: int
    start_value: float
    end_value: float

    def __post_init__(self):
        if self.end_iter < self.start_iter:
            raise ValueError("schedule end_iter must be >= start_iter")

    def value(self, iteration: int) -> float:
        if iteration <= self.start_iter:
            return self.start_value
        if iteration >= self.end_iter:
            return self.end_value
        frac = (iteration - self.start_iter) / (self.end_iter - self.start_iter)
        return self.start_value + frac * (self.end_value - self.start_value)


def schedule_value(schedule: LinearSchedule, iteration: int) -> float:
    return schedule.value(iteration)


@dataclass
class RewardConfig:
    coef_A: float = 1.0
    coef_F: float = 0.0
    coef_V: float = 0.0
    shaping_per_step: float = 0.05
    kill_reward: float = -3.0
    kill_distance: float = 0.6  # Angstrom, element-independent
    energy_scale: float = 1.0  # 1/eV, applied before the terminal transform
    bond_scale: float = BOND_SCALE_DEFAULT
    dipole_schedule: LinearSchedule | None = None

    def __post_init__(self):
        if self.kill_reward > 0:
            raise ValueError("kill reward must be <= 0")
        if self.kill_distance <= 0:
            raise ValueError("kill distance must be positive")


# (coef_A, coef_F, coef_V) per named agent
AGENT_PRESETS: dict[str, tuple[float, float, float]] = {
    "A": (1.0, 0.0, 0.0),
    "AV": (1.0, 0.0, 3.0),
    "F": (0.0, 1.0, 0.0),
    "FV": (0.0, 1.0, 3.0),
    "AFV": (1.0, 1.0, 3.0),
}


def agent_preset(name: str, **overrides) -> RewardConfig:
    try:
        a, f, v = AGENT_PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown agent preset {name!r}; known: {sorted(AGENT_PRESETS)}"
        ) from None
    return RewardConfig(coef_A=a, coef_F=f, coef_V=v, **overrides)


def atomization_transform(x: float) -> float:
    """Terminal energy transform: x + x^2/2 above zero, identity below.

    The quadratic branch stretches resolution among strongly bound
    molecules.
    """
    return x + 0.5 * x * x if x > 0 else x


@dataclass
class StepOutcome:
    next_state: State
    reward: float
    reward_components: dict[str, float]
    done: bool
    kill: bool
    valid: bool | None = None  # populated on natural terminal steps
    delta_e: float | None = None  # unscaled atomization argument, eV
    dipole_magnitude: float | None = None


class MolEnv:
    """One environment instance; transitions are fully deterministic.

    The first atom of an episode is placed at the origin with no spatial
    subaction. The instance caches the running canvas energy so per-step
    formation rewards cost one calculator call per step.
    """

    def __init__(self, config: RewardConfig, calc):
        self.config = config
        self.calc = calc
        self._energy_cache: float = 0.0

    def reset(self, bag: Bag) -> State:
        if bag.total < 1:
            raise ValueError("cannot start an episode from an empty bag")
        self._energy_cache = 0.0  # empty-canvas energy
        return State(Canvas(), bag, 0, bag.total)

    def set_energy_cache(self, value: float) -> None:
        """Restore the running canvas energy (checkpoint resume)."""
        self._energy_cache = value

    @property
    def energy_cache(self) -> float:
        return self._energy_cache

    def step(self, state: State, action: Action, iteration: int = 0) -> StepOutcome:
        cfg = self.config
        if state.bag.count(action.element) < 1:
            raise ValueError(
                f"element {action.element.symbol} not available in bag"
                f" {state.bag.formula_key}"
            )
        canvas = state.canvas
        if len(canvas) == 0:
            position = np.zeros(3)
        else:
            frame = build_frame(canvas, action.focus)
            d, alpha, psi = action.effective_coords()
            position = place_atom(frame, d, alpha, psi)

        new_canvas = canvas.add(action.element, position)
        next_state = State(
            new_canvas, state.bag.remove(action.element), state.step + 1, state.episode_horizon
        )
        components = {key: 0.0 for key in REWARD_COMPONENT_KEYS}

        # kill rule: any pair closer than the threshold ends the episode
        # with the fixed penalty and nothing else
        if len(canvas) > 0:
            dists = np.linalg.norm(canvas.positions - position[None, :], axis=1)
            if float(dists.min()) < cfg.kill_distance:
                components["kill"] = cfg.kill_reward
                return StepOutcome(
                    next_state, cfg.kill_reward, components, done=True, kill=True
                )

        try:
            return self._scored_outcome(state, next_state, action, components, iteration)
        except CalculatorError:
            components = {key: 0.0 for key in REWARD_COMPONENT_KEYS}
            components["kill"] = cfg.kill_reward
            return StepOutcome(
                next_state, cfg.kill_reward, components, done=True, kill=True
            )

    def _scored_outcome(self, state, next_state, action, components, iteration):
        cfg = self.config
        components["shape"] = cfg.shaping_per_step

        if cfg.coef_F != 0.0:
            e_prev = self._energy_cache
            e_next = self.calc.calculate(next_state.canvas, forces=False).energy
            e_atom = self.calc.isolated_energy(action.element)
            r_f = cfg.energy_scale * ((e_prev + e_atom) - e_next)
            components["F"] = cfg.coef_F * r_f
            self._energy_cache = e_next

        done = next_state.done
        valid = None
        delta_e = None
        dipole_mag = None
        if done:
            delta_e = atomization_delta(next_state.canvas, self.calc)
            x = cfg.energy_scale * delta_e
            components["A"] = cfg.coef_A * atomization_transform(x)
            valid = is_valid(next_state.canvas, cfg.bond_scale)
            components["V"] = cfg.coef_V * (1.0 if valid else 0.0)
            if cfg.dipole_schedule is not None:
                coef = cfg.dipole_schedule.value(iteration)
                if coef != 0.0:
                    res = self.calc.calculate(
                        next_state.canvas, forces=False, dipole=True
                    )
                    if res.dipole is None:
                        raise CalculatorError("calculator returned no dipole")
                    dipole_mag = float(np.linalg.norm(res.dipole))
                    components["dipole"] = coef * dipole_mag

        reward = sum(components.values())
        return StepOutcome(
            next_state,
            reward,
            components,
            done=done,
            kill=False,
            valid=valid,
            delta_e=delta_e,
            dipole_magnitude=dipole_mag,
        )

"""Synchronous PPO: rollout workers, GAE, clipped-surrogate optimization.

Workers are logical: each owns a private RNG stream, a private permuted
iterable over the bag set, and an env instance. They are stepped in
worker-id order, so a single process reproduces exactly what a parallel
collection phase would merge, and the whole trainer is deterministic
given (seed, config).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import nnkit as nn
from .chem import Bag, Canvas, State, element, parse_formula
from .env import LinearSchedule, MolEnv, RewardConfig
from .policy import Action, NetConfig, Policy

__all__ = [
    "TrainConfig",
    "Transition",
    "compute_gae",
    "gae_reference",
    "ppo_losses",
    "Trainer",
    "derive_worker_seed",
]


@dataclass
class TrainConfig:
    gamma: float = 1.0
    lam: float = 0.97
    clip_ratio: float = 0.2
    vf_coef: float = 0.5
    grad_clip: float = 0.5
    lr: float = 5e-5
    minibatch: int = 256
    steps_per_iter: int = 512
    workers: int = 8
    epochs: int = 4
    entropy_start_iter: int = 0
    entropy_end_iter: int = 30000
    entropy_start: float = 0.15
    entropy_end: float = 0.25
    normalize_advantages: bool = True

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lam must lie in [0, 1]")
        if self.clip_ratio <= 0:
            raise ValueError("clip_ratio must be positive")
        if self.steps_per_iter % self.workers != 0:
            raise ValueError("steps_per_iter must divide evenly across workers")

    def entropy_schedule(self) -> LinearSchedule:
        return LinearSchedule(
            self.entropy_start_iter,
            self.entropy_end_iter,
            self.entropy_start,
            self.entropy_end,
        )


@dataclass
class Transition:
    state: State
    action: Action
    reward: float
    value: float
    log_prob: float
    done: bool
    bag_key: str
    worker_id: int
    iteration: int


def compute_gae(rewards, values, dones, gamma: float, lam: float, bootstrap: float = 0.0):
    """Backward-recursion advantages and returns for one worker stream.

    values[t] = V(s_t). For the final entry, bootstrap stands in for
    V(s_{t+1}) when the stream was cut mid-episode; terminal steps
    bootstrap 0 through the (1 - done) factor.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError(
            f"length mismatch: rewards {len(rewards)}, values {len(values)},"
            f" dones {len(dones)}"
        )
    n = len(rewards)
    advantages = np.zeros(n, dtype=np.float64)
    future_adv = 0.0
    future_value = bootstrap
    for t in range(n - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * future_value * live - values[t]
        future_adv = delta + gamma * lam * live * future_adv
        advantages[t] = future_adv
        future_value = values[t]
    return advantages, advantages + values


def gae_reference(rewards, values, dones, gamma: float, lam: float, bootstrap: float = 0.0):
    """Brute-force double-sum oracle for the recursion (test use)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    deltas = np.zeros(n)
    for t in range(n):
        if dones[t]:
            next_v = 0.0
        elif t + 1 < n:
            next_v = values[t + 1]
        else:
            next_v = bootstrap
        deltas[t] = rewards[t] + gamma * next_v - values[t]
    advantages = np.zeros(n)
    for t in range(n):
        acc = 0.0
        factor = 1.0
        for k in range(t, n):
            acc += factor * deltas[k]
            if dones[k]:
                break
            factor *= gamma * lam
        advantages[t] = acc
    return advantages, advantages + values


@dataclass
class LossReport:
    clip: float
    value: float
    entropy: float
    total: float
    entropy_coef: float


def ppo_losses(batch, policy: Policy, iteration: int, cfg: TrainConfig):
    """Build the combined loss graph for one minibatch.

    Returns (total_loss_tensor, LossReport). Advantages in the batch are
    expected to be pre-normalized when cfg.normalize_advantages is on.
    """
    logps, entropies, values = [], [], []
    for sample in batch:
        lp, ent, val = policy.log_prob_and_entropy(sample["state"], sample["action"])
        logps.append(lp)
        entropies.append(ent)
        values.append(val)

    logp_new = nn.stack_scalars(logps)
    logp_old = np.array([s["log_prob"] for s in batch])
    adv = np.array([s["advantage"] for s in batch])
    returns = np.array([s["return"] for s in batch])

    ratio = nn.exp(nn.sub(logp_new, nn.tensor(logp_old)))
    surr_raw = nn.mul(ratio, nn.tensor(adv))
    surr_clipped = nn.mul(
        nn.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio), nn.tensor(adv)
    )
    loss_clip = nn.tmean(nn.minimum(surr_raw, surr_clipped))

    value_err = nn.sub(nn.stack_scalars(values), nn.tensor(returns))
    loss_value = nn.tmean(nn.mul(value_err, value_err))

    loss_entropy = nn.tmean(nn.stack_scalars(entropies))

    c2 = cfg.entropy_schedule().value(iteration)
    total = nn.add(
        nn.add(nn.mul(loss_clip, -1.0), nn.mul(loss_value, cfg.vf_coef)),
        nn.mul(loss_entropy, -c2),
    )
    report = LossReport(
        clip=loss_clip.item(),
        value=loss_value.item(),
        entropy=loss_entropy.item(),
        total=total.item(),
        entropy_coef=c2,
    )
    for name, val in (
        ("clip", report.clip),
        ("value", report.value),
        ("entropy", report.entropy),
    ):
        if not math.isfinite(val):
            raise FloatingPointError(
                f"non-finite PPO loss term {name}={val} at iteration {iteration};"
                f" batch size {len(batch)}, adv range"
                f" [{adv.min():.3g}, {adv.max():.3g}]"
            )
    return total, report


def derive_worker_seed(seed: int, worker_id: int) -> int:
    blob = f"{seed}:{worker_id}".encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


class Worker:
    """Logical rollout worker: private RNG, bag permutation, env state."""

    def __init__(self, worker_id: int, bags: list[Bag], env: MolEnv, seed: int):
        self.worker_id = worker_id
        self.bags = bags
        self.env = env
        self.rng = np.random.default_rng(derive_worker_seed(seed, worker_id))
        self.bag_order = list(self.rng.permutation(len(bags)))
        self.bag_pos = 0
        self.state: State | None = None
        self.episode_return = 0.0
        self.episode_bag = ""

    def _next_bag(self) -> Bag:
        if self.bag_pos >= len(self.bag_order):
            self.bag_order = list(self.rng.permutation(len(self.bags)))
            self.bag_pos = 0
        bag = self.bags[self.bag_order[self.bag_pos]]
        self.bag_pos += 1
        return bag

    def collect(self, policy: Policy, n_steps: int, iteration: int):
        """Advance n_steps, returning (transitions, finished episode infos)."""
        transitions: list[Transition] = []
        episodes: list[dict] = []
        for _ in range(n_steps):
            if self.state is None:
                bag = self._next_bag()
                self.state = self.env.reset(bag)
                self.episode_return = 0.0
                self.episode_bag = bag.formula_key
            action, log_prob, value, _ = policy.sample(self.state, self.rng)
            outcome = self.env.step(self.state, action, iteration)
            transitions.append(
                Transition(
                    state=self.state,
                    action=action,
                    reward=outcome.reward,
                    value=value,
                    log_prob=log_prob,
                    done=outcome.done,
                    bag_key=self.episode_bag,
                    worker_id=self.worker_id,
                    iteration=iteration,
                )
            )
            self.episode_return += outcome.reward
            if outcome.done:
                episodes.append(
                    {
                        "worker_id": self.worker_id,
                        "iteration": iteration,
                        "bag": self.episode_bag,
                        "terminal_reward": outcome.reward,
                        "episode_return": self.episode_return,
                        "kill": outcome.kill,
                        "valid": bool(outcome.valid) if outcome.valid is not None else False,
                        "delta_e": outcome.delta_e,
                        "dipole": outcome.dipole_magnitude,
                        "canvas": outcome.next_state.canvas,
                        "components": outcome.reward_components,
                    }
                )
                self.state = None
            else:
                self.state = outcome.next_state
        return transitions, episodes

    # --- resume support ------------------------------------------------------

    def snapshot(self) -> dict:
        snap = {
            "rng": self.rng.bit_generator.state,
            "bag_order": [int(i) for i in self.bag_order],
            "bag_pos": self.bag_pos,
            "episode_return": self.episode_return,
            "episode_bag": self.episode_bag,
            "energy_cache": self.env.energy_cache,
            "state": None,
        }
        if self.state is not None:
            snap["state"] = {
                "elements": [el.symbol for el in self.state.canvas.elements],
                "positions": self.state.canvas.positions.tolist(),
                "bag": self.state.bag.formula_key,
                "step": self.state.step,
                "horizon": self.state.episode_horizon,
            }
        return snap

    def restore(self, snap: dict) -> None:
        self.rng.bit_generator.state = snap["rng"]
        self.bag_order = [int(i) for i in snap["bag_order"]]
        self.bag_pos = int(snap["bag_pos"])
        self.episode_return = float(snap["episode_return"])
        self.episode_bag = snap.get("episode_bag", "")
        self.env.set_energy_cache(float(snap["energy_cache"]))
        if snap["state"] is None:
            self.state = None
        else:
            st = snap["state"]
            canvas = Canvas([element(s) for s in st["elements"]], st["positions"])
            bag = parse_formula(st["bag"]) if st["bag"] else Bag({})
            self.state = State(canvas, bag, int(st["step"]), int(st["horizon"]))


class Trainer:
    """Owns the policy, workers, and optimization loop."""

    def __init__(
        self,
        policy: Policy,
        make_env,
        bags: list[Bag],
        cfg: TrainConfig,
        seed: int,
        cfg_hash: str = "",
    ):
        self.policy = policy
        self.cfg = cfg
        self.seed = seed
        self.cfg_hash = cfg_hash
        self.iteration = 0
        self.total_steps = 0
        self.shuffle_rng = np.random.default_rng(derive_worker_seed(seed, -1))
        self.workers = [
            Worker(w, bags, make_env(), seed) for w in range(cfg.workers)
        ]
        self.episode_sink = None  # optional callback(episode_info)

    def train_iteration(self) -> dict:
        cfg = self.cfg
        iteration = self.iteration
        per_worker = cfg.steps_per_iter // cfg.workers
        all_samples: list[dict] = []
        episode_infos: list[dict] = []

        for worker in self.workers:
            transitions, episodes = worker.collect(self.policy, per_worker, iteration)
            episode_infos.extend(episodes)
            rewards = [t.reward for t in transitions]
            values = [t.value for t in transitions]
            dones = [t.done for t in transitions]
            bootstrap = 0.0
            if transitions and not transitions[-1].done:
                bootstrap = self.policy.state_value(worker.state)
            adv, ret = compute_gae(rewards, values, dones, cfg.gamma, cfg.lam, bootstrap)
            for t, a, r in zip(transitions, adv, ret):
                all_samples.append(
                    {
                        "state": t.state,
                        "action": t.action,
                        "log_prob": t.log_prob,
                        "advantage": a,
                        "return": r,
                    }
                )

        self.total_steps += len(all_samples)
        if self.episode_sink is not None:
            for info in episode_infos:
                self.episode_sink(info)

        if cfg.normalize_advantages:
            adv = np.array([s["advantage"] for s in all_samples])
            std = max(float(adv.std()), 1e-8)
            mean = float(adv.mean())
            for s in all_samples:
                s["advantage"] = (s["advantage"] - mean) / std

        reports: list[LossReport] = []
        grad_norms: list[float] = []
        n = len(all_samples)
        for _ in range(cfg.epochs):
            order = self.shuffle_rng.permutation(n)
            for start in range(0, n, cfg.minibatch):
                batch = [all_samples[k] for k in order[start : start + cfg.minibatch]]
                self.policy.store.zero_grad()
                total, report = ppo_losses(batch, self.policy, iteration, cfg)
                nn.backward(total)
                norm = nn.optimizer_step(
                    self.policy.store, cfg.lr, grad_clip=cfg.grad_clip
                )
                reports.append(report)
                grad_norms.append(norm)

        sigma = np.exp(self.policy.store.params["log_sigma"].data)
        finished = len(episode_infos)
        metrics = {
            "iter": iteration,
            "steps": self.total_steps,
            "episodes": finished,
            "mean_terminal_reward": (
                float(np.mean([e["terminal_reward"] for e in episode_infos]))
                if finished
                else None
            ),
            "mean_episode_return": (
                float(np.mean([e["episode_return"] for e in episode_infos]))
                if finished
                else None
            ),
            "validity_rate": (
                float(np.mean([1.0 if e["valid"] else 0.0 for e in episode_infos]))
                if finished
                else None
            ),
            "kill_rate": (
                float(np.mean([1.0 if e["kill"] else 0.0 for e in episode_infos]))
                if finished
                else None
            ),
            "loss_clip": float(np.mean([r.clip for r in reports])),
            "loss_value": float(np.mean([r.value for r in reports])),
            "loss_entropy": float(np.mean([r.entropy for r in reports])),
            "entropy_coef": reports[-1].entropy_coef if reports else None,
            "grad_norm": float(np.mean(grad_norms)) if grad_norms else None,
            "sigma_d": float(sigma[0]),
            "sigma_alpha": float(sigma[1]),
            "sigma_psi": float(sigma[2]),
        }
        self.iteration += 1
        return metrics

    # --- checkpointing --------------------------------------------------------

    def save(self, path) -> None:
        extra = {
            "iteration": self.iteration,
            "total_steps": self.total_steps,
            "seed": self.seed,
            "shuffle_rng": self.shuffle_rng.bit_generator.state,
            "workers": [w.snapshot() for w in self.workers],
        }
        nn.save_checkpoint(path, self.policy.store, self.cfg_hash, extra=extra)

    def load(self, path) -> None:
        _, extra = nn.load_checkpoint(
            path, self.policy.store, expected_hash=self.cfg_hash or None
        )
        if extra is None:
            raise nn.CheckpointError(f"checkpoint {path!s} carries no trainer state")
        self.iteration = int(extra["iteration"])
        self.total_steps = int(extra["total_steps"])
        self.shuffle_rng.bit_generator.state = extra["shuffle_rng"]
        if len(extra["workers"]) != len(self.workers):
            raise nn.CheckpointError(
                f"worker count mismatch: checkpoint {len(extra['workers'])},"
                f" config {len(self.workers)}"
            )
        for worker, snap in zip(self.workers, extra["workers"]):
            worker.restore(snap)

"""Hierarchical actor-critic over the molecule-construction state.

Atom features come from distance-only message passing, so every head is
invariant to rigid motions of the canvas. The action factorizes into a
categorical focus choice, a categorical element choice conditioned on the
focal atom, and three independent Gaussians over the local spherical
coordinates conditioned on both. Continuous log-densities are evaluated at
the raw (pre-clamp) samples; clamping belongs to the environment's action
interpretation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nnkit as nn
from .chem import ALPHA_EPS, Canvas, Element, ELEMENTS, State, SYMBOL_ORDER

__all__ = ["NetConfig", "Action", "PolicyOutput", "Policy"]

N_ELEMENTS = len(SYMBOL_ORDER)
_MASK_VALUE = -1e9

# environment-side interpretation bounds for raw continuous samples
D_SAMPLE_MIN = 0.1
D_SAMPLE_MAX = 3.0

# fixed featurization scale for bag counts
_BAG_SCALE = 0.25


@dataclass
class NetConfig:
    width: int = 64
    interactions: int = 2
    cutoff: float = 5.0
    n_rbf: int = 16
    d_min: float = 0.8
    d_max: float = 1.8
    init_sigma_d: float = 0.1  # Angstrom
    init_sigma_angle: float = 0.25  # rad

    def __post_init__(self):
        for name in ("width", "interactions", "cutoff", "n_rbf"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.d_min < self.d_max:
            raise ValueError("need 0 < d_min < d_max")


@dataclass(frozen=True)
class Action:
    """One construction step. Continuous values are raw samples.

    At t=0 the first atom goes to the origin: focus and the spatial
    coordinates are absent and contribute nothing to the log-probability.
    """

    element: Element
    focus: int | None = None
    d: float | None = None
    alpha: float | None = None
    psi: float | None = None

    def effective_coords(self) -> tuple[float, float, float]:
        """Clamped/wrapped values the environment actually places with."""
        d = min(max(self.d, D_SAMPLE_MIN), D_SAMPLE_MAX)
        alpha = min(max(self.alpha, ALPHA_EPS), math.pi - ALPHA_EPS)
        psi = math.remainder(self.psi, 2.0 * math.pi)
        if psi <= -math.pi:
            psi = math.pi
        return d, alpha, psi


@dataclass
class PolicyOutput:
    focus_logits: nn.Tensor | None  # None on an empty canvas
    element_logits: nn.Tensor  # masked, one slot per SYMBOL_ORDER entry
    mu_d: nn.Tensor | None
    mu_alpha: nn.Tensor | None
    mu_psi: nn.Tensor | None
    log_sigma: nn.Tensor  # (3,) global learnable [d, alpha, psi]
    value: nn.Tensor


def _wrap_psi(psi: float) -> float:
    out = math.remainder(psi, 2.0 * math.pi)
    return math.pi if out <= -math.pi else out


class Policy:
    """Policy + value networks over a shared embedding trunk."""

    def __init__(self, cfg: NetConfig, store: nn.ParamStore):
        self.cfg = cfg
        self.store = store
        self._element_index = {ELEMENTS[s]: k for k, s in enumerate(SYMBOL_ORDER)}
        self._build_params()

    def _build_params(self):
        s, w = self.store, self.cfg.width
        s.param("embed.W", (N_ELEMENTS, w))
        s.param("embed.b", (w,), init="zeros")
        for layer in range(self.cfg.interactions):
            s.param(f"int{layer}.filter.W", (self.cfg.n_rbf, w))
            s.param(f"int{layer}.filter.b", (w,), init="zeros")
            s.param(f"int{layer}.msg.W", (w, w))
            s.param(f"int{layer}.upd_m.W", (w, w))
            s.param(f"int{layer}.upd_h.W", (w, w))
            s.param(f"int{layer}.upd.b", (w,), init="zeros")
        s.param("bag.W", (N_ELEMENTS, w))
        s.param("bag.b", (w,), init="zeros")
        s.param("focus.W1", (w, w))
        s.param("focus.b1", (w,), init="zeros")
        s.param("focus.W2", (w, 1))
        s.param("focus.b2", (1,), init="zeros")
        s.param("elem_embed.W", (N_ELEMENTS, w))
        s.param("elem.W1", (2 * w, w))
        s.param("elem.b1", (w,), init="zeros")
        s.param("elem.W2", (w, N_ELEMENTS))
        s.param("elem.b2", (N_ELEMENTS,), init="zeros")
        s.param("spatial.W1", (2 * w, w))
        s.param("spatial.b1", (w,), init="zeros")
        s.param("spatial.W2", (w, 3))
        s.param("spatial.b2", (3,), init="zeros")
        s.constant(
            "log_sigma",
            [
                math.log(self.cfg.init_sigma_d),
                math.log(self.cfg.init_sigma_angle),
                math.log(self.cfg.init_sigma_angle),
            ],
        )
        s.param("value.W1", (2 * w, w))
        s.param("value.b1", (w,), init="zeros")
        s.param("value.W2", (w, 1))
        s.param("value.b2", (1,), init="zeros")

    def n_parameters(self) -> int:
        return self.store.n_parameters()

    # --- embedding ---------------------------------------------------------

    def _canvas_features(self, canvas: Canvas):
        """Cached geometry featurization: one-hot, pair lists, radial feats.

        Canvases are append-only values, so caching on the instance is
        safe; the key guards against config changes.
        """
        key = (self.cfg.cutoff, self.cfg.n_rbf)
        cached = getattr(canvas, "_policy_feats", None)
        if cached is not None and cached[0] == key:
            return cached[1]
        n = len(canvas)
        onehot = np.zeros((n, N_ELEMENTS))
        for i, el in enumerate(canvas.elements):
            onehot[i, self._element_index[el]] = 1.0
        ii = jj = rbf = fcut = None
        if n > 1:
            diff = canvas.positions[:, None, :] - canvas.positions[None, :, :]
            rmat = np.sqrt((diff * diff).sum(-1))
            ii, jj = np.nonzero(~np.eye(n, dtype=bool) & (rmat < self.cfg.cutoff))
            if len(ii):
                rij = rmat[ii, jj]
                rbf = nn.radial_basis(rij, self.cfg.n_rbf, self.cfg.cutoff)
                fcut = nn.cosine_cutoff(rij, self.cfg.cutoff)[:, None]
            else:
                ii = None
        feats = (onehot, ii, jj, rbf, fcut)
        canvas._policy_feats = (key, feats)
        return feats

    def embed(self, state: State):
        """Per-atom features, pooled state vector, and bag vector."""
        s = self.store
        cfg = self.cfg
        bag_in = nn.tensor(state.bag.count_vector() * _BAG_SCALE)
        bag_vec = nn.linear(bag_in, s.params["bag.W"], s.params["bag.b"])

        n = len(state.canvas)
        if n == 0:
            pooled = nn.concat([nn.tensor(np.zeros(cfg.width)), bag_vec])
            return None, pooled, bag_vec

        onehot, ii, jj, rbf, fcut = self._canvas_features(state.canvas)
        h = nn.linear(nn.tensor(onehot), s.params["embed.W"], s.params["embed.b"])

        if ii is not None:
            rbf_t = nn.tensor(rbf)
            fcut_t = nn.tensor(fcut)
            for layer in range(cfg.interactions):
                filt = nn.mul(
                    nn.linear(
                        rbf_t,
                        s.params[f"int{layer}.filter.W"],
                        s.params[f"int{layer}.filter.b"],
                    ),
                    fcut_t,
                )
                hm = nn.matmul(h, s.params[f"int{layer}.msg.W"])
                msg = nn.mul(nn.gather_rows(hm, jj), filt)
                agg = nn.scatter_add(msg, ii, n)
                upd = nn.tanh(
                    nn.linear2(
                        agg,
                        s.params[f"int{layer}.upd_m.W"],
                        h,
                        s.params[f"int{layer}.upd_h.W"],
                        s.params[f"int{layer}.upd.b"],
                    )
                )
                h = nn.add(h, upd)

        pooled = nn.concat([nn.tsum(h, axis=0), bag_vec])
        return h, pooled, bag_vec

    # --- heads --------------------------------------------------------------

    def _focus_logits(self, atom_feats) -> nn.Tensor:
        s = self.store
        hidden = nn.tanh(nn.linear(atom_feats, s.params["focus.W1"], s.params["focus.b1"]))
        return nn.reshape(nn.linear(hidden, s.params["focus.W2"], s.params["focus.b2"]), (-1,))

    def _element_logits(self, focal_feat, bag_vec, bag) -> nn.Tensor:
        s = self.store
        joint = nn.concat([focal_feat, bag_vec])
        hidden = nn.tanh(nn.linear(joint, s.params["elem.W1"], s.params["elem.b1"]))
        raw = nn.linear(hidden, s.params["elem.W2"], s.params["elem.b2"])
        mask = np.array(
            [0.0 if bag.count(ELEMENTS[sym]) > 0 else _MASK_VALUE for sym in SYMBOL_ORDER]
        )
        return nn.add(raw, nn.tensor(mask))

    def _spatial_means(self, focal_feat, el: Element):
        s, cfg = self.store, self.cfg
        eemb = nn.reshape(
            nn.gather_rows(s.params["elem_embed.W"], [self._element_index[el]]), (-1,)
        )
        joint = nn.concat([focal_feat, eemb])
        hidden = nn.tanh(nn.linear(joint, s.params["spatial.W1"], s.params["spatial.b1"]))
        raw = nn.linear(hidden, s.params["spatial.W2"], s.params["spatial.b2"])
        mu_d = nn.add(
            nn.mul(nn.sigmoid(nn.index(raw, 0)), cfg.d_max - cfg.d_min), cfg.d_min
        )
        mu_alpha = nn.mul(nn.sigmoid(nn.index(raw, 1)), math.pi)
        mu_psi = nn.mul(nn.tanh(nn.index(raw, 2)), math.pi)
        return mu_d, mu_alpha, mu_psi

    def _value(self, pooled) -> nn.Tensor:
        s = self.store
        hidden = nn.tanh(nn.linear(pooled, s.params["value.W1"], s.params["value.b1"]))
        return nn.index(nn.linear(hidden, s.params["value.W2"], s.params["value.b2"]), 0)

    def forward(
        self, state: State, focus: int | None = None, element: Element | None = None
    ) -> PolicyOutput:
        """Full head evaluation for a given (focus, element) conditioning.

        Spatial means are present only when both discrete choices are
        given and the canvas is non-empty.
        """
        atom_feats, pooled, bag_vec = self.embed(state)
        focus_logits = None if atom_feats is None else self._focus_logits(atom_feats)
        if atom_feats is None:
            focal_feat = nn.tensor(np.zeros(self.cfg.width))
        else:
            focal_feat = nn.reshape(
                nn.gather_rows(atom_feats, [focus if focus is not None else 0]), (-1,)
            )
        element_logits = self._element_logits(focal_feat, bag_vec, state.bag)
        mu_d = mu_alpha = mu_psi = None
        if atom_feats is not None and focus is not None and element is not None:
            mu_d, mu_alpha, mu_psi = self._spatial_means(focal_feat, element)
        return PolicyOutput(
            focus_logits=focus_logits,
            element_logits=element_logits,
            mu_d=mu_d,
            mu_alpha=mu_alpha,
            mu_psi=mu_psi,
            log_sigma=self.store.params["log_sigma"],
            value=self._value(pooled),
        )

    # --- sampling and scoring ------------------------------------------------

    def sample(self, state: State, rng: np.random.Generator, greedy: bool = False):
        """Draw an action; returns (action, log_prob, value, per_head).

        Greedy mode takes categorical argmaxes and Gaussian means (the
        single-molecule deterministic collection mode).
        """
        with nn.no_grad():
            atom_feats, pooled, bag_vec = self.embed(state)
            per_head: dict[str, float] = {}
            if atom_feats is None:
                focus = None
                per_head["focus"] = 0.0
                focal_feat = nn.tensor(np.zeros(self.cfg.width))
            else:
                logits = self._focus_logits(atom_feats)
                logp = nn.log_softmax(logits).data
                fprobs = np.exp(logp)
                fprobs = fprobs / fprobs.sum()
                focus = (
                    int(np.argmax(logp))
                    if greedy
                    else int(rng.choice(len(logp), p=fprobs))
                )
                per_head["focus"] = float(logp[focus])
                focal_feat = nn.reshape(nn.gather_rows(atom_feats, [focus]), (-1,))

            elem_logits = self._element_logits(focal_feat, bag_vec, state.bag)
            elem_logp = nn.log_softmax(elem_logits).data
            probs = np.exp(elem_logp)
            probs = probs / probs.sum()
            eidx = int(np.argmax(elem_logp)) if greedy else int(rng.choice(N_ELEMENTS, p=probs))
            el = ELEMENTS[SYMBOL_ORDER[eidx]]
            per_head["element"] = float(elem_logp[eidx])

            if atom_feats is None:
                action = Action(element=el)
                log_prob = sum(per_head.values())
                return action, log_prob, float(self._value(pooled).data), per_head

            mu_d, mu_alpha, mu_psi = self._spatial_means(focal_feat, el)
            sigma = np.exp(self.store.params["log_sigma"].data)
            mus = np.array([mu_d.item(), mu_alpha.item(), mu_psi.item()])
            if greedy:
                draws = mus.copy()
            else:
                draws = mus + sigma * rng.standard_normal(3)
            names = ("d", "alpha", "psi")
            for k, name in enumerate(names):
                z = (draws[k] - mus[k]) / sigma[k]
                per_head[name] = float(
                    -0.5 * z * z - math.log(sigma[k]) - 0.5 * nn.LOG_2PI
                )
            action = Action(
                element=el, focus=focus, d=float(draws[0]), alpha=float(draws[1]), psi=float(draws[2])
            )
            log_prob = sum(per_head.values())
            return action, log_prob, float(self._value(pooled).data), per_head

    def log_prob_and_entropy(self, state: State, action: Action):
        """Differentiable (log_prob, categorical_entropy, value) of an action."""
        n = len(state.canvas)
        if n > 0 and (action.focus is None or not 0 <= action.focus < n):
            raise ValueError(
                f"invalid focus {action.focus} for a canvas of {n} atoms"
            )
        out = self.forward(state, focus=action.focus, element=action.element)
        terms = []
        entropy_terms = []
        if out.focus_logits is not None:
            flp = nn.log_softmax(out.focus_logits)
            terms.append(nn.index(flp, action.focus))
            probs = nn.exp(flp)
            entropy_terms.append(nn.mul(nn.tsum(nn.mul(probs, flp)), -1.0))
        eidx = self._element_index[action.element]
        elp = nn.log_softmax(out.element_logits)
        terms.append(nn.index(elp, eidx))
        eprobs = nn.exp(elp)
        entropy_terms.append(nn.mul(nn.tsum(nn.mul(eprobs, elp)), -1.0))

        if out.mu_d is not None:
            lsg = out.log_sigma
            terms.append(nn.gaussian_log_pdf(action.d, out.mu_d, nn.index(lsg, 0)))
            terms.append(nn.gaussian_log_pdf(action.alpha, out.mu_alpha, nn.index(lsg, 1)))
            terms.append(nn.gaussian_log_pdf(action.psi, out.mu_psi, nn.index(lsg, 2)))

        log_prob = terms[0]
        for t in terms[1:]:
            log_prob = nn.add(log_prob, t)
        entropy = entropy_terms[0]
        for t in entropy_terms[1:]:
            entropy = nn.add(entropy, t)
        return log_prob, entropy, out.value

    def state_value(self, state: State) -> float:
        with nn.no_grad():
            _, pooled, _ = self.embed(state)
            return float(self._value(pooled).data)

"""Agent-side state estimation: a bootstrap particle filter over student states.

The filter is generic over a particle *model* (propagate / log_likelihood /
select / unpack), so the same update recursion runs both on the full student
dynamics and on small discrete chains used to cross-check it against exact
enumeration. The student model propagates a structure-of-arrays particle set
through the very same transition equations the simulator uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Protocol

import numpy as np

from .graph import KnowledgeGraph
from .student import (
    FIELD_ORDER,
    AffectState,
    LatentState,
    Observation,
    ProfileRanges,
    ScenarioConfig,
    StudentProfile,
    TutorAction,
    activation_probability_arrays,
    affect_transition,
    ask_probability_arrays,
    forgetting_factor,
    mastery_gain,
    zpd_indicator,
)

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class ParticleModel(Protocol):
    def propagate(self, states: Any, action: TutorAction, rng: np.random.Generator) -> Any: ...

    def log_likelihood(self, states: Any, action: TutorAction, obs: Observation) -> np.ndarray: ...

    def select(self, states: Any, idx: np.ndarray) -> Any: ...

    def unpack(self, states: Any) -> list: ...


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int = 256
    resample_threshold: float = 0.5

    def validate(self) -> None:
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if not 0.0 <= self.resample_threshold <= 1.0:
            raise ValueError("resample_threshold outside [0, 1]")


@dataclass
class BeliefState:
    model: Any
    states: Any
    weights: np.ndarray
    step: int = 0
    ess: float = 0.0
    degenerate: bool = False

    @property
    def n(self) -> int:
        return len(self.weights)

    @property
    def particles(self) -> list[tuple[Any, float]]:
        return list(zip(self.model.unpack(self.states), self.weights.tolist()))


def effective_sample_size(weights: np.ndarray) -> float:
    return float(1.0 / np.sum(np.square(weights)))


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Systematic (low-variance) resampling; returns the selected indices."""
    n = len(weights)
    positions = (np.arange(n) + rng.random()) / n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions, side="right").astype(np.int64)


def normal_logpdf(x, mean, sigma):
    z = (np.asarray(x) - np.asarray(mean)) / sigma
    return -0.5 * z * z - math.log(sigma) - LOG_SQRT_2PI


def normal_logcdf(x, mean, sigma):
    z = (np.asarray(x) - np.asarray(mean)) / (sigma * math.sqrt(2.0))
    p = 0.5 * (1.0 + _erf(z))
    return np.log(np.clip(p, 1e-300, 1.0))


def _erf(z):
    try:
        from scipy.special import erf as _scipy_erf

        return _scipy_erf(z)
    except ImportError:  # pragma: no cover
        return np.vectorize(math.erf)(z)


def censored_normal_loglik(observed, mean, sigma):
    """Log density of clamp(mean + noise, 0, 1) with Gaussian noise.

    Interior observations get the Gaussian density; observations pinned at the
    clamp boundaries get the corresponding tail mass.
    """
    mean = np.asarray(mean, dtype=np.float64)
    if observed <= 0.0:
        return normal_logcdf(0.0, mean, sigma)
    if observed >= 1.0:
        return np.log(np.clip(1.0 - np.exp(normal_logcdf(1.0, mean, sigma)), 1e-300, 1.0))
    return normal_logpdf(observed, mean, sigma)


def bernoulli_loglik(outcome: bool, p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), 0.0, 1.0)
    chosen = p if outcome else 1.0 - p
    return np.log(np.clip(chosen, 1e-300, 1.0))


# ---------------------------------------------------------------------------
# student particle model
# ---------------------------------------------------------------------------


@dataclass
class StudentParticles:
    """Structure-of-arrays particle set; leading axis is the particle index."""

    profile: dict[str, np.ndarray]
    mastery: np.ndarray
    last_active: np.ndarray
    misconceptions: np.ndarray
    affect: np.ndarray
    shallow_timer: np.ndarray
    t: int = 0

    @property
    def n(self) -> int:
        return self.mastery.shape[0]

    def select(self, idx: np.ndarray) -> "StudentParticles":
        return StudentParticles(
            profile={k: v[idx] for k, v in self.profile.items()},
            mastery=self.mastery[idx],
            last_active=self.last_active[idx],
            misconceptions=self.misconceptions[idx],
            affect=self.affect[idx],
            shallow_timer=self.shallow_timer[idx],
            t=self.t,
        )

    def to_latent_states(self) -> list[LatentState]:
        out = []
        for i in range(self.n):
            profile = StudentProfile(**{k: float(v[i]) for k, v in self.profile.items()})
            a = self.affect[i]
            out.append(
                LatentState(
                    profile=profile,
                    mastery=self.mastery[i].copy(),
                    last_active=self.last_active[i].copy(),
                    misconceptions=self.misconceptions[i].copy(),
                    affect=AffectState(float(a[0]), float(a[1]), float(a[2]), float(a[3])),
                    t=self.t,
                    shallow_timer=self.shallow_timer[i].copy(),
                )
            )
        return out


class StudentBeliefModel:
    """Particle dynamics and observation likelihood shared with the simulator."""

    def __init__(self, graph: KnowledgeGraph, config: ScenarioConfig | None = None):
        self.graph = graph
        self.config = config or ScenarioConfig()

    def sample_prior(self, n: int, rng: np.random.Generator) -> StudentParticles:
        cfg = self.config
        profile = {}
        for name in FIELD_ORDER:
            lo, hi = getattr(cfg.profile_ranges, name)
            profile[name] = rng.uniform(lo, hi, size=n) if hi > lo else np.full(n, lo)
        lo, hi = cfg.init_mastery
        c = self.graph.n_concepts
        return StudentParticles(
            profile=profile,
            mastery=rng.uniform(lo, hi, size=(n, c)),
            last_active=np.zeros((n, c), dtype=np.int64),
            misconceptions=np.zeros((n, self.graph.n_rules), dtype=np.int8),
            affect=np.tile(cfg.init_affect.as_array(), (n, 1)),
            shallow_timer=np.zeros((n, c), dtype=np.int64),
        )

    def propagate(
        self, states: StudentParticles, action: TutorAction, rng: np.random.Generator
    ) -> StudentParticles:
        cfg = self.config
        target = action.target
        alpha = states.profile["alpha"]
        w_zpd = states.profile["w_zpd"]
        s_memory = states.profile["s_memory"]

        m_pre = states.mastery[:, target].copy()
        in_zpd = zpd_indicator(m_pre, action.d_action, w_zpd)
        spoonfed = action.directness > cfg.spoonfeed_directness

        factor = forgetting_factor(
            s_memory[:, None], states.shallow_timer > 0, cfg.rho_shallow
        )
        mastery = states.mastery * factor
        gate = np.ones_like(in_zpd) if spoonfed else in_zpd
        mastery[:, target] = mastery_gain(m_pre, alpha, gate)

        shallow = np.maximum(states.shallow_timer - 1, 0)
        if spoonfed:
            shallow[:, target] = cfg.shallow_steps

        bits = states.misconceptions.copy()
        rules = self.graph.rules_on(target)
        if rules:
            rules_arr = np.array(rules, dtype=np.int64)
            beta = self.graph.rule_beta[rules_arr]
            gamma = self.graph.rule_gamma[rules_arr]
            m_host = mastery[:, target]
            p = activation_probability_arrays(
                beta[None, :], gamma[None, :], action.ambiguity, m_host[:, None]
            )
            draws = rng.random((states.n, len(rules)))
            block = bits[:, rules_arr]
            activate = (block == 0) & (draws < p)
            clear = (block == 1) & (m_host[:, None] >= cfg.theta_fix)
            block = np.where(activate, 1, np.where(clear, 0, block)).astype(np.int8)
            bits[:, rules_arr] = block

        affect = affect_transition(
            states.affect, m_pre, action.d_action, w_zpd, in_zpd, action.tone, cfg.affect
        )

        t_new = states.t + 1
        last_active = states.last_active.copy()
        last_active[:, target] = t_new
        return StudentParticles(
            profile=states.profile,
            mastery=mastery,
            last_active=last_active,
            misconceptions=bits,
            affect=affect,
            shallow_timer=shallow,
            t=t_new,
        )

    def log_likelihood(
        self, states: StudentParticles, action: TutorAction, obs: Observation
    ) -> np.ndarray:
        cfg = self.config
        m_target = states.mastery[:, action.target]
        if cfg.sigma_obs > 0:
            ll = censored_normal_loglik(obs.correctness, m_target, cfg.sigma_obs)
        else:
            ll = np.where(np.isclose(m_target, obs.correctness), 0.0, -np.inf)
        p_ask = ask_probability_arrays(
            states.profile["curiosity"],
            states.profile["confidence"],
            states.affect[:, 0],
            cfg.kappa,
        )
        ll = ll + bernoulli_loglik(obs.asked_question, p_ask)
        confused = states.affect[:, 0] > cfg.confusion_threshold
        ll = ll + np.where(confused == obs.confusion, 0.0, -np.inf)
        return ll

    def select(self, states: StudentParticles, idx: np.ndarray) -> StudentParticles:
        return states.select(idx)

    def unpack(self, states: StudentParticles) -> list[LatentState]:
        return states.to_latent_states()


# ---------------------------------------------------------------------------
# filter recursion
# ---------------------------------------------------------------------------


def init_belief(
    n_particles: int,
    profile_ranges: ProfileRanges,
    graph: KnowledgeGraph,
    rng: np.random.Generator,
    scenario: ScenarioConfig | None = None,
) -> BeliefState:
    """Draw the particle prior: i.i.d. profiles and initial mastery, uniform weights."""
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    scenario = scenario or ScenarioConfig()
    if profile_ranges is not None and profile_ranges is not scenario.profile_ranges:
        scenario = replace(scenario, profile_ranges=profile_ranges)
    model = StudentBeliefModel(graph, scenario)
    states = model.sample_prior(n_particles, rng)
    weights = np.full(n_particles, 1.0 / n_particles)
    return BeliefState(
        model=model, states=states, weights=weights, step=0,
        ess=effective_sample_size(weights),
    )


def filter_update(
    belief: BeliefState,
    action: TutorAction,
    obs: Observation,
    rng: np.random.Generator,
    resample_threshold: float = 0.5,
) -> BeliefState:
    """One predict/weight/resample cycle of the bootstrap filter."""
    states = belief.model.propagate(belief.states, action, rng)
    log_w = np.log(np.clip(belief.weights, 1e-300, None))
    log_w = log_w + belief.model.log_likelihood(states, action, obs)

    degenerate = False
    peak = np.max(log_w)
    if not np.isfinite(peak):
        weights = np.full(belief.n, 1.0 / belief.n)
        degenerate = True
    else:
        weights = np.exp(log_w - peak)
        weights /= weights.sum()

    ess = effective_sample_size(weights)
    if ess < resample_threshold * belief.n:
        idx = systematic_resample(weights, rng)
        states = belief.model.select(states, idx)
        weights = np.full(belief.n, 1.0 / belief.n)
        ess = effective_sample_size(weights)

    return BeliefState(
        model=belief.model, states=states, weights=weights,
        step=belief.step + 1, ess=ess, degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# feature extraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BeliefFeatures:
    mean_mastery: np.ndarray
    misconception_marginal: np.ndarray
    mean_affect: np.ndarray
    mastery_variance: np.ndarray
    entropy: float

    def vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.mean_mastery,
                self.misconception_marginal,
                self.mean_affect,
                self.mastery_variance,
                [self.entropy],
            ]
        )

    @staticmethod
    def dim(n_concepts: int, n_rules: int) -> int:
        return 2 * n_concepts + n_rules + 5


def features(belief: BeliefState) -> BeliefFeatures:
    """Weighted posterior moments consumed by the policy."""
    states: StudentParticles = belief.states
    w = belief.weights
    mean_mastery = w @ states.mastery
    second = w @ np.square(states.mastery)
    variance = np.maximum(second - np.square(mean_mastery), 0.0)
    if states.misconceptions.shape[1]:
        marginal = w @ states.misconceptions.astype(np.float64)
    else:
        marginal = np.zeros(0)
    mean_affect = w @ states.affect
    if belief.n > 1:
        positive = w[w > 0]
        entropy = float(-(positive @ np.log(positive)) / math.log(belief.n))
    else:
        entropy = 0.0
    return BeliefFeatures(
        mean_mastery=mean_mastery,
        misconception_marginal=marginal,
        mean_affect=mean_affect,
        mastery_variance=variance,
        entropy=entropy,
    )

"""Surrogate student environment: latent cognitive state and transition dynamics.

The latent state couples four blocks: a static profile (learning rate, ZPD
width, memory stability, personality traits), a per-concept mastery vector
with exponential forgetting, a binary misconception vector driven by a
logistic activation rule, and a 4-dimensional affect vector. A single
``step`` composes, in order: forgetting, ZPD-gated mastery update,
misconception activation/remediation, affect update, time increment, and
observation emission.

All transition rules are written against numpy arrays with an arbitrary
leading batch shape so the belief filter can propagate a whole particle set
through exactly the same code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .graph import KnowledgeGraph, MisconceptionRule, is_valid_link


def clamp01(x):
    return np.clip(x, 0.0, 1.0)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProfileRanges:
    """Uniform sampling ranges for each static profile field."""

    alpha: tuple[float, float] = (0.1, 0.9)
    w_zpd: tuple[float, float] = (0.1, 0.5)
    s_memory: tuple[float, float] = (10.0, 50.0)
    curiosity: tuple[float, float] = (0.0, 1.0)
    confidence: tuple[float, float] = (0.0, 1.0)
    expressiveness: tuple[float, float] = (0.0, 1.0)

    _BOUNDS = {
        "alpha": (0.1, 0.9),
        "w_zpd": (1e-9, 1.0),
        "s_memory": (1e-9, math.inf),
        "curiosity": (0.0, 1.0),
        "confidence": (0.0, 1.0),
        "expressiveness": (0.0, 1.0),
    }

    def validate(self) -> None:
        for name, (type_lo, type_hi) in self._BOUNDS.items():
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ValueError(f"profile range {name}=({lo}, {hi}) is not a valid interval")
            if lo < type_lo or hi > type_hi:
                raise ValueError(
                    f"profile range {name}=({lo}, {hi}) outside type bounds [{type_lo}, {type_hi}]"
                )


FIELD_ORDER = ("alpha", "w_zpd", "s_memory", "curiosity", "confidence", "expressiveness")


@dataclass(frozen=True)
class StudentProfile:
    alpha: float
    w_zpd: float
    s_memory: float
    curiosity: float
    confidence: float
    expressiveness: float

    def validate(self) -> None:
        if not 0.1 <= self.alpha <= 0.9:
            raise ValueError(f"alpha {self.alpha} outside [0.1, 0.9]")
        if not 0.0 < self.w_zpd <= 1.0:
            raise ValueError(f"w_zpd {self.w_zpd} outside (0, 1]")
        if not self.s_memory > 0:
            raise ValueError(f"s_memory {self.s_memory} must be positive")
        for name in ("curiosity", "confidence", "expressiveness"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} {v} outside [0, 1]")
        if not all(np.isfinite(getattr(self, f)) for f in FIELD_ORDER):
            raise ValueError("profile has non-finite fields")


@dataclass(frozen=True)
class AffectState:
    frustration: float = 0.0
    engagement: float = 0.5
    cognitive_load: float = 0.0
    boredom: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.frustration, self.engagement, self.cognitive_load, self.boredom],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class TutorAction:
    """Structured stand-in for one tutoring turn.

    ``link_target`` is an optional second concept the turn tries to connect to
    the target across disciplines; ``None`` means no link attempt.
    """

    target: int
    d_action: float
    ambiguity: float
    directness: float
    socratic_depth: float
    tone: float
    link_target: int | None = None

    def validate(self, n_concepts: int) -> None:
        if not 0 <= self.target < n_concepts:
            raise ValueError(f"action target {self.target} out of range")
        if self.link_target is not None:
            if not 0 <= self.link_target < n_concepts:
                raise ValueError(f"link_target {self.link_target} out of range")
            if self.link_target == self.target:
                raise ValueError("link_target must differ from target")
        for name in ("d_action", "ambiguity", "directness", "socratic_depth", "tone"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"action field {name}={v} outside [0, 1]")


@dataclass(frozen=True)
class HopeEvents:
    integration: bool = False
    transfer: bool = False
    critical_thinking: bool = False
    creativity: bool = False

    def as_tuple(self) -> tuple[bool, bool, bool, bool]:
        return (self.integration, self.transfer, self.critical_thinking, self.creativity)

    def count(self) -> int:
        return sum(self.as_tuple())


@dataclass(frozen=True)
class Observation:
    correctness: float
    asked_question: bool
    confusion: bool
    hope_events: HopeEvents = field(default_factory=HopeEvents)


@dataclass(frozen=True)
class LatentState:
    profile: StudentProfile
    mastery: np.ndarray
    last_active: np.ndarray
    misconceptions: np.ndarray
    affect: AffectState
    t: int
    shallow_timer: np.ndarray
    recent_links: tuple[tuple[int, int, int], ...] = ()  # (expire_t, concept_a, concept_b)

    def validate(self) -> None:
        self.profile.validate()
        if np.any(self.mastery < 0.0) or np.any(self.mastery > 1.0):
            raise ValueError("mastery outside [0, 1]")
        if np.any(self.last_active > self.t):
            raise ValueError("last_active exceeds current time step")
        if not np.all(np.isin(self.misconceptions, (0, 1))):
            raise ValueError("misconception bits must be 0/1")
        for v in self.affect.as_array():
            if not 0.0 <= v <= 1.0:
                raise ValueError("affect outside [0, 1]")


@dataclass(frozen=True)
class AffectCoefficients:
    eta_f: float = 0.2
    delta_f: float = 0.15
    eta_b: float = 0.15
    delta_b: float = 0.05
    eta_e: float = 0.1
    delta_e: float = 0.1


@dataclass(frozen=True)
class ScenarioConfig:
    """Environment knobs: profile prior, affect coefficients, noise, traps."""

    profile_ranges: ProfileRanges = field(default_factory=ProfileRanges)
    affect: AffectCoefficients = field(default_factory=AffectCoefficients)
    sigma_obs: float = 0.1
    theta_fix: float = 0.85
    rho_shallow: float = 0.3
    shallow_steps: int = 10
    spoonfeed_directness: float = 0.7
    kappa: float = 1.0
    init_mastery: tuple[float, float] = (0.0, 0.3)
    init_affect: AffectState = field(default_factory=AffectState)
    confusion_threshold: float = 0.6

    def validate(self) -> None:
        self.profile_ranges.validate()
        if self.sigma_obs < 0:
            raise ValueError("sigma_obs must be non-negative")
        if not 0.0 <= self.theta_fix <= 1.0:
            raise ValueError("theta_fix outside [0, 1]")
        if not 0.0 < self.rho_shallow <= 1.0:
            raise ValueError("rho_shallow outside (0, 1]")
        lo, hi = self.init_mastery
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError("init_mastery must be a sub-interval of [0, 1]")


# ---------------------------------------------------------------------------
# transition equations (broadcast over any leading batch shape)
# ---------------------------------------------------------------------------


def zpd_indicator(m, d, w):
    """1 where the difficulty lands in the zone of proximal development [m, m+w]."""
    m = np.asarray(m, dtype=np.float64)
    return ((m <= d) & (d <= m + w)).astype(np.float64)


def mastery_gain(m, alpha, gate):
    """ZPD-gated mastery update: m + alpha * gate * (1 - m)."""
    m = np.asarray(m, dtype=np.float64)
    return m + alpha * gate * (1.0 - m)


def forgetting_factor(s_memory, shallow_active, rho_shallow):
    """Per-step decay multiplier exp(-1/S_eff); shallow concepts decay faster."""
    s_eff = np.where(shallow_active, np.asarray(s_memory) * rho_shallow, s_memory)
    return np.exp(-1.0 / s_eff)


def activation_probability(rule: MisconceptionRule, ambiguity: float, m_host) -> float:
    """Logistic misconception trigger: sigma(beta * ambiguity - gamma * mastery)."""
    return activation_probability_arrays(
        rule.beta_ambiguity, rule.gamma_resilience, ambiguity, m_host
    )


def activation_probability_arrays(beta, gamma, ambiguity, m_host):
    return sigmoid(np.asarray(beta) * ambiguity - np.asarray(gamma) * np.asarray(m_host))


def ask_probability(profile: StudentProfile, affect: AffectState, kappa: float = 1.0) -> float:
    """Proactive-question trigger: kappa * curiosity * frustration * (1 - confidence)."""
    return float(
        ask_probability_arrays(
            profile.curiosity, profile.confidence, affect.frustration, kappa
        )
    )


def ask_probability_arrays(curiosity, confidence, frustration, kappa=1.0):
    return clamp01(kappa * np.asarray(curiosity) * np.asarray(frustration) * (1.0 - np.asarray(confidence)))


def affect_transition(affect_arr, m_target, d, w_zpd, in_zpd, tone, coef: AffectCoefficients):
    """Flow-theory affect update on a (..., 4) array; reads pre-update mastery."""
    m_target = np.asarray(m_target, dtype=np.float64)
    frustration = affect_arr[..., 0]
    engagement = affect_arr[..., 1]
    boredom = affect_arr[..., 3]
    too_hard = (d > m_target + w_zpd).astype(np.float64)
    redundant = (m_target >= 0.9).astype(np.float64)
    new_f = clamp01(frustration + coef.eta_f * too_hard - coef.delta_f * tone)
    new_b = clamp01(boredom + coef.eta_b * redundant - coef.delta_b * in_zpd)
    new_l = clamp01(np.maximum(0.0, d - m_target))
    new_e = clamp01(engagement + coef.eta_e * in_zpd - coef.delta_e * (new_f + new_b) / 2.0)
    return np.stack([new_f, new_e, new_l, new_b], axis=-1)


# ---------------------------------------------------------------------------
# single-state operations
# ---------------------------------------------------------------------------


def sample_profile(rng: np.random.Generator, ranges: ProfileRanges) -> StudentProfile:
    """Draw a profile uniformly from the configured ranges, field by field."""
    ranges.validate()
    values = {}
    for name in FIELD_ORDER:
        lo, hi = getattr(ranges, name)
        values[name] = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    profile = StudentProfile(**values)
    profile.validate()
    return profile


def apply_forgetting(
    state: LatentState, target: int | None = None, rho_shallow: float = 0.3
) -> np.ndarray:
    """One per-step exponential decay applied to every concept except ``target``.

    Repeated application over idle steps composes to m * exp(-dt / S) exactly.
    """
    factor = forgetting_factor(state.profile.s_memory, state.shallow_timer > 0, rho_shallow)
    decayed = state.mastery * factor
    if target is not None:
        decayed[target] = state.mastery[target]
    return decayed


def update_mastery(state: LatentState, action: TutorAction) -> LatentState:
    """Apply the ZPD-gated update at the target concept and refresh its activity."""
    m = state.mastery[action.target]
    gate = zpd_indicator(m, action.d_action, state.profile.w_zpd)
    mastery = state.mastery.copy()
    mastery[action.target] = mastery_gain(m, state.profile.alpha, gate)
    last_active = state.last_active.copy()
    last_active[action.target] = state.t
    return replace(state, mastery=mastery, last_active=last_active)


def step_misconceptions(
    state: LatentState, action: TutorAction, rng: np.random.Generator, graph: KnowledgeGraph,
    theta_fix: float = 0.85,
) -> np.ndarray:
    """Flip/clear misconception bits hosted on the action's target concept.

    Inactive rules activate with the logistic probability; active rules clear
    once host mastery reaches the remediation threshold. Bits on other
    concepts are untouched.
    """
    bits = state.misconceptions.copy()
    m_host = float(state.mastery[action.target])
    for rule_id in graph.rules_on(action.target):
        rule = graph.misconceptions[rule_id]
        if bits[rule_id] == 0:
            p = activation_probability(rule, action.ambiguity, m_host)
            if rng.random() < p:
                bits[rule_id] = 1
        elif m_host >= theta_fix:
            bits[rule_id] = 0
    return bits


def update_affect(
    state: LatentState, action: TutorAction, coef: AffectCoefficients | None = None
) -> AffectState:
    """Affect update against the state the action was applied to (pre-gain mastery)."""
    coef = coef or AffectCoefficients()
    m = float(state.mastery[action.target])
    in_zpd = float(zpd_indicator(m, action.d_action, state.profile.w_zpd))
    arr = affect_transition(
        state.affect.as_array(), m, action.d_action, state.profile.w_zpd, in_zpd,
        action.tone, coef,
    )
    return AffectState(float(arr[0]), float(arr[1]), float(arr[2]), float(arr[3]))


class StudentSimulator:
    """Bundles a graph and scenario config into the POMDP transition kernel."""

    def __init__(self, graph: KnowledgeGraph, config: ScenarioConfig | None = None):
        self.graph = graph
        self.config = config or ScenarioConfig()
        self.config.validate()

    def init_state(self, rng: np.random.Generator) -> LatentState:
        cfg = self.config
        profile = sample_profile(rng, cfg.profile_ranges)
        lo, hi = cfg.init_mastery
        mastery = rng.uniform(lo, hi, size=self.graph.n_concepts)
        return LatentState(
            profile=profile,
            mastery=mastery,
            last_active=np.zeros(self.graph.n_concepts, dtype=np.int64),
            misconceptions=np.zeros(self.graph.n_rules, dtype=np.int8),
            affect=cfg.init_affect,
            t=0,
            shallow_timer=np.zeros(self.graph.n_concepts, dtype=np.int64),
        )

    def step(
        self, state: LatentState, action: TutorAction, rng: np.random.Generator
    ) -> tuple[LatentState, Observation]:
        """Advance the latent state by one tutoring turn and emit an observation."""
        cfg = self.config
        action.validate(self.graph.n_concepts)
        target = action.target

        m_pre = float(state.mastery[target])
        in_zpd = float(zpd_indicator(m_pre, action.d_action, state.profile.w_zpd))
        spoonfed = action.directness > cfg.spoonfeed_directness

        factor = forgetting_factor(
            state.profile.s_memory, state.shallow_timer > 0, cfg.rho_shallow
        )
        mastery = state.mastery * factor
        mastery[target] = m_pre

        gate = 1.0 if spoonfed else in_zpd
        mastery[target] = float(mastery_gain(m_pre, state.profile.alpha, gate))

        shallow = np.maximum(state.shallow_timer - 1, 0)
        if spoonfed:
            shallow[target] = cfg.shallow_steps

        working = replace(state, mastery=mastery)
        bits = step_misconceptions(working, action, rng, self.graph, cfg.theta_fix)

        affect = update_affect(state, action, cfg.affect)

        t_new = state.t + 1
        last_active = state.last_active.copy()
        last_active[target] = t_new

        recent = [entry for entry in state.recent_links if entry[0] >= t_new]
        link_valid = action.link_target is not None and is_valid_link(
            self.graph, target, action.link_target
        )
        if link_valid:
            recent.append((t_new + 5, target, action.link_target))

        integration = False
        kept: list[tuple[int, int, int]] = []
        for expire, a, b in recent:
            if mastery[a] > 0.7 and mastery[b] > 0.7:
                integration = True
            else:
                kept.append((expire, a, b))

        new_state = LatentState(
            profile=state.profile,
            mastery=mastery,
            last_active=last_active,
            misconceptions=bits,
            affect=affect,
            t=t_new,
            shallow_timer=shallow,
            recent_links=tuple(kept),
        )
        obs = self.emit_observation(
            new_state, action, rng, in_zpd=in_zpd, integration=integration,
            link_valid=link_valid,
        )
        return new_state, obs

    def emit_observation(
        self,
        state: LatentState,
        action: TutorAction,
        rng: np.random.Generator,
        *,
        in_zpd: float | None = None,
        integration: bool = False,
        link_valid: bool | None = None,
    ) -> Observation:
        """Emit the numeric observation for a post-transition state."""
        cfg = self.config
        m_target = float(state.mastery[action.target])
        if in_zpd is None:
            in_zpd = float(zpd_indicator(m_target, action.d_action, state.profile.w_zpd))
        if link_valid is None:
            link_valid = action.link_target is not None and is_valid_link(
                self.graph, action.target, action.link_target
            )

        noise = rng.normal(0.0, cfg.sigma_obs) if cfg.sigma_obs > 0 else 0.0
        correctness = float(clamp01(m_target + noise))

        p_ask = ask_probability(state.profile, state.affect, cfg.kappa)
        asked = bool(rng.random() < p_ask)
        confusion = state.affect.frustration > cfg.confusion_threshold

        transfer = False
        if link_valid and in_zpd > 0:
            p_transfer = m_target * float(state.mastery[action.link_target])
            transfer = bool(rng.random() < p_transfer)
        critical = False
        if 0.3 <= state.affect.frustration <= 0.7 and correctness > 0.6:
            critical = bool(rng.random() < 0.5)
        creativity = False
        if integration:
            creativity = bool(rng.random() < state.profile.curiosity)

        return Observation(
            correctness=correctness,
            asked_question=asked,
            confusion=confusion,
            hope_events=HopeEvents(
                integration=integration,
                transfer=transfer,
                critical_thinking=critical,
                creativity=creativity,
            ),
        )

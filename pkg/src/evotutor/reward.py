"""Three-layer cascaded reward: constraint gate, process quality, student outcome.

A step is first screened by the gatekeeper penalty ``max(p_direct, p_hallu,
p_viol)``; above the tolerance the step earns ``-lambda_c * P_gate`` and
nothing else, otherwise it earns the weighted process and outcome layers.
Scores come from a pluggable evaluator: the default structural evaluator is a
deterministic function of the structured action, the latent transition, and
the current belief; a remote evaluator speaks one JSON request/response per
step over a byte stream.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .belief import BeliefFeatures
from .graph import KnowledgeGraph, is_valid_link
from .student import LatentState, Observation, TutorAction


class EvaluationError(RuntimeError):
    """The evaluator failed to produce scores; the episode must abort."""


@dataclass(frozen=True)
class EvaluatorScores:
    p_direct: float
    p_hallu: float
    p_viol: float
    r_soc: float
    r_int: float
    r_pers: float
    r_semantic: float

    def validate(self) -> None:
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"evaluator score {name}={v} outside [0, 1]")


@dataclass(frozen=True)
class RewardWeights:
    lambda_c: float = 5.0
    lambda_p: float = 1.0
    lambda_s: float = 2.0
    tau: float = 0.05
    w1: float = 1.0 / 3.0
    w2: float = 1.0 / 3.0
    w3: float = 1.0 / 3.0
    w_state: float = 0.5
    w_semantic: float = 0.5

    def validate(self) -> None:
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"reward weight {name}={v} must be finite and non-negative")
        if abs(self.w1 + self.w2 + self.w3 - 1.0) > 1e-9:
            raise ValueError("process weights w1 + w2 + w3 must sum to 1")
        if abs(self.w_state + self.w_semantic - 1.0) > 1e-9:
            raise ValueError("outcome weights w_state + w_semantic must sum to 1")


@dataclass(frozen=True)
class RewardBreakdown:
    p_gate: float
    gated: bool
    r_soc: float
    r_int: float
    r_pers: float
    r_process: float
    r_state: float
    r_semantic: float
    r_outcome: float
    total: float
    safety_channel: float
    process_channel: float
    outcome_channel: float


# ---------------------------------------------------------------------------
# structural evaluator
# ---------------------------------------------------------------------------


def zpd_alignment(d_action: float, believed_mastery: float, ref_width: float) -> float:
    """Triangular score peaking at the center of the assumed ZPD band."""
    center = believed_mastery + 0.5 * ref_width
    return float(np.clip(1.0 - abs(d_action - center) / ref_width, 0.0, 1.0))


def structural_evaluate(
    action: TutorAction,
    graph: KnowledgeGraph,
    pre_state: LatentState,
    post_state: LatentState,
    obs: Observation,
    belief: BeliefFeatures,
    zpd_ref_width: float = 0.3,
) -> EvaluatorScores:
    """Deterministic scoring rules over structured actions and states."""
    link_attempted = action.link_target is not None
    link_valid = link_attempted and is_valid_link(graph, action.target, action.link_target)
    p_hallu = 1.0 if (link_attempted and not link_valid) else 0.0

    r_soc = action.socratic_depth * (1.0 - action.directness)
    if link_valid:
        believed_link = float(belief.mean_mastery[action.link_target])
        r_int = 1.0 - abs(action.d_action - believed_link)
    else:
        r_int = 0.0
    believed_target = float(belief.mean_mastery[action.target])
    align = zpd_alignment(action.d_action, believed_target, zpd_ref_width)
    r_pers = align * (0.5 + 0.5 * action.tone)
    r_semantic = obs.hope_events.count() / 4.0

    scores = EvaluatorScores(
        p_direct=float(action.directness),
        p_hallu=p_hallu,
        p_viol=0.0,
        r_soc=float(r_soc),
        r_int=float(r_int),
        r_pers=float(r_pers),
        r_semantic=float(r_semantic),
    )
    scores.validate()
    return scores


class StructuralEvaluator:
    """Default evaluator plug: wraps the structural scoring rules."""

    def __init__(self, graph: KnowledgeGraph, zpd_ref_width: float = 0.3):
        self.graph = graph
        self.zpd_ref_width = zpd_ref_width

    def evaluate(
        self,
        action: TutorAction,
        pre_state: LatentState,
        post_state: LatentState,
        obs: Observation,
        belief: BeliefFeatures,
    ) -> EvaluatorScores:
        return structural_evaluate(
            action, self.graph, pre_state, post_state, obs, belief, self.zpd_ref_width
        )


# ---------------------------------------------------------------------------
# remote evaluator (JSON over a byte stream)
# ---------------------------------------------------------------------------

SCORE_FIELDS = ("p_direct", "p_hallu", "p_viol", "r_soc", "r_int", "r_pers", "r_semantic")


def action_to_json(action: TutorAction) -> dict:
    return {
        "target": action.target,
        "d_action": action.d_action,
        "ambiguity": action.ambiguity,
        "directness": action.directness,
        "socratic_depth": action.socratic_depth,
        "tone": action.tone,
        "link_target": action.link_target,
    }


def state_to_json(state: LatentState) -> dict:
    return {
        "t": state.t,
        "mastery": state.mastery.tolist(),
        "misconceptions": state.misconceptions.astype(int).tolist(),
        "affect": state.affect.as_array().tolist(),
    }


def observation_to_json(obs: Observation) -> dict:
    return {
        "correctness": obs.correctness,
        "asked_question": obs.asked_question,
        "confusion": obs.confusion,
        "hope_events": {
            "integration": obs.hope_events.integration,
            "transfer": obs.hope_events.transfer,
            "critical_thinking": obs.hope_events.critical_thinking,
            "creativity": obs.hope_events.creativity,
        },
    }


def belief_to_json(belief: BeliefFeatures) -> dict:
    return {
        "mean_mastery": belief.mean_mastery.tolist(),
        "misconception_marginal": belief.misconception_marginal.tolist(),
        "mean_affect": belief.mean_affect.tolist(),
        "mastery_variance": belief.mastery_variance.tolist(),
        "entropy": belief.entropy,
    }


class RemoteEvaluator:
    """Client for an external scorer: one JSON line out, one JSON line back.

    Any transport failure, timeout, or malformed response raises
    ``EvaluationError``; callers abort the episode rather than substituting
    default scores.
    """

    def __init__(self, sock=None, *, reader=None, writer=None, timeout: float = 5.0):
        if sock is not None:
            sock.settimeout(timeout)
            self._file = sock.makefile("rwb")
            self._reader = self._file
            self._writer = self._file
        else:
            if reader is None or writer is None:
                raise ValueError("need a socket or an explicit reader/writer pair")
            self._reader = reader
            self._writer = writer

    def evaluate(
        self,
        action: TutorAction,
        pre_state: LatentState,
        post_state: LatentState,
        obs: Observation,
        belief: BeliefFeatures,
    ) -> EvaluatorScores:
        request = {
            "action": action_to_json(action),
            "pre_state": state_to_json(pre_state),
            "post_state": state_to_json(post_state),
            "observation": observation_to_json(obs),
            "belief": belief_to_json(belief),
        }
        try:
            self._writer.write(json.dumps(request).encode("utf-8") + b"\n")
            self._writer.flush()
            line = self._reader.readline()
        except (OSError, ValueError) as exc:
            raise EvaluationError(f"remote evaluator transport failure: {exc}") from exc
        if not line:
            raise EvaluationError("remote evaluator closed the stream")
        try:
            payload = json.loads(line.decode("utf-8"))
            scores = EvaluatorScores(**{k: float(payload[k]) for k in SCORE_FIELDS})
            scores.validate()
        except (KeyError, TypeError, ValueError) as exc:
            raise EvaluationError(f"malformed evaluator response: {exc}") from exc
        return scores


# ---------------------------------------------------------------------------
# cascade arithmetic
# ---------------------------------------------------------------------------


def gate(scores: EvaluatorScores) -> float:
    return max(scores.p_direct, scores.p_hallu, scores.p_viol)


def process_reward(scores: EvaluatorScores, w: RewardWeights) -> float:
    return w.w1 * scores.r_soc + w.w2 * scores.r_int + w.w3 * scores.r_pers


def state_outcome(pre_state: LatentState, post_state: LatentState) -> float:
    """Mastery-gain plus misconception-clearing component of the outcome layer."""
    delta = float(np.sum(post_state.mastery - pre_state.mastery))
    delta = min(1.0, max(-1.0, delta))
    active_before = int(np.sum(pre_state.misconceptions == 1))
    if active_before > 0:
        cleared = int(
            np.sum((pre_state.misconceptions == 1) & (post_state.misconceptions == 0))
        )
        cleared_fraction = cleared / active_before
    else:
        cleared_fraction = 0.0
    return delta * 0.5 + 0.5 * cleared_fraction


def outcome_reward(
    pre_state: LatentState,
    post_state: LatentState,
    scores: EvaluatorScores,
    w: RewardWeights,
) -> float:
    return w.w_state * state_outcome(pre_state, post_state) + w.w_semantic * scores.r_semantic


def total_reward(
    scores: EvaluatorScores,
    pre_state: LatentState,
    post_state: LatentState,
    w: RewardWeights,
) -> RewardBreakdown:
    """Cascaded evaluation: gate strictly above tau voids the lower layers."""
    p_gate = gate(scores)
    r_p = process_reward(scores, w)
    r_state = state_outcome(pre_state, post_state)
    r_s = w.w_state * r_state + w.w_semantic * scores.r_semantic
    gated = p_gate > w.tau
    if gated:
        total = -w.lambda_c * p_gate
        safety, proc, outc = total, 0.0, 0.0
    else:
        total = w.lambda_p * r_p + w.lambda_s * r_s
        safety, proc, outc = 0.0, w.lambda_p * r_p, w.lambda_s * r_s
    return RewardBreakdown(
        p_gate=p_gate,
        gated=gated,
        r_soc=scores.r_soc,
        r_int=scores.r_int,
        r_pers=scores.r_pers,
        r_process=r_p,
        r_state=r_state,
        r_semantic=scores.r_semantic,
        r_outcome=r_s,
        total=total,
        safety_channel=safety,
        process_channel=proc,
        outcome_channel=outc,
    )


def per_objective_rewards(breakdown: RewardBreakdown) -> np.ndarray:
    """K=3 task channels (safety, process, outcome) whose sum equals the total."""
    return np.array(
        [breakdown.safety_channel, breakdown.process_channel, breakdown.outcome_channel]
    )


def apply_terminal_bonus(
    breakdown: RewardBreakdown, integration_events: int, horizon: int, w: RewardWeights
) -> RewardBreakdown:
    """Trajectory-level interdisciplinary credit added to the final step's outcome."""
    if breakdown.gated or integration_events <= 0:
        return breakdown
    bonus = 0.5 * integration_events / horizon
    r_outcome = breakdown.r_outcome + bonus
    outcome_channel = w.lambda_s * r_outcome
    total = w.lambda_p * breakdown.r_process + outcome_channel
    return RewardBreakdown(
        p_gate=breakdown.p_gate,
        gated=breakdown.gated,
        r_soc=breakdown.r_soc,
        r_int=breakdown.r_int,
        r_pers=breakdown.r_pers,
        r_process=breakdown.r_process,
        r_state=breakdown.r_state,
        r_semantic=breakdown.r_semantic,
        r_outcome=r_outcome,
        total=total,
        safety_channel=breakdown.safety_channel,
        process_channel=w.lambda_p * breakdown.r_process,
        outcome_channel=outcome_channel,
    )

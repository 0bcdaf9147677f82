"""Cascade arithmetic exactness, structural scoring rules, and the remote plug."""

from __future__ import annotations

import json
import socket
import threading

import numpy as np
import pytest

from evotutor.belief import features, init_belief
from evotutor.graph import synth_graph
from evotutor.reward import (
    EvaluationError,
    EvaluatorScores,
    RemoteEvaluator,
    RewardWeights,
    apply_terminal_bonus,
    gate,
    outcome_reward,
    per_objective_rewards,
    process_reward,
    structural_evaluate,
    total_reward,
)
from evotutor.student import (
    AffectState,
    LatentState,
    Observation,
    HopeEvents,
    ScenarioConfig,
    StudentProfile,
    StudentSimulator,
    TutorAction,
)


def scores(**kwargs) -> EvaluatorScores:
    base = dict(p_direct=0.0, p_hallu=0.0, p_viol=0.0, r_soc=0.0, r_int=0.0,
                r_pers=0.0, r_semantic=0.0)
    base.update(kwargs)
    return EvaluatorScores(**base)


def make_states(graph, mastery_pre, mastery_post, mis_pre=None, mis_post=None):
    profile = StudentProfile(0.5, 0.2, 10.0, 0.5, 0.5, 0.5)
    c = graph.n_concepts
    k = graph.n_rules

    def state(mastery, mis, t):
        return LatentState(
            profile=profile,
            mastery=np.array(mastery, dtype=np.float64),
            last_active=np.zeros(c, dtype=np.int64),
            misconceptions=np.array(
                mis if mis is not None else np.zeros(k), dtype=np.int8
            ),
            affect=AffectState(),
            t=t,
            shallow_timer=np.zeros(c, dtype=np.int64),
        )

    return state(mastery_pre, mis_pre, 0), state(mastery_post, mis_post, 1)


GRAPH = synth_graph(6, 2, 0.6, seed=5)
W = RewardWeights()


def null_transition():
    mastery = np.full(GRAPH.n_concepts, 0.4)
    return make_states(GRAPH, mastery, mastery)


# -- gate -----------------------------------------------------------------------


def test_gate_all_clear():
    assert gate(scores()) == 0.0


def test_gate_is_max():
    assert gate(scores(p_direct=0.2, p_hallu=0.9, p_viol=0.1)) == 0.9


def test_gate_monotone_grid():
    grid = np.linspace(0.0, 1.0, 6)
    for d in grid:
        for h in grid:
            for v in grid:
                g = gate(scores(p_direct=d, p_hallu=h, p_viol=v))
                assert g >= gate(scores(p_direct=max(d - 0.2, 0), p_hallu=h, p_viol=v)) - 1e-15
                assert g >= d and g >= h and g >= v


# -- process --------------------------------------------------------------------


def test_process_reward_weighted_mean():
    s = scores(r_soc=0.6, r_int=0.3, r_pers=0.9)
    assert process_reward(s, W) == pytest.approx(0.6, rel=1e-12)


def test_process_reward_extremes():
    assert process_reward(scores(), W) == 0.0
    assert process_reward(scores(r_soc=1.0, r_int=1.0, r_pers=1.0), W) == pytest.approx(
        1.0, rel=1e-12
    )


# -- outcome --------------------------------------------------------------------


def test_outcome_null_transition_is_zero():
    pre, post = null_transition()
    assert outcome_reward(pre, post, scores(), W) == 0.0


def test_outcome_single_gain():
    pre, post = null_transition()
    post.mastery[2] += 0.35
    w = RewardWeights(w_state=1.0, w_semantic=0.0)
    assert outcome_reward(pre, post, scores(), w) == pytest.approx(0.175, rel=1e-12)


def test_outcome_misconception_clearing():
    # One of four active bug rules cleared with no mastery change: 0.5 * 1/4.
    mastery = np.full(GRAPH.n_concepts, 0.4)
    mis_pre = np.ones(4, dtype=np.int8)
    mis_post = mis_pre.copy()
    mis_post[0] = 0
    pre, post = make_states(GRAPH, mastery, mastery, mis_pre, mis_post)
    w = RewardWeights(w_state=1.0, w_semantic=0.0)
    assert outcome_reward(pre, post, scores(), w) == pytest.approx(0.125, rel=1e-12)


# -- total ----------------------------------------------------------------------


def test_total_violation_branch_exact():
    pre, post = null_transition()
    b = total_reward(scores(p_direct=0.8), pre, post, W)
    assert b.gated
    assert b.total == -4.0
    assert b.total == -W.lambda_c * 0.8


def test_total_valid_branch_exact():
    pre, post = null_transition()
    s = scores(r_soc=0.6, r_int=0.6, r_pers=0.6, r_semantic=0.2)
    post.mastery[0] += 0.2
    b = total_reward(s, pre, post, W)
    assert not b.gated
    expected = W.lambda_p * b.r_process + W.lambda_s * b.r_outcome
    assert b.total == expected


def test_total_hand_case_valid_branch():
    # R_p = 0.6 and R_s = 0.2 with the default lambdas give exactly 1.0.
    pre, post = null_transition()
    s = scores(r_soc=0.6, r_int=0.6, r_pers=0.6, r_semantic=0.4)
    b = total_reward(s, pre, post, W)
    assert b.r_process == pytest.approx(0.6, rel=1e-12)
    assert b.r_outcome == pytest.approx(0.2, rel=1e-12)
    assert b.total == pytest.approx(1.0, rel=1e-12)


def test_total_boundary_gate_is_valid_branch():
    pre, post = null_transition()
    b = total_reward(scores(p_direct=W.tau), pre, post, W)
    assert not b.gated
    assert b.total >= 0.0


def test_cascade_exactness_random_cases():
    rng = np.random.default_rng(6)
    for _ in range(500):
        s = scores(
            p_direct=float(rng.uniform()), p_hallu=float(rng.choice([0.0, 1.0])),
            r_soc=float(rng.uniform()), r_int=float(rng.uniform()),
            r_pers=float(rng.uniform()), r_semantic=float(rng.uniform()),
        )
        pre, post = null_transition()
        post.mastery[:] = rng.uniform(0.0, 1.0, size=GRAPH.n_concepts)
        b = total_reward(s, pre, post, W)
        if b.gated:
            assert b.total == -W.lambda_c * b.p_gate
            assert b.total <= 0.0
        else:
            assert b.total == W.lambda_p * b.r_process + W.lambda_s * b.r_outcome
        assert abs(b.total - (W.lambda_p * b.r_process + W.lambda_s * b.r_outcome
                              if not b.gated else -W.lambda_c * b.p_gate)) < 1e-12


def test_total_monotone_in_gate_on_violation_branch():
    pre, post = null_transition()
    totals = [
        total_reward(scores(p_direct=p), pre, post, W).total
        for p in np.linspace(0.06, 1.0, 20)
    ]
    assert all(b < a for a, b in zip(totals, totals[1:]))


# -- per-objective vector ----------------------------------------------------------


def test_objectives_sum_to_total_ungated():
    pre, post = null_transition()
    post.mastery[1] += 0.3
    s = scores(r_soc=0.5, r_int=0.2, r_pers=0.7, r_semantic=0.25, p_direct=0.03)
    b = total_reward(s, pre, post, W)
    vec = per_objective_rewards(b)
    assert vec.sum() == b.total


def test_objectives_gated_vector():
    pre, post = null_transition()
    b = total_reward(scores(p_direct=0.9, r_soc=1.0), pre, post, W)
    vec = per_objective_rewards(b)
    np.testing.assert_array_equal(vec, [b.total, 0.0, 0.0])


def test_objectives_all_zero():
    pre, post = null_transition()
    b = total_reward(scores(), pre, post, W)
    np.testing.assert_array_equal(per_objective_rewards(b), [0.0, 0.0, 0.0])


# -- terminal bonus -----------------------------------------------------------------


def test_terminal_bonus_adds_outcome_credit():
    pre, post = null_transition()
    b = total_reward(scores(r_semantic=0.2), pre, post, W)
    bumped = apply_terminal_bonus(b, integration_events=2, horizon=32, w=W)
    assert bumped.r_outcome == pytest.approx(b.r_outcome + 0.5 * 2 / 32, rel=1e-12)
    assert per_objective_rewards(bumped).sum() == bumped.total


def test_terminal_bonus_skipped_when_gated():
    pre, post = null_transition()
    b = total_reward(scores(p_direct=1.0), pre, post, W)
    assert apply_terminal_bonus(b, 3, 32, W) is b


# -- structural evaluator -------------------------------------------------------------


def eval_setup():
    scenario = ScenarioConfig()
    sim = StudentSimulator(GRAPH, scenario)
    rng = np.random.default_rng(7)
    state = sim.init_state(rng)
    belief = init_belief(32, scenario.profile_ranges, GRAPH, rng, scenario)
    return sim, state, features(belief)


def obs_with(hope=None, correctness=0.5):
    return Observation(
        correctness=correctness, asked_question=False, confusion=False,
        hope_events=hope or HopeEvents(),
    )


def test_structural_direct_answer_is_gate_pressure():
    sim, state, belief = eval_setup()
    action = TutorAction(target=0, d_action=0.5, ambiguity=0.0, directness=1.0,
                         socratic_depth=0.0, tone=0.0)
    s = structural_evaluate(action, GRAPH, state, state, obs_with(), belief)
    assert s.p_direct == 1.0


def test_structural_invalid_link_is_hallucination():
    sim, state, belief = eval_setup()
    invalid = next(
        (a, b) for a in range(6) for b in range(6)
        if a != b and (min(a, b), max(a, b)) not in GRAPH.cross_links
    )
    action = TutorAction(target=invalid[0], d_action=0.5, ambiguity=0.0, directness=0.0,
                         socratic_depth=0.0, tone=0.0, link_target=invalid[1])
    s = structural_evaluate(action, GRAPH, state, state, obs_with(), belief)
    assert s.p_hallu == 1.0
    valid = sorted(GRAPH.cross_links)[0]
    action = TutorAction(target=valid[0], d_action=0.5, ambiguity=0.0, directness=0.0,
                         socratic_depth=0.0, tone=0.0, link_target=valid[1])
    s = structural_evaluate(action, GRAPH, state, state, obs_with(), belief)
    assert s.p_hallu == 0.0


def test_structural_socratic_and_integration_rules():
    sim, state, belief = eval_setup()
    action = TutorAction(target=0, d_action=0.5, ambiguity=0.0, directness=0.0,
                         socratic_depth=0.8, tone=0.0, link_target=None)
    s = structural_evaluate(action, GRAPH, state, state, obs_with(), belief)
    assert s.r_soc == pytest.approx(0.8, rel=1e-12)
    assert s.r_int == 0.0


def test_structural_semantic_counts_hope_events():
    sim, state, belief = eval_setup()
    action = TutorAction(target=0, d_action=0.5, ambiguity=0.0, directness=0.0,
                         socratic_depth=0.0, tone=0.0)
    hope = HopeEvents(integration=True, transfer=True, critical_thinking=False,
                      creativity=False)
    s = structural_evaluate(action, GRAPH, state, state, obs_with(hope), belief)
    assert s.r_semantic == 0.5


def test_structural_scores_bounded():
    sim, state, belief = eval_setup()
    rng = np.random.default_rng(8)
    for _ in range(200):
        lt = int(rng.integers(6))
        target = int(rng.integers(6))
        if lt == target:
            lt = None
        action = TutorAction(
            target=target, d_action=float(rng.uniform()),
            ambiguity=float(rng.uniform()), directness=float(rng.uniform()),
            socratic_depth=float(rng.uniform()), tone=float(rng.uniform()),
            link_target=lt,
        )
        s = structural_evaluate(action, GRAPH, state, state, obs_with(), belief)
        s.validate()


# -- remote evaluator protocol ---------------------------------------------------------


def fake_scorer(conn, reply=None, delay=0.0):
    """Minimal line-oriented evaluator server for one request."""
    import time

    file = conn.makefile("rwb")
    line = file.readline()
    request = json.loads(line.decode("utf-8"))
    if delay:
        time.sleep(delay)
    if reply is None:
        reply = {
            "p_direct": request["action"]["directness"],
            "p_hallu": 0.0,
            "p_viol": 0.0,
            "r_soc": 0.25,
            "r_int": 0.5,
            "r_pers": 0.75,
            "r_semantic": 0.0,
        }
    file.write(json.dumps(reply).encode("utf-8") + b"\n")
    file.flush()
    return request


def remote_roundtrip(reply=None, delay=0.0, timeout=5.0):
    sim, state, belief = eval_setup()
    action = TutorAction(target=0, d_action=0.5, ambiguity=0.1, directness=0.4,
                         socratic_depth=0.6, tone=0.3, link_target=3)
    client_sock, server_sock = socket.socketpair()
    captured = {}

    def serve():
        try:
            captured["request"] = fake_scorer(server_sock, reply=reply, delay=delay)
        except Exception:
            pass
        finally:
            server_sock.close()

    thread = threading.Thread(target=serve)
    thread.start()
    try:
        client = RemoteEvaluator(client_sock, timeout=timeout)
        result = client.evaluate(action, state, state, obs_with(), belief)
    finally:
        thread.join()
        client_sock.close()
    return captured.get("request"), result


def test_remote_evaluator_roundtrip():
    request, result = remote_roundtrip()
    assert result.p_direct == 0.4
    assert result.r_pers == 0.75
    assert request["action"]["link_target"] == 3
    assert len(request["pre_state"]["mastery"]) == GRAPH.n_concepts
    assert "mean_mastery" in request["belief"]
    assert "correctness" in request["observation"]


def test_remote_evaluator_timeout_aborts():
    with pytest.raises(EvaluationError):
        remote_roundtrip(delay=1.0, timeout=0.2)


def test_remote_evaluator_malformed_response():
    with pytest.raises(EvaluationError):
        remote_roundtrip(reply={"p_direct": 0.1})


def test_remote_evaluator_out_of_range_scores_rejected():
    bad = {k: 2.0 for k in
           ("p_direct", "p_hallu", "p_viol", "r_soc", "r_int", "r_pers", "r_semantic")}
    with pytest.raises(EvaluationError):
        remote_roundtrip(reply=bad)


def test_injected_violation_score_gates():
    # p_viol has no structural surrogate but the gate path must honor it.
    pre, post = null_transition()
    b = total_reward(scores(p_viol=0.9), pre, post, W)
    assert b.gated
    assert b.total == -W.lambda_c * 0.9

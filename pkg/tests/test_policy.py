"""Adapter algebra, action distribution math, and backprop vs finite differences."""

from __future__ import annotations

import math

import numpy as np
import pytest

from evotutor.policy import (
    ActionDistribution,
    AdapterSet,
    LoRAPair,
    Policy,
    PolicyLayout,
    batch_entropy,
    batch_entropy_grads,
    batch_log_prob,
    batch_log_prob_grads,
    effective_weight,
    flatten_ea,
    flatten_pairs,
    init_adapters,
    load_adapters,
    log_prob,
    reset_rl,
    sample_action,
    save_adapters,
    unflatten_ea,
    unflatten_pairs,
)
from evotutor.student import TutorAction


def small_layout(hidden=(8, 8), n_concepts=4, rank_ea=3, rank_rl=2, feature_dim=10):
    return PolicyLayout(
        feature_dim=feature_dim, n_concepts=n_concepts, hidden=hidden,
        rank_ea=rank_ea, rank_rl=rank_rl,
    )


def make_policy(seed=0, layout=None, **kwargs) -> Policy:
    layout = layout or small_layout(**kwargs)
    rngs = [np.random.default_rng(seed + i) for i in range(3)]
    adapters = init_adapters(layout, *rngs)
    return Policy(layout, adapters)


def numerical_rank(matrix: np.ndarray, tol: float = 1e-6) -> int:
    return int(np.sum(np.linalg.svd(matrix, compute_uv=False) > tol))


# -- effective weights ---------------------------------------------------------


def test_zero_adapters_equal_base():
    layout = small_layout()
    adapters = init_adapters(
        layout, np.random.default_rng(0), np.random.default_rng(1), np.random.default_rng(2)
    )
    for pair in adapters.ea + adapters.rl:
        pair.b[:] = 0.0
        pair.a[:] = 0.0
    for layer in range(adapters.n_layers):
        np.testing.assert_array_equal(
            effective_weight(layer, adapters), adapters.base_w[layer]
        )


def test_rank_one_ea_delta():
    layout = small_layout(rank_ea=1)
    adapters = init_adapters(
        layout, np.random.default_rng(0), np.random.default_rng(1), np.random.default_rng(2)
    )
    for pair in adapters.rl:
        pair.b[:] = 0.0
    delta = effective_weight(0, adapters) - adapters.base_w[0]
    assert numerical_rank(delta) == 1


def test_rank_subadditivity_over_random_adapters():
    layout = small_layout(hidden=(16, 16), feature_dim=16, rank_ea=3, rank_rl=2)
    for draw in range(20):
        adapters = init_adapters(
            layout,
            np.random.default_rng(draw),
            np.random.default_rng(100 + draw),
            np.random.default_rng(200 + draw),
        )
        for pair in adapters.rl:
            pair.b = np.random.default_rng(300 + draw).normal(size=pair.b.shape)
        for layer in range(adapters.n_layers):
            delta = effective_weight(layer, adapters) - adapters.base_w[layer]
            assert numerical_rank(delta) <= layout.rank_ea + layout.rank_rl


def test_effective_weight_additive_decomposition():
    policy = make_policy()
    a = policy.adapters
    for layer in range(a.n_layers):
        expected = a.base_w[layer] + a.ea[layer].delta() + a.rl[layer].delta()
        np.testing.assert_allclose(effective_weight(layer, a), expected, rtol=0, atol=0)


# -- forward -------------------------------------------------------------------


def test_forward_pure():
    policy = make_policy()
    x = np.random.default_rng(5).normal(size=(3, 10))
    c1 = policy.forward(x)
    c2 = policy.forward(x)
    np.testing.assert_array_equal(c1.concept_logits, c2.concept_logits)
    np.testing.assert_array_equal(c1.cont_mean, c2.cont_mean)


def test_forward_distinguishes_inputs():
    policy = make_policy()
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=10), rng.normal(size=10)
    da, db = policy.dist(a), policy.dist(b)
    assert not np.allclose(da.concept_logits, db.concept_logits)


def test_forward_sensitive_to_ea_perturbation():
    policy = make_policy()
    x = np.random.default_rng(7).normal(size=10)
    before = policy.dist(x).concept_logits.copy()
    vec = flatten_ea(policy.adapters)
    policy.set_ea(vec + 1e-3)
    after = policy.dist(x).concept_logits
    assert np.abs(after - before).max() > 0


def test_forward_rejects_wrong_dim():
    policy = make_policy()
    with pytest.raises(Exception):
        policy.forward(np.zeros((1, 7)))


# -- sampling and log prob -----------------------------------------------------


def uniform_dist(n_concepts=4):
    return ActionDistribution(
        concept_logits=np.zeros(n_concepts),
        link_logits=np.zeros(n_concepts + 1),
        cont_mean=np.array([0.5, -0.3, 0.0, 1.0, -1.0]),
        cont_log_std=np.full(5, -0.5),
    )


def test_zero_variance_sampling_is_squashed_mean():
    dist = ActionDistribution(
        concept_logits=np.zeros(4),
        link_logits=np.zeros(5),
        cont_mean=np.array([0.5, -0.3, 0.0, 1.0, -1.0]),
        cont_log_std=np.full(5, -np.inf),
    )
    action, _ = sample_action(dist, np.random.default_rng(0))
    expected = 1.0 / (1.0 + np.exp(-dist.cont_mean))
    np.testing.assert_allclose(
        [action.d_action, action.ambiguity, action.directness,
         action.socratic_depth, action.tone],
        expected, rtol=1e-12,
    )


def test_sampled_log_prob_self_consistent():
    policy = make_policy()
    rng = np.random.default_rng(8)
    for _ in range(50):
        dist = policy.dist(rng.normal(size=10))
        action, lp = sample_action(dist, rng)
        assert lp == pytest.approx(log_prob(dist, action), abs=1e-9)


def test_sample_never_links_to_target():
    dist = uniform_dist()
    rng = np.random.default_rng(9)
    for _ in range(300):
        action, _ = sample_action(dist, rng)
        assert action.link_target != action.target


def test_concept_frequencies_uniform():
    dist = uniform_dist()
    rng = np.random.default_rng(10)
    n = 10_000
    counts = np.zeros(4)
    for _ in range(n):
        action, _ = sample_action(dist, rng)
        counts[action.target] += 1
    freq = counts / n
    sigma = math.sqrt(0.25 * 0.75 / n)
    np.testing.assert_allclose(freq, 0.25, atol=3 * sigma)


def test_log_prob_uniform_concept_contribution():
    dist = uniform_dist()
    action = TutorAction(target=1, d_action=0.5, ambiguity=0.5, directness=0.5,
                         socratic_depth=0.5, tone=0.5, link_target=None)
    other = TutorAction(target=2, d_action=0.5, ambiguity=0.5, directness=0.5,
                        socratic_depth=0.5, tone=0.5, link_target=None)
    # Identical continuous fields and masked link head; only the concept index
    # differs, so the difference isolates the uniform categorical log(1/4) term.
    assert log_prob(dist, action) == pytest.approx(log_prob(dist, other), rel=1e-12)
    biased = ActionDistribution(
        concept_logits=np.array([math.log(0.7), math.log(0.1), math.log(0.1), math.log(0.1)]),
        link_logits=dist.link_logits, cont_mean=dist.cont_mean,
        cont_log_std=dist.cont_log_std,
    )
    delta = log_prob(dist, action) - log_prob(biased, action)
    assert delta == pytest.approx(math.log(0.25) - math.log(0.1), rel=1e-9)


def test_log_prob_decomposes_into_head_terms():
    dist = uniform_dist()
    action = TutorAction(target=0, d_action=0.4, ambiguity=0.6, directness=0.2,
                         socratic_depth=0.7, tone=0.9, link_target=2)
    lp = log_prob(dist, action)
    concept_term = math.log(0.25)
    link_term = math.log(0.25)  # uniform over 4 unmasked outcomes
    x = np.array([0.4, 0.6, 0.2, 0.7, 0.9])
    u = np.log(x) - np.log1p(-x)
    sigma = math.exp(-0.5)
    gauss = -0.5 * ((u - dist.cont_mean) / sigma) ** 2 - math.log(sigma) - 0.5 * math.log(2 * math.pi)
    jac = -(np.log(x) + np.log1p(-x))
    assert lp == pytest.approx(concept_term + link_term + float(np.sum(gauss + jac)), rel=1e-12)


def test_log_prob_rejects_masked_link():
    dist = uniform_dist()
    action = TutorAction(target=1, d_action=0.5, ambiguity=0.5, directness=0.5,
                         socratic_depth=0.5, tone=0.5, link_target=1)
    with pytest.raises(ValueError):
        log_prob(dist, action)


# -- gradients vs central finite differences ------------------------------------


def fd_gradient(policy: Policy, loss_fn, h: float = 1e-6) -> np.ndarray:
    base = policy.get_trainable()
    grad = np.zeros_like(base)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + h
        policy.set_trainable(bumped)
        up = loss_fn()
        bumped[i] = base[i] - h
        policy.set_trainable(bumped)
        down = loss_fn()
        grad[i] = (up - down) / (2 * h)
    policy.set_trainable(base)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), 1e-12))


def sample_actions(policy: Policy, x: np.ndarray, seed: int):
    rng = np.random.default_rng(seed)
    actions, _ = zip(*(sample_action(policy.dist(row), rng) for row in x))
    return list(actions)


def test_log_prob_gradient_matches_fd():
    layout = small_layout(hidden=(6, 6), n_concepts=3, rank_ea=2, rank_rl=2, feature_dim=8)
    policy = make_policy(layout=layout)
    x = np.random.default_rng(11).normal(size=(4, 8))
    actions = sample_actions(policy, x, seed=12)

    def total_log_prob() -> float:
        return float(batch_log_prob(policy.forward(x), actions).sum())

    cache = policy.forward(x)
    d_c, d_l, d_m, d_s = batch_log_prob_grads(cache, actions)
    analytic = policy.backward(cache, d_c, d_l, d_m, d_s)
    fd = fd_gradient(policy, total_log_prob)
    assert relative_error(analytic, fd) < 1e-3


def test_log_prob_gradient_matches_fd_categorical_heads():
    # The concept and link terms of the joint log prob depend only on their
    # own head logits, so each categorical head can be checked in isolation.
    layout = small_layout(hidden=(6, 6), n_concepts=3, rank_ea=2, rank_rl=1, feature_dim=8)
    policy = make_policy(seed=3, layout=layout)
    x = np.random.default_rng(13).normal(size=(3, 8))
    actions = sample_actions(policy, x, seed=14)

    def log_softmax(z):
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    rows = np.arange(len(actions))
    targets = np.array([a.target for a in actions])
    links = np.array([3 if a.link_target is None else a.link_target for a in actions])

    def concept_term() -> float:
        c = policy.forward(x)
        return float(log_softmax(c.concept_logits)[rows, targets].sum())

    def link_term() -> float:
        c = policy.forward(x)
        masked = c.link_logits.copy()
        masked[rows, targets] = -np.inf
        return float(log_softmax(masked)[rows, links].sum())

    cache = policy.forward(x)
    d_c, d_l, d_m, d_s = batch_log_prob_grads(cache, actions)
    zeros_m, zeros_s = np.zeros_like(d_m), np.zeros_like(d_s)

    analytic_c = policy.backward(cache, d_c, np.zeros_like(d_l), zeros_m, zeros_s)
    assert relative_error(analytic_c, fd_gradient(policy, concept_term)) < 1e-3

    analytic_l = policy.backward(cache, np.zeros_like(d_c), d_l, zeros_m, zeros_s)
    assert relative_error(analytic_l, fd_gradient(policy, link_term)) < 1e-3


def test_entropy_gradient_matches_fd():
    layout = small_layout(hidden=(6, 6), n_concepts=3, rank_ea=2, rank_rl=1, feature_dim=8)
    policy = make_policy(seed=4, layout=layout)
    x = np.random.default_rng(15).normal(size=(3, 8))
    actions = sample_actions(policy, x, seed=16)

    def total_entropy() -> float:
        return float(batch_entropy(policy.forward(x), actions).sum())

    cache = policy.forward(x)
    d_c, d_l, d_m, d_s = batch_entropy_grads(cache, actions)
    analytic = policy.backward(cache, d_c, d_l, d_m, d_s)
    fd = fd_gradient(policy, total_entropy)
    assert relative_error(analytic, fd) < 1e-3


def test_gradients_do_not_touch_ea_or_base():
    policy = make_policy()
    x = np.random.default_rng(17).normal(size=(4, 10))
    actions = sample_actions(policy, x, seed=18)
    base_before = [w.copy() for w in policy.adapters.base_w]
    ea_before = flatten_ea(policy.adapters).copy()
    cache = policy.forward(x)
    grads = batch_log_prob_grads(cache, actions)
    policy.backward(cache, *grads)
    for w, before in zip(policy.adapters.base_w, base_before):
        np.testing.assert_array_equal(w, before)
    np.testing.assert_array_equal(flatten_ea(policy.adapters), ea_before)


# -- reset ----------------------------------------------------------------------


def test_reset_rl_zeroes_delta():
    policy = make_policy()
    for pair in policy.adapters.rl:
        pair.b[:] = np.random.default_rng(19).normal(size=pair.b.shape)
    reset_rl(policy.adapters)
    policy.refresh()
    for pair in policy.adapters.rl:
        assert np.linalg.norm(pair.delta()) == 0.0


def test_reset_rl_forward_equals_ea_only():
    policy = make_policy()
    for pair in policy.adapters.rl:
        pair.b[:] = np.random.default_rng(20).normal(size=pair.b.shape)
    x = np.random.default_rng(21).normal(size=10)
    reset_rl(policy.adapters)
    policy.refresh()
    with_rl = policy.dist(x)
    no_rl = Policy(
        policy.layout,
        AdapterSet(
            base_w=policy.adapters.base_w, base_b=policy.adapters.base_b,
            ea=policy.adapters.ea, rl=None,
        ),
        trainable="ea",
    ).dist(x)
    np.testing.assert_allclose(with_rl.concept_logits, no_rl.concept_logits, atol=0)


def test_reset_rl_idempotent():
    policy = make_policy()
    reset_rl(policy.adapters)
    first = [p.b.copy() for p in policy.adapters.rl]
    reset_rl(policy.adapters)
    for before, pair in zip(first, policy.adapters.rl):
        np.testing.assert_array_equal(before, pair.b)


# -- flatten / unflatten ----------------------------------------------------------


def test_flatten_roundtrip_bitwise():
    policy = make_policy()
    vec = flatten_ea(policy.adapters)
    rebuilt = unflatten_ea(vec, policy.adapters)
    np.testing.assert_array_equal(flatten_ea(rebuilt), vec)
    for old, new in zip(policy.adapters.ea, rebuilt.ea):
        np.testing.assert_array_equal(old.b, new.b)
        np.testing.assert_array_equal(old.a, new.a)


def test_flatten_length_formula():
    layout = small_layout()
    policy = make_policy(layout=layout)
    expected = sum(
        layout.rank_ea * (out + inp) for out, inp in layout.layer_dims()
    )
    assert flatten_ea(policy.adapters).size == expected


def test_flatten_ordering_golden():
    # Layer-major, B before A, row-major within each factor.
    pair0 = LoRAPair(b=np.array([[1.0, 2.0], [3.0, 4.0]]), a=np.array([[5.0], [6.0]]))
    pair1 = LoRAPair(b=np.array([[7.0]]), a=np.array([[8.0, 9.0]]))
    flat = flatten_pairs([pair0, pair1])
    np.testing.assert_array_equal(flat, [1, 2, 3, 4, 5, 6, 7, 8, 9])
    back = unflatten_pairs(flat, [pair0, pair1])
    np.testing.assert_array_equal(back[1].a, pair1.a)


def test_unflatten_rejects_bad_length():
    policy = make_policy()
    with pytest.raises(Exception):
        unflatten_ea(np.zeros(3), policy.adapters)


# -- checkpoint payload ------------------------------------------------------------


def test_adapter_payload_roundtrip():
    policy = make_policy()
    payload = save_adapters(policy.adapters)
    assert payload[:4] == b"EVTA"
    restored = load_adapters(payload)
    assert save_adapters(restored) == payload
    for w, r in zip(policy.adapters.base_w, restored.base_w):
        np.testing.assert_allclose(w, r, atol=1e-6)


def test_adapter_payload_rejects_truncation():
    policy = make_policy()
    payload = save_adapters(policy.adapters)
    with pytest.raises(ValueError):
        load_adapters(payload[: len(payload) // 2])


def test_adapter_payload_rejects_bad_magic():
    policy = make_policy()
    payload = bytearray(save_adapters(policy.adapters))
    payload[0] = 0
    with pytest.raises(ValueError):
        load_adapters(bytes(payload))

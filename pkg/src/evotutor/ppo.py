"""Inner policy-gradient loop on the RL adapter.

Collected transitions carry a per-objective reward vector (safety, process,
outcome). Each objective gets its own GAE advantages and clipped surrogate
gradient over the trainable adapter partition; conflicting gradients are
projected off each other before a single adaptive-moment step with a cosine
learning-rate schedule. The critic is a plain dense network with one output
per objective, trained separately and reset together with the RL adapter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .policy import (
    ForwardCache,
    Policy,
    batch_entropy_grads,
    batch_log_prob,
    batch_log_prob_grads,
)
from .student import TutorAction

N_OBJECTIVES = 3


@dataclass(frozen=True)
class PPOConfig:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    lr: float = 1e-5
    epochs: int = 4
    minibatch: int = 64
    k_update: int = 2048
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    value_lr: float | None = None
    pcgrad_sequential: bool = False

    def validate(self) -> None:
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must be in (0, 1)")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.lr < 0 or self.epochs < 1 or self.minibatch < 1 or self.k_update < 1:
            raise ValueError("invalid PPO config")

    @property
    def critic_lr(self) -> float:
        return self.lr if self.value_lr is None else self.value_lr


@dataclass
class Transition:
    features: np.ndarray
    action: TutorAction
    reward_vec: np.ndarray
    total: float
    log_prob: float
    value: np.ndarray
    next_features: np.ndarray
    done: bool


class RolloutBuffer:
    """On-policy storage, cleared after every update."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.transitions: list[Transition] = []

    def add(self, transition: Transition) -> None:
        self.transitions.append(transition)

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def full(self) -> bool:
        return len(self.transitions) >= self.capacity

    def clear(self) -> None:
        self.transitions = []

    def stacked(self):
        ts = self.transitions
        features = np.stack([t.features for t in ts])
        rewards = np.stack([t.reward_vec for t in ts])
        dones = np.array([t.done for t in ts], dtype=np.float64)
        old_logp = np.array([t.log_prob for t in ts])
        next_features = np.stack([t.next_features for t in ts])
        actions = [t.action for t in ts]
        return features, actions, rewards, dones, old_logp, next_features


def compute_gae(
    buffer: RolloutBuffer,
    value_fn: Callable[[np.ndarray], np.ndarray],
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-objective GAE advantages and returns over the buffered segments."""
    if len(buffer) == 0:
        raise ValueError("empty rollout buffer")
    features, _, rewards, dones, _, next_features = buffer.stacked()
    n = len(buffer)
    values = value_fn(features)
    v_next = np.empty_like(values)
    v_next[:-1] = values[1:]
    v_next[-1] = value_fn(next_features[-1:])[0]

    not_done = (1.0 - dones)[:, None]
    deltas = rewards + gamma * v_next * not_done - values
    advantages = np.zeros_like(deltas)
    running = np.zeros(values.shape[1])
    for t in range(n - 1, -1, -1):
        running = deltas[t] + gamma * lam * not_done[t] * running
        advantages[t] = running
    return advantages, advantages + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """Zero-mean unit-std per objective over the update batch."""
    return (adv - adv.mean(axis=0)) / (adv.std(axis=0) + 1e-8)


# ---------------------------------------------------------------------------
# clipped surrogate per objective
# ---------------------------------------------------------------------------


def _surrogate_coefficients(
    cache: ForwardCache,
    actions: list[TutorAction],
    old_logp: np.ndarray,
    adv: np.ndarray,
    clip: float,
) -> tuple[np.ndarray, np.ndarray]:
    logp = batch_log_prob(cache, actions)
    ratio = np.exp(logp - old_logp)
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    loss = -np.minimum(surr1, surr2)
    # d loss / d logp: zero when the clipped branch is strictly better (flat).
    coef = np.where(surr1 <= surr2, -adv * ratio, 0.0) / len(actions)
    return loss, coef


def surrogate_loss(
    policy: Policy,
    features: np.ndarray,
    actions: list[TutorAction],
    old_logp: np.ndarray,
    adv: np.ndarray,
    clip: float,
) -> float:
    cache = policy.forward(features)
    loss, _ = _surrogate_coefficients(cache, actions, old_logp, adv, clip)
    return float(loss.mean())


def surrogate_gradient(
    policy: Policy,
    cache: ForwardCache,
    actions: list[TutorAction],
    old_logp: np.ndarray,
    adv: np.ndarray,
    clip: float,
) -> np.ndarray:
    _, coef = _surrogate_coefficients(cache, actions, old_logp, adv, clip)
    d_concept, d_link, d_mean, d_log_std = batch_log_prob_grads(cache, actions)
    c = coef[:, None]
    return policy.backward(cache, c * d_concept, c * d_link, c * d_mean, c * d_log_std)


def per_task_gradients(
    buffer: RolloutBuffer,
    policy: Policy,
    value_fn: Callable[[np.ndarray], np.ndarray],
    config: PPOConfig,
) -> list[np.ndarray]:
    """One clipped-surrogate gradient per reward channel over the whole buffer."""
    features, actions, _, _, old_logp, _ = buffer.stacked()
    adv, _ = compute_gae(buffer, value_fn, config.gamma, config.lam)
    adv = normalize_advantages(adv)
    cache = policy.forward(features)
    return [
        surrogate_gradient(policy, cache, actions, old_logp, adv[:, k], config.clip)
        for k in range(adv.shape[1])
    ]


def entropy_gradient(policy: Policy, cache: ForwardCache, actions: list[TutorAction]) -> np.ndarray:
    """Gradient of the mean entropy surrogate over the batch."""
    d_concept, d_link, d_mean, d_log_std = batch_entropy_grads(cache, actions)
    scale = 1.0 / len(actions)
    return policy.backward(
        cache, scale * d_concept, scale * d_link, scale * d_mean, scale * d_log_std
    )


# ---------------------------------------------------------------------------
# conflict-averse projection
# ---------------------------------------------------------------------------


def pcgrad_project(
    grads: list[np.ndarray],
    sequential: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Project each task gradient off the conflicting others, then sum.

    The default one-shot form computes every projection against the original
    (unmodified) gradients. The sequential variant mutates a shuffled copy in
    place, as in the gradient-surgery literature; it needs an rng.
    """
    if len(grads) == 0:
        raise ValueError("need at least one gradient")
    length = grads[0].shape[0]
    for g in grads:
        if g.shape != (length,):
            raise ValueError("gradient length mismatch")

    if sequential:
        if rng is None:
            raise ValueError("sequential projection requires an rng")
        adjusted = [g.copy() for g in grads]
        for g_i in adjusted:
            order = rng.permutation(len(grads))
            for j in order:
                g_j = grads[j]
                dot = float(g_i @ g_j)
                if dot < 0.0:
                    norm_sq = float(g_j @ g_j)
                    if norm_sq > 0.0:
                        g_i -= (dot / norm_sq) * g_j
        return np.sum(adjusted, axis=0)

    total = np.zeros(length)
    for i, g_i in enumerate(grads):
        adjusted = g_i.copy()
        for j, g_j in enumerate(grads):
            if i == j:
                continue
            norm_sq = float(g_j @ g_j)
            if norm_sq <= 0.0:
                continue
            dot = float(g_i @ g_j)
            if dot < 0.0:
                adjusted -= (dot / norm_sq) * g_j
        total += adjusted
    return total


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------


@dataclass
class CosineSchedule:
    base_lr: float
    total_steps: int

    def lr(self, step: int) -> float:
        if self.total_steps <= 0:
            return self.base_lr
        frac = min(step, self.total_steps) / self.total_steps
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    skipped: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_size(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * np.square(grad)
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def apply_update(
    policy: Policy,
    final_grad: np.ndarray,
    optimizer_state: AdamState,
    schedule: CosineSchedule,
) -> None:
    """One scheduled optimizer step on the trainable adapter partition only."""
    if final_grad.shape != (policy.n_trainable,):
        raise ValueError(
            f"gradient length {final_grad.shape} != trainable size {policy.n_trainable}"
        )
    if not np.all(np.isfinite(final_grad)):
        optimizer_state.skipped += 1
        return
    lr = schedule.lr(optimizer_state.t)
    params = policy.get_trainable()
    policy.set_trainable(optimizer_state.step(params, final_grad, lr))


# ---------------------------------------------------------------------------
# critic
# ---------------------------------------------------------------------------


class ValueNet:
    """Small fully-trainable dense critic with one output per reward channel."""

    def __init__(self, feature_dim: int, hidden: tuple[int, int], rng: np.random.Generator,
                 n_outputs: int = N_OBJECTIVES):
        h0, h1 = hidden
        self.w1 = rng.normal(0.0, 1.0 / np.sqrt(feature_dim), size=(h0, feature_dim))
        self.b1 = np.zeros(h0)
        self.w2 = rng.normal(0.0, 1.0 / np.sqrt(h0), size=(h1, h0))
        self.b2 = np.zeros(h1)
        self.w3 = rng.normal(0.0, 1.0 / np.sqrt(h1), size=(n_outputs, h1))
        self.b3 = np.zeros(n_outputs)

    def params(self) -> np.ndarray:
        return np.concatenate(
            [a.ravel() for a in (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3)]
        )

    def set_params(self, vec: np.ndarray) -> None:
        offset = 0
        for arr in (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3):
            arr[:] = vec[offset : offset + arr.size].reshape(arr.shape)
            offset += arr.size

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        h1 = np.tanh(x @ self.w1.T + self.b1)
        h2 = np.tanh(h1 @ self.w2.T + self.b2)
        return h2 @ self.w3.T + self.b3

    def loss_and_grad(
        self, x: np.ndarray, targets: np.ndarray, value_coef: float
    ) -> tuple[float, np.ndarray]:
        x = np.atleast_2d(x)
        n = x.shape[0]
        h1 = np.tanh(x @ self.w1.T + self.b1)
        h2 = np.tanh(h1 @ self.w2.T + self.b2)
        v = h2 @ self.w3.T + self.b3
        err = v - targets
        loss = value_coef * float(np.mean(np.sum(np.square(err), axis=1)))
        d_v = value_coef * 2.0 * err / n
        d_w3 = d_v.T @ h2
        d_b3 = d_v.sum(axis=0)
        d_h2 = d_v @ self.w3
        d_z2 = d_h2 * (1.0 - np.square(h2))
        d_w2 = d_z2.T @ h1
        d_b2 = d_z2.sum(axis=0)
        d_h1 = d_z2 @ self.w2
        d_z1 = d_h1 * (1.0 - np.square(h1))
        d_w1 = d_z1.T @ x
        d_b1 = d_z1.sum(axis=0)
        grad = np.concatenate(
            [a.ravel() for a in (d_w1, d_b1, d_w2, d_b2, d_w3, d_b3)]
        )
        return loss, grad


# ---------------------------------------------------------------------------
# one full PPO update
# ---------------------------------------------------------------------------


@dataclass
class UpdateStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    steps: int = 0


def ppo_update(
    policy: Policy,
    value_net: ValueNet,
    buffer: RolloutBuffer,
    config: PPOConfig,
    rng: np.random.Generator,
    policy_opt: AdamState,
    value_opt: AdamState,
    schedule: CosineSchedule,
) -> UpdateStats:
    """Epochs of minibatch updates: per-task surrogates, projection, Adam step."""
    features, actions, _, _, old_logp, _ = buffer.stacked()
    adv, returns = compute_gae(buffer, value_net.forward, config.gamma, config.lam)
    adv = normalize_advantages(adv)
    n = len(buffer)
    stats = UpdateStats()

    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch):
            idx = perm[start : start + config.minibatch]
            feats_mb = features[idx]
            actions_mb = [actions[i] for i in idx]
            old_mb = old_logp[idx]

            cache = policy.forward(feats_mb)
            grads = [
                surrogate_gradient(
                    policy, cache, actions_mb, old_mb, adv[idx, k], config.clip
                )
                for k in range(adv.shape[1])
            ]
            g_final = pcgrad_project(
                grads, sequential=config.pcgrad_sequential,
                rng=rng if config.pcgrad_sequential else None,
            )
            if config.entropy_coef > 0:
                g_final = g_final - config.entropy_coef * entropy_gradient(
                    policy, cache, actions_mb
                )
            apply_update(policy, g_final, policy_opt, schedule)

            v_loss, v_grad = value_net.loss_and_grad(
                feats_mb, returns[idx], config.value_coef
            )
            if np.all(np.isfinite(v_grad)):
                value_net.set_params(
                    value_opt.step(value_net.params(), v_grad, config.critic_lr)
                )
            stats.value_loss += v_loss
            stats.steps += 1

    buffer.clear()
    return stats

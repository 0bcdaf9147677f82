"""Tutor policy network with divided low-rank adapters on a frozen dense base.

Every linear layer's weight is ``W0 + B_ea @ A_ea + B_rl @ A_rl``: the frozen
base stands in for a large pretrained backbone, the EA adapter is the
evolvable persona, and the RL adapter is the per-generation gradient-trained
refinement. The network maps belief features to an action distribution with a
categorical concept head, a categorical link head (with an explicit "no link"
outcome), and squash-transformed Gaussian heads for the continuous fields.

Gradients are computed by explicit backpropagation and land only on the
trainable adapter partition; base weights are never written after init.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .student import TutorAction

CONT_FIELDS = ("d_action", "ambiguity", "directness", "socratic_depth", "tone")
N_CONT = len(CONT_FIELDS)
LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0

CHECKPOINT_MAGIC = b"EVTA"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Adapter or input dimensions do not agree with the policy layout."""


@dataclass
class LoRAPair:
    b: np.ndarray  # (out_dim, rank)
    a: np.ndarray  # (rank, in_dim)

    @property
    def rank(self) -> int:
        return self.b.shape[1]

    def delta(self) -> np.ndarray:
        return self.b @ self.a

    def copy(self) -> "LoRAPair":
        return LoRAPair(self.b.copy(), self.a.copy())


@dataclass
class AdapterSet:
    base_w: list[np.ndarray]
    base_b: list[np.ndarray]
    ea: list[LoRAPair]
    rl: list[LoRAPair] | None

    @property
    def n_layers(self) -> int:
        return len(self.base_w)

    def copy(self) -> "AdapterSet":
        return AdapterSet(
            base_w=[w.copy() for w in self.base_w],
            base_b=[b.copy() for b in self.base_b],
            ea=[p.copy() for p in self.ea],
            rl=[p.copy() for p in self.rl] if self.rl is not None else None,
        )


def effective_weight(layer: int, adapters: AdapterSet) -> np.ndarray:
    """W0 + B_ea A_ea + B_rl A_rl for one layer; the base array is untouched."""
    if not 0 <= layer < adapters.n_layers:
        raise ShapeError(f"layer index {layer} out of range")
    w = adapters.base_w[layer]
    ea = adapters.ea[layer]
    if ea.b.shape[0] != w.shape[0] or ea.a.shape[1] != w.shape[1]:
        raise ShapeError(f"ea adapter shape mismatch at layer {layer}")
    out = w + ea.delta()
    if adapters.rl is not None:
        rl = adapters.rl[layer]
        if rl.b.shape[0] != w.shape[0] or rl.a.shape[1] != w.shape[1]:
            raise ShapeError(f"rl adapter shape mismatch at layer {layer}")
        out = out + rl.delta()
    return out


def _pairs_flat_size(pairs: list[LoRAPair]) -> int:
    return sum(p.b.size + p.a.size for p in pairs)


def flatten_pairs(pairs: list[LoRAPair]) -> np.ndarray:
    """Layer-major flattening: for each layer, B (row-major) then A (row-major)."""
    return np.concatenate([np.concatenate([p.b.ravel(), p.a.ravel()]) for p in pairs])


def unflatten_pairs(vec: np.ndarray, template: list[LoRAPair]) -> list[LoRAPair]:
    expect = _pairs_flat_size(template)
    if vec.size != expect:
        raise ShapeError(f"flat vector length {vec.size} != expected {expect}")
    out = []
    offset = 0
    for p in template:
        b = vec[offset : offset + p.b.size].reshape(p.b.shape).copy()
        offset += p.b.size
        a = vec[offset : offset + p.a.size].reshape(p.a.shape).copy()
        offset += p.a.size
        out.append(LoRAPair(b, a))
    return out


def flatten_ea(adapters: AdapterSet) -> np.ndarray:
    return flatten_pairs(adapters.ea)


def unflatten_ea(vec: np.ndarray, template: AdapterSet) -> AdapterSet:
    """New AdapterSet sharing base and rl with ``template`` but with these EA params."""
    return AdapterSet(
        base_w=template.base_w,
        base_b=template.base_b,
        ea=unflatten_pairs(vec, template.ea),
        rl=template.rl,
    )


def reset_rl(adapters: AdapterSet) -> AdapterSet:
    """Zero every RL ``B`` factor in place so the RL delta vanishes exactly."""
    if adapters.rl is not None:
        for pair in adapters.rl:
            pair.b[:] = 0.0
    return adapters


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyLayout:
    feature_dim: int
    n_concepts: int
    hidden: tuple[int, int] = (64, 64)
    rank_ea: int = 24
    rank_rl: int = 8

    def layer_dims(self) -> list[tuple[int, int]]:
        """(out, in) per linear layer: two hidden, then concept/link/continuous heads."""
        h0, h1 = self.hidden
        return [
            (h0, self.feature_dim),
            (h1, h0),
            (self.n_concepts, h1),
            (self.n_concepts + 1, h1),
            (2 * N_CONT, h1),
        ]


@dataclass(frozen=True)
class ActionDistribution:
    concept_logits: np.ndarray
    link_logits: np.ndarray
    cont_mean: np.ndarray
    cont_log_std: np.ndarray


@dataclass
class ForwardCache:
    x: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    concept_logits: np.ndarray
    link_logits: np.ndarray
    cont_mean: np.ndarray
    log_std_raw: np.ndarray
    cont_log_std: np.ndarray


def init_adapters(
    layout: PolicyLayout,
    rng_base: np.random.Generator,
    rng_ea: np.random.Generator,
    rng_rl: np.random.Generator | None,
    *,
    ea_std: float = 0.05,
    rl_a_std: float = 0.02,
    single_adapter: bool = False,
) -> AdapterSet:
    """Frozen random base; EA factors fully random, RL zero-product at init.

    In ``single_adapter`` mode the whole low-rank budget goes into one EA-side
    adapter of rank ``rank_ea + rank_rl`` and there is no RL partition.
    """
    base_w, base_b, ea, rl = [], [], [], []
    rank_ea = layout.rank_ea + layout.rank_rl if single_adapter else layout.rank_ea
    for out_dim, in_dim in layout.layer_dims():
        base_w.append(rng_base.normal(0.0, 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim)))
        base_b.append(np.zeros(out_dim))
        ea.append(
            LoRAPair(
                b=rng_ea.normal(0.0, ea_std, size=(out_dim, rank_ea)),
                a=rng_ea.normal(0.0, ea_std, size=(rank_ea, in_dim)),
            )
        )
        if not single_adapter:
            assert rng_rl is not None
            rl.append(
                LoRAPair(
                    b=np.zeros((out_dim, layout.rank_rl)),
                    a=rng_rl.normal(0.0, rl_a_std, size=(layout.rank_rl, in_dim)),
                )
            )
    return AdapterSet(base_w=base_w, base_b=base_b, ea=ea, rl=rl if not single_adapter else None)


def fresh_ea_pairs(
    layout: PolicyLayout,
    rng_ea: np.random.Generator,
    ea_std: float = 0.05,
    rank: int | None = None,
) -> list[LoRAPair]:
    rank = layout.rank_ea if rank is None else rank
    return [
        LoRAPair(
            b=rng_ea.normal(0.0, ea_std, size=(out_dim, rank)),
            a=rng_ea.normal(0.0, ea_std, size=(rank, in_dim)),
        )
        for out_dim, in_dim in layout.layer_dims()
    ]


def zero_ea_pairs(layout: PolicyLayout, rank: int | None = None) -> list[LoRAPair]:
    rank = layout.rank_ea if rank is None else rank
    return [
        LoRAPair(b=np.zeros((out_dim, rank)), a=np.zeros((rank, in_dim)))
        for out_dim, in_dim in layout.layer_dims()
    ]


def fresh_rl_pairs(
    layout: PolicyLayout, rng_rl: np.random.Generator, rl_a_std: float = 0.02
) -> list[LoRAPair]:
    return [
        LoRAPair(
            b=np.zeros((out_dim, layout.rank_rl)),
            a=rng_rl.normal(0.0, rl_a_std, size=(layout.rank_rl, in_dim)),
        )
        for out_dim, in_dim in layout.layer_dims()
    ]


class Policy:
    """Action-distribution network over an AdapterSet.

    ``trainable`` selects which adapter partition receives gradients: "rl" in
    the divided architecture, "ea" when a single merged adapter is trained by
    both loops.
    """

    def __init__(self, layout: PolicyLayout, adapters: AdapterSet, trainable: str = "rl"):
        if trainable not in ("rl", "ea"):
            raise ValueError(f"unknown trainable partition {trainable!r}")
        if trainable == "rl" and adapters.rl is None:
            raise ShapeError("policy has no rl partition to train")
        self.layout = layout
        self.adapters = adapters
        self.trainable = trainable
        self._w_eff: list[np.ndarray] | None = None
        self.refresh()

    # -- parameter plumbing -------------------------------------------------

    def _trainable_pairs(self) -> list[LoRAPair]:
        return self.adapters.rl if self.trainable == "rl" else self.adapters.ea

    @property
    def n_trainable(self) -> int:
        return _pairs_flat_size(self._trainable_pairs())

    def get_trainable(self) -> np.ndarray:
        return flatten_pairs(self._trainable_pairs())

    def set_trainable(self, vec: np.ndarray) -> None:
        pairs = self._trainable_pairs()
        new = unflatten_pairs(vec, pairs)
        for old, fresh in zip(pairs, new):
            old.b[:] = fresh.b
            old.a[:] = fresh.a
        self.refresh()

    def set_ea(self, vec: np.ndarray) -> None:
        new = unflatten_pairs(vec, self.adapters.ea)
        for old, fresh in zip(self.adapters.ea, new):
            old.b[:] = fresh.b
            old.a[:] = fresh.a
        self.refresh()

    def refresh(self) -> None:
        self._w_eff = [effective_weight(i, self.adapters) for i in range(self.adapters.n_layers)]

    # -- forward ------------------------------------------------------------

    def forward(self, x: np.ndarray) -> ForwardCache:
        """Batched forward pass; ``x`` is (n, feature_dim)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.layout.feature_dim:
            raise ShapeError(
                f"feature dim {x.shape[1]} != expected {self.layout.feature_dim}"
            )
        w = self._w_eff
        b = self.adapters.base_b
        h1 = np.tanh(x @ w[0].T + b[0])
        h2 = np.tanh(h1 @ w[1].T + b[1])
        concept = h2 @ w[2].T + b[2]
        link = h2 @ w[3].T + b[3]
        cont = h2 @ w[4].T + b[4]
        mean = cont[:, :N_CONT]
        raw = cont[:, N_CONT:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        return ForwardCache(
            x=x, h1=h1, h2=h2, concept_logits=concept, link_logits=link,
            cont_mean=mean, log_std_raw=raw, cont_log_std=log_std,
        )

    def dist(self, x: np.ndarray) -> ActionDistribution:
        cache = self.forward(x)
        return ActionDistribution(
            concept_logits=cache.concept_logits[0],
            link_logits=cache.link_logits[0],
            cont_mean=cache.cont_mean[0],
            cont_log_std=cache.cont_log_std[0],
        )

    # -- backward -----------------------------------------------------------

    def backward(
        self,
        cache: ForwardCache,
        d_concept: np.ndarray,
        d_link: np.ndarray,
        d_mean: np.ndarray,
        d_log_std: np.ndarray,
    ) -> np.ndarray:
        """Backpropagate head gradients to the trainable adapters, flattened.

        ``d_log_std`` is the gradient at the clamped log-std output; the clamp
        gate is applied here.
        """
        raw_gate = (cache.log_std_raw > LOG_STD_MIN) & (cache.log_std_raw < LOG_STD_MAX)
        d_cont = np.concatenate([d_mean, d_log_std * raw_gate], axis=1)

        d_w = [None] * 5
        d_w[2] = d_concept.T @ cache.h2
        d_w[3] = d_link.T @ cache.h2
        d_w[4] = d_cont.T @ cache.h2
        w = self._w_eff
        d_h2 = d_concept @ w[2] + d_link @ w[3] + d_cont @ w[4]
        d_z2 = d_h2 * (1.0 - np.square(cache.h2))
        d_w[1] = d_z2.T @ cache.h1
        d_h1 = d_z2 @ w[1]
        d_z1 = d_h1 * (1.0 - np.square(cache.h1))
        d_w[0] = d_z1.T @ cache.x

        pairs = self._trainable_pairs()
        grads = []
        for layer, pair in enumerate(pairs):
            dw = d_w[layer]
            grads.append(np.concatenate([(dw @ pair.a.T).ravel(), (pair.b.T @ dw).ravel()]))
        return np.concatenate(grads)


# ---------------------------------------------------------------------------
# distribution math
# ---------------------------------------------------------------------------

LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)
_SQUASH_EPS = 1e-12


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(_log_softmax(logits))


def _categorical(p: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(p)
    c[-1] = 1.0
    return int(np.searchsorted(c, rng.random(), side="right"))


def _masked_link_logits(link_logits: np.ndarray, target: int) -> np.ndarray:
    masked = link_logits.astype(np.float64).copy()
    masked[target] = -np.inf
    return masked


def _logit(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, _SQUASH_EPS, 1.0 - _SQUASH_EPS)
    return np.log(x) - np.log1p(-x)


def _cont_log_prob(u, x, mean, log_std):
    """Joint log density of sigmoid-squashed Gaussians with change of variables."""
    sigma = np.maximum(np.exp(log_std), 1e-300)
    with np.errstate(over="ignore"):
        z = (u - mean) / sigma
        gauss = -0.5 * np.square(z) - np.log(sigma) - LOG_SQRT_2PI
    x = np.clip(x, _SQUASH_EPS, 1.0 - _SQUASH_EPS)
    jac = -(np.log(x) + np.log1p(-x))
    return np.sum(gauss + jac, axis=-1)


def _action_cont_vector(action: TutorAction) -> np.ndarray:
    return np.array([getattr(action, f) for f in CONT_FIELDS], dtype=np.float64)


def log_prob(dist: ActionDistribution, action: TutorAction) -> float:
    """Exact joint log density of an action under the distribution."""
    n_concepts = dist.concept_logits.shape[0]
    link_idx = n_concepts if action.link_target is None else action.link_target
    if link_idx == action.target:
        raise ValueError("link_target equal to target is outside the masked support")
    lp = float(_log_softmax(dist.concept_logits)[action.target])
    masked = _masked_link_logits(dist.link_logits, action.target)
    lp += float(_log_softmax(masked)[link_idx])
    x = _action_cont_vector(action)
    u = _logit(x)
    lp += float(_cont_log_prob(u, x, dist.cont_mean, dist.cont_log_std))
    return lp


def sample_action(
    dist: ActionDistribution, rng: np.random.Generator
) -> tuple[TutorAction, float]:
    """Sample an action (concept, masked link, squashed continuous fields)."""
    n_concepts = dist.concept_logits.shape[0]
    target = _categorical(_softmax(dist.concept_logits), rng)
    masked = _masked_link_logits(dist.link_logits, target)
    link_idx = _categorical(_softmax(masked), rng)
    link_target = None if link_idx == n_concepts else link_idx
    sigma = np.exp(dist.cont_log_std)
    u = dist.cont_mean + sigma * rng.standard_normal(N_CONT)
    x = 1.0 / (1.0 + np.exp(-u))
    action = TutorAction(
        target=target,
        d_action=float(x[0]),
        ambiguity=float(x[1]),
        directness=float(x[2]),
        socratic_depth=float(x[3]),
        tone=float(x[4]),
        link_target=link_target,
    )
    return action, log_prob(dist, action)


def batch_log_prob(cache: ForwardCache, actions: list[TutorAction]) -> np.ndarray:
    """Vectorized log densities of stored actions under a batched forward pass."""
    n = len(actions)
    n_concepts = cache.concept_logits.shape[1]
    targets = np.array([a.target for a in actions])
    links = np.array(
        [n_concepts if a.link_target is None else a.link_target for a in actions]
    )
    rows = np.arange(n)
    lp = _log_softmax(cache.concept_logits)[rows, targets]
    masked = cache.link_logits.copy()
    masked[rows, targets] = -np.inf
    lp = lp + _log_softmax(masked)[rows, links]
    x = np.stack([_action_cont_vector(a) for a in actions])
    u = _logit(x)
    lp = lp + _cont_log_prob(u, x, cache.cont_mean, cache.cont_log_std)
    return lp


def batch_log_prob_grads(
    cache: ForwardCache, actions: list[TutorAction]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample gradients of log prob w.r.t. each head output."""
    n = len(actions)
    n_concepts = cache.concept_logits.shape[1]
    targets = np.array([a.target for a in actions])
    links = np.array(
        [n_concepts if a.link_target is None else a.link_target for a in actions]
    )
    rows = np.arange(n)

    p_c = _softmax(cache.concept_logits)
    d_concept = -p_c
    d_concept[rows, targets] += 1.0

    masked = cache.link_logits.copy()
    masked[rows, targets] = -np.inf
    p_l = _softmax(masked)
    d_link = -p_l
    d_link[rows, links] += 1.0

    x = np.stack([_action_cont_vector(a) for a in actions])
    u = _logit(x)
    sigma = np.exp(cache.cont_log_std)
    z = (u - cache.cont_mean) / sigma
    d_mean = z / sigma
    d_log_std = np.square(z) - 1.0
    return d_concept, d_link, d_mean, d_log_std


def _plogp(p: np.ndarray, log_p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    mask = p > 0
    out[mask] = p[mask] * log_p[mask]
    return out


def batch_entropy(cache: ForwardCache, actions: list[TutorAction]) -> np.ndarray:
    """Entropy surrogate: categorical entropies plus pre-squash Gaussian terms."""
    n = len(actions)
    targets = np.array([a.target for a in actions])
    rows = np.arange(n)
    log_p_c = _log_softmax(cache.concept_logits)
    h = -np.sum(np.exp(log_p_c) * log_p_c, axis=1)
    masked = cache.link_logits.copy()
    masked[rows, targets] = -np.inf
    log_p_l = _log_softmax(masked)
    p_l = np.exp(log_p_l)
    h = h - np.sum(_plogp(p_l, log_p_l), axis=1)
    h = h + np.sum(cache.cont_log_std + 0.5 * np.log(2.0 * np.pi * np.e), axis=1)
    return h


def batch_entropy_grads(
    cache: ForwardCache, actions: list[TutorAction]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample gradients of the entropy surrogate w.r.t. head outputs."""
    n = len(actions)
    targets = np.array([a.target for a in actions])
    rows = np.arange(n)

    p_c = _softmax(cache.concept_logits)
    log_p_c = _log_softmax(cache.concept_logits)
    h_c = -np.sum(p_c * log_p_c, axis=1, keepdims=True)
    d_concept = -p_c * (log_p_c + h_c)

    masked = cache.link_logits.copy()
    masked[rows, targets] = -np.inf
    log_p_l = _log_softmax(masked)
    p_l = np.exp(log_p_l)
    safe_log = np.where(p_l > 0, log_p_l, 0.0)
    h_l = -np.sum(_plogp(p_l, log_p_l), axis=1, keepdims=True)
    d_link = np.where(p_l > 0, -p_l * (safe_log + h_l), 0.0)

    d_mean = np.zeros_like(cache.cont_mean)
    d_log_std = np.ones_like(cache.cont_log_std)
    return d_concept, d_link, d_mean, d_log_std


# ---------------------------------------------------------------------------
# adapter checkpoint payload
# ---------------------------------------------------------------------------


def save_adapters(adapters: AdapterSet) -> bytes:
    """Versioned binary payload: magic, version, layer dims, float32 arrays.

    Array order is row-major base (W then bias per layer), then EA pairs, then
    RL pairs, each in the flatten order (B before A, layer-major).
    """
    buf = io.BytesIO()
    n_layers = adapters.n_layers
    rank_ea = adapters.ea[0].rank if n_layers else 0
    rank_rl = adapters.rl[0].rank if adapters.rl else 0
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, n_layers))
    for w in adapters.base_w:
        buf.write(struct.pack("<II", w.shape[0], w.shape[1]))
    buf.write(struct.pack("<II", rank_ea, rank_rl))
    def dump(arr: np.ndarray) -> None:
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    for w, b in zip(adapters.base_w, adapters.base_b):
        dump(w)
        dump(b)
    for pair in adapters.ea:
        dump(pair.b)
        dump(pair.a)
    if adapters.rl is not None:
        for pair in adapters.rl:
            dump(pair.b)
            dump(pair.a)
    return buf.getvalue()


def load_adapters(payload: bytes) -> AdapterSet:
    buf = io.BytesIO(payload)
    magic = buf.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad adapter payload magic {magic!r}")
    version, n_layers = struct.unpack("<II", buf.read(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported adapter payload version {version}")
    dims = [struct.unpack("<II", buf.read(8)) for _ in range(n_layers)]
    rank_ea, rank_rl = struct.unpack("<II", buf.read(8))

    def read(shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        raw = buf.read(4 * count)
        if len(raw) != 4 * count:
            raise ValueError("truncated adapter payload")
        return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)

    base_w, base_b, ea, rl = [], [], [], []
    for out_dim, in_dim in dims:
        base_w.append(read((out_dim, in_dim)))
        base_b.append(read((out_dim,)))
    for out_dim, in_dim in dims:
        ea.append(LoRAPair(read((out_dim, rank_ea)), read((rank_ea, in_dim))))
    if rank_rl > 0:
        for out_dim, in_dim in dims:
            rl.append(LoRAPair(read((out_dim, rank_rl)), read((rank_rl, in_dim))))
    return AdapterSet(base_w=base_w, base_b=base_b, ea=ea, rl=rl if rank_rl > 0 else None)

"""End-to-end training orchestration: generations, inner loops, checkpoints.

Every random draw in a run comes from a counter-based stream keyed by
``(seed, generation, individual, purpose)``, so population members can be
evaluated serially or in parallel with bitwise-identical results, and a
resumed run continues exactly where the interrupted one left off.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .belief import BeliefFeatures, FilterConfig, features, filter_update, init_belief
from .config import RunConfig
from .evolution import (
    EAConfig,
    Individual,
    episode_fitness,
    next_generation,
    novelty,
    pareto_elites,
)
from .graph import KnowledgeGraph, load_graph
from .metrics import (
    MetricsRow,
    behavioral_diversity,
    pca_project,
    write_elites_npz,
    write_metrics_csv,
    write_projection_csv,
    write_reports_csv,
    write_trajectories_jsonl,
)
from .policy import (
    AdapterSet,
    Policy,
    PolicyLayout,
    _softmax,
    flatten_pairs,
    fresh_ea_pairs,
    fresh_rl_pairs,
    sample_action,
    save_adapters,
    unflatten_pairs,
    zero_ea_pairs,
)
from .ppo import (
    AdamState,
    CosineSchedule,
    PPOConfig,
    RolloutBuffer,
    Transition,
    ValueNet,
    ppo_update,
)
from .reward import (
    RewardBreakdown,
    RewardWeights,
    StructuralEvaluator,
    action_to_json,
    apply_terminal_bonus,
    observation_to_json,
    per_objective_rewards,
    total_reward,
)
from .student import Observation, ScenarioConfig, StudentSimulator, TutorAction

PROBE_PARTICLES = 64
CHECKPOINT_MAGIC = b"EVTC"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Checkpoint payload is missing, corrupt, or from another format version."""


def rng_scheme(seed: int, generation: int, individual: int, purpose: str) -> np.random.Generator:
    """Independent counter-based stream for a (generation, individual, purpose) slot."""
    tag = f"{seed}|{generation}|{individual}|{purpose}".encode("utf-8")
    key = int.from_bytes(hashlib.sha256(tag).digest()[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------------------
# episode machinery
# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    t: int
    features: np.ndarray
    action: TutorAction
    log_prob: float
    obs: Observation
    breakdown: RewardBreakdown
    next_features: np.ndarray


@dataclass
class EpisodeResult:
    records: list[StepRecord]
    episode_return: float
    integration_events: int


def run_episode(
    policy: Policy,
    sim: StudentSimulator,
    evaluator,
    weights: RewardWeights,
    filter_cfg: FilterConfig,
    horizon: int,
    env_rng: np.random.Generator,
    belief_rng: np.random.Generator,
) -> EpisodeResult:
    """Play one episode against a freshly sampled student."""
    state = sim.init_state(env_rng)
    belief = init_belief(
        filter_cfg.n_particles, sim.config.profile_ranges, sim.graph, belief_rng, sim.config
    )
    belief_feats = features(belief)
    feats = belief_feats.vector()
    records: list[StepRecord] = []
    integration = 0
    for t in range(horizon):
        dist = policy.dist(feats)
        action, log_prob = sample_action(dist, env_rng)
        pre_state = state
        state, obs = sim.step(state, action, env_rng)
        scores = evaluator.evaluate(action, pre_state, state, obs, belief_feats)
        breakdown = total_reward(scores, pre_state, state, weights)
        belief = filter_update(
            belief, action, obs, belief_rng, filter_cfg.resample_threshold
        )
        belief_feats = features(belief)
        next_feats = belief_feats.vector()
        integration += int(obs.hope_events.integration)
        records.append(
            StepRecord(t, feats, action, log_prob, obs, breakdown, next_feats)
        )
        feats = next_feats
    if integration:
        records[-1].breakdown = apply_terminal_bonus(
            records[-1].breakdown, integration, horizon, weights
        )
    episode_return = float(sum(r.breakdown.total for r in records))
    return EpisodeResult(records, episode_return, integration)


# ---------------------------------------------------------------------------
# per-individual evaluation (inner loop + frozen evaluation episodes)
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    policy: Policy
    value: ValueNet
    policy_opt: AdamState
    value_opt: AdamState
    schedule: CosineSchedule
    buffer: RolloutBuffer


@dataclass
class RunContext:
    config: RunConfig
    graph: KnowledgeGraph
    layout: PolicyLayout
    weights: RewardWeights
    base_w: list[np.ndarray]
    base_b: list[np.ndarray]
    ea_template: list
    rl_template: list | None
    probes: list[np.ndarray]

    @property
    def trainable(self) -> str:
        return "ea" if self.config.single_adapter else "rl"

    def make_evaluator(self) -> StructuralEvaluator:
        return StructuralEvaluator(self.graph, self.config.zpd_ref_width)


@dataclass
class IndividualResult:
    slot: int
    individual_id: int
    fitness: float
    eval_returns: list[float] = field(default_factory=list)
    gate_rate: float = 0.0
    depth_mean: float = 0.0
    directness_mean: float = 0.0
    mean_gate: float = 0.0
    mean_process: float = 0.0
    mean_outcome: float = 0.0
    mean_total: float = 0.0
    hope_counts: np.ndarray = field(default_factory=lambda: np.zeros(4))
    eval_steps: int = 0
    probe_signature: np.ndarray | None = None
    trained_params: np.ndarray | None = None
    trajectory: list[dict] = field(default_factory=list)
    error: str | None = None


def _build_train_state(
    ctx: RunContext, slot: int, ea_params: np.ndarray, generation: int
) -> TrainState:
    cfg = ctx.config
    ea_pairs = unflatten_pairs(ea_params, ctx.ea_template)
    if cfg.single_adapter:
        rl_pairs = None
    else:
        rl_pairs = fresh_rl_pairs(ctx.layout, rng_scheme(cfg.seed, generation, slot, "rl-init"))
    adapters = AdapterSet(base_w=ctx.base_w, base_b=ctx.base_b, ea=ea_pairs, rl=rl_pairs)
    policy = Policy(ctx.layout, adapters, trainable=ctx.trainable)
    value = ValueNet(
        ctx.layout.feature_dim, ctx.layout.hidden,
        rng_scheme(cfg.seed, generation, slot, "value-init"),
    )
    total_inner = cfg.inner_steps * (cfg.ea.generations if cfg.disable_ea else 1)
    updates = total_inner // cfg.ppo.k_update
    steps_per_update = cfg.ppo.epochs * math.ceil(cfg.ppo.k_update / cfg.ppo.minibatch)
    schedule = CosineSchedule(cfg.ppo.lr, max(1, updates * steps_per_update))
    return TrainState(
        policy=policy,
        value=value,
        policy_opt=AdamState.for_size(policy.n_trainable),
        value_opt=AdamState.for_size(value.params().size),
        schedule=schedule,
        buffer=RolloutBuffer(cfg.ppo.k_update),
    )


def _push_episode(
    ep: EpisodeResult,
    ts: TrainState,
    cfg: RunConfig,
    ppo_rng: np.random.Generator,
) -> None:
    feats = np.stack([r.features for r in ep.records])
    values = ts.value.forward(feats)
    horizon = len(ep.records)
    for i, rec in enumerate(ep.records):
        ts.buffer.add(
            Transition(
                features=rec.features,
                action=rec.action,
                reward_vec=per_objective_rewards(rec.breakdown),
                total=rec.breakdown.total,
                log_prob=rec.log_prob,
                value=values[i],
                next_features=rec.next_features,
                done=(rec.t == horizon - 1),
            )
        )
        if ts.buffer.full:
            ppo_update(
                ts.policy, ts.value, ts.buffer, cfg.ppo, ppo_rng,
                ts.policy_opt, ts.value_opt, ts.schedule,
            )


def probe_signature(policy: Policy, probes: list[np.ndarray]) -> np.ndarray:
    rows = [_softmax(policy.dist(p).concept_logits) for p in probes]
    return np.stack(rows)


def evaluate_individual(
    ctx: RunContext,
    slot: int,
    individual: Individual,
    generation: int,
    carry: TrainState | None = None,
) -> tuple[IndividualResult, TrainState | None]:
    """Inner RL refinement followed by frozen evaluation episodes.

    Failures are contained: the individual gets ``-inf`` fitness and a recorded
    error while the rest of the generation proceeds.
    """
    cfg = ctx.config
    try:
        ts = carry if carry is not None else _build_train_state(
            ctx, slot, individual.ea_params, generation
        )
        sim = StudentSimulator(ctx.graph, cfg.scenario)
        evaluator = ctx.make_evaluator()
        env_rng = rng_scheme(cfg.seed, generation, slot, "rollout")
        belief_rng = rng_scheme(cfg.seed, generation, slot, "belief")
        ppo_rng = rng_scheme(cfg.seed, generation, slot, "ppo")

        steps = 0
        while steps < cfg.inner_steps:
            ep = run_episode(
                ts.policy, sim, evaluator, ctx.weights, cfg.filter,
                cfg.horizon, env_rng, belief_rng,
            )
            _push_episode(ep, ts, cfg, ppo_rng)
            steps += len(ep.records)

        eval_rng = rng_scheme(cfg.seed, generation, slot, "eval")
        eval_belief_rng = rng_scheme(cfg.seed, generation, slot, "eval-belief")
        returns: list[float] = []
        gated = 0
        depth_sum = 0.0
        direct_sum = 0.0
        gate_sum = 0.0
        process_sum = 0.0
        outcome_sum = 0.0
        total_sum = 0.0
        hope = np.zeros(4)
        trajectory: list[dict] = []
        n_steps = 0
        for episode in range(cfg.eval_episodes):
            ep = run_episode(
                ts.policy, sim, evaluator, ctx.weights, cfg.filter,
                cfg.horizon, eval_rng, eval_belief_rng,
            )
            returns.append(ep.episode_return)
            for rec in ep.records:
                n_steps += 1
                gated += int(rec.breakdown.gated)
                depth_sum += rec.action.socratic_depth
                direct_sum += rec.action.directness
                gate_sum += rec.breakdown.p_gate
                process_sum += rec.breakdown.r_process
                outcome_sum += rec.breakdown.r_outcome
                total_sum += rec.breakdown.total
                hope += np.array(rec.obs.hope_events.as_tuple(), dtype=np.float64)
                trajectory.append(
                    {
                        "generation": generation,
                        "individual": individual.id,
                        "episode": episode,
                        "t": rec.t,
                        "action": action_to_json(rec.action),
                        "reward": asdict(rec.breakdown),
                        "observation": observation_to_json(rec.obs),
                    }
                )

        result = IndividualResult(
            slot=slot,
            individual_id=individual.id,
            fitness=episode_fitness(returns),
            eval_returns=returns,
            gate_rate=gated / n_steps,
            depth_mean=depth_sum / n_steps,
            directness_mean=direct_sum / n_steps,
            mean_gate=gate_sum / n_steps,
            mean_process=process_sum / n_steps,
            mean_outcome=outcome_sum / n_steps,
            mean_total=total_sum / n_steps,
            hope_counts=hope,
            eval_steps=n_steps,
            probe_signature=probe_signature(ts.policy, ctx.probes),
            trained_params=ts.policy.get_trainable(),
            trajectory=trajectory,
        )
        return result, ts
    except Exception as exc:  # noqa: BLE001 - failed individuals must not kill the run
        n_concepts = ctx.graph.n_concepts
        uniform = np.full((len(ctx.probes), n_concepts), 1.0 / n_concepts)
        result = IndividualResult(
            slot=slot,
            individual_id=individual.id,
            fitness=float("-inf"),
            probe_signature=uniform,
            error=f"{type(exc).__name__}: {exc}",
        )
        return result, carry


# ---------------------------------------------------------------------------
# run state and checkpointing
# ---------------------------------------------------------------------------


@dataclass
class RunState:
    generation_next: int
    population: list[Individual]
    next_id: int
    metrics_rows: list[MetricsRow]
    report_rows: list[dict]
    trajectory: list[dict]
    elite_vectors: list[np.ndarray]
    elite_meta: list[dict]
    best: dict | None
    carry_blob: dict | None = None


def _sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def save_checkpoint(path: str | Path, state: RunState, ctx: RunContext) -> None:
    """Write the resumable run state inside a checksummed envelope."""
    cfg = ctx.config
    arrays: dict[str, np.ndarray] = {}
    pop = state.population
    arrays["population_params"] = np.stack([p.ea_params for p in pop])
    arrays["population_ids"] = np.array([p.id for p in pop], dtype=np.int64)
    arrays["population_birth"] = np.array([p.birth_generation for p in pop], dtype=np.int64)
    arrays["population_fitness"] = np.array(
        [np.nan if p.fitness is None else p.fitness for p in pop]
    )
    arrays["population_novelty"] = np.array(
        [np.nan if p.novelty is None else p.novelty for p in pop]
    )
    for i, (w, b) in enumerate(zip(ctx.base_w, ctx.base_b)):
        arrays[f"base_w_{i}"] = w
        arrays[f"base_b_{i}"] = b
    if state.elite_vectors:
        arrays["elite_vectors"] = np.stack(state.elite_vectors)
    if state.carry_blob:
        for key, value in state.carry_blob.items():
            arrays[f"carry_{key}"] = np.asarray(value)
    meta = {
        "generation_next": state.generation_next,
        "next_id": state.next_id,
        "n_layers": len(ctx.base_w),
        "config": cfg.to_dict(),
        "parents": [list(p.parents) for p in pop],
        "metrics_rows": [asdict(r) for r in state.metrics_rows],
        "report_rows": state.report_rows,
        "trajectory": state.trajectory,
        "elite_meta": state.elite_meta,
        "best": state.best,
        "has_carry": state.carry_blob is not None,
    }
    arrays["meta_json"] = np.array(json.dumps(meta))

    payload_io = io.BytesIO()
    np.savez(payload_io, **arrays)
    payload = payload_io.getvalue()
    blob = (
        CHECKPOINT_MAGIC
        + struct.pack("<IQ", CHECKPOINT_VERSION, len(payload))
        + _sha256(payload)
        + payload
    )
    Path(path).write_bytes(blob)


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Verify and unpack a checkpoint; returns (meta, arrays)."""
    raw = Path(path).read_bytes()
    if len(raw) < 48 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    version, length = struct.unpack("<IQ", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version mismatch: {version}")
    digest = raw[16:48]
    payload = raw[48:]
    if len(payload) != length or _sha256(payload) != digest:
        raise CheckpointError("checkpoint payload corrupt (checksum mismatch)")
    data = np.load(io.BytesIO(payload), allow_pickle=False)
    meta = json.loads(str(data["meta_json"]))
    arrays = {k: data[k] for k in data.files if k != "meta_json"}
    return meta, arrays


# ---------------------------------------------------------------------------
# the full run
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    run_dir: Path
    metrics_rows: list[MetricsRow]
    report_rows: list[dict]
    best_fitness: float
    best_id: int
    final_population: list[Individual]
    base_hash_start: str = ""
    base_hash_end: str = ""


def base_weights_hash(base_w: list[np.ndarray], base_b: list[np.ndarray]) -> str:
    h = hashlib.sha256()
    for w, b in zip(base_w, base_b):
        h.update(w.tobytes())
        h.update(b.tobytes())
    return h.hexdigest()


def _init_context(config: RunConfig) -> RunContext:
    graph = load_graph(config.graph_path)
    layout = PolicyLayout(
        feature_dim=BeliefFeatures.dim(graph.n_concepts, graph.n_rules),
        n_concepts=graph.n_concepts,
        hidden=config.policy.hidden,
        rank_ea=config.policy.rank_ea,
        rank_rl=config.policy.rank_rl,
    )
    base_rng = rng_scheme(config.seed, 0, 0, "base")
    base_w, base_b = [], []
    for out_dim, in_dim in layout.layer_dims():
        base_w.append(base_rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim)))
        base_b.append(np.zeros(out_dim))
    ea_rank = layout.rank_ea + layout.rank_rl if config.single_adapter else layout.rank_ea
    ea_template = zero_ea_pairs(layout, rank=ea_rank)
    rl_template = None if config.single_adapter else fresh_rl_pairs(
        layout, rng_scheme(config.seed, 0, 0, "rl-template")
    )
    scenario = config.scenario
    probes = []
    for p in range(config.n_probes):
        belief = init_belief(
            PROBE_PARTICLES, scenario.profile_ranges, graph,
            rng_scheme(config.seed, 0, p, "probe"), scenario,
        )
        probes.append(features(belief).vector())
    return RunContext(
        config=config,
        graph=graph,
        layout=layout,
        weights=config.effective_reward(),
        base_w=base_w,
        base_b=base_b,
        ea_template=ea_template,
        rl_template=rl_template,
        probes=probes,
    )


def _init_population(ctx: RunContext) -> list[Individual]:
    cfg = ctx.config
    ea_rank = (
        ctx.layout.rank_ea + ctx.layout.rank_rl if cfg.single_adapter else ctx.layout.rank_ea
    )
    population = []
    for slot in range(cfg.effective_population()):
        if cfg.disable_ea:
            params = flatten_pairs(zero_ea_pairs(ctx.layout, rank=ea_rank))
        else:
            pairs = fresh_ea_pairs(
                ctx.layout, rng_scheme(cfg.seed, 0, slot, "ea-init"), rank=ea_rank
            )
            params = flatten_pairs(pairs)
        population.append(Individual(id=slot, ea_params=params, birth_generation=0))
    return population


def _comparable_config(doc: dict) -> dict:
    # Resume tolerates a longer generation budget and a relocated output dir;
    # everything else must match or determinism guarantees are void.
    doc = json.loads(json.dumps(doc))
    doc.pop("output_dir", None)
    doc.get("ea", {}).pop("generations", None)
    return doc


def _restore_state(meta: dict, arrays: dict, ctx: RunContext) -> RunState:
    if _comparable_config(meta["config"]) != _comparable_config(ctx.config.to_dict()):
        raise CheckpointError("checkpoint was produced by a different run config")
    params = arrays["population_params"]
    ids = arrays["population_ids"]
    birth = arrays["population_birth"]
    fitness = arrays["population_fitness"]
    nov = arrays["population_novelty"]
    population = []
    for i in range(params.shape[0]):
        population.append(
            Individual(
                id=int(ids[i]),
                ea_params=params[i].copy(),
                fitness=None if np.isnan(fitness[i]) else float(fitness[i]),
                novelty=None if np.isnan(nov[i]) else float(nov[i]),
                parents=tuple(meta["parents"][i]),
                birth_generation=int(birth[i]),
            )
        )
    elite_vectors = (
        [v for v in arrays["elite_vectors"]] if "elite_vectors" in arrays else []
    )
    carry_blob = None
    if meta.get("has_carry"):
        carry_blob = {
            k[len("carry_"):]: arrays[k] for k in arrays if k.startswith("carry_")
        }
    return RunState(
        generation_next=int(meta["generation_next"]),
        population=population,
        next_id=int(meta["next_id"]),
        metrics_rows=[MetricsRow(**row) for row in meta["metrics_rows"]],
        report_rows=meta["report_rows"],
        trajectory=meta["trajectory"],
        elite_vectors=elite_vectors,
        elite_meta=meta["elite_meta"],
        best=meta["best"],
        carry_blob=carry_blob,
    )


def _carry_to_blob(ts: TrainState) -> dict:
    return {
        "policy_params": ts.policy.get_trainable(),
        "value_params": ts.value.params(),
        "policy_m": ts.policy_opt.m,
        "policy_v": ts.policy_opt.v,
        "policy_t": np.array([ts.policy_opt.t, ts.policy_opt.skipped]),
        "value_m": ts.value_opt.m,
        "value_v": ts.value_opt.v,
        "value_t": np.array([ts.value_opt.t, ts.value_opt.skipped]),
    }


def _carry_from_blob(blob: dict, ctx: RunContext, individual: Individual) -> TrainState:
    ts = _build_train_state(ctx, 0, individual.ea_params, 0)
    ts.policy.set_trainable(blob["policy_params"])
    ts.value.set_params(blob["value_params"])
    ts.policy_opt.m = blob["policy_m"].copy()
    ts.policy_opt.v = blob["policy_v"].copy()
    ts.policy_opt.t, ts.policy_opt.skipped = (int(x) for x in blob["policy_t"])
    ts.value_opt.m = blob["value_m"].copy()
    ts.value_opt.v = blob["value_v"].copy()
    ts.value_opt.t, ts.value_opt.skipped = (int(x) for x in blob["value_t"])
    return ts


def run(config: RunConfig, resume_from: str | Path | None = None) -> RunResult:
    """Execute the full generational loop and write all run artifacts."""
    config.validate()
    ctx = _init_context(config)
    cfg = config
    base_hash_start = base_weights_hash(ctx.base_w, ctx.base_b)
    run_dir = Path(cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    if resume_from is not None:
        meta, arrays = load_checkpoint(resume_from)
        state = _restore_state(meta, arrays, ctx)
        carry = (
            _carry_from_blob(state.carry_blob, ctx, state.population[0])
            if state.carry_blob is not None
            else None
        )
    else:
        population = _init_population(ctx)
        state = RunState(
            generation_next=0,
            population=population,
            next_id=len(population),
            metrics_rows=[],
            report_rows=[],
            trajectory=[],
            elite_vectors=[],
            elite_meta=[],
            best=None,
        )
        carry = None

    n_pop = cfg.effective_population()
    final_results: list[IndividualResult] = []

    for generation in range(state.generation_next, cfg.ea.generations):
        t_start = time.perf_counter()
        population = state.population

        if cfg.disable_ea:
            result, carry = evaluate_individual(
                ctx, 0, population[0], generation, carry
            )
            results = [result]
        elif cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=min(cfg.workers, n_pop)) as pool:
                results = list(
                    pool.map(
                        lambda slot: evaluate_individual(
                            ctx, slot, population[slot], generation
                        )[0],
                        range(n_pop),
                    )
                )
        else:
            results = [
                evaluate_individual(ctx, slot, population[slot], generation)[0]
                for slot in range(n_pop)
            ]

        for ind, res in zip(population, results):
            ind.fitness = res.fitness
            if cfg.single_adapter and res.trained_params is not None:
                ind.ea_params = res.trained_params
        if n_pop >= 2:
            for ind in population:
                ind.novelty = novelty(ind, population, cfg.ea.novelty_k)
        else:
            population[0].novelty = 0.0

        if cfg.disable_ea:
            elites = [population[0]]
        else:
            elites = pareto_elites(population, cfg.ea.elite_target())
        elite_ids = {e.id for e in elites}

        wall = time.perf_counter() - t_start
        for ind, res in zip(population, results):
            state.report_rows.append(
                {
                    "generation": generation,
                    "individual": ind.id,
                    "fitness": res.fitness,
                    "novelty": ind.novelty,
                    "gate_rate": res.gate_rate,
                    "mean_process": res.mean_process,
                    "mean_outcome": res.mean_outcome,
                    "mean_total": res.mean_total,
                    "elite": int(ind.id in elite_ids),
                    "parents": list(ind.parents),
                    "error": res.error,
                    "wall_time_s": wall,
                }
            )

        fitnesses = np.array([r.fitness for r in results])
        total_steps = sum(r.eval_steps for r in results)
        hope_total = np.sum([r.hope_counts for r in results], axis=0)
        if n_pop >= 2:
            sv = behavioral_diversity([r.probe_signature for r in results])
        else:
            sv = 0.0
        state.metrics_rows.append(
            MetricsRow(
                generation=generation,
                fitness_mean=float(fitnesses.mean()),
                fitness_max=float(fitnesses.max()),
                sv=float(sv),
                gate_rate=float(
                    sum(r.gate_rate * r.eval_steps for r in results) / max(total_steps, 1)
                ),
                depth_mean=float(
                    sum(r.depth_mean * r.eval_steps for r in results) / max(total_steps, 1)
                ),
                directness_mean=float(
                    sum(r.directness_mean * r.eval_steps for r in results)
                    / max(total_steps, 1)
                ),
                ki_rate=float(hope_total[0] / max(total_steps, 1)),
                kt_rate=float(hope_total[1] / max(total_steps, 1)),
                ct_rate=float(hope_total[2] / max(total_steps, 1)),
                cr_rate=float(hope_total[3] / max(total_steps, 1)),
            )
        )
        for res in results:
            state.trajectory.extend(res.trajectory)
        for elite in elites:
            state.elite_vectors.append(elite.ea_params.copy())
            state.elite_meta.append(
                {"generation": generation, "individual": elite.id,
                 "fitness": elite.fitness}
            )

        best_idx = int(np.argmax(fitnesses))
        best_res = results[best_idx]
        state.best = {
            "generation": generation,
            "individual": population[best_idx].id,
            "fitness": best_res.fitness,
            "slot": best_idx,
        }
        _write_best_adapters(run_dir, ctx, population[best_idx], best_res)
        final_results = results

        if not cfg.disable_ea:
            state.population = next_generation(
                population, elites, cfg.ea,
                rng_scheme(cfg.seed, generation, 0, "evolution"),
                id_start=state.next_id, generation=generation + 1,
            )
            state.next_id += cfg.ea.population
        state.generation_next = generation + 1
        state.carry_blob = _carry_to_blob(carry) if carry is not None else None
        save_checkpoint(run_dir / "checkpoint.bin", state, ctx)

    _write_outputs(run_dir, state)
    return RunResult(
        run_dir=run_dir,
        metrics_rows=state.metrics_rows,
        report_rows=state.report_rows,
        best_fitness=state.best["fitness"] if state.best else float("-inf"),
        best_id=state.best["individual"] if state.best else -1,
        final_population=state.population,
        base_hash_start=base_hash_start,
        base_hash_end=base_weights_hash(ctx.base_w, ctx.base_b),
    )


def _write_best_adapters(
    run_dir: Path, ctx: RunContext, individual: Individual, result: IndividualResult
) -> None:
    if result.trained_params is None:
        return
    ea_pairs = unflatten_pairs(individual.ea_params, ctx.ea_template)
    if ctx.config.single_adapter:
        adapters = AdapterSet(base_w=ctx.base_w, base_b=ctx.base_b, ea=ea_pairs, rl=None)
    else:
        rl_pairs = unflatten_pairs(result.trained_params, ctx.rl_template)
        adapters = AdapterSet(
            base_w=ctx.base_w, base_b=ctx.base_b, ea=ea_pairs, rl=rl_pairs
        )
    (run_dir / "best_adapters.bin").write_bytes(save_adapters(adapters))


def _write_outputs(run_dir: Path, state: RunState) -> None:
    write_metrics_csv(run_dir / "metrics.csv", state.metrics_rows)
    write_reports_csv(run_dir / "reports.csv", state.report_rows)
    write_trajectories_jsonl(run_dir / "trajectories.jsonl", state.trajectory)
    if state.elite_vectors:
        vectors = np.stack(state.elite_vectors)
        gens = [m["generation"] for m in state.elite_meta]
        ids = [m["individual"] for m in state.elite_meta]
        fit = [m["fitness"] for m in state.elite_meta]
        write_elites_npz(run_dir / "elites.npz", vectors, gens, ids, fit)
        if vectors.shape[0] >= 2:
            coords = pca_project(vectors)
            write_projection_csv(run_dir / "projection.csv", coords, gens, ids, fit)


def evaluate_checkpoint(
    adapter_path: str | Path, config: RunConfig, episodes: int | None = None
) -> list[float]:
    """Frozen evaluation episodes for a stored adapter set."""
    from .policy import load_adapters

    config.validate()
    graph = load_graph(config.graph_path)
    adapters = load_adapters(Path(adapter_path).read_bytes())
    layout = PolicyLayout(
        feature_dim=BeliefFeatures.dim(graph.n_concepts, graph.n_rules),
        n_concepts=graph.n_concepts,
        hidden=config.policy.hidden,
        rank_ea=config.policy.rank_ea,
        rank_rl=config.policy.rank_rl,
    )
    policy = Policy(layout, adapters, trainable="rl" if adapters.rl is not None else "ea")
    sim = StudentSimulator(graph, config.scenario)
    evaluator = StructuralEvaluator(graph, config.zpd_ref_width)
    env_rng = rng_scheme(config.seed, 0, 0, "cli-eval")
    belief_rng = rng_scheme(config.seed, 0, 0, "cli-eval-belief")
    returns = []
    for _ in range(episodes or config.eval_episodes):
        ep = run_episode(
            policy, sim, evaluator, config.effective_reward(), config.filter,
            config.horizon, env_rng, belief_rng,
        )
        returns.append(ep.episode_return)
    return returns

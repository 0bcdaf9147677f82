"""Run configuration: one TOML document wiring every subsystem together."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .belief import FilterConfig
from .evolution import EAConfig
from .ppo import PPOConfig
from .reward import RewardWeights
from .student import AffectCoefficients, AffectState, ProfileRanges, ScenarioConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """A run config failed to parse or validate."""


ABLATION_FLAGS = ("disable_ea", "disable_prm", "single_adapter")


@dataclass(frozen=True)
class PolicyDims:
    hidden: tuple[int, int] = (64, 64)
    rank_ea: int = 24
    rank_rl: int = 8

    def validate(self) -> None:
        if len(self.hidden) != 2 or any(h < 1 for h in self.hidden):
            raise ConfigError("policy hidden must be two positive widths")
        if self.rank_ea < 1 or self.rank_rl < 1:
            raise ConfigError("adapter ranks must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    graph_path: str = ""
    output_dir: str = "runs/out"
    horizon: int = 32
    eval_episodes: int = 8
    inner_steps: int = 4096
    workers: int = 0
    disable_ea: bool = False
    disable_prm: bool = False
    single_adapter: bool = False
    zpd_ref_width: float = 0.3
    n_probes: int = 16
    policy: PolicyDims = field(default_factory=PolicyDims)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    ea: EAConfig = field(default_factory=EAConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)

    def validate(self) -> None:
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")
        if self.inner_steps % self.horizon != 0:
            raise ConfigError("inner_steps must be a multiple of horizon")
        if self.inner_steps % self.ppo.k_update != 0:
            raise ConfigError("inner_steps must be a multiple of ppo.k_update")
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")
        if not self.graph_path:
            raise ConfigError("graph path is required")
        if self.zpd_ref_width <= 0:
            raise ConfigError("zpd_ref_width must be positive")
        if self.n_probes < 1:
            raise ConfigError("n_probes must be >= 1")
        self.policy.validate()
        try:
            self.scenario.validate()
            self.filter.validate()
            self.ppo.validate()
            self.ea.validate()
            self.reward.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def effective_reward(self) -> RewardWeights:
        """Reward weights after ablation flags (process layer removed for w/o PRM)."""
        if self.disable_prm:
            return replace(self.reward, lambda_p=0.0)
        return self.reward

    def effective_population(self) -> int:
        return 1 if self.disable_ea else self.ea.population

    def to_dict(self) -> dict:
        return asdict(self)

    def with_ablation(self, flag: str) -> "RunConfig":
        if flag not in ABLATION_FLAGS:
            raise ConfigError(
                f"unknown ablation flag {flag!r}; expected one of {ABLATION_FLAGS}"
            )
        return replace(self, **{flag: True})


def _pair(value, name: str) -> tuple[float, float]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"{name} must be a [low, high] pair")
    return float(value[0]), float(value[1])


def _build_scenario(doc: dict) -> ScenarioConfig:
    section = doc.get("scenario", {})
    ranges_doc = section.get("profile_ranges", {})
    defaults = ProfileRanges()
    ranges = ProfileRanges(
        **{
            name: _pair(ranges_doc[name], f"scenario.profile_ranges.{name}")
            if name in ranges_doc
            else getattr(defaults, name)
            for name in defaults.__dataclass_fields__
        }
    )
    affect_doc = section.get("affect", {})
    affect_defaults = AffectCoefficients()
    affect = AffectCoefficients(
        **{
            name: float(affect_doc.get(name, getattr(affect_defaults, name)))
            for name in affect_defaults.__dataclass_fields__
        }
    )
    init_doc = section.get("init_affect", None)
    init_affect = (
        AffectState(*(float(v) for v in init_doc)) if init_doc is not None else AffectState()
    )
    base = ScenarioConfig()
    return ScenarioConfig(
        profile_ranges=ranges,
        affect=affect,
        sigma_obs=float(section.get("sigma_obs", base.sigma_obs)),
        theta_fix=float(section.get("theta_fix", base.theta_fix)),
        rho_shallow=float(section.get("rho_shallow", base.rho_shallow)),
        shallow_steps=int(section.get("shallow_steps", base.shallow_steps)),
        spoonfeed_directness=float(
            section.get("spoonfeed_directness", base.spoonfeed_directness)
        ),
        kappa=float(section.get("kappa", base.kappa)),
        init_mastery=_pair(section["init_mastery"], "scenario.init_mastery")
        if "init_mastery" in section
        else base.init_mastery,
        init_affect=init_affect,
        confusion_threshold=float(
            section.get("confusion_threshold", base.confusion_threshold)
        ),
    )


def _build_section(doc: dict, key: str, cls, renames: dict | None = None):
    section = dict(doc.get(key, {}))
    renames = renames or {}
    for old, new in renames.items():
        if old in section:
            section[new] = section.pop(old)
    known = set(cls.__dataclass_fields__)
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{key}]: {sorted(unknown)}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"bad [{key}] section: {exc}") from exc


def config_from_dict(doc: dict, base_dir: Path | None = None) -> RunConfig:
    run = doc.get("run", {})
    graph_path = str(run.get("graph", ""))
    if base_dir is not None and graph_path and not Path(graph_path).is_absolute():
        graph_path = str((base_dir / graph_path).resolve())
    output_dir = str(run.get("output_dir", "runs/out"))
    if base_dir is not None and not Path(output_dir).is_absolute():
        output_dir = str(base_dir / output_dir)

    policy_doc = doc.get("policy", {})
    policy = PolicyDims(
        hidden=tuple(int(h) for h in policy_doc.get("hidden", (64, 64))),
        rank_ea=int(policy_doc.get("rank_ea", 24)),
        rank_rl=int(policy_doc.get("rank_rl", 8)),
    )

    ea_doc = dict(doc.get("ea", {}))
    if "crossover_range" in ea_doc:
        low, high = _pair(ea_doc.pop("crossover_range"), "ea.crossover_range")
        ea_doc["crossover_low"] = low
        ea_doc["crossover_high"] = high
    cfg = RunConfig(
        seed=int(run.get("seed", 0)),
        graph_path=graph_path,
        output_dir=output_dir,
        horizon=int(run.get("horizon", 32)),
        eval_episodes=int(run.get("eval_episodes", 8)),
        inner_steps=int(run.get("inner_steps", 4096)),
        workers=int(run.get("workers", 0)),
        disable_ea=bool(run.get("disable_ea", False)),
        disable_prm=bool(run.get("disable_prm", False)),
        single_adapter=bool(run.get("single_adapter", False)),
        zpd_ref_width=float(run.get("zpd_ref_width", 0.3)),
        n_probes=int(run.get("n_probes", 16)),
        policy=policy,
        scenario=_build_scenario(doc),
        filter=_build_section(doc, "filter", FilterConfig, {"particles": "n_particles"}),
        ppo=_build_section(doc, "ppo", PPOConfig),
        ea=_build_section({"ea": ea_doc}, "ea", EAConfig),
        reward=_build_section(doc, "reward", RewardWeights),
    )
    cfg.validate()
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse failure in {path}: {exc}") from exc
    return config_from_dict(doc, base_dir=path.parent.resolve())

"""Run configuration: parsing, validation and construction of the run objects."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import approx
from .errors import AssumptionViolation, InvalidArgument
from .mdp import (
    Policy,
    PolicyPair,
    TabularMdp,
    garnet,
    garnet_features,
    garnet_policies,
    make_rng,
    spiral_mdp,
)
from .mspbe import ConstantsLedger, constants_ledger, estimate_base_constants, ground_truth
from .tdc import StepSchedule, TdcProblem

EXPERIMENTS = ("garnet", "spiral", "custom")
PRESETS = ("spiral1", "spiral2", "garnet1", "garnet2", "spiral_rate")



@dataclass
class RunConfig:
    """Everything needed to reproduce one experiment; keys mirror the YAML file."""

    experiment: str
    mdp: dict = field(default_factory=dict)
    approximator: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    regime: str = "markov"
    T: int = 1000
    n_seeds: int = 1
    master_seed: int = 0
    mode: str = "full"
    cadence: int | None = None
    eps_reg: float = 1e-8
    projection: bool = True
    R_omega: float | None = None
    variance_samples: int = 0
    probe: dict = field(default_factory=lambda: {"radius": 1.0, "n_samples": 200, "seed": 0})
    acknowledge_infeasible: bool = True
    jobs: int = 1
    output_dir: str | None = None
    name: str | None = None
    horizons: list | None = None
    estimator: str = "averaged"
    synthetic: dict | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise InvalidArgument(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.regime not in ("iid", "markov"):
            raise InvalidArgument("regime must be 'iid' or 'markov'")
        if self.mode not in ("full", "randomized"):
            raise InvalidArgument("mode must be 'full' or 'randomized'")
        if int(self.T) < 1 or int(self.n_seeds) < 1:
            raise InvalidArgument("T and n_seeds must be >= 1")
        if self.cadence is not None and int(self.cadence) < 1:
            raise InvalidArgument("cadence must be >= 1")
        if self.eps_reg < 0:
            raise InvalidArgument("eps_reg must be nonnegative")
        if self.R_omega is not None and not self.R_omega > 0:
            raise InvalidArgument("R_omega must be positive")
        if self.variance_samples < 0 or self.jobs < 1:
            raise InvalidArgument("variance_samples must be >= 0 and jobs >= 1")
        if self.estimator not in ("averaged", "sampled"):
            raise InvalidArgument("estimator must be 'averaged' or 'sampled'")
        sched = dict(self.schedule)
        if "alpha0" not in sched or "beta0" not in sched:
            raise InvalidArgument("schedule needs alpha0 and beta0")
        StepSchedule(**{"kind": "constant", **sched, "T": int(self.T)})
        family = self.approximator.get("family")
        if family not in approx.FAMILIES:
            raise InvalidArgument(f"unknown approximator family {family!r}")
        if self.experiment == "spiral" and family != "spiral":
            raise InvalidArgument("the spiral experiment uses the spiral family")

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise InvalidArgument("config must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown config keys: {sorted(unknown)}")
        if "experiment" not in d:
            raise InvalidArgument("config needs an 'experiment' key")
        try:
            return cls(**copy.deepcopy(d))
        except TypeError as exc:
            raise InvalidArgument(str(exc)) from exc

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise InvalidArgument(f"config is not valid YAML: {exc}") from exc
        return cls.from_dict(data)

    @property
    def seeds(self) -> list:
        """Per-run seeds derived from the master seed."""
        state = np.random.SeedSequence(int(self.master_seed)).generate_state(int(self.n_seeds), dtype=np.uint32)
        return [int(s) for s in state]


def load_config(path) -> RunConfig:
    """Read a config file, or a bundled preset when ``path`` names one."""
    if str(path) in PRESETS:
        return RunConfig.from_yaml(preset_text(str(path)))
    p = Path(path)
    if not p.is_file():
        raise InvalidArgument(f"config file not found: {path}")
    return RunConfig.from_yaml(p.read_text())


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise InvalidArgument(f"unknown preset {name!r}")
    return resources.files("nltdc.presets").joinpath(f"{name}.yaml").read_text()


def build_environment(cfg: RunConfig) -> tuple[TabularMdp, PolicyPair]:
    m = cfg.mdp
    if cfg.experiment == "spiral":
        return spiral_mdp()
    if cfg.experiment == "garnet":
        try:
            n_s, n_a, b, seed = int(m["n_states"]), int(m["n_actions"]), int(m["branching"]), int(m["seed"])
        except KeyError as exc:
            raise InvalidArgument(f"garnet config missing {exc}") from exc
        mdp = garnet(
            n_s, n_a, b, seed,
            gamma=float(m.get("gamma", 0.95)),
            reward_depends_on_next=bool(m.get("reward_depends_on_next", True)),
        )
        pair = garnet_policies(n_s, n_a, seed, temperature=float(m.get("temperature", 0.5)))
        return mdp, pair
    mdp = TabularMdp.from_dict(m["model"])
    pol = m.get("policies")
    if pol is None:
        pair = PolicyPair.on_policy(Policy.uniform(mdp.n_states, mdp.n_actions))
    else:
        pair = PolicyPair.from_dict(pol)
    return mdp, pair


def build_approximator(cfg: RunConfig, mdp: TabularMdp) -> approx.Approximator:
    d = dict(cfg.approximator)
    family = d.pop("family")
    if family == "mlp":
        inputs = d.get("inputs")
        if inputs is None:
            inputs = garnet_features(mdp.n_states, int(d.get("feature_seed", cfg.mdp.get("seed", 0))))
        return approx.MLPSpec(tuple(d["widths"]), inputs)
    if family == "spiral":
        if "set" in d:
            d.update(approx.SPIRAL_SETS[int(d.pop("set"))])
        return approx.SpiralSpec(**d)
    return approx.LinearSpec(d["features"])


def probe_thetas(cfg: RunConfig, spec: approx.Approximator) -> np.ndarray:
    probe = cfg.probe or {}
    rng = make_rng([int(probe.get("seed", 0)), 7])
    return approx.sample_ball(rng, spec.param_dim, float(probe.get("radius", 1.0)), int(probe.get("n_samples", 200)))


def resolve_ledger(cfg: RunConfig, mdp, pair, spec) -> tuple[ConstantsLedger | None, str | None]:
    """Ledger from probe-region constants; ``(None, reason)`` when unavailable."""
    gt = ground_truth(mdp, pair, cfg.eps_reg)
    try:
        base = estimate_base_constants(mdp, pair, spec, gt, probe_thetas(cfg, spec))
        return constants_ledger(base), None
    except AssumptionViolation as exc:
        return None, str(exc)


@dataclass
class ResolvedRun:
    config: RunConfig
    mdp: TabularMdp
    pair: PolicyPair
    spec: approx.Approximator
    ledger: ConstantsLedger | None
    ledger_note: str | None
    R_omega: float | None
    R_omega_source: str
    problem: TdcProblem


def resolve(cfg: RunConfig) -> ResolvedRun:
    mdp, pair = build_environment(cfg)
    spec = build_approximator(cfg, mdp)
    if spec.n_states != mdp.n_states:
        raise InvalidArgument("approximator and MDP disagree on the number of states")
    ledger, note = resolve_ledger(cfg, mdp, pair, spec)
    if not cfg.projection:
        R, source = None, "disabled"
    elif cfg.R_omega is not None:
        R, source = float(cfg.R_omega), "override"
    elif ledger is not None and np.isfinite(ledger.R_omega):
        R, source = float(ledger.R_omega), "ledger"
    else:
        R, source = None, "unavailable"
    schedule = StepSchedule(**{"kind": "constant", **cfg.schedule, "T": int(cfg.T)})
    problem = TdcProblem(
        mdp, pair, spec, schedule, cfg.regime,
        R_omega=R,
        eps_reg=cfg.eps_reg,
        cadence=cfg.cadence,
        variance_samples=int(cfg.variance_samples),
        ledger=ledger,
        acknowledge_infeasible=bool(cfg.acknowledge_infeasible),
    )
    return ResolvedRun(cfg, mdp, pair, spec, ledger, note, R, source, problem)

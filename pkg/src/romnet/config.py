"""Pipeline configuration: typed sections read from a YAML file.

Every section is a mapping of scalars or lists.  Keys missing from the file
take the defaults below; unknown keys are an error.  See README.md for the
full grammar and ``data/default.yaml`` / ``data/tiny.yaml`` for examples.
"""

from dataclasses import asdict, dataclass, field, fields
import hashlib
import json
from importlib import resources
from pathlib import Path

import yaml

from .loading import CycleSchedule
from .material import MaterialParams, default_material
from .mesh import BladeParams
from .thermal import ThermalParams


class ConfigError(ValueError):
    pass


@dataclass
class DoEConfig:
    maxproj: int = 80
    sobol: int = 120
    maxproj_iters: int = 20000


@dataclass
class SolverConfig:
    newton_tol: float = 1e-8
    newton_atol: float = 1e-12
    max_newton: int = 25
    max_bisections: int = 3


@dataclass
class ClusterConfig:
    K: int = 2
    n_init: int = 10
    variant: str = "goal"          # goal: p_cum at the end of the cycle | method: displacement at peak


@dataclass
class RomConfig:
    primal_tol: float = 1e-8
    dual_tol: float = 1e-4
    ecm_tol: float = 5e-4
    snapshots_per_cluster: int = 20


@dataclass
class ClassifierConfig:
    threshold: float = 0.05
    k: int = 11
    n_pairs: int = 800
    C_grid: list = field(default_factory=lambda: [1e-3])
    l1_ratio_grid: list = field(default_factory=lambda: [0.4])
    folds: int = 5


@dataclass
class GappyConfig:
    folds: int = 5
    n_lambdas: int = 30
    lambda_ratio: float = 1e-4
    tol: float = 1e-4


@dataclass
class UQConfig:
    draws: int = 1008
    zone_fraction: float = 0.4
    kde_points: int = 256
    histogram_bins: int = 30


@dataclass
class ValidateConfig:
    n_new: int = 20


@dataclass
class Seeds:
    doe_seed: int = 0
    cluster_seed: int = 0
    cv_seed: int = 0
    mc_seed: int = 0
    validate_seed: int = 1


_SECTIONS = {
    "blade": BladeParams, "thermal": ThermalParams, "schedule": CycleSchedule,
    "solver": SolverConfig, "doe": DoEConfig, "cluster": ClusterConfig, "rom": RomConfig,
    "classifier": ClassifierConfig, "gappy": GappyConfig, "uq": UQConfig,
    "validate": ValidateConfig, "seeds": Seeds,
}


@dataclass
class PipelineConfig:
    blade: BladeParams = field(default_factory=BladeParams)
    material: MaterialParams = field(default_factory=default_material)
    thermal: ThermalParams = field(default_factory=ThermalParams)
    schedule: CycleSchedule = field(default_factory=CycleSchedule)
    solver: SolverConfig = field(default_factory=SolverConfig)
    doe: DoEConfig = field(default_factory=DoEConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    rom: RomConfig = field(default_factory=RomConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    gappy: GappyConfig = field(default_factory=GappyConfig)
    uq: UQConfig = field(default_factory=UQConfig)
    validate: ValidateConfig = field(default_factory=ValidateConfig)
    seeds: Seeds = field(default_factory=Seeds)
    workers: int = 1

    def __post_init__(self):
        self.check()

    def check(self):
        tols = {"rom.primal_tol": self.rom.primal_tol, "rom.dual_tol": self.rom.dual_tol,
                "rom.ecm_tol": self.rom.ecm_tol, "gappy.tol": self.gappy.tol,
                "solver.newton_tol": self.solver.newton_tol}
        bad = [k for k, v in tols.items() if not v > 0]
        if bad:
            raise ConfigError(f"tolerances must be positive: {bad}")
        need = self.cluster.K * self.rom.snapshots_per_cluster
        if self.doe.maxproj < need:
            raise ConfigError(f"doe.maxproj = {self.doe.maxproj} < K * snapshots_per_cluster = {need}")
        if self.cluster.variant not in ("goal", "method"):
            raise ConfigError(f"cluster.variant must be 'goal' or 'method', got {self.cluster.variant!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def section(self, name):
        """Config value by section name, or ``section.key`` for a single key."""
        if "." in name:
            sec, key = name.split(".", 1)
            return self.section(sec)[key]
        if name == "material":
            return self.material.to_dict()
        if name == "workers":
            return self.workers
        obj = getattr(self, name)
        return obj.to_dict() if hasattr(obj, "to_dict") else asdict(obj)

    def to_dict(self):
        d = {name: self.section(name) for name in _SECTIONS}
        d["material"] = self.material.to_dict()
        d["workers"] = self.workers
        return d

    def hash(self, sections=None):
        """sha256 of the canonical JSON of the given sections (all by default)."""
        names = sorted(sections) if sections is not None else sorted(self.to_dict())
        blob = json.dumps({n: self.section(n) for n in names}, sort_keys=True, default=float)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _build_section(cls, data, name):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def _build_material(data):
    if data is None or data == {"preset": "default"}:
        return default_material()
    if not isinstance(data, dict) or "temperatures" not in data or "table" not in data:
        raise ConfigError("material must be {preset: default} or {temperatures: [...], table: {...}}")
    try:
        return MaterialParams.from_dict(data)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"material: {exc}") from exc


def config_from_dict(d):
    d = dict(d or {})
    unknown = sorted(set(d) - set(_SECTIONS) - {"material", "workers"})
    if unknown:
        raise ConfigError(f"unknown section(s): {unknown}")
    kw = {name: _build_section(cls, d.get(name), name) for name, cls in _SECTIONS.items()}
    kw["material"] = _build_material(d.get("material"))
    kw["workers"] = int(d.get("workers", 1))
    return PipelineConfig(**kw)


def load_config(path=None):
    """Read a YAML config; ``None`` or ``"default"`` / ``"tiny"`` select a shipped file."""
    if path is None or str(path) in ("default", "tiny"):
        name = "default" if path is None else str(path)
        text = resources.files("romnet").joinpath(f"data/{name}.yaml").read_text()
    else:
        text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)

"""Experiment harness: configuration, instance loading, runs and generation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Optional

import yaml

from .engine import IterationRecord, ReallocationEngine, StopRule
from .errors import (
    ConfigParseError,
    ConfigSchemaError,
    InstanceError,
    OracleError,
    ReallocationError,
    RunFailure,
    ValidationFailedError,
)
from .model import (
    BARRIER_KINDS,
    FAMILY_DISPATCH,
    FAMILY_MULTI_RESOURCE,
    ProblemInstance,
    ValidationReport,
    sample_dispatch,
    sample_multi_resource,
    validate_instance,
)
from .oracle import solve_centralized_original
from .trace_logger import TraceLogger, TraceSummary

logger = logging.getLogger(__name__)

FAMILIES = (FAMILY_DISPATCH, FAMILY_MULTI_RESOURCE)
INIT_STRATEGIES = ("even", "from-point")


@dataclass
class GeneratorSpec:
    """Synthetic instance to build instead of reading a file."""

    family: str = FAMILY_DISPATCH
    n: int = 10
    seed: int = 0

    def build(self) -> ProblemInstance:
        if self.family == FAMILY_DISPATCH:
            return sample_dispatch(self.n, self.seed)
        if self.family == FAMILY_MULTI_RESOURCE:
            return sample_multi_resource(self.n, self.seed)
        raise InstanceError(f"unknown family {self.family!r}; expected one of {FAMILIES}")

    def to_dict(self) -> dict:
        return {"family": self.family, "n": self.n, "seed": self.seed}


@dataclass
class RunConfig:
    """Complete experiment configuration."""

    instance_path: Optional[Path] = None
    generate: Optional[GeneratorSpec] = None
    barrier_kind: Optional[str] = None  # None = the instance's own barrier kind
    c_values: list[float] = field(default_factory=list)  # empty = the instance's own c
    max_iters: int = 1000
    seed: int = 0
    init: str = "even"
    stop: StopRule = field(default_factory=StopRule)
    residual_every: int = 0
    out: Path = Path("runs/latest")

    def __post_init__(self):
        """Check value ranges.

        Raises:
            ConfigSchemaError: Naming the offending field.
        """
        if not isinstance(self.c_values, list):
            raise ConfigSchemaError("c: expected a number or a list of numbers")
        for index, c in enumerate(self.c_values):
            if not isinstance(c, (int, float)) or isinstance(c, bool) or not math.isfinite(c) or c <= 0:
                raise ConfigSchemaError(f"c[{index}]: barrier weight must be a positive number, got {c!r}")
        if self.barrier_kind is not None and self.barrier_kind not in BARRIER_KINDS:
            raise ConfigSchemaError(f"barrier.kind: expected one of {BARRIER_KINDS}, got {self.barrier_kind!r}")
        if not isinstance(self.max_iters, int) or self.max_iters < 1:
            raise ConfigSchemaError(f"iters: must be a positive integer, got {self.max_iters!r}")
        if not isinstance(self.seed, int):
            raise ConfigSchemaError(f"seed: must be an integer, got {self.seed!r}")
        if self.init not in INIT_STRATEGIES:
            raise ConfigSchemaError(f"init: expected one of {INIT_STRATEGIES}, got {self.init!r}")
        if not isinstance(self.residual_every, int) or self.residual_every < 0:
            raise ConfigSchemaError(f"residual_every: must be a non-negative integer, got {self.residual_every!r}")

    @classmethod
    def from_dict(cls, data: dict[str, Any], base_dir: Optional[Path] = None) -> "RunConfig":
        """Create config from a run dictionary.

        Args:
            data: Run keys (``c``, ``iters``, ``seed``, ``init``, ``stop``,
                ``residual_every``, ``out``, ``instance``, ``generate``, ``barrier``).
            base_dir: Directory that relative paths are resolved against.

        Returns:
            RunConfig instance.

        Raises:
            ConfigSchemaError: On malformed values.
        """
        if not isinstance(data, dict):
            raise ConfigSchemaError("run configuration must be a mapping")
        base_dir = base_dir or Path(".")

        c = data.get("c", [])
        c_values = list(c) if isinstance(c, (list, tuple)) else [c]
        # YAML 1.1 reads "1e-3" as a string
        for index, value in enumerate(c_values):
            if isinstance(value, str):
                try:
                    c_values[index] = float(value)
                except ValueError as e:
                    raise ConfigSchemaError(f"c[{index}]: not a number: {value!r}") from e

        try:
            stop = StopRule.parse(data.get("stop"))
        except ValueError as e:
            raise ConfigSchemaError(f"stop: {e}") from e

        generate = None
        if data.get("generate") is not None:
            gen = data["generate"]
            if not isinstance(gen, dict):
                raise ConfigSchemaError("generate: expected a mapping with family, n and seed")
            generate = GeneratorSpec(
                family=gen.get("family", FAMILY_DISPATCH),
                n=gen.get("n", 10),
                seed=gen.get("seed", 0),
            )

        instance_path = data.get("instance")
        barrier = data.get("barrier") or {}
        return cls(
            instance_path=None if instance_path is None else base_dir / instance_path,
            generate=generate,
            barrier_kind=barrier.get("kind") if isinstance(barrier, dict) else None,
            c_values=c_values,
            max_iters=data.get("iters", 1000),
            seed=data.get("seed", 0),
            init=data.get("init", "even"),
            stop=stop,
            residual_every=data.get("residual_every", 0),
            out=Path(data.get("out", "runs/latest")),
        )

    @classmethod
    def from_yaml(cls, path: Path) -> "RunConfig":
        """Load a run document from YAML."""
        path = Path(path)
        return cls.from_dict(_read_document(path), base_dir=path.parent)

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Copy with every non-None override applied and re-validated."""
        return replace(self, **{key: value for key, value in overrides.items() if value is not None})

    def effective_c(self, inst: ProblemInstance) -> list[float]:
        return list(self.c_values) or [inst.barrier.c]

    def to_dict(self) -> dict:
        return {
            "instance": None if self.instance_path is None else str(self.instance_path),
            "generate": None if self.generate is None else self.generate.to_dict(),
            "barrier_kind": self.barrier_kind,
            "c": self.c_values,
            "iters": self.max_iters,
            "seed": self.seed,
            "init": self.init,
            "stop": str(self.stop),
            "residual_every": self.residual_every,
            "out": str(self.out),
        }


def _read_document(path: Path) -> Any:
    """Parse a JSON or YAML file.

    Raises:
        ConfigParseError: If the file is missing or does not parse.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigParseError(f"cannot read {path}: {e}") from e
    try:
        if path.suffix.lower() == ".json":
            return json.loads(text)
        return yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigParseError(f"failed to parse {path}: {e}") from e


def load_instance(path: Path) -> ProblemInstance:
    """Read an instance document.

    Raises:
        ConfigParseError: If the file does not parse.
        ConfigSchemaError: If it does not match the instance schema.
    """
    data = _read_document(path)
    try:
        return ProblemInstance.from_dict(data)
    except InstanceError as e:
        raise ConfigSchemaError(f"{path}: {e}") from e


def save_instance(inst: ProblemInstance, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(inst.to_dict(), f, indent=2)
        f.write("\n")


def require_valid(inst: ProblemInstance) -> ValidationReport:
    """Validate and raise on failure.

    Raises:
        ValidationFailedError: Carrying the report.
    """
    report = validate_instance(inst)
    if not report.ok:
        raise ValidationFailedError(f"instance failed validation: {report.summary()}", report)
    return report


def load_config(path: Path, validate: bool = True) -> tuple[RunConfig, ProblemInstance]:
    """Load a run configuration and its instance.

    The document is either an instance (top-level ``nodes``) with an optional
    ``run`` block, or a run document naming ``instance: PATH`` or
    ``generate: {family, n, seed}``.

    Raises:
        ConfigParseError: Exit code 2.
        ConfigSchemaError: Exit code 3.
        ValidationFailedError: Exit code 3, when ``validate`` is set.
    """
    path = Path(path)
    data = _read_document(path)
    if not isinstance(data, dict):
        raise ConfigSchemaError(f"{path}: top level must be a mapping")

    if "nodes" in data:
        config = RunConfig.from_dict(data.get("run") or {}, base_dir=path.parent)
        try:
            inst = ProblemInstance.from_dict(data)
        except InstanceError as e:
            raise ConfigSchemaError(f"{path}: {e}") from e
    else:
        config = RunConfig.from_dict(data, base_dir=path.parent)
        inst = resolve_instance(config)

    if validate:
        require_valid(inst)
    logger.debug(f"Loaded {path} (n={inst.n}, family={inst.family})")
    return config, inst


def resolve_instance(config: RunConfig) -> ProblemInstance:
    """The instance a run document points at.

    Raises:
        ConfigSchemaError: If the document names neither an instance nor a generator.
    """
    if config.instance_path is not None:
        return load_instance(config.instance_path)
    if config.generate is not None:
        try:
            return config.generate.build()
        except InstanceError as e:
            raise ConfigSchemaError(f"generate: {e}") from e
    raise ConfigSchemaError("configuration names no instance; set 'instance' or 'generate'")


@dataclass
class ExperimentResult:
    """All runs of one experiment."""

    f_star: float
    out_dir: Path
    summaries: list[TraceSummary]


def run_experiment(
    cfg: RunConfig,
    instance: Optional[ProblemInstance] = None,
    on_record: Optional[Callable[[float, IterationRecord], None]] = None,
) -> ExperimentResult:
    """Run the engine once per barrier weight and write the traces.

    ``f*`` is computed once by the oracle; each weight gets its own
    ``trace_c{c}.csv`` and ``summary.json`` collects the final metrics.

    Raises:
        RunFailure: If the oracle or the engine fails (exit code 4).
    """
    inst = instance if instance is not None else resolve_instance(cfg)
    try:
        f_star = solve_centralized_original(inst).value
    except OracleError as e:
        raise RunFailure(f"oracle failed: {e}") from e
    logger.info(f"Reference optimum f* = {f_star:.12g}")

    traces = TraceLogger(cfg.out, config=cfg.to_dict())
    traces.f_star = f_star
    for c in cfg.effective_c(inst):
        inst_c = inst.with_barrier(c, kind=cfg.barrier_kind)
        engine = ReallocationEngine(inst_c)
        traces.begin(c)

        def record(rec: IterationRecord, c: float = c) -> None:
            traces.log_record(rec)
            if on_record:
                on_record(c, rec)

        try:
            result = engine.run(
                init=cfg.init,
                max_iters=cfg.max_iters,
                seed=cfg.seed,
                stop=cfg.stop,
                residual_every=cfg.residual_every,
                on_record=record,
            )
        except ReallocationError as e:
            traces.end(stopped_by="failed")
            raise RunFailure(f"run at c={c:g} failed: {e}") from e

        summary = traces.end(
            stopped_by=result.stopped_by,
            total_messages=result.total_messages,
            mean_update_size=result.mean_update_size,
            leader_counts=result.leader_counts.tolist(),
        )
        logger.info(f"c={c:g}: final relative objective error {summary.final_rel_obj_err}")

    return ExperimentResult(f_star=f_star, out_dir=Path(cfg.out), summaries=traces.finalize())


def gen_command(family: str, n: int, seed: int, out: Path, c: Optional[float] = None) -> ProblemInstance:
    """Generate, validate and write a synthetic instance.

    Raises:
        InstanceError: On invalid generator parameters (exit code 3).
        ValidationFailedError: If the result fails validation (exit code 3).
    """
    if n < 1:
        raise InstanceError(f"n must be at least 1, got {n}")
    inst = GeneratorSpec(family=family, n=n, seed=seed).build()
    if c is not None:
        inst = inst.with_barrier(c)
    require_valid(inst)
    save_instance(inst, out)
    logger.info(f"Wrote {family} instance with n={n} to {out}")
    return inst

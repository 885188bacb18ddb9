from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Any, Dict, Mapping, Optional, Type, TypeVar

from .core.errors import ConfigError, SpecError


class FusionMode(str, Enum):
    NONE = "NONE"
    GLOBAL_TOKENS = "GLOBAL_TOKENS"
    QUERY_AS_GLOBAL = "QUERY_AS_GLOBAL"
    CLS_TO_CLS = "CLS_TO_CLS"
    GLOBAL_TO_CLS_ONLY = "GLOBAL_TO_CLS_ONLY"
    FULL_CONCAT = "FULL_CONCAT"

    @property
    def uses_global_tokens(self) -> bool:
        return self in (FusionMode.GLOBAL_TOKENS, FusionMode.QUERY_AS_GLOBAL, FusionMode.GLOBAL_TO_CLS_ONLY)


class ProbSpace(str, Enum):
    DIRECT_SPAN = "DIRECT_SPAN"
    NONCOND_START_END = "NONCOND_START_END"
    SEPARATE_GLOBAL = "SEPARATE_GLOBAL"
    SPAN_REPR_SUM_STRING = "SPAN_REPR_SUM_STRING"
    LOGIT_SUM_STRING = "LOGIT_SUM_STRING"
    PER_PASSAGE_BASELINE = "PER_PASSAGE_BASELINE"


class Objective(str, Enum):
    MML = "MML"
    MML_PLUS_HARDEM_MAX = "MML_PLUS_HARDEM_MAX"
    MML_PLUS_HARDEM_MIN = "MML_PLUS_HARDEM_MIN"
    MML_PLUS_HARDEM_MASS80 = "MML_PLUS_HARDEM_MASS80"


E = TypeVar("E", bound=Enum)
T = TypeVar("T")


def _enum(cls: Type[E], raw: object, field_name: str) -> E:
    if isinstance(raw, cls):
        return raw
    try:
        return cls(str(raw).upper())
    except ValueError:
        choices = ", ".join(m.value for m in cls)
        raise ConfigError(f"{field_name}: {raw!r} is not one of {choices}") from None


def _from_mapping(cls: Type[T], d: Mapping[str, object], enums: Optional[Dict[str, Type[Enum]]] = None) -> T:
    enums = enums or {}
    kwargs: Dict[str, Any] = {}
    for f in fields(cls):  # type: ignore[arg-type]
        if f.name not in d:
            continue
        raw = d[f.name]
        if f.name in enums:
            kwargs[f.name] = _enum(enums[f.name], raw, f.name)
        else:
            kwargs[f.name] = raw
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from e


def _plain(obj: Any) -> Any:
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


@dataclass
class FusionConfig:
    num_layers: int = 2
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: Optional[int] = None
    num_passages: int = 8
    passage_seq_len: int = 32
    num_global_tokens: int = 10
    fusion_mode: FusionMode = FusionMode.GLOBAL_TOKENS
    max_answer_len: int = 15
    layer_norm_eps: float = 1e-12
    init_std: float = 0.02

    def __post_init__(self) -> None:
        self.fusion_mode = _enum(FusionMode, self.fusion_mode, "fusion_mode")
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.model_dim < 1 or self.num_heads < 1 or self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} must be divisible by num_heads {self.num_heads}")
        if self.num_global_tokens < 0:
            raise ConfigError(f"num_global_tokens must be >= 0, got {self.num_global_tokens}")
        if self.max_answer_len < 1:
            raise ConfigError(f"max_answer_len must be >= 1, got {self.max_answer_len}")
        if self.num_passages < 1 or self.passage_seq_len < 2:
            raise ConfigError("num_passages must be >= 1 and passage_seq_len >= 2")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return self.ffn_dim or 4 * self.model_dim

    @property
    def effective_global_tokens(self) -> int:
        """Global slots actually present; modes without global tokens force zero."""
        return self.num_global_tokens if self.fusion_mode.uses_global_tokens else 0

    @staticmethod
    def from_dict(d: Mapping[str, object]) -> "FusionConfig":
        return _from_mapping(FusionConfig, d, {"fusion_mode": FusionMode})


@dataclass
class ProbSpaceConfig:
    variant: ProbSpace = ProbSpace.DIRECT_SPAN
    objective: Objective = Objective.MML
    hardem_weight: float = 0.1

    def __post_init__(self) -> None:
        self.variant = _enum(ProbSpace, self.variant, "variant")
        self.objective = _enum(Objective, self.objective, "objective")
        if self.hardem_weight < 0:
            raise ConfigError(f"hardem_weight must be >= 0, got {self.hardem_weight}")

    @staticmethod
    def from_dict(d: Mapping[str, object]) -> "ProbSpaceConfig":
        return _from_mapping(ProbSpaceConfig, d, {"variant": ProbSpace, "objective": Objective})


@dataclass
class OptimConfig:
    steps: int = 1000
    learning_rate: float = 1e-3
    warmup_fraction: float = 0.1
    grad_accum: int = 1
    batch_size: int = 4
    seed: int = 0
    precision: str = "f64"
    max_grad_norm: float = 1.0
    eval_every: Optional[int] = None
    eval_limit: Optional[int] = None

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError(f"warmup_fraction must lie in [0, 1], got {self.warmup_fraction}")
        if self.grad_accum < 1 or self.batch_size < 1:
            raise ConfigError("grad_accum and batch_size must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def eval_interval(self) -> int:
        return self.eval_every or max(1, self.steps // 20)

    @staticmethod
    def from_dict(d: Mapping[str, object]) -> "OptimConfig":
        return _from_mapping(OptimConfig, d)


@dataclass
class SyntheticTaskSpec:
    vocab_size: int = 200
    num_passages: int = 8
    passage_len: int = 16
    answer_len: int = 2
    num_plants: int = 3
    num_distractors: int = 3
    requires_aggregation: bool = True
    seed: int = 0
    num_train: int = 2000
    num_dev: int = 200

    def __post_init__(self) -> None:
        if self.num_plants < 1:
            raise SpecError(f"num_plants must be >= 1, got {self.num_plants}")
        if self.requires_aggregation and self.num_plants < 2:
            raise SpecError("requires_aggregation needs num_plants > 1")
        if self.answer_len < 1:
            raise SpecError(f"answer_len must be >= 1, got {self.answer_len}")

    @property
    def chance_level(self) -> float:
        return 1.0 / (1 + self.num_distractors)

    @property
    def span_chance_level(self) -> float:
        """Gold share of the planted spans, all of which look alike inside one passage."""
        return self.num_plants / (self.num_plants + self.num_distractors)

    @staticmethod
    def from_dict(d: Mapping[str, object]) -> "SyntheticTaskSpec":
        return _from_mapping(SyntheticTaskSpec, d)


@dataclass
class DataConfig:
    train_path: Optional[str] = None
    dev_path: Optional[str] = None
    min_freq: int = 2
    strict: bool = False

    @staticmethod
    def from_dict(d: Mapping[str, object]) -> "DataConfig":
        return _from_mapping(DataConfig, d)


@dataclass
class RunConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    prob_space: ProbSpaceConfig = field(default_factory=ProbSpaceConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    synthetic: Optional[SyntheticTaskSpec] = None
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self) -> None:
        if self.synthetic is not None and self.synthetic.answer_len > self.fusion.max_answer_len:
            raise ConfigError(
                f"synthetic answer_len {self.synthetic.answer_len} exceeds max_answer_len {self.fusion.max_answer_len}"
            )

    @staticmethod
    def from_dict(d: Mapping[str, object]) -> "RunConfig":
        def block(key: str) -> Mapping[str, object]:
            raw = d.get(key) or {}
            if not isinstance(raw, Mapping):
                raise ConfigError(f"{key} must be a JSON object")
            return raw

        synthetic = d.get("synthetic")
        return RunConfig(
            fusion=FusionConfig.from_dict(block("fusion")),
            prob_space=ProbSpaceConfig.from_dict(block("prob_space")),
            optim=OptimConfig.from_dict(block("optim")),
            synthetic=SyntheticTaskSpec.from_dict(block("synthetic")) if synthetic is not None else None,
            data=DataConfig.from_dict(block("data")),
        )

    def to_dict(self) -> Dict[str, object]:
        return _plain(asdict(self))

    def with_overrides(self, **blocks: Dict[str, object]) -> "RunConfig":
        """Copy with selected fields of the named blocks replaced, re-validated."""
        merged = self.to_dict()
        for key, updates in blocks.items():
            current = merged.get(key) or {}
            assert isinstance(current, dict)
            merged[key] = {**current, **updates}
        return RunConfig.from_dict(merged)


__all__ = [
    "DataConfig",
    "FusionConfig",
    "FusionMode",
    "Objective",
    "OptimConfig",
    "ProbSpace",
    "ProbSpaceConfig",
    "RunConfig",
    "SyntheticTaskSpec",
]

from enum import StrEnum
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")


class AdapterSites(StrEnum):
    NONE = "none"
    ENCODER = "encoder"
    ENCODER_DECODER = "encoder+decoder"


class SourceMode(StrEnum):
    PARALLEL = "parallel"
    COPY = "copy"
    EMPTY = "empty"
    BACKTRANSLATE = "backtranslate"


class Baseline(StrEnum):
    BASIC = "basic"
    EMPTY = "empty"
    COPY = "copy"
    BT = "bt"
    UDA = "uda"
    UDA_ENCDEC = "uda-encdec"
    PARALLEL = "parallel"
    BT_FT = "bt-ft"


class SentencePair(BaseModel):
    model_config = ConfigDict(frozen=True)

    source: tuple[int, ...]
    target: tuple[int, ...]

    @field_validator("source", "target")
    @classmethod
    def validate_side(cls, v):
        if not v:
            raise ValueError("sentence side must not be empty")
        if PAD in v:
            raise ValueError("sentence side must not contain PAD")
        return v

    def swapped(self) -> "SentencePair":
        return SentencePair(source=self.target, target=self.source)


class DomainSpec(BaseModel):
    """A synthetic translation domain.

    Non-ambiguous source words translate through ``lexicon``; every source word
    in ``ambiguous`` has exactly one target sense in this domain.
    """

    name: str
    lexicon: dict[str, str]
    ambiguous: dict[str, str] = Field(default_factory=dict)
    reorder_window: int = Field(default=1, ge=1)
    shared: list[str] = Field(default_factory=list)
    content: list[str] = Field(default_factory=list)
    ambiguous_rate: float = Field(default=0.2, ge=0.0, le=1.0)
    shared_rate: float = Field(default=0.3, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def validate_vocabularies(self):
        overlap = set(self.ambiguous) & set(self.lexicon)
        if overlap:
            raise ValueError(f"ambiguous tokens also in lexicon: {sorted(overlap)[:5]}")
        missing = [w for w in [*self.shared, *self.content] if w not in self.lexicon]
        if missing:
            raise ValueError(f"lexicon is not total, missing: {missing[:5]}")
        if self.ambiguous_rate + self.shared_rate > 1.0:
            raise ValueError("ambiguous_rate + shared_rate must not exceed 1")
        return self


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d_model: int = Field(default=64, ge=1)
    n_heads: int = Field(default=4, ge=1)
    n_enc_layers: int = Field(default=3, ge=1)
    n_dec_layers: int = Field(default=3, ge=1)
    d_ff: int = Field(default=128, ge=1)
    adapter_hidden: int = Field(default=64, ge=1)
    adapter_sites: AdapterSites = AdapterSites.ENCODER
    # Filled from the vocabulary when a model is built.
    vocab_size: int | None = Field(default=None, ge=5)
    max_len: int = Field(default=128, ge=1)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def validate_heads(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_tokens: int = Field(default=2000, gt=0)
    max_steps: int = Field(default=4000, ge=0)
    lr_peak: float = Field(default=5e-4, ge=0.0)
    warmup_steps: int = Field(default=400, gt=0)
    seed: int = Field(default=1, ge=0)
    grad_clip: float = Field(default=1.0, gt=0.0)
    label_smoothing: float = Field(default=0.1, ge=0.0, lt=1.0)
    log_interval: int = Field(default=100, gt=0)

    @model_validator(mode="after")
    def validate_warmup(self):
        if self.max_steps > 0 and self.warmup_steps > self.max_steps:
            raise ValueError("warmup_steps must not exceed max_steps")
        return self


class TrainingSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    base: TrainConfig = Field(default_factory=lambda: TrainConfig(max_steps=6000))
    adapters: TrainConfig = Field(default_factory=lambda: TrainConfig(max_steps=3000))
    reverse: TrainConfig = Field(default_factory=lambda: TrainConfig(max_steps=6000))
    finetune: TrainConfig = Field(
        default_factory=lambda: TrainConfig(max_steps=1000, warmup_steps=100)
    )


class KnnConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    k: int = Field(default=16, ge=1)
    temperature: float = Field(default=4.0, gt=0.0)
    lam: float = Field(default=0.5, ge=0.0, le=1.0, alias="lambda")
    nprobe: int = Field(default=8, ge=1)
    lambda_grid: list[float] = Field(
        default_factory=lambda: [round(0.1 * i, 1) for i in range(10)]
    )
    domain_temperature: dict[str, float] = Field(default_factory=dict)

    @field_validator("lambda_grid")
    @classmethod
    def validate_grid(cls, v):
        if not v:
            raise ValueError("lambda_grid must not be empty")
        if any(not 0.0 <= x <= 1.0 for x in v):
            raise ValueError("lambda_grid values must lie in [0, 1]")
        return v

    @field_validator("domain_temperature")
    @classmethod
    def validate_temperatures(cls, v):
        if any(t <= 0 for t in v.values()):
            raise ValueError("temperatures must be positive")
        return v

    def for_domain(self, domain: str) -> "KnnConfig":
        if domain in self.domain_temperature:
            return self.model_copy(
                update={"temperature": self.domain_temperature[domain]}
            )
        return self


class IndexConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    nlist: int = Field(default=64, ge=1)
    kmeans_iters: int = Field(default=20, ge=0)


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    general_pairs: int = Field(default=20000, ge=1)
    in_domain_train: int = Field(default=5000, ge=1)
    dev: int = Field(default=200, ge=1)
    test: int = Field(default=500, ge=1)
    min_len: int = Field(default=4, ge=1)
    max_len: int = Field(default=16, ge=1)
    n_shared: int = Field(default=40, ge=0)
    n_content: int = Field(default=120, ge=1)
    n_ambiguous: int = Field(default=12, ge=0)
    reorder_window: int = Field(default=2, ge=1)
    ambiguous_rate: float = Field(default=0.2, ge=0.0, le=1.0)
    shared_rate: float = Field(default=0.3, ge=0.0, le=1.0)
    in_domain_leak: float = Field(default=0.01, ge=0.0, lt=1.0)
    min_count: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def validate_lengths(self):
        if self.max_len < self.min_len:
            raise ValueError("max_len must be >= min_len")
        return self


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # Artifact root; falls back to KNNADAPT_WORKDIR.
    workdir: Path | None = None
    # Optional hand-written domain specs instead of generated ones.
    domain_specs: Path | None = None


class ExperimentSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(default=13, ge=0)
    domains: list[str] = Field(default_factory=lambda: ["medical"])
    baselines: list[Baseline] = Field(
        default_factory=lambda: [
            Baseline.BASIC,
            Baseline.EMPTY,
            Baseline.COPY,
            Baseline.BT,
            Baseline.UDA,
            Baseline.PARALLEL,
        ]
    )
    strategy: str = Field(default="greedy", pattern=r"^(greedy|beam:[1-4])$")

    @field_validator("domains")
    @classmethod
    def validate_domains(cls, v):
        if not v:
            raise ValueError("at least one in-domain is required")
        if "general" in v:
            raise ValueError("'general' is reserved for the out-of-domain corpus")
        if len(set(v)) != len(v):
            raise ValueError("domain names must be unique")
        return v


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainingSection = Field(default_factory=TrainingSection)
    knn: KnnConfig = Field(default_factory=KnnConfig)
    index: IndexConfig = Field(default_factory=IndexConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)


class SimilarityReport(BaseModel):
    mode: str
    mean_cosine: float = Field(ge=-1.0, le=1.0)
    mean_sq_euclidean: float = Field(ge=0.0)
    n_positions: int = Field(gt=0)


class SystemScore(BaseModel):
    """Test BLEU of one system on one domain, with the dev-tuned lambda."""

    system: str
    domain: str
    bleu: float = Field(ge=0.0, le=100.0)
    lam: float | None = Field(default=None, ge=0.0, le=1.0)

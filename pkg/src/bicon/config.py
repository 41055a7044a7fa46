"""Run configuration: one JSON file with corpus, labels, encoder, train,
preprocess, and (optional) eval sections.  Unknown keys are rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .corpus import PreprocessConfig
from .errors import DataError

OBJECTIVE_MODES = ("full", "sentence_anchored_only", "label_anchored_only", "no_mlm")


@dataclass
class EncoderSection:
    d: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 64
    ffn_mult: int = 4


@dataclass
class PreprocessSection:
    rho_blank: float = 0.7
    mlm_rate: float = 0.15
    min_count: int = 1


@dataclass
class TrainSection:
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    rng_seed: int = 7
    objective_mode: str = "full"
    checkpoint_every: int = 0
    eval_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tau_init: float = 0.07
    tau_min: float = 0.01
    label_loss_normalized: bool = False
    class_balanced: bool = False

    def __post_init__(self):
        if self.objective_mode not in OBJECTIVE_MODES:
            raise DataError(
                f"objective_mode '{self.objective_mode}' not one of {OBJECTIVE_MODES}"
            )
        if self.batch_size < 2:
            raise DataError("batch_size must be >= 2: a single-pair batch carries no contrast")
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")


@dataclass
class EvalSection:
    corpus: str | None = None
    n: int = 5
    k: int = 1
    t: int | None = None  # None -> one query per class (t = n)
    episodes: int = 2000
    seed: int = 7
    label_info: bool = False
    metric: str = "cosine"


@dataclass
class RunConfig:
    corpus: str
    labels: str
    encoder: EncoderSection = field(default_factory=EncoderSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(
            rho_blank=self.preprocess.rho_blank,
            mlm_rate=self.preprocess.mlm_rate,
            max_seq_len=self.encoder.max_seq_len,
            rng_seed=self.train.rng_seed,
        )


def _build_section(cls, payload, where):
    if not isinstance(payload, dict):
        raise DataError(f"config section '{where}' must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise DataError(f"unknown config keys in '{where}': {sorted(unknown)}")
    return cls(**payload)


def load_run_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(payload, dict):
        raise DataError(f"config {path} must be a JSON object")
    return run_config_from_dict(payload, where=str(path))


def run_config_from_dict(payload: dict, where: str = "config") -> RunConfig:
    known = {"corpus", "labels", "encoder", "preprocess", "train", "eval"}
    unknown = set(payload) - known
    if unknown:
        raise DataError(f"unknown top-level config keys in {where}: {sorted(unknown)}")
    for key in ("corpus", "labels"):
        if key not in payload or not isinstance(payload[key], str):
            raise DataError(f"{where}: required string key '{key}' is missing")
    return RunConfig(
        corpus=payload["corpus"],
        labels=payload["labels"],
        encoder=_build_section(EncoderSection, payload.get("encoder", {}), "encoder"),
        preprocess=_build_section(PreprocessSection, payload.get("preprocess", {}), "preprocess"),
        train=_build_section(TrainSection, payload.get("train", {}), "train"),
        eval=_build_section(EvalSection, payload.get("eval", {}), "eval"),
    )


def default_config_text() -> str:
    """Defaults for every section, shown in CLI --help."""
    cfg = RunConfig(corpus="<corpus.jsonl>", labels="<labels.json>")
    return json.dumps(dataclasses.asdict(cfg), indent=2)

"""Typed key/value experiment configs with line-anchored diagnostics.

The format is plain text: ``[section]`` headers, ``key = value`` lines,
full-line ``#`` comments. Unknown sections or keys are hard errors so a
typo can never silently fall back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Optional

from .data import DatasetSpec
from .encoders import EncoderConfig
from .errors import ConfigError
from .federation import VISUAL_MODES, RoundSchedule, RunConfig
from .prompts import VARIANT_MODES, LossConfig


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    variant: str = "adapt"
    prompt_len: int = 16
    tau_d: float = 0.1
    loss_mode: str = "cosine"
    lambda_domain: float = 1.0
    ce_temperature: float = 0.1
    optimizer: str = "adamw"
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    weight_decay: float = 0.01
    rounds: int = 100
    epochs_per_round: float = 1.0
    alpha: float = 0.99
    momentum_per_step: bool = False
    clients_per_domain: int = 1
    dirichlet_beta: float = 0.5
    train_all_text: bool = False
    visual_update: str = "average"
    batch_size: int = 8
    concurrent: bool = False
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_every: int = 1
    few_shot_k: Optional[int] = None
    output_dir: str = "out"
    save_checkpoints: bool = False

    def validate(self) -> None:
        self.dataset.validate()
        self.encoder.validate()
        if self.variant not in VARIANT_MODES:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.loss_mode not in ("cosine", "ce"):
            raise ConfigError(f"unknown loss mode {self.loss_mode!r}")
        if self.optimizer not in ("adamw", "sgd-momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.visual_update not in VISUAL_MODES:
            raise ConfigError(f"unknown visual_update {self.visual_update!r}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.dataset.d_v != self.encoder.d_v or self.dataset.patch_count != self.encoder.patch_count:
            raise ConfigError("dataset patch extents must match the encoder config")

    def optimizer_hyperparams(self) -> dict:
        if self.optimizer == "adamw":
            return {"lr": self.lr, "betas": (self.beta1, self.beta2), "weight_decay": self.weight_decay}
        return {"lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay}

    def run_config(self, seed: int, checkpoint_dir: Optional[str] = None) -> RunConfig:
        return RunConfig(
            variant=self.variant,
            prompt_len=self.prompt_len,
            tau_d=self.tau_d,
            loss=LossConfig(
                mode=self.loss_mode,
                lambda_domain=self.lambda_domain,
                ce_temperature=self.ce_temperature,
            ),
            optimizer=self.optimizer,
            optimizer_hp=self.optimizer_hyperparams(),
            schedule=RoundSchedule(
                total_rounds=self.rounds,
                epochs_per_round=self.epochs_per_round,
                alpha=self.alpha,
                momentum_per_step=self.momentum_per_step,
            ),
            batch_size=self.batch_size,
            clients_per_domain=self.clients_per_domain,
            dirichlet_beta=self.dirichlet_beta,
            train_all_text=self.train_all_text,
            visual_update=self.visual_update,
            seed=seed,
            eval_every=self.eval_every,
            few_shot_k=self.few_shot_k,
            concurrent=self.concurrent,
            checkpoint_dir=checkpoint_dir,
        )

    def seeded(self, seed: int) -> tuple[DatasetSpec, EncoderConfig]:
        """Per-trial dataset and encoder configs: base seeds offset by the trial seed."""
        return (
            replace(self.dataset, seed=self.dataset.seed + seed),
            replace(self.encoder, seed=self.encoder.seed + seed),
        )


# schema: section -> key -> (type tag, attribute path)
_SCHEMA: dict[str, dict[str, tuple[str, str]]] = {
    "dataset": {
        "n_domains": ("int", "dataset.n_domains"),
        "n_classes": ("int", "dataset.n_classes"),
        "samples_per_class_per_domain": ("int", "dataset.samples_per_class_per_domain"),
        "domain_strength": ("float", "dataset.domain_strength"),
        "noise_sigma": ("float", "dataset.noise_sigma"),
        "seed": ("int", "dataset.seed"),
        "patch_count": ("int", "dataset.patch_count"),
        "d_v": ("int", "dataset.d_v"),
    },
    "encoder": {
        "d_e": ("int", "encoder.d_e"),
        "d_v": ("int", "encoder.d_v"),
        "d": ("int", "encoder.d"),
        "layers": ("int", "encoder.layers"),
        "heads": ("int", "encoder.heads"),
        "patch_count": ("int", "encoder.patch_count"),
        "vocab_size": ("int", "encoder.vocab_size"),
        "seed": ("int", "encoder.seed"),
        "max_text_tokens": ("int", "encoder.max_text_tokens"),
        "max_image_tokens": ("int", "encoder.max_image_tokens"),
    },
    "model": {
        "variant": ("str", "variant"),
        "prompt_len": ("int", "prompt_len"),
        "tau_d": ("float", "tau_d"),
        "loss_mode": ("str", "loss_mode"),
        "lambda_domain": ("float", "lambda_domain"),
        "ce_temperature": ("float", "ce_temperature"),
    },
    "optimizer": {
        "kind": ("str", "optimizer"),
        "lr": ("float", "lr"),
        "beta1": ("float", "beta1"),
        "beta2": ("float", "beta2"),
        "momentum": ("float", "momentum"),
        "weight_decay": ("float", "weight_decay"),
    },
    "federation": {
        "rounds": ("int", "rounds"),
        "epochs_per_round": ("float", "epochs_per_round"),
        "alpha": ("float", "alpha"),
        "momentum_per_step": ("bool", "momentum_per_step"),
        "clients_per_domain": ("int", "clients_per_domain"),
        "dirichlet_beta": ("float", "dirichlet_beta"),
        "train_all_text": ("bool", "train_all_text"),
        "visual_update": ("str", "visual_update"),
        "batch_size": ("int", "batch_size"),
        "concurrent": ("bool", "concurrent"),
    },
    "run": {
        "seeds": ("int_list", "seeds"),
        "eval_every": ("int", "eval_every"),
        "few_shot_k": ("opt_int", "few_shot_k"),
        "output_dir": ("str", "output_dir"),
        "save_checkpoints": ("bool", "save_checkpoints"),
    },
}

_REQUIRED = (("model", "variant"), ("run", "seeds"), ("run", "output_dir"))


def _convert(kind: str, raw: str, where: str) -> Any:
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "str":
            return raw
        if kind == "int_list":
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if not parts:
                raise ValueError("empty list")
            return tuple(int(p) for p in parts)
        if kind == "opt_int":
            if raw == "" or raw.lower() == "none":
                return None
            return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind}: {exc}") from exc
    raise ConfigError(f"{where}: unknown type tag {kind}")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse, type-check, and validate; every error carries file:line."""
    values: dict[str, Any] = {}
    dataset_kw: dict[str, Any] = {}
    encoder_kw: dict[str, Any] = {}
    seen: set[tuple[str, str]] = set()
    section: Optional[str] = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        where = f"{source}:{lineno}"
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigError(f"{where}: key outside any [section]")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _SCHEMA[section]:
            raise ConfigError(f"{where}: unknown key {key!r} in section [{section}]")
        if (section, key) in seen:
            raise ConfigError(f"{where}: duplicate key {key!r} in section [{section}]")
        seen.add((section, key))
        kind, attr = _SCHEMA[section][key]
        value = _convert(kind, raw, where)
        if attr.startswith("dataset."):
            dataset_kw[attr.split(".", 1)[1]] = value
        elif attr.startswith("encoder."):
            encoder_kw[attr.split(".", 1)[1]] = value
        else:
            values[attr] = value

    for sec, key in _REQUIRED:
        if (sec, key) not in seen:
            raise ConfigError(f"{source}: missing required field [{sec}] {key}")

    cfg = ExperimentConfig(
        dataset=DatasetSpec(**dataset_kw),
        encoder=EncoderConfig(**encoder_kw),
        **values,
    )
    cfg.validate()
    return cfg


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=path)


def _format_value(kind: str, value: Any) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "int_list":
        return ",".join(str(v) for v in value)
    if kind == "opt_int":
        return "" if value is None else str(value)
    if kind == "float":
        return repr(float(value))
    return str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; parse(serialize(cfg)) == cfg."""
    lines: list[str] = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (kind, attr) in keys.items():
            if attr.startswith("dataset."):
                value = getattr(cfg.dataset, attr.split(".", 1)[1])
            elif attr.startswith("encoder."):
                value = getattr(cfg.encoder, attr.split(".", 1)[1])
            else:
                value = getattr(cfg, attr)
            lines.append(f"{key} = {_format_value(kind, value)}")
        lines.append("")
    return "\n".join(lines)

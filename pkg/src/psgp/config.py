"""Run configuration: INI-style key=value sections, with CLI flag overrides.

Desk-scale values are the built-in defaults (small embedding width, few mask
permutations, a few hundred steps) so the whole pipeline runs in minutes on
one core; paper-scale runs override them in a config file.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

from .errors import ConfigError
from .model import ModelConfig, default_model_config
from .pretrain import SslConfig
from .signalio import Modality
from .synth import SynthConfig

_ALL_MODALITIES = (Modality.EEG, Modality.ECG, Modality.RESP)


@dataclass(frozen=True)
class RunConfig:
    # [run]
    seed: int = 0
    modalities: tuple[Modality, ...] = _ALL_MODALITIES
    outcomes: tuple[str, ...] = ()  # empty = every outcome in the manifest
    threads: int = 1
    split_ratio: float = 0.8
    embed_batch: int = 256
    # [model]
    embed_dim: int = 32
    encoder_depth: int = 4
    decoder_depth: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    precision: str = "f32"
    # [ssl]
    mask_ratio: float = 0.5
    n_permutations: int = 4
    tcr_epsilon: float = 0.2
    tcr_weight: float = 1.0
    batch_size: int = 8
    learning_rate: float = 1e-3
    steps: int = 300
    masked_only: bool = False
    # [synth]
    n_subjects: int = 200
    segments_per_subject: int = 20
    prevalence: tuple[tuple[str, float], ...] = (("CVD", 0.4),)
    effects: tuple[tuple[str, str, float], ...] = ()
    base_waveform: str = "sinusoid_mix"
    noise_sigma: float = 1.0
    affected_fraction: float = 0.3


_SECTIONS: dict[str, tuple[str, ...]] = {
    "run": ("seed", "modalities", "outcomes", "threads", "split_ratio", "embed_batch"),
    "model": ("embed_dim", "encoder_depth", "decoder_depth", "n_heads", "ffn_mult", "precision"),
    "ssl": (
        "mask_ratio",
        "n_permutations",
        "tcr_epsilon",
        "tcr_weight",
        "batch_size",
        "learning_rate",
        "steps",
        "masked_only",
    ),
    "synth": (
        "n_subjects",
        "segments_per_subject",
        "prevalence",
        "effects",
        "base_waveform",
        "noise_sigma",
        "affected_fraction",
    ),
}

_INT_FIELDS = {
    "seed", "threads", "embed_batch", "embed_dim", "encoder_depth", "decoder_depth",
    "n_heads", "ffn_mult", "n_permutations", "batch_size", "steps", "n_subjects",
    "segments_per_subject",
}
_FLOAT_FIELDS = {
    "split_ratio", "mask_ratio", "tcr_epsilon", "tcr_weight", "learning_rate",
    "noise_sigma", "affected_fraction",
}
_BOOL_FIELDS = {"masked_only"}


def parse_modalities(text: str) -> tuple[Modality, ...]:
    text = text.strip()
    if not text or text.lower() == "all":
        return _ALL_MODALITIES
    mods = tuple(Modality.parse(tok) for tok in text.split(",") if tok.strip())
    if len(set(mods)) != len(mods):
        raise ConfigError(f"duplicate modalities in {text!r}")
    return mods


def parse_prevalence(text: str) -> tuple[tuple[str, float], ...]:
    """\"CVD=0.4,HTN=0.2\" -> ((\"CVD\", 0.4), (\"HTN\", 0.2))."""
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if "=" not in tok:
            raise ConfigError(f"prevalence entry {tok!r} must look like NAME=P")
        name, _, value = tok.partition("=")
        try:
            out.append((name.strip(), float(value)))
        except ValueError:
            raise ConfigError(f"bad prevalence value in {tok!r}") from None
    if not out:
        raise ConfigError("empty prevalence list")
    return tuple(out)


def parse_effects(text: str) -> tuple[tuple[str, str, float], ...]:
    """\"CVD:ECG=3.0,CVD:EEG=0\" -> ((\"CVD\", \"ECG\", 3.0), ...)."""
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if ":" not in tok or "=" not in tok:
            raise ConfigError(f"effect entry {tok!r} must look like OUTCOME:MODALITY=SIZE")
        head, _, value = tok.partition("=")
        outcome, _, modality = head.partition(":")
        try:
            out.append((outcome.strip(), Modality.parse(modality).name, float(value)))
        except ValueError:
            raise ConfigError(f"bad effect size in {tok!r}") from None
    return tuple(out)


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    try:
        if key in _INT_FIELDS:
            return int(raw)
        if key in _FLOAT_FIELDS:
            return float(raw)
        if key in _BOOL_FIELDS:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r} has invalid value {raw!r}") from None
    if key == "modalities":
        return parse_modalities(raw)
    if key == "outcomes":
        return tuple(tok.strip() for tok in raw.split(",") if tok.strip())
    if key == "prevalence":
        return parse_prevalence(raw)
    if key == "effects":
        return parse_effects(raw)
    return raw  # plain string fields


def load_run_config(path: Path | str | None) -> RunConfig:
    """Defaults when path is None; otherwise strict INI parse (unknown
    sections or keys are usage errors)."""
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    updates: dict[str, object] = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"{path}: unknown key {key!r} in section [{section}]")
            updates[key] = _parse_value(key, raw)
    return replace(cfg, **updates)


def _format_value(cfg: RunConfig, key: str) -> str:
    value = getattr(cfg, key)
    if key == "modalities":
        return ",".join(m.name for m in value)
    if key == "outcomes":
        return ",".join(value)
    if key == "prevalence":
        return ",".join(f"{name}={p:g}" for name, p in value)
    if key == "effects":
        return ",".join(f"{o}:{m}={s:g}" for o, m, s in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, "g")
    return str(value)


def resolved_text(cfg: RunConfig) -> str:
    """Deterministic snapshot of every resolved value (no timestamps)."""
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {_format_value(cfg, key)}")
        lines.append("")
    return "\n".join(lines)


def model_config_for(cfg: RunConfig, modality: Modality) -> ModelConfig:
    return default_model_config(
        modality,
        embed_dim=cfg.embed_dim,
        encoder_depth=cfg.encoder_depth,
        decoder_depth=cfg.decoder_depth,
        n_heads=cfg.n_heads,
        ffn_mult=cfg.ffn_mult,
        precision=cfg.precision,
    )


def ssl_config_for(cfg: RunConfig) -> SslConfig:
    return SslConfig(
        mask_ratio=cfg.mask_ratio,
        n_permutations=cfg.n_permutations,
        tcr_epsilon=cfg.tcr_epsilon,
        tcr_weight=cfg.tcr_weight,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        steps=cfg.steps,
        seed=cfg.seed,
        masked_only=cfg.masked_only,
    )


def synth_config_for(cfg: RunConfig) -> SynthConfig:
    return SynthConfig(
        n_subjects=cfg.n_subjects,
        segments_per_subject=cfg.segments_per_subject,
        prevalence=dict(cfg.prevalence),
        effects={(o, m): s for o, m, s in cfg.effects},
        base_waveform=cfg.base_waveform,
        noise_sigma=cfg.noise_sigma,
        affected_fraction=cfg.affected_fraction,
        seed=cfg.seed,
    )

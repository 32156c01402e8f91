"""Synthetic cohorts with planted, recoverable disease signatures.

Each subject gets one recording per modality: a subject-specific smooth
base waveform plus white noise. For every (outcome, modality) with a
positive effect size, positive-labelled subjects have a fixed smooth
template added to a random subset of their segments; the template has
RMS = effect_size * noise_sigma, so effect_size is the per-segment SNR.

Covariates are drawn with label-correlated shifts that scale with the
outcome's largest planted effect, so an all-zero-effects cohort is null in
every column: labels carry no information about signals or covariates.
All randomness derives from one seed via named SeedSequence children, with
one child per subject, so generation order cannot change the data.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .cohort import CohortManifest, SubjectRow, save_manifest
from .errors import ConfigError
from .signalio import Modality, Recording, round_half_up, samples_per_window, write_signal_file

_WAVEFORMS = ("sinusoid_mix", "band_noise")


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 200
    segments_per_subject: int = 20
    prevalence: Mapping[str, float] = field(default_factory=lambda: {"CVD": 0.4})
    effects: Mapping[tuple[str, str], float] = field(default_factory=dict)
    base_waveform: str = "sinusoid_mix"
    noise_sigma: float = 1.0
    affected_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_subjects < 2:
            raise ConfigError("need at least 2 subjects")
        if self.segments_per_subject < 1:
            raise ConfigError("need at least 1 segment per subject")
        if not self.prevalence:
            raise ConfigError("at least one outcome with a prevalence is required")
        for name, prev in self.prevalence.items():
            if not name or any(ch in name for ch in ",\n"):
                raise ConfigError(f"bad outcome name {name!r}")
            if not (0.0 < prev < 1.0):
                raise ConfigError(f"prevalence for {name!r} must lie in (0, 1)")
        for (outcome, modality), size in self.effects.items():
            if outcome not in self.prevalence:
                raise ConfigError(f"effect references unknown outcome {outcome!r}")
            try:
                Modality.parse(modality)
            except Exception:
                raise ConfigError(f"effect references unknown modality {modality!r}") from None
            if size < 0:
                raise ConfigError("effect sizes must be non-negative")
        if self.base_waveform not in _WAVEFORMS:
            raise ConfigError(f"base_waveform must be one of {_WAVEFORMS}")
        if self.noise_sigma <= 0:
            raise ConfigError("noise_sigma must be positive")
        if not (0.0 < self.affected_fraction <= 1.0):
            raise ConfigError("affected_fraction must lie in (0, 1]")

    def effect_size(self, outcome: str, modality: Modality) -> float:
        return float(self.effects.get((outcome, modality.name), 0.0))


@dataclass(frozen=True)
class GroundTruth:
    labels: dict[str, dict[str, int]]  # subject -> outcome -> 0/1
    affected: dict[tuple[str, str, str], tuple[int, ...]]  # (subject, outcome, modality) -> segment indices
    effect_sizes: dict[tuple[str, str], float]  # (outcome, modality name) -> size


def _template(rng: np.random.Generator, n: int, rate: float) -> np.ndarray:
    """Smooth unit-RMS waveform: three low-frequency sinusoids."""
    t = np.arange(n) / rate
    wave = np.zeros(n)
    for _ in range(3):
        freq = rng.uniform(0.2, 2.5)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave += rng.uniform(0.5, 1.0) * np.sin(2.0 * np.pi * freq * t + phase)
    rms = float(np.sqrt((wave**2).mean()))
    return wave / rms


def _base_signal(rng: np.random.Generator, n: int, rate: float, kind: str, sigma: float) -> np.ndarray:
    if kind == "sinusoid_mix":
        t = np.arange(n) / rate
        sig = np.zeros(n)
        for _ in range(4):
            freq = rng.uniform(0.1, min(4.0, rate / 4.0))
            phase = rng.uniform(0.0, 2.0 * np.pi)
            sig += rng.uniform(0.3, 1.0) * np.sin(2.0 * np.pi * freq * t + phase)
    else:  # band_noise: smoothed white noise, rescaled to unit RMS
        raw = rng.standard_normal(n + 8)
        kernel = np.ones(9) / 9.0
        sig = np.convolve(raw, kernel, mode="valid")
        sig = sig / float(np.sqrt((sig**2).mean()))
    return sig + sigma * rng.standard_normal(n)


def generate_cohort(config: SynthConfig, out_dir: Path | str) -> GroundTruth:
    """Write signals/, manifest.csv, effects.csv and affected.csv under out_dir."""
    out_dir = Path(out_dir)
    signals_dir = out_dir / "signals"
    signals_dir.mkdir(parents=True, exist_ok=True)

    outcomes = sorted(config.prevalence)
    modalities = (Modality.EEG, Modality.ECG, Modality.RESP)
    master = np.random.SeedSequence(config.seed)
    ss_labels, ss_templates, ss_subjects = master.spawn(3)
    label_rng = np.random.default_rng(ss_labels)
    template_rng = np.random.default_rng(ss_templates)
    subject_seeds = ss_subjects.spawn(config.n_subjects)

    # fixed per-(outcome, modality) templates, drawn whether or not used,
    # so adding an effect never reshuffles unrelated randomness
    templates: dict[tuple[str, str], np.ndarray] = {}
    for outcome in outcomes:
        for modality in modalities:
            spw = samples_per_window(modality.nominal_rate_hz)
            templates[(outcome, modality.name)] = _template(
                template_rng, spw, modality.nominal_rate_hz
            )

    width = max(4, len(str(config.n_subjects)))
    subject_ids = [f"S{i:0{width}d}" for i in range(1, config.n_subjects + 1)]

    labels: dict[str, dict[str, int]] = {
        sid: {o: int(label_rng.random() < config.prevalence[o]) for o in outcomes}
        for sid in subject_ids
    }

    # covariate shift per outcome scales with its strongest planted effect
    shift_scale = {
        o: max((config.effect_size(o, m) for m in modalities), default=0.0) for o in outcomes
    }

    rows: dict[str, SubjectRow] = {}
    affected: dict[tuple[str, str, str], tuple[int, ...]] = {}
    n_segments = config.segments_per_subject
    for sid, child in zip(subject_ids, subject_seeds):
        rng = np.random.default_rng(child)
        lab = labels[sid]
        bump = sum(shift_scale[o] * lab[o] for o in outcomes)
        age = float(np.clip(rng.normal(60.0, 10.0) + 2.0 * bump, 20.0, 95.0))
        sex = int(rng.integers(0, 2))
        bmi = float(np.clip(rng.normal(28.0, 4.0) + 0.5 * bump, 16.0, 55.0))
        sbp = float(np.clip(rng.normal(125.0, 15.0) + 2.0 * bump, 80.0, 220.0))
        frs = float(
            0.02 * (age - 50.0) + 0.3 * sex + 0.01 * (bmi - 25.0)
            + 0.1 * rng.standard_normal() + 0.1 * bump
        )
        rows[sid] = SubjectRow(sid, age, sex, bmi, sbp, frs, dict(lab))

        for modality in modalities:
            rate = modality.nominal_rate_hz
            spw = samples_per_window(rate)
            total = n_segments * spw
            sig = _base_signal(rng, total, rate, config.base_waveform, config.noise_sigma)
            for outcome in outcomes:
                size = config.effect_size(outcome, modality)
                # draw the affected subset unconditionally to keep subject
                # streams aligned between planted and null configurations
                n_aff = max(1, round_half_up(config.affected_fraction * n_segments))
                subset = np.sort(rng.choice(n_segments, size=n_aff, replace=False))
                if size > 0.0 and lab[outcome] == 1:
                    tpl = size * config.noise_sigma * templates[(outcome, modality.name)]
                    for seg in subset:
                        sig[seg * spw:(seg + 1) * spw] += tpl
                    affected[(sid, outcome, modality.name)] = tuple(int(s) for s in subset)
            write_signal_file(
                Recording(sid, modality, rate, sig.astype(np.float32)),
                signals_dir / f"{sid}_{modality.name}.psgs",
            )

    manifest = CohortManifest(rows, tuple(outcomes))
    save_manifest(manifest, out_dir / "manifest.csv")

    effect_sizes = {
        (o, m.name): config.effect_size(o, m) for o in outcomes for m in modalities
    }
    with (out_dir / "effects.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["outcome", "modality", "effect_size", "n_positive"])
        for o in outcomes:
            n_pos = sum(labels[sid][o] for sid in subject_ids)
            for m in modalities:
                writer.writerow([o, m.name, format(effect_sizes[(o, m.name)], ".6g"), n_pos])
    with (out_dir / "affected.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "outcome", "modality", "segment_indices"])
        for key in sorted(affected):
            writer.writerow([key[0], key[1], key[2], " ".join(str(i) for i in affected[key])])

    return GroundTruth(labels=labels, affected=affected, effect_sizes=effect_sizes)

"""Cohort manifest CSV and the deterministic train/test split.

Manifest header: ``subject_id,age,sex,bmi,sbp,frs,<outcome>...`` with one row
per subject. Covariates may be empty (missing); outcome cells are ``""``,
``"0"`` or ``"1"``. Sex is coded 1=male, 0=female.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ManifestError, UsageError
from .signalio import round_half_up

COVARIATE_COLUMNS = ("age", "sex", "bmi", "sbp", "frs")
_FIXED_HEADER = ("subject_id",) + COVARIATE_COLUMNS


@dataclass
class SubjectRow:
    subject_id: str
    age: float | None
    sex: int | None
    bmi: float | None
    sbp: float | None
    frs: float | None
    outcomes: dict[str, int | None]

    def covariate(self, name: str) -> float | None:
        if name not in COVARIATE_COLUMNS:
            raise UsageError(f"unknown covariate {name!r}")
        value = getattr(self, name)
        return None if value is None else float(value)


@dataclass
class CohortManifest:
    rows: dict[str, SubjectRow]
    outcome_names: tuple[str, ...]

    @property
    def subject_ids(self) -> list[str]:
        return list(self.rows)

    def eligible_ids(self) -> list[str]:
        """Subjects usable for model fitting: age, sex and bmi all present."""
        return [
            sid
            for sid, row in self.rows.items()
            if row.age is not None and row.sex is not None and row.bmi is not None
        ]

    def outcome_labels(self, outcome: str) -> dict[str, int | None]:
        if outcome not in self.outcome_names:
            raise ManifestError(f"manifest has no outcome column {outcome!r}")
        return {sid: row.outcomes[outcome] for sid, row in self.rows.items()}


def _parse_float(token: str, *, row: str, column: str) -> float | None:
    token = token.strip()
    if token == "":
        return None
    try:
        value = float(token)
    except ValueError:
        raise ManifestError(f"row {row!r}: column {column!r} is not numeric: {token!r}") from None
    if not np.isfinite(value):
        raise ManifestError(f"row {row!r}: column {column!r} is not finite")
    return value


def load_manifest(path: Path | str) -> CohortManifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        header = [h.strip() for h in header]
        if tuple(header[: len(_FIXED_HEADER)]) != _FIXED_HEADER:
            raise ManifestError(
                f"{path}: header must start with {','.join(_FIXED_HEADER)}"
            )
        outcome_names = tuple(header[len(_FIXED_HEADER):])
        if len(set(outcome_names)) != len(outcome_names):
            raise ManifestError(f"{path}: duplicate outcome columns")
        rows: dict[str, SubjectRow] = {}
        for line_no, rec in enumerate(reader, start=2):
            if not rec or all(tok.strip() == "" for tok in rec):
                continue
            if len(rec) != len(header):
                raise ManifestError(f"{path} line {line_no}: expected {len(header)} fields")
            sid = rec[0].strip()
            if not sid:
                raise ManifestError(f"{path} line {line_no}: empty subject_id")
            if sid in rows:
                raise ManifestError(f"{path} line {line_no}: duplicate subject_id {sid!r}")
            age = _parse_float(rec[1], row=sid, column="age")
            if age is not None and age <= 0:
                raise ManifestError(f"row {sid!r}: age must be positive")
            sex_tok = rec[2].strip()
            if sex_tok == "":
                sex = None
            elif sex_tok in ("0", "1"):
                sex = int(sex_tok)
            else:
                raise ManifestError(f"row {sid!r}: column 'sex' must be 0, 1 or empty, got {sex_tok!r}")
            bmi = _parse_float(rec[3], row=sid, column="bmi")
            if bmi is not None and bmi <= 0:
                raise ManifestError(f"row {sid!r}: bmi must be positive")
            sbp = _parse_float(rec[4], row=sid, column="sbp")
            frs = _parse_float(rec[5], row=sid, column="frs")
            outcomes: dict[str, int | None] = {}
            for name, tok in zip(outcome_names, rec[len(_FIXED_HEADER):]):
                tok = tok.strip()
                if tok == "":
                    outcomes[name] = None
                elif tok in ("0", "1"):
                    outcomes[name] = int(tok)
                else:
                    raise ManifestError(
                        f"row {sid!r}: outcome column {name!r} must be 0, 1 or empty, got {tok!r}"
                    )
            rows[sid] = SubjectRow(sid, age, sex, bmi, sbp, frs, outcomes)
    if not rows:
        raise ManifestError(f"{path}: manifest has no subject rows")
    return CohortManifest(rows, outcome_names)


def _fmt(value: float | int | None) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return format(float(value), ".10g")


def save_manifest(manifest: CohortManifest, path: Path | str) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(_FIXED_HEADER) + list(manifest.outcome_names))
        for sid, row in manifest.rows.items():
            writer.writerow(
                [
                    sid,
                    _fmt(row.age),
                    "" if row.sex is None else str(row.sex),
                    _fmt(row.bmi),
                    _fmt(row.sbp),
                    _fmt(row.frs),
                ]
                + ["" if row.outcomes[o] is None else str(row.outcomes[o]) for o in manifest.outcome_names]
            )


@dataclass(frozen=True)
class CohortSplit:
    train_ids: frozenset[str]
    test_ids: frozenset[str]
    seed: int
    ratio: float


def split_cohort(manifest: CohortManifest, ratio: float = 0.8, seed: int = 0) -> CohortSplit:
    """Disjoint train/test partition of the eligible subjects.

    Pure function of the sorted eligible ids, the ratio and the seed; the
    manifest's row order is irrelevant. |train| = round(ratio * N), half-up.
    """
    if not (0.0 < ratio < 1.0):
        raise UsageError(f"split ratio must lie in (0, 1), got {ratio}")
    ids = sorted(manifest.eligible_ids())
    if not ids:
        raise DataError("no eligible subjects to split (age/sex/bmi all missing?)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    n_train = round_half_up(ratio * len(ids))
    train = frozenset(ids[i] for i in perm[:n_train])
    test = frozenset(ids[i] for i in perm[n_train:])
    return CohortSplit(train_ids=train, test_ids=test, seed=seed, ratio=ratio)


def save_split(split: CohortSplit, path: Path | str) -> None:
    lines = ["subject_id,split"]
    rows = [(sid, "train") for sid in split.train_ids] + [(sid, "test") for sid in split.test_ids]
    lines += [f"{sid},{part}" for sid, part in sorted(rows)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

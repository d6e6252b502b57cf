"""Core records, the radiographic PFOA label rule, manifests, and their CSV I/O.

A manifest is an ordered collection of knee-visit records keyed by
``(subject_id, side, visit)``. Missing clinical values are represented as
``None`` in records and as empty cells in the CSV, never as zeros.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Optional

SIDES = ("L", "R")
SEXES = ("F", "M")
VISITS = ("baseline", "m15", "m30", "m60", "m84")

MANIFEST_COLUMNS = (
    "subject_id",
    "side",
    "visit",
    "age",
    "sex",
    "bmi",
    "womac_total",
    "womac_pain",
    "kl",
    "ost",
    "jsn",
    "scl",
    "cyst",
    "pfoa",
    "image_path",
)


class ManifestError(ValueError):
    """Raised for malformed manifest files or inconsistent records."""


@dataclass(frozen=True)
class PatellofemoralGrades:
    """OARSI-style patellofemoral feature grades, each on the 0-3 scale."""

    osteophyte: int
    jsn: int
    sclerosis: int
    cysts: int

    def __post_init__(self):
        for name in ("osteophyte", "jsn", "sclerosis", "cysts"):
            g = getattr(self, name)
            if not isinstance(g, int) or isinstance(g, bool) or not 0 <= g <= 3:
                raise ValueError(f"{name} grade must be an integer in 0..3, got {g!r}")


def pfoa_label(grades: PatellofemoralGrades) -> bool:
    """Radiographic PFOA label from patellofemoral feature grades.

    True iff osteophyte >= 2, or jsn >= 1 together with any of
    osteophyte, sclerosis or cysts >= 1.
    """
    g = grades
    if g.osteophyte >= 2:
        return True
    return g.jsn >= 1 and (g.osteophyte >= 1 or g.sclerosis >= 1 or g.cysts >= 1)


@dataclass(frozen=True)
class KneeRecord:
    """One knee at one visit, with clinical features and radiographic grades.

    ``kl_grade`` is stored as given, including out-of-range values, so that
    non-standard KL scores survive loading and can be counted by
    :func:`exclusion_filter` rather than crashing the parse.
    """

    subject_id: str
    side: str
    visit: str
    age: float
    sex: str
    bmi: Optional[float] = None
    womac_total: Optional[float] = None
    womac_pain: Optional[float] = None
    kl_grade: Optional[int] = None
    pf_grades: Optional[PatellofemoralGrades] = None
    pfoa: Optional[bool] = None
    image_path: Optional[str] = None

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {self.side!r}")
        if self.sex not in SEXES:
            raise ValueError(f"sex must be one of {SEXES}, got {self.sex!r}")
        if self.visit not in VISITS:
            raise ValueError(f"visit must be one of {VISITS}, got {self.visit!r}")
        if self.age < 0:
            raise ValueError(f"age must be >= 0, got {self.age}")
        if self.bmi is not None and self.bmi <= 0:
            raise ValueError(f"bmi must be > 0 when present, got {self.bmi}")

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.subject_id, self.side, self.visit)

    def has_standard_kl(self) -> bool:
        return self.kl_grade is not None and 0 <= self.kl_grade <= 4


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered knee-visit records plus provenance and the spacing policy (mm)."""

    records: tuple[KneeRecord, ...]
    provenance: str = ""
    spacing_policy_mm: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for r in self.records:
            if r.key in seen:
                raise ManifestError(f"duplicate record key {r.key}")
            seen.add(r.key)

    def __len__(self) -> int:
        return len(self.records)

    def by_key(self) -> dict[tuple[str, str, str], KneeRecord]:
        return {r.key: r for r in self.records}

    def subjects(self) -> list[str]:
        out, seen = [], set()
        for r in self.records:
            if r.subject_id not in seen:
                seen.add(r.subject_id)
                out.append(r.subject_id)
        return out


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_float(cell: str, row: int, col: str) -> Optional[float]:
    if cell == "":
        return None
    try:
        return float(cell)
    except ValueError:
        raise ManifestError(f"row {row}: column {col!r} is not a number: {cell!r}")


def _parse_int(cell: str, row: int, col: str) -> Optional[int]:
    if cell == "":
        return None
    try:
        return int(cell)
    except ValueError:
        raise ManifestError(f"row {row}: column {col!r} is not an integer: {cell!r}")


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Write a manifest CSV (UTF-8, fixed header, empty cells for missing)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# provenance: {manifest.provenance}\n")
        fh.write(f"# spacing_policy_mm: {manifest.spacing_policy_mm!r}\n")
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            g = r.pf_grades
            writer.writerow(
                [
                    r.subject_id,
                    r.side,
                    r.visit,
                    _fmt(r.age),
                    r.sex,
                    _fmt(r.bmi),
                    _fmt(r.womac_total),
                    _fmt(r.womac_pain),
                    _fmt(r.kl_grade),
                    _fmt(g.osteophyte if g else None),
                    _fmt(g.jsn if g else None),
                    _fmt(g.sclerosis if g else None),
                    _fmt(g.cysts if g else None),
                    _fmt(r.pfoa),
                    _fmt(r.image_path),
                ]
            )


def load_manifest(path) -> DatasetManifest:
    """Parse a manifest CSV written by :func:`save_manifest`.

    Raises :class:`ManifestError` naming the offending row and column for
    malformed cells; missing cells become ``None``, never zeros.
    """
    provenance = ""
    spacing = 0.2
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    body_start = 0
    for line in lines:
        if not line.startswith("#"):
            break
        body_start += 1
        text = line[1:].strip()
        if text.startswith("provenance:"):
            provenance = text[len("provenance:"):].strip()
        elif text.startswith("spacing_policy_mm:"):
            spacing = float(text[len("spacing_policy_mm:"):].strip())
    rows = list(csv.reader(lines[body_start:]))
    if not rows:
        raise ManifestError("manifest has no header row")
    header = tuple(rows[0])
    if header != MANIFEST_COLUMNS:
        raise ManifestError(f"unexpected header {header}, want {MANIFEST_COLUMNS}")
    records = []
    for i, cells in enumerate(rows[1:], start=2):
        if not cells:
            continue
        if len(cells) != len(MANIFEST_COLUMNS):
            raise ManifestError(f"row {i}: expected {len(MANIFEST_COLUMNS)} cells, got {len(cells)}")
        c = dict(zip(MANIFEST_COLUMNS, cells))
        grade_cells = [c["ost"], c["jsn"], c["scl"], c["cyst"]]
        if all(cell == "" for cell in grade_cells):
            grades = None
        elif all(cell != "" for cell in grade_cells):
            vals = [_parse_int(cell, i, name) for cell, name in zip(grade_cells, ("ost", "jsn", "scl", "cyst"))]
            try:
                grades = PatellofemoralGrades(*vals)
            except ValueError as e:
                raise ManifestError(f"row {i}: {e}")
        else:
            raise ManifestError(f"row {i}: PF grades must be all present or all empty")
        pfoa_cell = c["pfoa"]
        if pfoa_cell == "":
            pfoa = None
        elif pfoa_cell in ("0", "1"):
            pfoa = pfoa_cell == "1"
        else:
            raise ManifestError(f"row {i}: column 'pfoa' must be '0', '1' or empty: {pfoa_cell!r}")
        age = _parse_float(c["age"], i, "age")
        if age is None:
            raise ManifestError(f"row {i}: column 'age' is required")
        try:
            records.append(
                KneeRecord(
                    subject_id=c["subject_id"],
                    side=c["side"],
                    visit=c["visit"],
                    age=age,
                    sex=c["sex"],
                    bmi=_parse_float(c["bmi"], i, "bmi"),
                    womac_total=_parse_float(c["womac_total"], i, "womac_total"),
                    womac_pain=_parse_float(c["womac_pain"], i, "womac_pain"),
                    kl_grade=_parse_int(c["kl"], i, "kl"),
                    pf_grades=grades,
                    pfoa=pfoa,
                    image_path=c["image_path"] or None,
                )
            )
        except ValueError as e:
            raise ManifestError(f"row {i}: {e}")
    return DatasetManifest(records=tuple(records), provenance=provenance, spacing_policy_mm=spacing)


EXCLUSION_REASONS = ("missing_image", "missing_pfoa", "nonstandard_kl", "roi_gate_failed")


def exclusion_filter(
    manifest: DatasetManifest,
    roi_results: Optional[Mapping[tuple[str, str, str], object]] = None,
) -> tuple[DatasetManifest, dict[str, int]]:
    """Drop unusable records and count exclusions by reason.

    A record is excluded for the first matching reason, checked in order:
    missing image, missing PFOA status, KL grade missing or outside 0..4,
    failed ROI gate (key absent from ``roi_results`` or mapped to None).
    When ``roi_results`` is None the gate check is skipped entirely.
    """
    counts = {reason: 0 for reason in EXCLUSION_REASONS}
    kept = []
    for r in manifest.records:
        if r.image_path is None:
            counts["missing_image"] += 1
        elif r.pfoa is None:
            counts["missing_pfoa"] += 1
        elif not r.has_standard_kl():
            counts["nonstandard_kl"] += 1
        elif roi_results is not None and roi_results.get(r.key) is None:
            counts["roi_gate_failed"] += 1
        else:
            kept.append(r)
    kept_manifest = replace(manifest, records=tuple(kept))
    return kept_manifest, counts


def filter_records(manifest: DatasetManifest, keys: Iterable[tuple[str, str, str]]) -> DatasetManifest:
    """Restrict a manifest to the given keys, preserving record order."""
    wanted = set(keys)
    return replace(manifest, records=tuple(r for r in manifest.records if r.key in wanted))

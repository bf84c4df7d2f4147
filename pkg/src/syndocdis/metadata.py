"""De-identified case metadata: model, parsing, scanning, and project loading.

A metadata record summarizes one real-world physician chat discussion:
who took part (numeric ids only), their roles, the de-identified case
narrative, and how many replies the thread drew.  Records are the sole
input to dialogue generation, so every free-text field is screened
against a deny-list of directly identifying patterns before a record is
accepted.
"""
from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

CASE_OWNER_DEFAULT_ID = 0

METADATA_FIELDS = [
    "case_id",
    "chat_name",
    "case_owner_id",
    "participant_ids",
    "participant_specialties",
    "patient_case",
    "num_responses",
    "value_assessment",
    "variability_note",
]

# Data-entry form exports label columns the way clinicians see them; both
# spellings are accepted and normalized to the canonical field names.
FORM_FIELD_ALIASES = {
    "chat name": "chat_name",
    "participant doctors": "participant_ids",
    "specialty of participants": "participant_specialties",
    "patient case": "patient_case",
    "number of responses": "num_responses",
    "are answers valuable?": "value_assessment",
    "variability in responses": "variability_note",
    "case owner": "case_owner_id",
    "case id": "case_id",
}


class MetadataError(Exception):
    """Base class for metadata validation failures."""


class MissingField(MetadataError):
    def __init__(self, name: str):
        super().__init__(f"missing required field: {name!r}")
        self.name = name


class DuplicateParticipant(MetadataError):
    def __init__(self, participant_id: int):
        super().__init__(f"participant id {participant_id} appears more than once")
        self.participant_id = participant_id


class LengthMismatch(MetadataError):
    def __init__(self, n_ids: int, n_specialties: int):
        super().__init__(
            f"{n_ids} participant ids but {n_specialties} specialties; lists must be parallel"
        )
        self.n_ids = n_ids
        self.n_specialties = n_specialties


class DeidentificationViolation(MetadataError):
    def __init__(self, pattern_id: str, field_name: str, span: tuple[int, int]):
        super().__init__(
            f"field {field_name!r} matches deny-list pattern {pattern_id!r} at bytes {span}"
        )
        self.pattern_id = pattern_id
        self.field_name = field_name
        self.span = span


class DuplicateCaseId(MetadataError):
    def __init__(self, case_id: str):
        super().__init__(f"duplicate case_id: {case_id!r}")
        self.case_id = case_id


class ProjectLoadError(MetadataError):
    """Aggregates per-file parse failures encountered while loading a project."""

    def __init__(self, failures: Sequence[tuple[str, MetadataError]]):
        details = "; ".join(f"{name}: {err}" for name, err in failures)
        super().__init__(f"{len(failures)} metadata file(s) failed to parse: {details}")
        self.failures = list(failures)


@dataclass(frozen=True)
class DenyPattern:
    pattern_id: str
    regex: str
    compiled: re.Pattern = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "compiled", re.compile(self.regex))


_MONTHS = r"(?:Jan|Feb|Mar|Apr|May|Jun|Jul|Aug|Sep|Sept|Oct|Nov|Dec)"

# Conservative defaults: emails, phone-number shapes, calendar dates finer
# than month-year, and honorific + capitalized full-name bigrams.  Month-year
# ("Aug 2023") and bare ages are allowed.  Override per project via
# <project>/deny_list.json.
DEFAULT_DENY_LIST: tuple[DenyPattern, ...] = (
    DenyPattern("email", r"\b[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}\b"),
    DenyPattern(
        "phone",
        r"(?<![\w-])(?:"
        r"\+\d{1,3}[ .-]\d{3}[ .-]\d{3,4}(?:[ .-]\d{3,4})?"
        r"|\(\d{3}\)[ .-]?\d{3}[ .-]\d{4}"
        r"|\d{3}[ .-]\d{3,4}[ .-]\d{4}"
        r")(?![\w-])",
    ),
    DenyPattern("date_iso", r"\b\d{4}-\d{2}-\d{2}\b"),
    DenyPattern("date_slash", r"\b\d{1,2}/\d{1,2}/\d{2,4}\b"),
    DenyPattern("date_month_day", rf"\b{_MONTHS}[a-z]*\.?\s+\d{{1,2}}(?:st|nd|rd|th)?\b(?!\d)"),
    DenyPattern("date_day_month", rf"\b\d{{1,2}}(?:st|nd|rd|th)?\s+{_MONTHS}[a-z]*\b"),
    DenyPattern(
        "honorific_name",
        r"\b(?:Dr|Mr|Mrs|Ms|Prof)\.?\s+[A-Z][a-z]+\s+[A-Z][a-z]+\b",
    ),
)


@dataclass(frozen=True)
class DenyListFinding:
    pattern_id: str
    start: int  # byte offset into the UTF-8 encoding of the text
    end: int


def scan_deidentification(
    text: str,
    deny_list: Sequence[DenyPattern] = DEFAULT_DENY_LIST,
) -> list[DenyListFinding]:
    """Pure scan of free text for deny-list hits; spans are UTF-8 byte offsets."""
    findings = []
    for pattern in deny_list:
        for match in pattern.compiled.finditer(text):
            start = len(text[: match.start()].encode("utf-8"))
            end = start + len(match.group(0).encode("utf-8"))
            findings.append(DenyListFinding(pattern.pattern_id, start, end))
    findings.sort(key=lambda f: (f.start, f.end, f.pattern_id))
    return findings


def load_deny_list(project_dir: Path) -> tuple[DenyPattern, ...]:
    """Project deny-list override from <project>/deny_list.json, else defaults."""
    override = Path(project_dir) / "deny_list.json"
    if not override.exists():
        return DEFAULT_DENY_LIST
    entries = json.loads(override.read_text(encoding="utf-8"))
    return tuple(DenyPattern(e["pattern_id"], e["regex"]) for e in entries)


@dataclass(frozen=True)
class CaseMetadata:
    """One de-identified discussion record.

    ``participant_ids`` are the responders; the case owner (the physician
    who posted the case, rendered as P0 in prompts and dialogues) is kept
    separate.  ``num_responses`` is the target reply count for generation
    and is stored independently of the participant count: source threads
    may have more listed participants than replies.
    """

    case_id: str
    chat_name: str
    case_owner_id: int
    participant_ids: tuple[int, ...]
    participant_specialties: tuple[str, ...]
    patient_case: str
    num_responses: int
    value_assessment: str = ""
    variability_note: str = ""

    def __post_init__(self):
        if not self.case_id:
            raise MissingField("case_id")
        if not self.patient_case or not self.patient_case.strip():
            raise MetadataError("patient_case must be non-empty")
        if self.num_responses < 0:
            raise MetadataError(f"num_responses must be >= 0, got {self.num_responses}")
        seen = set()
        for pid in self.participant_ids:
            if pid in seen:
                raise DuplicateParticipant(pid)
            seen.add(pid)
        if self.case_owner_id in seen:
            raise DuplicateParticipant(self.case_owner_id)
        if any(pid < 1 for pid in self.participant_ids):
            # P0 is reserved for the case owner; responder tags need ids >= 1
            raise MetadataError("participant ids must be positive integers")
        if len(self.participant_ids) != len(self.participant_specialties):
            raise LengthMismatch(len(self.participant_ids), len(self.participant_specialties))
        self._scan_fields()

    def _scan_fields(self):
        text_fields = {
            "chat_name": self.chat_name,
            "patient_case": self.patient_case,
            "value_assessment": self.value_assessment,
            "variability_note": self.variability_note,
        }
        for i, spec in enumerate(self.participant_specialties):
            text_fields[f"participant_specialties[{i}]"] = spec
        for name, value in text_fields.items():
            findings = scan_deidentification(value)
            if findings:
                f = findings[0]
                raise DeidentificationViolation(f.pattern_id, name, (f.start, f.end))

    def to_document(self) -> dict:
        doc = asdict(self)
        doc["participant_ids"] = list(self.participant_ids)
        doc["participant_specialties"] = list(self.participant_specialties)
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_document(), indent=2, ensure_ascii=False)


def _parse_id_list(value) -> tuple[int, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    raw = str(value).strip()
    if not raw:
        return ()
    parts = re.split(r"[,;]", raw)
    return tuple(int(p.strip()) for p in parts if p.strip())


def _parse_text_list(value) -> tuple[str, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(str(v).strip() for v in value)
    raw = str(value).strip()
    if not raw:
        return ()
    return tuple(p.strip() for p in raw.split(";") if p.strip())


def _normalize_keys(record: Mapping) -> dict:
    normalized = {}
    for key, value in record.items():
        canonical = key if key in METADATA_FIELDS else FORM_FIELD_ALIASES.get(str(key).strip().lower())
        if canonical:
            normalized[canonical] = value
    return normalized


def slugify(text: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-")
    return slug or "case"


def parse_metadata(record: Mapping, fallback_case_id: str | None = None) -> CaseMetadata:
    """Validate a key-value document into a :class:`CaseMetadata`.

    Accepts canonical field names or data-entry-form labels.  Participant
    ids may arrive as a list or as comma/semicolon-separated numerals;
    specialties as a list or semicolon-separated text.  ``case_id`` may be
    omitted when ``fallback_case_id`` is supplied (synthesized by ingest
    from the chat name and row index).
    """
    doc = _normalize_keys(record)
    required = ["chat_name", "participant_ids", "participant_specialties",
                "patient_case", "num_responses"]
    for name in required:
        if name not in doc or doc[name] is None:
            raise MissingField(name)
    case_id = str(doc.get("case_id") or fallback_case_id or "").strip()
    if not case_id:
        raise MissingField("case_id")
    try:
        participant_ids = _parse_id_list(doc["participant_ids"])
    except ValueError as exc:
        raise MetadataError(f"participant_ids not parseable as integers: {exc}") from exc
    try:
        num_responses = int(doc["num_responses"])
    except (TypeError, ValueError) as exc:
        raise MetadataError(f"num_responses not an integer: {doc['num_responses']!r}") from exc
    owner = doc.get("case_owner_id", CASE_OWNER_DEFAULT_ID)
    try:
        owner = int(owner)
    except (TypeError, ValueError) as exc:
        raise MetadataError(f"case_owner_id not an integer: {owner!r}") from exc
    return CaseMetadata(
        case_id=case_id,
        chat_name=str(doc["chat_name"]).strip(),
        case_owner_id=owner,
        participant_ids=participant_ids,
        participant_specialties=_parse_text_list(doc["participant_specialties"]),
        patient_case=str(doc["patient_case"]).strip(),
        num_responses=num_responses,
        value_assessment=str(doc.get("value_assessment", "")).strip(),
        variability_note=str(doc.get("variability_note", "")).strip(),
    )


# ---------------------------------------------------------------------------
# Project layout: <project>/metadata/*.json, one object per case
# ---------------------------------------------------------------------------


def metadata_dir(project_dir: Path) -> Path:
    return Path(project_dir) / "metadata"


def load_project(project_dir: Path) -> list[CaseMetadata]:
    """All metadata records in a project, sorted by case_id.

    Raises :class:`ProjectLoadError` aggregating per-file failures, or
    :class:`DuplicateCaseId` when two files share an id.
    """
    directory = metadata_dir(project_dir)
    records: list[CaseMetadata] = []
    failures: list[tuple[str, MetadataError]] = []
    if directory.is_dir():
        for path in sorted(directory.glob("*.json")):
            try:
                doc = json.loads(path.read_text(encoding="utf-8"))
                records.append(parse_metadata(doc, fallback_case_id=path.stem))
            except MetadataError as exc:
                failures.append((path.name, exc))
            except (json.JSONDecodeError, OSError) as exc:
                failures.append((path.name, MetadataError(str(exc))))
    if failures:
        raise ProjectLoadError(failures)
    seen: set[str] = set()
    for rec in records:
        if rec.case_id in seen:
            raise DuplicateCaseId(rec.case_id)
        seen.add(rec.case_id)
    return sorted(records, key=lambda r: r.case_id)


def write_metadata(meta: CaseMetadata, project_dir: Path) -> Path:
    directory = metadata_dir(project_dir)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{meta.case_id}.json"
    path.write_text(meta.to_json() + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Form-export ingest: one JSON document per case, or one CSV for the batch
# ---------------------------------------------------------------------------


class IngestRowError(MetadataError):
    def __init__(self, row: int, cause: MetadataError):
        super().__init__(f"row {row}: {cause}")
        self.row = row
        self.cause = cause


def ingest_csv(path: Path) -> list[CaseMetadata]:
    """Tabular form export: header row of field names (canonical or form
    labels), participant ids and specialties as semicolon-separated cells."""
    records: list[CaseMetadata] = []
    failures: list[tuple[str, MetadataError]] = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        for index, row in enumerate(reader):
            fallback = f"{slugify(str(row.get('chat_name') or row.get('Chat Name') or 'case'))}-{index + 1:03d}"
            try:
                records.append(parse_metadata(row, fallback_case_id=fallback))
            except MetadataError as exc:
                failures.append((f"row {index + 1}", IngestRowError(index + 1, exc)))
    if failures:
        raise ProjectLoadError(failures)
    return records


def ingest_source(path: Path) -> list[CaseMetadata]:
    """Ingest a CSV file, a single JSON document, a JSON array, or a
    directory of JSON documents."""
    path = Path(path)
    if path.is_dir():
        records = []
        failures: list[tuple[str, MetadataError]] = []
        for child in sorted(path.glob("*.json")):
            try:
                doc = json.loads(child.read_text(encoding="utf-8"))
                records.append(parse_metadata(doc, fallback_case_id=child.stem))
            except MetadataError as exc:
                failures.append((child.name, exc))
            except json.JSONDecodeError as exc:
                failures.append((child.name, MetadataError(str(exc))))
        if failures:
            raise ProjectLoadError(failures)
        return records
    if path.suffix.lower() == ".csv":
        return ingest_csv(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(doc, list):
        records = []
        failures = []
        for index, item in enumerate(doc):
            fallback = f"{slugify(str(item.get('chat_name', 'case')))}-{index + 1:03d}"
            try:
                records.append(parse_metadata(item, fallback_case_id=fallback))
            except MetadataError as exc:
                failures.append((f"entry {index}", exc))
        if failures:
            raise ProjectLoadError(failures)
        return records
    return [parse_metadata(doc, fallback_case_id=path.stem)]

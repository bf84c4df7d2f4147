"""Parse generated discussions into structured turns and validate them.

Canonical grammar (strict mode accepts exactly this):

* a turn line is ``Speaker: text`` where Speaker is ``Case owner`` or
  ``Doctor <n>`` (n >= 1); lines without a speaker-tag prefix continue the
  current turn; a blank line closes it;
* a ``References:`` section holds lines ``[n] citation text``;
* footer lines ``<P> physicians engaged in the discussion: P<a>, ...``
  and ``Total replies: R=<n>`` declare the physician and reply counts;
* in strict mode every ``[n]`` citation marker must resolve to a
  reference entry, and any speaker-tag-like line that is not canonical is
  an error.

Lenient mode extracts the same structure while tolerating a fixed list of
tag variants seen in live model output: markdown bold around the tag
(``**Doctor 35:**``), ``Dr. 35`` / ``Dr 35`` / ``P35`` for ``Doctor 35``,
``P0`` or any-case ``case owner`` for the owner, bare ``R=<n>`` reply
footers between sections, and stray prose outside any turn (skipped).
Every normalization is recorded as a format note, which rule V5 reports.

Validation never raises: the rule catalog V1-V6 produces a report with at
most one finding per rule so downstream triage can count failures by rule.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .metadata import CaseMetadata

RULE_IDS = ("V1", "V2", "V3", "V4", "V5", "V6")


class DialogueParseError(Exception):
    """Base class for parse rejections."""


class NoTurnsFound(DialogueParseError):
    pass


class MalformedSpeakerTag(DialogueParseError):
    def __init__(self, line_no: int, line: str, reason: str = "not canonical"):
        super().__init__(f"line {line_no}: malformed speaker tag ({reason}): {line!r}")
        self.line_no = line_no
        self.line = line


class DuplicateReferenceNumber(DialogueParseError):
    def __init__(self, number: int):
        super().__init__(f"reference number [{number}] appears more than once")
        self.number = number


class UnresolvedCitationMarker(DialogueParseError):
    def __init__(self, marker: int):
        super().__init__(f"citation marker [{marker}] has no matching reference entry")
        self.marker = marker


@dataclass(frozen=True)
class Speaker:
    """Either the case owner (doctor_id None) or a responding doctor."""

    doctor_id: int | None = None

    def __post_init__(self):
        if self.doctor_id is not None and self.doctor_id < 1:
            raise ValueError("doctor ids must be >= 1; P0 is the case owner")

    @property
    def is_case_owner(self) -> bool:
        return self.doctor_id is None

    def label(self) -> str:
        return "Case owner" if self.is_case_owner else f"Doctor {self.doctor_id}"


CASE_OWNER = Speaker()

_CITATION_RE = re.compile(r"\[(\d+)\]")


@dataclass(frozen=True)
class Turn:
    index: int
    speaker: Speaker
    text: str
    citation_markers: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("turn text must be non-empty")


@dataclass(frozen=True)
class Dialogue:
    turns: tuple[Turn, ...]
    references: tuple[tuple[int, str], ...] = ()
    declared_physicians: tuple[int, tuple[int, ...]] | None = None
    declared_reply_count: int | None = None
    source: str = ""
    format_notes: tuple[tuple[int, str], ...] = ()

    def responder_ids(self) -> tuple[int, ...]:
        """Distinct doctor ids in first-appearance order."""
        seen: dict[int, None] = {}
        for turn in self.turns:
            if not turn.speaker.is_case_owner:
                seen.setdefault(turn.speaker.doctor_id, None)
        return tuple(seen)

    def to_dict(self) -> dict:
        return {
            "turns": [
                {
                    "index": t.index,
                    "speaker": t.speaker.label(),
                    "doctor_id": t.speaker.doctor_id,
                    "text": t.text,
                    "citation_markers": list(t.citation_markers),
                }
                for t in self.turns
            ],
            "references": [{"number": n, "text": text} for n, text in self.references],
            "declared_physicians": (
                {"count": self.declared_physicians[0], "ids": list(self.declared_physicians[1])}
                if self.declared_physicians
                else None
            ),
            "declared_reply_count": self.declared_reply_count,
            "format_notes": [{"line": n, "note": note} for n, note in self.format_notes],
        }


# -- strict patterns (the canonical grammar) --------------------------------

_STRICT_TURN_RE = re.compile(r"^(Case owner|Doctor [1-9][0-9]*): (.+)$")
_STRICT_REF_HEADER_RE = re.compile(r"^References:$")
_STRICT_REF_ENTRY_RE = re.compile(r"^\[(\d+)\] (.+)$")
_FOOTER_PHYS_RE = re.compile(r"^(\d+) physicians engaged in the discussion(?:: (.*))?$")
_FOOTER_REPLY_RE = re.compile(r"^Total replies: R=(\d+)$")

# -- lenient tag variants (fixed, documented list) ---------------------------

_LENIENT_TAG_RE = re.compile(
    r"^\s*(?:[*_]{1,2})?(?P<tag>[^:\n]{1,40}?)(?:[*_]{1,2})?:(?:[*_]{1,2})?\s*(?P<text>.*)$"
)
_LENIENT_OWNER_RE = re.compile(r"^case\s+owner$", re.IGNORECASE)
_LENIENT_DOCTOR_RE = re.compile(r"^(?:doctor|dr\.?|p)\s*(\d+)$", re.IGNORECASE)
_LENIENT_REF_HEADER_RE = re.compile(r"^\s*(?:[*_]{1,2})?references:?(?:[*_]{1,2})?\s*$", re.IGNORECASE)
_LENIENT_REF_ENTRY_RE = re.compile(r"^\s*\[(\d+)\][.:]?\s+(.+)$")
_LENIENT_FOOTER_PHYS_RE = re.compile(
    r"^\s*(?:[*_]{1,2})?(\d+) physicians engaged in the discussion(?:[*_]{1,2})?(?::\s*(.*))?$",
    re.IGNORECASE,
)
_LENIENT_FOOTER_REPLY_RE = re.compile(
    r"^\s*(?:[*_]{1,2})?(?:total replies:?\s*)?R\s*=\s*(\d+)(?:[*_]{1,2})?\s*$",
    re.IGNORECASE,
)
_PHYS_ID_RE = re.compile(r"P(\d+)", re.IGNORECASE)


def _classify_lenient_tag(line: str) -> tuple[Speaker | None, str] | None:
    """Returns (speaker, text) when the line carries a recognizable speaker
    tag under the lenient variant list, else None."""
    m = _LENIENT_TAG_RE.match(line)
    if not m:
        return None
    tag = m.group("tag").strip()
    text = m.group("text").strip()
    if _LENIENT_OWNER_RE.match(tag):
        return CASE_OWNER, text
    dm = _LENIENT_DOCTOR_RE.match(tag)
    if dm:
        number = int(dm.group(1))
        # P0 (and "Doctor 0") are the case-owner convention
        return (CASE_OWNER if number == 0 else Speaker(number)), text
    return None


def _markers(text: str) -> tuple[int, ...]:
    return tuple(int(m) for m in _CITATION_RE.findall(text))


class _Builder:
    def __init__(self, raw: str, strict: bool):
        self.raw = raw
        self.strict = strict
        self.turns: list[tuple[Speaker, list[str], int]] = []
        self.references: list[tuple[int, str]] = []
        self.ref_numbers: set[int] = set()
        self.declared_physicians: tuple[int, tuple[int, ...]] | None = None
        self.declared_reply_count: int | None = None
        self.notes: list[tuple[int, str]] = []
        self.section = "turns"  # turns | references
        self.open_element: str | None = None  # "turn" | "ref" | None

    def note(self, line_no: int, message: str):
        self.notes.append((line_no, message))

    def close(self):
        self.open_element = None

    def start_turn(self, speaker: Speaker, text: str, line_no: int):
        self.turns.append((speaker, [text] if text else [], line_no))
        self.section = "turns"
        self.open_element = "turn"

    def continue_current(self, line_no: int, line: str):
        if self.open_element == "turn" and self.turns:
            self.turns[-1][1].append(line.strip())
        elif self.open_element == "ref" and self.references:
            number, text = self.references[-1]
            self.references[-1] = (number, f"{text} {line.strip()}")
        else:
            if self.strict:
                raise MalformedSpeakerTag(line_no, line, "text outside any turn")
            self.note(line_no, "stray text skipped")

    def add_reference(self, number: int, text: str):
        if number in self.ref_numbers:
            raise DuplicateReferenceNumber(number)
        self.ref_numbers.add(number)
        self.references.append((number, text.strip()))
        self.open_element = "ref"

    def build(self, mode: str) -> Dialogue:
        turns = []
        index = 0
        for speaker, pieces, line_no in self.turns:
            text = "\n".join(p for p in pieces if p).strip()
            if not text:
                if self.strict:
                    raise MalformedSpeakerTag(line_no, speaker.label(), "turn has no text")
                self.note(line_no, f"dropped empty turn for {speaker.label()}")
                continue
            turns.append(
                Turn(index=index, speaker=speaker, text=text, citation_markers=_markers(text))
            )
            index += 1
        if not turns:
            raise NoTurnsFound("no speaker turns found in input")
        if self.strict:
            available = {n for n, _ in self.references}
            for turn in turns:
                for marker in turn.citation_markers:
                    if marker not in available:
                        raise UnresolvedCitationMarker(marker)
        return Dialogue(
            turns=tuple(turns),
            references=tuple(self.references),
            declared_physicians=self.declared_physicians,
            declared_reply_count=self.declared_reply_count,
            source=self.raw,
            format_notes=tuple(self.notes),
        )


def _parse_declared_ids(listing: str | None) -> tuple[int, ...]:
    if not listing:
        return ()
    ids = [int(m) for m in _PHYS_ID_RE.findall(listing)]
    if not ids:
        ids = [int(m) for m in re.findall(r"\d+", listing)]
    return tuple(ids)


def parse_dialogue(raw: str, mode: str = "strict") -> Dialogue:
    """Parse raw generated text into a :class:`Dialogue`.

    ``mode`` is ``"strict"`` (canonical grammar only) or ``"lenient"``
    (fixed variant list, see module docstring).  Any dialogue strict mode
    accepts, lenient mode parses to the identical structure.
    """
    if mode not in ("strict", "lenient"):
        raise ValueError(f"mode must be 'strict' or 'lenient', got {mode!r}")
    strict = mode == "strict"
    if not raw or not raw.strip():
        raise NoTurnsFound("input is empty")

    b = _Builder(raw, strict)
    for line_no, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            b.close()
            continue

        # Footer lines are recognized in both modes wherever they appear.
        fm = _FOOTER_PHYS_RE.match(line)
        if fm:
            b.declared_physicians = (int(fm.group(1)), _parse_declared_ids(fm.group(2)))
            b.close()
            continue
        rm = _FOOTER_REPLY_RE.match(line)
        if rm:
            b.declared_reply_count = int(rm.group(1))
            b.close()
            continue

        if strict:
            if _STRICT_REF_HEADER_RE.match(line):
                b.section = "references"
                b.close()
                continue
            if b.section == "references":
                em = _STRICT_REF_ENTRY_RE.match(line)
                if em:
                    b.add_reference(int(em.group(1)), em.group(2))
                    continue
                b.continue_current(line_no, line)
                continue
            tm = _STRICT_TURN_RE.match(line)
            if tm:
                tag = tm.group(1)
                speaker = CASE_OWNER if tag == "Case owner" else Speaker(int(tag.split()[1]))
                b.start_turn(speaker, tm.group(2), line_no)
                continue
            if _classify_lenient_tag(line) is not None:
                raise MalformedSpeakerTag(line_no, line)
            b.continue_current(line_no, line)
            continue

        # lenient walk
        if _LENIENT_REF_HEADER_RE.match(line):
            b.section = "references"
            if not _STRICT_REF_HEADER_RE.match(line):
                b.note(line_no, "non-canonical references header")
            b.close()
            continue
        if b.section == "references":
            em = _LENIENT_REF_ENTRY_RE.match(line)
            if em:
                b.add_reference(int(em.group(1)), em.group(2))
                if not _STRICT_REF_ENTRY_RE.match(line):
                    b.note(line_no, "non-canonical reference entry")
                continue
        lfm = _LENIENT_FOOTER_PHYS_RE.match(line)
        if lfm:
            b.declared_physicians = (int(lfm.group(1)), _parse_declared_ids(lfm.group(2)))
            b.note(line_no, "non-canonical physician footer")
            b.close()
            continue
        tagged = _classify_lenient_tag(line)
        if tagged is not None:
            speaker, text = tagged
            b.section = "turns"
            b.start_turn(speaker, text)
            if not _STRICT_TURN_RE.match(line):
                b.note(line_no, f"normalized speaker tag: {line.strip()[:40]!r}")
            continue
        if b.open_element is None:
            lrm = _LENIENT_FOOTER_REPLY_RE.match(line)
            if lrm:
                b.declared_reply_count = int(lrm.group(1))
                b.note(line_no, "non-canonical reply footer")
                continue
        b.continue_current(line_no, line)

    return b.build(mode)


# ---------------------------------------------------------------------------
# Validation rules V1-V6
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationConfig:
    # Reply counting excludes case-owner follow-ups by default, matching
    # the worked reply-count example the generation prompt gives.
    count_case_owner_replies: bool = False
    strict_engagement: bool = False
    require_references: bool = True
    strict_format: bool = False


@dataclass(frozen=True)
class Finding:
    rule_id: str
    message: str
    location: str


@dataclass(frozen=True)
class ValidationMetrics:
    unique_responders: int
    total_replies: int
    case_owner_followups: int
    reference_count: int

    def to_dict(self) -> dict:
        return {
            "unique_responders": self.unique_responders,
            "total_replies": self.total_replies,
            "case_owner_followups": self.case_owner_followups,
            "reference_count": self.reference_count,
        }


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple[Finding, ...]
    warnings: tuple[Finding, ...]
    metrics: ValidationMetrics

    @property
    def ok(self) -> bool:
        return not self.errors

    def rules_fired(self) -> set[str]:
        return {f.rule_id for f in self.errors} | {f.rule_id for f in self.warnings}

    def to_dict(self) -> dict:
        def rows(findings):
            return [
                {"rule_id": f.rule_id, "message": f.message, "location": f.location}
                for f in findings
            ]

        return {
            "errors": rows(self.errors),
            "warnings": rows(self.warnings),
            "metrics": self.metrics.to_dict(),
        }


def validate(
    d: Dialogue,
    meta: CaseMetadata,
    cfg: ValidationConfig = ValidationConfig(),
) -> ValidationReport:
    """Evaluate the structural rule catalog against a parsed dialogue.

    V1 the case owner opens; V2 responder identity matches the metadata
    and the declared physician footer; V3 reply count matches the target
    and the declared footer; V4 the owner follows up when replies >= 2;
    V5 format normalizations (error only under ``strict_format``); V6 at
    least one reference when required.  At most one finding per rule; a
    declared physician who never replied is attributed to the missing
    replies (V3) rather than double-reported under V2 when the reply count
    is already short.
    """
    errors: list[Finding] = []
    warnings: list[Finding] = []

    responders = d.responder_ids()
    doctor_turns = [t for t in d.turns if not t.speaker.is_case_owner]
    followups = sum(1 for t in d.turns[1:] if t.speaker.is_case_owner)
    counted = len(doctor_turns) + (followups if cfg.count_case_owner_replies else 0)
    metrics = ValidationMetrics(
        unique_responders=len(responders),
        total_replies=counted,
        case_owner_followups=followups,
        reference_count=len(d.references),
    )

    # V1 opening turn
    if not d.turns[0].speaker.is_case_owner:
        errors.append(
            Finding("V1", "the discussion must open with a Case owner turn; "
                          f"turn 0 is {d.turns[0].speaker.label()}", "turn 0")
        )

    # V3 reply count (computed first; V2 consults it for attribution)
    v3_problems = []
    if counted != meta.num_responses:
        v3_problems.append(f"counted {counted} replies, metadata expects {meta.num_responses}")
    if d.declared_reply_count is not None and d.declared_reply_count != counted:
        v3_problems.append(
            f"footer declares R={d.declared_reply_count}, counted {counted}"
        )
    if v3_problems:
        errors.append(Finding("V3", "; ".join(v3_problems), "footer"))

    # V2 responder identity
    participants = set(meta.participant_ids)
    v2_problems = []
    unknown = [i for i in responders if i not in participants]
    if unknown:
        v2_problems.append(
            f"responders not in participant list: {', '.join(f'Doctor {i}' for i in unknown)}"
        )
    if d.declared_physicians is not None:
        declared_count, declared_ids = d.declared_physicians
        if declared_count != len(declared_ids) and declared_ids:
            v2_problems.append(
                f"footer declares {declared_count} physicians but lists {len(declared_ids)} ids"
            )
        bad_declared = [i for i in declared_ids if i not in participants]
        if bad_declared:
            v2_problems.append(
                f"declared ids not in participant list: {sorted(bad_declared)}"
            )
        undeclared = [i for i in responders if i not in declared_ids]
        if undeclared:
            v2_problems.append(f"responders missing from footer declaration: {sorted(undeclared)}")
        silent = [i for i in declared_ids if i not in responders]
        if silent and not v3_problems:
            v2_problems.append(f"declared physicians never replied: {sorted(silent)}")
        if not declared_ids and declared_count != len(responders) and not v3_problems:
            v2_problems.append(
                f"footer declares {declared_count} physicians, found {len(responders)}"
            )
    if v2_problems:
        errors.append(Finding("V2", "; ".join(v2_problems), "dialogue"))

    # V4 case-owner engagement
    if counted >= 2 and followups == 0:
        finding = Finding(
            "V4", "no Case owner follow-up after the opening despite multiple replies", "dialogue"
        )
        (errors if cfg.strict_engagement else warnings).append(finding)

    # V5 format
    if d.format_notes:
        sample = "; ".join(note for _, note in d.format_notes[:3])
        finding = Finding(
            "V5", f"{len(d.format_notes)} format normalization(s): {sample}", "dialogue"
        )
        (errors if cfg.strict_format else warnings).append(finding)

    # V6 references
    if cfg.require_references and not d.references:
        warnings.append(Finding("V6", "no references cited", "references"))

    return ValidationReport(errors=tuple(errors), warnings=tuple(warnings), metrics=metrics)


# ---------------------------------------------------------------------------
# Project file layout
# ---------------------------------------------------------------------------


def dialogues_dir(project_dir: Path) -> Path:
    return Path(project_dir) / "dialogues"


def dialogue_paths(project_dir: Path, case_id: str) -> dict[str, Path]:
    base = dialogues_dir(project_dir)
    return {
        "raw": base / f"{case_id}.txt",
        "parsed": base / f"{case_id}.parsed.json",
        "report": base / f"{case_id}.report.json",
        "manifest": base / f"{case_id}.meta.json",
    }


def write_parse_outputs(
    project_dir: Path, case_id: str, dialogue: Dialogue, report: ValidationReport
) -> None:
    paths = dialogue_paths(project_dir, case_id)
    paths["parsed"].parent.mkdir(parents=True, exist_ok=True)
    paths["parsed"].write_text(
        json.dumps(dialogue.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    paths["report"].write_text(
        json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )

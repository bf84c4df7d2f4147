"""Deterministic assembly of the generation prompts from case metadata.

The prompt pair is structured as context (system role paragraph),
step-by-step instructions, an output contract, and a reward-criteria
rubric; the metadata itself is serialized into a labeled INPUT block that
gets appended to the user turn.  Templates are external text files with
``{{placeholder}}`` slots so prompt iteration needs no code change; the
``template_version`` (a 12-hex-char content hash) pins golden outputs.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .criteria import DEFAULT_CATALOG, CriteriaCatalog
from .metadata import CaseMetadata

PLACEHOLDER_RE = re.compile(r"\{\{([a-z_]+)\}\}")


class TemplateError(Exception):
    """A template file is broken: unknown or missing required placeholder."""


@dataclass(frozen=True)
class TemplateSet:
    user: str
    system: str

    @property
    def version(self) -> str:
        digest = hashlib.sha256(
            self.user.encode("utf-8") + b"\x00" + self.system.encode("utf-8")
        )
        return digest.hexdigest()[:12]


@dataclass(frozen=True)
class PromptBundle:
    system_prompt: str
    user_prompt: str
    input_block: str
    template_version: str

    def user_message(self) -> str:
        """The full user turn: persona prompt plus the INPUT block."""
        return f"{self.user_prompt}\n\n{self.input_block}"


def default_templates() -> TemplateSet:
    root = resources.files("syndocdis") / "templates"
    return TemplateSet(
        user=(root / "user.tmpl").read_text(encoding="utf-8"),
        system=(root / "system.tmpl").read_text(encoding="utf-8"),
    )


def load_templates(project_dir: Path | None = None) -> TemplateSet:
    """Project templates from <project>/templates/{user,system}.tmpl when
    present, otherwise the packaged defaults."""
    if project_dir is not None:
        tdir = Path(project_dir) / "templates"
        user_path = tdir / "user.tmpl"
        system_path = tdir / "system.tmpl"
        if user_path.exists() and system_path.exists():
            return TemplateSet(
                user=user_path.read_text(encoding="utf-8"),
                system=system_path.read_text(encoding="utf-8"),
            )
    return default_templates()


def install_default_templates(project_dir: Path) -> Path:
    tdir = Path(project_dir) / "templates"
    tdir.mkdir(parents=True, exist_ok=True)
    defaults = default_templates()
    for name, text in (("user.tmpl", defaults.user), ("system.tmpl", defaults.system)):
        path = tdir / name
        if not path.exists():
            path.write_text(text, encoding="utf-8")
    return tdir


def render_physician_list(ids: tuple[int, ...] | list[int]) -> str:
    """P-prefixed id list: "P7" / "P7 and P9" / "P35, P10, and P14"."""
    tags = [f"P{i}" for i in ids]
    if not tags:
        return ""
    if len(tags) == 1:
        return tags[0]
    if len(tags) == 2:
        return f"{tags[0]} and {tags[1]}"
    return f"{', '.join(tags[:-1])}, and {tags[-1]}"


def physician_declaration(ids: tuple[int, ...] | list[int]) -> str:
    count = len(ids)
    if count == 0:
        return "0 physicians engaged in the discussion"
    return f"{count} physicians engaged in the discussion: {render_physician_list(ids)}"


def expected_declarations(meta: CaseMetadata) -> tuple[str, int]:
    """The declaration line implied by the full participant list, plus the
    target reply count.  Dialogues may legitimately declare fewer physicians
    when not all listed participants end up replying."""
    return physician_declaration(meta.participant_ids), meta.num_responses


def render_reward_criteria(catalog: CriteriaCatalog = DEFAULT_CATALOG) -> str:
    lines: list[str] = []
    last_category = None
    for index, category in enumerate(catalog.categories(), start=1):
        if category != last_category:
            lines.append(f"{index}. {category} Assessment")
            last_category = category
        for criterion in catalog.in_category(category):
            lines.append(f"{criterion.criterion_id} {criterion.name}: {criterion.description}")
    return "\n".join(lines)


def render_input_block(meta: CaseMetadata) -> str:
    ids_line = ", ".join(str(i) for i in meta.participant_ids)
    specialties_line = "; ".join(meta.participant_specialties)
    return "\n".join(
        [
            "INPUT",
            f"Case ID: {meta.case_id}",
            f"Chat Name: {meta.chat_name}",
            f"Case owner: P{meta.case_owner_id}",
            f"Physicians participating: {ids_line}",
            f"Specialty of Participants: {specialties_line}",
            f"Patient Case: {meta.patient_case}",
            f"Number of responses: {meta.num_responses}",
            f"Are answers valuable?: {meta.value_assessment}",
            f"Variability in responses: {meta.variability_note}",
        ]
    )


def _render(template: str, variables: dict[str, str]) -> str:
    def substitute(match: re.Match) -> str:
        name = match.group(1)
        if name not in variables:
            raise TemplateError(f"template references unknown placeholder {{{{{name}}}}}")
        return variables[name]

    return PLACEHOLDER_RE.sub(substitute, template)


def build_prompts(
    meta: CaseMetadata,
    catalog: CriteriaCatalog = DEFAULT_CATALOG,
    templates: TemplateSet | None = None,
    project_dir: Path | None = None,
) -> PromptBundle:
    """Assemble the prompt bundle for one case.

    Pure in (meta, catalog, templates): identical inputs give byte-identical
    output.  The system template must carry the ``{{reward_criteria}}``
    placeholder so the rubric reaches the model.
    """
    if templates is None:
        templates = load_templates(project_dir)
    if "{{reward_criteria}}" not in templates.system:
        raise TemplateError("system template is missing the {{reward_criteria}} placeholder")
    input_block = render_input_block(meta)
    variables = {
        "case_id": meta.case_id,
        "chat_name": meta.chat_name,
        "case_owner": f"P{meta.case_owner_id}",
        "physicians_participating": ", ".join(str(i) for i in meta.participant_ids),
        "participant_specialties": "; ".join(meta.participant_specialties),
        "patient_case": meta.patient_case,
        "num_responses": str(meta.num_responses),
        "value_assessment": meta.value_assessment,
        "variability_note": meta.variability_note,
        "reward_criteria": render_reward_criteria(catalog),
        "input_block": input_block,
    }
    return PromptBundle(
        system_prompt=_render(templates.system, variables),
        user_prompt=_render(templates.user, variables),
        input_block=input_block,
        template_version=templates.version,
    )

"""The eight-point evaluation rubric shared by prompts, stats, and the service."""
from __future__ import annotations

from dataclasses import dataclass

CONTENT_CATEGORY = "Medical Content Quality"
COMMUNICATION_CATEGORY = "Communication Effectiveness"


@dataclass(frozen=True)
class Criterion:
    criterion_id: str
    category: str
    name: str
    description: str


@dataclass(frozen=True)
class CriteriaCatalog:
    """Ordered rubric: four criteria per category, ids unique."""

    entries: tuple[Criterion, ...]

    def __post_init__(self):
        ids = [c.criterion_id for c in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("criterion ids must be unique")

    def get(self, criterion_id: str) -> Criterion | None:
        for c in self.entries:
            if c.criterion_id == criterion_id:
                return c
        return None

    def categories(self) -> tuple[str, ...]:
        seen: list[str] = []
        for c in self.entries:
            if c.category not in seen:
                seen.append(c.category)
        return tuple(seen)

    def in_category(self, category: str) -> tuple[Criterion, ...]:
        return tuple(c for c in self.entries if c.category == category)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)


DEFAULT_CATALOG = CriteriaCatalog(
    entries=(
        Criterion(
            "1.1", CONTENT_CATEGORY, "Clinical Accuracy",
            "Assess whether the information shared is medically correct and up to date.",
        ),
        Criterion(
            "1.2", CONTENT_CATEGORY, "Evidence-Based",
            "Evaluate if physicians are using evidence-based medicine principles "
            "in their discussion.",
        ),
        Criterion(
            "1.3", CONTENT_CATEGORY, "Relevance",
            "Is the discussion directly applicable to the patient case at hand?",
        ),
        Criterion(
            "1.4", CONTENT_CATEGORY, "Comprehensiveness",
            "Check if all relevant aspects of the patient's condition are being addressed.",
        ),
        Criterion(
            "2.1", COMMUNICATION_CATEGORY, "Clarity & Coherence",
            "Assess whether the discussion is clear, well-structured, and easy to follow.",
        ),
        Criterion(
            "2.2", COMMUNICATION_CATEGORY, "Medical Terminology",
            "Evaluate appropriate use of medical terms and explanations when necessary.",
        ),
        Criterion(
            "2.3", COMMUNICATION_CATEGORY, "Active Listening",
            "Observe if physicians are attentively listening to each other's input.",
        ),
        Criterion(
            "2.4", COMMUNICATION_CATEGORY, "Variability/Diversity",
            "Evaluate if physicians are challenging each other and exploring a diverse "
            'set of "schools of thought".',
        ),
    )
)

# Scale anchors shown to raters (5-point Likert).
SCALE_ANCHORS = {
    5: "excellent",
    4: "good",
    3: "acceptable",
    2: "limited",
    1: "does not meet the criteria",
}

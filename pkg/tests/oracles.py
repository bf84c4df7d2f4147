"""Independent reference implementations used as test oracles.

Everything here is deliberately written as plain double loops over Python
scalars, with no shared code or vectorization from the package under test.
The engine must agree with these to 1e-12; the oracles are never imported
by the package itself.
"""
from __future__ import annotations

import re


def oracle_weight(a: int, b: int, k: int) -> float:
    return 1.0 - ((a - b) ** 2) / ((k - 1) ** 2)


def oracle_observed_agreement(cells: list[list[int | None]], k: int) -> float:
    """Mean over items (with >= 2 ratings) of the mean pairwise weight.

    ``cells[i][r]`` is the score rater ``r`` gave item ``i``, or None.
    """
    per_item = []
    for row in cells:
        scores = [s for s in row if s is not None]
        if len(scores) < 2:
            continue
        total = 0.0
        pairs = 0
        for i in range(len(scores)):
            for j in range(i + 1, len(scores)):
                total += oracle_weight(scores[i], scores[j], k)
                pairs += 1
        per_item.append(total / pairs)
    if not per_item:
        raise ValueError("no items with two or more ratings")
    return sum(per_item) / len(per_item)


def oracle_expected_agreement(cells: list[list[int | None]], k: int) -> float:
    """Sum_a sum_b p_a p_b w(a,b) over pooled score proportions."""
    counts = {c: 0 for c in range(1, k + 1)}
    total = 0
    for row in cells:
        for s in row:
            if s is not None:
                counts[s] += 1
                total += 1
    if total == 0:
        raise ValueError("empty matrix")
    p = {c: counts[c] / total for c in counts}
    expected = 0.0
    for a in range(1, k + 1):
        for b in range(1, k + 1):
            expected += p[a] * p[b] * oracle_weight(a, b, k)
    return expected


def oracle_kappa(cells: list[list[int | None]], k: int = 5) -> float:
    po = oracle_observed_agreement(cells, k)
    pe = oracle_expected_agreement(cells, k)
    if 1.0 - pe < 1e-12:
        raise ZeroDivisionError("degenerate marginals")
    return (po - pe) / (1.0 - pe)


# Deny-list oracle: an independently written pattern set.  Formulated
# differently from the package's patterns on purpose; used only to screen
# fuzz inputs as "clean" before asserting the engine also finds nothing.
ORACLE_DENY_PATTERNS = [
    re.compile(r"[\w.+-]+@[\w-]+\.[\w.]+"),
    re.compile(r"\+?\d{1,3}?[-. (]*\d{3}[-. )]*\d{3}[-. ]*\d{2,4}"),
    re.compile(r"\d{4}-\d{2}-\d{2}"),
    re.compile(r"\d{1,2}/\d{1,2}/\d{2,4}"),
    re.compile(
        r"(Jan|Feb|Mar|Apr|May|Jun|Jul|Aug|Sep|Oct|Nov|Dec)[a-z]*\.?\s+\d{1,2}(?!\d)"
    ),
    re.compile(r"\d{1,2}\s+(Jan|Feb|Mar|Apr|May|Jun|Jul|Aug|Sep|Oct|Nov|Dec)[a-z]*"),
    re.compile(r"(Dr|Mr|Mrs|Ms|Prof)\.?\s+[A-Z][a-z]+\s+[A-Z][a-z]+"),
]


def oracle_is_clean(text: str) -> bool:
    return not any(p.search(text) for p in ORACLE_DENY_PATTERNS)


def oracle_backoff_schedule(base: float, factor: float, retries: int) -> list[float]:
    """Hand-computable minimum sleep before each retry: base * factor**attempt."""
    return [base * factor**attempt for attempt in range(retries)]

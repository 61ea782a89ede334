"""Exact-name category overlap filtering between OOD and ID label lists.

Matching is case-insensitive after collapsing whitespace and underscores, so
"Filet Mignon", "filet_mignon" and " filet  mignon " all collide.  Removed
entries are logged with the ID category they hit; the log format leaves room
for externally produced removal lists (e.g. semantic near-duplicates) to be
merged in under a different reason tag.
"""

from __future__ import annotations

from dataclasses import dataclass


def normalize_category(name: str) -> str:
    return " ".join(name.replace("_", " ").split()).casefold()


@dataclass(frozen=True)
class Removal:
    ood_category: str
    id_category: str
    reason: str = "exact-match"


def filter_overlap(ood_categories: list[str],
                   id_categories: list[str]) -> tuple[list[str], list[Removal]]:
    """Drop OOD categories whose normalized name equals any ID category."""
    id_by_norm = {}
    for name in id_categories:
        id_by_norm.setdefault(normalize_category(name), name)
    kept = []
    removed = []
    for name in ood_categories:
        hit = id_by_norm.get(normalize_category(name))
        if hit is None:
            kept.append(name)
        else:
            removed.append(Removal(ood_category=name, id_category=hit))
    return kept, removed


def removals_to_lines(removals: list[Removal]) -> str:
    lines = ["ood_category\tid_category\treason"]
    lines += [f"{r.ood_category}\t{r.id_category}\t{r.reason}" for r in removals]
    return "\n".join(lines) + "\n"

"""Miniature fact store: exact-token retrieval and a lexical entailment factor."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

F_MIN = 0.1


@dataclass(frozen=True)
class Fact:
    subject: str
    relation: str
    value: str

    def __post_init__(self):
        for name in ("subject", "relation", "value"):
            v = getattr(self, name)
            if not isinstance(v, str) or not v:
                raise ValueError(f"fact field {name!r} must be a non-empty string, got {v!r}")

    @property
    def fields(self) -> tuple[str, str, str]:
        return (self.subject, self.relation, self.value)


@dataclass(frozen=True)
class EvidenceSet:
    facts: tuple[Fact, ...] = ()
    scores: tuple[float, ...] = ()

    def __len__(self) -> int:
        return len(self.facts)

    def tokens(self) -> set[str]:
        return {tok for f in self.facts for tok in f.fields}


class FactStore:
    """Immutable after construction; facts keep their ingestion order."""

    def __init__(self, facts: tuple[Fact, ...], index: dict[str, tuple[int, ...]]):
        self._facts = facts
        self._index = index

    @property
    def facts(self) -> tuple[Fact, ...]:
        return self._facts

    def __len__(self) -> int:
        return len(self._facts)

    def postings(self, token: str) -> tuple[int, ...]:
        return self._index.get(token, ())


def ingest(facts: Iterable[Fact]) -> FactStore:
    """Index facts by subject and relation tokens.

    Re-ingesting an identical fact is a no-op; the same (subject, relation) with a
    different value raises.
    """
    kept: list[Fact] = []
    by_key: dict[tuple[str, str], Fact] = {}
    for f in facts:
        key = (f.subject, f.relation)
        prev = by_key.get(key)
        if prev is not None:
            if prev != f:
                raise ValueError(f"conflicting facts: {prev} and {f}")
            continue
        by_key[key] = f
        kept.append(f)
    index: dict[str, list[int]] = {}
    for i, f in enumerate(kept):
        for tok in {f.subject, f.relation}:
            index.setdefault(tok, []).append(i)
    return FactStore(tuple(kept), {k: tuple(v) for k, v in index.items()})


def retrieve(store: FactStore, query_tokens: Sequence[str], k: int) -> EvidenceSet:
    """Top-k facts by number of distinct query tokens among (subject, relation).

    Zero-overlap facts are excluded; ties go to the earlier-ingested fact.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1 (got {k})")
    score: dict[int, int] = {}
    for tok in set(query_tokens):
        for i in store.postings(tok):
            score[i] = score.get(i, 0) + 1
    ranked = sorted(score.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return EvidenceSet(tuple(store.facts[i] for i, _ in ranked), tuple(float(s) for _, s in ranked))


def char_ngrams(token: str, n: int = 3) -> list[str]:
    if len(token) <= n:
        return [token]
    return [token[i:i + n] for i in range(len(token) - n + 1)]


def entailment_factor(node_token: str, node_role: str, evidence: EvidenceSet, mode: str = "binary",
                      f_min: float = F_MIN, n: int = 3) -> float:
    """Fact-anchored factor in [f_min, 1].

    ``binary``: 1 if the token equals a field of any retrieved fact, else f_min.
    ``overlap``: f_min + (1 - f_min) * fraction of the token's character n-grams
    occurring in some retrieved field.  ``node_role`` is accepted so that
    role-aware entailment models can share the signature; the lexical proxy
    ignores it.
    """
    if not 0.0 < f_min <= 1.0:
        raise ValueError(f"f_min must lie in (0, 1] (got {f_min})")
    fields = [tok for f in evidence.facts for tok in f.fields]
    if mode == "binary":
        return 1.0 if node_token in fields else f_min
    if mode == "overlap":
        grams = char_ngrams(node_token, n)
        found = {g for fld in fields for g in char_ngrams(fld, n)}
        frac = sum(g in found for g in grams) / len(grams)
        return f_min + (1.0 - f_min) * frac
    raise ValueError(f"unknown entailment mode {mode!r}")


def write_facts(facts: Iterable[Fact], path) -> None:
    with open(path, "w") as fh:
        for f in facts:
            fh.write(json.dumps({"subject": f.subject, "relation": f.relation, "value": f.value},
                                separators=(",", ":")) + "\n")


def read_facts(path) -> list[Fact]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        unknown = set(d) - {"subject", "relation", "value"}
        if unknown:
            raise ValueError(f"unknown fact keys: {sorted(unknown)}")
        out.append(Fact(d["subject"], d["relation"], d["value"]))
    return out

"""Answer-level metrics and the per-token CCS before/after report.

Every prediction falls into exactly one outcome class:

* ``correct``            answer equals the gold value
* ``in_evidence_wrong``  wrong, but the token appears in the episode's stated facts
* ``hallucinated``       wrong and absent from the stated facts
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Collection, Sequence

OUTCOMES = ("correct", "in_evidence_wrong", "hallucinated")
CCS_CSV_FIELDS = ("position", "token", "ccs_before", "ccs_after", "suppressed")


def _check_aligned(name: str, *seqs: Sequence) -> None:
    lengths = {len(s) for s in seqs}
    if len(lengths) > 1:
        raise ValueError(f"{name}: length mismatch {[len(s) for s in seqs]}")


def classify(prediction: str, gold: str, evidence: Collection[str]) -> str:
    if prediction == gold:
        return "correct"
    return "in_evidence_wrong" if prediction in evidence else "hallucinated"


def outcome_counts(predictions: Sequence[str], gold: Sequence[str],
                   evidence: Sequence[Collection[str]]) -> dict[str, int]:
    _check_aligned("outcome_counts", predictions, gold, evidence)
    counts = dict.fromkeys(OUTCOMES, 0)
    for p, g, ev in zip(predictions, gold, evidence):
        counts[classify(p, g, ev)] += 1
    return counts


def hallucination_rate(predictions: Sequence[str], gold: Sequence[str],
                       evidence: Sequence[Collection[str]]) -> float:
    """Fraction of answers that are wrong and not found among the episode's evidence tokens."""
    counts = outcome_counts(predictions, gold, evidence)
    return counts["hallucinated"] / len(predictions) if predictions else 0.0


def factual_accuracy(predictions: Sequence[str], gold: Sequence[str]) -> float:
    _check_aligned("factual_accuracy", predictions, gold)
    if not predictions:
        return 0.0
    return sum(p == g for p, g in zip(predictions, gold)) / len(predictions)


# ----------------------------------------------------------------------
# CCS report
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class CcsRow:
    position: int
    token: str
    ccs_before: float
    ccs_after: float
    suppressed: bool


def ccs_report(diagnostics: Sequence[dict], baseline_diagnostics: Sequence[dict],
               prompt: Sequence, baseline_prompt: Sequence) -> list[CcsRow]:
    """One row per output token of the re-weighted run.

    Each diagnostics record carries ``token``, ``suppressed`` (key positions) and
    ``ccs_token``, the token's score in its finished episode graph.  The baseline
    stream supplies ``ccs_before``; positions count from the start of the prompt.
    """
    if list(prompt) != list(baseline_prompt):
        raise ValueError("ccs_report: diagnostics describe different prompts")
    if len(diagnostics) != len(baseline_diagnostics):
        raise ValueError(f"ccs_report: {len(diagnostics)} re-weighted steps vs "
                         f"{len(baseline_diagnostics)} baseline steps")
    n = len(prompt)
    rows = []
    for i, (d, b) in enumerate(zip(diagnostics, baseline_diagnostics)):
        if d.get("ccs_token") is None or b.get("ccs_token") is None:
            raise ValueError(f"ccs_report: step {i} has no token score (run with final_graph=True)")
        rows.append(CcsRow(n + i, str(d["token"]), float(b["ccs_token"]), float(d["ccs_token"]),
                           bool(d["suppressed"])))
    return rows


def _fmt(x: float) -> str:
    return repr(float(x))


def write_ccs_csv(rows: Sequence[CcsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CCS_CSV_FIELDS)
    for r in rows:
        w.writerow([r.position, r.token, _fmt(r.ccs_before), _fmt(r.ccs_after), int(r.suppressed)])
    return buf.getvalue()


def read_ccs_csv(text: str) -> list[CcsRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != CCS_CSV_FIELDS:
        raise ValueError(f"CCS CSV header must be {','.join(CCS_CSV_FIELDS)}")
    return [CcsRow(int(p), tok, float(a), float(b), bool(int(s))) for p, tok, a, b, s in reader]

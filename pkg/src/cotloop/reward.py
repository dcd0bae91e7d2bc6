"""Composite reward functions, threshold filtering, and reward histograms.

The closed-loop reward gates annotation similarity on "no leak" and
"format ok"; the think-answer reward gates on format only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .domain import (Classification, RewardBreakdown, Sample, ScoredRecord,
                     make_breakdown)
from .errors import DomainError
from .similarity import classification_similarity, detection_similarity
from .textproto import ParsedOutput, detect_leak, validate_f_cot, validate_f_r1

HISTOGRAM_EDGES = (0.0, 0.25, 0.5, 0.75, 1.0)
DEFAULT_TAU = 0.75


@dataclass(frozen=True)
class RewardConfig:
    tau: float = DEFAULT_TAU
    histogram_edges: tuple[float, ...] = HISTOGRAM_EDGES
    clamp: float = 1e-10

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0,1]: {self.tau}")
        edges = self.histogram_edges
        if list(edges) != sorted(set(edges)) or edges[0] != 0.0 or edges[-1] != 1.0:
            raise ValueError("histogram edges must strictly increase and span [0,1]")


def _similarity(sample: Sample, reconstruction) -> float:
    if isinstance(sample.task, Classification):
        return classification_similarity(sample.annotation, reconstruction)
    return detection_similarity(sample.annotation, reconstruction)


def closed_loop_reward(sample: Sample, cot: str, reconstruction_text: str) -> RewardBreakdown:
    """Score one (CoT, reconstruction) pair against the sample's ground truth.

    Similarity gated to 0 by leakage in the CoT or a failed format check;
    a reconstruction that does not parse is a format failure, never an
    exception.
    """
    parsed = ParsedOutput.from_text(reconstruction_text, sample.task)
    leak, evidence = detect_leak(cot, sample.task)
    format_ok = validate_f_cot(cot, parsed.answer)
    similarity = _similarity(sample, parsed.answer) if parsed.answer is not None else 0.0
    reason = None
    if leak:
        reason = "leak"
    elif parsed.answer is None:
        reason = "parse"
    elif not format_ok:
        reason = "format"
    return make_breakdown(similarity, leak, format_ok, reason=reason,
                          leak_evidence=evidence)


def think_answer_reward(sample: Sample, raw_model_output: str) -> RewardBreakdown:
    """Score one raw think-answer output; format-gated, no leakage term."""
    format_ok = validate_f_r1(raw_model_output, sample.task)
    parsed = ParsedOutput.from_text(raw_model_output, sample.task)
    similarity = _similarity(sample, parsed.answer) if parsed.answer is not None else 0.0
    reason = None
    if not format_ok:
        reason = "parse" if parsed.answer is None else "format"
    return make_breakdown(similarity, leak_detected=False, format_ok=format_ok,
                          reason=reason)


def reward_histogram(rewards: Sequence[float],
                     edges: Sequence[float] = HISTOGRAM_EDGES) -> tuple[list[int], list[float]]:
    """Bin rewards into [0,.25), [.25,.5), [.5,.75), [.75,1.0].

    Only the top bin is right-inclusive, so reward 1.0 and the tau=0.75
    cutoff land together. Returns (counts, percentages).
    """
    counts = [0] * (len(edges) - 1)
    for r in rewards:
        if not 0.0 <= r <= 1.0:
            raise DomainError(f"reward out of range: {r}")
        for i in range(len(counts)):
            last = i == len(counts) - 1
            if edges[i] <= r < edges[i + 1] or (last and r == edges[-1]):
                counts[i] += 1
                break
    total = len(rewards)
    pcts = [100.0 * c / total if total else 0.0 for c in counts]
    return counts, pcts


def filter_high_subset(records: Sequence[ScoredRecord],
                       tau: float = DEFAULT_TAU) -> tuple[list[ScoredRecord], int, int]:
    """Keep records with reward >= tau, preserving order; returns (kept, n_kept, n_total)."""
    kept = [r for r in records if r.reward >= tau]
    return kept, len(kept), len(records)

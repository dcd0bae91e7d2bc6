"""Core data model: tasks, annotations, samples, reward breakdowns, records.

All types are immutable value objects; geometry uses the continuous-area
convention (area = width * height, unit-square mask cells).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

from .errors import EmptyMask, InvalidGeometry

GT_SUM_TOL = 1e-6


@dataclass(frozen=True)
class Classification:
    """Classification task over a fixed ordered category list."""

    categories: tuple[str, ...]

    def __post_init__(self):
        if not self.categories:
            raise ValueError("category list must be non-empty")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("category names must be unique")
        object.__setattr__(self, "categories", tuple(self.categories))

    @property
    def num_categories(self) -> int:
        return len(self.categories)


@dataclass(frozen=True)
class Detection:
    """Detection task on an image of known pixel dimensions."""

    image_width: float
    image_height: float

    def __post_init__(self):
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")


TaskKind = Union[Classification, Detection]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in corner format, x1 <= x2 and y1 <= y2.

    Degenerate (zero-area) boxes are valid data: real model outputs
    produce them, and they simply have IoU 0 with everything.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if any(not _finite(c) or c < 0 for c in coords):
            raise InvalidGeometry(f"coordinates must be finite and >= 0: {coords}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise InvalidGeometry(f"corner ordering violated: {coords}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def _finite(x) -> bool:
    return isinstance(x, (int, float)) and x == x and abs(x) != float("inf")


@dataclass(frozen=True)
class Distribution:
    """Category -> probability map.

    Reconstructed distributions need not sum to 1 (the similarity
    function penalizes the deviation); ground truths are checked at
    dataset load via :func:`validate_annotation` with ``ground_truth=True``.
    """

    probs: dict[str, float]

    def __post_init__(self):
        object.__setattr__(self, "probs", dict(self.probs))

    def values_in_order(self, categories: Sequence[str]) -> list[float]:
        return [self.probs[c] for c in categories]

    def total(self) -> float:
        return sum(self.probs.values())

    def argmax(self, categories: Sequence[str]) -> str:
        # Ties broken by first category in task order.
        best = None
        for c in categories:
            if best is None or self.probs[c] > self.probs[best]:
                best = c
        return best

    def __hash__(self):
        return hash(tuple(sorted(self.probs.items())))


@dataclass(frozen=True)
class BoxSet:
    """A set of boxes; the annotation form for detection tasks."""

    boxes: tuple[Box, ...]

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def __len__(self) -> int:
        return len(self.boxes)


Annotation = Union[Distribution, BoxSet]


@dataclass(frozen=True)
class Sample:
    """One image reference with its task and ground-truth annotation.

    ``image_ref`` is an opaque string (path or URI); the core never
    dereferences it.
    """

    id: str
    image_ref: str
    task: TaskKind
    annotation: Annotation
    target_desc: Optional[str] = None


def validate_annotation(a: Annotation, task: TaskKind, ground_truth: bool = False) -> list[str]:
    """Return every violated invariant; an empty list means the annotation is valid.

    Violations are data, not faults: this never raises.
    """
    violations: list[str] = []
    if isinstance(task, Classification):
        if not isinstance(a, Distribution):
            violations.append("variant mismatch: classification task needs a Distribution")
            return violations
        got = set(a.probs)
        want = set(task.categories)
        if got != want:
            missing = sorted(want - got)
            extra = sorted(got - want)
            if missing:
                violations.append(f"missing categories: {missing}")
            if extra:
                violations.append(f"unknown categories: {extra}")
        for cat, p in a.probs.items():
            if not _finite(p) or p < 0 or p > 1:
                violations.append(f"probability out of range for {cat!r}: {p}")
        if ground_truth and not violations:
            total = a.total()
            if abs(total - 1.0) > GT_SUM_TOL:
                violations.append(f"ground-truth distribution sums to {total}, not 1")
    elif isinstance(task, Detection):
        if not isinstance(a, BoxSet):
            violations.append("variant mismatch: detection task needs a BoxSet")
            return violations
        for i, b in enumerate(a.boxes):
            if b.x2 < b.x1:
                violations.append(f"box {i}: x2 < x1")
            if b.y2 < b.y1:
                violations.append(f"box {i}: y2 < y1")
    else:
        violations.append(f"unknown task kind: {task!r}")
    return violations


def convert_box(box, direction: str):
    """Convert between corner [x1,y1,x2,y2] and [x,y,w,h] interchange forms.

    ``direction`` is ``"corner_to_xywh"`` or ``"xywh_to_corner"``; input is
    a Box or a 4-tuple, output is a plain 4-tuple.
    """
    if direction == "corner_to_xywh":
        if isinstance(box, Box):
            x1, y1, x2, y2 = box.as_tuple()
        else:
            x1, y1, x2, y2 = box
            if x2 < x1 or y2 < y1:
                raise InvalidGeometry(f"corner ordering violated: {box}")
        return (x1, y1, x2 - x1, y2 - y1)
    if direction == "xywh_to_corner":
        x, y, w, h = box if not isinstance(box, Box) else box.as_tuple()
        if w < 0 or h < 0:
            raise InvalidGeometry(f"negative width/height: {(x, y, w, h)}")
        return (x, y, x + w, y + h)
    raise ValueError(f"unknown direction: {direction!r}")


def mask_to_box(mask) -> Box:
    """Tightest corner box enclosing every true cell of a dense binary grid.

    Cell (row r, col c) occupies the continuous unit square
    [c, c+1] x [r, r+1], so a single true cell at (r, c) yields
    (c, r, c+1, r+1).
    """
    if not mask or not any(len(row) for row in mask):
        raise EmptyMask("mask grid is empty")
    rows = [(r, row) for r, row in enumerate(mask) if any(row)]
    if not rows:
        raise EmptyMask("mask has no true cells")
    r_min = rows[0][0]
    r_max = rows[-1][0]
    c_min = min(min(c for c, v in enumerate(row) if v) for _, row in rows)
    c_max = max(max(c for c, v in enumerate(row) if v) for _, row in rows)
    return Box(c_min, r_min, c_max + 1, r_max + 1)


@dataclass(frozen=True)
class RewardBreakdown:
    """Similarity plus the leak/format gates and the gated composite.

    Invariant: composite == similarity when no leak and format ok,
    otherwise composite == 0. ``reason`` names the first failed gate
    (leak | format | parse) or "similarity" when the gates passed.
    """

    similarity: float
    leak_detected: bool
    format_ok: bool
    composite: float
    reason: str = "similarity"
    leak_evidence: tuple[str, ...] = field(default=())

    def __post_init__(self):
        gates_pass = (not self.leak_detected) and self.format_ok
        expect = self.similarity if gates_pass else 0.0
        if self.composite != expect:
            raise ValueError("composite violates the gating identity")


def make_breakdown(similarity: float, leak_detected: bool, format_ok: bool,
                   reason: Optional[str] = None,
                   leak_evidence: Sequence[str] = ()) -> RewardBreakdown:
    gates_pass = (not leak_detected) and format_ok
    if reason is None:
        reason = "leak" if leak_detected else ("format" if not format_ok else "similarity")
    return RewardBreakdown(
        similarity=similarity,
        leak_detected=leak_detected,
        format_ok=format_ok,
        composite=similarity if gates_pass else 0.0,
        reason=reason,
        leak_evidence=tuple(leak_evidence),
    )


@dataclass(frozen=True)
class ScoredRecord:
    """One curated row: a sample's best CoT, its reconstruction, and its reward."""

    sample_id: str
    cot: str
    reconstruction: Optional[Annotation]
    reward: float
    breakdown: RewardBreakdown

    def __post_init__(self):
        if self.reward != self.breakdown.composite:
            raise ValueError("record reward must equal the breakdown composite")

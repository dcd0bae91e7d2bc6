"""End-to-end orchestration: dataset IO, the closed-loop generation stage,
tau-filtering and SFT export, think-answer reward evaluation, and metric
evaluation.

All on-disk artifacts are line-oriented JSON with a versioned header
line; record files are flushed per line so interrupted runs resume from
the last complete record.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .backends import GenerationRequest
from .domain import (Annotation, Box, BoxSet, Classification, Detection,
                     Distribution, RewardBreakdown, Sample, ScoredRecord,
                     validate_annotation)
from .errors import (BackendError, DomainError, HeaderMismatch, MissingFile,
                     ValidationFailure)
from .grpo import Group, GroupMember, compute_group_advantages, select_best_of_group
from .render import render_annotation
from .reward import DEFAULT_TAU, closed_loop_reward, think_answer_reward
from .similarity import hungarian_match, jsd
from .textproto import ParsedOutput, load_template, render_prompt

FORMAT_VERSION = 1


# --- dataset files -----------------------------------------------------------

def _task_to_json(task) -> dict:
    if isinstance(task, Classification):
        return {"kind": "classification", "categories": list(task.categories)}
    return {"kind": "detection", "image_width": task.image_width,
            "image_height": task.image_height}


def _task_from_json(obj: dict):
    if obj.get("kind") == "classification":
        return Classification(categories=tuple(obj["categories"]))
    if obj.get("kind") == "detection":
        return Detection(image_width=obj["image_width"],
                         image_height=obj["image_height"])
    raise HeaderMismatch(f"unknown task kind in header: {obj.get('kind')!r}")


def annotation_to_json(a: Annotation) -> dict:
    if isinstance(a, Distribution):
        return {"probs": a.probs}
    return {"boxes": [list(b.as_tuple()) for b in a.boxes]}


def annotation_from_json(obj: dict) -> Annotation:
    if "probs" in obj:
        return Distribution({str(k): float(v) for k, v in obj["probs"].items()})
    if "boxes" in obj:
        return BoxSet(tuple(Box(*map(float, b)) for b in obj["boxes"]))
    raise ValueError(f"unknown annotation shape: {sorted(obj)}")


def _dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(", ", ": "))


def save_dataset(samples: Sequence[Sample], task, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        header = {"format": "cotloop-dataset", "version": FORMAT_VERSION,
                  "task": _task_to_json(task)}
        f.write(_dumps(header) + "\n")
        for s in samples:
            line = {"id": s.id, "image_ref": s.image_ref,
                    "annotation": annotation_to_json(s.annotation)}
            if s.target_desc is not None:
                line["target_desc"] = s.target_desc
            f.write(_dumps(line) + "\n")


def load_dataset(path: str, task_hint: Optional[str] = None,
                 skip_invalid: bool = False) -> tuple[list[Sample], list[str]]:
    """Load and validate a dataset file.

    Returns (samples, error report). Malformed lines are collected, not
    silently dropped; without skip_invalid any error aborts the load.
    """
    if not os.path.exists(path):
        raise MissingFile(path)
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise HeaderMismatch("empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise HeaderMismatch(f"unparseable header: {e}")
    if header.get("format") != "cotloop-dataset":
        raise HeaderMismatch(f"not a dataset file: format={header.get('format')!r}")
    task = _task_from_json(header.get("task", {}))
    if task_hint is not None:
        kind = "classification" if isinstance(task, Classification) else "detection"
        if kind != task_hint:
            raise HeaderMismatch(f"dataset task is {kind}, expected {task_hint}")

    samples: list[Sample] = []
    errors: list[str] = []
    seen_ids: set[str] = set()
    for n, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
            annotation = annotation_from_json(obj["annotation"])
            sample = Sample(id=str(obj["id"]), image_ref=str(obj["image_ref"]),
                            task=task, annotation=annotation,
                            target_desc=obj.get("target_desc"))
        except Exception as e:  # malformed line, reported with its number
            errors.append(f"line {n}: {e}")
            continue
        violations = validate_annotation(sample.annotation, task, ground_truth=True)
        if violations:
            errors.append(f"line {n} ({sample.id}): " + "; ".join(violations))
            continue
        if sample.id in seen_ids:
            errors.append(f"line {n}: duplicate id {sample.id!r}")
            continue
        seen_ids.add(sample.id)
        samples.append(sample)
    if errors and not skip_invalid:
        raise ValidationFailure(errors)
    return samples, errors


# --- record files ------------------------------------------------------------

def _breakdown_to_json(b: RewardBreakdown) -> dict:
    return {"similarity": b.similarity, "leak_detected": b.leak_detected,
            "format_ok": b.format_ok, "composite": b.composite,
            "reason": b.reason, "leak_evidence": list(b.leak_evidence)}


def _breakdown_from_json(obj: dict) -> RewardBreakdown:
    return RewardBreakdown(similarity=obj["similarity"],
                           leak_detected=obj["leak_detected"],
                           format_ok=obj["format_ok"],
                           composite=obj["composite"],
                           reason=obj.get("reason", "similarity"),
                           leak_evidence=tuple(obj.get("leak_evidence", ())))


def record_to_json(r: ScoredRecord) -> dict:
    return {"sample_id": r.sample_id, "cot": r.cot,
            "reconstruction": (annotation_to_json(r.reconstruction)
                               if r.reconstruction is not None else None),
            "reward": r.reward, "breakdown": _breakdown_to_json(r.breakdown)}


def record_from_json(obj: dict) -> ScoredRecord:
    recon = obj.get("reconstruction")
    return ScoredRecord(sample_id=obj["sample_id"], cot=obj["cot"],
                        reconstruction=(annotation_from_json(recon)
                                        if recon is not None else None),
                        reward=obj["reward"],
                        breakdown=_breakdown_from_json(obj["breakdown"]))


def save_records(records: Sequence[ScoredRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(_dumps({"format": "cotloop-records", "version": FORMAT_VERSION}) + "\n")
        for r in records:
            f.write(_dumps(record_to_json(r)) + "\n")


def load_records(path: str) -> list[ScoredRecord]:
    if not os.path.exists(path):
        raise MissingFile(path)
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or json.loads(lines[0]).get("format") != "cotloop-records":
        raise HeaderMismatch("not a records file")
    records = []
    for raw in lines[1:]:
        if raw.strip():
            records.append(record_from_json(json.loads(raw)))
    return records


def _read_complete_record_ids(path: str) -> tuple[list[str], list[str]]:
    """Existing complete lines for crash resumption; ignores a torn last line."""
    if not os.path.exists(path):
        return [], []
    with open(path, encoding="utf-8") as f:
        content = f.read()
    lines = content.split("\n")
    if lines and lines[-1] != "":
        lines = lines[:-1]  # torn final line, no trailing newline
    else:
        lines = lines[:-1]
    complete = []
    ids = []
    for raw in lines:
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError:
            continue
        complete.append(raw)
        if "sample_id" in obj:
            ids.append(obj["sample_id"])
    return complete, ids


# --- prompt construction -----------------------------------------------------

def _task_name(task) -> str:
    return "classification" if isinstance(task, Classification) else "detection"


def reasoning_prompt(sample: Sample) -> str:
    """Reasoning-stage prompt: the ground truth is injected here and only here."""
    t = load_template(_task_name(sample.task), "reasoning")
    if isinstance(sample.task, Classification):
        variables = {"prob_distribution": render_annotation(sample.annotation, sample.task)}
    else:
        variables = {"bbox": render_annotation(sample.annotation, sample.task),
                     "target": sample.target_desc or "the target object"}
    return render_prompt(t, variables)


def reconstruction_prompt(sample: Sample, cot: str) -> str:
    """Reconstruction-stage prompt: never sees the ground truth."""
    t = load_template(_task_name(sample.task), "reconstruction")
    if isinstance(sample.task, Classification):
        variables = {"CoTs": cot, "categories": str(list(sample.task.categories))}
    else:
        variables = {"CoTs": cot, "target": sample.target_desc or "the target object"}
    return render_prompt(t, variables)


def r1_prompt(sample: Sample) -> str:
    t = load_template(_task_name(sample.task), "r1")
    if isinstance(sample.task, Classification):
        variables = {"categories": str(list(sample.task.categories))}
    else:
        variables = {"target": sample.target_desc or "the target object"}
    return render_prompt(t, variables)


# --- closed-loop stage -------------------------------------------------------

@dataclass
class StageResult:
    records: list[ScoredRecord] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    groups: list[Group] = field(default_factory=list)


def run_closed_loop_stage(samples: Sequence[Sample], reason_backend, recon_backend,
                          group_size: int, seed: int,
                          records_path: Optional[str] = None,
                          keep_groups: bool = False) -> StageResult:
    """Generate G CoTs per sample, reconstruct, score, retain best-of-group.

    Records persist incrementally (one flushed line per sample), and a
    restarted run skips sample ids already present in the record file.
    Backend failures go into the failure manifest; the stage completes.
    """
    result = StageResult()
    done_ids: set[str] = set()
    out = None
    if records_path is not None:
        complete, ids = _read_complete_record_ids(records_path)
        done_ids = set(ids)
        header = _dumps({"format": "cotloop-records", "version": FORMAT_VERSION})
        if complete and complete[0] == header:
            # Rewrite only complete lines, then continue appending.
            with open(records_path, "w", encoding="utf-8") as f:
                f.write("\n".join(complete) + "\n")
            for raw in complete[1:]:
                result.records.append(record_from_json(json.loads(raw)))
            out = open(records_path, "a", encoding="utf-8")
        else:
            out = open(records_path, "w", encoding="utf-8")
            out.write(header + "\n")
            out.flush()
            done_ids = set()
    try:
        for sample in samples:
            if sample.id in done_ids:
                continue
            try:
                members = []
                for g in range(group_size):
                    req = GenerationRequest(sample_id=sample.id,
                                            image_ref=sample.image_ref,
                                            prompt=reasoning_prompt(sample),
                                            seed=_derive_seed(seed, sample.id, g))
                    cot = reason_backend.generate(req)
                    recon_req = GenerationRequest(sample_id=sample.id,
                                                  image_ref=sample.image_ref,
                                                  prompt=reconstruction_prompt(sample, cot),
                                                  temperature=0.0,
                                                  seed=_derive_seed(seed, sample.id, g))
                    recon_text = recon_backend.generate(recon_req)
                    breakdown = closed_loop_reward(sample, cot, recon_text)
                    parsed = ParsedOutput.from_text(recon_text, sample.task)
                    members.append(GroupMember(cot=cot, reconstruction=parsed.answer,
                                               breakdown=breakdown))
            except BackendError as e:
                result.failures.append({"sample_id": sample.id, "error": str(e),
                                        "kind": type(e).__name__})
                continue
            group = Group.build(sample.id, members) if group_size >= 2 else None
            if group is not None and keep_groups:
                result.groups.append(group)
            if group is not None:
                _, record = select_best_of_group(group)
            else:
                m = members[0]
                record = ScoredRecord(sample_id=sample.id, cot=m.cot,
                                      reconstruction=m.reconstruction,
                                      reward=m.breakdown.composite,
                                      breakdown=m.breakdown)
            result.records.append(record)
            if out is not None:
                out.write(_dumps(record_to_json(record)) + "\n")
                out.flush()
    finally:
        if out is not None:
            out.close()
    return result


def _derive_seed(seed: int, sample_id: str, g: int) -> int:
    import hashlib
    h = hashlib.sha256(f"{seed}|{sample_id}|{g}".encode()).hexdigest()
    return int(h[:12], 16)


# --- SFT export --------------------------------------------------------------

def export_sft_corpus(records: Sequence[ScoredRecord], samples: Sequence[Sample],
                      tau: float = DEFAULT_TAU, *, path: str) -> int:
    """Filter at tau and write one think-answer training line per kept record.

    The target wraps the record's CoT in <think> tags and the sample's
    ground-truth annotation, canonically rendered, in <answer> tags.
    """
    by_id = {s.id: s for s in samples}
    kept = 0
    with open(path, "w", encoding="utf-8") as f:
        f.write(_dumps({"format": "cotloop-sft", "version": FORMAT_VERSION}) + "\n")
        for r in records:
            if r.reward < tau:
                continue
            sample = by_id[r.sample_id]
            target = (f"<think>{r.cot}</think>"
                      f"<answer>{render_annotation(sample.annotation, sample.task)}</answer>")
            f.write(_dumps({"image_ref": sample.image_ref,
                            "prompt": r1_prompt(sample),
                            "target": target}) + "\n")
            kept += 1
    return kept


# --- think-answer reward evaluation ------------------------------------------

@dataclass
class RftEvalResult:
    per_sample_mean: dict[str, float] = field(default_factory=dict)
    mean_reward: float = 0.0
    failures: list[dict] = field(default_factory=list)


def run_rft_reward_eval(samples: Sequence[Sample], r1_backend, group_size: int,
                        seed: int, bookkeeping_path: Optional[str] = None) -> RftEvalResult:
    """Sample G think-answer outputs per sample, score with the format-gated
    reward, and emit the grouping bookkeeping an external trainer consumes."""
    result = RftEvalResult()
    out = None
    if bookkeeping_path is not None:
        out = open(bookkeeping_path, "w", encoding="utf-8")
        out.write(_dumps({"format": "cotloop-rft-bookkeeping",
                          "version": FORMAT_VERSION}) + "\n")
    try:
        totals = []
        for sample in samples:
            prompt = r1_prompt(sample)
            completions, rewards = [], []
            try:
                for g in range(group_size):
                    req = GenerationRequest(sample_id=sample.id,
                                            image_ref=sample.image_ref,
                                            prompt=prompt,
                                            seed=_derive_seed(seed, sample.id, g))
                    text = r1_backend.generate(req)
                    completions.append(text)
                    rewards.append(think_answer_reward(sample, text).composite)
            except BackendError as e:
                result.failures.append({"sample_id": sample.id, "error": str(e),
                                        "kind": type(e).__name__})
                continue
            advantages = (compute_group_advantages(rewards)
                          if len(rewards) >= 2 else [0.0] * len(rewards))
            mean = sum(rewards) / len(rewards)
            result.per_sample_mean[sample.id] = mean
            totals.append(mean)
            if out is not None:
                out.write(_dumps({"sample_id": sample.id,
                                  "completions": completions,
                                  "rewards": rewards,
                                  "advantages": advantages}) + "\n")
                out.flush()
        result.mean_reward = sum(totals) / len(totals) if totals else 0.0
    finally:
        if out is not None:
            out.close()
    return result


# --- evaluation --------------------------------------------------------------

@dataclass
class EvalReport:
    per_sample: dict[str, float] = field(default_factory=dict)
    mean_jsd: Optional[float] = None
    accuracy: Optional[float] = None
    detection_score: Optional[float] = None
    win_rate: Optional[float] = None
    parse_failures: int = 0


def load_predictions(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise MissingFile(path)
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or json.loads(lines[0]).get("format") != "cotloop-predictions":
        raise HeaderMismatch("not a predictions file")
    preds = {}
    for raw in lines[1:]:
        if raw.strip():
            obj = json.loads(raw)
            preds[str(obj["id"])] = obj["raw"]
    return preds


def save_predictions(preds: dict[str, str], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(_dumps({"format": "cotloop-predictions",
                        "version": FORMAT_VERSION}) + "\n")
        for sid, raw in preds.items():
            f.write(_dumps({"id": sid, "raw": raw}) + "\n")


def _normalized_prediction(raw: str, task: Classification) -> tuple[Distribution, bool]:
    """Parsed prediction renormalized to a distribution; failures score
    as the uniform distribution (counted by the caller)."""
    uniform = Distribution({c: 1.0 / len(task.categories) for c in task.categories})
    parsed = ParsedOutput.from_text(raw, task)
    if parsed.answer is None:
        return uniform, True
    total = parsed.answer.total()
    if total <= 0:
        return uniform, True
    return Distribution({c: v / total for c, v in parsed.answer.probs.items()}), False


def evaluate_predictions(predictions: dict[str, str], samples: Sequence[Sample],
                         reference: Optional[dict[str, str]] = None) -> EvalReport:
    """Per-sample metrics plus aggregates.

    Classification: JSD against ground truth (prediction renormalized
    first) and argmax accuracy; win-rate is the fraction of samples
    where the reference beats this run (strictly lower JSD).
    Detection: fraction of ground-truth boxes matched at IoU >= 0.5.
    """
    by_id = {s.id: s for s in samples}
    unknown = sorted(set(predictions) - set(by_id))
    if unknown:
        raise DomainError(f"predictions for unknown sample ids: {unknown[:5]}")
    report = EvalReport()
    classification = all(isinstance(s.task, Classification) for s in samples)

    jsd_values, hits, correct = [], [], 0
    wins = 0
    compared = 0
    for sid, raw in predictions.items():
        sample = by_id[sid]
        if isinstance(sample.task, Classification):
            pred, failed = _normalized_prediction(raw, sample.task)
            if failed:
                report.parse_failures += 1
            value = jsd(sample.annotation, pred)
            report.per_sample[sid] = value
            jsd_values.append(value)
            if pred.argmax(sample.task.categories) == sample.annotation.argmax(
                    sample.task.categories):
                correct += 1
            if reference is not None and sid in reference:
                ref_pred, _ = _normalized_prediction(reference[sid], sample.task)
                ref_value = jsd(sample.annotation, ref_pred)
                compared += 1
                if ref_value < value:
                    wins += 1
        else:
            parsed = ParsedOutput.from_text(raw, sample.task)
            if parsed.answer is None or len(parsed.answer) == 0:
                report.parse_failures += 1
                report.per_sample[sid] = 0.0
                hits.append(0.0)
                continue
            match = hungarian_match(sample.annotation, parsed.answer)
            n_hit = sum(1 for v in match.per_pair_iou if v >= 0.5)
            frac = n_hit / len(sample.annotation)
            report.per_sample[sid] = frac
            hits.append(frac)

    if classification and jsd_values:
        report.mean_jsd = sum(jsd_values) / len(jsd_values)
        report.accuracy = correct / len(jsd_values)
        if reference is not None and compared:
            report.win_rate = wins / compared
    if not classification and hits:
        report.detection_score = sum(hits) / len(hits)
    return report

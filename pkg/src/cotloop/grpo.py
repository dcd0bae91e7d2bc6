"""Group sampling, group-relative advantages, best-of-group retention,
and a tabular toy policy trained against the closed-loop reward.

The toy trainer demonstrates that the reward structure alone drives a
policy from near-random cue selection to full-cue narratives; it uses
plain score-function ascent on group-standardized advantages, with no
KL penalty or ratio clipping (the policy is tabular and freshly
initialized).
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .backends import CueWorld, DEFAULT_TEMPLATE_BANK, synthetic_reason, synthetic_reconstruct
from .domain import Annotation, RewardBreakdown, ScoredRecord
from .errors import DomainError
from .reward import closed_loop_reward

ADV_EPS = 1e-8


def compute_group_advantages(rewards: Sequence[float]) -> list[float]:
    """Group-standardized rewards: (r - mean) / (population std + 1e-8).

    All-equal groups get all-zero advantages.
    """
    g = len(rewards)
    if g < 2:
        raise DomainError(f"advantage groups need at least 2 members, got {g}")
    mean = sum(rewards) / g
    var = sum((r - mean) ** 2 for r in rewards) / g
    if var == 0.0:
        return [0.0] * g
    std = math.sqrt(var)
    return [(r - mean) / (std + ADV_EPS) for r in rewards]


@dataclass(frozen=True)
class GroupMember:
    cot: str
    reconstruction: Optional[Annotation]
    breakdown: RewardBreakdown


@dataclass(frozen=True)
class Group:
    """G scored completions for one sample, with normalized advantages."""

    sample_id: str
    members: tuple[GroupMember, ...]
    advantages: tuple[float, ...]

    @classmethod
    def build(cls, sample_id: str, members: Sequence[GroupMember]) -> "Group":
        rewards = [m.breakdown.composite for m in members]
        return cls(sample_id=sample_id, members=tuple(members),
                   advantages=tuple(compute_group_advantages(rewards)))

    @property
    def rewards(self) -> list[float]:
        return [m.breakdown.composite for m in self.members]


def select_best_of_group(group: Group) -> tuple[int, ScoredRecord]:
    """Highest-reward member; ties break to the lowest index."""
    if not group.members:
        raise DomainError("cannot select from an empty group")
    best = max(range(len(group.members)),
               key=lambda i: (group.members[i].breakdown.composite, -i))
    m = group.members[best]
    record = ScoredRecord(sample_id=group.sample_id, cot=m.cot,
                          reconstruction=m.reconstruction,
                          reward=m.breakdown.composite, breakdown=m.breakdown)
    return best, record


# --- toy policy --------------------------------------------------------------

@dataclass
class ToyPolicy:
    """Tabular softmax policy: per-bucket logits over discrete choices."""

    logits: dict[str, dict[str, float]]
    learning_rate: float = 0.5

    def probs(self, bucket: str) -> dict[str, float]:
        ls = self.logits[bucket]
        m = max(ls.values())
        exps = {c: math.exp(v - m) for c, v in ls.items()}
        z = sum(exps.values())
        return {c: e / z for c, e in exps.items()}

    def sample_choices(self, bucket: str, rng: random.Random, k: int) -> list[str]:
        probs = self.probs(bucket)
        choices = list(probs)
        return rng.choices(choices, weights=[probs[c] for c in choices], k=k)

    def update(self, bucket: str, chosen: Sequence[str],
               advantages: Sequence[float]) -> None:
        """Score-function ascent on the group surrogate.

        For each member: raise the chosen logit by lr*a*(1-p), lower all
        others by lr*a*p, using pre-update probabilities.
        """
        if len(chosen) != len(advantages):
            raise DomainError("chosen/advantages length mismatch")
        ls = self.logits[bucket]
        for c in chosen:
            if c not in ls:
                raise DomainError(f"invalid choice id {c!r} for bucket {bucket!r}")
        probs = self.probs(bucket)
        lr = self.learning_rate
        grad = {c: 0.0 for c in ls}
        for c, a in zip(chosen, advantages):
            for k in grad:
                grad[k] += lr * a * ((1.0 if k == c else 0.0) - probs[k])
        for k, g in grad.items():
            ls[k] += g
            if not math.isfinite(ls[k]):
                raise DomainError("policy logits diverged")


def build_toy_policy(world: CueWorld, distractors: int = 3,
                     bank: Sequence[str] = DEFAULT_TEMPLATE_BANK,
                     learning_rate: float = 0.5) -> ToyPolicy:
    """Factored buckets per sample: one template bucket plus one
    include/exclude bucket per candidate cue (true cues + seeded
    distractors). A policy draw assembles template + cue subset from
    the per-bucket choices."""
    logits: dict[str, dict[str, float]] = {}
    for sample in world.samples:
        pool = world.distractor_pool(sample, distractors)
        logits[f"{sample.id}|template"] = {f"t{t}": 0.0 for t in range(len(bank))}
        for cue in pool:
            logits[f"{sample.id}|cue|{cue}"] = {"in": 0.0, "out": 0.0}
    return ToyPolicy(logits=logits, learning_rate=learning_rate)


def _sample_buckets(policy: ToyPolicy, sample_id: str) -> list[str]:
    prefix = f"{sample_id}|"
    return [b for b in policy.logits if b.startswith(prefix)]


@dataclass
class ToyTrainResult:
    curve: list[float] = field(default_factory=list)
    policy: Optional[ToyPolicy] = None


def train_toy_policy(world: CueWorld, steps: int, group_size: int, seed: int,
                     bank: Sequence[str] = DEFAULT_TEMPLATE_BANK,
                     distractors: int = 3, learning_rate: float = 0.5,
                     minibatch_size: Optional[int] = None,
                     policy: Optional[ToyPolicy] = None) -> ToyTrainResult:
    """Train the toy policy and return the per-step mean best-of-group
    reward curve. Fully deterministic under a fixed seed.

    By default every step visits the whole dataset (full batch), which
    keeps the per-step mean reward low-variance; pass a smaller
    minibatch_size to trade smoothness for speed.
    """
    if steps < 1:
        raise DomainError("steps must be >= 1")
    if group_size < 2:
        raise DomainError("group size must be >= 2")
    if policy is None:
        policy = build_toy_policy(world, distractors=distractors, bank=bank,
                                  learning_rate=learning_rate)
    # String seeds hash deterministically across processes (unlike tuples).
    rng = random.Random(f"toy-train|{seed}")
    samples = list(world.samples)
    result = ToyTrainResult(policy=policy)
    reward_cache: dict[tuple, RewardBreakdown] = {}
    batch_size = len(samples) if minibatch_size is None else min(
        minibatch_size, len(samples))
    for _ in range(steps):
        batch = rng.sample(samples, batch_size)
        step_best: list[float] = []
        for sample in batch:
            buckets = _sample_buckets(policy, sample.id)
            draws: list[dict[str, str]] = []
            members = []
            for _g in range(group_size):
                draw = {b: policy.sample_choices(b, rng, 1)[0] for b in buckets}
                draws.append(draw)
                template_id = int(draw[f"{sample.id}|template"][1:])
                subset = sorted(b.rsplit("|", 1)[1] for b, c in draw.items()
                                if c == "in")
                key = (sample.id, template_id, tuple(subset))
                breakdown = reward_cache.get(key)
                if breakdown is None:
                    cot = synthetic_reason(sample, template_id, subset, bank)
                    recon_text = synthetic_reconstruct(world, sample.image_ref, cot)
                    breakdown = closed_loop_reward(sample.as_sample(), cot, recon_text)
                    reward_cache[key] = breakdown
                    cot_text = cot
                else:
                    cot_text = synthetic_reason(sample, template_id, subset, bank)
                members.append(GroupMember(cot=cot_text, reconstruction=None,
                                           breakdown=breakdown))
            group = Group.build(sample.id, members)
            for b in buckets:
                policy.update(b, [d[b] for d in draws], group.advantages)
            step_best.append(max(group.rewards))
        result.curve.append(sum(step_best) / len(step_best))
    return result


def smooth_curve(curve: Sequence[float], window: int = 20) -> list[float]:
    """Trailing moving average used for convergence checks."""
    out = []
    for i in range(len(curve)):
        lo = max(0, i - window + 1)
        seg = curve[lo:i + 1]
        # Exactly-rounded sum: plain sum() rounds each partial, which can
        # make means of near-identical windows differ by 1 ULP.
        out.append(math.fsum(seg) / len(seg))
    return out


def export_curve(curve: Sequence[float], path: str) -> None:
    """Two-column text file (step, mean_reward) for plotting."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("step\tmean_reward\n")
        for i, v in enumerate(curve, start=1):
            f.write(f"{i}\t{v:.6f}\n")

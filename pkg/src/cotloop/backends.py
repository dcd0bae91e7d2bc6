"""Text-generation providers behind one `generate` interface.

Three kinds: a remote chat-completion service (retries + backoff), a
scripted mock for tests, and a synthetic cue-world that closes the
generate/reconstruct loop deterministically without any vision model.
Images in the cue world are hidden sets of cue tags; a fixed rule maps
cue sets to annotations, so reconstruction quality is exactly "which
cues did the CoT mention".
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import re
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import requests

from .domain import Annotation, Box, BoxSet, Classification, Detection, Distribution, Sample
from .errors import AuthFailure, MockMiss, RemoteUnavailable, TemplateError, Timeout
from .render import render_annotation


@dataclass(frozen=True)
class GenerationRequest:
    sample_id: str
    image_ref: str
    prompt: str
    temperature: float = 0.7
    max_tokens: int = 512
    seed: Optional[int] = None

    def __post_init__(self):
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


class MockBackend:
    """Pure prompt -> response lookup for scripted tests."""

    def __init__(self, responses: dict[str, str]):
        self._responses = dict(responses)

    def generate(self, request: GenerationRequest) -> str:
        try:
            return self._responses[request.prompt]
        except KeyError:
            raise MockMiss(f"no canned response for prompt: {request.prompt[:80]!r}")


class RemoteBackend:
    """Chat-completion client with bounded concurrency and retry/backoff.

    The credential is read from the environment variable named at
    construction, never from config files. Every request is logged
    (prompt hash, latency, token counts) to the run ledger when a path
    is given.
    """

    def __init__(self, endpoint: str, model: str, auth_env: str = "COTLOOP_API_KEY",
                 timeout: float = 120.0, max_attempts: int = 3,
                 backoff_base: float = 1.0, max_in_flight: int = 4,
                 ledger_path: Optional[str] = None,
                 session: Optional[requests.Session] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint
        self.model = model
        self.auth_env = auth_env
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.ledger_path = ledger_path
        self._session = session or requests.Session()
        self._sleep = sleep
        self._gate = threading.Semaphore(max_in_flight)
        self._ledger_lock = threading.Lock()

    def _headers(self) -> dict[str, str]:
        import os
        key = os.environ.get(self.auth_env)
        if not key:
            raise AuthFailure(f"credential env var {self.auth_env} is not set")
        return {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}

    def _body(self, request: GenerationRequest) -> dict:
        content: list[dict] = []
        if request.image_ref:
            content.append({"type": "image_url", "image_url": {"url": request.image_ref}})
        content.append({"type": "text", "text": request.prompt})
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        return body

    def _log(self, request: GenerationRequest, latency: float, usage: dict) -> None:
        if not self.ledger_path:
            return
        entry = {
            "prompt_sha256": hashlib.sha256(request.prompt.encode()).hexdigest(),
            "sample_id": request.sample_id,
            "latency_s": round(latency, 4),
            "usage": usage,
        }
        with self._ledger_lock, open(self.ledger_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
            f.flush()

    def generate(self, request: GenerationRequest) -> str:
        headers = self._headers()
        body = self._body(request)
        last_error: Exception = RemoteUnavailable("no attempt made")
        with self._gate:
            for attempt in range(self.max_attempts):
                if attempt:
                    self._sleep(self.backoff_base * 2 ** (attempt - 1))
                start = time.monotonic()
                try:
                    resp = self._session.post(self.endpoint, json=body,
                                              headers=headers, timeout=self.timeout)
                except requests.Timeout as e:
                    last_error = Timeout(str(e))
                    continue
                except requests.RequestException as e:
                    last_error = RemoteUnavailable(str(e))
                    continue
                if resp.status_code in (401, 403):
                    raise AuthFailure(f"endpoint rejected credential: {resp.status_code}")
                if resp.status_code >= 400:
                    last_error = RemoteUnavailable(f"HTTP {resp.status_code}")
                    continue
                payload = resp.json()
                self._log(request, time.monotonic() - start, payload.get("usage", {}))
                return payload["choices"][0]["message"]["content"]
        raise last_error


# --- synthetic cue world -----------------------------------------------------

_ADJECTIVES = (
    "amber", "mossy", "gilded", "weathered", "crimson", "silvered", "dusky",
    "braided", "speckled", "hollow", "velvet", "rusted", "frosted", "woven",
    "sunlit", "shadowed", "polished", "tangled", "painted", "carved",
)
_NOUNS = (
    "lantern", "fence", "archway", "banner", "kettle", "ladder", "awning",
    "satchel", "mirror", "bellows", "anvil", "quilt", "orchard", "chimney",
    "paddle", "garland", "spindle", "trellis", "goblet", "plinth",
)


def _cue_vocab(size: int, rng: random.Random) -> tuple[str, ...]:
    pairs = [(a, n) for a in _ADJECTIVES for n in _NOUNS]
    rng.shuffle(pairs)
    return tuple(f"{a}-{n}" for a, n in pairs[:size])


@dataclass(frozen=True)
class SyntheticSample:
    """A sample whose 'image' is a hidden cue-tag set."""

    id: str
    cue_set: frozenset[str]
    task: object
    annotation: Annotation

    @property
    def image_ref(self) -> str:
        return f"synthetic://{self.id}"

    def as_sample(self) -> Sample:
        target = None
        if isinstance(self.task, Detection):
            target = "the region marked by " + " and ".join(sorted(self.cue_set))
        return Sample(id=self.id, image_ref=self.image_ref, task=self.task,
                      annotation=self.annotation, target_desc=target)


DEFAULT_TEMPLATE_BANK = (
    "The scene is quietly dominated by {cues}; their arrangement and texture "
    "set the overall character of the picture and justify the annotation.",
    "Close inspection reveals {cues}, whose colors and placement carry the "
    "weight of the interpretation offered here.",
)


class CueWorld:
    """Deterministic stand-in environment closing the loop at desk scale.

    The world rule is a pure function cue_set -> annotation:
    classification assigns each cue its own category and returns the
    normalized weight sum; detection assigns each cue a fixed box.
    """

    def __init__(self, kind: str = "classification", num_samples: int = 50,
                 cues_per_sample: int = 4, vocab_size: int = 24, seed: int = 0,
                 image_size: float = 1200.0):
        if cues_per_sample > vocab_size:
            raise ValueError("cues_per_sample cannot exceed vocab_size")
        self.kind = kind
        self.seed = seed
        self.cues_per_sample = cues_per_sample
        # String seeds hash deterministically across processes (unlike tuples).
        rng = random.Random(f"cue-world|{seed}")
        self.vocab = _cue_vocab(vocab_size, rng)
        self._cue_re = {
            cue: re.compile(rf"(?<![\w-]){re.escape(cue)}(?![\w-])") for cue in self.vocab
        }
        if kind == "classification":
            self.task = Classification(categories=self.vocab)
            self.cue_box = {}
        elif kind == "detection":
            self.task = Detection(image_width=image_size, image_height=image_size)
            per_row = math.ceil(math.sqrt(len(self.vocab)))
            spacing = image_size / per_row
            side = 0.9 * spacing
            self.cue_box = {
                cue: Box(
                    (i % per_row) * spacing,
                    (i // per_row) * spacing,
                    (i % per_row) * spacing + side,
                    (i // per_row) * spacing + side,
                )
                for i, cue in enumerate(self.vocab)
            }
        else:
            raise ValueError(f"unknown world kind: {kind!r}")
        self.samples = tuple(
            self._make_sample(i, rng) for i in range(num_samples)
        )
        self.by_id = {s.id: s for s in self.samples}

    def _make_sample(self, i: int, rng: random.Random) -> SyntheticSample:
        cues = frozenset(rng.sample(self.vocab, self.cues_per_sample))
        return SyntheticSample(id=f"syn-{i:04d}", cue_set=cues, task=self.task,
                               annotation=self.rule(cues))

    def rule(self, cues) -> Annotation:
        """World rule mapping a cue set to its annotation."""
        if self.kind == "classification":
            cues = set(cues)
            if not cues:
                # Empty evidence reads as total uncertainty.
                n = len(self.vocab)
                return Distribution({c: 1.0 / n for c in self.vocab})
            w = 1.0 / len(cues)
            return Distribution({c: (w if c in cues else 0.0) for c in self.vocab})
        boxes = tuple(self.cue_box[c] for c in sorted(cues))
        if not boxes:
            boxes = (Box(0, 0, 0, 0),)
        return BoxSet(boxes)

    def extract_cues(self, text: str) -> frozenset[str]:
        return frozenset(c for c, pat in self._cue_re.items() if pat.search(text))

    def distractor_pool(self, sample: SyntheticSample, extra: int) -> tuple[str, ...]:
        """Per-sample candidate cues: the true set plus `extra` seeded distractors."""
        rng = random.Random(f"pool|{self.seed}|{sample.id}")
        others = [c for c in self.vocab if c not in sample.cue_set]
        return tuple(sorted(sample.cue_set)) + tuple(rng.sample(others, extra))


def synthetic_reason(sample: SyntheticSample, template_id: int,
                     cue_subset: Sequence[str],
                     bank: Sequence[str] = DEFAULT_TEMPLATE_BANK) -> str:
    """Render a leak-free narrative CoT naming exactly the chosen cue tags."""
    if not 0 <= template_id < len(bank):
        raise TemplateError(f"unknown template id: {template_id}")
    subset = sorted(cue_subset)
    if subset:
        phrase = " and ".join(f"the {c}" for c in subset)
    else:
        phrase = "an otherwise unremarkable backdrop"
    return bank[template_id].replace("{cues}", phrase)


def synthetic_reconstruct(world: CueWorld, image_ref: str, cot: str) -> str:
    """Apply the world rule to the cues mentioned in a CoT; render as an answer string."""
    cues = world.extract_cues(cot)
    annotation = world.rule(cues)
    return f"<answer>{render_annotation(annotation, world.task)}</answer>"


def _cot_anchors(task_name: str) -> tuple[str, str]:
    """Literal text surrounding the {CoTs} slot in the reconstruction template."""
    from .textproto import load_template
    body = load_template(task_name, "reconstruction").body
    pre, _, post = body.partition("{CoTs}")
    pre = pre[pre.rfind("}") + 1:]
    brace = post.find("{")
    if brace >= 0:
        post = post[:brace]
    return pre, post


def extract_cot_from_prompt(prompt: str, task_name: str) -> str:
    """Recover the embedded CoT from a rendered reconstruction prompt.

    The prompt body mentions every category name, so cue scanning must
    be restricted to the CoT segment. Falls back to the whole prompt
    when the anchors are absent (direct CoT input).
    """
    pre, post = _cot_anchors(task_name)
    start = prompt.find(pre)
    if start < 0:
        return prompt
    start += len(pre)
    end = prompt.rfind(post) if post else len(prompt)
    if end <= start:
        return prompt
    return prompt[start:end]


class SyntheticReasonBackend:
    """Reasoning-stage provider over a cue world.

    `fidelity` is the per-cue probability that a true cue is mentioned;
    1.0 is the scripted full-cue policy with closed-loop reward 1.
    """

    def __init__(self, world: CueWorld, fidelity: float = 1.0,
                 bank: Sequence[str] = DEFAULT_TEMPLATE_BANK):
        self.world = world
        self.fidelity = fidelity
        self.bank = tuple(bank)

    def generate(self, request: GenerationRequest) -> str:
        sample = self.world.by_id[request.sample_id]
        rng = random.Random(f"reason|{self.world.seed}|{request.sample_id}|{request.seed}")
        if self.fidelity >= 1.0:
            subset = sorted(sample.cue_set)
        else:
            subset = [c for c in sorted(sample.cue_set) if rng.random() < self.fidelity]
        template_id = rng.randrange(len(self.bank))
        return synthetic_reason(sample, template_id, subset, self.bank)


class SyntheticReconBackend:
    """Reconstruction-stage provider: reads cue mentions out of the CoT.

    The rendered reconstruction prompt also lists every category name,
    so the CoT segment is first isolated via the template's surrounding
    literal text before cue scanning.
    """

    def __init__(self, world: CueWorld):
        self.world = world

    def generate(self, request: GenerationRequest) -> str:
        cot = extract_cot_from_prompt(request.prompt, self.world.kind)
        return synthetic_reconstruct(self.world, request.image_ref, cot)


class SyntheticR1Backend:
    """Think-answer provider for reward evaluation at a chosen cue fidelity."""

    def __init__(self, world: CueWorld, fidelity: float = 1.0,
                 bank: Sequence[str] = DEFAULT_TEMPLATE_BANK):
        self.world = world
        self.fidelity = fidelity
        self.bank = tuple(bank)

    def generate(self, request: GenerationRequest) -> str:
        sample = self.world.by_id[request.sample_id]
        rng = random.Random(f"r1|{self.world.seed}|{request.sample_id}|{request.seed}")
        if self.fidelity >= 1.0:
            subset = sorted(sample.cue_set)
        else:
            subset = [c for c in sorted(sample.cue_set) if rng.random() < self.fidelity]
        template_id = rng.randrange(len(self.bank))
        think = synthetic_reason(sample, template_id, subset, self.bank)
        annotation = self.world.rule(subset)
        return f"<think>{think}</think><answer>{render_annotation(annotation, self.world.task)}</answer>"

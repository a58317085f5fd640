"""Instruction rectification and contrastive negatives through a VLM client.

Wire contract for every client call::

    request  = {"model_id", "images": [base64, ...], "prompt",
                "max_response_tokens", "temperature"}
    response = {"sections": {...}, "usage": {"prompt_tokens", "completion_tokens"}}

Rectification responses carry ``layout``, ``local_attributes``,
``style_details`` and ``summary`` sections. Negative-generation responses carry
``negatives``: a list of ``{"text", "attribute"}`` objects.
"""

from __future__ import annotations

import base64
import difflib
import hashlib
import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

from .denoiser import MAX_TOKENS
from .exceptions import (
    BudgetViolationError,
    ClientError,
    InsufficientNegativesError,
    InvalidRangeError,
    MalformedResponseError,
    TransportError,
)

log = logging.getLogger(__name__)

ATTRIBUTES = ("quantity", "location", "object")
RECTIFY_SECTIONS = ("layout", "local_attributes", "style_details", "summary")
SUMMARY_BUDGET = MAX_TOKENS - 2  # room for BOS/EOS in the text encoder
DEFAULT_PRICES = {"default": 0.02}
CREDENTIALS_ENV = "INSTRUCTEDIT_VLM_API_KEY"
ENDPOINT_ENV = "INSTRUCTEDIT_VLM_ENDPOINT"

TASK_RECTIFY = "describe-differences"
TASK_SUMMARIZE = "summarize"
TASK_NEGATIVES = "contrastive-instructions"

_PUNCT = re.compile(r"[^\w\s]")


def text_tokens(text: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


def count_tokens(text: str) -> int:
    return len(text_tokens(text))


@dataclass(frozen=True)
class VlmRequest:
    images: tuple[bytes, ...]
    prompt: str
    max_response_tokens: int = 512
    temperature: float = 0.0

    def __post_init__(self):
        if not self.images or len(self.images) > 2:
            raise InvalidRangeError("a request carries one or two images")
        if not self.prompt:
            raise InvalidRangeError("prompt must be non-empty")

    def to_wire(self, model_id: str) -> dict:
        return {
            "model_id": model_id,
            "images": [base64.b64encode(b).decode("ascii") for b in self.images],
            "prompt": self.prompt,
            "max_response_tokens": self.max_response_tokens,
            "temperature": self.temperature,
        }

    def cache_key(self, model_id: str) -> str:
        h = hashlib.sha256()
        for img in self.images:
            h.update(hashlib.sha256(img).digest())
        h.update(self.prompt.encode("utf-8"))
        h.update(model_id.encode("utf-8"))
        h.update(repr(float(self.temperature)).encode("ascii"))
        return h.hexdigest()


class VlmClient(Protocol):
    model_id: str

    def complete(self, request: dict) -> dict: ...


def task_of(prompt: str) -> str:
    first = prompt.splitlines()[0] if prompt else ""
    return first.removeprefix("Task:").strip()


def pair_digest(images) -> str:
    h = hashlib.sha256()
    for img in images:
        h.update(hashlib.sha256(img).digest())
    return h.hexdigest()


class FixtureVlmClient:
    """Replays fixture responses offline.

    Fixtures live in ``responses.jsonl`` lines of
    ``{"pair": <pair digest>, "task": <task>, "responses": [response, ...]}``.
    Repeated requests for the same pair and task walk the list and stick on
    its last entry.
    """

    def __init__(self, fixtures=None, model_id: str = "mock-vlm"):
        self.model_id = model_id
        self.calls = 0
        self._lock = threading.Lock()
        self._seen: Counter = Counter()
        self._table: dict[tuple[str, str], list[dict]] = {}
        if fixtures is not None:
            path = Path(fixtures)
            if path.is_dir():
                path = path / "responses.jsonl"
            try:
                lines = path.read_text(encoding="utf-8").splitlines()
            except OSError as exc:
                raise ClientError(f"cannot read fixtures {path}: {exc}") from exc
            for line in lines:
                if line.strip():
                    self.add(**json.loads(line))

    def add(self, pair: str, task: str, responses: list[dict]):
        self._table[(pair, task)] = list(responses)

    def complete(self, request: dict) -> dict:
        images = [base64.b64decode(s) for s in request["images"]]
        key = (pair_digest(images), task_of(request["prompt"]))
        with self._lock:
            self.calls += 1
            if key not in self._table:
                raise TransportError(f"no fixture for task {key[1]!r}")
            seq = self._table[key]
            idx = min(self._seen[key], len(seq) - 1)
            self._seen[key] += 1
        return json.loads(json.dumps(seq[idx]))


class HttpVlmClient:
    """POSTs the wire request as JSON to ``endpoint``; the API key comes from the
    environment and is never logged."""

    def __init__(self, endpoint: str, model_id: str, api_key: str, timeout: float = 60.0):
        self.endpoint = endpoint
        self.model_id = model_id
        self._api_key = api_key
        self.timeout = timeout

    @classmethod
    def from_env(cls, model_id: str) -> "HttpVlmClient":
        key = os.environ.get(CREDENTIALS_ENV)
        endpoint = os.environ.get(ENDPOINT_ENV)
        if not key or not endpoint:
            raise ClientError(
                f"live client needs {CREDENTIALS_ENV} and {ENDPOINT_ENV} set "
                "(or pass --mock-vlm)"
            )
        return cls(endpoint, model_id, key)

    def __repr__(self):
        return f"HttpVlmClient(endpoint={self.endpoint!r}, model_id={self.model_id!r})"

    def complete(self, request: dict) -> dict:
        body = json.dumps(request).encode("utf-8")
        req = urllib.request.Request(self.endpoint, data=body, method="POST", headers={
            "Content-Type": "application/json",
            "Authorization": f"Bearer {self._api_key}",
        })
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise TransportError(f"VLM request failed: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise MalformedResponseError("VLM response is not JSON") from exc


def write_fixtures(path, entries) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    out = path / "responses.jsonl"
    with open(out, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return out


class ResponseCache:
    """Content-addressed, append-only response store."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._data: dict[str, dict] = {}
        if self.path and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._data[rec["key"]] = rec["response"]

    def get(self, key):
        with self._lock:
            return self._data.get(key)

    def put(self, key, response):
        with self._lock:
            if key in self._data:
                return
            self._data[key] = response
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "response": response},
                                        sort_keys=True) + "\n")

    def __len__(self):
        return len(self._data)


class CachedClient:
    """Cache + retry with exponential backoff in front of a raw client."""

    def __init__(self, client, cache: ResponseCache | None = None,
                 max_attempts: int = 3, backoff: float = 0.5, sleep=time.sleep):
        self.client = client
        self.model_id = client.model_id
        self.cache = cache if cache is not None else ResponseCache()
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.sleep = sleep

    def send(self, request: VlmRequest) -> dict:
        key = request.cache_key(self.model_id)
        hit = self.cache.get(key)
        if hit is not None:
            return json.loads(json.dumps(hit))
        wire = request.to_wire(self.model_id)
        for attempt in range(self.max_attempts):
            try:
                response = self.client.complete(wire)
                break
            except TransportError:
                if attempt == self.max_attempts - 1:
                    raise
                self.sleep(self.backoff * 2 ** attempt)
        self.cache.put(key, response)
        return response


def as_cached(client) -> CachedClient:
    return client if isinstance(client, CachedClient) else CachedClient(client)


@dataclass
class RectificationRecord:
    layout_diff: str
    local_attr_diff: str
    style_detail_diff: str
    summarized_instruction: str
    token_count: int
    cost_usd: float
    model_id: str

    def __post_init__(self):
        if self.token_count > MAX_TOKENS:
            raise BudgetViolationError("summary exceeds 77 tokens")
        if (self.layout_diff or self.local_attr_diff or self.style_detail_diff) \
                and not self.summarized_instruction:
            raise MalformedResponseError("differences present but summary empty")

    def to_dict(self):
        return asdict(self)


@dataclass
class NegativeSet:
    positive: str
    negatives: list[str]
    attributes: list[str]

    def __post_init__(self):
        if len(self.negatives) != len(self.attributes):
            raise InvalidRangeError("one attribute per negative")
        bad = [a for a in self.attributes if a not in ATTRIBUTES]
        if bad:
            raise InvalidRangeError(f"unknown attributes {bad}")

    def check(self, max_diff_tokens: int = 5) -> list[str]:
        """Invariant violations; empty when the set is well formed."""
        problems = []
        if len(set(self.negatives)) != len(self.negatives):
            problems.append("duplicate negatives")
        for neg in self.negatives:
            ok, reason = validate_negative(self.positive, neg, max_diff_tokens)
            if not ok:
                problems.append(f"{neg!r}: {reason}")
        return problems

    def to_dict(self):
        return asdict(self)


def build_rectify_prompt(pair_meta: dict | None = None,
                         budget: int = SUMMARY_BUDGET) -> str:
    meta = pair_meta or {}
    lines = [
        f"Task: {TASK_RECTIFY}",
        "You are given two images: the original image followed by the edited image.",
        "Describe how the edited image differs from the original under each heading below.",
        "Write 'none' under a heading when nothing changed in that respect.",
        "",
        "Overall Image Layout:",
        "  changes to the major objects, characters and background.",
        "Local Object Attributes:",
        "  changes in texture, motion, pose and shape of the major objects, "
        "characters and background.",
        "Image Details / Style Change:",
        "  fine detail changes and any change of overall style (one combined section).",
        "",
        "Summarized Instruction:",
        f"  a single editing instruction of no more than {budget} tokens that turns "
        "the original image into the edited image.",
    ]
    if meta.get("raw_instruction"):
        lines += ["", f"Original (possibly inaccurate) instruction: {meta['raw_instruction']}"]
    return "\n".join(lines)


def build_summarize_prompt(text: str, budget: int = SUMMARY_BUDGET, attempt: int = 1) -> str:
    # attempt and length are part of the prompt so a retry is never a cache hit
    return "\n".join([
        f"Task: {TASK_SUMMARIZE}",
        f"Attempt {attempt}: the instruction below has {count_tokens(text)} tokens.",
        f"Rewrite it in no more than {budget} tokens, "
        "keeping every visual change it describes:",
        text,
    ])


def build_negatives_prompt(positive: str, k: int, max_diff_tokens: int,
                           rejected: list[str] = ()) -> str:
    lines = [
        f"Task: {TASK_NEGATIVES}",
        "Given the original image, the edited image and the correct editing instruction,",
        f"write {k} wrong instructions. Each one changes exactly one attribute of the",
        "correct instruction: a quantity, a spatial location, or an object.",
        f"Keep the rest of the text unchanged; change at most {max_diff_tokens} words.",
        "Return each as {text, attribute} with attribute in quantity|location|object.",
        "",
        f"Correct instruction: {positive}",
    ]
    if rejected:
        lines.append("Do not repeat these rejected candidates: " + " | ".join(rejected))
    return "\n".join(lines)


def _sections(response: dict, required) -> dict:
    sections = response.get("sections") if isinstance(response, dict) else None
    if not isinstance(sections, dict):
        raise MalformedResponseError("response has no sections")
    missing = [s for s in required if s not in sections]
    if missing:
        raise MalformedResponseError(f"response missing sections {missing}")
    return sections


def rectify_instruction(pair, client, max_retries: int = 2,
                        budget: int = SUMMARY_BUDGET, prices=None,
                        pair_meta=None) -> RectificationRecord:
    """``pair`` is ``(original_png_bytes, edited_png_bytes)``."""
    cclient = as_cached(client)
    images = tuple(pair)
    request = VlmRequest(images, build_rectify_prompt(pair_meta, budget))
    sections = _sections(cclient.send(request), RECTIFY_SECTIONS)
    summary = str(sections["summary"]).strip()
    retries = 0
    while count_tokens(summary) > budget:
        if retries >= max_retries:
            raise BudgetViolationError(
                f"summary still {count_tokens(summary)} tokens after {retries} retries"
            )
        retries += 1
        follow = VlmRequest(images, build_summarize_prompt(summary, budget, retries))
        summary = str(_sections(cclient.send(follow), ("summary",))["summary"]).strip()
    prices = prices or DEFAULT_PRICES
    return RectificationRecord(
        layout_diff=str(sections["layout"]),
        local_attr_diff=str(sections["local_attributes"]),
        style_detail_diff=str(sections["style_details"]),
        summarized_instruction=summary,
        token_count=count_tokens(summary),
        cost_usd=float(prices.get(cclient.model_id, prices["default"])),
        model_id=cclient.model_id,
    )


def _aligned_substitutions(a: list[str], b: list[str]) -> int:
    ops = difflib.SequenceMatcher(a=a, b=b, autojunk=False).get_opcodes()
    return sum(max(i2 - i1, j2 - j1) for tag, i1, i2, j1, j2 in ops if tag != "equal")


def validate_negative(positive: str, candidate: str,
                      max_diff_tokens: int = 5) -> tuple[bool, str]:
    a, b = text_tokens(positive), text_tokens(candidate)
    if not a or not b:
        return False, "empty"
    if a == b:
        return False, "identical"
    ca, cb = Counter(a), Counter(b)
    sym = sum(((ca - cb) + (cb - ca)).values())
    if sym == 0:
        return False, "no-token-change"
    if sym > 2 * max_diff_tokens or _aligned_substitutions(a, b) > max_diff_tokens:
        return False, "diff-too-large"
    return True, "ok"


def generate_negatives(pair, rectified: str, client, k: int = 3,
                       max_diff_tokens: int = 5, max_retries: int = 2) -> NegativeSet:
    if not rectified.strip():
        raise InvalidRangeError("rectified instruction must be non-empty")
    if k < 1:
        raise InvalidRangeError("k must be >= 1")
    cclient = as_cached(client)
    images = tuple(pair)
    accepted: list[str] = []
    attrs: list[str] = []
    rejected: list[str] = []
    seen = {" ".join(text_tokens(rectified))}
    for _ in range(max_retries + 1):
        prompt = build_negatives_prompt(rectified, k - len(accepted), max_diff_tokens,
                                        rejected)
        sections = _sections(cclient.send(VlmRequest(images, prompt)), ("negatives",))
        candidates = sections["negatives"]
        if not isinstance(candidates, list):
            raise MalformedResponseError("negatives must be a list")
        for cand in candidates:
            if len(accepted) == k:
                break
            text = str(cand.get("text", "")).strip() if isinstance(cand, dict) else ""
            attr = cand.get("attribute") if isinstance(cand, dict) else None
            norm = " ".join(text_tokens(text))
            ok, reason = validate_negative(rectified, text, max_diff_tokens)
            if ok and attr not in ATTRIBUTES:
                ok, reason = False, "bad-attribute"
            if ok and norm in seen:
                ok, reason = False, "duplicate"
            if not ok:
                log.debug("rejected negative %r: %s", text, reason)
                rejected.append(text)
                continue
            seen.add(norm)
            accepted.append(text)
            attrs.append(attr)
        if len(accepted) == k:
            return NegativeSet(rectified, accepted, attrs)
    raise InsufficientNegativesError(
        f"only {len(accepted)} of {k} valid negatives after {max_retries} retries"
    )


@dataclass
class CallCounter:
    """Wraps a client and counts calls per task; handy in tests."""

    client: object
    counts: Counter = field(default_factory=Counter)

    def __post_init__(self):
        self.model_id = self.client.model_id

    def complete(self, request):
        self.counts[task_of(request["prompt"])] += 1
        return self.client.complete(request)

    @property
    def total(self):
        return sum(self.counts.values())

"""Judged evaluation (following / preserving / quality) and classic metrics.

Judge wire contract: the request follows the VLM request shape (original and
edited image, prompt carrying the instruction). The response is::

    {"following": {"pass": bool, "score": float},
     "preserving": {"pass": bool, "score": float},
     "quality": {"pass": bool, "score": float}}

Scores lie in [0, 5]. Pass flags and scores are aggregated independently.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import EmptyInputError, JudgeParseError, ShapeMismatchError, TransportError
from .forge import VlmRequest
from .images import check_image, decode_png, encode_png, resize
from .synth import BACKGROUND, PALETTE

AXES = ("following", "preserving", "quality")


@dataclass
class JudgeScore:
    following_pass: bool
    following_score: float
    preserving_pass: bool
    preserving_score: float
    quality_pass: bool
    quality_score: float
    judge_model_id: str = "unknown"
    raw_response: str = ""

    def __post_init__(self):
        for axis in AXES:
            s = getattr(self, f"{axis}_score")
            if not (isinstance(s, (int, float)) and math.isfinite(s) and 0.0 <= s <= 5.0):
                raise JudgeParseError(f"{axis} score {s!r} outside [0, 5]")

    def to_dict(self):
        return asdict(self)


@dataclass
class MetricReport:
    n: int
    acc: dict[str, float]
    score: dict[str, float]
    overall_acc: float
    overall_score: float
    classic: dict[str, float] = field(default_factory=dict)
    name: str = ""

    def rounded(self) -> dict:
        return {
            "acc": {k: round(v, 1) for k, v in self.acc.items()},
            "score": {k: round(v, 2) for k, v in self.score.items()},
            "overall_acc": round(self.overall_acc, 1),
            "overall_score": round(self.overall_score, 2),
        }

    def to_dict(self):
        return asdict(self)

    def table(self) -> str:
        return render_table([self])


def build_judge_prompt(instruction: str) -> str:
    return "\n".join([
        "Task: judge-edit",
        "The first image is the original, the second is the edited result.",
        f"Editing instruction: {instruction}",
        "For each of following (the edit does what the instruction asks), preserving",
        "(content outside the edit is intact) and quality (no visual degradation)",
        "return pass (true/false) and a score from 0 to 5.",
    ])


def parse_judge_response(response, model_id: str = "unknown") -> JudgeScore:
    if not isinstance(response, dict):
        raise JudgeParseError("judge response is not an object")
    kwargs = {}
    for axis in AXES:
        entry = response.get(axis)
        if not isinstance(entry, dict) or "pass" not in entry or "score" not in entry:
            raise JudgeParseError(f"judge response missing {axis}")
        if not isinstance(entry["pass"], bool):
            raise JudgeParseError(f"{axis}.pass must be boolean")
        try:
            score = float(entry["score"])
        except (TypeError, ValueError) as exc:
            raise JudgeParseError(f"{axis}.score is not a number") from exc
        kwargs[f"{axis}_pass"] = entry["pass"]
        kwargs[f"{axis}_score"] = score
    return JudgeScore(**kwargs, judge_model_id=model_id,
                      raw_response=json.dumps(response, sort_keys=True))


def judge_edit(original: np.ndarray, edited: np.ndarray, instruction: str, client,
               max_retries: int = 2) -> JudgeScore:
    request = VlmRequest((encode_png(original), encode_png(edited)),
                         build_judge_prompt(instruction)).to_wire(client.model_id)
    last = None
    for _ in range(max_retries + 1):
        try:
            return parse_judge_response(client.complete(request), client.model_id)
        except (JudgeParseError, TransportError) as exc:
            last = exc
    raise last


def aggregate_scores(scores: list[JudgeScore], name: str = "",
                     weights=None) -> MetricReport:
    if not scores:
        raise EmptyInputError("no scores to aggregate")
    w = np.ones(len(scores)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(scores),) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative, one per score")
    total = float(w.sum())
    acc = {a: 100.0 * float(np.dot(w, [float(getattr(s, f"{a}_pass")) for s in scores]))
           / total for a in AXES}
    score = {a: float(np.dot(w, [getattr(s, f"{a}_score") for s in scores])) / total
             for a in AXES}
    return MetricReport(
        n=len(scores), acc=acc, score=score,
        overall_acc=sum(acc.values()) / 3.0,
        overall_score=sum(score.values()) / 3.0,
        name=name,
    )


def overall(values) -> float:
    values = list(values)
    return sum(values) / len(values)


def render_table(reports: list[MetricReport]) -> str:
    head = (f"{'Method':<24}" + "".join(f"{a.title():>18}" for a in AXES)
            + f"{'Overall':>18}")
    sub = f"{'':<24}" + f"{'Acc':>9}{'Score':>9}" * 4
    lines = [head, sub]
    for r in reports:
        row = f"{(r.name or '-'):<24}"
        for a in AXES:
            row += f"{r.acc[a]:>8.1f}%{r.score[a]:>9.2f}"
        row += f"{r.overall_acc:>8.1f}%{r.overall_score:>9.2f}"
        lines.append(row)
    return "\n".join(lines)


class RubricJudge:
    """Deterministic judge over synthetic ground truth.

    Following passes when the edit region matches the reference; preserving when
    everything outside it matches the original; quality when pixels stay close
    to the synthetic palette. Errors are mean absolute differences in [0, 1].
    """

    def __init__(self, references=None, threshold: float = 0.1,
                 model_id: str = "rubric-judge"):
        self.model_id = model_id
        self.threshold = threshold
        self.calls = 0
        self._refs: dict[str, np.ndarray] = {}
        for original, instruction, reference in references or []:
            self.add(original, instruction, reference)

    @staticmethod
    def _key(original_png: bytes, instruction: str) -> str:
        h = hashlib.sha256(hashlib.sha256(original_png).digest())
        h.update(instruction.encode("utf-8"))
        return h.hexdigest()

    def add(self, original: np.ndarray, instruction: str, reference: np.ndarray):
        self._refs[self._key(encode_png(original), instruction)] = reference

    def _score(self, err: float) -> float:
        return round(5.0 * max(0.0, 1.0 - err / (5 * self.threshold)), 4)

    def assess(self, original, edited, reference) -> dict:
        if edited.shape != reference.shape:
            edited = resize(edited, reference.shape[:2])
        o = original.astype(np.float64) / 255.0
        e = edited.astype(np.float64) / 255.0
        r = reference.astype(np.float64) / 255.0
        mask = np.any(original != reference, axis=-1)
        f_err = float(np.abs(e - r)[mask].mean()) if mask.any() else 0.0
        p_err = float(np.abs(e - o)[~mask].mean()) if (~mask).any() else 0.0
        palette = np.array([BACKGROUND, *PALETTE.values()], dtype=np.float64) / 255.0
        dist = np.abs(e[:, :, None, :] - palette[None, None]).mean(-1).min(-1)
        q_err = float(dist.mean())
        out = {}
        for axis, err in zip(AXES, (f_err, p_err, q_err)):
            out[axis] = {"pass": bool(err < self.threshold), "score": self._score(err)}
        return out

    def complete(self, request: dict) -> dict:
        self.calls += 1
        original_png, edited_png = (base64.b64decode(s) for s in request["images"])
        instruction = ""
        for line in request["prompt"].splitlines():
            if line.startswith("Editing instruction: "):
                instruction = line.removeprefix("Editing instruction: ")
        ref = self._refs.get(self._key(original_png, instruction))
        if ref is None:
            raise TransportError("rubric judge has no reference for this sample")
        return self.assess(decode_png(original_png), decode_png(edited_png), ref)


class ToyImageEmbedder:
    """Fixed random projection of a downsampled image; stands in for CLIP/DINO."""

    def __init__(self, dim: int = 32, grid: int = 8, seed: int = 0, gradients=False):
        self.dim, self.grid, self.gradients = dim, grid, gradients
        rng = np.random.default_rng(seed)
        self.proj = rng.standard_normal((dim, grid * grid * 3)) / math.sqrt(grid * grid * 3)

    def features(self, img: np.ndarray) -> np.ndarray:
        x = resize(check_image(img), (self.grid, self.grid)).astype(np.float64) / 255.0
        if self.gradients:
            gx = np.diff(x, axis=1, append=x[:, -1:])
            gy = np.diff(x, axis=0, append=x[-1:])
            x = np.abs(gx) + np.abs(gy)
        return x.reshape(-1)

    def __call__(self, img: np.ndarray) -> np.ndarray:
        return self.proj @ self.features(img)


class ToyTextEmbedder:
    """Hashed bag of words projected into the image embedding space."""

    def __init__(self, dim: int = 32, buckets: int = 256, seed: int = 1):
        self.dim, self.buckets = dim, buckets
        self.proj = np.random.default_rng(seed).standard_normal((dim, buckets))

    def __call__(self, text: str) -> np.ndarray:
        v = np.zeros(self.buckets)
        for word in text.lower().split():
            v[int(hashlib.sha256(word.encode()).hexdigest(), 16) % self.buckets] += 1.0
        return self.proj @ v


@dataclass
class Encoders:
    image: object = field(default_factory=ToyImageEmbedder)
    structure: object = field(default_factory=lambda: ToyImageEmbedder(seed=2, gradients=True))
    text: object = field(default_factory=ToyTextEmbedder)


def cosine(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def classic_metrics(original: np.ndarray, edited: np.ndarray, reference: np.ndarray,
                    encoders: Encoders | None = None, caption: str | None = None) -> dict:
    """L1 and embedding cosines against the reference, after resizing to its size."""
    encoders = encoders or Encoders()
    reference = check_image(reference)
    size = reference.shape[:2]
    edited = resize(check_image(edited), size)
    original = resize(check_image(original), size)
    if edited.shape != reference.shape:
        raise ShapeMismatchError("edited and reference differ after resize")
    l1 = float(np.abs(edited.astype(np.float64) - reference.astype(np.float64)).mean() / 255.0)
    out = {
        "l1": l1,
        "l1_to_original": float(np.abs(edited.astype(np.float64)
                                       - original.astype(np.float64)).mean() / 255.0),
        "image_sim": cosine(encoders.image(edited), encoders.image(reference)),
        "struct_sim": cosine(encoders.structure(edited), encoders.structure(reference)),
    }
    if caption is not None:
        out["text_sim"] = cosine(encoders.image(edited), encoders.text(caption))
    return out


def load_suite(suite_dir):
    """Reads a source-format directory: (original, reference edited, instruction)."""
    root = Path(suite_dir)
    items = []
    for line in (root / "pairs.jsonl").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        items.append((
            decode_png((root / entry["original"]).read_bytes()),
            decode_png((root / entry["edited"]).read_bytes()),
            entry["instruction"],
            entry.get("task_type"),
        ))
    if not items:
        raise EmptyInputError(f"suite {root} is empty")
    return items

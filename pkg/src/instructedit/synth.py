"""Synthetic editing world: grids of colored squares with programmatic edits.

Every pair comes with its ground-truth instruction, attribute-substituted wrong
instructions and the pixel mask of the edit, so the whole pipeline can run and
be checked without any external model.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .images import encode_png

GRID = 4
CELL = 4
SIZE = GRID * CELL
BACKGROUND = (24, 24, 24)
PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 230),
    "yellow": (230, 210, 40),
    "purple": (160, 60, 200),
    "white": (235, 235, 235),
}
COLORS = tuple(PALETTE)
EDIT_KINDS = ("recolor", "add", "remove", "move")
SIDES = ("left", "right", "top", "bottom")
NUMBERS = ("one", "two")


def pair_id(original: bytes, edited: bytes, instruction: str) -> str:
    h = hashlib.sha256()
    h.update(hashlib.sha256(original).digest())
    h.update(hashlib.sha256(edited).digest())
    h.update(instruction.encode("utf-8"))
    return h.hexdigest()[:16]


@dataclass
class SynthPair:
    original: np.ndarray
    edited: np.ndarray
    instruction: str  # ground truth
    raw_instruction: str  # what an automated pipeline would have written
    task_type: str
    negatives: list[str]
    attributes: list[str]
    mask: np.ndarray  # bool HxW, pixels touched by the edit
    original_png: bytes = field(init=False, repr=False)
    edited_png: bytes = field(init=False, repr=False)

    def __post_init__(self):
        self.original_png = encode_png(self.original)
        self.edited_png = encode_png(self.edited)

    @property
    def id(self) -> str:
        return pair_id(self.original_png, self.edited_png, self.raw_instruction)


def _cells_on_side(side: str) -> list[tuple[int, int]]:
    half = GRID // 2
    cells = [(r, c) for r in range(GRID) for c in range(GRID)]
    pick = {
        "left": lambda r, c: c < half,
        "right": lambda r, c: c >= half,
        "top": lambda r, c: r < half,
        "bottom": lambda r, c: r >= half,
    }[side]
    return [rc for rc in cells if pick(*rc)]


def render(scene: dict[tuple[int, int], str]) -> np.ndarray:
    img = np.empty((SIZE, SIZE, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for (r, c), color in scene.items():
        img[r * CELL:r * CELL + CELL - 1, c * CELL:c * CELL + CELL - 1] = PALETTE[color]
    return img


def _noun(n: str) -> str:
    return "square" if n == "one" else "squares"


def _add_text(n, color, side):
    return f"add {n} {color} {_noun(n)} on the {side} side of the image"


def _make_edit(rng: np.random.Generator, kind: str, scene: dict):
    """Return (edited scene, instruction, [(negative, attribute)])."""
    present = sorted(set(scene.values()))
    absent = [c for c in COLORS if c not in present]
    occupied = set(scene)
    if kind == "recolor":
        cell = sorted(scene)[rng.integers(len(scene))]
        old = scene[cell]
        new = absent[rng.integers(len(absent))]
        edited = dict(scene)
        edited[cell] = new
        text = f"change the {old} square to {new}"
        others = [c for c in COLORS if c not in (old, new)]
        picks = rng.choice(len(others), size=3, replace=False)
        negs = [(f"change the {old} square to {others[i]}", "object") for i in picks]
        return edited, text, negs
    if kind == "add":
        n = NUMBERS[rng.integers(len(NUMBERS))]
        side = ("left", "right")[rng.integers(2)]
        color = absent[rng.integers(len(absent))]
        free = [rc for rc in _cells_on_side(side) if rc not in occupied]
        count = 1 if n == "one" else 2
        chosen = rng.choice(len(free), size=count, replace=False)
        edited = dict(scene)
        for i in sorted(chosen):
            edited[free[i]] = color
        text = _add_text(n, color, side)
        other_n = "two" if n == "one" else "one"
        other_side = "right" if side == "left" else "left"
        other_color = [c for c in absent if c != color]
        other_color = other_color[rng.integers(len(other_color))] if other_color else \
            [c for c in COLORS if c != color][0]
        negs = [
            (_add_text(other_n, color, side), "quantity"),
            (_add_text(n, color, other_side), "location"),
            (_add_text(n, other_color, side), "object"),
        ]
        return edited, text, negs
    if kind == "remove":
        cell = sorted(scene)[rng.integers(len(scene))]
        color = scene[cell]
        edited = {rc: c for rc, c in scene.items() if rc != cell}
        text = f"remove the {color} square"
        others = [c for c in COLORS if c != color]
        picks = rng.choice(len(others), size=3, replace=False)
        negs = [(f"remove the {others[i]} square", "object") for i in picks]
        return edited, text, negs
    if kind == "move":
        cells = sorted(scene)
        order = rng.permutation(len(cells))
        for idx in order:
            cell = cells[idx]
            sides = [s for s in SIDES if cell not in _cells_on_side(s)]
            side = sides[rng.integers(len(sides))]
            free = [rc for rc in _cells_on_side(side) if rc not in occupied]
            if free:
                break
        dest = free[rng.integers(len(free))]
        color = scene[cell]
        edited = {rc: c for rc, c in scene.items() if rc != cell}
        edited[dest] = color
        text = f"move the {color} square to the {side} side of the image"
        other_sides = [s for s in SIDES if s != side]
        picks = rng.choice(len(other_sides), size=2, replace=False)
        negs = [(f"move the {color} square to the {other_sides[i]} side of the image",
                 "location") for i in picks]
        other = [c for c in COLORS if c != color]
        negs.append((f"move the {other[rng.integers(len(other))]} square to the "
                     f"{side} side of the image", "object"))
        return edited, text, negs
    raise ValueError(f"unknown edit kind {kind!r}")


def synth_pair(rng: np.random.Generator, kind: str | None = None,
               noise_rate: float = 0.0) -> SynthPair:
    n_shapes = int(rng.integers(2, 4))
    cells = [(r, c) for r in range(GRID) for c in range(GRID)]
    chosen = rng.choice(len(cells), size=n_shapes, replace=False)
    colors = rng.choice(len(COLORS), size=n_shapes, replace=False)
    scene = {cells[i]: COLORS[j] for i, j in zip(chosen, colors)}
    if kind is None:
        kind = EDIT_KINDS[rng.integers(len(EDIT_KINDS))]
    edited_scene, text, negs = _make_edit(rng, kind, scene)
    original, edited = render(scene), render(edited_scene)
    mask = np.any(original != edited, axis=-1)
    raw = text
    if rng.random() < noise_rate:
        # a mismatched instruction, as produced by an imperfect generator
        raw = negs[rng.integers(len(negs))][0]
    return SynthPair(
        original=original, edited=edited, instruction=text, raw_instruction=raw,
        task_type=kind, negatives=[n for n, _ in negs],
        attributes=[a for _, a in negs], mask=mask,
    )


def synth_world(n: int, seed: int = 0, noise_rate: float = 0.0,
                kinds=EDIT_KINDS) -> list[SynthPair]:
    """``n`` pairs, edit kinds cycling evenly; identical for identical seeds."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return [synth_pair(rng, kinds[i % len(kinds)], noise_rate) for i in range(n)]


def rectify_fixture(pair: SynthPair) -> dict:
    """Ground-truth VLM response for the rectification request."""
    layout = {"add": f"new squares appear: {pair.instruction}",
              "remove": f"a square disappears: {pair.instruction}",
              "move": f"a square changes position: {pair.instruction}"}.get(pair.task_type, "none")
    local = f"a square changes color: {pair.instruction}" if pair.task_type == "recolor" else "none"
    return {
        "sections": {
            "layout": layout,
            "local_attributes": local,
            "style_details": "none",
            "summary": pair.instruction,
        },
        "usage": {"prompt_tokens": 0, "completion_tokens": len(pair.instruction.split())},
    }


def negatives_fixture(pair: SynthPair) -> dict:
    return {
        "sections": {"negatives": [{"text": t, "attribute": a}
                                   for t, a in zip(pair.negatives, pair.attributes)]},
        "usage": {"prompt_tokens": 0, "completion_tokens": 0},
    }

"""Scikit-learn style wrapper around training, editing and rubric scoring."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evaluation import RubricJudge, aggregate_scores, parse_judge_response
from .exceptions import EmptyInputError
from .inference import GuidanceConfig, sample_batch
from .trainer import DESK_PRESET, TrainConfig, TrainingData, fit


class InstructEditor(BaseEstimator):
    """Editing model with a ``fit`` / ``predict`` / ``score`` surface.

    ``fit`` takes a built dataset directory or a :class:`TrainingData`.
    ``predict`` takes a sequence of ``(image, instruction)`` pairs and returns
    uint8 images. ``score`` grades predictions against reference edits with the
    rubric judge and returns the overall pass rate in [0, 1].
    """

    def __init__(self, total_steps=DESK_PRESET["total_steps"],
                 batch_size=DESK_PRESET["batch_size"],
                 learning_rate=DESK_PRESET["learning_rate"],
                 warmup_steps=DESK_PRESET["warmup_steps"],
                 use_contrastive=True, triplet_margin=5e-3, triplet_weight=1.0,
                 triplet_activation_step=DESK_PRESET["triplet_activation_step"],
                 num_timesteps=DESK_PRESET["num_timesteps"],
                 base_width=DESK_PRESET["base_width"], depth=DESK_PRESET["depth"],
                 embed_dim=DESK_PRESET["embed_dim"], vocab_size=2048, seed=0,
                 text_scale=10.0, image_scale=1.5, num_steps=50, resize_shorter_side=16,
                 out_dir=None):
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.use_contrastive = use_contrastive
        self.triplet_margin = triplet_margin
        self.triplet_weight = triplet_weight
        self.triplet_activation_step = triplet_activation_step
        self.num_timesteps = num_timesteps
        self.base_width = base_width
        self.depth = depth
        self.embed_dim = embed_dim
        self.vocab_size = vocab_size
        self.seed = seed
        self.text_scale = text_scale
        self.image_scale = image_scale
        self.num_steps = num_steps
        self.resize_shorter_side = resize_shorter_side
        self.out_dir = out_dir

    def train_config(self) -> TrainConfig:
        keys = ("total_steps", "batch_size", "learning_rate", "warmup_steps",
                "use_contrastive", "triplet_margin", "triplet_weight",
                "triplet_activation_step", "num_timesteps", "base_width", "depth",
                "embed_dim", "vocab_size", "seed")
        return TrainConfig(**{k: getattr(self, k) for k in keys})

    def guidance_config(self) -> GuidanceConfig:
        return GuidanceConfig(self.text_scale, self.image_scale, self.num_steps,
                              self.resize_shorter_side)

    def fit(self, X, y=None):
        data = X if isinstance(X, TrainingData) else TrainingData.from_dir(Path(X))
        cfg = self.train_config()
        result = fit(cfg, data, out_dir=self.out_dir)
        self.model_ = result.model
        self.schedule_ = cfg.schedule()
        self.metrics_ = result.metrics
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        pairs = list(X)
        if not pairs:
            raise EmptyInputError("nothing to edit")
        images, texts = zip(*pairs)
        return sample_batch(self.model_, self.schedule_, list(images), list(texts),
                            self.guidance_config(), seed=self.seed)

    def score(self, X, y) -> float:
        pairs, refs = list(X), list(y)
        if len(pairs) != len(refs):
            raise ValueError("X and y differ in length")
        outs = self.predict(pairs)
        judge = RubricJudge()
        scores = [parse_judge_response(judge.assess(img, out, ref))
                  for (img, _), out, ref in zip(pairs, outs, refs)]
        return aggregate_scores(scores).overall_acc / 100.0

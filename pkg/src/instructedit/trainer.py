"""Training loop with positive/negative instruction branches.

Each step draws t and eps per sample, noises the edited image once and runs the
denoiser on the rectified instruction and on one randomly chosen wrong
instruction. Both branches share x_t, t, eps and the condition-dropout mask;
only the text differs.
"""

from __future__ import annotations

import json
import logging
import pickle
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .dataset import EditSample, load_records
from .denoiser import ConditionBundle, Denoiser, DenoiserConfig, apply_condition_dropout
from .exceptions import (
    ConfigError,
    EmptyInputError,
    MissingNegativesError,
    UnreadableSourceError,
)
from .images import load_image, to_tensor
from .objectives import TripletConfig, triplet_gate, triplet_terms
from .schedule import NoiseSchedule, add_noise_batch, build_linear_schedule
from .seeding import derive_seed, torch_generator

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "instructedit-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    warmup_steps: int = 100
    total_steps: int = 10_000
    dropout_p: float = 0.05
    joint_dropout_p: float = 0.0
    triplet_margin: float = 5e-3
    triplet_weight: float = 1.0
    triplet_activation_step: int = 2000
    seed: int = 0
    use_rectified: bool = True
    use_contrastive: bool = True
    num_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    base_width: int = 32
    depth: int = 2
    embed_dim: int = 64
    vocab_size: int = 2048
    checkpoint_every: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999

    def __post_init__(self):
        problems = []
        if self.batch_size < 1:
            problems.append("batch_size: must be >= 1")
        if self.total_steps < 0:
            problems.append("total_steps: must be >= 0")
        if self.warmup_steps < 0 or (self.total_steps > 0
                                     and self.warmup_steps > self.total_steps):
            problems.append("warmup_steps: must lie in [0, total_steps]")
        if self.learning_rate <= 0:
            problems.append("learning_rate: must be positive")
        if self.weight_decay < 0:
            problems.append("weight_decay: must be >= 0")
        if not 0 <= self.dropout_p <= 1 or not 0 <= self.joint_dropout_p <= 1:
            problems.append("dropout_p: must lie in [0, 1]")
        if self.triplet_margin < 0 or self.triplet_weight < 0:
            problems.append("triplet_margin/triplet_weight: must be >= 0")
        if self.triplet_activation_step < 0:
            problems.append("triplet_activation_step: must be >= 0")
        if self.checkpoint_every < 1:
            problems.append("checkpoint_every: must be >= 1")
        if problems:
            raise ConfigError("invalid train config: " + "; ".join(problems), problems)

    @property
    def triplet(self) -> TripletConfig:
        return TripletConfig(self.triplet_margin, self.triplet_weight,
                             self.triplet_activation_step)

    def schedule(self) -> NoiseSchedule:
        return build_linear_schedule(self.num_timesteps, self.beta_start, self.beta_end)

    def model_config(self, latent_channels: int = 3) -> DenoiserConfig:
        return DenoiserConfig(
            latent_channels=latent_channels, base_width=self.base_width,
            depth=self.depth, embed_dim=self.embed_dim,
            seed=derive_seed(self.seed, "model-init") % (2 ** 31),
            vocab_size=self.vocab_size, num_timesteps=self.num_timesteps,
        )

    def to_dict(self):
        return asdict(self)


DESK_PRESET = dict(
    batch_size=32, learning_rate=1e-3, warmup_steps=100, total_steps=2000,
    triplet_activation_step=400, num_timesteps=200, base_width=24, depth=2,
    embed_dim=64, checkpoint_every=500,
)


def desk_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**DESK_PRESET, **overrides})


@dataclass
class StepMetrics:
    step: int
    l_train: float
    l_triplet: float
    l_total: float
    d_pos: float
    d_neg: float
    grad_norm: float
    lr: float
    triplet_active: bool = False
    skipped_triplets: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainBatch:
    original: torch.Tensor
    edited: torch.Tensor
    positives: list[str]
    negatives: list[list[str]]

    def __len__(self):
        return len(self.positives)


class TrainingData:
    """In-memory tensors for a built dataset directory."""

    def __init__(self, samples: list[EditSample], root, use_rectified: bool = True,
                 dtype=torch.float32):
        if not samples:
            raise EmptyInputError("dataset is empty")
        root = Path(root)
        self.samples = samples
        self.original = to_tensor(np.stack([load_image(root / s.original_path)
                                            for s in samples]), dtype)
        self.edited = to_tensor(np.stack([load_image(root / s.edited_path)
                                          for s in samples]), dtype)
        self.positives = [
            (s.rectified_instruction if use_rectified and s.rectified_instruction
             else s.raw_instruction) for s in samples
        ]
        self.negatives = [list(s.negatives or []) for s in samples]

    @classmethod
    def from_dir(cls, data_dir, use_rectified=True, dtype=torch.float32):
        return cls(load_records(data_dir), data_dir, use_rectified, dtype)

    def __len__(self):
        return len(self.samples)

    def batch(self, idx) -> TrainBatch:
        idx = [int(i) for i in idx]
        return TrainBatch(self.original[idx], self.edited[idx],
                          [self.positives[i] for i in idx],
                          [self.negatives[i] for i in idx])


class BatchSampler:
    """Epoch-wise permutations from a seeded generator."""

    def __init__(self, n: int, batch_size: int, generator: torch.Generator):
        self.n, self.batch_size, self.generator = n, batch_size, generator
        self._perm: list[int] = []

    def next(self) -> list[int]:
        out = []
        while len(out) < self.batch_size:
            if not self._perm:
                self._perm = torch.randperm(self.n, generator=self.generator).tolist()
            out.append(self._perm.pop(0))
        return out

    def state(self):
        return {"perm": list(self._perm), "generator": self.generator.get_state()}

    def load_state(self, state):
        self._perm = list(state["perm"])
        self.generator.set_state(state["generator"])


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 over ``warmup_steps``, constant afterwards."""
    if config.warmup_steps == 0:
        return config.learning_rate
    return config.learning_rate * min(1.0, step / config.warmup_steps)


def make_optimizer(model, config: TrainConfig):
    return torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                             weight_decay=config.weight_decay,
                             betas=(config.adam_beta1, config.adam_beta2))


@dataclass
class StepDraws:
    t: torch.Tensor
    eps: torch.Tensor
    neg_index: list[int]
    image_dropped: torch.Tensor
    text_dropped: torch.Tensor


def draw_step(batch: TrainBatch, schedule: NoiseSchedule, config: TrainConfig,
              generator: torch.Generator) -> StepDraws:
    b = len(batch)
    t = torch.randint(0, schedule.num_timesteps, (b,), generator=generator)
    eps = torch.randn(batch.edited.shape, generator=generator, dtype=torch.float64)
    eps = eps.to(batch.edited.dtype)
    tokens = torch.zeros((b, 1), dtype=torch.long)
    masks = apply_condition_dropout(ConditionBundle(batch.original, tokens),
                                    config.dropout_p, generator, config.joint_dropout_p)
    u = torch.rand(b, generator=generator, dtype=torch.float64)
    neg_index = [int(u[i] * len(n)) if n else -1 for i, n in enumerate(batch.negatives)]
    return StepDraws(t, eps, neg_index, masks.image_dropped, masks.text_dropped)


def compute_losses(model, batch: TrainBatch, draws: StepDraws, schedule, config,
                   step: int):
    """Forward both branches; returns (loss tensor for backward, metrics dict)."""
    cfg = config.triplet
    if config.use_contrastive:
        missing = [i for i, n in enumerate(batch.negatives) if not n]
        if missing:
            raise MissingNegativesError(f"{len(missing)} samples in batch lack negatives")
    x_t = add_noise_batch(batch.edited, draws.eps, draws.t, schedule)
    pos_tokens, _ = model.tokenize(batch.positives)
    bundle = ConditionBundle(batch.original, pos_tokens,
                             draws.image_dropped.clone(), draws.text_dropped.clone())
    eps_pos = model(x_t, bundle, draws.t)
    gate = triplet_gate(cfg, step)
    zero = eps_pos.new_zeros(())
    if not config.use_contrastive:
        d_pos = (eps_pos - draws.eps).reshape(len(batch), -1).pow(2).mean(1)
        l_train = d_pos.mean()
        value = float(l_train.detach())
        return l_train, dict(l_train=value, l_triplet=0.0, d_pos=value,
                             d_neg=float("nan"), triplet_active=False, skipped_triplets=0)
    neg_text = [batch.negatives[i][j] for i, j in enumerate(draws.neg_index)]
    neg_tokens, _ = model.tokenize(neg_text)
    with torch.set_grad_enabled(gate and torch.is_grad_enabled()):
        eps_neg = model(x_t, bundle.with_text(neg_tokens), draws.t)
    hinge, d_pos, d_neg = triplet_terms(draws.eps, eps_pos, eps_neg, cfg)
    l_train = d_pos.mean()
    active = ~draws.text_dropped
    l_triplet = hinge[active].mean() if bool(active.any()) else zero
    loss = l_train + cfg.weight * l_triplet if gate else l_train
    return loss, dict(
        l_train=float(l_train.detach()), l_triplet=float(l_triplet.detach()),
        d_pos=float(d_pos.detach().mean()), d_neg=float(d_neg.detach().mean()),
        triplet_active=gate,
        skipped_triplets=int((~active).sum()),
    )


def train_step(batch: TrainBatch, model, schedule: NoiseSchedule, config: TrainConfig,
               step: int, optimizer=None, generator: torch.Generator | None = None
               ) -> StepMetrics:
    if optimizer is None:
        optimizer = make_optimizer(model, config)
    if generator is None:
        generator = torch_generator(config.seed, f"step/{step}")
    lr = lr_at(step, config)
    for group in optimizer.param_groups:
        group["lr"] = lr
    model.train()
    draws = draw_step(batch, schedule, config, generator)
    optimizer.zero_grad(set_to_none=True)
    loss, m = compute_losses(model, batch, draws, schedule, config, step)
    loss.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), float("inf"))
    optimizer.step()
    gate = m["triplet_active"]
    l_total = m["l_train"] + (config.triplet_weight * m["l_triplet"] if gate else 0.0)
    return StepMetrics(step=step, l_train=m["l_train"], l_triplet=m["l_triplet"],
                       l_total=l_total, d_pos=m["d_pos"], d_neg=m["d_neg"],
                       grad_norm=float(grad_norm), lr=lr, triplet_active=gate,
                       skipped_triplets=m["skipped_triplets"])


def save_checkpoint(path, model, config: TrainConfig, schedule: NoiseSchedule,
                    step: int, optimizer=None, sampler=None, generator=None,
                    image_size: int | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": config.to_dict(),
        "betas": schedule.to_list(),
        "step": int(step),
        "image_size": image_size,
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "sampler": sampler.state() if sampler is not None else None,
        "generator": generator.get_state() if generator is not None else None,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, dtype=None):
    """Returns (model, train config, schedule, raw payload)."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, pickle.UnpicklingError) as exc:
        raise UnreadableSourceError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}")
    model = Denoiser(DenoiserConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    if dtype is not None:
        model = model.to(dtype)
    model.eval()
    config = TrainConfig(**payload["train_config"])
    schedule = NoiseSchedule.from_list(payload["betas"])
    return model, config, schedule, payload


@dataclass
class FitResult:
    checkpoint: Path
    metrics_path: Path
    metrics: list[StepMetrics]
    model: Denoiser


def fit(config: TrainConfig, data: TrainingData, model: Denoiser | None = None,
        out_dir=None, resume: bool = False) -> FitResult:
    if len(data) == 0:
        raise EmptyInputError("dataset is empty")
    out = Path(out_dir) if out_dir is not None else None
    schedule = config.schedule()
    if model is None:
        model = Denoiser(config.model_config(data.original.shape[1]))
    model = model.to(data.original.dtype)
    optimizer = make_optimizer(model, config)
    sampler = BatchSampler(len(data), config.batch_size,
                           torch_generator(config.seed, "data-order"))
    generator = torch_generator(config.seed, "train-draws")
    start = 0
    image_size = int(min(data.original.shape[-2:]))
    ckpt = out / "checkpoint.pt" if out is not None else None
    metrics_path = out / "metrics.jsonl" if out is not None else None
    if resume and ckpt is not None and ckpt.exists():
        _, _, _, payload = load_checkpoint(ckpt)
        model.load_state_dict(payload["state_dict"])
        if payload["optimizer"] is not None:
            optimizer.load_state_dict(payload["optimizer"])
        if payload["sampler"] is not None:
            sampler.load_state(payload["sampler"])
        if payload["generator"] is not None:
            generator.set_state(payload["generator"])
        start = payload["step"]
        log.info("resuming from step %d", start)
    metrics: list[StepMetrics] = []
    if metrics_path is not None:
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        if start and metrics_path.exists():
            kept = metrics_path.read_text(encoding="utf-8").splitlines()[:start]
            metrics_path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")
            metrics = [StepMetrics(**json.loads(line)) for line in kept]
        else:
            metrics_path.write_text("", encoding="utf-8")
    if ckpt is not None and start == 0:
        save_checkpoint(ckpt, model, config, schedule, 0, optimizer, sampler, generator,
                        image_size)
    for step in range(start, config.total_steps):
        batch = data.batch(sampler.next())
        m = train_step(batch, model, schedule, config, step, optimizer, generator)
        metrics.append(m)
        if metrics_path is not None:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(m.to_json() + "\n")
        if step % 100 == 0:
            log.info("step %d loss %.5f triplet %.5f lr %.2e", step, m.l_total,
                     m.l_triplet, m.lr)
        done = step + 1
        if ckpt is not None and (done % config.checkpoint_every == 0
                                 or done == config.total_steps):
            save_checkpoint(ckpt, model, config, schedule, done, optimizer, sampler,
                            generator, image_size)
    model.eval()
    return FitResult(ckpt, metrics_path, metrics, model)


@torch.no_grad()
def separation(model, data: TrainingData, schedule: NoiseSchedule, seed: int = 0,
               idx=None) -> float:
    """Held-out mean of d_neg - d_pos over every negative, with fixed t and eps."""
    model.eval()
    idx = list(range(len(data))) if idx is None else list(idx)
    batch = data.batch(idx)
    g = torch_generator(seed, "separation")
    t = torch.randint(0, schedule.num_timesteps, (len(idx),), generator=g)
    eps = torch.randn(batch.edited.shape, generator=g, dtype=torch.float64).to(
        batch.edited.dtype)
    x_t = add_noise_batch(batch.edited, eps, t, schedule)
    pos_tokens, _ = model.tokenize(batch.positives)
    bundle = ConditionBundle(batch.original, pos_tokens)
    d_pos = (model(x_t, bundle, t) - eps).reshape(len(idx), -1).pow(2).mean(1)
    k = min(len(n) for n in batch.negatives)
    gaps = []
    for j in range(k):
        neg_tokens, _ = model.tokenize([n[j] for n in batch.negatives])
        d_neg = (model(x_t, bundle.with_text(neg_tokens), t) - eps).reshape(
            len(idx), -1).pow(2).mean(1)
        gaps.append(d_neg - d_pos)
    return float(torch.stack(gaps).to(torch.float64).mean())


def config_fields() -> set[str]:
    return {f.name for f in fields(TrainConfig)}

"""Conditional noise predictor eps(concat(x_t, image_cond), t, text).

Works in pixel space: images are the latents. Text goes through a hashing
tokenizer and a learned embedding table; the null text is the embedding of the
empty sequence (BOS, EOS).
"""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import asdict, dataclass, replace

import torch
from torch import nn
import torch.nn.functional as F

from .exceptions import ConfigError, InvalidRangeError, ShapeMismatchError

MAX_TOKENS = 77
PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
_N_SPECIAL = 3
_WORD_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class HashTokenizer:
    """Lowercased word/punctuation tokens hashed into a fixed vocabulary."""

    def __init__(self, vocab_size: int = 2048, max_tokens: int = MAX_TOKENS):
        if vocab_size <= _N_SPECIAL:
            raise ConfigError("vocab_size too small")
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens

    def words(self, text: str) -> list[str]:
        return _WORD_RE.findall(text.lower())

    def token_id(self, word: str) -> int:
        h = zlib.crc32(word.encode("utf-8"))
        return _N_SPECIAL + h % (self.vocab_size - _N_SPECIAL)

    def encode(self, text: str) -> tuple[list[int], bool]:
        ids = [BOS_ID] + [self.token_id(w) for w in self.words(text)] + [EOS_ID]
        truncated = len(ids) > self.max_tokens
        if truncated:
            ids = ids[: self.max_tokens - 1] + [EOS_ID]
        return ids, truncated

    def count(self, text: str) -> int:
        """Token count including BOS/EOS, before truncation."""
        return len(self.words(text)) + 2


@dataclass
class TextEmbedding:
    tokens: list[int]
    vectors: torch.Tensor
    truncated: bool = False

    def __post_init__(self):
        if len(self.tokens) > MAX_TOKENS:
            raise InvalidRangeError("token count exceeds 77")


@dataclass
class ConditionBundle:
    """Batched conditions. ``image_dropped``/``text_dropped`` are bool tensors."""

    image_cond: torch.Tensor
    text_tokens: torch.Tensor  # (B, L) int64, PAD-filled
    image_dropped: torch.Tensor = None
    text_dropped: torch.Tensor = None

    def __post_init__(self):
        b = self.image_cond.shape[0]
        if self.text_tokens.shape[0] != b:
            raise ShapeMismatchError("image and text batch sizes differ")
        if self.image_dropped is None:
            self.image_dropped = torch.zeros(b, dtype=torch.bool)
        if self.text_dropped is None:
            self.text_dropped = torch.zeros(b, dtype=torch.bool)

    def with_text(self, text_tokens: torch.Tensor) -> "ConditionBundle":
        return replace(self, text_tokens=text_tokens)


def pad_tokens(seqs: list[list[int]]) -> torch.Tensor:
    length = max(len(s) for s in seqs)
    out = torch.full((len(seqs), length), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out


def apply_condition_dropout(bundle: ConditionBundle, p: float,
                            rng: torch.Generator,
                            joint_p: float = 0.0) -> ConditionBundle:
    """Independently drop the image and text condition per sample.

    ``joint_p`` additionally drops both together (off by default).
    """
    if not 0.0 <= p <= 1.0 or not 0.0 <= joint_p <= 1.0:
        raise InvalidRangeError("dropout probabilities must lie in [0, 1]")
    b = bundle.image_cond.shape[0]
    u = torch.rand(3, b, generator=rng, dtype=torch.float64)
    img = u[0] < p
    txt = u[1] < p
    if joint_p > 0:
        both = u[2] < joint_p
        img = img | both
        txt = txt | both
    return replace(
        bundle,
        image_dropped=bundle.image_dropped | img,
        text_dropped=bundle.text_dropped | txt,
    )


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 3
    base_width: int = 32
    depth: int = 2
    embed_dim: int = 64
    seed: int = 0
    vocab_size: int = 2048
    num_timesteps: int = 1000
    in_channels: int | None = None

    def __post_init__(self):
        problems = []
        for key in ("latent_channels", "base_width", "depth", "embed_dim", "vocab_size",
                    "num_timesteps"):
            if getattr(self, key) < 1:
                problems.append(f"{key} must be >= 1")
        if self.in_channels is not None and self.in_channels != 2 * self.latent_channels:
            problems.append(
                f"in_channels={self.in_channels} breaks the concatenation "
                f"contract (expected {2 * self.latent_channels})"
            )
        if problems:
            raise ConfigError("; ".join(problems), problems)

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0):
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    )
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, embed_dim: int, tokenizer: HashTokenizer):
        super().__init__()
        self.tokenizer = tokenizer
        self.token_emb = nn.Embedding(vocab_size, embed_dim)
        self.pos_emb = nn.Parameter(torch.zeros(MAX_TOKENS, embed_dim))
        self.mix = nn.Sequential(nn.Linear(embed_dim, embed_dim), nn.SiLU(),
                                 nn.Linear(embed_dim, embed_dim))

    def forward(self, tokens: torch.Tensor):
        """Returns per-token vectors (B, L, E), pooled vectors (B, E) and a mask."""
        mask = tokens != PAD_ID
        h = self.token_emb(tokens) + self.pos_emb[: tokens.shape[1]]
        h = h + self.mix(h)
        m = mask.unsqueeze(-1).to(h.dtype)
        pooled = (h * m).sum(1) / m.sum(1).clamp_min(1.0)
        return h, pooled, mask

    def tokenize(self, instructions: list[str]) -> tuple[torch.Tensor, list[bool]]:
        encoded = [self.tokenizer.encode(s) for s in instructions]
        return pad_tokens([e[0] for e in encoded]), [e[1] for e in encoded]

    def null_tokens(self, batch: int) -> torch.Tensor:
        return pad_tokens([[BOS_ID, EOS_ID]] * batch)

    def embed(self, instruction: str) -> TextEmbedding:
        ids, truncated = self.tokenizer.encode(instruction)
        with torch.no_grad():
            h, _, _ = self(torch.as_tensor([ids], dtype=torch.long))
        return TextEmbedding(tokens=ids, vectors=h[0].clone(), truncated=truncated)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, cond_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.film = nn.Linear(cond_dim, 2 * c_out)
        self.norm2 = nn.GroupNorm(min(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, cond):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(cond)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    def __init__(self, channels: int, text_dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(min(8, channels), channels)
        self.q = nn.Linear(channels, channels)
        self.kv = nn.Linear(text_dim, 2 * channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, x, text, mask):
        b, c, hgt, wid = x.shape
        q = self.q(self.norm(x).flatten(2).transpose(1, 2))
        k, v = self.kv(text).chunk(2, dim=-1)

        def split(z):
            return z.reshape(b, z.shape[1], self.heads, c // self.heads).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        att = q @ k.transpose(-1, -2) / math.sqrt(c // self.heads)
        att = att.masked_fill(~mask[:, None, None, :], float("-inf")).softmax(-1)
        h = (att @ v).transpose(1, 2).reshape(b, hgt * wid, c)
        return x + self.out(h).transpose(1, 2).reshape(b, c, hgt, wid)


class Denoiser(nn.Module):
    """Small U-Net over ``2 * latent_channels`` input channels.

    ``depth`` is the number of 2x downsampling levels; input sides must be
    divisible by ``2 ** depth``.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c, w, e = config.latent_channels, config.base_width, config.embed_dim
        g = torch.Generator().manual_seed(config.seed)
        self.tokenizer = HashTokenizer(config.vocab_size)
        self.text_encoder = TextEncoder(config.vocab_size, e, self.tokenizer)
        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.cond_mlp = nn.Sequential(nn.SiLU(), nn.Linear(e, e))
        self.conv_in = nn.Conv2d(2 * c, w, 3, padding=1)
        widths = [w * min(2 ** i, 4) for i in range(config.depth + 1)]
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i in range(config.depth):
            self.down_blocks.append(ResBlock(widths[i], widths[i], e))
            self.downsamples.append(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1))
        self.mid_block = ResBlock(widths[-1], widths[-1], e)
        self.mid_attn = CrossAttention(widths[-1], e)
        self.mid_block2 = ResBlock(widths[-1], widths[-1], e)
        self.up_blocks = nn.ModuleList()
        for i in reversed(range(config.depth)):
            self.up_blocks.append(ResBlock(widths[i + 1] + widths[i], widths[i], e))
        self.out_norm = nn.GroupNorm(min(8, w), w)
        self.conv_out = nn.Conv2d(w, c, 3, padding=1)
        self._init_params(g)
        if self.conv_in.in_channels != 2 * c:
            raise ConfigError("first layer must consume 2 * latent_channels channels")

    def _init_params(self, g: torch.Generator):
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif p.ndim == 1:
                    p.fill_(1.0)
                elif name.startswith("text_encoder.pos_emb"):
                    p.normal_(0.0, 0.1, generator=g)
                elif name.startswith("text_encoder.token_emb"):
                    p.normal_(0.0, 1.0, generator=g)
                else:
                    fan_in = p[0].numel()
                    p.uniform_(-1.0, 1.0, generator=g).mul_(math.sqrt(3.0 / fan_in))
            # near-identity residual outputs
            self.conv_out.weight.mul_(0.1)

    @property
    def latent_channels(self) -> int:
        return self.config.latent_channels

    def tokenize(self, instructions):
        return self.text_encoder.tokenize(list(instructions))

    def embed_instruction(self, instruction: str) -> TextEmbedding:
        return self.text_encoder.embed(instruction)

    def forward(self, x_t: torch.Tensor, bundle: ConditionBundle, t) -> torch.Tensor:
        return self.predict_noise(x_t, bundle, t)

    def predict_noise(self, x_t: torch.Tensor, bundle: ConditionBundle, t) -> torch.Tensor:
        image_cond = bundle.image_cond
        if tuple(x_t.shape) != tuple(image_cond.shape):
            raise ShapeMismatchError(
                f"x_t {tuple(x_t.shape)} and image condition "
                f"{tuple(image_cond.shape)} differ"
            )
        if x_t.shape[1] != self.latent_channels:
            raise ShapeMismatchError(
                f"expected {self.latent_channels} channels, got {x_t.shape[1]}"
            )
        side = 2 ** self.config.depth
        if x_t.shape[-1] % side or x_t.shape[-2] % side:
            raise ShapeMismatchError(f"spatial size must be divisible by {side}")
        b = x_t.shape[0]
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(b)
        if int(t.min()) < 0 or int(t.max()) >= self.config.num_timesteps:
            raise InvalidRangeError("timestep out of range")

        img_keep = (~bundle.image_dropped).to(x_t.dtype)[:, None, None, None]
        image_cond = image_cond * img_keep
        tokens = bundle.text_tokens
        if bool(bundle.text_dropped.any()):
            null = self.text_encoder.null_tokens(b)
            width = max(tokens.shape[1], null.shape[1])
            tokens = F.pad(tokens, (0, width - tokens.shape[1]), value=PAD_ID)
            null = F.pad(null, (0, width - null.shape[1]), value=PAD_ID)
            tokens = torch.where(bundle.text_dropped[:, None], null, tokens)
            tokens = tokens[:, : int((tokens != PAD_ID).sum(1).max())]
        text, pooled, mask = self.text_encoder(tokens)

        temb = self.time_mlp(timestep_embedding(t, self.config.embed_dim).to(x_t.dtype))
        cond = self.cond_mlp(temb + pooled)

        h = self.conv_in(torch.cat([x_t, image_cond], dim=1))
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, cond)
            skips.append(h)
            h = down(h)
        h = self.mid_block(h, cond)
        h = self.mid_attn(h, text, mask)
        h = self.mid_block2(h, cond)
        for block in self.up_blocks:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skips.pop()], dim=1), cond)
        return self.conv_out(F.silu(self.out_norm(h)))


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def flat_parameters(model: nn.Module) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])

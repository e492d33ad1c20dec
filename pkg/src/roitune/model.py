"""Toy causal LM, the end-to-end region pipeline, and the training utilities around them."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import Divergence, EmptyMask, InputError, ShapeMismatch
from .geometry import ImageSize
from .records import InstructionRecord, validate_record
from .roi import DEFAULT_POOL, DEFAULT_SAMPLES, LayerStack, RegionFeatureExtractor
from .sequence import (
    IGNORE_INDEX, IMAGE_TOKEN, InterleavedSequence, Vocab, assemble, prediction_mask, prepend_prefix,
    referenced_regions,
)


def _normal(shape, generator, dim, dtype):
    return nn.Parameter(torch.randn(*shape, generator=generator, dtype=dtype) / math.sqrt(dim))


def sinusoidal_positions(t: int, d: int, dtype=torch.float64) -> torch.Tensor:
    pos = torch.arange(t, dtype=dtype)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=dtype) / d)
    out = torch.zeros(t, d, dtype=dtype)
    out[:, 0::2] = torch.sin(pos * freq)
    out[:, 1::2] = torch.cos(pos * freq)[:, : d // 2]
    return out


class Block(nn.Module):
    def __init__(self, dim, heads, g, dtype):
        super().__init__()
        self.heads = heads
        self.ln1_w, self.ln1_b = nn.Parameter(torch.ones(dim, dtype=dtype)), nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.qkv = _normal((dim, 3 * dim), g, dim, dtype)
        self.out = _normal((dim, dim), g, dim, dtype)
        self.ln2_w, self.ln2_b = nn.Parameter(torch.ones(dim, dtype=dtype)), nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.fc1 = _normal((dim, 4 * dim), g, dim, dtype)
        self.fc1_b = nn.Parameter(torch.zeros(4 * dim, dtype=dtype))
        self.fc2 = _normal((4 * dim, dim), g, dim, dtype)
        self.fc2_b = nn.Parameter(torch.zeros(dim, dtype=dtype))

    def forward(self, x):
        t, d = x.shape
        hd = d // self.heads
        h = F.layer_norm(x, (d,), self.ln1_w, self.ln1_b)
        q, k, v = (h @ self.qkv).split(d, dim=1)
        q, k, v = (z.view(t, self.heads, hd).transpose(0, 1) for z in (q, k, v))
        scores = q @ k.transpose(1, 2) / math.sqrt(hd)
        causal = torch.ones(t, t, dtype=torch.bool).triu(1)
        att = scores.masked_fill(causal, float("-inf")).softmax(-1)
        x = x + (att @ v).transpose(0, 1).reshape(t, d) @ self.out
        h = F.layer_norm(x, (d,), self.ln2_w, self.ln2_b)
        return x + F.gelu(h @ self.fc1 + self.fc1_b) @ self.fc2 + self.fc2_b


class ToyLM(nn.Module):
    """Pre-norm causal transformer over an embedding sequence; the LM head is untied."""

    def __init__(self, vocab: int, dim: int = 16, heads: int = 2, layers: int = 1, seed: int = 0,
                 dtype=torch.float64):
        super().__init__()
        if dim % heads or dim % 2:
            raise ShapeMismatch(f"dim {dim} must be even and divisible by heads {heads}")
        g = torch.Generator().manual_seed(seed)
        self.vocab, self.dim = vocab, dim
        self.blocks = nn.ModuleList([Block(dim, heads, g, dtype) for _ in range(layers)])
        self.lnf_w, self.lnf_b = nn.Parameter(torch.ones(dim, dtype=dtype)), nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.head = _normal((dim, vocab), g, dim, dtype)

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        if emb.ndim != 2 or emb.shape[1] != self.dim:
            raise ShapeMismatch(f"expected T x {self.dim} embeddings, got {tuple(emb.shape)}")
        x = emb + sinusoidal_positions(emb.shape[0], self.dim, emb.dtype)
        for b in self.blocks:
            x = b(x)
        return F.layer_norm(x, (self.dim,), self.lnf_w, self.lnf_b) @ self.head

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def masked_nll(logits: torch.Tensor, targets: Sequence[int], mask: Sequence[int]) -> torch.Tensor:
    """Mean cross-entropy over positions with mask 1; targets elsewhere are never read."""
    if logits.shape[0] != len(targets) or len(targets) != len(mask):
        raise ShapeMismatch(f"logits {tuple(logits.shape)}, {len(targets)} targets, {len(mask)} mask entries")
    pos = [t for t, m in enumerate(mask) if m]
    if not pos:
        raise EmptyMask("loss mask selects no positions")
    tgt = [targets[t] for t in pos]
    if any(x == IGNORE_INDEX or not 0 <= x < logits.shape[1] for x in tgt):
        raise ShapeMismatch("masked position has no valid target id")
    idx = torch.tensor(pos)
    return F.cross_entropy(logits[idx], torch.tensor(tgt))


def sequence_loss(lm: ToyLM, seq: InterleavedSequence) -> torch.Tensor:
    return masked_nll(lm(seq.embeddings), seq.target_ids, prediction_mask(seq.loss_mask))


# ---------------------------------------------------------------- pipeline

def ensure_prefix(record: InstructionRecord) -> InstructionRecord:
    if any(IMAGE_TOKEN in t.text for t in record.conversation):
        return record
    return prepend_prefix(record)


class RegionPipeline(nn.Module):
    """Feature maps + boxes + text -> interleaved sequence -> toy LM.

    The vision encoder is represented by the file-loaded layer stack and
    has no parameters here; the image projector maps the mean-pooled
    penultimate layer to the model width.
    """

    GROUPS = ("extractor.mix", "extractor.proj", "image_proj", "embed", "lm")

    def __init__(self, vocab: Vocab, channels: int, dim: int = 16, heads: int = 2, layers: int = 1,
                 pool: int = DEFAULT_POOL, samples: int = DEFAULT_SAMPLES, seed: int = 0, dtype=torch.float64):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.vocab = vocab
        self.extractor = RegionFeatureExtractor(channels, dim, pool, samples, generator=g, dtype=dtype)
        self.image_proj_w = _normal((dim, channels), g, channels, dtype)
        self.image_proj_b = nn.Parameter(torch.zeros(dim, dtype=dtype))
        self.embed = _normal((len(vocab), dim), g, 1, dtype)
        self.lm = ToyLM(len(vocab), dim, heads, layers, seed=seed + 1, dtype=dtype)

    def group_of(self, name: str) -> str:
        if name.startswith("extractor.mix"):
            return "extractor.mix"
        if name.startswith("extractor.proj"):
            return "extractor.proj"
        if name.startswith("image_proj"):
            return "image_proj"
        return "embed" if name == "embed" else "lm"

    def groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        out = {k: [] for k in self.GROUPS}
        for name, p in self.named_parameters():
            out[self.group_of(name)].append((name, p))
        return out

    def sequence(self, record: InstructionRecord, stack: LayerStack, img: ImageSize) -> InterleavedSequence:
        record = ensure_prefix(validate_record(record))
        wanted = referenced_regions(record)
        boxes = record.region_boxes()
        feats = self.extractor(stack, [boxes[i] for i in wanted], img)
        image = stack.penultimate().to(self.image_proj_w.dtype).mean(dim=(1, 2))
        image_emb = self.image_proj_w @ image + self.image_proj_b
        return assemble(record, self.embed, image_emb, dict(zip(wanted, feats)), self.vocab)

    def loss(self, record: InstructionRecord, stack: LayerStack, img: ImageSize) -> torch.Tensor:
        return sequence_loss(self.lm, self.sequence(record, stack, img))


# ---------------------------------------------------------------- training config

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-5
    schedule: str = "cosine"
    batch_size: int = 16
    epochs: int = 2
    warmup_iters: int = 3000
    warmup_ratio: float = 0.003
    weight_decay: float = 0.0
    max_steps: int = 0
    train_extractor: bool = True
    train_projector: bool = False
    train_llm: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.lr) and self.lr >= 0):
            raise InputError(f"learning rate must be finite and >= 0, got {self.lr}")
        if self.schedule not in ("cosine", "constant"):
            raise InputError(f"unknown schedule {self.schedule!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.max_steps < 0 or self.warmup_iters < 0:
            raise InputError("batch_size and epochs must be >= 1; max_steps and warmup_iters >= 0")
        if not 0 <= self.warmup_ratio <= 1 or self.weight_decay < 0:
            raise InputError("warmup_ratio must lie in [0, 1] and weight_decay be >= 0")

    def total_steps(self, n_records: int) -> int:
        if self.max_steps:
            return self.max_steps
        return self.epochs * max(1, math.ceil(n_records / self.batch_size))

    def warmup_steps(self, total: int) -> int:
        """Explicit iteration count wins; the ratio applies when it is 0."""
        w = self.warmup_iters if self.warmup_iters else math.ceil(self.warmup_ratio * total)
        if w > total:
            raise InputError(f"warmup of {w} steps exceeds the {total} total steps")
        return w

    def trainable_groups(self) -> set[str]:
        out = set()
        if self.train_extractor:
            out |= {"extractor.mix", "extractor.proj"}
        if self.train_projector:
            out.add("image_proj")
        if self.train_llm:
            out |= {"embed", "lm"}
        return out

    def with_overrides(self, values: Mapping[str, str]) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(self)}
        kw = {}
        for key, raw in values.items():
            if key not in fields:
                raise InputError(f"unknown config key {key!r}")
            kw[key] = _coerce(type(getattr(self, key)), key, raw)
        return dataclasses.replace(self, **kw)


def _coerce(kind, key, raw):
    if not isinstance(raw, str):
        return kind(raw)
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw)
    except ValueError as exc:
        raise InputError(f"config key {key!r}: cannot read {raw!r} as {kind.__name__}") from exc


_STAGE2 = dict(train_extractor=True, train_projector=True, train_llm=True)
PRESETS = {
    "stage1": TrainConfig(),
    "stage2": TrainConfig(epochs=1, **_STAGE2),
    "vg": TrainConfig(epochs=4, **_STAGE2),
    "v7w": TrainConfig(lr=1e-6, epochs=2, **_STAGE2),
    "vcr": TrainConfig(epochs=1, **_STAGE2),
}


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    """Linear warmup, then cosine decay to 0 (or flat for ``constant``)."""
    warm = cfg.warmup_steps(total)
    if warm and step < warm:
        return cfg.lr * (step + 1) / warm
    if cfg.schedule == "constant" or total <= warm:
        return cfg.lr
    progress = (step - warm) / max(1, total - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def apply_freeze(model: RegionPipeline, cfg: TrainConfig) -> list[nn.Parameter]:
    keep = cfg.trainable_groups()
    params = []
    for group, named in model.groups().items():
        for _, p in named:
            p.requires_grad_(group in keep)
            if group in keep:
                params.append(p)
    return params


Example = tuple  # (record, LayerStack, ImageSize)


def train(model: RegionPipeline, examples: Sequence[Example], cfg: TrainConfig, seed: int = 0,
          on_step: Callable[[int, float, float], None] | None = None) -> list[float]:
    """AdamW over the unfrozen groups with the configured schedule; returns per-step batch loss.

    Batches are drawn in a seeded order each epoch.
    """
    params = apply_freeze(model, cfg)
    if not params:
        raise InputError("every parameter group is frozen")
    total = cfg.total_steps(len(examples))
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    g = torch.Generator().manual_seed(seed)
    order: list[int] = []
    curve = []
    for step in range(total):
        lr = lr_at(cfg, step, total)
        for pg in opt.param_groups:
            pg["lr"] = lr
        batch = []
        while len(batch) < min(cfg.batch_size, len(examples)):
            if not order:
                order = torch.randperm(len(examples), generator=g).tolist()
            batch.append(examples[order.pop(0)])
        opt.zero_grad()
        loss = torch.stack([model.loss(*ex) for ex in batch]).mean()
        loss.backward()
        opt.step()
        curve.append(loss.item())
        if on_step:
            on_step(step, lr, curve[-1])
    return curve


def overfit_one(model: RegionPipeline, example: Example, lr: float = 0.05, steps: int = 500,
                target: float | None = 0.05) -> list[float]:
    """Plain gradient descent on one example; stops early once below ``target``."""
    params = [p for p in model.parameters() if p.requires_grad]
    curve = []
    for _ in range(steps):
        loss = model.loss(*example)
        curve.append(loss.item())
        if not math.isfinite(curve[-1]) or curve[-1] > 10 * curve[0]:
            raise Divergence(f"loss {curve[-1]:.4g} exceeds 10x the initial {curve[0]:.4g}")
        if target is not None and curve[-1] < target:
            break
        grads = torch.autograd.grad(loss, params)
        with torch.no_grad():
            for p, gr in zip(params, grads):
                p -= lr * gr
    return curve


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheck:
    per_group: dict[str, float]
    zero_checks: int

    @property
    def max_error(self) -> float:
        return max(self.per_group.values())


def _rel_err(a: float, n: float) -> float:
    if a == n:
        return 0.0
    return abs(a - n) / max(abs(a), abs(n))


def grad_check(model: nn.Module, groups: Mapping[str, list[tuple[str, nn.Parameter]]],
               loss_fn: Callable[[], torch.Tensor], eps: float = 1e-5, per_group: int = 32,
               seed: int = 0, picks: dict | None = None) -> GradCheck:
    """Central differences on sampled entries of every group against autograd.

    ``picks`` maps group -> list of (param name, flat index) and overrides
    sampling, which lets an eps sweep reuse the same entries.
    """
    named = dict(model.named_parameters())
    for p in named.values():
        if p.dtype != torch.float64:
            raise InputError("gradient check requires float64 parameters")
    model.zero_grad()
    loss_fn().backward()
    grads = {k: p.grad.detach().clone().reshape(-1) for k, p in named.items() if p.grad is not None}
    if picks is None:
        picks = sample_entries(groups, per_group, seed)
    result, zeros = {}, 0
    with torch.no_grad():
        for group, entries in picks.items():
            worst = 0.0
            for name, j in entries:
                flat = named[name].data.view(-1)
                old = flat[j].item()
                flat[j] = old + eps
                up = loss_fn().item()
                flat[j] = old - eps
                down = loss_fn().item()
                flat[j] = old
                numeric = (up - down) / (2 * eps)
                analytic = grads[name][j].item() if name in grads else 0.0
                zeros += analytic == 0.0 and numeric == 0.0
                worst = max(worst, _rel_err(analytic, numeric))
            result[group] = worst
    return GradCheck(result, zeros)


def sample_entries(groups, per_group: int, seed: int) -> dict[str, list[tuple[str, int]]]:
    g = torch.Generator().manual_seed(seed)
    picks = {}
    for group, named in groups.items():
        pool = [(name, j) for name, p in named for j in range(p.numel())]
        if not pool:
            continue
        k = min(per_group, len(pool))
        picks[group] = [pool[j] for j in torch.randperm(len(pool), generator=g)[:k].tolist()]
    return picks

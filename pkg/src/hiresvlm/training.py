"""Toy-scale training: sum-reduced loss, token-count gradient normalisation,
cosine decay, SGD over the trainable set only."""

from __future__ import annotations

import math
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .decoder import DecoderGeometry, Model, build_model, forward
from .errors import ConfigurationError, InputError, NumericError, TrainingDivergedError
from .tensor import Rng, Tensor, backward, log_softmax_rows, select, sum_
from .vision import VitGeometry

STAGE_LEARNING_RATES = {1: 2e-4, 2: 1e-4, 3: 5e-5}

# toy scale: tiny widths need a far larger step than the full-size presets
TOY_VIT = VitGeometry(base_resolution=28, patch_size=14, d_vit=16, layers=1, heads=2, target_resolution=56)
TOY_DECODER = DecoderGeometry(d=16, layers=2, heads=2, vocab_size=32, interval=1, max_text_len=8)
TOY_LEARNING_RATE = 0.5
TOY_OUT_STD = 0.02
TOY_EFFECTIVE_BATCH = 16


@dataclass
class StageConfig:
    learning_rate: float
    total_steps: int
    effective_batch: int = 128
    micro_batch: int = 8
    seed: int = 0
    schedule: str = "cosine"

    def __post_init__(self):
        if self.total_steps < 0:
            raise ConfigurationError("total_steps must be non-negative")
        if self.micro_batch < 1 or self.effective_batch < 1:
            raise ConfigurationError("batch sizes must be positive")
        if self.micro_batch > self.effective_batch:
            raise ConfigurationError("micro_batch exceeds effective_batch")
        if self.effective_batch % self.micro_batch:
            raise ConfigurationError("effective_batch must be divisible by micro_batch")
        if self.schedule != "cosine":
            raise ConfigurationError(f"unsupported schedule {self.schedule!r}")

    @classmethod
    def for_stage(cls, stage: int, total_steps: int, **overrides) -> "StageConfig":
        if stage not in STAGE_LEARNING_RATES:
            raise ConfigurationError(f"unknown stage {stage}")
        overrides.setdefault("learning_rate", STAGE_LEARNING_RATES[stage])
        return cls(total_steps=total_steps, **overrides)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        raise ConfigurationError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise InputError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def loss_sum(logits: Tensor, targets: Sequence[int], output_mask: Sequence[bool]) -> tuple[Tensor, int]:
    """Summed token cross-entropy over masked positions, and the number of those positions."""
    mask = np.asarray(output_mask, dtype=bool)
    targets = np.asarray(targets, dtype=np.int64)
    if mask.shape != (logits.shape[0],) or targets.shape != mask.shape:
        raise InputError("targets and mask must have one entry per logit row")
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise InputError("output mask selects no positions")
    logp = log_softmax_rows(logits)
    return -sum_(select(logp, rows, targets[rows])), int(rows.size)


class SGD:
    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        for p in self.params.values():
            if p.grad is not None:
                p.data = p.data - lr * p.grad


def accumulate_and_step(optimizer: SGD, token_count_total: int, lr: float) -> None:
    """Scale the accumulated (summed) gradients by 1/token_count_total, step, clear."""
    if token_count_total <= 0:
        raise InputError("token count must be positive")
    for p in optimizer.params.values():
        if p.grad is not None:
            p.grad = p.grad / token_count_total
    optimizer.step(lr)
    optimizer.zero_grad()


# synthetic rectangle task

PAD, BOS, EOS = 0, 1, 2
ASK_COLOR, ASK_WHERE, ASK_BOTH = 3, 4, 5
COLOR_TOKENS = (6, 7, 8, 9)
QUADRANT_TOKENS = (10, 11, 12, 13)
COLORS = np.array([[1.0, 0.1, 0.1], [0.1, 1.0, 0.1], [0.1, 0.1, 1.0], [1.0, 1.0, 0.1]])
MIN_VOCAB = 14


@dataclass
class Example:
    image: np.ndarray
    prompt: list[int]
    target: list[int]
    color: int
    quadrant: int

    def sequence(self) -> tuple[list[int], list[int], list[bool]]:
        """Decoder inputs, next-token labels and the output-position mask."""
        ids = self.prompt + self.target
        mask = [i >= len(self.prompt) - 1 for i in range(len(ids) - 1)]
        return ids[:-1], ids[1:], mask


@dataclass
class SyntheticTask:
    """Coloured rectangle in one quadrant; questions ask for colour, quadrant or both."""

    resolution: int
    seed: int = 0
    noise: float = 0.05

    @classmethod
    def for_geometry(cls, vg: VitGeometry, seed: int = 0) -> "SyntheticTask":
        return cls(vg.target_resolution, seed)

    def example(self, index: int) -> Example:
        rng = Rng(self.seed).spawn(index)
        r = self.resolution
        half = r // 2
        color = int(rng.integers(0, 4))
        quadrant = int(rng.integers(0, 4))
        question = int(rng.integers(0, 3))
        img = np.clip(rng.uniform((r, r, 3)) * self.noise, 0.0, 1.0)
        h = int(rng.integers(max(2, half // 3), half - 1))
        w = int(rng.integers(max(2, half // 3), half - 1))
        top = (quadrant // 2) * half + int(rng.integers(0, half - h + 1))
        left = (quadrant % 2) * half + int(rng.integers(0, half - w + 1))
        img[top:top + h, left:left + w] = COLORS[color]
        if question == 0:
            q, target = ASK_COLOR, [COLOR_TOKENS[color], EOS]
        elif question == 1:
            q, target = ASK_WHERE, [QUADRANT_TOKENS[quadrant], EOS]
        else:
            q, target = ASK_BOTH, [COLOR_TOKENS[color], QUADRANT_TOKENS[quadrant], EOS]
        return Example(img, [BOS, q], target, color, quadrant)

    def examples(self, start: int, count: int) -> list[Example]:
        return [self.example(i) for i in range(start, start + count)]


def prefetch(items: Iterable, maxsize: int = 4) -> Iterator:
    """Produce ``items`` on a worker thread through a bounded queue; the producer blocks when full."""
    q: queue.Queue = queue.Queue(maxsize=maxsize)
    done = object()
    errors: list[BaseException] = []

    def worker():
        try:
            for item in items:
                q.put(item)
        except BaseException as exc:  # surfaced to the consumer
            errors.append(exc)
        finally:
            q.put(done)

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    while True:
        item = q.get()
        if item is done:
            break
        yield item
    t.join()
    if errors:
        raise errors[0]


# training loop


def toy_model(seed: int = 0, out_std: float = TOY_OUT_STD) -> Model:
    return build_model(TOY_DECODER, TOY_VIT, seed=seed, out_std=out_std)


def toy_config(stage: int, steps: int, seed: int = 0, effective_batch: int = TOY_EFFECTIVE_BATCH,
               micro_batch: int = 8) -> StageConfig:
    """Stage preset rescaled to the toy model: same cosine schedule, toy learning rate."""
    if stage not in STAGE_LEARNING_RATES:
        raise ConfigurationError(f"unknown stage {stage}")
    scale = STAGE_LEARNING_RATES[stage] / STAGE_LEARNING_RATES[1]
    return StageConfig(TOY_LEARNING_RATE * scale, steps, effective_batch, min(micro_batch, effective_batch), seed)


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)
    frozen_start: dict[str, str] = field(default_factory=dict)
    frozen_end: dict[str, str] = field(default_factory=dict)

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]


def example_loss(model: Model, ex: Example, index: int, seed: int, ablate_vision: bool = False,
                 train_mode: bool = True) -> tuple[Tensor, int]:
    inputs, labels, mask = ex.sequence()
    if ablate_vision:
        vg = model.vg
        vision = Tensor(np.zeros((vg.total_tokens, vg.d_vit)))
    else:
        vision = model.encode(ex.image, train_mode=train_mode, rng=Rng(seed).spawn(10_000_000 + index))
    return loss_sum(forward(model, inputs, vision), labels, mask)


def train_step(model: Model, optimizer: SGD, batch: Sequence[tuple[int, Example]], micro_batch: int, lr: float,
               seed: int, ablate_vision: bool = False) -> tuple[float, int]:
    """One optimiser update over ``batch``; returns (summed loss, output tokens)."""
    total_loss, total_tokens = 0.0, 0
    for start in range(0, len(batch), micro_batch):
        micro_loss = None
        for index, ex in batch[start:start + micro_batch]:
            try:
                loss, n = example_loss(model, ex, index, seed, ablate_vision)
            except NumericError as exc:
                raise TrainingDivergedError(f"example {index}: {exc}") from exc
            micro_loss = loss if micro_loss is None else micro_loss + loss
            total_tokens += n
        value = micro_loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(f"non-finite loss {value} at examples {batch[start][0]}..")
        total_loss += value
        backward(micro_loss)
    accumulate_and_step(optimizer, total_tokens, lr)
    return total_loss, total_tokens


def train(model: Model, task: SyntheticTask, cfg: StageConfig, ablate_vision: bool = False,
          on_step: Callable[[dict], None] | None = None) -> TrainingLog:
    trainable = model.trainable_parameters()
    optimizer = SGD(trainable)
    optimizer.zero_grad()
    log = TrainingLog(frozen_start=model.frozen_checksums())

    def batches():
        for step in range(cfg.total_steps):
            first = step * cfg.effective_batch
            yield step, list(zip(range(first, first + cfg.effective_batch),
                                 task.examples(first, cfg.effective_batch)))

    for step, batch in prefetch(batches(), maxsize=2):
        lr = cosine_lr(step, cfg.total_steps, cfg.learning_rate)
        loss, tokens = train_step(model, optimizer, batch, cfg.micro_batch, lr, cfg.seed, ablate_vision)
        record = {"step": step, "loss": loss / tokens, "loss_sum": loss, "tokens": tokens, "lr": lr}
        log.records.append(record)
        if on_step is not None:
            on_step(record)
    log.frozen_end = model.frozen_checksums()
    return log

"""Three-stage training curriculum: connector-only pretraining with a frozen
transformer, then two fine-tuning stages over a growing task mix, using
masked next-token loss, AdamW, and a cosine schedule with linear warmup.

Mock encoders are never trainable; stage 1 additionally freezes every
transformer parameter.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .model import PalModel, SequenceLayout
from .rng import SplitMix64, derive_seed
from .synth import (EncoderProfile, VOCAB, encode_batch, generate_sample)
from .tensor import NonFiniteError, Tensor, backward, tape, zero_grads

TASK_MIX_BY_STAGE = {
    1: ("classify",),
    2: ("classify", "first_event"),
    3: ("classify", "first_event", "count"),
}

GRAD_ACCUM = 4


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"non-finite loss at step {step}: {cause}")
        self.step = step


@dataclass(frozen=True)
class StageConfig:
    stage_id: int
    steps: int
    batch_size: int = 16
    peak_lr: float = 1e-4
    warmup_ratio: float = 0.03
    task_mix: tuple[str, ...] = ("classify",)

    def __post_init__(self):
        if self.stage_id not in (1, 2, 3):
            raise ValueError(f"stage_id must be 1, 2 or 3, got {self.stage_id}")


def default_stages(steps: tuple[int, int, int] = (2000, 2000, 3000)) -> list[StageConfig]:
    return [
        StageConfig(1, steps[0], peak_lr=1e-3, warmup_ratio=0.05,
                    task_mix=TASK_MIX_BY_STAGE[1]),
        StageConfig(2, steps[1], peak_lr=1e-4, warmup_ratio=0.03,
                    task_mix=TASK_MIX_BY_STAGE[2]),
        StageConfig(3, steps[2], peak_lr=1e-4, warmup_ratio=0.03,
                    task_mix=TASK_MIX_BY_STAGE[3]),
    ]


# ---------------------------------------------------------------------------
# loss and schedule

def masked_next_token_loss(logits: Tensor, targets: np.ndarray,
                           response_mask: np.ndarray) -> Tensor:
    """Mean cross entropy over masked positions only.

    logits: (B, L, V); targets: (B, L) token ids aligned with logits;
    response_mask: (B, L) booleans. Non-masked positions contribute exactly
    zero gradient.
    """
    targets = np.asarray(targets)
    mask = np.asarray(response_mask, dtype=bool)
    if logits.shape[:2] != targets.shape or targets.shape != mask.shape:
        raise ValueError(f"shape mismatch: logits {logits.shape}, targets "
                         f"{targets.shape}, mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("response mask selects no positions")
    b, l, v = logits.shape
    ce = T.cross_entropy(T.reshape(logits, (b * l, v)), targets.reshape(-1))
    picked = T.mul(ce, T.const(mask.reshape(-1).astype(np.float64)))
    return T.scale(T.tsum(picked), 1.0 / count)


def cosine_lr(step: int, total_steps: int, peak: float,
              warmup_ratio: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = int(warmup_ratio * total_steps)
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    denom = max(total_steps - warmup, 1)
    progress = (step - warmup) / denom
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.data -= lr * self.weight_decay * p.data

    def zero_grad(self) -> None:
        zero_grads(self.params.values())


# ---------------------------------------------------------------------------
# data plumbing

def build_batch(master_seed: int, stage_id: int, step: int, size: int,
                task_mix: tuple[str, ...], profiles: list[EncoderProfile],
                difficulty: str = "easy"):
    """Deterministic batch: token ids, next-token targets/mask, encoder feats."""
    rng = SplitMix64(derive_seed(master_seed, "mix", stage_id, step))
    samples = [
        generate_sample(derive_seed(master_seed, "sample", stage_id, step, i),
                        rng.choice(task_mix), difficulty)
        for i in range(size)
    ]
    tokens = np.asarray([s.tokens for s in samples], dtype=np.int64)
    mask = np.asarray([s.response_mask for s in samples], dtype=bool)
    grids = np.stack([s.grid.values for s in samples])
    feats = {p.name: encode_batch(p, grids) for p in profiles}
    return samples, tokens, mask, feats


def heldout_samples(master_seed: int, stage_id: int, task: str, n: int,
                    difficulty: str = "easy"):
    return [generate_sample(derive_seed(master_seed, "heldout", stage_id, task, i),
                            task, difficulty) for i in range(n)]


def evaluate_accuracy(model: PalModel, profiles: list[EncoderProfile],
                      samples, batch: int = 128) -> float:
    """Exact-match greedy accuracy on the answer token of each sample."""
    hits = 0
    for lo in range(0, len(samples), batch):
        chunk = samples[lo:lo + batch]
        prompts = np.asarray([s.prompt_tokens for s in chunk], dtype=np.int64)
        grids = np.stack([s.grid.values for s in chunk])
        feats = {p.name: encode_batch(p, grids) for p in profiles}
        gen = model.decode_greedy_batch(prompts, feats, max_new=3)
        answers = np.asarray([s.response_tokens[0] for s in chunk])
        hits += int((gen[:, 0] == answers).sum())
    return hits / len(samples)


# ---------------------------------------------------------------------------
# stages

@dataclass
class StageReport:
    stage_id: int
    losses: list[float]
    heldout_accuracy: dict[str, float]
    wall_clock: float
    steps: int

    @property
    def mean_accuracy(self) -> float:
        return sum(self.heldout_accuracy.values()) / len(self.heldout_accuracy)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


@dataclass
class CurriculumReport:
    stages: list[StageReport] = field(default_factory=list)


MetricsSink = Callable[[int, int, float, float], None]  # step, stage, lr, loss


def run_stage(stage: StageConfig, model: PalModel,
              profiles: list[EncoderProfile], master_seed: int,
              metrics: Optional[MetricsSink] = None,
              eval_n: int = 500, difficulty: str = "easy",
              stats=None) -> StageReport:
    """Run one curriculum stage; only the stage's trainable set is updated.

    Gradient accumulation (factor 4) is realized by concatenating the four
    micro-batches into one forward pass; with the fixed per-sample mask
    size this yields exactly the averaged accumulated gradient.
    """
    frozen: list[Tensor] = []
    if stage.stage_id == 1:
        trainable = model.connector_parameters()
        # Marking the frozen transformer as grad-free keeps the text-only
        # prefix of the graph off the tape entirely.
        frozen = [p for p in model.transformer_parameters().values()
                  if p.requires_grad]
        for p in frozen:
            p.requires_grad = False
    else:
        trainable = model.named_parameters()
    opt = AdamW(trainable)
    losses: list[float] = []
    t0 = time.perf_counter()
    per_step = stage.batch_size * GRAD_ACCUM

    try:
        for step in range(stage.steps):
            _, tokens, mask, feats = build_batch(
                master_seed, stage.stage_id, step, per_step, stage.task_mix,
                profiles, difficulty)
            layout = layout_for_tokens(tokens, model)
            lr = cosine_lr(step, stage.steps, stage.peak_lr, stage.warmup_ratio)
            try:
                with tape() as tp:
                    logits = model.forward_batch(tokens, layout, feats,
                                                 stats=stats)
                    loss = masked_next_token_loss(
                        T.narrow(logits, 1, 0, tokens.shape[1] - 1),
                        tokens[:, 1:], mask[:, 1:])
                opt.zero_grad()
                backward(loss, tp)
            except NonFiniteError as exc:
                raise TrainingDivergedError(step, exc) from exc
            opt.step(lr)
            val = loss.item()
            losses.append(val)
            if metrics is not None:
                metrics(step, stage.stage_id, lr, val)
    finally:
        for p in frozen:
            p.requires_grad = True

    acc = {}
    for task in stage.task_mix:
        samples = heldout_samples(master_seed, stage.stage_id, task,
                                  max(eval_n // len(stage.task_mix), 1),
                                  difficulty)
        acc[task] = evaluate_accuracy(model, profiles, samples)
    return StageReport(stage.stage_id, losses, acc,
                       time.perf_counter() - t0, stage.steps)


def layout_for_tokens(tokens: np.ndarray, model: PalModel) -> SequenceLayout:
    # All synthetic templates share one shape: 2 system + 4 question +
    # answer marker, then the 2-token response.
    lt = tokens.shape[1]
    return SequenceLayout(2, model.conn_cfg.n_latents, lt - 4, 2)


def run_curriculum(model: PalModel, stages: list[StageConfig],
                   profiles: list[EncoderProfile], master_seed: int,
                   metrics: Optional[MetricsSink] = None,
                   eval_n: int = 500, difficulty: str = "easy",
                   on_stage_end: Optional[Callable] = None) -> CurriculumReport:
    """Run stages in order, parameters carried forward between stages."""
    ids = [s.stage_id for s in stages]
    if ids != sorted(ids):
        raise ValueError(f"stages out of order: {ids}")
    report = CurriculumReport()
    for stage in stages:
        sr = run_stage(stage, model, profiles, master_seed, metrics=metrics,
                       eval_n=eval_n, difficulty=difficulty)
        report.stages.append(sr)
        if on_stage_end is not None:
            on_stage_end(stage, sr)
    return report


def smoothed(values, window: int = 100) -> list[float]:
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out

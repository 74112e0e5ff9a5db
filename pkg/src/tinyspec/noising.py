"""Noise-injected supervised fine-tuning.

During training, one short segment of each response is replaced by "ahead
noise": every noised position draws a token uniformly from the gold tokens
before it. Labels stay gold, so the model learns to predict the right
continuation even when its visible context is partially wrong — the exact
situation a parallel (Jacobi-style) decoder puts it in at inference time.
Segment length 0 disables noising and reduces the loss to plain SFT.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import PAD, Corpus, SftSample
from .model import TransformerWeights, backward_batch, forward_batch
from .numerics import (
    IGNORE_MARK,
    AdamState,
    Parameter,
    adam_step,
    cross_entropy,
    log_softmax_rows_f64,
)

SPAN_POLICIES = ("random", "ppl")


@dataclass(frozen=True)
class NoiseConfig:
    segment_len: int = 4
    policy: str = "random"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.segment_len < 0:
            raise ValueError("segment_len must be >= 0")
        if self.policy not in SPAN_POLICIES:
            raise ValueError(f"policy must be one of {SPAN_POLICIES}")


@dataclass(frozen=True)
class NoiseSpan:
    """Inclusive token-index range [start, end] in the full sequence; empty when end < start."""

    start: int
    end: int

    @property
    def length(self) -> int:
        return max(0, self.end - self.start + 1)


@dataclass
class NoisySample:
    input_ids: np.ndarray  # gold sequence with the span overwritten by noise
    labels: np.ndarray  # gold sequence, prompt region marked IGNORE_MARK
    span: NoiseSpan


def sample_ahead_noise(gold: list[int] | np.ndarray, pos: int, rng: np.random.Generator, vocab_size: int = 259) -> int:
    """One noise token for position pos: uniform over the gold prefix multiset gold[:pos].

    An empty prefix (pos == 0) falls back to a uniform token from the whole
    vocabulary so the draw is always defined.
    """
    if pos < 0 or pos > len(gold):
        raise ValueError(f"pos {pos} outside gold sequence of length {len(gold)}")
    if pos == 0:
        return int(rng.integers(0, vocab_size))
    return int(gold[int(rng.integers(0, pos))])


def _empty_span(sample: SftSample) -> NoiseSpan:
    return NoiseSpan(sample.response_start, sample.response_start - 1)


def choose_span_random(sample: SftSample, segment_len: int, rng: np.random.Generator) -> NoiseSpan:
    """Uniformly placed span of segment_len tokens inside the response region.

    The length is clamped to the response length; segment_len 0 yields the
    empty span and consumes no randomness.
    """
    if segment_len == 0:
        return _empty_span(sample)
    resp_len = len(sample.response)
    eff = min(segment_len, resp_len)
    lo = sample.response_start
    hi = sample.response_end - eff + 1
    start = int(rng.integers(lo, hi + 1))
    return NoiseSpan(start, start + eff - 1)


def response_token_losses(weights: TransformerWeights, sample: SftSample) -> np.ndarray:
    """Per-token cross entropy of each gold response token under a clean forward, float64."""
    full = np.asarray(sample.full_tokens(), dtype=np.int64)
    logits, _ = forward_batch(weights, full[None, :-1])
    rows = logits[0, sample.response_start - 1 : sample.response_end]
    logp = log_softmax_rows_f64(rows)
    targets = full[sample.response_start : sample.response_end + 1]
    return -logp[np.arange(len(targets)), targets]


def _window_argmin(losses: np.ndarray, eff: int) -> int:
    """Offset of the minimal-sum window of eff tokens; ties go to the smallest offset."""
    sums = np.convolve(losses, np.ones(eff, dtype=np.float64), mode="valid")
    return int(np.argmin(sums))


def choose_span_ppl(weights: TransformerWeights, sample: SftSample, segment_len: int) -> NoiseSpan:
    """Span whose gold tokens the model already predicts best (lowest summed loss).

    Scores come from one clean teacher-forced forward of the current weights;
    among equal-sum windows the smallest start index wins.
    """
    if segment_len == 0:
        return _empty_span(sample)
    eff = min(segment_len, len(sample.response))
    losses = response_token_losses(weights, sample)
    start = sample.response_start + _window_argmin(losses, eff)
    return NoiseSpan(start, start + eff - 1)


def apply_noise(sample: SftSample, span: NoiseSpan, rng: np.random.Generator) -> NoisySample:
    """Overwrite the span with ahead noise; labels stay gold with the prompt ignored.

    Draws are independent, left to right, each from the gold prefix before its
    own position (never from already-noised tokens).
    """
    gold = np.asarray(sample.full_tokens(), dtype=np.int64)
    if span.length and not (sample.response_start <= span.start and span.end <= sample.response_end):
        raise ValueError(f"span {span} outside response region")
    input_ids = gold.copy()
    for pos in range(span.start, span.end + 1):
        input_ids[pos] = sample_ahead_noise(gold, pos, rng)
    labels = np.full_like(gold, IGNORE_MARK)
    labels[sample.response_start : sample.response_end + 1] = gold[sample.response_start : sample.response_end + 1]
    return NoisySample(input_ids=input_ids, labels=labels, span=span)


def pad_batch(noised: list[NoisySample]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a rectangle: (input_ids (B, T) PAD-filled, labels (B, T) IGNORE-filled)."""
    t = max(len(s.input_ids) for s in noised)
    input_ids = np.full((len(noised), t), PAD, dtype=np.int64)
    labels = np.full((len(noised), t), IGNORE_MARK, dtype=np.int64)
    for i, s in enumerate(noised):
        input_ids[i, : len(s.input_ids)] = s.input_ids
        labels[i, : len(s.labels)] = s.labels
    return input_ids, labels


def batch_loss(
    weights: TransformerWeights,
    input_ids: np.ndarray,
    labels: np.ndarray,
    want_grads: bool = False,
) -> tuple[float, int, dict[str, np.ndarray] | None]:
    """Teacher-forced loss: position t's logits score label t+1, averaged over counted labels.

    Returns (mean loss, counted label positions, grads or None).
    """
    logits, tape = forward_batch(weights, input_ids, record=want_grads)
    bsz, t, v = logits.shape
    targets = np.full((bsz, t), IGNORE_MARK, dtype=np.int64)
    targets[:, :-1] = labels[:, 1:]
    loss, dflat, count = cross_entropy(logits.reshape(bsz * t, v), targets.reshape(-1))
    if not want_grads:
        return loss, count, None
    grads = backward_batch(weights, tape, dflat.reshape(bsz, t, v))
    return loss, count, grads


LR_DECAYS = ("none", "cosine")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    warmup_steps: int = 0
    lr_decay: str = "none"

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if self.lr_decay not in LR_DECAYS:
            raise ValueError(f"lr_decay must be one of {LR_DECAYS}")


def _lr_at(schedule: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warmup to schedule.lr, then flat or cosine decay to zero."""
    if step < schedule.warmup_steps:
        return schedule.lr * (step + 1) / schedule.warmup_steps
    if schedule.lr_decay == "none":
        return schedule.lr
    span = max(1, total_steps - schedule.warmup_steps)
    progress = (step - schedule.warmup_steps) / span
    return schedule.lr * 0.5 * (1.0 + np.cos(np.pi * progress))


@dataclass
class TrainReport:
    steps: int = 0
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    tokens_seen: int = 0
    wall_seconds: float = 0.0


def _sample_rng(noise_seed: int, step: int, sample_index: int) -> np.random.Generator:
    """Independent per-sample stream so batch order and parallelism cannot change draws."""
    return np.random.default_rng([noise_seed, step, sample_index])


def make_noisy(
    sample: SftSample,
    noise: NoiseConfig,
    rng: np.random.Generator,
    weights: TransformerWeights | None = None,
) -> NoisySample:
    """Choose a span under the configured policy and apply ahead noise."""
    if noise.segment_len == 0:
        span = _empty_span(sample)
    elif noise.policy == "ppl":
        if weights is None:
            raise ValueError("ppl span policy needs current weights")
        span = choose_span_ppl(weights, sample, noise.segment_len)
    else:
        span = choose_span_random(sample, noise.segment_len, rng)
    return apply_noise(sample, span, rng)


def train(
    weights: TransformerWeights,
    corpus: Corpus,
    noise: NoiseConfig,
    schedule: TrainConfig,
) -> TrainReport:
    """Noise-injected SFT over the corpus; updates weights in place.

    Noise is resampled fresh at every step from per-(seed, step, sample)
    streams, so reruns with the same seeds are bit-identical. A non-finite
    loss aborts immediately.
    """
    if not corpus.samples:
        raise ValueError("empty training corpus")
    t0 = time.perf_counter()
    params = {name: Parameter(arr) for name, arr in weights.state_items()}
    states = {name: AdamState.for_param(p, lr=schedule.lr) for name, p in params.items()}
    order_rng = np.random.default_rng([schedule.seed, 0xD5])
    steps_per_epoch = -(-len(corpus.samples) // schedule.batch_size)
    total_steps = schedule.epochs * steps_per_epoch
    report = TrainReport()
    step = 0
    for epoch in range(schedule.epochs):
        order = order_rng.permutation(len(corpus.samples))
        epoch_losses: list[float] = []
        for lo in range(0, len(order), schedule.batch_size):
            idx = order[lo : lo + schedule.batch_size]
            noised = [
                make_noisy(corpus.samples[i], noise, _sample_rng(noise.seed, step, int(i)), weights)
                for i in idx
            ]
            input_ids, labels = pad_batch(noised)
            loss, count, grads = batch_loss(weights, input_ids, labels, want_grads=True)
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged at step {step}: loss={loss}")
            eff_lr = _lr_at(schedule, step, total_steps)
            for name, p in params.items():
                p.grad = grads[name]
                states[name].lr = eff_lr
                adam_step(p, states[name])
            report.step_losses.append(loss)
            report.tokens_seen += count
            epoch_losses.append(loss)
            step += 1
        report.epoch_losses.append(float(np.mean(epoch_losses)))
    report.steps = step
    report.wall_seconds = time.perf_counter() - t0
    return report


def denoise_accuracy(
    weights: TransformerWeights,
    corpus: Corpus,
    noise: NoiseConfig,
) -> float:
    """Greedy accuracy on the gold targets whose input context was just noised.

    For a span [i, j] the scored targets are positions i+1 .. j+1 (clipped to
    the response): each one is predicted with the noise directly in view.
    Spans are placed with the random policy from the config seed, so two
    models scored under the same config see identical noised inputs.
    """
    if noise.segment_len == 0:
        raise ValueError("denoise accuracy needs a non-empty noise segment")
    total = 0
    correct = 0
    for gi, sample in enumerate(corpus.samples):
        rng = _sample_rng(noise.seed, 0, gi)
        span = choose_span_random(sample, noise.segment_len, rng)
        noisy = apply_noise(sample, span, rng)
        logits, _ = forward_batch(weights, noisy.input_ids[None, :-1])
        gold = np.asarray(sample.full_tokens(), dtype=np.int64)
        t_lo = span.start + 1
        t_hi = min(span.end + 1, sample.response_end)
        for t in range(t_lo, t_hi + 1):
            total += 1
            correct += int(np.argmax(logits[0, t - 1])) == gold[t]
    if total == 0:
        raise ValueError("no scorable positions (responses shorter than the span?)")
    return correct / total

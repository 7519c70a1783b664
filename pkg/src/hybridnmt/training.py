"""Two-stage training: MLE pre-training, then knowledge-distillation
fine-tuning against a frozen teacher (token-level KL, sequence-level
teacher-corpus generation, or both).

Losses are per-sentence means of per-token terms, averaged over the batch;
PAD target positions are masked out everywhere, so appending padding never
changes a loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .inference import BeamConfig, beam_search, greedy_decode
from .model import ConfigError, Model
from .tokens import BOS_ID, EOS_ID, PAD_ID


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; training aborted."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 30
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.learning_rate < 0 or self.clip_norm <= 0:
            raise ValueError("learning_rate must be >= 0 and clip_norm > 0")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")


@dataclass
class KDConfig:
    """Distillation settings; ``teacher`` must be frozen before training."""

    teacher: Model
    lam: float = 1.0
    mode: str = "both"  # token_kl | sequence_level | both
    distill_beam: BeamConfig = field(default_factory=BeamConfig)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("the KL weight must be >= 0")
        if self.mode not in ("token_kl", "sequence_level", "both"):
            raise ValueError(f"unknown kd mode {self.mode!r}")


class Adam:
    """Adam over named parameters with global-norm gradient clipping."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], tc: TrainConfig):
        self.named_params = list(named_params)
        self.tc = tc
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def clip_gradients(self) -> float:
        """Scale all grads so the global L2 norm is at most clip_norm."""
        total = 0.0
        for _, p in self.named_params:
            if p.grad is not None:
                total += float(np.sum(p.grad * p.grad))
        norm = math.sqrt(total)
        if norm > self.tc.clip_norm:
            factor = self.tc.clip_norm / norm
            for _, p in self.named_params:
                if p.grad is not None:
                    p.grad = p.grad * factor
        return norm

    def step(self) -> None:
        tc = self.tc
        self.t += 1
        bc1 = 1.0 - tc.adam_beta1 ** self.t
        bc2 = 1.0 - tc.adam_beta2 ** self.t
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = tc.adam_beta1 * self.m[name] + (1 - tc.adam_beta1) * g
            v = self.v[name] = tc.adam_beta2 * self.v[name] + (1 - tc.adam_beta2) * (g * g)
            p.data -= tc.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + tc.adam_eps)

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None


def _pair_ce(model: Model, src: Sequence[int], tgt: Sequence[int]) -> Tensor:
    logits = model.forward_teacher_forced(src, tgt[:-1])
    return ad.cross_entropy(logits, tgt[1:], ignore_id=PAD_ID)


def mle_loss(model: Model, batch) -> Tensor:
    """Mean over the batch of per-sentence mean token cross-entropy."""
    if not batch:
        raise ValueError("mle_loss: empty batch")
    return ad.mean_tensors([_pair_ce(model, src, tgt) for src, tgt in batch])


def kd_loss(student: Model, teacher: Model, batch, kd: KDConfig) -> Tensor:
    """MLE term plus lam * mean token-wise KL(teacher || student), computed
    under teacher forcing on the batch targets. Returns a loss to minimize."""
    if not batch:
        raise ValueError("kd_loss: empty batch")
    if student.cfg.tgt_vocab != teacher.cfg.tgt_vocab:
        raise ConfigError(f"teacher/student target vocabularies differ "
                          f"({teacher.cfg.tgt_vocab} vs {student.cfg.tgt_vocab})")
    if kd.lam == 0.0:
        return mle_loss(student, batch)
    ce_terms, kl_terms = [], []
    for src, tgt in batch:
        tgt_in, tgt_out = tgt[:-1], np.asarray(tgt[1:])
        student_logits = student.forward_teacher_forced(src, tgt_in)
        ce_terms.append(ad.cross_entropy(student_logits, tgt[1:], ignore_id=PAD_ID))
        with ad.pause_tape():
            teacher_ls = _log_softmax_rows(teacher.forward_teacher_forced(src, tgt_in).data)
        keep = tgt_out != PAD_ID
        p = np.exp(teacher_ls) * keep[:, None]  # teacher distribution, constant
        n_kept = int(keep.sum())
        teacher_entropy_term = float(np.sum(p * teacher_ls))
        student_ls = ad.log_softmax(student_logits, axis=-1)
        cross = ad.sum_all(ad.mul(Tensor(p), student_ls))
        kl = ad.scale(ad.sub(Tensor(teacher_entropy_term), cross), 1.0 / n_kept)
        kl_terms.append(kl)
    return ad.add(ad.mean_tensors(ce_terms), ad.scale(ad.mean_tensors(kl_terms), kd.lam))


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def distill_corpus(teacher: Model, src_corpus: Sequence[Sequence[int]],
                   bc: BeamConfig) -> list[tuple[list[int], list[int]]]:
    """Pair each source with the teacher's best beam hypothesis (sequence-level
    distillation); deterministic given the teacher and beam settings."""
    pairs = []
    for src in src_corpus:
        best, _, _ = beam_search(teacher, src, bc)
        body = [t for t in best if t != EOS_ID]
        pairs.append((list(src), [BOS_ID] + body + [EOS_ID]))
    return pairs


@dataclass
class EpochStats:
    epoch: int
    loss: float
    token_accuracy: float


def _make_batches(corpus, batch_size: int, rng) -> list[list]:
    order = sorted(range(len(corpus)), key=lambda i: (len(corpus[i][1]), len(corpus[i][0])))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    for j in rng.permutation(len(chunks)):
        yield [corpus[i] for i in chunks[int(j)]]


def teacher_forced_accuracy(model: Model, pairs) -> float:
    """Fraction of non-PAD target tokens the argmax prediction gets right."""
    hits = total = 0
    with ad.pause_tape():
        for src, tgt in pairs:
            logits = model.forward_teacher_forced(src, tgt[:-1]).data
            ref = np.asarray(tgt[1:])
            keep = ref != PAD_ID
            hits += int((np.argmax(logits, axis=-1)[keep] == ref[keep]).sum())
            total += int(keep.sum())
    return hits / total if total else 0.0


def greedy_token_accuracy(model: Model, pairs, extra_len: int = 5) -> float:
    """Positional token match between greedy output and reference bodies;
    the denominator is max(len(pred), len(ref)), so length errors count."""
    hits = total = 0
    for src, tgt in pairs:
        ref = [t for t in tgt if t not in (BOS_ID, EOS_ID, PAD_ID)]
        pred = greedy_decode(model, src, max_len=len(ref) + extra_len)
        pred = [t for t in pred if t != EOS_ID]
        hits += sum(1 for a, b in zip(pred, ref) if a == b)
        total += max(len(pred), len(ref))
    return hits / total if total else 0.0


def train(model: Model, corpus, tc: TrainConfig,
          loss_fn: Callable[[Model, list], Tensor] = mle_loss,
          epoch_hook: Callable[[Model, EpochStats], bool] | None = None,
          accuracy_sample: int = 200) -> list[EpochStats]:
    """Minibatch Adam over ``loss_fn``; deterministic given tc.seed.

    ``epoch_hook`` may stop training early by returning True (e.g. a
    reached-target-accuracy check). Returns one EpochStats per epoch run.
    """
    if not corpus:
        raise ValueError("train: empty corpus")
    rng = ad.make_rng(tc.seed)
    model.set_trainable(True)
    opt = Adam(model.named_parameters(), tc)
    history: list[EpochStats] = []
    eval_pairs = corpus[:accuracy_sample]
    for epoch in range(tc.max_epochs):
        losses = []
        for batch in _make_batches(corpus, tc.batch_size, rng):
            opt.zero_grad()
            try:
                with Tape() as tape:
                    loss = loss_fn(model, batch)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {len(losses)}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss diverged to {value} at epoch {epoch}")
            ad.backward(tape, loss)
            opt.clip_gradients()
            opt.step()
            losses.append(value)
        stats = EpochStats(epoch=epoch,
                           loss=float(np.mean(losses)),
                           token_accuracy=teacher_forced_accuracy(model, eval_pairs))
        history.append(stats)
        if epoch_hook is not None and epoch_hook(model, stats):
            break
    return history


def write_history(path, history: Sequence[EpochStats]) -> None:
    lines = ["epoch\tloss\ttoken_accuracy"]
    lines += [f"{h.epoch}\t{h.loss:.6f}\t{h.token_accuracy:.4f}" for h in history]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def two_stage_pipeline(student: Model, teacher: Model, corpus,
                       tc_stage1: TrainConfig, tc_stage2: TrainConfig,
                       kd: KDConfig) -> tuple[list[EpochStats], list[EpochStats]]:
    """Stage 1: MLE on the given corpus. Stage 2: fine-tune per kd.mode —
    token_kl keeps the corpus and adds the KL term; sequence_level swaps in
    the teacher-decoded corpus; both does both."""
    teacher.freeze()
    hist1 = train(student, corpus, tc_stage1, mle_loss)
    if kd.mode in ("sequence_level", "both"):
        stage2_corpus = distill_corpus(teacher, [src for src, _ in corpus], kd.distill_beam)
    else:
        stage2_corpus = corpus
    if kd.mode == "sequence_level":
        stage2_loss = mle_loss
    else:
        def stage2_loss(model, batch):
            return kd_loss(model, teacher, batch, kd)
    hist2 = train(student, stage2_corpus, tc_stage2, stage2_loss)
    return hist1, hist2

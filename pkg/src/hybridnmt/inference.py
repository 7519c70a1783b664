"""Beam search and greedy decoding over either decoder kind.

Decoding batch size is 1 (one source sentence per call); a call is
single-threaded and self-contained, so concurrent decodes over the same
frozen model are safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from time import perf_counter
from typing import Sequence

import numpy as np

from .model import DecodeOptions, EncoderOutput, Model
from .timing import ENCODING, NULL_TIMER, SOFTMAX
from .tokens import BOS_ID, EOS_ID


@dataclass
class BeamConfig:
    """Beam width and length-normalization knobs.

    Defaults are the translation setup (beam 12, penalty 1.0); the profiler
    overrides the beam to 8.
    """

    beam_size: int = 12
    length_penalty_alpha: float = 1.0
    max_len_factor: float = 2.0
    max_len_offset: int = 10

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.length_penalty_alpha < 0:
            raise ValueError("length_penalty_alpha must be >= 0")

    def max_len(self, src_len: int) -> int:
        return int(math.ceil(self.max_len_factor * src_len)) + self.max_len_offset


@dataclass
class Hypothesis:
    ids: tuple
    sum_logprob: float
    state: object
    finished: bool = False


def length_penalized_score(sum_logprob: float, length: int, alpha: float) -> float:
    """sum_logprob / ((5 + length) / 6)^alpha."""
    if length < 1:
        raise ValueError("length must be >= 1")
    return sum_logprob / (((5.0 + length) / 6.0) ** alpha)


def prepare_decoding(model: Model, src_ids: Sequence[int],
                     use_precompute: bool = True) -> EncoderOutput:
    """Run the encoder and fill whatever precomputation the decoder can use."""
    ctx = model.prepare_decoding(src_ids, DecodeOptions(precompute_kv=use_precompute))
    return ctx.enc_out


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - math.log(np.exp(shifted).sum())


def greedy_decode(model: Model, src_ids: Sequence[int], max_len: int,
                  opts: DecodeOptions | None = None, timer=None, plan=None) -> list[int]:
    """Argmax decoding until EOS or max_len; argmax ties go to the lowest id.

    The terminating EOS, when emitted, is included in the returned ids.
    """
    if len(src_ids) == 0:
        raise ValueError("greedy_decode: empty source")
    timer = timer or NULL_TIMER
    with timer.scope(ENCODING):
        ctx = model.prepare_decoding(src_ids, opts, timer=timer, plan=plan)
    state = model.initial_state(ctx)
    prev = BOS_ID
    out: list[int] = []
    for _ in range(max_len):
        logits, state = model.decode_step(ctx, state, prev, timer=timer)
        tok = int(np.argmax(logits))
        out.append(tok)
        if tok == EOS_ID:
            break
        prev = tok
    return out


def beam_search(model: Model, src_ids: Sequence[int], bc: BeamConfig,
                opts: DecodeOptions | None = None, timer=None,
                force_length: int | None = None, plan=None
                ) -> tuple[list[int], float, list[Hypothesis]]:
    """Standard beam search with length-penalized final ranking.

    Each step expands every live hypothesis over the full vocabulary and keeps
    the top ``beam_size`` candidates by running log-probability (ties break on
    lower token id, then lower parent index). A hypothesis emitting EOS
    retires to the finished pool. With ``force_length`` set, EOS is not
    special and exactly that many steps run (profiler workloads).

    Returns (best ids, best length-penalized score, finished pool sorted
    best-first).
    """
    if len(src_ids) == 0:
        raise ValueError("beam_search: empty source")
    timer = timer or NULL_TIMER
    alpha = bc.length_penalty_alpha
    max_len = force_length if force_length is not None else bc.max_len(len(src_ids))
    with timer.scope(ENCODING):
        ctx = model.prepare_decoding(src_ids, opts, timer=timer, plan=plan)
    live = [Hypothesis(ids=(), sum_logprob=0.0, state=model.initial_state(ctx))]
    finished: list[Hypothesis] = []

    for step in range(max_len):
        t0 = perf_counter()
        n_live = len(live)
        scores = np.empty((n_live, model.cfg.tgt_vocab))
        states = []
        for i, hyp in enumerate(live):
            prev = hyp.ids[-1] if hyp.ids else BOS_ID
            logits, new_state = model.decode_step(ctx, hyp.state, prev, timer=timer)
            with timer.scope(SOFTMAX):
                scores[i] = hyp.sum_logprob + _log_softmax_np(logits)
            states.append(new_state)

        flat = scores.ravel()
        vocab = scores.shape[1]
        candidates = np.arange(flat.size)
        if flat.size > max(4096, 8 * bc.beam_size):
            # prefilter before the deterministic tie-break sort; the margin
            # keeps boundary ties (already measure-zero for real scores) moot
            candidates = np.argpartition(-flat, 4 * bc.beam_size)[: 4 * bc.beam_size]
        by = np.lexsort((candidates // vocab, candidates % vocab, -flat[candidates]))
        order = candidates[by][: bc.beam_size]

        new_live = []
        for idx in order:
            parent, token = int(idx) // vocab, int(idx) % vocab
            hyp = Hypothesis(ids=live[parent].ids + (token,),
                             sum_logprob=float(flat[idx]),
                             state=states[parent])
            if force_length is None and token == EOS_ID:
                hyp.finished = True
                finished.append(hyp)
            else:
                new_live.append(hyp)
        live = new_live
        timer.record_step(step, perf_counter() - t0, n_live)

        if not live:
            break
        if force_length is None and len(finished) >= bc.beam_size:
            # keep the cap, then stop once no live hypothesis can still win:
            # log-probs only decrease and lp() grows, so the best reachable
            # penalized score divides the current sum by lp(max_len)
            finished = sorted(finished, key=_rank_key(alpha))[: bc.beam_size]
            worst_kept = length_penalized_score(finished[-1].sum_logprob,
                                                len(finished[-1].ids), alpha)
            best_bound = max(length_penalized_score(h.sum_logprob, max_len, alpha)
                             for h in live)
            if best_bound < worst_kept:
                break

    for hyp in live:  # hit the length cap without emitting EOS
        hyp.finished = True
        finished.append(hyp)
    finished.sort(key=_rank_key(alpha))
    finished = finished[: max(bc.beam_size, 1)] if force_length is None else finished
    best = finished[0]
    best_score = length_penalized_score(best.sum_logprob, len(best.ids), alpha)
    return list(best.ids), best_score, finished


def _rank_key(alpha: float):
    def key(h: Hypothesis):
        return (-length_penalized_score(h.sum_logprob, len(h.ids), alpha), h.ids)
    return key

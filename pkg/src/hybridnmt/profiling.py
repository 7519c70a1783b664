"""Per-submodule wall-clock decomposition of decoding, and cross-architecture
speed comparisons, following the category taxonomy of the reference
time-breakdown table (Encoding / Attention / SelfAtt-GRU / FFN / Softmax /
Others).

Profiling runs strictly single-threaded; pseudo sentences decode with a
forced target length (EOS disabled) so every configuration emits the same
number of tokens.
"""

from __future__ import annotations

import gc
from contextlib import contextmanager
from dataclasses import dataclass, field
from time import perf_counter
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .inference import BeamConfig, beam_search
from .model import DecodeOptions, Model
from .timing import ATTENTION, ENCODING, FFN, SELF_OR_GRU, SOFTMAX, ScopedTimer
from .tokens import N_RESERVED

REPORT_LABELS = ("Encoding", "Decoding", "Attention", "SelfAtt/GRU", "FFN",
                 "Softmax", "Others", "Total")

# Reference numbers from the original breakdown table (seconds on the authors'
# GPU, beam 8); reprinted beside measurements for context, never asserted.
REFERENCE_BREAKDOWN = {
    "RNMT": {"Encoding": 72.3, "Decoding": 138.0, "Attention": 43.3,
             "SelfAtt/GRU": 42.9, "FFN": None, "Softmax": 40.1,
             "Others": 11.7, "Total": 210.3},
    "Trans.(base)": {"Encoding": 63.2, "Decoding": 434.1, "Attention": 99.3,
                     "SelfAtt/GRU": 152.0, "FFN": 86.1, "Softmax": 46.7,
                     "Others": 50.0, "Total": 497.3},
    "Trans.(1layer)": {"Encoding": 10.6, "Decoding": 170.5, "Attention": 24.9,
                       "SelfAtt/GRU": 41.5, "FFN": 19.9, "Softmax": 45.6,
                       "Others": 38.6, "Total": 181.1},
}


class OptimizationMismatch(RuntimeError):
    """An optimization toggle changed decoded output; that is a bug, not noise."""


@contextmanager
def _quiesced():
    """Collector paused while a measured loop runs (single-threaded timing purity)."""
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


@dataclass
class Workload:
    """Pseudo-sentence batch for timing: fixed source length, forced target
    length (decoding never stops early on EOS)."""

    sentences: int
    src_len: int
    tgt_len: int
    seed: int = 0

    def __post_init__(self):
        if self.sentences < 0 or self.src_len < 1 or self.tgt_len < 1:
            raise ValueError("workload needs sentences >= 0 and positive lengths")

    def sources(self, vocab: int) -> list[list[int]]:
        rng = ad.make_rng(self.seed)
        return [[int(t) for t in rng.integers(N_RESERVED, vocab, size=self.src_len)]
                for _ in range(self.sentences)]


@dataclass
class TimingReport:
    """Seconds per category for one profiling run.

    Others is defined as Decoding minus the named decode categories, which
    makes the partition exact by construction; Total = Encoding + Decoding.
    """

    label: str
    beam: int
    sentences: int
    tokens: int
    encoding: float = 0.0
    attention: float = 0.0
    self_or_gru: float = 0.0
    ffn: float = 0.0
    softmax: float = 0.0
    decoding: float = 0.0
    # typical (median) per-hypothesis seconds at each step index
    step_times: list = field(default_factory=list)
    # raw (step_index, seconds, live_hypotheses) samples, sentence-ordered
    step_samples: list = field(default_factory=list, repr=False)

    @property
    def others(self) -> float:
        return self.decoding - (self.attention + self.self_or_gru + self.ffn + self.softmax)

    @property
    def total(self) -> float:
        return self.encoding + self.decoding

    @property
    def words_per_second(self) -> float:
        return self.tokens / self.total if self.total > 0 else 0.0

    def value(self, label: str) -> float:
        return {
            "Encoding": self.encoding, "Decoding": self.decoding,
            "Attention": self.attention, "SelfAtt/GRU": self.self_or_gru,
            "FFN": self.ffn, "Softmax": self.softmax,
            "Others": self.others, "Total": self.total,
        }[label]

    def rows(self) -> list[tuple[str, float]]:
        return [(label, self.value(label)) for label in REPORT_LABELS]


def profile_decode(model: Model, wl: Workload, beam: int,
                   opts: DecodeOptions | None = None, warmup: int = 10,
                   label: str | None = None) -> TimingReport:
    """Decode the workload with beam search, accumulating wall time inside
    scoped submodule regions. Parameter values do not matter for timing, so
    randomly initialized models are fine."""
    opts = opts or DecodeOptions()
    bc = BeamConfig(beam_size=beam, length_penalty_alpha=1.0)
    sources = wl.sources(model.cfg.src_vocab)
    plan = model.build_plan(opts)  # fused weights are combined once per run

    timer = ScopedTimer()
    wall = 0.0
    with _quiesced():
        if sources and warmup > 0:
            for _ in range(warmup):
                beam_search(model, sources[0], bc, opts, force_length=wl.tgt_len, plan=plan)
        for src in sources:
            t0 = perf_counter()
            beam_search(model, src, bc, opts, timer=timer, force_length=wl.tgt_len, plan=plan)
            wall += perf_counter() - t0

    report = TimingReport(
        label=label or describe_config(model),
        beam=beam,
        sentences=wl.sentences,
        tokens=wl.sentences * wl.tgt_len,
        encoding=timer.get(ENCODING),
        attention=timer.get(ATTENTION),
        self_or_gru=timer.get(SELF_OR_GRU),
        ffn=timer.get(FFN),
        softmax=timer.get(SOFTMAX),
        decoding=max(wall - timer.get(ENCODING), 0.0),
        step_times=per_step_times(timer.step_samples),
        step_samples=list(timer.step_samples),
    )
    return report


def describe_config(model: Model) -> str:
    cfg = model.cfg
    if cfg.decoder_kind == "transformer":
        return f"transformer-{cfg.enc_layers}-{cfg.dec_layers}"
    enc = "gru" if cfg.encoder_kind == "gru" else str(cfg.enc_layers)
    return f"hybrid-{enc}-{cfg.attention_kind}" if cfg.encoder_kind != "gru" \
        else f"rnmt-{cfg.attention_kind}"


def per_step_times(samples: Sequence[tuple[int, float, int]]) -> list[float]:
    """Median per-hypothesis seconds for each step index (medians shrug off
    scheduler and interrupt outliers that contaminate means)."""
    if not samples:
        return []
    n_steps = max(s for s, _, _ in samples) + 1
    buckets: list[list[float]] = [[] for _ in range(n_steps)]
    for step, seconds, live in samples:
        buckets[step].append(seconds / max(live, 1))
    return [float(np.median(b)) if b else 0.0 for b in buckets]


def fit_slope(ys: Sequence[float], start: int = 0) -> float:
    """Least-squares slope of ys against its index, from ``start`` on."""
    ys = np.asarray(ys[start:], dtype=float)
    if len(ys) < 2:
        return 0.0
    xs = np.arange(len(ys), dtype=float)
    xc = xs - xs.mean()
    return float(np.dot(xc, ys - ys.mean()) / np.dot(xc, xc))


def compare_architectures(models: Sequence[tuple[str, Model]], wl: Workload,
                          beam: int, opts: DecodeOptions | None = None,
                          warmup: int = 10) -> list[TimingReport]:
    """Profile each model on the identical workload (same seed), in sequence."""
    if len(models) < 2:
        raise ValueError("compare_architectures needs at least two configurations")
    return [profile_decode(model, wl, beam, opts, warmup=warmup, label=label)
            for label, model in models]


def speed_ratio(slow: TimingReport, fast: TimingReport, row: str = "Decoding") -> float:
    denom = fast.value(row)
    return slow.value(row) / denom if denom > 0 else float("inf")


TOGGLE_NAMES = ("precompute_kv", "kv_cache", "fused_weights")


def ablate_optimizations(model: Model, wl: Workload, beam: int,
                         warmup: int = 3) -> list[tuple[dict, TimingReport]]:
    """Decode the same workload under all 8 on/off combinations of the
    inference optimizations; decoded tokens must be identical across combos
    (the toggles are timing-only), otherwise OptimizationMismatch is raised."""
    bc = BeamConfig(beam_size=beam, length_penalty_alpha=1.0)
    sources = wl.sources(model.cfg.src_vocab)
    results = []
    reference: list[list[int]] | None = None
    reference_combo = None
    for bits in range(8):
        combo = {name: bool((bits >> i) & 1) for i, name in enumerate(TOGGLE_NAMES)}
        opts = DecodeOptions(**combo)
        plan = model.build_plan(opts)
        timer = ScopedTimer()
        wall = 0.0
        outputs = []
        with _quiesced():
            if sources and warmup > 0:
                for _ in range(warmup):
                    beam_search(model, sources[0], bc, opts, force_length=wl.tgt_len,
                                plan=plan)
            for src in sources:
                t0 = perf_counter()
                best, _, _ = beam_search(model, src, bc, opts, timer=timer,
                                         force_length=wl.tgt_len, plan=plan)
                wall += perf_counter() - t0
                outputs.append(best)
        if reference is None:
            reference, reference_combo = outputs, combo
        elif outputs != reference:
            raise OptimizationMismatch(
                f"decoded tokens changed between {reference_combo} and {combo}")
        report = TimingReport(
            label=",".join(k for k, v in combo.items() if v) or "all-off",
            beam=beam, sentences=wl.sentences, tokens=wl.sentences * wl.tgt_len,
            encoding=timer.get(ENCODING), attention=timer.get(ATTENTION),
            self_or_gru=timer.get(SELF_OR_GRU), ffn=timer.get(FFN),
            softmax=timer.get(SOFTMAX),
            decoding=max(wall - timer.get(ENCODING), 0.0),
            step_times=per_step_times(timer.step_samples),
        )
        results.append((combo, report))
    return results


# ---------------- rendering ----------------

def render_report(report: TimingReport, reference: bool = True) -> str:
    """Aligned text table; optionally reprints the reference GPU numbers."""
    lines = [f"# {report.label}  (beam {report.beam}, {report.sentences} sentences, "
             f"{report.tokens} tokens, {report.words_per_second:.1f} w/s)"]
    header = f"{'Sub-module':<14}{'seconds':>12}{'share':>9}"
    ref_cols = list(REFERENCE_BREAKDOWN) if reference else []
    for name in ref_cols:
        header += f"{name:>16}"
    lines.append(header)
    for label, value in report.rows():
        share = value / report.decoding if report.decoding > 0 and label not in ("Encoding", "Total") else None
        row = f"{label:<14}{value:>12.4f}{(f'{share:.1%}' if share is not None else '-'):>9}"
        for name in ref_cols:
            ref = REFERENCE_BREAKDOWN[name][label]
            row += f"{(f'{ref:.1f}' if ref is not None else '-'):>16}"
        lines.append(row)
    return "\n".join(lines)


def report_to_csv(report: TimingReport) -> str:
    lines = ["category,seconds,share_of_decoding"]
    for label, value in report.rows():
        share = value / report.decoding if report.decoding > 0 else 0.0
        lines.append(f"{label},{value:.6f},{share:.6f}")
    return "\n".join(lines) + "\n"


def render_comparison(reports: Sequence[TimingReport]) -> str:
    lines = [f"{'config':<26}{'Decoding':>12}{'Total':>12}{'w/s':>10}"]
    for r in reports:
        lines.append(f"{r.label:<26}{r.decoding:>12.4f}{r.total:>12.4f}"
                     f"{r.words_per_second:>10.1f}")
    lines.append("")
    lines.append("pairwise Decoding ratios (row / column):")
    names = [r.label for r in reports]
    lines.append(" " * 26 + "".join(f"{n:>16}" for n in names))
    for a in reports:
        row = f"{a.label:<26}"
        for b in reports:
            row += f"{speed_ratio(a, b):>16.2f}"
        lines.append(row)
    return "\n".join(lines)

import csv
import io

import pytest

from hybridnmt import profiling as prof
from hybridnmt.inference import BeamConfig, beam_search
from hybridnmt.model import DecodeOptions, Model, ModelConfig
from hybridnmt.profiling import (REPORT_LABELS, OptimizationMismatch,
                                 Workload, ablate_optimizations, compare_architectures,
                                 fit_slope, per_step_times, profile_decode,
                                 render_comparison, render_report, report_to_csv,
                                 speed_ratio)


def bench_model(kind="transformer", **over):
    base = dict(src_vocab=50, tgt_vocab=50, d_model=16, ffn_filter=32, heads=2,
                enc_layers=1, dec_layers=2 if kind == "transformer" else 1,
                decoder_kind=kind,
                attention_kind="multihead" if kind == "transformer" else "additive",
                gru_hidden=16)
    base.update(over)
    return Model.init(ModelConfig(**base), 0)


def test_report_has_exact_reference_labels_and_partition():
    model = bench_model()
    rep = profile_decode(model, Workload(3, 4, 5, seed=0), beam=2, warmup=1)
    assert tuple(label for label, _ in rep.rows()) == REPORT_LABELS
    named = rep.attention + rep.self_or_gru + rep.ffn + rep.softmax
    assert rep.others == rep.decoding - named  # exact, by construction
    assert rep.total == rep.encoding + rep.decoding
    assert rep.others >= 0.0
    assert rep.tokens == 15


def test_transformer_categories_all_positive():
    rep = profile_decode(bench_model(), Workload(3, 4, 6, seed=1), beam=2, warmup=1)
    for label in ("Encoding", "Attention", "SelfAtt/GRU", "FFN", "Softmax", "Others"):
        assert rep.value(label) > 0.0, label


def test_gru_with_additive_attention_has_zero_ffn():
    rep = profile_decode(bench_model("gru"), Workload(3, 4, 6, seed=1), beam=2, warmup=1)
    assert rep.ffn == 0.0
    assert rep.attention > 0.0 and rep.self_or_gru > 0.0 and rep.softmax > 0.0


def test_total_roughly_linear_in_sentence_count():
    model = bench_model()
    base = profile_decode(model, Workload(6, 5, 10, seed=2), beam=2, warmup=3)
    double = profile_decode(model, Workload(12, 5, 10, seed=2), beam=2, warmup=3)
    ratio = double.total / base.total
    assert 1.5 < ratio < 2.5  # 2x within 25%


def test_empty_workload_gives_empty_but_valid_report():
    rep = profile_decode(bench_model(), Workload(0, 4, 5, seed=0), beam=2, warmup=0)
    assert rep.total == 0.0 and rep.words_per_second == 0.0
    assert [v for _, v in rep.rows()] == [0.0] * 8
    assert render_report(rep)
    assert report_to_csv(rep)


def test_ablation_runs_all_eight_combos_with_identical_tokens():
    model = bench_model(dec_layers=1)
    rows = ablate_optimizations(model, Workload(3, 4, 6, seed=3), beam=2, warmup=0)
    assert len(rows) == 8
    combos = {tuple(sorted(c.items())) for c, _ in rows}
    assert len(combos) == 8


def test_ablation_detects_output_mismatch(monkeypatch):
    model = bench_model(dec_layers=1)
    original = beam_search

    calls = {"n": 0}

    def flaky(model_, src, bc, opts=None, timer=None, force_length=None, plan=None):
        best, score, fin = original(model_, src, bc, opts, timer=timer,
                                    force_length=force_length, plan=plan)
        calls["n"] += 1
        if calls["n"] > 4:  # corrupt later combos
            best = list(best)
            best[0] = (best[0] + 1) % model_.cfg.tgt_vocab
        return best, score, fin

    monkeypatch.setattr(prof, "beam_search", flaky)
    with pytest.raises(OptimizationMismatch):
        ablate_optimizations(model, Workload(2, 3, 4, seed=4), beam=2, warmup=0)


def test_gru_decoder_tokens_unaffected_by_kv_cache_toggle():
    model = bench_model("gru")
    bc = BeamConfig(beam_size=2)
    on, _, _ = beam_search(model, [5, 6, 7], bc, DecodeOptions(kv_cache=True))
    off, _, _ = beam_search(model, [5, 6, 7], bc, DecodeOptions(kv_cache=False))
    assert on == off


def test_kv_cache_off_is_slower_at_long_forced_length():
    model = bench_model(dec_layers=2)
    wl = Workload(2, 4, 32, seed=5)
    cached = profile_decode(model, wl, beam=1, opts=DecodeOptions(kv_cache=True), warmup=2)
    uncached = profile_decode(model, wl, beam=1, opts=DecodeOptions(kv_cache=False), warmup=2)
    assert uncached.decoding > cached.decoding


def test_compare_architectures_and_self_ratio():
    a = bench_model()
    b = bench_model("gru")
    wl = Workload(4, 4, 8, seed=6)
    reports = compare_architectures([("trans", a), ("trans-again", a), ("hybrid", b)],
                                    wl, beam=2, warmup=2)
    assert [r.label for r in reports] == ["trans", "trans-again", "hybrid"]
    self_ratio = speed_ratio(reports[0], reports[1])
    assert 0.6 < self_ratio < 1.6
    assert render_comparison(reports)
    with pytest.raises(ValueError):
        compare_architectures([("only", a)], wl, beam=2)


def test_per_step_times_normalizes_by_live_hypotheses():
    samples = [(0, 0.2, 1), (1, 0.4, 2), (1, 0.6, 2), (0, 0.4, 1)]
    times = per_step_times(samples)
    assert times[0] == pytest.approx(0.3)
    assert times[1] == pytest.approx(0.25)
    assert per_step_times([]) == []


def test_fit_slope_recovers_synthetic_trend():
    ys = [2.0 + 0.5 * i for i in range(10)]
    assert fit_slope(ys) == pytest.approx(0.5)
    assert fit_slope([3.0] * 10) == pytest.approx(0.0)
    assert fit_slope(ys, start=4) == pytest.approx(0.5)
    assert fit_slope([1.0]) == 0.0


def test_render_report_mentions_all_labels_and_reference_numbers():
    rep = profile_decode(bench_model(), Workload(2, 3, 4, seed=7), beam=2, warmup=0)
    text = render_report(rep)
    for label in REPORT_LABELS:
        assert label in text
    assert "210.3" in text and "497.3" in text  # reference totals for context
    plain = render_report(rep, reference=False)
    assert "210.3" not in plain


def test_csv_shape():
    rep = profile_decode(bench_model("gru"), Workload(2, 3, 4, seed=8), beam=2, warmup=0)
    rows = list(csv.reader(io.StringIO(report_to_csv(rep))))
    assert rows[0] == ["category", "seconds", "share_of_decoding"]
    assert len(rows) == 1 + len(REPORT_LABELS)


def test_workload_sources_deterministic_and_in_range():
    wl = Workload(5, 6, 7, seed=9)
    a, b = wl.sources(30), wl.sources(30)
    assert a == b
    assert all(len(s) == 6 for s in a)
    assert all(4 <= t < 30 for s in a for t in s)
    with pytest.raises(ValueError):
        Workload(-1, 3, 3)

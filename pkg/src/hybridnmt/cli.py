"""Command-line pipeline: vocab building, training, distillation, translation,
benchmarking, and a built-in self-test.

Configuration precedence is defaults < --config-file JSON < explicit flags;
the resolved values land in a manifest.json next to every run's outputs.
Exit codes: 0 success, 2 usage/config, 3 data, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as D
from . import training as T
from .inference import BeamConfig, beam_search, greedy_decode
from .model import ConfigError, DecodeOptions, Model, ModelConfig
from .profiling import (Workload, ablate_optimizations, compare_architectures,
                        profile_decode, render_comparison, render_report,
                        report_to_csv)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("hybridnmt")


def _arch_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--decoder", choices=("gru", "transformer"), default="gru")
    p.add_argument("--attention", choices=("additive", "dot", "multihead"),
                   default="additive")
    p.add_argument("--encoder", choices=("selfattn", "gru"), default="selfattn")
    p.add_argument("--enc-layers", type=int, default=2)
    p.add_argument("--dec-layers", type=int, default=1)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--ffn", type=int, default=256)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--gru-hidden", type=int, default=128)


def _task_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=D.TASK_KINDS,
                   help="synthetic task (otherwise provide --train-src/--train-tgt)")
    p.add_argument("--vocab-size", type=int, default=20)
    p.add_argument("--max-len", type=int, default=10)
    p.add_argument("--pairs", type=int, default=2000)
    p.add_argument("--data-seed", type=int, default=11)
    p.add_argument("--train-src", help="source side of a parallel text corpus")
    p.add_argument("--train-tgt", help="target side of a parallel text corpus")
    p.add_argument("--src-vocab-file")
    p.add_argument("--tgt-vocab-file")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clip", type=float, default=5.0)
    p.add_argument("--target-accuracy", type=float,
                   help="stop early once greedy accuracy on a held-out sample reaches this")


def _decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--beam", type=int, default=12)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--max-len-factor", type=float, default=2.0)
    p.add_argument("--max-len-offset", type=int, default=10)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--no-precompute", action="store_true")
    p.add_argument("--no-kv-cache", action="store_true")
    p.add_argument("--no-fused-weights", action="store_true")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(prog="hybridnmt",
                                     description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)
    table = {}

    def sub(name, help_text):
        p = subs.add_parser(name, help=help_text)
        p.add_argument("--config-file", help="JSON file of flag defaults")
        table[name] = p
        return p

    p = sub("vocab", "build a frequency-ranked vocabulary from a text corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--cap", type=int, default=30000)
    p.add_argument("--out", required=True)

    p = sub("train", "MLE-train a model on a synthetic task or a parallel corpus")
    _arch_flags(p)
    _task_flags(p)
    _train_flags(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub("distill", "knowledge-distillation fine-tuning of a student")
    _task_flags(p)
    _train_flags(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--student", required=True, help="stage-1 student checkpoint")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--kd-mode", choices=("token_kl", "sequence_level", "both"),
                   default="both")
    p.add_argument("--distill-beam", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub("translate", "decode a text file, one sentence per line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--src-vocab-file", required=True)
    p.add_argument("--tgt-vocab-file", required=True)
    _decode_flags(p)

    p = sub("bench", "profile decoding and compare architectures")
    p.add_argument("--config", action="append", required=True, metavar="SPEC",
                   help="transformer:N | hybrid:N:attention | rnmt (repeatable)")
    p.add_argument("--sentences", type=int, default=200)
    p.add_argument("--src-len", type=int, default=20)
    p.add_argument("--tgt-len", type=int, default=30)
    p.add_argument("--beam", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-model", type=int, default=256)
    p.add_argument("--ffn", type=int, default=1024)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--gru-hidden", type=int, default=512)
    p.add_argument("--vocab-size", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--ablate", action="store_true",
                   help="also sweep the optimization toggles on the first config")
    p.add_argument("--no-precompute", action="store_true")
    p.add_argument("--no-kv-cache", action="store_true")
    p.add_argument("--no-fused-weights", action="store_true")
    p.add_argument("--out", required=True)

    sub("selftest", "run quick built-in correctness checks")

    return parser, table


def _model_cfg_from(args, src_vocab: int, tgt_vocab: int) -> ModelConfig:
    return ModelConfig(src_vocab=src_vocab, tgt_vocab=tgt_vocab,
                       d_model=args.d_model, ffn_filter=args.ffn, heads=args.heads,
                       enc_layers=args.enc_layers, dec_layers=args.dec_layers,
                       decoder_kind=args.decoder, attention_kind=args.attention,
                       gru_hidden=args.gru_hidden, encoder_kind=args.encoder)


def _decode_options(args) -> DecodeOptions:
    return DecodeOptions(precompute_kv=not args.no_precompute,
                         kv_cache=not args.no_kv_cache,
                         fused_weights=not args.no_fused_weights)


def _load_task_corpus(args):
    """Returns (pairs, src_vocab, tgt_vocab) from either a synthetic task or files."""
    if args.task:
        vocab = D.synthetic_vocab(args.vocab_size)
        pairs = D.make_synthetic_task(args.task, args.vocab_size, args.max_len,
                                      args.pairs, args.data_seed)
        return pairs, vocab, vocab
    if not (args.train_src and args.train_tgt and args.src_vocab_file and args.tgt_vocab_file):
        raise ConfigError("provide --task or all of --train-src/--train-tgt/"
                          "--src-vocab-file/--tgt-vocab-file")
    src_vocab = D.Vocabulary.load(args.src_vocab_file)
    tgt_vocab = D.Vocabulary.load(args.tgt_vocab_file)
    pairs = D.encode_corpus(src_vocab, tgt_vocab,
                            D.read_lines(args.train_src), D.read_lines(args.train_tgt))
    return pairs, src_vocab, tgt_vocab


def _write_manifest(out_dir: Path, command: str, args, outputs, started: float) -> None:
    resolved = {k: v for k, v in vars(args).items() if k not in ("command", "config_file")}
    manifest = {
        "subcommand": command,
        "resolved_config": resolved,
        "seed": resolved.get("seed"),
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": [str(p) for p in outputs],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")


def _train_hook(args, heldout):
    if args.target_accuracy is None:
        return None
    probe = heldout[:100]

    def hook(model, stats):
        acc = T.greedy_token_accuracy(model, probe)
        log.info("epoch %d: loss %.4f greedy %.3f", stats.epoch, stats.loss, acc)
        return acc >= args.target_accuracy

    return hook


def cmd_vocab(args) -> int:
    started = time.time()
    vocab = D.build_vocab(args.corpus, args.cap)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    _write_manifest(out.parent, "vocab", args, [out], started)
    print(f"wrote {out} ({len(vocab)} entries incl. reserved)")
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.time()
    pairs, src_vocab, tgt_vocab = _load_task_corpus(args)
    cfg = _model_cfg_from(args, len(src_vocab), len(tgt_vocab))
    model = Model.init(cfg, args.seed)
    tc = T.TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                       max_epochs=args.epochs, seed=args.seed, clip_norm=args.clip)
    history = T.train(model, pairs, tc, epoch_hook=_train_hook(args, pairs))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "model.ckpt"
    D.save_model(ckpt, model)
    hist_path = out_dir / "history.txt"
    T.write_history(hist_path, history)
    src_vocab.save(out_dir / "vocab.src.txt")
    tgt_vocab.save(out_dir / "vocab.tgt.txt")
    outputs = [ckpt, hist_path, out_dir / "vocab.src.txt", out_dir / "vocab.tgt.txt"]
    _write_manifest(out_dir, "train", args, outputs, started)
    final = history[-1] if history else None
    print(f"trained {len(history)} epochs"
          + (f", final loss {final.loss:.4f}, tf-accuracy {final.token_accuracy:.3f}"
             if final else ""))
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_distill(args) -> int:
    started = time.time()
    teacher = D.load_model(args.teacher).freeze()
    student = D.load_model(args.student)
    pairs, src_vocab, tgt_vocab = _load_task_corpus(args)
    if teacher.cfg.tgt_vocab != student.cfg.tgt_vocab:
        raise ConfigError("teacher and student target vocabularies differ")
    kd = T.KDConfig(teacher=teacher, lam=args.lam, mode=args.kd_mode,
                    distill_beam=BeamConfig(beam_size=args.distill_beam))
    tc = T.TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                       max_epochs=args.epochs, seed=args.seed, clip_norm=args.clip)

    if kd.mode in ("sequence_level", "both"):
        corpus = T.distill_corpus(teacher, [src for src, _ in pairs], kd.distill_beam)
    else:
        corpus = pairs
    loss_fn = T.mle_loss if kd.mode == "sequence_level" else \
        (lambda m, b: T.kd_loss(m, teacher, b, kd))
    history = T.train(student, corpus, tc, loss_fn=loss_fn,
                      epoch_hook=_train_hook(args, pairs))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "student.ckpt"
    D.save_model(ckpt, student)
    hist_path = out_dir / "history.txt"
    T.write_history(hist_path, history)
    _write_manifest(out_dir, "distill", args, [ckpt, hist_path], started)
    print(f"distilled student over {len(history)} epochs -> {ckpt}")
    return EXIT_OK


def cmd_translate(args) -> int:
    model = D.load_model(args.checkpoint)
    src_vocab = D.Vocabulary.load(args.src_vocab_file)
    tgt_vocab = D.Vocabulary.load(args.tgt_vocab_file)
    if len(src_vocab) != model.cfg.src_vocab or len(tgt_vocab) != model.cfg.tgt_vocab:
        raise ConfigError("vocabulary sizes do not match the checkpoint's config")
    opts = _decode_options(args)
    bc = BeamConfig(beam_size=args.beam, length_penalty_alpha=args.alpha,
                    max_len_factor=args.max_len_factor, max_len_offset=args.max_len_offset)
    for line in D.read_lines(args.input):
        ids = D.encode_line(src_vocab, line, "source")
        if not ids:
            print()
            continue
        if args.greedy:
            out_ids = greedy_decode(model, ids, bc.max_len(len(ids)), opts)
        else:
            out_ids, _, _ = beam_search(model, ids, bc, opts)
        print(D.decode_line(tgt_vocab, out_ids))
    return EXIT_OK


def _parse_bench_config(spec: str, args) -> tuple[str, Model]:
    parts = spec.split(":")
    kind = parts[0]
    v = args.vocab_size
    if kind == "transformer":
        n = int(parts[1]) if len(parts) > 1 else 6
        cfg = ModelConfig(src_vocab=v, tgt_vocab=v, d_model=args.d_model,
                          ffn_filter=args.ffn, heads=args.heads, enc_layers=n,
                          dec_layers=n, decoder_kind="transformer",
                          attention_kind="multihead", gru_hidden=args.gru_hidden)
    elif kind == "hybrid":
        n = int(parts[1]) if len(parts) > 1 else 6
        attn = parts[2] if len(parts) > 2 else "additive"
        cfg = ModelConfig(src_vocab=v, tgt_vocab=v, d_model=args.d_model,
                          ffn_filter=args.ffn, heads=args.heads, enc_layers=n,
                          dec_layers=1, decoder_kind="gru", attention_kind=attn,
                          gru_hidden=args.gru_hidden)
    elif kind == "rnmt":
        attn = parts[1] if len(parts) > 1 else "additive"
        cfg = ModelConfig(src_vocab=v, tgt_vocab=v, d_model=args.d_model,
                          ffn_filter=args.ffn, heads=args.heads, enc_layers=1,
                          dec_layers=1, decoder_kind="gru", attention_kind=attn,
                          gru_hidden=args.gru_hidden, encoder_kind="gru")
    else:
        raise ConfigError(f"unknown bench config spec {spec!r}")
    return spec, Model.init(cfg, args.seed)


def cmd_bench(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    wl = Workload(sentences=args.sentences, src_len=args.src_len,
                  tgt_len=args.tgt_len, seed=args.seed)
    opts = _decode_options(args)
    models = [_parse_bench_config(spec, args) for spec in args.config]
    outputs = []

    if len(models) == 1:
        reports = [profile_decode(models[0][1], wl, args.beam, opts,
                                  warmup=args.warmup, label=models[0][0])]
    else:
        reports = compare_architectures(models, wl, args.beam, opts, warmup=args.warmup)
    for report in reports:
        stem = report.label.replace(":", "-")
        txt = out_dir / f"report.{stem}.txt"
        txt.write_text(render_report(report) + "\n")
        csv_path = out_dir / f"report.{stem}.csv"
        csv_path.write_text(report_to_csv(report))
        outputs += [txt, csv_path]
        print(render_report(report))
        print()
    if len(reports) > 1:
        comparison = render_comparison(reports)
        (out_dir / "comparison.txt").write_text(comparison + "\n")
        outputs.append(out_dir / "comparison.txt")
        print(comparison)

    if args.ablate:
        rows = ablate_optimizations(models[0][1], wl, args.beam)
        lines = [f"{'toggles':<42}{'Decoding':>12}{'Total':>12}"]
        for combo, rep in rows:
            label = ",".join(f"{k}={'on' if v else 'off'}" for k, v in combo.items())
            lines.append(f"{label:<42}{rep.decoding:>12.4f}{rep.total:>12.4f}")
        ablation = "\n".join(lines)
        (out_dir / "ablation.txt").write_text(ablation + "\n")
        outputs.append(out_dir / "ablation.txt")
        print(ablation)

    _write_manifest(out_dir, "bench", args, outputs, started)
    return EXIT_OK


def cmd_selftest(args) -> int:
    failures = 0

    def check(name, fn):
        nonlocal failures
        t0 = time.time()
        try:
            fn()
            print(f"PASS {name} ({time.time() - t0:.1f}s)")
        except Exception as exc:  # report and keep going
            failures += 1
            print(f"FAIL {name}: {exc}")

    desk = dict(src_vocab=30, tgt_vocab=30, d_model=64, ffn_filter=256, heads=4,
                gru_hidden=128)

    # gradient spot-check on a dim-8 model
    def gradients():
        cfg = ModelConfig(src_vocab=10, tgt_vocab=10, d_model=8, ffn_filter=16,
                          heads=2, enc_layers=1, dec_layers=1, decoder_kind="gru",
                          attention_kind="additive", gru_hidden=8)
        model = Model.init(cfg, 0).set_trainable(True)
        batch = [([4, 5, 6], [1, 7, 8, 2])]
        with ad.Tape() as tape:
            loss = T.mle_loss(model, batch)
        ad.backward(tape, loss)
        name, p = model.named_parameters()[-1]
        flat = p.data.reshape(-1)
        g = p.grad.reshape(-1)
        step = 1e-4
        for i in range(0, flat.size, max(1, flat.size // 8)):
            orig = flat[i]
            flat[i] = orig + step
            hi = T.mle_loss(model, batch).item()
            flat[i] = orig - step
            lo = T.mle_loss(model, batch).item()
            flat[i] = orig
            fd = (hi - lo) / (2 * step)
            if abs(fd - g[i]) > 1e-3 * max(1.0, abs(fd), abs(g[i])):
                raise AssertionError(f"{name}[{i}]: analytic {g[i]:.6g} vs fd {fd:.6g}")

    def incremental():
        rng = ad.make_rng(0)
        for kind, attn in (("gru", "additive"), ("transformer", "multihead")):
            cfg = ModelConfig(enc_layers=2, dec_layers=2 if kind == "transformer" else 1,
                              decoder_kind=kind, attention_kind=attn, **desk)
            model = Model.init(cfg, 1)
            src = [int(i) for i in rng.integers(4, 30, size=5)]
            tgt_in = [1] + [int(i) for i in rng.integers(4, 30, size=6)]
            full = model.forward_teacher_forced(src, tgt_in).data
            ctx = model.prepare_decoding(src)
            state = model.initial_state(ctx)
            for t, prev in enumerate(tgt_in):
                logits, state = model.decode_step(ctx, state, prev)
                if np.max(np.abs(logits - full[t])) >= 1e-8:
                    raise AssertionError(f"{kind} step {t} deviates")

    def beam_equals_greedy():
        cfg = ModelConfig(enc_layers=2, dec_layers=1, decoder_kind="gru",
                          attention_kind="dot", **desk)
        model = Model.init(cfg, 2)
        rng = ad.make_rng(3)
        for _ in range(5):
            src = [int(i) for i in rng.integers(4, 30, size=4)]
            bc = BeamConfig(beam_size=1)
            best, _, _ = beam_search(model, src, bc)
            if best != greedy_decode(model, src, bc.max_len(4)):
                raise AssertionError("beam_size=1 deviates from greedy")

    def checkpoint_roundtrip():
        import tempfile
        cfg = ModelConfig(enc_layers=1, dec_layers=1, decoder_kind="gru",
                          attention_kind="additive", **desk)
        model = Model.init(cfg, 4)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "m.ckpt"
            D.save_model(path, model)
            again = D.load_model(path)
            for (_, a), (_, b) in zip(model.named_parameters(), again.named_parameters()):
                if not np.array_equal(a.data, b.data):
                    raise AssertionError("round trip not bit-exact")

    def optimization_toggles():
        cfg = ModelConfig(enc_layers=1, dec_layers=2, decoder_kind="transformer",
                          attention_kind="multihead", **desk)
        model = Model.init(cfg, 5)
        ablate_optimizations(model, Workload(3, 4, 6, seed=6), beam=2, warmup=0)

    def profiler_partition():
        cfg = ModelConfig(enc_layers=1, dec_layers=1, decoder_kind="gru",
                          attention_kind="additive", **desk)
        rep = profile_decode(Model.init(cfg, 7), Workload(2, 4, 5, seed=8),
                             beam=2, warmup=1)
        named = rep.attention + rep.self_or_gru + rep.ffn + rep.softmax
        if rep.others != rep.decoding - named or rep.others < 0:
            raise AssertionError("category partition broken")

    check("gradients-vs-finite-differences", gradients)
    check("incremental-vs-teacher-forced", incremental)
    check("beam1-equals-greedy", beam_equals_greedy)
    check("checkpoint-round-trip", checkpoint_roundtrip)
    check("optimization-toggles-identical-output", optimization_toggles)
    check("profiler-category-partition", profiler_partition)
    return EXIT_OK if failures == 0 else 1


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=getattr(logging, os.environ.get("HYBRIDNMT_LOG", "WARNING").upper(),
                                      logging.WARNING))
    parser, sub_table = build_parser()

    if "--config-file" in argv:
        path = argv[argv.index("--config-file") + 1]
        try:
            overrides = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read config file: {exc}", file=sys.stderr)
            return EXIT_DATA
        command = argv[0] if argv and not argv[0].startswith("-") else None
        if command in sub_table:
            known = {a.dest for a in sub_table[command]._actions}
            unknown = set(overrides) - known
            if unknown:
                print(f"error: unknown config keys {sorted(unknown)}", file=sys.stderr)
                return EXIT_DATA
            sub_table[command].set_defaults(**overrides)

    args = parser.parse_args(argv)
    handlers = {"vocab": cmd_vocab, "train": cmd_train, "distill": cmd_distill,
                "translate": cmd_translate, "bench": cmd_bench, "selftest": cmd_selftest}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, D.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (T.TrainingDiverged, ad.NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

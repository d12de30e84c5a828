"""Command-line front end: ``distilltron <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings

import numpy as np

from . import distill, dsp
from .config import format_config, load_config
from .data import SPLITS, Vocab, corpus_from_config, load_corpus, tokenize, write_corpus
from .distill import ROLES, miniature_grad_check, prenorm_bias_gradient
from .errors import (ConfigError, ContractError, DimensionError, DistilltronError, InputError,
                     ParseError, TrainingDiverged)
from .evaluation import evaluate, format_table
from .model import RunContext, forward_free_running, load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
GRADCHECK_TOL = 1e-4

log = logging.getLogger("distilltron")


class UsageError(DistilltronError):
    """Bad command-line arguments."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args):
    return load_config(args.config, [tuple(kv.split("=", 1)) for kv in args.set])


def _key_value(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return text


# ------------------------------------------------------------------ commands

def cmd_make_corpus(args):
    cfg = _config(args)
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise UsageError(f"{out} exists and is not empty (use --force to overwrite)")
    corpus = corpus_from_config(cfg.data, cfg.model.n_mels)
    write_corpus(corpus, out)
    sizes = " ".join(f"{s}={len(corpus.split(s))}" for s in SPLITS)
    print(f"wrote {out}: {sizes} checksum={corpus.checksum()}")
    return EXIT_OK


def _load_params(path, label=None):
    try:
        return load_checkpoint(path).params
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {label or path}: {exc.strerror}") from None


def cmd_train(args):
    cfg = _config(args)
    if args.lam is not None:
        cfg = cfg.with_overrides([("train.distill_weight", args.lam)]).validate()
    if args.role == "student" and not args.teacher_ckpt:
        raise UsageError("student training requires --teacher-ckpt")
    corpus = load_corpus(args.corpus)
    teacher = _load_params(args.teacher_ckpt) if args.teacher_ckpt else None
    init = _load_params(args.init_ckpt) if args.init_ckpt else None
    model_cfg = teacher.config if teacher is not None else (init.config if init else cfg.model)
    split = corpus.split("train")
    n_mels = split[0].mel.n_mels if split else model_cfg.n_mels
    if n_mels != model_cfg.n_mels:
        raise ConfigError(f"corpus has {n_mels} mel channels, model expects {model_cfg.n_mels}")
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(format_config(cfg))
    result = distill.train(args.role, split, model_cfg, cfg.train, init=init, teacher=teacher,
                           log_path=os.path.join(args.out, "train.log"), ckpt_dir=args.out,
                           resume=args.resume)
    last = result.log[-1].losses if result.log else None
    print(f"{args.role}: {cfg.train.total_steps} steps, checkpoint {args.out}/latest.ckpt"
          + (f", final loss {last.total:.6f}" if last else ""))
    return EXIT_OK


def write_attention(path, attention):
    np.savetxt(path, attention, fmt="%.17g",
               header=f"ATTENTION v1 {attention.shape[0]} {attention.shape[1]}", comments="")


def cmd_synth(args):
    cfg = _config(args)
    params = _load_params(args.ckpt)
    tokens = tokenize(args.text, Vocab.default())
    if max(tokens.ids) >= params.config.vocab_size:
        raise DimensionError(f"checkpoint {args.ckpt} has too small a vocabulary for this text")
    ctx = RunContext.eval(args.seed)
    r = params.config.r
    if args.mode == "forced-length":
        if not args.frames or args.frames < 1:
            raise UsageError("forced-length mode needs --frames N >= 1")
        trace = forward_free_running(params, tokens, ctx, mel=np.zeros((args.frames, params.config.n_mels)))
    else:
        # worst-case reference length: every token at the longest duration
        steps = args.max_steps or int(np.ceil(
            cfg.eval.max_steps_factor * len(tokens) * (cfg.data.max_duration + cfg.data.duration_jitter) / r))
        trace = forward_free_running(params, tokens, ctx, max_steps=steps)
    a = cfg.audio
    frames = trace.mel(0)[:args.frames] if args.mode == "forced-length" else trace.mel(0)
    mel = dsp.MelSpectrogram(frames, a.hop, a.sample_rate)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        audio = dsp.mel_to_audio(mel, a.fft_size, a.f_min, a.f_max, a.griffin_lim_iters, args.seed)
    peak = float(np.max(np.abs(audio.samples))) if len(audio) else 0.0
    if peak > 1.0:
        audio = dsp.AudioSignal(audio.samples * (0.99 / peak), audio.sample_rate)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    dsp.wav_write(args.out, audio)
    stem = os.path.splitext(args.out)[0]
    dsp.write_melspec(stem + ".melspec", mel)
    write_attention(stem + ".attention", trace.alignment(0, len(tokens)))
    print(f"wrote {args.out} ({len(mel)} frames, {len(audio)} samples), "
          f"{stem}.melspec, {stem}.attention")
    return EXIT_OK


def cmd_eval(args):
    cfg = _config(args)
    corpus = load_corpus(args.corpus)
    utts = corpus.split(args.split)
    if args.limit:
        utts = utts[:args.limit]
    if not utts:
        raise InputError(f"split {args.split!r} is empty")
    n_mels = utts[0].mel.n_mels
    reports = []
    for spec in args.ckpt:
        name, _, path = spec.rpartition("=")
        name = name or os.path.basename(os.path.dirname(os.path.abspath(path))) or path
        params = _load_params(path, name)
        if params.config.n_mels != n_mels or params.config.vocab_size < len(corpus.vocab):
            raise DimensionError(
                f"checkpoint {name} ({path}) is incompatible with the corpus: model has "
                f"n_mels={params.config.n_mels}, vocab={params.config.vocab_size}; corpus has "
                f"n_mels={n_mels}, vocab={len(corpus.vocab)}")
        e = cfg.eval
        reports.append(evaluate(params, utts, name, e.min_dwell, e.max_steps_factor, e.synth_seed))
    if args.details:
        for rep in reports:
            print("\n".join(rep.lines()))
    print(format_table(reports))
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = _config(args)
    result = miniature_grad_check(args.seed, args.eps, args.coords, cfg.train, args.batch_stats)
    for name, err in sorted(result.by_param.items(), key=lambda kv: -kv[1]):
        print(f"{name:<24} {err:.3e}")
    worst, err = result.worst
    ok = result.max_error < GRADCHECK_TOL
    if args.batch_stats:
        bias = prenorm_bias_gradient(args.seed, cfg.train)
        print(f"pre-norm bias gradient {bias:.3e}")
        ok = ok and bias < 1e-12
    print(f"{'PASS' if ok else 'FAIL'} max rel err {result.max_error:.3e} "
          f"(worst group {worst}, tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


# -------------------------------------------------------------------- parser

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], type=_key_value, metavar="KEY=VALUE",
                        help="override one config value, e.g. model.hidden_dim=32")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="distilltron", description="Hidden-state distillation for toy TTS.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-corpus", parents=[common], help="build the synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_make_corpus)

    s = sub.add_parser("train", parents=[common], help="train a teacher, student or baseline")
    s.add_argument("--role", required=True, choices=ROLES)
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--teacher-ckpt")
    s.add_argument("--init-ckpt", help="warm-start weights")
    s.add_argument("--lambda", dest="lam", type=float, help="distillation weight")
    s.add_argument("--resume", action="store_true", help="continue from OUT/latest.ckpt")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", parents=[common], help="synthesise text to WAV")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("stop-token", "forced-length"), default="stop-token")
    s.add_argument("--frames", type=int, help="frame count for forced-length mode")
    s.add_argument("--max-steps", type=int, help="decoder step cap in stop-token mode")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval", parents=[common], help="compare checkpoints on a corpus split")
    s.add_argument("--ckpt", required=True, action="append", metavar="[NAME=]PATH")
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", default="test-out-of-domain", choices=SPLITS)
    s.add_argument("--limit", type=int)
    s.add_argument("--details", action="store_true", help="print per-utterance records")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--coords", type=int, default=30, help="coordinates per group (0 = all)")
    s.add_argument("--eps", type=float, default=1e-4)
    s.add_argument("--batch-stats", action="store_true")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"distilltron: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "coords", None) == 0:
        args.coords = None
    try:
        return args.func(args)
    except (UsageError, ConfigError, InputError) as exc:
        print(f"distilltron: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, DimensionError, ContractError, TrainingDiverged, OSError) as exc:
        print(f"distilltron: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a one-line verdict that the terminal summary prints
under "acceptance criteria".  Criteria 2 to 6 read the cached full-size
runs from ``acceptance_pipeline`` (training them on first use).
"""

import dataclasses
import itertools
import time
from pathlib import Path

import numpy as np
import pytest

import acceptance_pipeline as pipe
from distilltron import dsp
from distilltron.cli import main
from distilltron.data import batch_of
from distilltron.distill import (miniature_grad_check, parse_log_line, prenorm_bias_gradient,
                                 train)
from distilltron.dsp import AudioSignal, LinearSpectrogram
from distilltron.evaluation import dtw_cost, format_table
from distilltron.model import (RunContext, forward_free_running, forward_scheduled,
                               forward_teacher_forced)

ROOT = Path(__file__).resolve().parents[1]
pytestmark = pytest.mark.slow


def verdict(log, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    log.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def ood():
    return {role: pipe.evaluated(role) for role in pipe.ROLES}


def _diagnostics(report):
    out = [report.lines()[-1]]
    for rec in report.records:
        if rec.repeats or rec.skips:
            visits = " ".join(f"{t}x{n}" for t, _, n in rec.runs)
            out.append(f"  {rec.uid} tokens={rec.n_tokens} steps={rec.steps} skips={rec.skips} "
                       f"repeats={rec.repeats} path: {visits}")
    return "\n".join(out)


# -------------------------------------------------------------------- 1

def test_criterion_1_gradient_check(acceptance_log):
    t0 = time.perf_counter()
    running = miniature_grad_check(seed=0, eps=1e-4, coords=30)
    batch = miniature_grad_check(seed=0, eps=1e-4, coords=10, batch_stats=True)
    bias = prenorm_bias_gradient(seed=0)
    seconds = time.perf_counter() - t0
    worst = max(running.max_error, batch.max_error)
    groups = len(running.by_param)
    ok = worst < 1e-4 and bias < 1e-12 and seconds < 300
    verdict(acceptance_log, 1, ok,
            f"max rel err {worst:.2e} < 1e-4 over {groups} groups (worst {running.worst[0]}); "
            f"pre-norm bias grad {bias:.1e}; {seconds:.0f}s < 300s")


# -------------------------------------------------------------------- 2

def test_criterion_2_teacher_trainability(acceptance_log):
    _, lines, meta = pipe.trained("teacher")
    rows = [parse_log_line(line) for line in lines if not line.startswith("#")]
    first, last = rows[0]["loss_f"], rows[-1]["loss_f"]
    ratio = last / first
    fast = meta["seconds"] < 900 and not meta["resumed"]
    ok = len(rows) == 3000 and ratio < 0.1 and fast
    verdict(acceptance_log, 2, ok,
            f"feature loss {first:.1f} -> {last:.2f} ({100 * ratio:.1f}% of initial, < 10%) "
            f"in {len(rows)} steps; {meta['seconds']:.0f}s < 900s"
            + ("" if not meta["resumed"] else " (resumed run: timing incomplete)"))


# -------------------------------------------------------------------- 3

def test_criterion_3_distillation_lowers_ood_wer(ood, acceptance_log):
    kd, fr, ss = ood["student"], ood["baseline-fr"], ood["baseline-ss"]
    print(format_table([ood[r] for r in pipe.ROLES]))
    ok = kd.wer < fr.wer and kd.wer <= ss.wer and kd.skips < fr.skips
    verdict(acceptance_log, 3, ok,
            f"OOD WER% KD {kd.wer:.2f} vs FR {fr.wer:.2f} (<), SS {ss.wer:.2f} (<=); "
            f"skips KD {kd.skips} vs FR {fr.skips} (<)")


# -------------------------------------------------------------------- 4

def test_criterion_4_no_repeats_from_student(ood, acceptance_log):
    kd, fr, ss = ood["student"], ood["baseline-fr"], ood["baseline-ss"]
    ok = kd.repeats == 0 and fr.repeats + ss.repeats > 0
    if not ok:
        print("flagged: repeat-suppression trend not reproduced")
        for rep in (kd, fr, ss):
            print(_diagnostics(rep))
    verdict(acceptance_log, 4, ok,
            f"OOD repeats KD {kd.repeats} (== 0), FR+SS {fr.repeats + ss.repeats} (> 0)"
            + ("" if ok else "; flagged, diagnostics in captured output"))


# -------------------------------------------------------------------- 5

def test_criterion_5_exposure_bias_gap(ood, acceptance_log):
    kd, tf = ood["student"], ood["teacher"]
    ok = kd.gap < tf.gap
    verdict(acceptance_log, 5, ok,
            f"OOD FR-TF feature-loss gap KD {kd.gap:.4f} < teacher {tf.gap:.4f}")


# -------------------------------------------------------------------- 6

def _header_weights(line):
    fields = dict(p.split("=", 1) for p in line.lstrip("# ").split())
    return float(fields["lambda"]), float(fields["stop_weight"]), float(fields["l2_weight"])


def _log_residual(lines):
    lam, sw, l2w = _header_weights(lines[0])
    worst = 0.0
    for line in lines[1:]:
        row = parse_log_line(line)
        total = row["loss_f"] + lam * row["loss_d"] + sw * row["loss_stop"] + l2w * row["l2"]
        worst = max(worst, abs(total - row["loss_total"]))
    return worst, len(lines) - 1


def test_criterion_6_loss_arithmetic(acceptance_log, tmp_path):
    logs = [pipe.trained(role)[1] for role in pipe.ROLES]
    # a lambda = 0 student against a distillation-free free-running run from the same start
    cfg = pipe.default_config()
    teacher = pipe.trained("teacher")[0]
    short = dataclasses.replace(cfg.train, total_steps=40, decay_start_step=20, distill_weight=0.0)
    split = pipe.corpus().split("train")
    kd0 = train("student", split, cfg.model, short, teacher=teacher, log_path=tmp_path / "kd0.log")
    fr = train("baseline-fr", split, cfg.model, short, init=teacher, log_path=tmp_path / "fr.log")
    same = [e.losses.feature for e in kd0.log] == [e.losses.feature for e in fr.log]
    logs += [(tmp_path / name).read_text().splitlines() for name in ("kd0.log", "fr.log")]
    residuals = [_log_residual(lines) for lines in logs]
    worst = max(r for r, _ in residuals)
    n_steps = sum(n for _, n in residuals)
    ok = worst <= 1e-12 and same
    verdict(acceptance_log, 6, ok,
            f"max |total - sum of parts| {worst:.1e} <= 1e-12 over {n_steps} logged steps; "
            f"lambda=0 feature trajectory {'==' if same else '!='} FR trajectory (40 steps, bit-exact)")


# -------------------------------------------------------------------- 7

def _trace_arrays(t):
    return [t.coarse.data, t.refined.data, t.stop_logits.data, t.step_hidden.data, t.attention]


def test_criterion_7_scheduled_sampling_limits(acceptance_log):
    params = pipe.trained("teacher")[0]
    b = batch_of(pipe.corpus().split("train")[:4], params.config.r)
    checks = []
    for ctx_of in (lambda: RunContext.train([5, 1]), RunContext.eval):
        ss1 = forward_scheduled(params, b, 1.0, seed=3, ctx=ctx_of())
        tf = forward_teacher_forced(params, b, ctx_of())
        ss0 = forward_scheduled(params, b, 0.0, seed=3, ctx=ctx_of())
        fr = forward_free_running(params, b, ctx_of())
        checks.append(all(np.array_equal(x, y) for x, y in zip(_trace_arrays(ss1), _trace_arrays(tf))))
        checks.append(all(np.array_equal(x, y) for x, y in zip(_trace_arrays(ss0), _trace_arrays(fr))))
    ok = all(checks)
    verdict(acceptance_log, 7, ok,
            "SS(p=1) == TF and SS(p=0) == FR bit-exact on every trace array, dropout on and off")


# -------------------------------------------------------------------- 8

def _brute_dtw(a, b):
    d = np.linalg.norm(a[:, None] - b[None], axis=2)
    n, m = d.shape
    best = np.inf
    # a monotone path is a sequence of moves; enumerate all with at most n + m - 2 steps
    for k in range(max(n, m) - 1, n + m - 1):
        for moves in itertools.product(((1, 0), (0, 1), (1, 1)), repeat=k):
            i = j = 0
            cost = 2 * d[0, 0]
            for di, dj in moves:
                i, j = i + di, j + dj
                if i >= n or j >= m:
                    break
                cost += d[i, j] * (2 if di and dj else 1)
            else:
                if (i, j) == (n - 1, m - 1):
                    best = min(best, cost)
    return best


def test_criterion_8_dsp(acceptance_log):
    sr, n_fft, hop = 22050, 1024, 256
    t = np.arange(sr // 2) / sr
    tone = AudioSignal(0.5 * np.sin(2 * np.pi * 440.0 * t), sr)
    mag = LinearSpectrogram(np.abs(dsp.stft(tone, n_fft, hop)), n_fft, hop, sr)
    _, hist = dsp.griffin_lim(mag, iterations=60, seed=0, return_history=True)
    rise = float(np.max(np.diff(hist)))
    monotone = len(hist) == 60 and rise <= 0.0

    x = np.random.default_rng(0).uniform(-1, 1, size=20000)
    y = dsp.istft(dsp.stft(x, n_fft, n_fft // 4), n_fft, n_fft // 4, length=len(x))
    snr = 10 * np.log10(np.sum(x ** 2) / np.sum((x - y) ** 2))

    dtw_worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        ref = _brute_dtw(a, b)
        dtw_worst = max(dtw_worst, abs(dtw_cost(a, b) - ref) / ref)
    ok = monotone and snr > 60 and dtw_worst < 1e-12
    verdict(acceptance_log, 8, ok,
            f"Griffin-Lim largest step change {rise:.1e} <= 0 over 60 iters; round-trip SNR "
            f"{snr:.0f} dB > 60; DTW vs brute force max rel diff {dtw_worst:.0e} on 100 seeds")


# -------------------------------------------------------------------- 9

def _snapshot(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes()
            for p in sorted(Path(directory).rglob("*")) if p.is_file()}


def test_criterion_9_cli_determinism(acceptance_log, tmp_path, capsys):
    short = ["--set", "train.total_steps=6", "--set", "train.decay_start_step=3",
             "--set", "train.checkpoint_every=3", "--set", "data.n_train=16",
             "--set", "data.n_test=4", "--set", "data.n_ood=4"]
    snaps, outputs = [], []
    for k in range(2):
        root = tmp_path / f"run{k}"
        codes = [
            main(["make-corpus", "--out", str(root / "corpus")] + short),
            main(["train", "--role", "teacher", "--corpus", str(root / "corpus"),
                  "--out", str(root / "teacher")] + short),
            main(["train", "--role", "student", "--corpus", str(root / "corpus"),
                  "--out", str(root / "student"), "--teacher-ckpt",
                  str(root / "teacher" / "latest.ckpt")] + short),
            main(["synth", "--ckpt", str(root / "student" / "latest.ckpt"), "--text", "badge",
                  "--out", str(root / "synth" / "badge.wav"), "--max-steps", "40"]),
        ]
        capsys.readouterr()
        codes.append(main(["eval", "--ckpt", f"kd={root / 'student' / 'latest.ckpt'}",
                           "--corpus", str(root / "corpus"), "--split", "test-in-domain"]))
        outputs.append(capsys.readouterr().out)
        assert codes == [0] * 5
        snaps.append(_snapshot(root))
    differing = sorted(k for k in snaps[0] if snaps[0][k] != snaps[1].get(k))
    ok = not differing and set(snaps[0]) == set(snaps[1]) and outputs[0] == outputs[1]
    kinds = sorted({Path(k).suffix or k for k in snaps[0]})
    verdict(acceptance_log, 9, ok,
            f"two CLI reruns byte-identical across {len(snaps[0])} files ({' '.join(kinds)}) "
            f"and eval output" + (f"; differing: {differing[:5]}" if differing else ""))


# ------------------------------------------------------------------- 10

def test_criterion_10_listening_results_out_of_scope(acceptance_log):
    readme = (ROOT / "README.md").read_text()
    header = format_table([]).splitlines()[0]
    documented = "out of scope" in readme and "not comparable" in readme
    ok = documented and "MOS" not in header
    verdict(acceptance_log, 10, ok,
            "listening-test scores not reproduced (documented out of scope); DTW error column "
            "documented as a non-comparable proxy")

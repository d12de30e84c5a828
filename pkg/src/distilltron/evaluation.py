"""Robustness and quality measurements on decoded utterances.

Skips and repeats are read off the attention alignment: with the argmax
token per decoder step collapsed into dwell runs, a token is *skipped* if
it never holds attention for ``min_dwell`` consecutive steps, and
*repeated* if attention comes back to it for ``min_dwell`` steps after a
later token already had such a run.  Each token counts at most once per
error type.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Utterance, batch_of, make_batch
from .distill import feature_loss
from .errors import InputError
from .model import RunContext, forward_free_running, forward_teacher_forced


@dataclass
class AlignmentPath:
    indices: np.ndarray
    runs: list           # (token, start_step, length)

    @property
    def tokens_visited(self):
        return [tok for tok, _, _ in self.runs]


def extract_path(attention) -> AlignmentPath:
    att = np.asarray(attention, dtype=np.float64)
    if att.ndim != 2 or att.size == 0:
        raise InputError(f"attention matrix must be non-empty 2-D, got shape {att.shape}")
    idx = np.argmax(att, axis=1)
    runs = []
    start = 0
    for k in range(1, len(idx) + 1):
        if k == len(idx) or idx[k] != idx[start]:
            runs.append((int(idx[start]), start, k - start))
            start = k
    return AlignmentPath(idx, runs)


def count_skips_repeats(path: AlignmentPath, n_tokens: int, min_dwell: int = 2):
    """Returns ``(skips, repeats)``."""
    dwelled = set()
    repeated = set()
    furthest = -1
    for tok, _, length in path.runs:
        if length < min_dwell:
            continue
        if tok < furthest:
            repeated.add(tok)
        dwelled.add(tok)
        furthest = max(furthest, tok)
    skips = sum(1 for j in range(n_tokens) if j not in dwelled)
    return skips, len(repeated)


def wer(skips, repeats, total_tokens) -> float:
    if total_tokens <= 0:
        raise InputError("total token count must be positive")
    return 100.0 * (skips + repeats) / total_tokens


def dtw_cost(pred, ref):
    """Minimum symmetric-pattern warping cost between two frame sequences.

    Diagonal moves weigh the local distance twice and the start cell counts
    as a diagonal move, so every admissible path carries total weight
    ``len(pred) + len(ref)``.
    """
    a = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    b = np.atleast_2d(np.asarray(ref, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise InputError("DTW needs non-empty sequences")
    d = np.stack([np.linalg.norm(b - row, axis=1) for row in a])
    n, m = d.shape
    acc = np.full((n, m), np.inf)
    acc[0, 0] = 2.0 * d[0, 0]
    for j in range(1, m):
        acc[0, j] = acc[0, j - 1] + d[0, j]
    for i in range(1, n):
        prev = acc[i - 1]
        row = acc[i]
        row[0] = prev[0] + d[i, 0]
        diag = prev[:-1] + 2.0 * d[i, 1:]
        vert = prev[1:] + d[i, 1:]
        best = np.minimum(diag, vert)
        for j in range(1, m):
            h = row[j - 1] + d[i, j]
            row[j] = best[j - 1] if best[j - 1] < h else h
    return float(acc[-1, -1])


def spectral_error(pred, ref) -> float:
    """DTW cost normalised by the (path-independent) total path weight."""
    a = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    b = np.atleast_2d(np.asarray(ref, dtype=np.float64))
    return dtw_cost(a, b) / (len(a) + len(b))


@dataclass
class UtteranceRecord:
    uid: str
    n_tokens: int
    skips: int
    repeats: int
    steps: int
    spectral_error: float
    runs: list = field(default_factory=list)


@dataclass
class EvalReport:
    name: str
    skips: int
    repeats: int
    total_tokens: int
    mean_spectral_error: float
    min_dwell: int
    records: list = field(default_factory=list)
    tf_loss: float | None = None
    fr_loss: float | None = None

    @property
    def wer(self):
        return wer(self.skips, self.repeats, self.total_tokens)

    @property
    def gap(self):
        if self.tf_loss is None or self.fr_loss is None:
            return None
        return self.fr_loss - self.tf_loss

    def lines(self):
        out = [f"utt={r.uid} tokens={r.n_tokens} steps={r.steps} skips={r.skips} "
               f"repeats={r.repeats} spectral_error={r.spectral_error!r}" for r in self.records]
        out.append(f"# summary model={self.name} skips={self.skips} repeats={self.repeats} "
                   f"tokens={self.total_tokens} wer={self.wer!r} "
                   f"spectral_error={self.mean_spectral_error!r} min_dwell={self.min_dwell}"
                   + ("" if self.gap is None else
                      f" tf_loss={self.tf_loss!r} fr_loss={self.fr_loss!r} gap={self.gap!r}"))
        return out


def synthesize(params, utterance: Utterance, max_steps_factor=2.0, seed=0):
    """Stop-token free-running decode sized from the reference length."""
    r = params.config.r
    max_steps = max(1, math.ceil(max_steps_factor * math.ceil(utterance.n_frames / r)))
    return forward_free_running(params, make_batch([utterance.tokens], r=r),
                                RunContext.eval(seed), max_steps=max_steps)


def exposure_bias_gap(params, utterances):
    """Mean feature loss under teacher forcing and under forced-length free running.

    Evaluated per utterance with dropout off.  Returns ``(tf, fr)``; the
    gap is ``fr - tf``.
    """
    if not utterances:
        raise InputError("no utterances to evaluate")
    tf, fr = [], []
    for u in utterances:
        b = batch_of([u], params.config.r)
        for mode, acc in ((forward_teacher_forced, tf), (forward_free_running, fr)):
            trace = mode(params, b, RunContext.eval())
            acc.append(feature_loss(trace.coarse, trace.refined, b.mel, b.frame_mask).item())
    return float(np.mean(tf)), float(np.mean(fr))


def evaluate(params, utterances, name="model", min_dwell=2, max_steps_factor=2.0, seed=0,
             with_gap=True) -> EvalReport:
    if not utterances:
        raise InputError("cannot evaluate an empty split")
    records = []
    for u in utterances:
        trace = synthesize(params, u, max_steps_factor, seed)
        n_tok = len(u.tokens)
        path = extract_path(trace.alignment(0, n_tok))
        skips, repeats = count_skips_repeats(path, n_tok, min_dwell)
        err = spectral_error(trace.mel(0), u.mel.frames)
        records.append(UtteranceRecord(u.uid, n_tok, skips, repeats, int(trace.step_lengths[0]),
                                       err, path.runs))
    report = EvalReport(name, sum(r.skips for r in records), sum(r.repeats for r in records),
                        sum(r.n_tokens for r in records),
                        float(np.mean([r.spectral_error for r in records])), min_dwell, records)
    if with_gap:
        report.tf_loss, report.fr_loss = exposure_bias_gap(params, utterances)
    return report


def format_table(reports) -> str:
    head = f"{'model':<14}{'skips':>7}{'repeats':>9}{'WER%':>9}{'DTW err':>10}{'gap':>11}"
    rows = [head, "-" * len(head)]
    for r in reports:
        gap = "n/a" if r.gap is None else f"{r.gap:.3f}"
        rows.append(f"{r.name:<14}{r.skips:>7}{r.repeats:>9}{r.wer:>9.2f}"
                    f"{r.mean_spectral_error:>10.4f}{gap:>11}")
    return "\n".join(rows)

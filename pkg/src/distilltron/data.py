"""Synthetic corpus with exactly known alignments.

Every symbol owns a spectral template in log-mel space (a Gaussian bump
around its own mel band, shaped over time by a rise-and-fall envelope) and
a typical duration.  An utterance is the concatenation of its symbols'
templates, so the frame-level alignment is known by construction and a
decoder's skips and repeats can be counted mechanically.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field

import numpy as np

from .dsp import MelSpectrogram, read_melspec, write_melspec
from .errors import ConfigError, InputError, ParseError

PAD = "_"
END = "~"
LETTERS = "abcdefghij"


@dataclass(frozen=True)
class Vocab:
    symbols: tuple

    def __post_init__(self):
        if not self.symbols or self.symbols[0] != PAD:
            raise ConfigError("vocab must start with the padding symbol")
        if len(set(self.symbols)) != len(self.symbols):
            raise ConfigError("vocab symbols must be unique")

    @classmethod
    def default(cls, letters=LETTERS):
        return cls((PAD,) + tuple(letters) + (END,))

    @property
    def ids(self):
        return {s: i for i, s in enumerate(self.symbols)}

    @property
    def letters(self):
        return tuple(s for s in self.symbols if s not in (PAD, END))

    def __len__(self):
        return len(self.symbols)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple
    vocab_size: int

    def __post_init__(self):
        if len(self.ids) < 1:
            raise InputError("token sequence is empty")
        bad = [i for i in self.ids if not 0 <= i < self.vocab_size]
        if bad:
            raise InputError(f"token ids {bad} outside vocabulary of size {self.vocab_size}")

    def __len__(self):
        return len(self.ids)


def tokenize(text: str, vocab: Vocab) -> TokenSequence:
    if not text:
        raise InputError("cannot tokenize empty text")
    table = vocab.ids
    ids = []
    for pos, ch in enumerate(text):
        if ch not in table or ch == PAD:
            raise InputError(f"unknown character {ch!r} at position {pos}")
        ids.append(table[ch])
    return TokenSequence(tuple(ids), len(vocab))


def detokenize(tokens: TokenSequence, vocab: Vocab) -> str:
    return "".join(vocab.symbols[i] for i in tokens.ids)


@dataclass
class ToySpec:
    """Per-symbol templates and durations for the synthetic language."""

    vocab: Vocab
    n_mels: int
    bands: dict          # symbol id -> dominant mel band
    widths: dict         # symbol id -> bump width in bands
    durations: dict      # symbol id -> base duration in frames
    jitter: int = 1
    noise: float = 0.1
    background: float = -1.0
    amplitude: float = 3.0
    seed: int = 0

    @classmethod
    def build(cls, vocab: Vocab, n_mels=80, duration_range=(6, 12), jitter=1,
              noise=0.1, seed=0):
        letters = [vocab.ids[s] for s in vocab.letters]
        slot = n_mels // len(letters)
        if slot < 2:
            raise ConfigError(f"{n_mels} mel bands cannot host {len(letters)} disjoint symbol bands")
        lo, hi = duration_range
        if lo - jitter < 3 or hi < lo:
            raise ConfigError(f"durations must stay >= 3 frames, got range {duration_range} with jitter {jitter}")
        rng = np.random.default_rng([seed, 101])
        order = rng.permutation(len(letters))
        bands = {sid: int(order[k] * slot + slot // 2) for k, sid in enumerate(letters)}
        widths = {sid: float(rng.uniform(0.3, 0.25 * slot)) for sid in letters}
        durations = {sid: int(rng.integers(lo, hi + 1)) for sid in letters}
        return cls(vocab, n_mels, bands, widths, durations, jitter, noise, seed=seed)

    def template(self, sid, duration):
        """Noise-free log-mel frames for one symbol lasting ``duration`` frames."""
        k = np.arange(duration)
        env = 0.5 + 0.5 * np.sin(np.pi * (k + 0.5) / duration)
        bins = np.arange(self.n_mels)
        bump = np.exp(-0.5 * ((bins - self.bands[sid]) / self.widths[sid]) ** 2)
        return self.background + self.amplitude * env[:, None] * bump[None, :]


def synth_utterance(tokens: TokenSequence, spec: ToySpec, seed=0):
    """Render ``tokens``; returns ``(MelSpectrogram, [(start, end), ...])``."""
    rng = np.random.default_rng([spec.seed, seed])
    blocks, align, start = [], [], 0
    for sid in tokens.ids:
        if sid not in spec.durations:
            raise InputError(f"token id {sid} has no template")
        d = spec.durations[sid] + int(rng.integers(-spec.jitter, spec.jitter + 1))
        blocks.append(spec.template(sid, d))
        align.append((start, start + d))
        start += d
    frames = np.concatenate(blocks)
    if spec.noise > 0:
        frames = frames + spec.noise * rng.standard_normal(frames.shape)
    return MelSpectrogram(frames), align


@dataclass
class Utterance:
    uid: str
    split: str
    text: str
    tokens: TokenSequence
    mel: MelSpectrogram
    alignment: list

    @property
    def n_frames(self):
        return len(self.mel)


SPLITS = ("train", "test-in-domain", "test-out-of-domain")


@dataclass
class Corpus:
    vocab: Vocab
    spec: ToySpec
    items: list = field(default_factory=list)

    def split(self, name) -> list:
        if name not in SPLITS:
            raise InputError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [u for u in self.items if u.split == name]

    def manifest_lines(self, mel_dir="mels"):
        out = []
        for u in self.items:
            align = " ".join(f"{i}:{s}:{e}" for i, (s, e) in enumerate(u.alignment))
            out.append(f"{u.uid} {u.split} {u.text} {mel_dir}/{u.uid}.melspec {align}")
        return out

    def checksum(self):
        h = hashlib.sha256("\n".join(self.manifest_lines()).encode())
        for u in self.items:
            h.update(u.mel.frames.tobytes())
        return h.hexdigest()


def _random_text(rng, letters, length):
    # no symbol directly repeats, so every token boundary is visible
    out = [rng.choice(letters)]
    while len(out) < length:
        ch = rng.choice(letters)
        if ch != out[-1]:
            out.append(ch)
    return "".join(out)


def build_corpus(n_train=200, n_test=40, n_ood=40, train_lengths=(5, 12),
                 ood_lengths=(20, 40), spec: ToySpec | None = None, seed=0,
                 n_mels=80) -> Corpus:
    """Seeded corpus with train, in-domain test and long out-of-domain test splits."""
    if train_lengths[0] < 1 or train_lengths[0] > train_lengths[1]:
        raise ConfigError(f"bad train length range {train_lengths}")
    if ood_lengths[0] > ood_lengths[1]:
        raise ConfigError(f"bad out-of-domain length range {ood_lengths}")
    if ood_lengths[0] <= train_lengths[1]:
        raise ConfigError(
            f"out-of-domain minimum length {ood_lengths[0]} must exceed training maximum {train_lengths[1]}")
    if spec is None:
        spec = ToySpec.build(Vocab.default(), n_mels=n_mels, seed=seed)
    vocab = spec.vocab
    letters = list(vocab.letters)
    rng = np.random.default_rng([seed, 7])
    corpus = Corpus(vocab, spec)
    plan = [("train", n_train, train_lengths), ("test-in-domain", n_test, train_lengths),
            ("test-out-of-domain", n_ood, ood_lengths)]
    k = 0
    for split, count, (lo, hi) in plan:
        for _ in range(count):
            text = _random_text(rng, letters, int(rng.integers(lo, hi + 1)))
            tokens = tokenize(text, vocab)
            mel, align = synth_utterance(tokens, spec, seed=k)
            corpus.items.append(Utterance(f"utt{k:05d}", split, text, tokens, mel, align))
            k += 1
    return corpus


def corpus_from_config(data, n_mels=80) -> Corpus:
    """Build the corpus described by a :class:`~distilltron.config.DataConfig`."""
    data.validate()
    spec = ToySpec.build(Vocab.default(), n_mels=n_mels,
                         duration_range=(data.min_duration, data.max_duration),
                         jitter=data.duration_jitter, noise=data.noise, seed=data.seed)
    return build_corpus(data.n_train, data.n_test, data.n_ood,
                        (data.train_min_len, data.train_max_len),
                        (data.ood_min_len, data.ood_max_len), spec=spec, seed=data.seed)


def write_corpus(corpus: Corpus, out_dir):
    os.makedirs(os.path.join(out_dir, "mels"), exist_ok=True)
    for u in corpus.items:
        write_melspec(os.path.join(out_dir, "mels", f"{u.uid}.melspec"), u.mel)
    spec = corpus.spec
    lines = ["# distilltron corpus manifest v1",
             f"# vocab {''.join(corpus.vocab.symbols)}",
             f"# spec n_mels={spec.n_mels} jitter={spec.jitter} noise={spec.noise!r} "
             f"background={spec.background!r} amplitude={spec.amplitude!r} seed={spec.seed}",
             "# symbols " + " ".join(
                 f"{sid}:{spec.bands[sid]}:{spec.widths[sid]!r}:{spec.durations[sid]}"
                 for sid in sorted(spec.bands))]
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w") as fh:
        fh.write("\n".join(lines + corpus.manifest_lines()) + "\n")
    return path


def load_corpus(out_dir) -> Corpus:
    path = os.path.join(out_dir, "manifest.txt")
    with open(path) as fh:
        lines = fh.read().splitlines()
    meta = {}
    body = []
    for line in lines:
        if line.startswith("# "):
            key, _, rest = line[2:].partition(" ")
            meta[key] = rest
        elif line.strip():
            body.append(line)
    try:
        vocab = Vocab(tuple(meta["vocab"]))
        kv = dict(part.split("=", 1) for part in meta["spec"].split())
        bands, widths, durs = {}, {}, {}
        for entry in meta["symbols"].split():
            sid, band, width, dur = entry.split(":")
            bands[int(sid)], widths[int(sid)], durs[int(sid)] = int(band), float(width), int(dur)
        spec = ToySpec(vocab, int(kv["n_mels"]), bands, widths, durs, int(kv["jitter"]),
                       float(kv["noise"]), float(kv["background"]), float(kv["amplitude"]),
                       int(kv["seed"]))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"corpus manifest header is malformed: {exc}") from None
    corpus = Corpus(vocab, spec)
    for line in body:
        uid, split, text, mel_path, *triples = line.split()
        mel = read_melspec(os.path.join(out_dir, mel_path))
        align = []
        for t in triples:
            _, s, e = t.split(":")
            align.append((int(s), int(e)))
        corpus.items.append(Utterance(uid, split, text, tokenize(text, vocab), mel, align))
    return corpus


# ------------------------------------------------------------------ batching

@dataclass
class Batch:
    """Padded batch.

    ``mel`` is ``(B, frames, n_mels)`` with frames rounded up to a multiple
    of ``r``; padding repeats each utterance's last real frame and is
    excluded by ``frame_mask``.
    """

    ids: np.ndarray
    token_mask: np.ndarray
    mel: np.ndarray | None
    frame_mask: np.ndarray | None
    r: int
    uids: tuple = ()

    @property
    def size(self):
        return self.ids.shape[0]

    @property
    def n_steps(self):
        return self.mel.shape[1] // self.r

    @property
    def step_mask(self):
        return self.frame_mask[:, ::self.r]

    @property
    def frame_lengths(self):
        return self.frame_mask.sum(axis=1)

    def stop_targets(self):
        """1 for every decoder step at or after the one holding the final frame."""
        last_step = (self.frame_lengths - 1) // self.r
        steps = np.arange(self.n_steps)
        return (steps[None, :] >= last_step[:, None]).astype(np.float64)


def make_batch(tokens_list, mels=None, r=2, uids=()) -> Batch:
    b = len(tokens_list)
    t_max = max(len(t) for t in tokens_list)
    ids = np.zeros((b, t_max), dtype=np.int64)
    tmask = np.zeros((b, t_max), dtype=bool)
    for i, tok in enumerate(tokens_list):
        ids[i, :len(tok)] = tok.ids
        tmask[i, :len(tok)] = True
    mel = fmask = None
    if mels is not None:
        frames = [m.frames if isinstance(m, MelSpectrogram) else np.asarray(m) for m in mels]
        f_max = max(len(f) for f in frames)
        f_max = -(-f_max // r) * r
        mel = np.zeros((b, f_max, frames[0].shape[1]))
        fmask = np.zeros((b, f_max), dtype=bool)
        for i, f in enumerate(frames):
            mel[i, :len(f)] = f
            mel[i, len(f):] = f[-1]
            fmask[i, :len(f)] = True
    return Batch(ids, tmask, mel, fmask, r, tuple(uids))


def batch_of(utterances, r=2) -> Batch:
    return make_batch([u.tokens for u in utterances], [u.mel for u in utterances], r,
                      [u.uid for u in utterances])


class BatchStream:
    """Endless per-epoch shuffled batches, addressable by global step.

    The order for epoch ``e`` depends only on ``(seed, e)``, so a run that
    resumes at step ``n`` sees exactly the batches it would have seen.
    """

    def __init__(self, utterances, batch_size, seed=0, r=2):
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not utterances:
            raise InputError("cannot batch an empty split")
        self.utterances = list(utterances)
        self.batch_size = min(batch_size, len(self.utterances))
        self.seed = seed
        self.r = r
        self.per_epoch = len(self.utterances) // self.batch_size

    def order(self, epoch):
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.utterances))

    def batch_at(self, step) -> Batch:
        epoch, k = divmod(step, self.per_epoch)
        idx = self.order(epoch)[k * self.batch_size:(k + 1) * self.batch_size]
        return batch_of([self.utterances[i] for i in idx], self.r)

    def __iter__(self):
        step = 0
        while True:
            yield self.batch_at(step)
            step += 1


def batch(split, batch_size, seed=0, r=2):
    """Generator of padded batches over ``split`` (a list of utterances)."""
    return iter(BatchStream(split, batch_size, seed, r))

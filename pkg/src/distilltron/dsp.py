"""Signal path: STFT, mel analysis, Griffin-Lim and 16-bit WAV files.

Everything here is plain numpy and pure: identical inputs (and seeds) give
identical outputs.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, InputError, ParseError

MEL_FLOOR = 1e-5


@dataclass
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("audio samples must be finite")

    def __len__(self):
        return len(self.samples)


@dataclass
class MelSpectrogram:
    """Log-magnitude mel energies, one row per frame."""

    frames: np.ndarray
    hop: int = 256
    sample_rate: int = 22050

    def __post_init__(self):
        self.frames = np.atleast_2d(np.asarray(self.frames, dtype=np.float64))
        if self.frames.shape[0] < 1:
            raise InputError("mel spectrogram needs at least one frame")
        if not np.all(np.isfinite(self.frames)):
            raise InputError("mel spectrogram contains non-finite values")

    @property
    def n_mels(self):
        return self.frames.shape[1]

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class LinearSpectrogram:
    frames: np.ndarray
    fft_size: int = 1024
    hop: int = 256
    sample_rate: int = 22050

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[1] != self.fft_size // 2 + 1:
            raise DimensionError(
                f"linear spectrogram {self.frames.shape} does not match fft size {self.fft_size}")


def hann(n):
    """Periodic Hann window (constant overlap-add at hop n/4)."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _check_fft(fft_size, hop):
    if fft_size < 2 or fft_size & (fft_size - 1):
        raise ConfigError(f"fft_size must be a power of two, got {fft_size}")
    if not 0 < hop <= fft_size:
        raise ConfigError(f"hop must lie in (0, fft_size], got {hop}")


def _frames_stft(x, fft_size, hop):
    n_frames = (len(x) - fft_size) // hop + 1
    idx = np.arange(fft_size)[None, :] + hop * np.arange(n_frames)[:, None]
    return np.fft.rfft(x[idx] * hann(fft_size), axis=1)


def _ls_istft(spec, fft_size, hop):
    """Least-squares inverse of :func:`_frames_stft` (weighted overlap-add)."""
    n_frames = spec.shape[0]
    win = hann(fft_size)
    frames = np.fft.irfft(spec, n=fft_size, axis=1) * win
    length = fft_size + hop * (n_frames - 1)
    out = np.zeros(length)
    norm = np.zeros(length)
    for i in range(n_frames):
        out[i * hop:i * hop + fft_size] += frames[i]
        norm[i * hop:i * hop + fft_size] += win * win
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    return out


def stft(signal: AudioSignal | np.ndarray, fft_size=1024, hop=256) -> np.ndarray:
    """Hann-windowed STFT with frames centred by reflect padding.

    Returns a complex array ``(frames, fft_size // 2 + 1)``.
    """
    _check_fft(fft_size, hop)
    x = signal.samples if isinstance(signal, AudioSignal) else np.asarray(signal, dtype=float)
    if len(x) < fft_size:
        raise InputError(f"signal of {len(x)} samples is shorter than one frame ({fft_size})")
    pad = fft_size // 2
    return _frames_stft(np.pad(x, pad, mode="reflect"), fft_size, hop)


def istft(spec: np.ndarray, fft_size=1024, hop=256, length=None) -> np.ndarray:
    """Inverse of :func:`stft`; ``length`` trims to the original sample count."""
    _check_fft(fft_size, hop)
    pad = fft_size // 2
    x = _ls_istft(np.asarray(spec), fft_size, hop)[pad:]
    if length is None:
        length = len(x) - pad
    x = x[:length]
    if len(x) < length:
        x = np.pad(x, (0, length - len(x)))
    return x


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_centers(n_mels, f_min, f_max):
    """Centre frequencies (Hz) of the triangular filters."""
    pts = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    return pts[1:-1]


def mel_filterbank(n_mels=80, fft_size=1024, sample_rate=22050, f_min=0.0, f_max=8000.0):
    """Triangular filters equally spaced on the mel scale, peak height 1.

    Returns ``(n_mels, fft_size // 2 + 1)``.
    """
    if not 0 <= f_min < f_max <= sample_rate / 2:
        raise ConfigError(f"need 0 <= f_min < f_max <= sr/2, got {f_min}, {f_max}, sr={sample_rate}")
    if n_mels < 1:
        raise ConfigError("n_mels must be positive")
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    pts = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lower, center, upper = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs[None, :] - lower) / (center - lower)
    down = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(up, down))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise ConfigError(
            f"{n_mels} mel filters is too many for fft_size {fft_size}: "
            f"filters {empty.tolist()[:5]} cover no FFT bin")
    return fb


def wav_to_mel(signal: AudioSignal, n_mels=80, fft_size=1024, hop=256,
               f_min=0.0, f_max=8000.0, floor=MEL_FLOOR) -> MelSpectrogram:
    mag = np.abs(stft(signal, fft_size, hop))
    fb = mel_filterbank(n_mels, fft_size, signal.sample_rate, f_min, f_max)
    energies = mag @ fb.T
    return MelSpectrogram(np.log(np.maximum(energies, floor)), hop, signal.sample_rate)


def mel_to_linear(mel: MelSpectrogram, filterbank: np.ndarray, fft_size=None) -> LinearSpectrogram:
    """Approximate inversion by the filterbank transpose, clamped at zero."""
    if filterbank.shape[0] != mel.n_mels:
        raise DimensionError(
            f"filterbank has {filterbank.shape[0]} filters but mel has {mel.n_mels} channels")
    fft_size = fft_size or 2 * (filterbank.shape[1] - 1)
    mag = np.maximum(np.exp(mel.frames) @ filterbank, 0.0)
    return LinearSpectrogram(mag, fft_size, mel.hop, mel.sample_rate)


def spectral_convergence(estimate, target):
    return float(np.linalg.norm(np.abs(estimate) - target) / max(np.linalg.norm(target), 1e-300))


def griffin_lim(magnitude: LinearSpectrogram, iterations=60, seed=0, return_history=False):
    """Classic Griffin-Lim phase reconstruction.

    Alternates between the least-squares signal for the current complex
    estimate and re-imposing the target magnitude.  Internally the frames
    tile an uncentred signal, which makes the synthesis step an exact
    least-squares inverse and the spectral convergence non-increasing.
    With ``return_history`` the per-iteration convergence values are
    returned alongside the signal.
    """
    if iterations < 1:
        raise ConfigError(f"iterations must be >= 1, got {iterations}")
    target = magnitude.frames
    if not np.all(np.isfinite(target)):
        raise InputError("magnitudes must be finite")
    n, hop = magnitude.fft_size, magnitude.hop
    rng = np.random.default_rng(seed)
    spec = target * np.exp(2j * np.pi * rng.random(target.shape))
    history = []
    for _ in range(iterations):
        x = _ls_istft(spec, n, hop)
        est = _frames_stft(x, n, hop)
        history.append(spectral_convergence(est, target))
        spec = target * np.exp(1j * np.angle(est))
    x = _ls_istft(spec, n, hop)
    pad = n // 2
    length = hop * (target.shape[0] - 1)
    samples = x[pad:pad + length]
    peak = np.max(np.abs(samples)) if samples.size else 0.0
    if peak > 1.0:
        samples = samples / peak
    sig = AudioSignal(samples, magnitude.sample_rate)
    return (sig, history) if return_history else sig


def mel_to_audio(mel: MelSpectrogram, n_fft=1024, f_min=0.0, f_max=8000.0, iterations=60, seed=0):
    """Convenience chain mel -> linear magnitude -> Griffin-Lim."""
    fb = mel_filterbank(mel.n_mels, n_fft, mel.sample_rate, f_min, f_max)
    return griffin_lim(mel_to_linear(mel, fb, n_fft), iterations, seed)


# ------------------------------------------------------------------------ WAV

def wav_write(path, signal: AudioSignal):
    """Write 16-bit PCM mono RIFF/WAVE.  Returns the number of clipped samples."""
    x = signal.samples
    clipped = int(np.sum(np.abs(x) > 1.0))
    if clipped:
        warnings.warn(f"{clipped} samples outside [-1, 1] were clipped", stacklevel=2)
    pcm = np.round(np.clip(x, -1.0, 1.0) * 32767).astype("<i2").tobytes()
    sr = int(signal.sample_rate)
    header = b"RIFF" + struct.pack("<I", 36 + len(pcm)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sr, sr * 2, 2, 16)
    data = b"data" + struct.pack("<I", len(pcm))
    with open(path, "wb") as fh:
        fh.write(header + fmt + data + pcm)
    return clipped


def wav_read(path) -> AudioSignal:
    with open(path, "rb") as fh:
        raw = fh.read()
    return parse_wav(raw)


def parse_wav(raw: bytes) -> AudioSignal:
    if len(raw) < 12:
        raise ParseError("truncated RIFF header", len(raw))
    if raw[0:4] != b"RIFF":
        raise ParseError("missing RIFF tag", 0)
    if raw[8:12] != b"WAVE":
        raise ParseError("missing WAVE tag", 8)
    pos = 12
    fmt = None
    while pos < len(raw):
        if pos + 8 > len(raw):
            raise ParseError("truncated chunk header", pos)
        tag = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = pos + 8
        if tag == b"fmt ":
            if size < 16 or body + 16 > len(raw):
                raise ParseError("truncated fmt chunk", body)
            audio_fmt, channels, sr, _, _, bits = struct.unpack("<HHIIHH", raw[body:body + 16])
            if audio_fmt != 1 or channels != 1 or bits != 16:
                raise ParseError(
                    f"unsupported format (format={audio_fmt}, channels={channels}, bits={bits})", body)
            fmt = sr
        elif tag == b"data":
            if fmt is None:
                raise ParseError("data chunk before fmt chunk", pos)
            if body + size > len(raw) or size % 2:
                raise ParseError(f"data chunk declares {size} bytes, file has {len(raw) - body}", body)
            pcm = np.frombuffer(raw[body:body + size], dtype="<i2").astype(np.float64) / 32767.0
            return AudioSignal(pcm, fmt)
        pos = body + size + (size & 1)
    raise ParseError("no data chunk", len(raw))


# --------------------------------------------------------------- MELSPEC dump

MELSPEC_MAGIC = "MELSPEC v1"


def format_melspec(mel: MelSpectrogram) -> str:
    t, n = mel.frames.shape
    lines = [f"{MELSPEC_MAGIC} {t} {n} {mel.hop} {mel.sample_rate}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in mel.frames]
    return "\n".join(lines) + "\n"


def parse_melspec(text: str) -> MelSpectrogram:
    lines = text.splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 6 or " ".join(head[:2]) != MELSPEC_MAGIC:
        raise ParseError("bad MELSPEC header", 0)
    t, n, hop, sr = (int(v) for v in head[2:])
    rows = [line.split() for line in lines[1:1 + t]]
    if len(rows) != t or any(len(r) != n for r in rows):
        raise ParseError(f"expected {t} rows of {n} values", len(lines[0]) + 1)
    return MelSpectrogram(np.array(rows, dtype=np.float64).reshape(t, n), hop, sr)


def write_melspec(path, mel: MelSpectrogram):
    with open(path, "w") as fh:
        fh.write(format_melspec(mel))


def read_melspec(path) -> MelSpectrogram:
    with open(path) as fh:
        return parse_melspec(fh.read())

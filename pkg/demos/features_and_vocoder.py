"""
Toy corpus, mel features and Griffin-Lim
========================================

Generate a few synthetic utterances, look at their alignment, and turn a
mel spectrogram back into a waveform.  Run with
``python3 demos/features_and_vocoder.py``; it writes ``demo.wav`` in the
working directory.
"""

import numpy as np

from distilltron import dsp
from distilltron.data import ToySpec, Vocab, synth_utterance, tokenize

# every letter gets a dominant mel band and a nominal duration in frames
vocab = Vocab.default()
spec = ToySpec.build(vocab, n_mels=80, seed=0)
tokens = tokenize("badge", vocab)
mel, alignment = synth_utterance(tokens, spec, seed=1)
print("frames", len(mel), "alignment", alignment)

# within each letter's span the loudest band is that letter's band
for sid, (start, end) in zip(tokens.ids, alignment):
    band = np.bincount(np.argmax(mel.frames[start:end], axis=1)).argmax()
    print(vocab.symbols[sid], "band", band, "expected", spec.bands[sid])

# features from a real signal: a 440 Hz tone peaks near the filter centred on 440 Hz
t = np.arange(22050) / 22050
tone = dsp.AudioSignal(0.5 * np.sin(2 * np.pi * 440 * t), 22050)
tone_mel = dsp.wav_to_mel(tone)
print("tone peak channel", np.argmax(tone_mel.frames[40]))

# Griffin-Lim: the spectral convergence only goes down
mag = dsp.LinearSpectrogram(np.abs(dsp.stft(tone)), 1024, 256, 22050)
audio, history = dsp.griffin_lim(mag, iterations=30, seed=0, return_history=True)
print("convergence first/last", history[0], history[-1])

# a synthetic mel all the way to audio
wave = dsp.mel_to_audio(mel, iterations=30, seed=0)
wave = dsp.AudioSignal(wave.samples / max(1.0, np.abs(wave.samples).max() / 0.99), wave.sample_rate)
dsp.wav_write("demo.wav", wave)
print("wrote demo.wav,", len(wave), "samples")

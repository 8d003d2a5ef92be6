"""From a waveform to the 3x128x128 log-mel image the network reads.

Run: python3 demos/02_mel_features.py
"""
import numpy as np

from dsscnet import dsp
from dsscnet.synth import SynthSpec, speaker_params, synth_utterance

sr = dsp.SAMPLE_RATE

# 1 kHz tone: every frame should peak in the same mel band
t = np.arange(sr) / sr
tone = dsp.AudioClip(0.5 * np.sin(2 * np.pi * 1000 * t))
mel = dsp.mel_spectrogram(tone)
print("1 s tone -> mel matrix", mel.shape, "(128 bands x frames)")
print("peak band per frame is constant:", bool(np.all(mel.argmax(0) == mel.argmax(0)[0])), "band", mel.argmax(0)[0])

# silence sits exactly on the log floor
silent = dsp.waveform_to_image(dsp.AudioClip(np.zeros(sr)))
print("silence -> every pixel equals log(1e-6):", bool(np.all(silent.planes == np.log(1e-6))))

# one synthetic utterance per severity, trimmed and resized
spec = SynthSpec()
for sev, name in enumerate(("Low", "Medium", "High", "VeryHigh")):
    params = speaker_params(spec, sev, 0)
    wave = synth_utterance(params, np.random.default_rng([0, sev]), spec)
    clip = dsp.AudioClip(wave)
    trimmed = dsp.trim_silence(clip)
    img = dsp.waveform_to_image(clip)
    print(f"{name:9s} {clip.duration:.2f}s -> trimmed {trimmed.duration:.2f}s -> image {img.planes.shape}, "
          f"mean log-power {img.planes[0].mean():6.2f}")

import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsscnet import dsp

SR = dsp.SAMPLE_RATE


def tone(freq, seconds=1.0, amp=0.5):
    t = np.arange(int(SR * seconds)) / SR
    return dsp.AudioClip(amp * np.sin(2 * np.pi * freq * t), SR, "tone")


# --------------------------------------------------------------------------
# framing and spectrogram


@pytest.mark.parametrize("n,frames", [(16000, 247), (256, 1), (319, 1), (320, 2), (8000, 122)])
def test_frame_count(n, frames):
    assert dsp.n_frames_for(n) == frames
    assert dsp.mel_spectrogram(dsp.AudioClip(np.zeros(n) + 0.01)).shape == (128, frames)


def test_silence_is_log_floor():
    mel = dsp.mel_spectrogram(dsp.AudioClip(np.zeros(SR)))
    assert np.all(mel == np.log(1e-6))
    image = dsp.waveform_to_image(dsp.AudioClip(np.zeros(SR)))
    assert np.all(image.planes == np.float64(np.log(1e-6)))


def test_tone_band_argmax_is_stable():
    mel = dsp.mel_spectrogram(tone(1000.0))
    peaks = mel.argmax(axis=0)
    assert np.all(peaks == peaks[0])
    centres = dsp.mel_to_hz(np.linspace(0, dsp.hz_to_mel(8000), 130))[1:-1]
    assert abs(centres[peaks[0]] - 1000.0) < 60.0


def test_filterbank_covers_every_band_and_bin():
    fb = dsp.mel_filterbank()
    assert fb.shape == (128, 129)
    assert np.all(fb.sum(axis=1) > 0)
    assert np.all(fb.sum(axis=0)[1:] > 0)
    assert np.all(fb >= 0) and np.all(fb <= 1)


def test_too_short_clip_raises():
    with pytest.raises(dsp.ClipTooShortError):
        dsp.mel_spectrogram(dsp.AudioClip(np.ones(100)))


def test_image_shape_and_identical_planes():
    image = dsp.waveform_to_image(tone(440.0, 0.7))
    assert image.planes.shape == (3, 128, 128)
    assert np.array_equal(image.planes[0], image.planes[1]) and np.array_equal(image.planes[1], image.planes[2])


# --------------------------------------------------------------------------
# trimming


def test_trim_keeps_interior_silence():
    x = np.concatenate([np.zeros(1600), np.ones(800) * 0.5, np.zeros(1600), np.ones(800) * 0.5, np.zeros(1600)])
    out = dsp.trim_silence(dsp.AudioClip(x)).samples
    assert out.size == 800 + 1600 + 800
    assert np.all(out[800:2400] == 0)


def test_trim_all_quiet_returns_one_frame():
    out = dsp.trim_silence(dsp.AudioClip(np.zeros(SR)))
    assert out.samples.size == 160


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_trim_idempotent(seed):
    r = np.random.default_rng(seed)
    x = np.concatenate([r.normal(0, 1e-4, r.integers(0, 3000)), r.normal(0, 0.3, r.integers(200, 4000)),
                        r.normal(0, 1e-4, r.integers(0, 3000))])
    once = dsp.trim_silence(dsp.AudioClip(x))
    twice = dsp.trim_silence(once)
    np.testing.assert_array_equal(once.samples, twice.samples)


# --------------------------------------------------------------------------
# WAV I/O and cache


def test_wav_roundtrip(tmp_path):
    x = np.sin(np.linspace(0, 40, 4000)) * 0.8
    dsp.write_wav(tmp_path / "a.wav", x)
    clip = dsp.load_wav(tmp_path / "a.wav")
    assert clip.sample_rate == SR and clip.source_id == "a"
    # written as round(x * 32767), read back as n / 32768 (libsndfile's convention)
    assert np.all(np.abs(clip.samples - x) <= (0.5 + np.abs(x)) / 32768 + 1e-12)


def test_stereo_is_averaged(tmp_path):
    left = np.full(1000, 0.5)
    right = np.full(1000, -0.25)
    dsp.write_wav(tmp_path / "s.wav", np.stack([left, right], axis=1))
    np.testing.assert_allclose(dsp.load_wav(tmp_path / "s.wav").samples, 0.125, atol=1e-4)


def test_not_a_wav(tmp_path):
    (tmp_path / "x.wav").write_bytes(b"definitely not audio")
    with pytest.raises(dsp.NotWavError):
        dsp.load_wav(tmp_path / "x.wav")


def test_empty_wav(tmp_path):
    with wave.open(str(tmp_path / "e.wav"), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SR)
    with pytest.raises(dsp.EmptyAudioError):
        dsp.load_wav(tmp_path / "e.wav")


def test_non_pcm_codec(tmp_path):
    # WAVE_FORMAT_IEEE_FLOAT (3) is outside what the stdlib reader accepts
    import struct

    data = np.zeros(16, "<f4").tobytes()
    fmt = struct.pack("<HHIIHH", 3, 1, SR, SR * 4, 4, 32)
    blob = b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(data)) + b"WAVE"
    blob += b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    (tmp_path / "f.wav").write_bytes(blob)
    with pytest.raises(dsp.UnsupportedCodecError):
        dsp.load_wav(tmp_path / "f.wav")


def test_cache_roundtrip(tmp_path, rng):
    plane = rng.standard_normal((128, 128)).astype(np.float32)
    path = dsp.write_mel_cache(tmp_path, "utt1", plane)
    assert path.stat().st_size == 16 + 128 * 128 * 4
    np.testing.assert_array_equal(dsp.read_mel_cache(path), plane)


def test_cache_rejects_bad_magic(tmp_path):
    (tmp_path / "bad.mel").write_bytes(b"XXXX" + bytes(60))
    with pytest.raises(ValueError, match="magic"):
        dsp.read_mel_cache(tmp_path / "bad.mel")

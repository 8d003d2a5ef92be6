"""Waveform to log-mel image front end.

Pipeline: ``load_wav`` -> ``trim_silence`` -> ``mel_spectrogram`` ->
``to_mel_image``. The resulting 3x128x128 cube is what the network consumes;
``write_mel_cache``/``read_mel_cache`` persist the single 128x128 plane.
"""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .tensor import bilinear_resize

SAMPLE_RATE = 16000
WIN_LENGTH = 256  # 16 ms at 16 kHz
HOP_LENGTH = 64  # 4 ms
N_FFT = 256
N_MELS = 128
LOG_FLOOR = 1e-6
IMAGE_SIZE = 128

CACHE_MAGIC = b"DSSC"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sHHH6x")


class AudioError(Exception):
    code = "audio"


class NotWavError(AudioError):
    code = "not_wav"


class UnsupportedCodecError(AudioError):
    code = "unsupported_codec"


class EmptyAudioError(AudioError):
    code = "empty_audio"


class ClipTooShortError(ValueError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source_id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("an AudioClip needs a non-empty mono sample array")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelImage:
    """Three identical log-mel planes, ``planes.shape == (3, 128, 128)``."""

    planes: np.ndarray
    label: int | None = None

    def __post_init__(self):
        if self.planes.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"MelImage must be 3x{IMAGE_SIZE}x{IMAGE_SIZE}, got {self.planes.shape}")

    @classmethod
    def from_plane(cls, plane: np.ndarray, label: int | None = None) -> "MelImage":
        return cls(np.repeat(plane[None], 3, axis=0), label)


# --------------------------------------------------------------------------
# WAV I/O


def load_wav(path) -> AudioClip:
    """Read a PCM WAV file, averaging channels to mono and scaling to [-1, 1]."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            n_channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedCodecError(f"{path}: {msg}") from exc
        raise NotWavError(f"{path}: {msg}") from exc
    except EOFError as exc:
        raise NotWavError(f"{path}: truncated header") from exc

    if width == 1:
        data = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 3:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        data = v.astype(np.float64) / float(1 << 23)
    elif width == 4:
        data = np.frombuffer(raw, dtype="<i4").astype(np.float64) / float(1 << 31)
    else:
        raise UnsupportedCodecError(f"{path}: unsupported sample width {width}")

    if data.size == 0:
        raise EmptyAudioError(f"{path}: no audio frames")
    data = data.reshape(-1, n_channels).mean(axis=1)
    return AudioClip(data, rate, path.stem)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write mono (1-d) or multichannel (frames x channels) 16-bit PCM."""
    samples = np.asarray(samples, dtype=np.float64)
    n_channels = 1 if samples.ndim == 1 else samples.shape[1]
    pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(n_channels)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------
# silence trimming


def _frame_rms(x: np.ndarray, frame: int) -> np.ndarray:
    n_frames = -(-x.size // frame)
    padded = np.zeros(n_frames * frame)
    padded[: x.size] = x
    sq = padded.reshape(n_frames, frame) ** 2
    counts = np.full(n_frames, frame, dtype=np.float64)
    counts[-1] = x.size - (n_frames - 1) * frame
    return np.sqrt(sq.sum(axis=1) / counts)


def trim_silence(clip: AudioClip, threshold_db: float = -40.0, frame_ms: float = 10.0) -> AudioClip:
    """Drop leading and trailing frames more than ``|threshold_db|`` below the
    loudest frame. Interior frames are never touched. An all-quiet clip
    shrinks to its loudest frame."""
    frame = max(1, int(round(clip.sample_rate * frame_ms / 1000.0)))
    x = clip.samples
    rms = _frame_rms(x, frame)
    peak = rms.max()
    if peak <= 0.0:
        keep = np.array([int(np.argmax(rms))])
    else:
        with np.errstate(divide="ignore"):
            level = 20.0 * np.log10(rms / peak)
        keep = np.flatnonzero(level >= -abs(threshold_db))
    first, last = keep[0], keep[-1]
    start, stop = first * frame, min(x.size, (last + 1) * frame)
    if start == 0 and stop == x.size:
        return clip
    return AudioClip(x[start:stop].copy(), clip.sample_rate, clip.source_id)


# --------------------------------------------------------------------------
# mel spectrogram


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sample_rate: int = SAMPLE_RATE,
    f_min: float = 0.0,
    f_max: float | None = None,
) -> np.ndarray:
    """HTK-scale triangular filters, ``(n_mels, n_fft // 2 + 1)``.

    Each weight is the mean of the triangle over the FFT bin's frequency
    interval rather than its value at the bin centre. With 128 bands on a
    256-point FFT the low filters are narrower than one bin, and point
    sampling would leave them empty.
    """
    f_max = sample_rate / 2.0 if f_max is None else f_max
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    n_bins = n_fft // 2 + 1
    df = sample_rate / n_fft
    lo_b = np.clip(np.arange(n_bins) * df - df / 2, 0.0, sample_rate / 2.0)
    hi_b = np.clip(np.arange(n_bins) * df + df / 2, 0.0, sample_rate / 2.0)

    def tri_integral(f, left, centre, right):
        # antiderivative of the unit-peak triangle, zero at `left`
        f = np.clip(f, left, right)
        rise = np.where(f <= centre, (f - left) ** 2 / (2 * (centre - left)), (centre - left) / 2)
        fall = np.where(
            f > centre,
            (right - centre) / 2 - (right - f) ** 2 / (2 * (right - centre)),
            0.0,
        )
        return rise + fall

    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        left, centre, right = edges[m], edges[m + 1], edges[m + 2]
        area = tri_integral(hi_b, left, centre, right) - tri_integral(lo_b, left, centre, right)
        width = hi_b - lo_b
        fb[m] = np.divide(area, width, out=np.zeros(n_bins), where=width > 0)
    return fb


def n_frames_for(n_samples: int, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> int:
    return (n_samples - win) // hop + 1


def mel_spectrogram(clip: AudioClip) -> np.ndarray:
    """Log-mel power spectrogram, ``(128, n_frames)``.

    Hann window of 256 samples, hop 64, FFT size 256, no centring;
    ``log(mel_power + 1e-6)``.
    """
    x = clip.samples
    if x.size < WIN_LENGTH:
        raise ClipTooShortError(
            f"clip {clip.source_id!r} has {x.size} samples; at least {WIN_LENGTH} are needed "
            "(zero-pad upstream or drop the utterance)"
        )
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH]
    window = np.hanning(WIN_LENGTH + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(frames * window, n=N_FFT, axis=1)
    power = spec.real**2 + spec.imag**2
    mel = mel_filterbank(N_MELS, N_FFT, clip.sample_rate) @ power.T
    return np.log(mel + LOG_FLOOR)


def to_mel_image(mel: np.ndarray, label: int | None = None) -> MelImage:
    """Resize a ``(n_mels, n_frames)`` matrix to 128x128 and stack it three times."""
    if mel.ndim != 2 or min(mel.shape) < 1:
        raise ValueError(f"expected a non-empty 2-d mel matrix, got {mel.shape}")
    plane = bilinear_resize(mel, IMAGE_SIZE, IMAGE_SIZE)
    return MelImage.from_plane(plane, label)


def waveform_to_image(clip: AudioClip, label: int | None = None, trim: bool = True) -> MelImage:
    if trim:
        clip = trim_silence(clip)
    if clip.samples.size < WIN_LENGTH:
        # trimming can leave less than a window; pad the tail with zeros
        padded = np.zeros(WIN_LENGTH)
        padded[: clip.samples.size] = clip.samples
        clip = AudioClip(padded, clip.sample_rate, clip.source_id)
    return to_mel_image(mel_spectrogram(clip), label)


# --------------------------------------------------------------------------
# feature cache


def write_mel_cache(cache_dir, source_id: str, plane: np.ndarray) -> Path:
    """Write one 128x128 plane as ``<source_id>.mel`` (float32 LE after a
    16-byte header)."""
    plane = np.asarray(plane)
    if plane.ndim == 3:
        plane = plane[0]
    h, w = plane.shape
    path = Path(cache_dir) / f"{source_id}.mel"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, h, w))
        fh.write(plane.astype("<f4").tobytes())
    return path


def read_mel_cache(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _CACHE_HEADER.size:
        raise ValueError(f"{path}: truncated mel cache file")
    magic, version, h, w = _CACHE_HEADER.unpack_from(blob)
    if magic != CACHE_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    data = np.frombuffer(blob, dtype="<f4", offset=_CACHE_HEADER.size)
    if data.size != h * w:
        raise ValueError(f"{path}: expected {h * w} values, found {data.size}")
    return data.reshape(h, w).astype(np.float32)

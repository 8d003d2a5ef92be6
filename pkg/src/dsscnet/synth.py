"""License-free synthetic corpora with severity-dependent acoustics.

Each utterance is a voiced, vowel-like signal: a glottal pulse train with
cycle-to-cycle period jitter and amplitude shimmer, shaped by a spectral-tilt
filter and two formant resonators, broken into syllables that are separated
by pauses with a severity-dependent probability. Higher severity means more
jitter, steeper tilt and more pauses. Each speaker perturbs the severity
parameters by a bounded offset so unseen speakers stay classifiable, and
carries its own vocal-tract length (a common scale on all formants), which
makes a speaker's utterances consistent with each other but not with other
speakers.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .dsp import SAMPLE_RATE, write_wav
from .harness import SEVERITY_NAMES, CorpusManifest, Speaker

__all__ = ["SynthSpec", "generate", "synth_utterance", "holdout_difficulty", "corpus_hash"]

_DEFAULTS = {
    "base_pitch_hz": (200.0, 150.0, 110.0, 80.0),
    "jitter": (0.002, 0.04, 0.09, 0.15),
    "tilt_db_per_octave": (-3.0, -9.0, -15.0, -21.0),
    "pause_prob": (0.0, 0.25, 0.50, 0.70),
}

# (F1, F2) pairs of a few open and front/back vowels
_VOWELS = ((730.0, 1090.0), (530.0, 1840.0), (270.0, 2290.0), (570.0, 840.0), (300.0, 870.0), (660.0, 1720.0))


@dataclass(frozen=True)
class SynthSpec:
    n_severities: int = 4
    speakers_per_severity: int = 3
    utterances_per_speaker: int = 50
    seed: int = 0
    corpus_id: str = "synth"
    base_pitch_hz: tuple[float, ...] = _DEFAULTS["base_pitch_hz"]
    jitter: tuple[float, ...] = _DEFAULTS["jitter"]
    tilt_db_per_octave: tuple[float, ...] = _DEFAULTS["tilt_db_per_octave"]
    pause_prob: tuple[float, ...] = _DEFAULTS["pause_prob"]
    speaker_spread: float = 0.5
    speaker_timbre: float = 0.1
    pitch_wobble: float = 0.02
    noise_level: float = 0.02
    min_duration: float = 0.5
    max_duration: float = 2.0
    version: int = 1

    def __post_init__(self):
        n = self.n_severities
        for name in _DEFAULTS:
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) > n:
                vals = vals[:n]
            object.__setattr__(self, name, vals)

    def validate(self) -> list[str]:
        errors = []
        n = self.n_severities
        if n not in (3, 4):
            errors.append(f"n_severities must be 3 or 4, got {n}")
        if self.speakers_per_severity < 1:
            errors.append("speakers_per_severity must be >= 1")
        if self.utterances_per_speaker < 1:
            errors.append("utterances_per_speaker must be >= 1")
        for name in _DEFAULTS:
            if len(getattr(self, name)) != n:
                errors.append(f"{name} needs {n} values, got {len(getattr(self, name))}")
        if len(self.jitter) == n and np.any(np.diff(self.jitter) <= 0):
            errors.append(f"jitter must increase strictly with severity, got {list(self.jitter)}")
        if len(self.pause_prob) == n and np.any(np.diff(self.pause_prob) < 0):
            errors.append(f"pause_prob must not decrease with severity, got {list(self.pause_prob)}")
        if any(j < 0 for j in self.jitter) or any(not 0 <= p < 1 for p in self.pause_prob):
            errors.append("jitter must be >= 0 and pause_prob in [0, 1)")
        if not 0 <= self.speaker_timbre < 0.5 or not 0 <= self.pitch_wobble < 0.5:
            errors.append("speaker_timbre and pitch_wobble must lie in [0, 0.5)")
        if not 0 <= self.speaker_spread <= 0.5:
            errors.append(f"speaker_spread must lie in [0, 0.5], got {self.speaker_spread}")
        if not 0 < self.min_duration <= self.max_duration:
            errors.append("durations must satisfy 0 < min_duration <= max_duration")
        return errors

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in _DEFAULTS:
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        for k in _DEFAULTS:
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _gap(values) -> float:
    diffs = np.abs(np.diff(values))
    return float(diffs.min()) if diffs.size else 0.0


def speaker_params(spec: SynthSpec, severity: int, speaker: int) -> dict[str, float]:
    """Severity parameters plus this speaker's offset (at most
    ``speaker_spread`` times the smallest gap between adjacent severities)."""
    rng = np.random.default_rng([spec.seed, 7919, severity, speaker])
    out = {}
    for name in _DEFAULTS:
        values = getattr(spec, name)
        offset = rng.uniform(-1.0, 1.0) * spec.speaker_spread * _gap(values)
        out[name] = values[severity] + offset
    out["jitter"] = max(out["jitter"], 0.0)
    out["pause_prob"] = min(max(out["pause_prob"], 0.0), 0.95)
    # vocal-tract length: scales every formant of this speaker alike
    out["formant_scale"] = 1.0 + rng.uniform(-1.0, 1.0) * spec.speaker_timbre
    return out


def _resonator(x: np.ndarray, freq: float, bw: float, sr: int) -> np.ndarray:
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    b = [1.0 - r]
    return lfilter(b, a, x)


def synth_utterance(params: dict[str, float], rng: np.random.Generator, spec: SynthSpec,
                    sr: int = SAMPLE_RATE) -> np.ndarray:
    duration = rng.uniform(spec.min_duration, spec.max_duration)
    n_total = int(round(duration * sr))
    f0 = params["base_pitch_hz"] * (1.0 + rng.uniform(-1.0, 1.0) * spec.pitch_wobble)
    jitter = params["jitter"]

    # syllables of 120-300 ms separated by optional pauses
    segments = []
    used = 0
    while used < n_total:
        seg = int(rng.uniform(0.12, 0.30) * sr)
        segments.append(("voice", seg))
        used += seg
        if used < n_total and rng.random() < params["pause_prob"]:
            gap = int(rng.uniform(0.05, 0.20) * sr)
            segments.append(("pause", gap))
            used += gap

    out = np.zeros(used)
    pos = 0
    for kind, length in segments:
        if kind == "pause":
            pos += length
            continue
        # glottal pulses with per-cycle jitter and shimmer
        src = np.zeros(length)
        t = 0.0
        period = sr / f0
        while t < length:
            amp = 1.0 + 2.0 * jitter * rng.standard_normal()
            src[int(t)] += max(amp, 0.0)
            t += period * max(1.0 + jitter * rng.standard_normal(), 0.3)
        # one-pole low-pass approximating the spectral tilt (steeper = duller)
        alpha = 1.0 - 10.0 ** (params["tilt_db_per_octave"] / 40.0)
        alpha = min(max(alpha, 0.0), 0.95)
        src = lfilter([1.0 - alpha], [1.0, -alpha], src)
        f1, f2 = _VOWELS[rng.integers(len(_VOWELS))]
        f1 *= params.get("formant_scale", 1.0) * rng.uniform(0.97, 1.03)
        f2 *= params.get("formant_scale", 1.0) * rng.uniform(0.97, 1.03)
        voiced = _resonator(src, f1, 80.0, sr) + 0.5 * _resonator(src, f2, 120.0, sr)
        env = np.sin(np.linspace(0.0, np.pi, length)) ** 0.5
        out[pos : pos + length] = voiced * env
        pos += length

    out += spec.noise_level * np.std(out) * rng.standard_normal(out.size)
    # level by RMS, not peak: a jittery source has outlier peaks that would
    # otherwise push the whole severe utterance down in level
    rms = np.sqrt(np.mean(out**2))
    if rms > 0:
        out *= rng.uniform(0.08, 0.15) / rms
        peak = np.max(np.abs(out))
        if peak > 0.95:
            out *= 0.95 / peak
    return out


def generate(spec: SynthSpec, out_dir) -> tuple[CorpusManifest, Path]:
    """Write WAVs under ``out_dir/wav`` and ``out_dir/<corpus_id>.manifest``."""
    errors = spec.validate()
    if errors:
        raise ValueError("invalid SynthSpec: " + "; ".join(errors))
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    speakers = []
    for sev in range(spec.n_severities):
        for k in range(spec.speakers_per_severity):
            spk_id = f"{spec.corpus_id}_{SEVERITY_NAMES[sev]}{k + 1}"
            params = speaker_params(spec, sev, k)
            utts = []
            for u in range(spec.utterances_per_speaker):
                rng = np.random.default_rng([spec.seed, sev, k, u])
                samples = synth_utterance(params, rng, spec)
                name = f"{spk_id}_u{u:03d}"
                write_wav(wav_dir / f"{name}.wav", samples)
                utts.append(f"wav/{name}.wav")
            speakers.append(Speaker(spk_id, sev, utts, len(utts)))
    manifest = CorpusManifest(spec.corpus_id, speakers, n_classes=spec.n_severities)
    path = manifest.save(out_dir / f"{spec.corpus_id}.manifest")
    (out_dir / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    return manifest, path


def corpus_hash(manifest: CorpusManifest, root) -> str:
    """SHA-256 over the manifest JSON and every referenced file's bytes."""
    h = hashlib.sha256(manifest.to_json().encode("utf-8"))
    for spk in manifest.speakers:
        for rel in spk.utterances:
            h.update((Path(root) / rel).read_bytes())
    return h.hexdigest()


@dataclass
class DifficultyReport:
    accuracy: float
    n_train: int
    n_test: int
    chance: float
    ok: bool
    details: dict = field(default_factory=dict)


def holdout_difficulty(manifest: CorpusManifest, cache_dir, low: float = 0.40, high: float = 0.95) -> DifficultyReport:
    """Linear probe on per-band means of the mel image, trained on all but one
    speaker per severity and scored on the held-out speakers. A corpus whose
    probe accuracy is outside ``(low, high)`` is either too hard or trivially
    separable for the acceptance runs."""
    from sklearn.linear_model import LogisticRegression

    from .harness import generate_osps, load_dataset

    plan = generate_osps(manifest)[0]
    train = load_dataset(manifest, plan.train, cache_dir)
    test = load_dataset(manifest, plan.test, cache_dir)
    xtr = train.planes.mean(axis=2)
    xte = test.planes.mean(axis=2)
    mu, sd = xtr.mean(axis=0), xtr.std(axis=0) + 1e-9
    clf = LogisticRegression(max_iter=2000)
    clf.fit((xtr - mu) / sd, train.labels)
    acc = float((clf.predict((xte - mu) / sd) == test.labels).mean())
    return DifficultyReport(acc, len(train), len(test), 1.0 / manifest.n_classes, low < acc < high,
                            {"plan": plan.plan_id})

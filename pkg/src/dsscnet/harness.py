"""Corpus manifests, speaker-independent split plans and evaluation reports.

Utterances inherit the severity of their speaker. Two protocols are offered:
one-speaker-per-severity (``osps``: every combination of one held-out speaker
from each severity) and leave-one-speaker-out (``loso``).
"""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .dsp import load_wav, read_mel_cache, waveform_to_image, write_mel_cache
from .tensor import bilinear_resize

__all__ = [
    "SEVERITY_NAMES",
    "Speaker",
    "CorpusManifest",
    "ManifestError",
    "MissingCacheError",
    "SplitPlan",
    "EvalReport",
    "bundled_manifest",
    "generate_osps",
    "generate_loso",
    "generate_plans",
    "preprocess_manifest",
    "load_dataset",
    "evaluate_predictions",
    "evaluate",
    "aggregate",
    "export_embeddings",
    "write_reports",
]

SEVERITY_NAMES = ("Low", "Medium", "High", "VeryHigh")
MANIFEST_FORMAT = "dssc-manifest"
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    pass


class MissingCacheError(FileNotFoundError):
    def __init__(self, missing: list[str], cache_dir):
        self.missing = list(missing)
        shown = ", ".join(self.missing[:10]) + (" ..." if len(self.missing) > 10 else "")
        super().__init__(
            f"{len(self.missing)} utterance(s) have no cached features in {cache_dir}: {shown}; "
            "run `dssc preprocess` first"
        )


# --------------------------------------------------------------------------
# manifests


@dataclass
class Speaker:
    speaker_id: str
    severity: int
    utterances: list[str] = field(default_factory=list)
    n_utterances: int | None = None
    pool: bool = True

    def __post_init__(self):
        if self.n_utterances is None:
            self.n_utterances = len(self.utterances)

    def utterance_ids(self) -> list[str]:
        return [utterance_id(self.speaker_id, u) for u in self.utterances]


def utterance_id(speaker_id: str, rel_path: str) -> str:
    stem = Path(rel_path).with_suffix("").as_posix().replace("/", "_")
    if stem.startswith(speaker_id + "_"):
        return stem
    return f"{speaker_id}_{stem}"


@dataclass
class CorpusManifest:
    corpus_id: str
    speakers: list[Speaker]
    n_classes: int | None = None
    root: Path | None = None

    def __post_init__(self):
        if self.n_classes is None:
            self.n_classes = max(s.severity for s in self.speakers) + 1 if self.speakers else 0
        errors = self.validate()
        if errors:
            raise ManifestError(f"invalid manifest {self.corpus_id!r}: " + "; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        ids = [s.speaker_id for s in self.speakers]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            errors.append(f"duplicate speaker ids {dupes}")
        if self.n_classes < 2:
            errors.append(f"n_classes must be at least 2, got {self.n_classes}")
        seen: dict[str, str] = {}
        for s in self.speakers:
            if not 0 <= s.severity < self.n_classes:
                errors.append(f"speaker {s.speaker_id}: severity {s.severity} outside 0..{self.n_classes - 1}")
            if s.utterances and len(s.utterances) != s.n_utterances:
                errors.append(
                    f"speaker {s.speaker_id}: declares {s.n_utterances} utterances but lists {len(s.utterances)}"
                )
            for u in s.utterances:
                if u in seen:
                    errors.append(f"utterance {u} listed under both {seen[u]} and {s.speaker_id}")
                seen[u] = s.speaker_id
        return errors

    @property
    def pool(self) -> list[Speaker]:
        return [s for s in self.speakers if s.pool]

    def speaker(self, speaker_id: str) -> Speaker:
        for s in self.speakers:
            if s.speaker_id == speaker_id:
                return s
        raise KeyError(f"speaker {speaker_id!r} not in manifest {self.corpus_id!r}")

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "corpus_id": self.corpus_id,
            "severity_levels": list(SEVERITY_NAMES[: self.n_classes]),
            "speakers": [
                {
                    "id": s.speaker_id,
                    "severity": SEVERITY_NAMES[s.severity],
                    "n_utterances": s.n_utterances,
                    "pool": s.pool,
                    "utterances": list(s.utterances),
                }
                for s in self.speakers
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        self.root = path.parent
        return path

    @classmethod
    def from_dict(cls, d: dict, root=None) -> "CorpusManifest":
        if d.get("format") != MANIFEST_FORMAT:
            raise ManifestError(f"not a {MANIFEST_FORMAT} file (format={d.get('format')!r})")
        if d.get("version") != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {d.get('version')!r}")
        levels = d.get("severity_levels", list(SEVERITY_NAMES))
        speakers = []
        for s in d["speakers"]:
            sev = s["severity"]
            if isinstance(sev, str):
                if sev not in SEVERITY_NAMES:
                    raise ManifestError(f"speaker {s['id']}: unknown severity {sev!r}")
                sev = SEVERITY_NAMES.index(sev)
            speakers.append(Speaker(s["id"], int(sev), list(s.get("utterances", [])), s.get("n_utterances"),
                                    bool(s.get("pool", True))))
        return cls(d["corpus_id"], speakers, n_classes=len(levels), root=Path(root) if root else None)

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: {exc}") from exc
        return cls.from_dict(d, root=path.parent)


def bundled_manifest(name: str) -> CorpusManifest:
    """``"torgo"`` or ``"uaspeech"``: speaker/severity/count structure only;
    utterance lists are empty until filled in by a licensee."""
    text = resources.files("dsscnet").joinpath("data").joinpath(f"{name}.manifest").read_text()
    return CorpusManifest.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# split plans


@dataclass(frozen=True)
class SplitPlan:
    plan_id: str
    protocol: str
    train: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        overlap = set(self.train) & set(self.test)
        if overlap:
            raise ValueError(f"plan {self.plan_id}: speakers on both sides {sorted(overlap)}")

    def to_dict(self) -> dict:
        return {"plan_id": self.plan_id, "protocol": self.protocol, "train": list(self.train), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(d["plan_id"], d["protocol"], tuple(d["train"]), tuple(d["test"]))


def generate_osps(manifest: CorpusManifest) -> list[SplitPlan]:
    """One held-out speaker per severity, every combination, from the pool."""
    pool = manifest.pool
    by_sev: dict[int, list[str]] = {}
    for s in pool:
        by_sev.setdefault(s.severity, []).append(s.speaker_id)
    if not by_sev:
        raise ManifestError(f"manifest {manifest.corpus_id!r} has no pool speakers")
    for sev, ids in sorted(by_sev.items()):
        if len(ids) < 2:
            raise ManifestError(
                f"severity {SEVERITY_NAMES[sev]} has a single speaker ({ids[0]}); "
                "it cannot appear on both the train and test side"
            )
    groups = [sorted(by_sev[k]) for k in sorted(by_sev)]
    combos = sorted(itertools.product(*groups))
    everyone = [s.speaker_id for s in pool]
    plans = []
    for i, test in enumerate(combos):
        train = tuple(x for x in everyone if x not in test)
        plans.append(SplitPlan(f"osps-{i + 1:03d}", "osps", train, tuple(test)))
    return plans


def generate_loso(manifest: CorpusManifest) -> list[SplitPlan]:
    pool = [s.speaker_id for s in manifest.pool]
    if len(pool) < 2:
        raise ManifestError(f"leave-one-speaker-out needs at least 2 speakers, {manifest.corpus_id!r} has {len(pool)}")
    plans = []
    for i, held in enumerate(sorted(pool)):
        train = tuple(x for x in pool if x != held)
        plans.append(SplitPlan(f"loso-{i + 1:03d}", "loso", train, (held,)))
    return plans


def generate_plans(manifest: CorpusManifest, protocol: str) -> list[SplitPlan]:
    if protocol == "osps":
        return generate_osps(manifest)
    if protocol == "loso":
        return generate_loso(manifest)
    if protocol == "full":
        # every speaker trains; used for pretraining on a source corpus
        return [SplitPlan("full-001", "full", tuple(s.speaker_id for s in manifest.speakers), ())]
    raise ValueError(f"unknown protocol {protocol!r}; choose osps, loso or full")


# --------------------------------------------------------------------------
# features


def preprocess_manifest(manifest: CorpusManifest, cache_dir, root=None, overwrite: bool = False) -> int:
    """Compute and cache the log-mel plane of every listed utterance.
    Returns the number of files written."""
    root = Path(root) if root is not None else manifest.root
    if root is None:
        raise ValueError("manifest has no root directory; pass root=")
    cache_dir = Path(cache_dir)
    written = 0
    for s in manifest.speakers:
        for rel, uid in zip(s.utterances, s.utterance_ids()):
            target = cache_dir / f"{uid}.mel"
            if target.exists() and not overwrite:
                continue
            image = waveform_to_image(load_wav(root / rel))
            write_mel_cache(cache_dir, uid, image.planes[0])
            written += 1
    return written


def load_dataset(manifest: CorpusManifest, speakers, cache_dir, input_size: int | None = None):
    """Cached planes for every utterance of ``speakers``, resized to
    ``input_size`` if given."""
    from .training import Dataset

    cache_dir = Path(cache_dir)
    planes, labels, ids, spk = [], [], [], []
    missing = []
    for sid in speakers:
        s = manifest.speaker(sid)
        for uid in s.utterance_ids():
            path = cache_dir / f"{uid}.mel"
            if not path.exists():
                missing.append(uid)
                continue
            plane = read_mel_cache(path)
            if input_size is not None and plane.shape != (input_size, input_size):
                plane = bilinear_resize(plane.astype(np.float64), input_size, input_size).astype(np.float32)
            planes.append(plane)
            labels.append(s.severity)
            ids.append(uid)
            spk.append(sid)
    if missing:
        raise MissingCacheError(missing, cache_dir)
    arr = np.stack(planes) if planes else np.zeros((0, input_size or 0, input_size or 0), np.float32)
    return Dataset(arr, np.asarray(labels, dtype=np.int64), ids, spk)


# --------------------------------------------------------------------------
# metrics


@dataclass
class EvalReport:
    plan_id: str
    n_classes: int
    accuracy: float
    confusion: np.ndarray  # row-normalized; rows without support are zero
    counts: np.ndarray | None  # raw confusion counts (None for aggregates)
    precision: float
    recall: float
    f1: float
    n: int
    plans: list[str] = field(default_factory=list)

    def row(self) -> dict:
        return {
            "plan_id": self.plan_id,
            "n": self.n,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    sums = m.sum(axis=1, keepdims=True)
    return np.divide(m, sums, out=np.zeros_like(m, dtype=np.float64), where=sums > 0)


def evaluate_predictions(y_true, y_pred, n_classes: int, plan_id: str = "") -> EvalReport:
    """Metrics from labels alone. Precision, recall and F1 are macro averages
    over classes with test support; a class never predicted has precision 0."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError("y_true and y_pred must be equal-length vectors")
    if y_true.size == 0:
        raise ValueError("cannot evaluate an empty test set")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    support = counts.sum(axis=1)
    predicted = counts.sum(axis=0)
    tp = np.diag(counts).astype(np.float64)
    prec = np.divide(tp, predicted, out=np.zeros(n_classes), where=predicted > 0)
    rec = np.divide(tp, support, out=np.zeros(n_classes), where=support > 0)
    denom = prec + rec
    f1 = np.divide(2 * prec * rec, denom, out=np.zeros(n_classes), where=denom > 0)
    has = support > 0
    return EvalReport(
        plan_id,
        n_classes,
        float(tp.sum() / y_true.size),
        _normalize_rows(counts.astype(np.float64)),
        counts,
        float(prec[has].mean()),
        float(rec[has].mean()),
        float(f1[has].mean()),
        int(y_true.size),
        [plan_id],
    )


def predict_dataset(model, dataset, batch_size: int = 32):
    """Eval-mode argmax predictions and penultimate embeddings."""
    preds, embs = [], []
    for i in range(0, len(dataset), batch_size):
        idx = np.arange(i, min(i + batch_size, len(dataset)))
        out = model.forward(dataset.batch(idx, model.config.in_channels, model.dtype))
        preds.append(np.argmax(out.logits, axis=1))  # first maximum wins: lower class index
        embs.append(out.embedding)
    if not preds:
        return np.zeros(0, dtype=np.int64), np.zeros((0, model.config.embedding_dim))
    return np.concatenate(preds), np.concatenate(embs)


def evaluate(model, plan: SplitPlan, manifest: CorpusManifest, cache_dir, batch_size: int = 32) -> EvalReport:
    data = load_dataset(manifest, plan.test, cache_dir, model.config.input_size)
    preds, _ = predict_dataset(model, data, batch_size)
    return evaluate_predictions(data.labels, preds, model.config.n_classes, plan.plan_id)


def aggregate(reports: list[EvalReport], plan_id: str = "aggregate") -> EvalReport:
    """Unweighted mean over plans. Each confusion row is averaged over the
    plans in which that class had support, then re-normalized."""
    if not reports:
        raise ValueError("aggregate needs at least one report")
    n_classes = {r.n_classes for r in reports}
    if len(n_classes) != 1:
        raise ValueError(f"reports mix class counts {sorted(n_classes)}")
    c = n_classes.pop()
    total = np.zeros((c, c))
    hits = np.zeros(c)
    for r in reports:
        has = r.confusion.sum(axis=1) > 0
        total[has] += r.confusion[has]
        hits += has
    mean = np.divide(total, hits[:, None], out=np.zeros_like(total), where=hits[:, None] > 0)
    return EvalReport(
        plan_id,
        c,
        float(np.mean([r.accuracy for r in reports])),
        _normalize_rows(mean),
        None,
        float(np.mean([r.precision for r in reports])),
        float(np.mean([r.recall for r in reports])),
        float(np.mean([r.f1 for r in reports])),
        int(sum(r.n for r in reports)),
        [p for r in reports for p in r.plans],
    )


# --------------------------------------------------------------------------
# exports


def export_embeddings(model, plan: SplitPlan, manifest: CorpusManifest, cache_dir, path) -> Path:
    """CSV rows ``utterance_id, true_label, e1..e_d`` for every test utterance."""
    data = load_dataset(manifest, plan.test, cache_dir, model.config.input_size)
    _, emb = predict_dataset(model, data)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = model.config.embedding_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utterance_id", "true_label"] + [f"e{k + 1}" for k in range(d)])
        for uid, label, e in zip(data.ids, data.labels, emb):
            w.writerow([uid, int(label)] + [repr(float(v)) for v in e])
    return path


def write_reports(reports: list[EvalReport], out_dir) -> dict[str, Path]:
    """Per-plan CSV, aggregate CSV and the aggregate confusion matrix."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = ["plan_id", "n", "accuracy", "precision", "recall", "f1"]
    paths = {}
    with open(out_dir / "plans.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
    paths["plans"] = out_dir / "plans.csv"
    agg = aggregate(reports)
    with open(out_dir / "aggregate.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerow(agg.row())
    paths["aggregate"] = out_dir / "aggregate.csv"
    np.savetxt(out_dir / "confusion.csv", agg.confusion, delimiter=",", fmt="%.10f")
    paths["confusion"] = out_dir / "confusion.csv"
    return paths

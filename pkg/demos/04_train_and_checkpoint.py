"""Train a reduced-width C1 on a small synthetic corpus, save and reload it.

Widths are divided by 4 and the input is 64x64 so this finishes in about a
minute on one core; drop ``desk_clone`` for the full-size network.

Run: python3 demos/04_train_and_checkpoint.py
"""
import tempfile
from pathlib import Path

import numpy as np

from dsscnet.harness import evaluate, generate_osps, load_dataset, preprocess_manifest
from dsscnet.model import build, desk_clone, preset
from dsscnet.synth import SynthSpec, generate
from dsscnet.training import TrainConfig, load_checkpoint, save_checkpoint, train

work = Path(tempfile.mkdtemp(prefix="dssc-demo-"))
manifest, _ = generate(SynthSpec(speakers_per_severity=3, utterances_per_speaker=20, seed=4), work / "corpus")
print("wrote", preprocess_manifest(manifest, work / "cache"), "cached mel images under", work)

plan = generate_osps(manifest)[0]
print("plan", plan.plan_id, "holds out", plan.test)
arch = desk_clone(preset("C1"), width_divisor=4, input_size=64)
data = load_dataset(manifest, plan.train, work / "cache", arch.input_size)
print("training on", len(data), "utterances, class counts", data.class_counts(4))

model, log = train(build(arch, seed=0), data, TrainConfig(seed=0, epochs=6))
for row in log:
    print(f"  epoch {row['epoch']:2d} loss {row['loss']:.3f} acc {row['accuracy']:.3f}")

report = evaluate(model, plan, manifest, work / "cache")
print(f"held-out speakers: accuracy {report.accuracy:.3f}, macro F1 {report.f1:.3f}")
print("confusion (rows = true severity):\n", report.counts)

path = save_checkpoint(work / "c1.dsck", model, provenance={"plan": plan.plan_id})
restored = load_checkpoint(path).to_model()
x = data.batch(np.arange(4), 3, model.dtype)
print("checkpoint", path.name, f"{path.stat().st_size:,d} bytes; reload gives identical logits:",
      np.array_equal(model.forward(x).logits, restored.forward(x).logits))

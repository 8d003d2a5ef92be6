"""Pretrain on a 4-class corpus, fine-tune on a disjoint 3-class corpus.

The backbone, SE and residual weights are carried over; only the
classification head is re-initialized for the new class count.

Run: python3 demos/06_transfer.py
"""
import tempfile
from dataclasses import replace
from pathlib import Path

from dsscnet.harness import evaluate, generate_osps, load_dataset, preprocess_manifest
from dsscnet.model import build, desk_clone, preset
from dsscnet.synth import SynthSpec, generate
from dsscnet.training import TrainConfig, finetune, load_checkpoint, save_checkpoint, train

work = Path(tempfile.mkdtemp(prefix="dssc-transfer-"))
src, _ = generate(SynthSpec(speakers_per_severity=3, utterances_per_speaker=25, seed=11, corpus_id="source"),
                  work / "a")
tgt, _ = generate(SynthSpec(n_severities=3, speakers_per_severity=2, utterances_per_speaker=12, seed=12,
                            corpus_id="target"), work / "b")
for m in (src, tgt):
    preprocess_manifest(m, work / "cache")

arch = desk_clone(preset("C1"), width_divisor=8, input_size=32)
source_data = load_dataset(src, [s.speaker_id for s in src.speakers], work / "cache", arch.input_size)
pretrained, _ = train(build(arch, seed=0), source_data, TrainConfig(seed=0, epochs=5))
ckpt = load_checkpoint(save_checkpoint(work / "source.dsck", pretrained, provenance={"corpus": "source"}))

plan = generate_osps(tgt)[0]
target_data = load_dataset(tgt, plan.train, work / "cache", arch.input_size)
cfg = TrainConfig(seed=1, epochs=5)
tuned, _ = finetune(ckpt, target_data, cfg, n_classes=3)
scratch, _ = train(build(replace(arch, n_classes=3), seed=1), target_data, cfg)
print("head shape after fine-tuning:", tuned.params["head.weight"].shape)
print(f"fine-tuned accuracy   {evaluate(tuned, plan, tgt, work / 'cache').accuracy:.3f}")
print(f"from-scratch accuracy {evaluate(scratch, plan, tgt, work / 'cache').accuracy:.3f}")

"""Speaker-independent split plans and metric aggregation.

Run: python3 demos/05_split_protocols.py
"""
import numpy as np

from dsscnet.harness import aggregate, bundled_manifest, evaluate_predictions, generate_loso, generate_osps

for name in ("torgo", "uaspeech"):
    m = bundled_manifest(name)
    osps, loso = generate_osps(m), generate_loso(m)
    print(f"{name}: {len(m.speakers)} speakers, {m.n_classes} classes, "
          f"{len(osps)} one-speaker-per-severity plans, {len(loso)} leave-one-speaker-out plans")
    print("   first plan", osps[0].plan_id, "test", osps[0].test)

# per-plan metrics from predictions, then the cross-plan summary
rng = np.random.default_rng(0)
reports = []
for i in range(3):
    y = rng.integers(0, 3, 40)
    pred = np.where(rng.random(40) < 0.7, y, rng.integers(0, 3, 40))
    reports.append(evaluate_predictions(y, pred, 3, plan_id=f"demo-{i + 1}"))
for r in reports + [aggregate(reports)]:
    print(r.row())

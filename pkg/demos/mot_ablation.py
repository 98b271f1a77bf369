"""Train the low-level variant with and without transport fusion, three seeds each.

In this variant the relation depends on a feature that only the lower text
layers carry, so a model without multilevel fusion should sit near chance.

    python demos/mot_ablation.py
"""

from pathlib import Path

from remote_fusion.config import RunConfig
from remote_fusion.synthetic import generate_synthetic
from remote_fusion.train import evaluate, split_records, train

base = RunConfig.load(Path(__file__).with_name("low_level.json"))

gaps = []
for seed in (0, 1, 2):
    acc = {}
    for disable in (False, True):
        cfg = base.replace(seed=seed, disable_mot=disable)
        train_recs, held = split_records(generate_synthetic(cfg, 1000, 100 + seed), cfg.eval_fraction)
        acc[disable] = evaluate(train(cfg, train_recs).model, held).metrics.accuracy
    gaps.append(acc[False] - acc[True])
    print(f"seed {seed}: with fusion {acc[False]:.3f}, without {acc[True]:.3f}")
print(f"mean gap: {100 * sum(gaps) / len(gaps):.1f} points")

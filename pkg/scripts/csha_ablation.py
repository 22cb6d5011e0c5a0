"""Channel / spatial attention on-off grid on synthetic ground scenes.

Usage: python scripts/csha_ablation.py [OUT_DIR] [N] [EPOCHS]
"""

import sys
from dataclasses import replace
from pathlib import Path

from vageo.cli import model_predictor, train_on
from vageo.config import TOY_TRAIN, RunConfig
from vageo.data import split_manifest, synth_generate
from vageo.evaluation import evaluate


def main(out="runs/csha_ablation", n=32, epochs=100):
    out = Path(out)
    data = synth_generate(int(n), 0, "ground", out / "data")
    train, _, test = split_manifest(data, (0.75, 0.0, 0.25), seed=0)
    base = RunConfig(view="ground", train=replace(TOY_TRAIN, epochs=int(epochs)))
    print(f"{'channel':>8} {'spatial':>8} {'acc@0.25':>9} {'acc@0.5':>8} {'train@0.5':>10}")
    for ch in (False, True):
        for sp in (False, True):
            cfg = base.with_overrides(use_channel=ch, use_spatial=sp)
            model, _, _ = train_on(cfg, train.samples)
            te = evaluate(model_predictor(model, cfg), test.samples)
            tr = evaluate(model_predictor(model, cfg), train.samples)
            print(f"{ch!s:>8} {sp!s:>8} {100 * te.acc_at_25:9.2f} {100 * te.acc_at_50:8.2f} {100 * tr.acc_at_50:10.2f}")


if __name__ == "__main__":
    main(*sys.argv[1:])

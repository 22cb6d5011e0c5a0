"""Overfit 8 synthetic scenes with the toy model and report loss and train accuracy."""

import sys
import tempfile
import time

from vageo.cli import model_predictor, train_on
from vageo.config import TOY_TRAIN, RunConfig
from vageo.data import synth_generate
from vageo.evaluation import evaluate


def main(view="drone", seed=0):
    t0 = time.time()
    data = synth_generate(8, seed, view, tempfile.mkdtemp(prefix="vageo_smoke_"))
    cfg = RunConfig(view=view, train=TOY_TRAIN, seed=seed)
    model, _, history = train_on(cfg, data.samples)
    rep = evaluate(model_predictor(model, cfg), data.samples)
    print(f"view={view} steps={len(history)} loss {history[0]:.4f} -> {history[-1]:.4f} "
          f"ratio={history[-1] / history[0]:.4f}")
    print(rep.to_text(), end="")
    print(f"{time.time() - t0:.1f}s")


if __name__ == "__main__":
    main(*sys.argv[1:2])

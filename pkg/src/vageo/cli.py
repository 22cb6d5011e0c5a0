"""``vageo`` command line: synth, train, eval, encode, sweep.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.
Outputs default to ``$VAGEO_OUTPUT_ROOT/<command>`` (``./runs/<command>`` if unset).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw
from PIL.PngImagePlugin import PngInfo

from .boxes import BBox
from .config import TOY_TRAIN, RunConfig
from .data import ManifestError, load_manifest, load_tensors, split_manifest, synth_generate
from .evaluation import (
    EvalReport,
    evaluate,
    oracle_predictor,
    retrieval_report,
    retrieval_scores,
)
from .model import VAGeoNet
from .train import fit, load_checkpoint, save_checkpoint
from .vspe import RING_WEIGHT_PRESETS, ClickPoint, EncodingError, EncodingMap, attach_encoding, encode

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "VAGEO_OUTPUT_ROOT"
SIGMA_GRID = (5.0, 15.0, 25.0, 50.0)

log = logging.getLogger("vageo")


class UsageError(Exception):
    pass


class _JsonLines(logging.Formatter):
    def format(self, record):
        payload = {"ts": round(record.created, 3), "level": record.levelname.lower(), "msg": record.getMessage()}
        payload.update(getattr(record, "fields", {}))
        return json.dumps(payload)


def _event(msg: str, **fields):
    log.info(msg, extra={"fields": fields})


def _setup_logging(verbose: bool):
    if log.handlers:
        return
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(_JsonLines())
    log.addHandler(h)
    log.setLevel(logging.INFO if verbose else logging.WARNING)
    log.propagate = False


def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command


def _png_with_config(img: Image.Image, path: Path, cfg: RunConfig):
    info = PngInfo()
    info.add_text("vageo-config", cfg.to_json())
    img.save(path, pnginfo=info)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# pipeline pieces shared by train, eval and sweep

def build_model(cfg: RunConfig) -> VAGeoNet:
    torch.manual_seed(cfg.seed)
    return VAGeoNet(cfg.model)


def train_on(cfg: RunConfig, samples, on_step=None):
    """Fresh model trained on ``samples``; returns (model, optimizer, loss history)."""
    model = build_model(cfg)
    model.set_anchor(*(float(np.mean([getattr(s.gt_box, k) for s in samples])) for k in ("w", "h")))
    q, r, gts = load_tensors(samples, cfg.ground, cfg.drone, cfg.query_hw, cfg.ref_hw)
    opt, history = fit(model, q, r, gts, cfg.train, seed=cfg.seed, on_step=on_step)
    return model, opt, history


def model_predictor(model: VAGeoNet, cfg: RunConfig, batch_size: int = 16):
    def predict(samples):
        model.eval()
        out = []
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            q, r, _ = load_tensors(chunk, cfg.ground, cfg.drone, cfg.query_hw, cfg.ref_hw)
            out.extend(box for box, _conf in model.predict(q, r))
        return _rescale_to_native(samples, out, cfg)

    return predict


def _rescale_to_native(samples, preds, cfg: RunConfig):
    """Predictions made at ``cfg.ref_hw`` mapped back to each reference's native size."""
    if cfg.ref_hw is None:
        return preds
    out = []
    for s, p in zip(samples, preds):
        with Image.open(s.reference_path) as im:
            out.append(p.scaled(im.width / cfg.ref_hw[1], im.height / cfg.ref_hw[0]))
    return out


def retrieval_eval(model: VAGeoNet, cfg: RunConfig, samples, patch_size: int) -> EvalReport:
    model.eval()
    if patch_size % model.stride:
        raise ValueError(f"patch size {patch_size} must be a multiple of the reference stride {model.stride}")
    grids, gts = [], []
    with torch.no_grad():
        for s in samples:
            q, r, boxes = load_tensors([s], cfg.ground, cfg.drone, cfg.query_hw, cfg.ref_hw)
            desc = model.query_branch(q)[0].double().numpy()
            feat = model.reference_branch(r)[0].double().numpy()
            grids.append(retrieval_scores(desc, feat, patch_size // model.stride))
            gts.append(boxes[0])
    return retrieval_report(grids, gts, patch_size)


def _load_model(path) -> tuple[VAGeoNet, RunConfig, dict]:
    ckpt = load_checkpoint(path)
    cfg = RunConfig.from_dict(ckpt["config"])
    model = VAGeoNet(cfg.model)
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, cfg, ckpt


def _heatmap_rgb(values: np.ndarray) -> np.ndarray:
    """Blue-to-red ramp over min-max normalized values."""
    v = values.astype(np.float64)
    span = v.max() - v.min()
    v = (v - v.min()) / span if span > 0 else np.zeros_like(v)
    r = np.clip(1.5 - np.abs(4 * v - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * v - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * v - 1), 0, 1)
    return (np.stack([r, g, b], axis=-1) * 255).round().astype(np.uint8)


def encoding_png(enc: EncodingMap) -> Image.Image:
    peak = enc.values.max()
    gray = np.zeros_like(enc.values) if peak <= 0 else enc.values / peak
    return Image.fromarray((gray * 255).round().astype(np.uint8), mode="L")


def draw_boxes(ref: Image.Image, pred: BBox, gt: BBox) -> Image.Image:
    img = ref.convert("RGB").copy()
    d = ImageDraw.Draw(img)
    for box, color in ((gt, (0, 200, 0)), (pred, (230, 0, 0))):
        x0, y0, x1, y1 = box.corners()
        d.rectangle([x0, y0, x1 - 1, y1 - 1], outline=color, width=1)
    return img


# commands

def cmd_synth(args) -> int:
    if args.n <= 0:
        raise UsageError(f"--n must be positive, got {args.n}")
    out = _out_dir(args, "synth")
    m = synth_generate(args.n, args.seed, args.view, out, args.ref_size, args.query_size)
    _event("synth", n=len(m), view=args.view, seed=args.seed, manifest=str(out / "manifest.jsonl"))
    print(out / "manifest.jsonl")
    return EXIT_OK


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "preset", None) == "toy":
        cfg = replace(cfg, train=TOY_TRAIN)
    return cfg.with_overrides(
        view=getattr(args, "view", None),
        seed=getattr(args, "seed", None),
        manifest=str(args.manifest) if getattr(args, "manifest", None) else None,
        sigma=getattr(args, "sigma", None),
        kernel=getattr(args, "kernel", None),
        ring_weights=getattr(args, "ring_weights", None),
        lr0=getattr(args, "lr", None),
        epochs=getattr(args, "epochs", None),
        batch_size=getattr(args, "batch_size", None),
        halve_every=getattr(args, "halve_every", None),
        query_backbone=getattr(args, "query_backbone", None),
        reference_backbone=getattr(args, "reference_backbone", None),
        width=getattr(args, "width", None),
        query_hw=getattr(args, "query_size", None),
        ref_hw=getattr(args, "ref_size", None),
        bypass_csha=True if getattr(args, "no_csha", False) else None,
    )


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = _resolve_config(args)
    views = {s.view for s in manifest}
    if args.view is None and len(views) == 1:
        cfg = replace(cfg, view=views.pop())
    if any(s.view != cfg.view for s in manifest):
        raise ValueError(f"manifest views {sorted({s.view for s in manifest})} differ from --view {cfg.view}")
    out = _out_dir(args, "train")
    out.mkdir(parents=True, exist_ok=True)
    cfg = replace(cfg, out=str(out))
    _write_json(out / "config.json", cfg.to_dict())

    t0 = time.time()
    with open(out / "loss_log.jsonl", "w") as fh:
        def on_step(rec):
            fh.write(json.dumps(rec) + "\n")
            if rec["step"] % 50 == 0:
                _event("train", **rec)

        model, opt, history = train_on(cfg, manifest.samples, on_step)
    save_checkpoint(out / "checkpoint.pt", model, opt, cfg.train.epochs, cfg.to_dict())
    report = evaluate(model_predictor(model, cfg), manifest.samples)
    _event("train_done", steps=len(history), first_loss=history[0] if history else None,
           last_loss=history[-1] if history else None, seconds=round(time.time() - t0, 2), **report.to_dict())
    print(json.dumps({"checkpoint": str(out / "checkpoint.pt"), "train_report": report.to_dict()}))
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest, args.split)
    if len(manifest) == 0:
        raise ValueError(f"manifest {args.manifest} is empty")
    if args.oracle:
        cfg = _resolve_config(args)
        report = evaluate(oracle_predictor, manifest.samples)
        model = None
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --oracle is given")
        model, cfg, _ = _load_model(args.checkpoint)
        cfg = replace(cfg, manifest=str(args.manifest))
        if args.protocol == "retrieval":
            report = retrieval_eval(model, cfg, manifest.samples, args.patch_size)
        else:
            report = evaluate(model_predictor(model, cfg), manifest.samples)
    out = _out_dir(args, "eval")
    out.mkdir(parents=True, exist_ok=True)
    record = {"report": report.to_dict(), "protocol": "oracle" if args.oracle else args.protocol,
              "split": manifest.split, "config": cfg.to_dict()}
    _write_json(out / "report.json", record)
    (out / "report.txt").write_text(report.to_text() + "\nconfig " + cfg.to_json() + "\n")
    if args.overlays and model is not None:
        preds = model_predictor(model, cfg)(manifest.samples[: args.overlays])
        for k, (s, p) in enumerate(zip(manifest.samples, preds)):
            with Image.open(s.reference_path) as ref:
                _png_with_config(draw_boxes(ref, p, s.gt_box), out / f"overlay_{k:04d}.png", cfg)
    _event("eval", **record["report"])
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_encode(args) -> int:
    cfg = _resolve_config(args)
    if args.query:
        with Image.open(args.query) as im:
            height, width = im.height, im.width
    elif args.height and args.width:
        height, width = args.height, args.width
    else:
        raise UsageError("give --query IMAGE or both --height and --width")
    click = ClickPoint(*args.click)
    enc = encode(cfg.view, height, width, click, cfg.ground, cfg.drone)
    out = _out_dir(args, "encode")
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "encoding.npy", enc.values.astype(np.float32))
    _write_json(out / "encoding.json", {"view": cfg.view, "height": height, "width": width,
                                        "click": [click.row, click.col], "config": cfg.to_dict()})
    _png_with_config(encoding_png(enc), out / "encoding.png", cfg)
    written = ["encoding.npy", "encoding.png"]

    if args.attn:
        if not (args.checkpoint and args.query):
            raise UsageError("--attn needs --checkpoint and --query")
        model, mcfg, _ = _load_model(args.checkpoint)
        img = Image.open(args.query).convert("RGB")
        if mcfg.query_hw is not None:
            img = img.resize((mcfg.query_hw[1], mcfg.query_hw[0]), Image.BILINEAR)
            click = click.scaled(mcfg.query_hw[0] / height, mcfg.query_hw[1] / width, *mcfg.query_hw)
        x = torch.from_numpy(np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0)
        enc_m = encode(mcfg.view, x.shape[1], x.shape[2], click, mcfg.ground, mcfg.drone)
        x = attach_encoding(x, enc_m)[None]
        with torch.no_grad():
            fq = model.query_branch.backbone(x)
            if model.query_branch.csha is None:
                refined, cw, sw = fq, None, None
            else:
                refined, cw, sw = model.query_branch.csha.forward_with_maps(fq)
        size = (img.width, img.height)
        act = refined[0].abs().mean(0).numpy()
        heat = Image.fromarray(_heatmap_rgb(act)).resize(size, Image.BILINEAR)
        _png_with_config(Image.blend(img, heat, 0.5), out / "attn_activation.png", mcfg)
        written.append("attn_activation.png")
        if sw is not None:
            sheat = Image.fromarray(_heatmap_rgb(sw[0, 0].numpy())).resize(size, Image.BILINEAR)
            _png_with_config(Image.blend(img, sheat, 0.5), out / "attn_spatial.png", mcfg)
            written.append("attn_spatial.png")
        if cw is not None:
            np.save(out / "attn_channel.npy", cw[0].numpy())
            written.append("attn_channel.npy")
    _event("encode", view=cfg.view, out=str(out), files=written)
    print("\n".join(str(out / w) for w in written))
    return EXIT_OK


def run_sweep(param: str, values, base: RunConfig, n: int, data_seed: int, out: Path,
              ref_hw=None, query_hw=None) -> list[dict]:
    """Train and evaluate one toy model per parameter value on shared synthetic data.

    Rows are ranked by held-out acc@0.5, then acc@0.25, then mean IoU.
    """
    view = "ground" if param == "sigma" else "drone"
    data = synth_generate(n, data_seed, view, out / f"data_{view}", ref_hw, query_hw)
    train, val, test = split_manifest(data, (0.75, 0.0, 0.25), seed=data_seed)
    held_out = test.samples or train.samples
    rows = []
    for v in values:
        if param == "sigma":
            cfg = base.with_overrides(view=view, sigma=float(v))
            label = f"{float(v):g}"
        else:
            cfg = base.with_overrides(view=view, ring_weights=tuple(v))
            label = "[" + ",".join(f"{w:.2f}" for w in v) + "]"
        model, _opt, history = train_on(cfg, train.samples)
        tr = evaluate(model_predictor(model, cfg), train.samples)
        te = evaluate(model_predictor(model, cfg), held_out)
        rows.append({
            "param": param, "value": label, "final_loss": history[-1],
            "train_acc_at_50": tr.acc_at_50,
            "acc_at_25": te.acc_at_25, "acc_at_50": te.acc_at_50, "mean_iou": te.mean_iou,
            "n_train": len(train), "n_eval": te.n_samples,
        })
        _event("sweep_point", **rows[-1])
    rows.sort(key=lambda r: (-r["acc_at_50"], -r["acc_at_25"], -r["mean_iou"]))
    for rank, r in enumerate(rows, 1):
        r["rank"] = rank
    return rows


def cmd_sweep(args) -> int:
    base = _resolve_config(args)
    if args.param == "sigma":
        values = args.values or list(SIGMA_GRID)
    else:
        values = [tuple(v) for v in RING_WEIGHT_PRESETS]
    out = _out_dir(args, "sweep")
    out.mkdir(parents=True, exist_ok=True)
    rows = run_sweep(args.param, values, base, args.n, base.seed, out, args.ref_size, args.query_size)
    fields = ["rank", "param", "value", "acc_at_25", "acc_at_50", "mean_iou", "final_loss",
              "train_acc_at_50", "n_train", "n_eval"]
    with open(out / f"sweep_{args.param}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    _write_json(out / f"sweep_{args.param}.json", {"rows": rows, "config": base.to_dict()})
    print(f"{'rank':>4}  {'value':<26} {'acc@0.25':>8} {'acc@0.5':>8} {'mIoU':>6}")
    for r in rows:
        print(f"{r['rank']:>4}  {r['value']:<26} {100 * r['acc_at_25']:8.2f} {100 * r['acc_at_50']:8.2f} {r['mean_iou']:6.3f}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vageo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log events as JSON lines on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, train_flags=False):
        sp.add_argument("--config", help="JSON RunConfig; flags override it")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--view", choices=["ground", "drone"])
        sp.add_argument("--sigma", type=float)
        sp.add_argument("--kernel", choices=["paper-squared", "laplace-absolute"])
        sp.add_argument("--ring-weights", type=float, nargs=4, metavar="W")
        if train_flags:
            sp.add_argument("--preset", choices=["paper", "toy"], default="paper",
                            help="toy: 300 overfit steps at lr 1e-3, batch 8")
            sp.add_argument("--lr", type=float)
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--batch-size", type=int)
            sp.add_argument("--halve-every", type=int)
            sp.add_argument("--query-backbone", choices=["toy-small", "paper-resnet18", "paper-darknet53"])
            sp.add_argument("--reference-backbone", choices=["toy-small", "paper-resnet18", "paper-darknet53"])
            sp.add_argument("--width", type=int, help="toy-small output channels")
            sp.add_argument("--no-csha", action="store_true")

    s = sub.add_parser("synth", help="generate a synthetic cross-view dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--view", choices=["ground", "drone"], default="drone")
    s.add_argument("--out")
    s.add_argument("--ref-size", type=int, nargs=2, metavar=("H", "W"))
    s.add_argument("--query-size", type=int, nargs=2, metavar=("H", "W"))
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--query-size", type=int, nargs=2, metavar=("H", "W"))
    t.add_argument("--ref-size", type=int, nargs=2, metavar=("H", "W"))
    common(t, train_flags=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint (or the oracle) on a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--oracle", action="store_true", help="predict the ground-truth boxes")
    e.add_argument("--split", choices=["train", "validation", "test"], default="test")
    e.add_argument("--protocol", choices=["detection", "retrieval"], default="detection")
    e.add_argument("--patch-size", type=int, default=128)
    e.add_argument("--overlays", type=int, default=0, help="write N predicted/GT box overlays")
    e.add_argument("--out")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("encode", help="export positional encodings and attention heatmaps")
    c.add_argument("--click", type=int, nargs=2, required=True, metavar=("ROW", "COL"))
    c.add_argument("--height", type=int)
    c.add_argument("--width", type=int)
    c.add_argument("--query", help="query image; sets the map size")
    c.add_argument("--attn", action="store_true", help="also export CSHA maps from --checkpoint")
    c.add_argument("--checkpoint")
    common(c)
    c.set_defaults(func=cmd_encode)

    w = sub.add_parser("sweep", help="sigma or ring-weight ablation on synthetic data")
    w.add_argument("--param", choices=["sigma", "weights"], required=True)
    w.add_argument("--values", type=float, nargs="+", help="sigma grid (default 5 15 25 50)")
    w.add_argument("--n", type=int, default=16, help="synthetic samples per sweep")
    w.add_argument("--ref-size", type=int, nargs=2, metavar=("H", "W"))
    w.add_argument("--query-size", type=int, nargs=2, metavar=("H", "W"))
    common(w, train_flags=True)
    w.set_defaults(func=cmd_sweep, preset="toy")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vageo {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, EncodingError, FileNotFoundError, ValueError) as exc:
        print(f"vageo {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        print(f"vageo {args.command}: runtime error: {exc!r}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

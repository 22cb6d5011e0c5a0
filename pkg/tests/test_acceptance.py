"""Exit criteria for the desk-scale build, one test per criterion.

Each test enforces its stated tolerance and runtime budget; the terminal summary
lists PASSED/FAILED per criterion.
"""

import math
import time

import numpy as np
import torch

from oracles import finite_difference_grads, raster_iou, relative_error, retrieval_hit_oracle
from vageo.boxes import BBox
from vageo.cli import main, model_predictor, train_on
from vageo.config import TOY_TRAIN, RunConfig
from vageo.csha import CSHA, zero_
from vageo.data import synth_generate
from vageo.evaluation import accuracy_at, evaluate, iou, patch_retrieval_protocol, report_from_boxes, top_patches
from vageo.model import BackboneConfig, DetectHead, ModelConfig, VAGeoNet, best_boxes, detection_loss, target_grid
from vageo.train import TrainConfig, lr_schedule
from vageo.vspe import RING_WEIGHT_PRESETS, ClickPoint, GroundEncodingConfig, drone_encoding, ground_encoding, ring_index


def test_criterion_1_ground_vspe():
    t0 = time.perf_counter()
    cfg = GroundEncodingConfig(sigma=25.0, kernel="paper-squared", normalize_peak=False)
    click = ClickPoint(32, 32)
    v = ground_encoding(64, 64, click, cfg).values
    assert abs(v[32, 32] - 0.02) < 1e-9
    assert abs(v[32, 37] - 0.02 * math.exp(-1)) < 1e-9
    assert abs(v[35, 36] - 0.02 * math.exp(-1)) < 1e-9
    rows, cols = np.indices(v.shape)
    d2 = ((rows - 32) ** 2 + (cols - 32) ** 2).ravel()
    flat = v.ravel()
    # strict decay: every distinct distance level is strictly below the previous one
    levels = np.unique(d2)
    per_level = [np.unique(flat[d2 == d]) for d in levels]
    assert all(len(p) == 1 for p in per_level)
    vals = np.array([p[0] for p in per_level])
    assert np.all(np.diff(vals) < 0)
    # reflection about the click within the 63x63 window that fits
    win = v[1:64, 1:64]
    assert np.array_equal(win, win[::-1]) and np.array_equal(win, win[:, ::-1])
    assert np.array_equal(win, win.T)
    assert time.perf_counter() - t0 < 1.0


def test_criterion_2_drone_partition():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    rows, cols = np.indices((256, 256))
    for r, c in rng.integers(0, 256, size=(100, 2)):
        v = drone_encoding(256, 256, ClickPoint(int(r), int(c))).values
        assert v.shape == (256, 256) and np.all(np.isfinite(v))
        assert set(np.unique(v)) <= {0.60, 0.15, 0.10}
        assert v[r, c] == 0.60
        ring = ring_index(256, 256, ClickPoint(int(r), int(c)))
        cheb = np.maximum(abs(rows - r), abs(cols - c))
        # nested: the max radius of ring k is below the min radius of ring k+1
        present = [k for k in range(1, 5) if np.any(ring == k)]
        for a, b in zip(present, present[1:]):
            assert cheb[ring == a].max() < cheb[ring == b].min()
    assert time.perf_counter() - t0 < 5.0


def test_criterion_3_csha_zero_identity():
    torch.manual_seed(0)
    block = zero_(CSHA(32).double())
    for mode in (block.train, block.eval):
        mode()
        f = torch.randn(2, 32, 7, 5, dtype=torch.float64)
        assert (block(f) - 0.25 * f).abs().max().item() <= 1e-12
    fresh = CSHA(32).double()
    for seed in range(20):
        torch.manual_seed(seed)
        f = torch.randn(3, 32, 6, 6, dtype=torch.float64)
        for mode in (fresh.train, fresh.eval):
            mode()
            _, _, sw = fresh.forward_with_maps(f)
            assert sw.min().item() >= 0.5 and sw.max().item() < 1.0


def test_criterion_4_gradient_oracle():
    t0 = time.perf_counter()
    torch.manual_seed(1)
    block = CSHA(4).double().train()
    x = torch.rand(1, 4, 3, 3, dtype=torch.float64) + 0.1
    probe = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    leaves = [x] + list(block.parameters())
    for t in leaves:
        t.requires_grad_(True)

    def csha_loss():
        return (block(x) * probe).sum()

    err_csha = relative_error(torch.autograd.grad(csha_loss(), leaves),
                              finite_difference_grads(csha_loss, [t.detach() for t in leaves], 1e-5))
    assert err_csha < 1e-4

    # detection loss through a head on a 1x4x3x3 fused map, and through a whole tiny model
    head = DetectHead(4).double()
    fused = torch.randn(1, 4, 3, 3, dtype=torch.float64, requires_grad=True)
    gt = [BBox(20.0, 9.0, 11.0, 7.0)]
    hl = [fused] + list(head.parameters())

    def head_loss():
        return detection_loss(head(fused), gt, 16, 12.0, 12.0)

    err_head = relative_error(torch.autograd.grad(head_loss(), hl),
                              finite_difference_grads(head_loss, [t.detach() for t in hl], 1e-5))
    assert err_head < 1e-4

    b = BackboneConfig("toy-small", width=4)
    model = VAGeoNet(ModelConfig(query_backbone=b, reference_backbone=b)).double().train()
    q = torch.rand(1, 4, 48, 48, dtype=torch.float64)
    r = torch.rand(1, 3, 48, 48, dtype=torch.float64)
    params = list(model.parameters())

    def model_loss():
        return detection_loss(model(q, r), [BBox(21.0, 30.5, 10.0, 14.0)], 16, 12.0, 9.0)

    err_model = relative_error(torch.autograd.grad(model_loss(), params),
                               finite_difference_grads(model_loss, [p.detach() for p in params], 1e-5))
    assert err_model < 1e-4
    assert time.perf_counter() - t0 < 30.0


def test_criterion_5_iou_oracle():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        a = rng.integers(0, 60, 2)
        b = rng.integers(0, 60, 2)
        ca = (*a, *(a + rng.integers(1, 40, 2)))
        cb = (*b, *(b + rng.integers(1, 40, 2)))
        assert abs(iou(BBox.from_corners(*map(float, ca)), BBox.from_corners(*map(float, cb)))
                   - raster_iou(ca, cb)) < 1e-6
    gts = [BBox(float(x), float(y), 20.0, 20.0) for x, y in rng.integers(10, 90, (500, 2))]
    preds = [BBox(g.cx + rng.normal(0, 6), g.cy + rng.normal(0, 6), 20 * rng.uniform(0.6, 1.4), 20.0) for g in gts]
    assert accuracy_at(preds, gts, 0.5) <= accuracy_at(preds, gts, 0.25)
    rep = report_from_boxes(preds, gts)
    assert rep.acc_at_50 <= rep.acc_at_25


def test_criterion_6_encode_decode_round_trip():
    rng = np.random.default_rng(6)
    stride, sh, sw = 16, 8, 12
    worst = 0.0
    for _ in range(1000):
        cx, cy = rng.uniform(0, sw * stride), rng.uniform(0, sh * stride)
        w, h = rng.uniform(1, 80, 2)
        aw, ah = rng.uniform(5, 40, 2)
        gt = BBox(float(cx), float(cy), float(w), float(h))
        (box, _), = best_boxes(target_grid(gt, sh, sw, stride, aw, ah), stride, aw, ah)
        worst = max(worst, max(abs(x - y) for x, y in zip(box.as_list(), gt.as_list())))
    assert worst < 1e-6


def test_criterion_7_overfit_smoke(tmp_path):
    t0 = time.perf_counter()
    data = synth_generate(8, 7, "drone", tmp_path)
    cfg = RunConfig(view="drone", train=TOY_TRAIN, seed=0)
    model, _, history = train_on(cfg, data.samples)
    assert len(history) <= 300
    assert all(math.isfinite(x) for x in history)
    assert history[-1] < 0.1 * history[0]
    rep = evaluate(model_predictor(model, cfg), data.samples)
    assert rep.acc_at_50 == 1.0
    assert time.perf_counter() - t0 < 300.0


def test_criterion_8_schedule():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 0.0001
    assert lr_schedule(10, cfg) == 0.00005
    assert lr_schedule(20, cfg) == 0.000025


def test_criterion_9_patch_retrieval():
    rng = np.random.default_rng(9)
    for _ in range(200):
        h, w = rng.integers(2, 5, size=2)
        while h * w < 5:
            h, w = rng.integers(2, 5, size=2)
        # small integer scores force ties
        scores = rng.integers(0, 4, size=(h, w)).astype(float)
        x0, y0 = rng.integers(0, 96, size=2)
        bw, bh = rng.integers(8, 64, size=2)
        gt = (x0, y0, x0 + bw, y0 + bh)
        for tau in (0.25, 0.5):
            got = patch_retrieval_protocol(scores, BBox.from_corners(*map(float, gt)), 32, tau)
            assert got == retrieval_hit_oracle(scores, gt, 32, tau)
        assert top_patches(scores) == top_patches(scores.copy())
    flat = np.ones((4, 4))
    assert top_patches(flat) == [(0, 0), (0, 1), (0, 2), (0, 3), (1, 0)]


def test_criterion_10_ablation_harness(tmp_path):
    import csv
    import json

    common = ["--n", "8", "--epochs", "3", "--ref-size", "64", "64"]
    assert main(["sweep", "--param", "weights", "--out", str(tmp_path / "w"), "--query-size", "32", "32"]
                + common) == 0
    assert main(["sweep", "--param", "sigma", "--values", "5", "15", "25", "50", "--out", str(tmp_path / "s"),
                 "--query-size", "32", "64"] + common) == 0
    with open(tmp_path / "w" / "sweep_weights.csv") as fh:
        wrows = list(csv.DictReader(fh))
    expected = {"[" + ",".join(f"{x:.2f}" for x in w) + "]" for w in RING_WEIGHT_PRESETS}
    assert {r["value"] for r in wrows} == expected and len(wrows) == 8
    srows = json.loads((tmp_path / "s" / "sweep_sigma.json").read_text())["rows"]
    assert len(srows) == 4
    for rows in (wrows, srows):
        ranks = [int(r["rank"]) for r in rows]
        assert ranks == list(range(1, len(rows) + 1))
        key = [(-float(r["acc_at_50"]), -float(r["acc_at_25"]), -float(r["mean_iou"])) for r in rows]
        assert key == sorted(key)

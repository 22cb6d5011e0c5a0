import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import finite_difference_grads, relative_error
from vageo.boxes import BBox
from vageo.csha import zero_
from vageo.model import (
    OBJ,
    BackboneConfig,
    DetectHead,
    Fusion,
    ModelConfig,
    QueryBranch,
    ReferenceBranch,
    VAGeoNet,
    activate,
    best_boxes,
    decode_boxes,
    detection_loss,
    encode_target,
    target_grid,
)


def tiny_cfg(width=4):
    b = BackboneConfig("toy-small", width=width)
    return ModelConfig(query_backbone=b, reference_backbone=b)


def test_backbone_presets():
    assert BackboneConfig().output_stride == 16 and BackboneConfig().output_channels == 64
    assert BackboneConfig("paper-resnet18").output_channels == 512
    assert BackboneConfig("paper-darknet53").output_stride == 32


def test_query_branch_ground_descriptor():
    qb = QueryBranch(ModelConfig()).eval()
    with torch.no_grad():
        d = qb(torch.rand(1, 4, 256, 512))
    assert d.shape == (1, 64)


def test_query_branch_deterministic_eval():
    torch.manual_seed(0)
    qb = QueryBranch(ModelConfig()).eval()
    x = torch.rand(2, 4, 64, 64)
    with torch.no_grad():
        assert torch.equal(qb(x), qb(x))


def test_query_branch_zero_csha_is_quarter():
    torch.manual_seed(0)
    qb = QueryBranch(ModelConfig()).double().eval()
    zero_(qb.csha)
    bypass = QueryBranch(ModelConfig(bypass_csha=True)).double().eval()
    bypass.backbone.load_state_dict(qb.backbone.state_dict())
    x = torch.rand(2, 4, 64, 128, dtype=torch.float64)
    with torch.no_grad():
        assert torch.allclose(qb(x), 0.25 * bypass(x), rtol=0, atol=1e-12)


def test_stride_mismatch():
    with pytest.raises(ValueError):
        QueryBranch(ModelConfig())(torch.rand(1, 4, 60, 64))
    with pytest.raises(ValueError):
        ReferenceBranch(ModelConfig())(torch.rand(1, 3, 64, 70))


@pytest.mark.parametrize("hw,grid", [((256, 256), (16, 16)), ((256, 512), (16, 32))])
def test_reference_branch_toy(hw, grid):
    rb = ReferenceBranch(ModelConfig()).eval()
    with torch.no_grad():
        assert rb(torch.rand(1, 3, *hw)).shape == (1, 64, *grid)


def test_reference_branch_satellite_resolution():
    cfg = ModelConfig(reference_backbone=BackboneConfig("paper-resnet18"))
    rb = ReferenceBranch(cfg).eval()
    with torch.no_grad():
        assert rb(torch.rand(1, 3, 1024, 1024)).shape == (1, 512, 32, 32)


def test_darknet53_shape():
    cfg = ModelConfig(reference_backbone=BackboneConfig("paper-darknet53"))
    rb = ReferenceBranch(cfg).eval()
    with torch.no_grad():
        assert rb(torch.rand(1, 3, 64, 96)).shape == (1, 1024, 2, 3)


def test_resnet18_query_branch_takes_four_channels():
    cfg = ModelConfig(query_backbone=BackboneConfig("paper-resnet18"))
    qb = QueryBranch(cfg).eval()
    with torch.no_grad():
        assert qb(torch.rand(1, 4, 64, 128)).shape == (1, 512)


def test_fuse_shapes_and_dependence():
    torch.manual_seed(0)
    fu = Fusion(64, 64)
    r = torch.randn(2, 64, 16, 16)
    out = fu(torch.randn(2, 64), r)
    assert out.shape == (2, 64, 16, 16)
    assert not torch.allclose(fu(torch.randn(2, 64), r), out)
    with pytest.raises(ValueError):
        fu(torch.randn(3, 64), r)


def test_fuse_zero_query_depends_only_on_reference():
    torch.manual_seed(0)
    fu = Fusion(8, 8)
    with torch.no_grad():
        fu.mix.bias.zero_()
        fu.smooth.bias.zero_()
        r = torch.randn(1, 8, 5, 5)
        ref_only = torch.nn.functional.conv2d(r, fu.mix.weight[:, 8:])
        expect = fu.smooth(torch.relu(ref_only))
        assert torch.allclose(fu(torch.zeros(1, 8), r), expect, atol=1e-6)


def test_head_shapes_and_zero_weights():
    head = DetectHead(64)
    g = activate(head(torch.randn(2, 64, 16, 16)))
    assert g.shape == (2, 16, 16, 5)
    assert torch.all((g[..., OBJ] > 0) & (g[..., OBJ] < 1))
    torch.nn.init.zeros_(head.conv.weight)
    torch.nn.init.zeros_(head.conv.bias)
    assert torch.all(activate(head(torch.randn(1, 64, 4, 4)))[..., OBJ] == 0.5)


def test_decode_cell_center_and_anchor_identity():
    grid = torch.zeros(1, 4, 4, 5, dtype=torch.float64)
    grid[..., 0] = 0.5
    grid[..., 1] = 0.5
    boxes = decode_boxes(grid, 32, 40.0, 24.0)
    assert boxes[0, 0, 0].tolist() == [16.0, 16.0, 40.0, 24.0]
    assert boxes[0, 2, 3].tolist() == [112.0, 80.0, 40.0, 24.0]


def test_encode_decode_round_trip():
    gt = BBox(37.25, 90.5, 17.0, 33.0)
    grid = target_grid(gt, 8, 8, 16, 20.0, 20.0)
    (box, conf), = best_boxes(grid, 16, 20.0, 20.0)
    assert conf == 1.0
    for a, b in zip(box.as_list(), gt.as_list()):
        assert abs(a - b) < 1e-6


@settings(max_examples=50, deadline=None)
@given(cx=st.floats(0, 127.9), cy=st.floats(0, 95.9), k=st.integers(1, 2))
def test_translation_by_one_stride_moves_one_cell(cx, cy, k):
    stride = 16
    i, j, *_ = encode_target(BBox(cx, cy, 10, 10), 8, 10, stride, 10, 10)
    if cx + k * stride < 160:
        i2, j2, *_ = encode_target(BBox(cx + k * stride, cy, 10, 10), 8, 10, stride, 10, 10)
        assert (i2, j2) == (i, j + k)
    if cy + k * stride < 128:
        i2, j2, *_ = encode_target(BBox(cx, cy + k * stride, 10, 10), 8, 10, stride, 10, 10)
        assert (i2, j2) == (i + k, j)


def test_encode_target_rejects_outside_center():
    with pytest.raises(ValueError):
        encode_target(BBox(130, 10, 5, 5), 8, 8, 16, 10, 10)
    with pytest.raises(ValueError):
        encode_target(BBox(-1, 10, 5, 5), 8, 8, 16, 10, 10)


def test_loss_zero_head():
    raw = torch.zeros(1, 4, 4, 5, dtype=torch.float64)
    gt = BBox(20.0, 40.0, 24.0, 12.0)
    # positive cell (2, 1); targets tx 0.25, ty 0.5, tw log 1.5, th log 0.75
    expect = math.log(2) + 5 * (0.25**2 + 0.0 + math.log(1.5) ** 2 + math.log(0.75) ** 2)
    assert detection_loss(raw, [gt], 16, 16.0, 16.0).item() == pytest.approx(expect, abs=1e-12)


def test_loss_vanishes_at_optimum():
    gt = BBox(20.0, 40.0, 24.0, 12.0)
    i, j, tx, ty, tw, th = encode_target(gt, 4, 4, 16, 16.0, 16.0)
    big = 40.0
    raw = torch.full((1, 4, 4, 5), 0.0, dtype=torch.float64)
    raw[..., OBJ] = -big
    raw[0, i, j] = torch.tensor([math.log(tx / (1 - tx)), 0.0, tw, th, big])
    loss = detection_loss(raw, [gt], 16, 16.0, 16.0).item()
    assert loss < 1e-12


def tiny_model_inputs(seed=11):
    torch.manual_seed(seed)
    model = VAGeoNet(tiny_cfg()).double().train()
    model.set_anchor(12.0, 9.0)
    q = torch.rand(1, 4, 48, 48, dtype=torch.float64)
    r = torch.rand(1, 3, 48, 48, dtype=torch.float64)
    return model, q, r, [BBox(21.0, 30.5, 10.0, 14.0)]


def test_detection_loss_gradient_matches_finite_differences():
    model, q, r, gts = tiny_model_inputs()

    def loss():
        return detection_loss(model(q, r), gts, model.stride, 12.0, 9.0)

    params = list(model.parameters())
    analytic = torch.autograd.grad(loss(), params)
    numeric = finite_difference_grads(loss, [p.detach() for p in params])
    assert relative_error(analytic, numeric) < 1e-4


def test_every_parameter_gets_finite_gradient():
    model, q, r, gts = tiny_model_inputs()
    detection_loss(model(q, r), gts, model.stride, 12.0, 9.0).backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and torch.isfinite(p.grad).all(), name


def test_predict_deterministic_in_eval():
    model, q, r, _ = tiny_model_inputs()
    model.eval()
    assert model.predict(q, r) == model.predict(q, r)

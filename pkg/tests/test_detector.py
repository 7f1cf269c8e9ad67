import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from proactive_detect.autograd import Parameter, ShapeError, Tensor, avg_pool2, grad_check
from proactive_detect.detector import (
    Detector,
    DetectorConfig,
    assign_targets,
    decode_boxes,
    decode_predictions,
    detection_loss,
    encode_box,
    nms,
    prediction_record,
    read_predictions,
    segmentation_loss,
    write_predictions,
)
from proactive_detect.harness import Model, _forward_losses, _train_loop, build_config, in_memory_split
from proactive_detect.metrics import BBox, iou
from proactive_detect.wrapper import TemplateMode, WrapperConfig

THIN = (4, 6, 6, 6)


def centered(cx, cy, w=4.0, h=4.0):
    return BBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


# -- forward ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def det64():
    d = Detector(DetectorConfig(widths=THIN), seed=0)
    d.train(False)
    return d


def test_forward_shape_contract(det64):
    x = np.random.default_rng(0).uniform(size=(2, 64, 64, 3)).astype(np.float32)
    out = det64(x)
    assert out["grid"].shape == (2, 8, 8, 1 + 4 + 3)
    assert out["seg"].shape == (2, 64, 64, 1)
    assert out["seg"].data.min() >= 0.0 and out["seg"].data.max() <= 1.0


def test_forward_identical_inputs(det64):
    x = np.random.default_rng(1).uniform(size=(1, 64, 64, 3)).astype(np.float32)
    a, b = det64(np.concatenate([x, x])), det64(x)
    assert a["grid"].data[0].tobytes() == a["grid"].data[1].tobytes()
    assert a["grid"].data[0].tobytes() == b["grid"].data[0].tobytes()


def test_single_head_configs():
    x = np.zeros((1, 16, 16, 3), dtype=np.float32)
    god = Detector(DetectorConfig(image_size=16, grid=4, widths=THIN, head="GOD"), 0)(x)
    cod = Detector(DetectorConfig(image_size=16, grid=4, widths=THIN, head="COD"), 0)(x)
    assert set(god) == {"grid"} and set(cod) == {"seg"}


def test_forward_shape_mismatch(det64):
    with pytest.raises(ShapeError):
        det64(np.zeros((1, 32, 32, 3)))


@pytest.mark.parametrize("kwargs", [dict(widths=(4, 4, 4)), dict(head="both-ish"), dict(grid=5), dict(grid=2)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        DetectorConfig(**kwargs)


# -- targets --------------------------------------------------------------------------

def test_assignment_center_cell_column_is_x():
    t = assign_targets([[(centered(33, 17), 1)]], DetectorConfig())
    assert t.mask.sum() == 1 and t.mask[0, 2, 4] == 1  # row floor(17/8), column floor(33/8)
    assert t.classes[0, 2, 4].tolist() == [0, 1, 0]
    np.testing.assert_allclose(t.boxes[0, 2, 4], np.array([31, 15, 35, 19]) / 64)
    assert not t.collisions[0]


def test_assignment_empty_scene():
    t = assign_targets([[]], DetectorConfig())
    assert not t.mask.any() and not t.classes.any() and not t.collisions.any()


def test_assignment_two_cells():
    t = assign_targets([[(centered(4, 4), 0), (centered(60, 60), 2)]], DetectorConfig())
    assert t.mask.sum() == 2 and t.mask[0, 0, 0] and t.mask[0, 7, 7]


def test_assignment_collision_keeps_larger():
    small, large = centered(10, 10, 2, 2), centered(11, 11, 6, 6)
    for order in ([(small, 0), (large, 1)], [(large, 1), (small, 0)]):
        t = assign_targets([order], DetectorConfig())
        assert t.mask.sum() == 1 and t.collisions[0]
        assert t.classes[0, 1, 1].tolist() == [0, 1, 0]


def test_assignment_image_edge_clamps_to_last_cell():
    t = assign_targets([[(BBox(60, 60, 64, 64), 0)]], DetectorConfig())
    assert t.mask[0, 7, 7] == 1


# -- detection loss -----------------------------------------------------------------

def perfect_grid(annotations, config, sat=15.0):
    """Raw predictions whose decoded boxes equal the targets, with saturated logits."""
    g, n = config.grid, config.num_classes
    z = np.zeros((1, g, g, 5 + n))
    z[..., 0] = -sat
    z[..., 5:] = -sat
    for box, cls in annotations:
        cx, cy = (box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2
        r, c = int(cy // config.cell), int(cx // config.cell)
        z[0, r, c, 0] = sat
        z[0, r, c, 1:5] = encode_box(box, r, c, config)
        z[0, r, c, 5 + cls] = sat
    return z


def test_loss_at_exact_prediction():
    cfg = DetectorConfig()
    ann = [(BBox(3.5, 10.25, 20.0, 30.0), 0), (BBox(40, 41, 58, 60), 2)]
    t = assign_targets([ann], cfg)
    z = perfect_grid(ann, cfg)
    _, parts = detection_loss(Tensor(z), t, cfg, components=True)
    assert parts["box"] <= 1e-12
    assert parts["cls"] <= 1e-6
    assert parts["obj"] <= 1e-6


def test_empty_scene_only_negative_objectness():
    cfg = DetectorConfig(image_size=16, grid=4)
    z = np.random.default_rng(2).standard_normal((1, 4, 4, 8))
    total, parts = detection_loss(Tensor(z), assign_targets([[]], cfg), cfg, components=True)
    assert parts["box"] == 0.0 and parts["cls"] == 0.0
    expected = np.mean(np.log1p(np.exp(z[..., 0])))  # BCE against label 0
    assert total.item() == pytest.approx(expected, rel=1e-12)


def test_loss_is_batch_mean():
    cfg = DetectorConfig(image_size=16, grid=4)
    r = np.random.default_rng(3)
    ann = [[(BBox(1, 1, 7, 9), 1)], [(BBox(8, 2, 15, 6), 0), (BBox(2, 9, 6, 15), 2)]]
    z = r.standard_normal((2, 4, 4, 8))
    both = detection_loss(Tensor(z), assign_targets(ann, cfg), cfg).item()
    each = [detection_loss(Tensor(z[k:k + 1]), assign_targets(ann[k:k + 1], cfg), cfg).item() for k in range(2)]
    assert both == pytest.approx(np.mean(each), rel=1e-12)


def test_loss_nan_is_error():
    cfg = DetectorConfig(image_size=16, grid=4)
    z = np.zeros((1, 4, 4, 8))
    z[0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        detection_loss(Tensor(z), assign_targets([[]], cfg), cfg)


def test_loss_shape_error():
    cfg = DetectorConfig(image_size=16, grid=4)
    with pytest.raises(ShapeError):
        detection_loss(Tensor(np.zeros((1, 4, 4, 7))), assign_targets([[]], cfg), cfg)


def test_detection_loss_gradient_one_cell():
    cfg = DetectorConfig(image_size=8, grid=1)
    z = Parameter(np.random.default_rng(4).standard_normal((1, 1, 1, 8)))
    t = assign_targets([[(BBox(1.0, 2.0, 6.5, 7.0), 1)]], cfg)
    rep = grad_check(lambda: detection_loss(z, t, cfg), [("z", z)])
    assert rep.max_error < 1e-4, rep.errors


def test_detection_loss_gradient_multi_cell():
    cfg = DetectorConfig(image_size=8, grid=2)
    z = Parameter(np.random.default_rng(5).standard_normal((2, 2, 2, 8)))
    t = assign_targets([[(BBox(1.0, 2.0, 3.5, 3.0), 1)], [(BBox(4.5, 0.5, 7.0, 7.0), 2)]], cfg)
    rep = grad_check(lambda: detection_loss(z, t, cfg), [("z", z)])
    assert rep.max_error < 1e-4, rep.errors


def min_preactivation(det, x):
    """Smallest |pre-ReLU value| in the trunk; finite differences need it well above h."""
    h, low = x, np.inf
    for k, block in enumerate(det.blocks):
        if 1 <= k <= det.config.pools:
            h = avg_pool2(h)
        pre = block.bn(block.conv(h))
        low = min(low, float(np.abs(pre.data).min()))
        h = pre.relu()
    return low


def test_full_detector_gradient():
    cfg = DetectorConfig(image_size=8, grid=2, widths=(2, 3, 3, 3), num_classes=2)
    det = Detector(cfg, seed=11, dtype=np.float64)
    det.train(False)  # running statistics keep the map smooth for finite differences
    r = np.random.default_rng(11)
    x = Tensor(r.uniform(size=(2, 8, 8, 3)))
    assert min_preactivation(det, x) > 5e-4
    t = assign_targets([[(BBox(1, 1, 4, 5), 0)], [(BBox(3, 2, 8, 7), 1)]], cfg)
    seg = (r.uniform(size=(2, 8, 8, 1)) > 0.5).astype(np.float64)

    def loss():
        out = det(x)
        return detection_loss(out["grid"], t, cfg) + segmentation_loss(out["seg"], seg)

    rep = grad_check(loss, det.named_parameters())
    assert rep.max_error < 1e-4, rep.errors


# -- segmentation loss ------------------------------------------------------------

def test_segmentation_loss_examples():
    gt = (np.random.default_rng(7).uniform(size=(2, 6, 6, 1)) > 0.5).astype(float)
    assert segmentation_loss(Tensor(gt), gt).item() == 0.0
    assert segmentation_loss(Tensor(np.full((1, 4, 4, 1), 0.5)), np.zeros((1, 4, 4, 1))).item() == pytest.approx(0.5)


def test_segmentation_loss_gradient():
    r = np.random.default_rng(8)
    p = Parameter(r.uniform(0.1, 0.9, size=(2, 5, 5, 1)))
    gt = (r.uniform(size=(2, 5, 5, 1)) > 0.5).astype(float)
    rep = grad_check(lambda: segmentation_loss(p.sigmoid(), gt), [("p", p)])
    assert rep.max_error < 1e-4, rep.errors


# -- decoding -----------------------------------------------------------------------

def test_decode_all_negative_is_empty():
    cfg = DetectorConfig()
    z = np.random.default_rng(9).standard_normal((8, 8, 8))
    z[..., 0] = -np.inf
    assert decode_predictions(z, cfg, score_threshold=0.0) == []


def test_decode_one_confident_cell():
    cfg = DetectorConfig()
    box = BBox(20, 12, 36, 30)
    z = perfect_grid([(box, 2)], cfg)[0]
    dets = decode_predictions(z, cfg)
    assert len(dets) == 1
    d = dets[0]
    assert d.class_id == 2
    expected = 1 / (1 + math.exp(-15)) / (1 + 2 * math.exp(-30))
    assert d.score == pytest.approx(expected, rel=1e-12)
    np.testing.assert_allclose(d.box.as_tuple(), box.as_tuple(), atol=1e-4)


def test_decode_scores_in_unit_interval_and_sorted():
    cfg = DetectorConfig()
    z = np.random.default_rng(10).standard_normal((8, 8, 8)) * 3
    dets = decode_predictions(z, cfg, score_threshold=0.0, nms_iou=1.0)
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)
    assert all(0 <= s <= 1 for s in scores)
    for d in dets:
        assert 0 <= d.box.x1 < d.box.x2 <= 64 and 0 <= d.box.y1 < d.box.y2 <= 64


def test_decode_batch_of_one_accepted():
    cfg = DetectorConfig()
    z = perfect_grid([(BBox(2, 2, 9, 9), 0)], cfg)
    assert len(decode_predictions(z, cfg)) == 1
    with pytest.raises(ShapeError):
        decode_predictions(np.concatenate([z, z]), cfg)


def suppression_oracle(cands, thr):
    """Brute force: the kept set K is the unique subset where a candidate is kept iff
    no kept candidate ranked before it overlaps it by more than ``thr``."""
    rank = sorted(range(len(cands)), key=lambda k: (-cands[k][0], cands[k][1]))
    pos = {k: i for i, k in enumerate(rank)}
    found = []
    for r in range(len(cands) + 1):
        for subset in itertools.combinations(range(len(cands)), r):
            s = set(subset)
            ok = all(
                (k in s) == all(iou(cands[k][2], cands[j][2]) <= thr for j in s if pos[j] < pos[k])
                for k in range(len(cands))
            )
            if ok:
                found.append(sorted(s, key=pos.get))
    assert len(found) == 1
    return found[0]


def test_nms_example():
    a, b = BBox(0, 0, 10, 10), BBox(0, 0, 10, 8)
    assert iou(a, b) == pytest.approx(0.8)
    cands = [(0.7, 0, b, 0), (0.9, 1, a, 1)]
    kept = nms(cands, 0.5)
    assert [c[0] for c in kept] == [0.9]
    assert [cands[k] for k in suppression_oracle(cands, 0.5)] == kept


def test_nms_tie_prefers_lower_cell():
    a, b = BBox(0, 0, 10, 10), BBox(1, 0, 11, 10)
    kept = nms([(0.5, 9, a, 0), (0.5, 3, b, 0)], 0.5)
    assert [c[1] for c in kept] == [3]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 5), st.integers(0, 6), st.integers(0, 6), st.integers(2, 6), st.integers(2, 6)),
                min_size=0, max_size=7),
       st.sampled_from([0.0, 0.3, 0.5, 0.7]))
def test_nms_matches_oracle(raw, thr):
    cands = [(s / 5, k, BBox(x, y, x + w, y + h), 0) for k, (s, x, y, w, h) in enumerate(raw)]
    kept = nms(cands, thr)
    assert kept == [cands[k] for k in suppression_oracle(cands, thr)]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 60), st.floats(0, 60), st.floats(2, 40), st.floats(2, 40)), min_size=1, max_size=4))
def test_encode_decode_round_trip(raw):
    cfg = DetectorConfig()
    ann = []
    for x, y, w, h in raw:
        ann.append((BBox(x, y, min(x + w, 64.0), min(y + h, 64.0)), 0))
    t = assign_targets([ann], cfg)
    z = np.zeros((1, 8, 8, 8))
    rows, cols = np.nonzero(t.mask[0])
    for r, c in zip(rows, cols):
        z[0, r, c, 1:5] = encode_box(BBox(*(t.boxes[0, r, c].astype(float) * 64)), r, c, cfg)
    decoded = decode_boxes(Tensor(z), cfg).data * 64
    for r, c in zip(rows, cols):
        np.testing.assert_allclose(decoded[0, r, c], t.boxes[0, r, c] * 64, atol=1e-4)


def test_prediction_dump_round_trip(tmp_path):
    cfg = DetectorConfig()
    dets = decode_predictions(perfect_grid([(BBox(2, 2, 9, 9), 1)], cfg)[0], cfg, image_id=4)
    recs = [prediction_record(4, dets, np.full((4, 4), 0.25)), prediction_record(5, [])]
    write_predictions(recs, tmp_path / "p.jsonl")
    back = read_predictions(tmp_path / "p.jsonl")
    assert back == recs
    assert back[0]["seg"]["mean"] == 0.25 and back[0]["detections"][0]["class_id"] == 1


# -- training properties ------------------------------------------------------------

def small_config(**extra):
    sections = {
        "experiment": {"iterations": "2", "batch_size": "8", "output_dir": "unused"},
        "data": {"image_size": "16", "train_count": "16", "test_count": "8", "camouflage_level": "0.3"},
        "detector": {"widths": "4,6,6,6", "grid": "4"},
        "wrapper": {"encoder_widths": "4,6", "decoder_widths": "4,6", "levels": "1", "num_blocks": "3"},
    }
    for k, v in extra.items():
        sections.setdefault(k, {}).update(v)
    return build_config(sections)


def test_identity_template_first_step_parity():
    cfg = small_config()
    train = in_memory_split(cfg, "train")
    passive = Model(cfg, None)
    ones = WrapperConfig(**{**cfg.wrapper.__dict__, "template_mode": TemplateMode.FIXED, "fixed_template": "ones"})
    proactive = Model(cfg, ones)
    assert np.all(proactive.wrapper.template(Tensor(train.images[:2])).data == 1.0)
    _train_loop(passive, train, 1, cfg, "a", 0, None)
    _train_loop(proactive, train, 1, cfg, "a", 0, None)
    a, b = passive.detector.state_dict(), proactive.detector.state_dict()
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes(), k


def test_training_losses_finite():
    cfg = small_config()
    train = in_memory_split(cfg, "train")
    model = Model(cfg, WrapperConfig(**cfg.wrapper.__dict__))
    curves = _train_loop(model, train, 4, cfg, "a", 1, None)
    for series in curves.values():
        assert all(np.isfinite(series))


def test_overfit_small_set():
    cfg = small_config(
        experiment={"batch_size": "32"},
        data={"image_size": "32", "train_count": "32", "camouflage_level": "0.0"},
        detector={"widths": "8,16,16,16", "grid": "8"},
        optim={"detector_optimizer": "AdaptiveMoment", "detector_lr": "3e-3"},
    )
    train = in_memory_split(cfg, "train")
    model = Model(cfg, None)
    model.train(True)
    images, seg, targets = train.batch(np.arange(32))
    weights = (1.0, 0.0, 0.0)
    initial = _forward_losses(model, images, seg, targets, weights)[1].J_OBJ
    _train_loop(model, train, 500, cfg, "a", 0, None)
    model.train(True)
    final = _forward_losses(model, images, seg, targets, weights)[1].J_OBJ
    assert final < 0.1 * initial, (initial, final)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monokp.evaluation import (
    EvalConfig,
    average_precision,
    bev_iou,
    clip_polygon,
    bev_corners,
    iou_2d,
    iou_3d,
    object_iou,
    polygon_area,
    recall_points,
)
from monokp.geometry import Dimension3D, ObjectBox3D
from monokp.kitti_io import Difficulty, KittiObject
from monokp.oracles import brute_force_ap, monte_carlo_iou3d

E, M, H = Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD


def car(bbox, score=None, kind="Car", ry=0.0, loc=(0.0, 1.5, 20.0), dims=(1.5, 1.6, 3.9), occ=0, trunc=0.0):
    return KittiObject(kind, trunc, occ, 0.0, tuple(float(v) for v in bbox), dims, loc, ry, score)


def test_iou_2d_examples():
    assert iou_2d((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0
    assert iou_2d((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou_2d((0, 0, 1, 1), (0.5, 0, 1.5, 1)) == pytest.approx(1 / 3)


def test_bev_iou_examples():
    sq = (0.0, 0.0, 1.0, 1.0, 0.0)
    assert bev_iou(sq, sq) == pytest.approx(1.0)
    rot = (0.0, 0.0, 1.0, 1.0, math.pi / 4)
    assert bev_iou(sq, rot) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    # area oracle: equal-height prisms reduce the volume sampler to area
    mc = monte_carlo_iou3d(((0, 0, 0), (1, 1, 1), 0.0), ((0, 0, 0), (1, 1, 1), math.pi / 4), rng=np.random.default_rng(0))
    assert bev_iou(sq, rot) == pytest.approx(mc.value, abs=1e-3)
    assert bev_iou(sq, (1.5, 0.0, 1.0, 1.0, 0.3)) == 0.0


def test_polygon_helpers():
    poly = bev_corners(0, 0, 2, 1, 0.7)
    assert polygon_area(poly) == pytest.approx(2.0)
    assert polygon_area(clip_polygon(poly, poly)) == pytest.approx(2.0)
    # touching squares share an edge: degenerate, zero area
    a = bev_corners(0, 0, 1, 1, 0)
    b = bev_corners(1, 0, 1, 1, 0)
    assert polygon_area(clip_polygon(a, b)) == pytest.approx(0.0, abs=1e-12)


def test_iou_3d_examples():
    a = ObjectBox3D(Dimension3D(1.5, 1.6, 3.9), 0.3, (1, 1.5, 10))
    assert iou_3d(a, a) == pytest.approx(1.0)
    above = ObjectBox3D(Dimension3D(1.5, 1.6, 3.9), 0.3, (1, 0.0, 10))
    assert iou_3d(a, above) == 0.0
    # frozen Monte-Carlo value (4M scrambled Sobol points, stderr 3e-4)
    b = ObjectBox3D(Dimension3D(1.6, 1.7, 4.2), -0.2, (1.4, 1.2, 10.5))
    assert iou_3d(a, b) == pytest.approx(0.32585, abs=1e-3)


def test_kitti_iou_uses_bottom_center():
    g = car((0, 0, 10, 10), loc=(0, 1.5, 20))
    lifted = car((0, 0, 10, 10), loc=(0, 1.5 - 0.75, 20))
    assert object_iou(g, g, "AP3D") == pytest.approx(1.0)
    assert object_iou(g, lifted, "AP3D") == pytest.approx(1 / 3)
    assert object_iou(g, lifted, "APBEV") == pytest.approx(1.0)
    with pytest.raises(ValueError):
        object_iou(g, g, "AP4D")


box_params = st.tuples(
    st.floats(-10, 10), st.floats(-1, 1), st.floats(5, 40), st.floats(0.5, 3), st.floats(0.5, 3), st.floats(0.5, 6), st.floats(-3.1, 3.1)
)


def _box(p):
    x, y, z, h, w, l, yaw = p
    return ObjectBox3D(Dimension3D(h, w, l), yaw, (x, y, z))


@settings(max_examples=200)
@given(box_params, st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(-3.1, 3.1), st.floats(-5, 5))
def test_iou_symmetric_and_rigid_invariant(p, dx, dy, dz, spin, shift):
    a = _box(p)
    b = ObjectBox3D(Dimension3D(a.dim.h * 1.1, a.dim.w * 0.9, a.dim.l), a.theta + 0.4, a.T + (dx, dy, dz))
    assert abs(iou_3d(a, b) - iou_3d(b, a)) < 1e-12
    c, s = math.cos(spin), math.sin(spin)

    def move(box):
        x, y, z = box.T
        # rotate about the vertical axis through (0, 0, 30), then shift;
        # the extra 10 m forward keeps every moved box in front of the camera
        xr = c * x + s * (z - 30)
        zr = -s * x + c * (z - 30) + 30
        return ObjectBox3D(box.dim, box.theta + spin, (xr + shift, y + shift, zr + 10 + shift))

    assert abs(iou_3d(move(a), move(b)) - iou_3d(a, b)) < 1e-9
    assert 0.0 <= iou_3d(a, b) <= 1.0


def test_recall_points():
    assert np.allclose(recall_points(11), np.arange(11) / 10)
    assert np.allclose(recall_points(40), np.arange(1, 41) / 40)
    with pytest.raises(ValueError):
        recall_points(20)


def _scene(n=4, seed=0):
    rng = np.random.default_rng(seed)
    gts = []
    for i in range(n):
        u = 100 + 150 * i
        gts.append(car((u, 100, u + 100, 160), ry=float(rng.uniform(-3, 3)), loc=(-5 + 3 * i, 1.5, 20 + i)))
    return gts


@pytest.mark.parametrize("metric", ["AP2D", "APBEV", "AP3D", "AOS"])
@pytest.mark.parametrize("sampling", [11, 40])
def test_perfect_detector(metric, sampling):
    gts = [_scene(3, 0), _scene(4, 1)]
    dets = [[KittiObject(**{**g.__dict__, "score": 1.0}) for g in img] for img in gts]
    res = average_precision(dets, gts, "Car", EvalConfig(metric=metric, sampling=sampling))
    assert all(res.ap[lv] == 1.0 for lv in (E, M, H))


def test_no_detections():
    res = average_precision([[]], [_scene(3)], "Car", EvalConfig(metric="AP2D"))
    assert all(v == 0.0 for v in res.ap.values())
    empty = average_precision([[]], [[]], "Car", EvalConfig())
    assert all(math.isnan(v) for v in empty.ap.values())


def _shifted(g, s, score):
    u0, v0, u1, v1 = g.bbox
    return car((u0 + s, v0, u1 + s, v1), score)


def test_hand_fixture_frozen():
    # tp, fp (duplicate), tp, tp: AP11 = (4 * 1 + 7 * 0.75) / 11
    g = _scene(3)
    dets = [car(g[0].bbox, 0.9), _shifted(g[0], 10, 0.8), car(g[2].bbox, 0.7), _shifted(g[1], 15, 0.6)]
    r11 = average_precision([dets], [g], "Car", EvalConfig("AP2D", 11))
    r40 = average_precision([dets], [g], "Car", EvalConfig("AP2D", 40))
    assert r11.ap[M] == pytest.approx(37 / 44, abs=1e-12)
    assert r40.ap[M] == pytest.approx(133 / 160, abs=1e-12)
    ious = [[iou_2d(d.bbox, t.bbox) for t in g] for d in dets]
    assert brute_force_ap([d.score for d in dets], 3, ious, 0.7, 11) == pytest.approx(37 / 44, abs=1e-12)


def test_random_fixtures_match_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n_gt = int(rng.integers(1, 4))
        n_det = int(rng.integers(0, 6 - n_gt))
        gts = _scene(n_gt, int(rng.integers(1000)))
        dets = []
        for _ in range(n_det):
            g = gts[rng.integers(n_gt)]
            dets.append(_shifted(g, float(rng.uniform(-40, 40)), float(rng.random())))
        ious = [[iou_2d(d.bbox, t.bbox) for t in gts] for d in dets]
        for sampling in (11, 40):
            for thr in (0.5, 0.7):
                got = average_precision([dets], [gts], "Car", EvalConfig("AP2D", sampling), threshold=thr).ap[M]
                assert got == pytest.approx(brute_force_ap([d.score for d in dets], n_gt, ious, thr, sampling), abs=1e-12)


def test_adding_top_correct_detection_never_hurts():
    rng = np.random.default_rng(2)
    for _ in range(100):
        gts = _scene(4, int(rng.integers(1000)))
        dets = [_shifted(gts[rng.integers(4)], float(rng.uniform(-50, 50)), float(rng.uniform(0, 0.9))) for _ in range(4)]
        unmatched = [g for g in gts if not any(iou_2d(d.bbox, g.bbox) >= 0.7 for d in dets)]
        if not unmatched:
            continue
        cfg = EvalConfig("AP2D", 40)
        before = average_precision([dets], [gts], "Car", cfg).ap[M]
        after = average_precision([dets + [car(unmatched[0].bbox, 1.0)]], [gts], "Car", cfg).ap[M]
        assert after >= before - 1e-12


def test_dontcare_and_neighbor_absorb_false_positives():
    gts = [car((0, 100, 100, 160)), car((300, 100, 340, 120), kind="DontCare"), car((500, 100, 600, 160), kind="Van")]
    dets = [car((0, 100, 100, 160), 0.9), car((305, 102, 335, 118), 0.95), car((500, 100, 600, 160), 0.99)]
    res = average_precision([dets], [gts], "Car", EvalConfig("AP2D", 40))
    assert res.ap[M] == 1.0
    assert res.curves[M].n_gt == 1 and len(res.curves[M].scores) == 1


def test_difficulty_is_cumulative():
    easy = car((0, 100, 100, 160))
    hard = car((200, 100, 300, 130), occ=2)  # 30 px tall, heavily occluded
    dets = [car(easy.bbox, 0.9), car(hard.bbox, 0.8)]
    res = average_precision([dets], [[easy, hard]], "Car", EvalConfig("AP2D", 40))
    assert res.curves[E].n_gt == 1 and res.curves[H].n_gt == 2
    # at Easy the hard car is ignored: its detection neither helps nor hurts
    assert res.ap[E] == 1.0 and res.ap[H] == 1.0


def test_aos_similarity():
    g = car((0, 100, 100, 160), ry=0.5)
    det = car((0, 100, 100, 160), 1.0, ry=0.5 + math.pi / 2)
    res = average_precision([[det]], [[g]], "Car", EvalConfig("AOS", 40))
    assert res.ap[M] == pytest.approx(0.5)
    flipped = car((0, 100, 100, 160), 1.0, ry=0.5 + math.pi)
    assert average_precision([[flipped]], [[g]], "Car", EvalConfig("AOS", 40)).ap[M] == pytest.approx(0.0, abs=1e-12)

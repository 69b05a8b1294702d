import itertools
import os

import numpy as np
import pytest

import ctn3d

DATA = os.environ.get("CTN_TEST_DATA", os.path.join(os.path.dirname(__file__), "..", "..", "tests", "data"))


def brute_fps(p, count):
    c = p.mean(axis=0)
    d0 = ((p - c) ** 2).sum(axis=1)
    best = max(range(len(p)), key=lambda i: (d0[i], tuple(-p[i]), -i))
    picked = [best]
    dist = ((p - p[best]) ** 2).sum(axis=1)
    while len(picked) < count:
        nxt = int(np.argmax(dist))
        picked.append(nxt)
        dist = np.minimum(dist, ((p - p[nxt]) ** 2).sum(axis=1))
    return picked


def test_fps_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(2, 40))
        p = rng.uniform(-1, 1, size=(n, 3))
        s = int(rng.integers(1, n + 1))
        assert list(ctn3d.fps(p, s)) == brute_fps(p, s)


def test_fps_line_example():
    p = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
    picked = ctn3d.fps(p, 2)
    assert sorted(picked.tolist()) == [0, 3]


def test_ball_query_rows():
    p = np.array([[0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [5, 0, 0]], dtype=float)
    rows = ctn3d.ball_query(p, [0, 3], radius=0.15, members=3)
    assert rows.shape == (2, 3)
    assert rows[0].tolist() == [0, 1, 1]
    assert rows[1].tolist() == [3, 3, 3]


def test_knn_rows():
    p = np.array([[0, 0, 0], [1, 0, 0], [3, 0, 0]], dtype=float)
    assert ctn3d.knn(p, [0], members=3)[0].tolist() == [0, 1, 2]


def test_metrics_recount():
    labels = [0, 0, 1, 1, 1, 2]
    predicted = [0, 1, 1, 1, 0, 2]
    m = ctn3d.metrics(labels, predicted, 3)
    assert m["overall_accuracy"] == pytest.approx(4 / 6)
    assert m["mean_accuracy"] == pytest.approx((0.5 + 2 / 3 + 1.0) / 3)
    assert m["confusion"][1] == [1, 2, 0]


def test_costs_match_model_and_budget():
    model = ctn3d.Model(points=64, classes=5, scales=3, seed=2)
    costs = ctn3d.count_costs(points=64, classes=5)
    assert costs["parameters"] == model.parameter_count
    multi = ctn3d.count_costs()
    single = ctn3d.count_costs(scales=1)
    assert abs(multi["parameters"] / 4.22e6 - 1) <= 0.3
    assert single["parameters"] < multi["parameters"]
    assert single["flops"] < multi["flops"]


@pytest.mark.parametrize("mechanism,op", list(itertools.product(["basic", "pa"], ["dot", "sub"])))
def test_logits_permutation_invariant(mechanism, op):
    pos, nrm, labels, names = ctn3d.synth(per_class=1, points=128, seed=4, classes=2)
    assert pos.shape == (2, 128, 3) and labels.tolist() == [0, 1] and len(names) == 2
    model = ctn3d.Model(points=128, classes=2, mechanism=mechanism, operator=op, seed=9)
    perm = np.random.default_rng(0).permutation(128)
    a = model.logits(pos, nrm)
    b = model.logits(pos[:, perm], nrm[:, perm])
    assert a.shape == (2, 2)
    assert np.abs(a - b).max() < 1e-5


def test_saliency_range():
    pos, nrm, _, _ = ctn3d.synth(per_class=1, points=128, seed=5, classes=1)
    model = ctn3d.Model(points=128, classes=3, seed=1)
    scores, degenerate = model.saliency(pos[0], nrm[0], target=1)
    assert scores.shape == (128,)
    assert degenerate or (scores.min() >= 0 and scores.max() == pytest.approx(1.0))


def test_load_and_normalize_fixture():
    pos, nrm = ctn3d.load_cloud(os.path.join(DATA, "cube.off"))
    assert pos.shape == (8, 3) and nrm.shape == (8, 3)
    p, _ = ctn3d.normalize(pos, nrm)
    assert np.abs(p.mean(axis=0)).max() < 1e-12
    assert np.linalg.norm(p, axis=1).max() == pytest.approx(1.0)


def test_bad_shapes_raise():
    with pytest.raises(ValueError):
        ctn3d.fps(np.zeros((4, 2)), 1)
    with pytest.raises(ValueError):
        ctn3d.Model(points=64, classes=2, operator="nope")


def test_grad_suite_ops_pass():
    cases = ctn3d.grad_suite("ops")
    assert cases and all(c["passed"] for c in cases)

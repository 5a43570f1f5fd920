"""Smoke tests for the python bindings."""

import numpy as np
import pytest

import covmerge


def test_flops_reference_values():
    assert covmerge.flops("actmat", 2, 10) == (7400, 0)
    assert covmerge.flops("average", 3, 10) == (300, 0)
    assert covmerge.flops("regmean", 2, 10, 100) == (5200, 39800)
    assert covmerge.expensive_ops("tsv", 8) == 10
    with pytest.raises(ValueError):
        covmerge.flops("ties", 1, 1)


def test_pinv_and_angles():
    p = covmerge.pinv(np.diag([4.0, 0.0]))
    assert np.allclose(p, np.diag([0.25, 0.0]))
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert covmerge.angular_distance(a, 2.0 * a) == 0.0
    assert covmerge.angular_distance(np.diag([1.0, 0.0]), np.diag([0.0, 1.0])) == pytest.approx(
        np.pi / 2
    )


def test_svd_reconstruction():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 3))
    u, s, vt = covmerge.svd(a)
    assert np.allclose(u @ np.diag(s) @ vt, a)


def test_merge_rules_match_numpy():
    rng = np.random.default_rng(1)
    ws = [rng.normal(size=(3, 3)) for _ in range(3)]
    assert np.allclose(covmerge.merge_average(ws), sum(ws) / 3.0)

    w0 = rng.normal(size=(3, 3))
    deltas = [rng.normal(size=(3, 3)) for _ in range(2)]
    assert np.allclose(
        covmerge.merge_task_arithmetic(w0, deltas, 0.4), w0 + 0.4 * (deltas[0] + deltas[1])
    )


def test_interference_merge_against_descent_oracle():
    rng = np.random.default_rng(2)
    ws, cs = [], []
    for _ in range(3):
        ws.append(rng.normal(size=(4, 4)))
        m = rng.normal(size=(4, 4))
        cs.append(m.T @ m + 0.2 * np.eye(4))
    closed = covmerge.merge_interference(ws, cs)
    oracle = covmerge.brute_force_minimizer(ws, cs)
    assert np.linalg.norm(closed - oracle) <= 1e-6 * max(1.0, np.linalg.norm(closed))


def test_actmat_equals_interference_on_gram():
    rng = np.random.default_rng(3)
    ws = [rng.normal(size=(4, 5)) for _ in range(2)]
    deltas = [rng.normal(size=(4, 5)) for _ in range(2)]
    cs = [covmerge.actmat_gram(d) for d in deltas]
    a = covmerge.merge_actmat(ws, deltas)
    b = covmerge.merge_interference(ws, cs)
    assert np.array_equal(a, b)


def test_checkpoint_roundtrip(tmp_path):
    ckpt = covmerge.Checkpoint()
    ckpt.name = "demo"
    ckpt.set("layers.0.weight", np.arange(6, dtype=np.float64).reshape(2, 3))
    ckpt.set("embed.weight", np.ones((2, 2), dtype=np.float32))
    path = tmp_path / "demo.ckpt.st"
    covmerge.save_checkpoint(ckpt, path)
    back = covmerge.load_checkpoint(path)
    assert back == ckpt
    assert back.get("embed.weight").dtype == np.float32
    assert np.array_equal(back.get("layers.0.weight"), ckpt.get("layers.0.weight"))


def test_checkpoint_level_merge():
    rng = np.random.default_rng(4)
    pre = covmerge.Checkpoint()
    pre.set("layers.0.weight", rng.normal(size=(3, 3)))
    pre.set("embed.weight", rng.normal(size=(2, 3)))
    experts = []
    for _ in range(2):
        e = covmerge.Checkpoint()
        e.set("layers.0.weight", rng.normal(size=(3, 3)))
        e.set("embed.weight", rng.normal(size=(2, 3)))
        experts.append(e)
    merged, warnings = covmerge.merge_checkpoints(pre, experts, "actmat")
    assert warnings == []
    embed = (experts[0].get("embed.weight") + experts[1].get("embed.weight")) / 2.0
    assert np.allclose(merged.get("embed.weight"), embed)

    tv = covmerge.compute_task_vector(pre, experts[0], "t0")
    assert set(tv.tensor_names()) == {"layers.0.weight", "embed.weight"}
    assert np.allclose(
        tv.get("layers.0.weight"),
        experts[0].get("layers.0.weight") - pre.get("layers.0.weight"),
    )


def test_malformed_container_raises(tmp_path):
    path = tmp_path / "bad.ckpt.st"
    path.write_bytes(b"\x00")
    with pytest.raises(covmerge.FormatError):
        covmerge.load_checkpoint(path)

import numpy as np
import pytest
from hypothesis import given, strategies as st

from phgcn import gcnnet
from phgcn.dataset import PartitionSpec
from phgcn.gcnnet import (
    CheckpointError, ModelParams, appearance_project, backward, forward, fuse, gcn_layer,
    init_params, part_loss, read_checkpoint, write_checkpoint,
)
from phgcn.partgraph import build_topology, normalized_adjacency

TOPO = build_topology(PartitionSpec())


def instance(seed, d0=6, C=3, hidden=8, beta=0.3):
    r = np.random.default_rng(seed)
    x = r.normal(size=(10, d0))
    A = normalized_adjacency(x, TOPO)
    params = init_params(d0, C, seed, hidden=hidden, beta=beta, dtype=np.float64)
    params.b[:] = 0.1 * r.normal(size=params.b.shape)
    return params, x, A, int(r.integers(C))


def numeric_grads(params, x, A, label, h=1e-6, use_gcn=True):
    """Plain central differences over every coordinate (small models only)."""
    out = {}
    for name, value in params.tensors().items():
        g = np.zeros_like(value)
        flat, gflat = value.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = forward(x, A, params, label, use_gcn).loss
            flat[k] = orig - h
            down = forward(x, A, params, label, use_gcn).loss
            flat[k] = orig
            gflat[k] = (up - down) / (2 * h)
        out[name] = g
    return out


# --- init -------------------------------------------------------------------


def test_init_deterministic_and_bounded():
    a, b = init_params(16, 4, seed=5), init_params(16, 4, seed=5)
    for name in a.tensors():
        assert np.array_equal(a.tensors()[name], b.tensors()[name])
    assert np.all(a.b == 0)
    assert np.abs(a.theta[0]).max() <= 1 / np.sqrt(16)
    assert np.abs(a.theta[1]).max() <= 1 / np.sqrt(256)
    assert [t.shape for t in a.theta] == [(16, 256), (256, 256)]
    assert a.proj.shape == (16, 256) and a.W.shape == (10, 256, 4)
    assert not np.array_equal(a.theta[0], init_params(16, 4, seed=6).theta[0])


def test_eps_must_be_open_interval():
    p = init_params(4, 2, 0, hidden=4)
    with pytest.raises(ValueError):
        ModelParams(p.theta, p.proj, p.W, p.b, eps=1.0)


# --- layers -----------------------------------------------------------------


def test_gcn_layer_endpoints(rng):
    H = np.abs(rng.normal(size=(10, 5)))
    A = normalized_adjacency(rng.normal(size=(10, 3)), TOPO)
    eye = np.eye(5)
    assert np.array_equal(gcn_layer(H, A, eye, 0.0)[1], H)
    np.testing.assert_allclose(gcn_layer(H, A, eye, 1.0)[1], A @ H, atol=1e-12)


def test_gcn_layer_hand_example():
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    pre, out = gcn_layer(np.array([[1.0], [3.0]]), A, np.array([[2.0]]), 0.75)
    np.testing.assert_allclose(pre, [[5.0], [3.0]])
    np.testing.assert_allclose(out, [[5.0], [3.0]])


def test_gcn_layer_activation_flag():
    A = np.eye(2)
    pre, out = gcn_layer(np.array([[1.0], [-1.0]]), A, np.array([[1.0]]), 0.5, activate=False)
    assert np.array_equal(pre, out)
    assert gcn_layer(np.array([[1.0], [-1.0]]), A, np.array([[1.0]]), 0.5)[1][1, 0] == 0


def test_gcn_layer_shape_mismatch():
    with pytest.raises(ValueError):
        gcn_layer(np.zeros((10, 3)), np.eye(10), np.zeros((4, 2)), 0.5)


def test_appearance_projection(rng):
    X = rng.normal(size=(10, 8))
    assert np.all(appearance_project(X, np.zeros((8, 256))) == 0)
    Xp = np.abs(rng.normal(size=(10, 256)))
    assert np.array_equal(appearance_project(Xp, np.eye(256)), Xp)
    X1, X2, P = rng.normal(size=(10, 8)), rng.normal(size=(10, 8)), rng.normal(size=(8, 4))
    np.testing.assert_allclose((X1 + X2) @ P, X1 @ P + X2 @ P, atol=1e-12)


def test_fuse_examples():
    np.testing.assert_allclose(fuse(np.array([[1.0, 2.0]]), np.array([[10.0, 20.0]]), 0.3), [[4.0, 8.0]])
    H, F = np.ones((3, 2)), np.full((3, 2), 5.0)
    assert np.array_equal(fuse(H, F, 0.0), H)
    assert np.array_equal(fuse(np.zeros((3, 2)), F, 0.3), 0.3 * F)
    with pytest.raises(ValueError):
        fuse(np.zeros((3, 2)), np.zeros((2, 3)), 0.3)


# --- loss -------------------------------------------------------------------


def test_uniform_logits_loss_is_log_c():
    per, agg = part_loss(np.zeros((10, 4)), 2)
    np.testing.assert_allclose(per, np.log(4))
    assert agg == pytest.approx(1.38629436111989061883446424292)


def test_saturated_margin():
    logits = np.zeros((1, 5))
    logits[0, 3] = 100.0
    per, _ = part_loss(logits, 3)
    assert per[0] < 1e-40


def test_aggregate_is_mean():
    # two-class logits (0, m) give loss log(1 + e^-m); pick m for losses 0.2 and 0.4
    margins = [-np.log(np.expm1(0.2)), -np.log(np.expm1(0.4))]
    logits = np.array([[0.0, m] for m in margins])
    per, agg = part_loss(logits, 1)
    np.testing.assert_allclose(per, [0.2, 0.4], rtol=1e-12)
    assert agg == pytest.approx(0.3, rel=1e-12)


def test_label_out_of_range():
    with pytest.raises(ValueError):
        part_loss(np.zeros((10, 3)), 3)


@given(st.floats(-1e3, 1e3), st.integers(0, 9))
def test_shift_invariance(c, part):
    logits = np.random.default_rng(part).normal(size=(10, 4))
    shifted = logits.copy()
    shifted[part] += c
    np.testing.assert_allclose(part_loss(shifted, 1)[0], part_loss(logits, 1)[0], atol=1e-9)


# --- forward ----------------------------------------------------------------


def test_forward_shapes(rng):
    x = rng.normal(size=(10, 32))
    params = init_params(32, 4, 0)
    trace = forward(x, normalized_adjacency(x, TOPO), params, 1)
    assert trace.logits.shape == (10, 4)
    assert [h.shape[1] for h in trace.H] == [32, 256, 256]
    assert trace.Z.shape == (10, 256)
    assert all(np.all(h >= 0) for h in trace.H[1:])


def test_zero_path_gives_biases(rng):
    params, x, A, label = instance(0, beta=0.0)
    for th in params.theta:
        th[:] = 0
    trace = forward(x, A, params, label)
    assert np.all(trace.Z == 0)
    assert np.array_equal(trace.logits, params.b)


def test_no_gcn_forward_uses_appearance_only():
    params, x, A, label = instance(1)
    trace = forward(x, A, params, label, use_gcn=False)
    assert np.array_equal(trace.Z, trace.F)
    perm = forward(x, np.roll(A, 3, axis=1), params, label, use_gcn=False)
    assert perm.loss == trace.loss


def test_eps_zero_without_appearance_ignores_edges(rng):
    params, x, A, label = instance(2, beta=0.0)
    params.eps = 0.0  # bypasses the open-interval check on purpose
    other = normalized_adjacency(rng.normal(size=(10, 6)), TOPO)[rng.permutation(10)]
    assert forward(x, A, params, label).loss == forward(x, other, params, label).loss


# --- backward ---------------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("use_gcn", [True, False])
def test_backward_matches_full_finite_differences(seed, use_gcn):
    params, x, A, label = instance(seed)
    analytic = backward(forward(x, A, params, label, use_gcn), A, params, x)
    numeric = numeric_grads(params, x, A, label, use_gcn=use_gcn)
    for name in analytic:
        assert analytic[name].shape == params.tensors()[name].shape
        np.testing.assert_allclose(analytic[name], numeric[name], atol=1e-7, rtol=1e-5, err_msg=name)


def test_gcn_gradients_zero_without_gcn():
    params, x, A, label = instance(4)
    g = backward(forward(x, A, params, label, use_gcn=False), A, params, x)
    assert all(np.all(g[f"theta{t}"] == 0) for t in range(2))


def test_dead_appearance_path_has_zero_gradient():
    params, x, A, label = instance(5, beta=0.0)
    g = backward(forward(x, A, params, label), A, params, x)
    assert np.all(g["proj"] == 0)


def test_stationary_at_minimum():
    params, x, A, label = instance(6)
    params.W[:] = 0
    params.b[:] = 0
    params.b[:, label] = 60.0
    g = backward(forward(x, A, params, label), A, params, x)
    assert np.abs(g["W"]).max() < 1e-20 and np.abs(g["b"]).max() < 1e-20


def test_batched_gradients_are_sample_means():
    r = np.random.default_rng(7)
    params = init_params(6, 3, 7, hidden=8, dtype=np.float64)
    X = r.normal(size=(4, 10, 6))
    A = normalized_adjacency(X, TOPO)
    y = np.array([0, 2, 1, 2])
    batched = backward(forward(X, A, params, y), A, params, X)
    singles = [backward(forward(X[i], A[i], params, y[i]), A[i], params, X[i]) for i in range(4)]
    for name in batched:
        np.testing.assert_allclose(batched[name], np.mean([s[name] for s in singles], axis=0), atol=1e-14)
    assert forward(X, A, params, y).loss == pytest.approx(
        np.mean([forward(X[i], A[i], params, y[i]).loss for i in range(4)]), rel=1e-14)


# --- checkpoint -------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    params = init_params(16, 4, 3)
    params.b[:] = np.arange(40, dtype=np.float32).reshape(10, 4)
    write_checkpoint(params, tmp_path / "m.phgm", {"variant": "phgcn"})
    back, meta = read_checkpoint(tmp_path / "m.phgm")
    for name, value in params.tensors().items():
        assert back.tensors()[name].tobytes() == value.tobytes()
    assert meta["variant"] == "phgcn" and meta["eps"] == 0.75 and meta["beta"] == pytest.approx(0.3)
    write_checkpoint(back, tmp_path / "n.phgm", {"variant": "phgcn"})
    assert (tmp_path / "n.phgm").read_bytes() == (tmp_path / "m.phgm").read_bytes()


def test_checkpoint_header(tmp_path):
    write_checkpoint(init_params(16, 4, 3), tmp_path / "m.phgm")
    raw = (tmp_path / "m.phgm").read_bytes()
    assert raw[:4] == b"PHGM"
    assert np.frombuffer(raw[4:36], "<u4").tolist() == [1, 2, 16, 256, 256, 256, 10, 4]
    tensors = 16 * 256 + 256 * 256 + 16 * 256 + 10 * 256 * 4 + 10 * 4
    assert len(raw) == 36 + 4 * tensors


def test_checkpoint_errors(tmp_path):
    write_checkpoint(init_params(4, 2, 0, hidden=8), tmp_path / "m.phgm")
    raw = (tmp_path / "m.phgm").read_bytes()
    (tmp_path / "bad.phgm").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "bad.phgm")
    (tmp_path / "short.phgm").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(tmp_path / "short.phgm")

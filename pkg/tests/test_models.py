import numpy as np
import pytest

from pst import tensor as T
from pst.models import FIG_ROLES, build_mlp, build_tiny_transformer
from pst.optim import AdamW, ParamGroup, clip_grad_norm
from pst.tasks import Dataset, export_csv, gen_planted_teacher, gen_sequence_task, import_csv
from pst.tensor import Tensor

from conftest import central_diff, rel_err


# -- tasks -------------------------------------------------------------------------

def test_planted_teacher_is_realizable():
    task = gen_planted_teacher(8, 6, 50, 0.7, 0.0, seed=3)
    for ds in (task.train, task.test):
        np.testing.assert_allclose(task.teacher @ ds.x, ds.y, atol=1e-12)


def test_null_teacher_error_is_noise_variance():
    task = gen_planted_teacher(10, 10, 20000, 1.0, 0.3, seed=1)
    assert not task.teacher.any()
    assert abs(np.mean(task.train.y ** 2) - 0.09) < 0.09 * 0.03


@pytest.mark.parametrize("p", [0.0, 0.5, 0.9, 0.97])
def test_teacher_sparsity(p):
    task = gen_planted_teacher(64, 64, 10, p, 0.1, seed=0)
    assert abs(np.count_nonzero(task.teacher) / 4096 - (1 - p)) <= 0.01


def test_generators_are_pure_and_split_disjoint():
    a = gen_planted_teacher(5, 4, 40, 0.5, 0.1, seed=9, shift_rank=2)
    b = gen_planted_teacher(5, 4, 40, 0.5, 0.1, seed=9, shift_rank=2)
    np.testing.assert_array_equal(a.train.x, b.train.x)
    np.testing.assert_array_equal(a.pretrained, b.pretrained)
    assert a.kind == "lowrank_shift"
    assert len(a.train) + len(a.test) == 40
    train_cols = {tuple(c) for c in a.train.x.T}
    assert not any(tuple(c) in train_cols for c in a.test.x.T)
    c = gen_planted_teacher(5, 4, 40, 0.5, 0.1, seed=10)
    assert not np.array_equal(a.train.x, c.train.x)


def test_rank_shift_has_the_requested_rank():
    task = gen_planted_teacher(20, 16, 10, 0.9, 0.1, seed=2, shift_rank=2, pretrain_noise=0.0)
    assert np.linalg.matrix_rank(task.teacher - task.pretrained, tol=1e-9) == 2


def test_sequence_task():
    task = gen_sequence_task(6, 5, 60, 3, seed=4)
    assert task.train.seq_len == 5
    assert task.train.x.shape == (6, 48 * 5)
    assert set(np.unique(task.train.y)) <= {0, 1, 2}
    x, y = task.train.batch(np.array([2, 0]))
    np.testing.assert_array_equal(x[:, :5], task.train.x[:, 10:15])
    np.testing.assert_array_equal(y, task.train.y[[2, 0]])


@pytest.mark.parametrize("make", [
    lambda: gen_planted_teacher(3, 4, 12, 0.5, 0.1, seed=5).train,
    lambda: gen_sequence_task(4, 3, 10, 2, seed=5).train,
])
def test_csv_round_trip(tmp_path, make):
    ds = make()
    export_csv(ds, tmp_path / "d.csv")
    back = import_csv(tmp_path / "d.csv")
    assert back.seq_len == ds.seq_len
    np.testing.assert_array_equal(back.x, ds.x)
    np.testing.assert_array_equal(back.y, ds.y)
    header = (tmp_path / "d.csv").read_text().splitlines()[0].split(",")
    assert header[0].startswith("x") and not header[-1].startswith("x")


def test_dataset_shape_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 5)), np.zeros((2, 4)))


# -- models ------------------------------------------------------------------------

def test_mlp_dims_and_dense_reference():
    rng = np.random.default_rng(0)
    m = build_mlp([5, 7, 3], seed=1, criterion="pst", activation="relu")
    assert [l.shape for l in m.sparse_layers()] == [(7, 5), (3, 7)]
    for l in m.sparse_layers():
        l.state.V.data = rng.normal(size=l.state.V.shape)
    x = rng.normal(size=(5, 4))
    h = x
    for i, l in enumerate(m.sparse_layers()):
        s = l.state
        h = (s.w0 + s.U.data @ s.V.data) @ h + l.bias.data
        if i == 0:
            h = np.maximum(h, 0)
    np.testing.assert_allclose(m.predict(x, 0.0), h, atol=1e-12)


def test_transformer_shapes_and_roles():
    m = build_tiny_transformer(16, seed=0, seq_len=4, n_classes=3, n_blocks=2)
    x = Tensor(np.random.default_rng(1).normal(size=(16, 8 * 4)))
    enc = m.encode(x, 0.5)
    _, pool = m._masks(x.cols)
    assert T.matmul(enc, pool).shape == (16, 8)  # d x batch
    assert m.forward(x, 0.5).shape == (3, 8)
    masks = m.role_masks(0.5)
    assert {m.layer(n).role for n in masks} == set(FIG_ROLES)
    assert len(masks) == 8
    assert m.layer("block0.ffn.input").shape == (64, 16)
    assert m.layer("block1.ffn.output").shape == (16, 64)
    with pytest.raises(ValueError):
        build_tiny_transformer(3, seed=0)


def test_transformer_sequences_do_not_interact():
    m = build_tiny_transformer(8, seed=2, seq_len=3, n_classes=2, criterion="map")
    rng = np.random.default_rng(3)
    x = rng.normal(size=(8, 6))
    out = m.predict(x, 0.0)
    x2 = x.copy()
    x2[:, 3:] = rng.normal(size=(8, 3))
    np.testing.assert_allclose(m.predict(x2, 0.0)[:, 0], out[:, 0], atol=1e-12)


def test_transformer_all_dense_equals_reference():
    # sparsity 0 with MaP is the plain dense network
    m = build_tiny_transformer(4, seed=5, seq_len=2, n_classes=2, criterion="map")
    x = np.random.default_rng(0).normal(size=(4, 4))
    np.testing.assert_array_equal(m.predict(x, 0.0), m.predict(x, 0.0))
    for l in m.sparse_layers():
        l(Tensor(np.zeros((l.shape[1], 1))), 0.0)
        assert l.last.mask.v == l.shape[0] * l.shape[1]


def _transformer_fd(criterion, pick=lambda name: True):
    rng = np.random.default_rng(11)
    m = build_tiny_transformer(4, seed=3, seq_len=3, n_classes=3, criterion=criterion)
    for _, t, _ in m.parameters():
        t.data = t.data + rng.uniform(-0.2, 0.2, t.shape)
    x = rng.uniform(-1, 1, (4, 2 * 3))
    y = np.array([0, 2])
    with T.Tape() as tape:
        loss = m.loss(x, y, 0.0)
    grads = T.backward(tape, loss)
    worst = 0.0
    for name, t, _ in m.parameters():
        if not pick(name):
            continue
        fd = central_diff(lambda: m.loss(x, y, 0.0).item(), t.data)
        worst = max(worst, rel_err(grads[t], fd))
    return worst


def test_dense_transformer_gradient_check():
    assert _transformer_fd("map") < 1e-3


@pytest.mark.parametrize("build", [
    lambda c: build_mlp([6, 5, 4, 3], seed=1, criterion=c),
    lambda c: build_tiny_transformer(4, seed=1, seq_len=2, n_blocks=2, criterion=c),
])
def test_initial_weights_do_not_depend_on_criterion(build):
    def weights(m):
        return [l.state.w0 if l.state else l.weight.data for l in m.sparse_layers()]
    ref = weights(build("map"))
    for c in ("pst", "mvp", "random"):
        for a, b in zip(weights(build(c)), ref):
            np.testing.assert_array_equal(a, b)


def test_state_tensor_round_trip():
    a = build_mlp([4, 3], seed=0, criterion="mvp", head_dim=2)
    b = build_mlp([4, 3], seed=1, criterion="mvp", head_dim=2)
    b.load_state_tensors(a.state_tensors())
    for k, v in a.state_tensors().items():
        np.testing.assert_array_equal(b.state_tensors()[k], v)
    with pytest.raises(KeyError):
        b.load_state_tensors({})


# -- optimizer -----------------------------------------------------------------------

def test_adamw_matches_reference_update():
    w = Tensor(np.array([[1.0, -2.0]]))
    opt = AdamW({"g": ParamGroup({"w": w}, weight_decay=0.1, lr_scale=0.5)})
    g = np.array([[0.3, -0.4]])
    ref = w.data.copy()
    m = v = np.zeros_like(ref)
    for t in range(1, 4):
        lr = 0.01 * 0.5
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref * (1 - lr * 0.1)
        ref = ref - lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        opt.step({"w": g}, 0.01)
    np.testing.assert_allclose(w.data, ref, rtol=0, atol=1e-15)


def test_adamw_rejects_duplicates():
    t = T.zeros(1, 1)
    with pytest.raises(ValueError):
        AdamW({"a": ParamGroup({"x": t}), "b": ParamGroup({"x": t})})


def test_clip_grad_norm():
    grads = {"a": np.array([[3.0]]), "b": np.array([[4.0]])}
    assert clip_grad_norm(grads, 1.0) == 5.0
    assert abs(np.sqrt(grads["a"] ** 2 + grads["b"] ** 2).item() - 1.0) < 1e-9
    small = {"a": np.array([[0.1]])}
    clip_grad_norm(small, 1.0)
    assert small["a"].item() == 0.1

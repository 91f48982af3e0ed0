import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.special import expit

from app.services.heads import (FeatureAdaptationHead, OrthogonalFunctionHead, StructureAdaptationHead,
                                fa_forward, head_from_dict, legendre_eval, ofa_forward, sa_forward,
                                treatment_to_scalar)
from app.services.numkit import DenseNet, finite_diff_grad, max_relative_error
from common.errors import ContractError, ShapeError


def _zero_net(net):
    for p in net.parameters():
        p[...] = 0.0


@pytest.mark.parametrize('index, expected', [(0, -1.0), (4, 1.0), (2, 0.0)])
def test_treatment_to_scalar(index, expected):
    assert treatment_to_scalar(index, 5) == expected


def test_treatment_to_scalar_out_of_range():
    with pytest.raises(ContractError):
        treatment_to_scalar(5, 5)
    with pytest.raises(ContractError):
        treatment_to_scalar(0, 1)


def test_legendre_examples():
    assert np.allclose(legendre_eval(1, 0.7), [1.0, 0.7])
    assert np.allclose(legendre_eval(2, 0.5), [1.0, 0.5, -0.125])
    for p in range(9):
        assert np.allclose(legendre_eval(p, 1.0), 1.0)


def test_legendre_closed_forms():
    t = np.linspace(-1, 1, 100)
    values = legendre_eval(3, t)
    assert np.max(np.abs(values[:, 2] - (3 * t ** 2 - 1) / 2)) < 1e-12
    assert np.max(np.abs(values[:, 3] - (5 * t ** 3 - 3 * t) / 2)) < 1e-12


def test_legendre_orthogonality():
    t = np.linspace(-1, 1, 100_000)
    values = legendre_eval(8, t)
    for j in range(9):
        for k in range(9):
            integral = trapezoid(values[:, j] * values[:, k], t)
            if j == k:
                assert integral == pytest.approx(2 / (2 * j + 1), abs=1e-6)
            else:
                assert abs(integral) < 1e-6


def test_fa_zero_weights_give_bias():
    head = FeatureAdaptationHead.build(3, 4, (5,), seed=0)
    _zero_net(head.net)
    head.net.layers[-1].bias[...] = 0.7
    phi = np.random.default_rng(0).standard_normal((6, 3))
    assert np.allclose(fa_forward(head, phi, np.arange(6) % 4), 0.7)


def test_fa_treatment_channel_ablation():
    head = FeatureAdaptationHead.build(3, 4, (), seed=1)
    phi = np.tile(np.random.default_rng(1).standard_normal((1, 3)), (2, 1))
    t = np.array([0, 2])
    logits = fa_forward(head, phi, t)
    assert logits[0] != logits[1]
    head.net.layers[0].weight[3:] = 0.0
    logits = fa_forward(head, phi, t)
    assert logits[0] == pytest.approx(logits[1])


def test_fa_hand_set_affine():
    head = FeatureAdaptationHead.build(2, 3, (), seed=0)
    head.net.layers[0].weight[:, 0] = [1.0, -1.0, 0.5, 2.0, -3.0]
    head.net.layers[0].bias[...] = 0.25
    logits = fa_forward(head, np.array([[2.0, 1.0]]), np.array([1]))
    # concat = [2, 1, 0, 1, 0]
    assert logits[0] == pytest.approx(2.0 - 1.0 + 2.0 + 0.25)


def test_sa_constant_bias_branches():
    head = StructureAdaptationHead.build(3, 5, (4,), seed=0)
    for k, branch in enumerate(head.branches):
        _zero_net(branch)
        branch.layers[-1].bias[...] = float(k) - 2.0
    phi = np.random.default_rng(0).standard_normal((10, 3))
    t = np.arange(10) % 5
    assert np.allclose(sa_forward(head, phi, t), t - 2.0)
    probs = expit(head.logits_all(phi))
    assert np.allclose(probs, expit(np.arange(5) - 2.0)[None, :])


def test_sa_identical_branches_ignore_treatment():
    head = StructureAdaptationHead.build(3, 4, (4,), seed=0)
    for branch in head.branches[1:]:
        for p, src in zip(branch.parameters(), head.branches[0].parameters()):
            p[...] = src
    phi = np.tile(np.random.default_rng(2).standard_normal((1, 3)), (4, 1))
    logits = sa_forward(head, phi, np.arange(4))
    assert np.allclose(logits, logits[0])


def test_sa_gradient_isolation():
    head = StructureAdaptationHead.build(3, 5, (4,), seed=3)
    phi = np.random.default_rng(3).standard_normal((1, 3))
    t = np.array([2])
    logits, cache = head.forward(phi, t)
    grads, _ = head.backward(cache, np.ones(1))
    per_branch = len(head.branches[0].parameters())
    branch3 = grads[3 * per_branch:4 * per_branch]
    assert all(np.all(g == 0) for g in branch3)
    numeric = finite_diff_grad(lambda: float(sa_forward(head, phi, t).sum()),
                               head.branches[3].parameters())
    assert all(np.all(g == 0) for g in numeric)
    assert any(np.any(g != 0) for g in grads[2 * per_branch:3 * per_branch])


def test_ofa_degree_zero_ignores_treatment():
    head = OrthogonalFunctionHead.build(3, 5, (4,), degree=0, seed=0)
    phi = np.random.default_rng(0).standard_normal((7, 3))
    probs = expit(head.logits_all(phi))
    assert np.allclose(probs, probs[:, :1])


def test_ofa_plugs_coefficients():
    head = OrthogonalFunctionHead.build(2, 5, (), degree=1, seed=0)
    _zero_net(head.net)
    head.net.layers[-1].bias[...] = [0.5, 2.0]
    logits = ofa_forward(head, np.zeros((1, 2)), np.array([0]))
    assert logits[0] == pytest.approx(-1.5)


def test_ofa_zero_coefficients():
    head = OrthogonalFunctionHead.build(3, 5, (4,), seed=0)
    _zero_net(head.net)
    phi = np.random.default_rng(1).standard_normal((5, 3))
    assert np.all(head.logits_all(phi) == 0)


def _count_network_work(monkeypatch):
    """记录每次 DenseNet.forward 的调用次数与乘加次数"""
    work = {'calls': 0, 'rows': 0, 'mac': 0}
    original = DenseNet.forward

    def counting_forward(net, batch):
        rows = np.asarray(batch).shape[0]
        work['calls'] += 1
        work['rows'] += rows
        work['mac'] += rows * sum(layer.n_in * layer.n_out for layer in net.layers)
        return original(net, batch)

    monkeypatch.setattr(DenseNet, 'forward', counting_forward)
    return work


def test_ofa_forward_work_independent_of_arms(monkeypatch):
    phi = np.random.default_rng(0).standard_normal((40, 16))
    measured = {}
    for m in (5, 50):
        head = OrthogonalFunctionHead.build(16, m, (8, 8), degree=4, seed=0)
        t = np.arange(40) % m
        work = _count_network_work(monkeypatch)
        logits, (_, basis) = head.forward(phi, t)
        monkeypatch.undo()
        assert logits.shape == (40,)
        # 每行只做一次系数网络求值，基函数按行取 p+1 个
        assert work['calls'] == 1 and work['rows'] == 40
        assert basis.shape == (40, 5)
        measured[m] = work['mac']
    assert measured[5] == measured[50]
    assert OrthogonalFunctionHead.build(16, 5, (8,), seed=0).degree == 4


def test_sa_forward_runs_one_branch_per_present_arm(monkeypatch):
    phi = np.random.default_rng(0).standard_normal((40, 16))
    head = StructureAdaptationHead.build(16, 5, (8, 8), seed=0)
    work = _count_network_work(monkeypatch)
    head.forward(phi, np.arange(40) % 3)
    assert work['calls'] == 3
    assert work['rows'] == 40


def test_ofa_initial_edge_logits_match_single_output_branch_scale():
    phi = np.random.default_rng(0).standard_normal((500, 6))
    ofa, sa = [], []
    for seed in range(20):
        ofa.append(OrthogonalFunctionHead.build(6, 5, (16,), seed=seed).logits_all(phi)[:, [0, 4]].var(axis=0))
        sa.append(StructureAdaptationHead.build(6, 5, (16,), seed=seed).logits_all(phi)[:, [0, 4]].var(axis=0))
    ratio = np.mean(ofa) / np.mean(sa)
    assert 0.5 < ratio < 2.0


def test_ofa_logits_at_grid_matches_arms():
    head = OrthogonalFunctionHead.build(3, 5, (4,), seed=4)
    phi = np.random.default_rng(4).standard_normal((3, 3))
    all_logits = head.logits_all(phi)
    for k in range(5):
        assert np.allclose(head.logits_at(phi, treatment_to_scalar(k, 5)), all_logits[:, k])
    assert head.logits_at(phi, 0.3).shape == (3,)
    with pytest.raises(ContractError):
        head.logits_at(phi, 1.5)


@pytest.mark.parametrize('kind', ['fa', 'sa', 'ofa'])
def test_heads_interchangeable_shapes(kind):
    builders = {'fa': FeatureAdaptationHead, 'sa': StructureAdaptationHead, 'ofa': OrthogonalFunctionHead}
    head = builders[kind].build(6, 5, (4,), seed=0)
    phi = np.random.default_rng(0).standard_normal((9, 6))
    t = np.arange(9) % 5
    logits, _ = head.forward(phi, t)
    assert logits.shape == (9,)
    assert head.logits_all(phi).shape == (9, 5)
    probs = expit(head.logits_all(phi))
    assert np.all((probs > 0) & (probs < 1))
    clone = head_from_dict(head.to_dict())
    assert np.array_equal(clone.logits_all(phi), head.logits_all(phi))


@pytest.mark.parametrize('kind', ['fa', 'sa', 'ofa'])
def test_head_gradients_match_finite_differences(kind):
    builders = {'fa': FeatureAdaptationHead, 'sa': StructureAdaptationHead, 'ofa': OrthogonalFunctionHead}
    head = builders[kind].build(3, 3, (4,), seed=5)
    rng = np.random.default_rng(5)
    phi = rng.standard_normal((6, 3))
    t = np.arange(6) % 3
    direction = rng.standard_normal(6)
    logits, cache = head.forward(phi, t)
    grads, dphi = head.backward(cache, direction)
    loss = lambda: float(np.dot(head.forward(phi, t)[0], direction))  # noqa: E731
    assert max_relative_error(grads, finite_diff_grad(loss, head.parameters())) < 1e-4
    assert max_relative_error([dphi], finite_diff_grad(loss, [phi])) < 1e-4


def test_head_shape_mismatch():
    head = StructureAdaptationHead.build(3, 2, (2,), seed=0)
    with pytest.raises(ShapeError):
        head.forward(np.zeros((2, 4)), np.array([0, 1]))
    with pytest.raises(ShapeError):
        head.forward(np.zeros((2, 3)), np.array([0]))

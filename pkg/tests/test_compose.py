import numpy as np
import pytest

from bilipren.bilip import BiLipHyper, direct_parameterize, theta_size
from bilipren.compose import (FactorModel, RenBlock, SandwichModel,
                              allocate_bounds, composed_bounds, factor_forward,
                              sandwich_forward, sandwich_inverse, simulate,
                              wrap_block)
from bilipren.learning import export_block
from bilipren.orthogonal import delay_dyn, make_static, static_forward
from bilipren.ren import RenDims


def make_block(mu, nu, n, q, m, seed, activation="relu") -> RenBlock:
    rng = np.random.default_rng(seed)
    hyper = BiLipHyper(mu=mu, nu=nu, dims=RenDims(n, q, m), activation=activation)
    return export_block(rng.standard_normal(theta_size(hyper.dims)), hyper)


def make_sandwich(depth, mu, nu, n, q, m, seed, activation="relu") -> SandwichModel:
    rng = np.random.default_rng(seed)
    per = allocate_bounds(mu, nu, depth)
    layers = [make_static(rng.standard_normal((m, m)), rng.normal(0, 0.3, m))]
    for k, (a, b) in enumerate(per):
        layers.append(make_block(a, b, n, q, m, seed + 100 + k, activation))
        layers.append(make_static(rng.standard_normal((m, m)), rng.normal(0, 0.3, m)))
    return SandwichModel(layers=layers, mu=mu, nu=nu)


class TestStructure:
    def test_alternation_enforced(self):
        block = make_block(0.5, 2.0, 2, 3, 1, seed=0)
        with pytest.raises(ValueError):
            SandwichModel(layers=[block], mu=0.5, nu=2.0)

    def test_width_mismatch_rejected(self):
        block = make_block(0.5, 2.0, 2, 3, 2, seed=1)
        s1 = make_static(np.zeros((1, 1)), np.zeros(1))
        s2 = make_static(np.zeros((2, 2)), np.zeros(2))
        with pytest.raises(ValueError):
            SandwichModel(layers=[s1, block, s2], mu=0.5, nu=2.0)

    def test_allocation_geometric(self):
        per = allocate_bounds(0.1, 5.0, 4)
        mu = np.prod([a for a, _ in per])
        nu = np.prod([b for _, b in per])
        assert mu == pytest.approx(0.1)
        assert nu == pytest.approx(5.0)
        assert len(set(per)) == 1


class TestForward:
    def test_single_static_layer_reduces(self):
        rng = np.random.default_rng(2)
        layer = make_static(rng.standard_normal((2, 2)), rng.standard_normal(2))
        model = SandwichModel(layers=[layer], mu=1.0, nu=1.0)
        u = rng.standard_normal((10, 2))
        assert np.array_equal(sandwich_forward(model, [], u), static_forward(layer, u))

    def test_zero_model_propagates_biases_only(self):
        m = 2
        identity = make_static(np.zeros((m, m)), np.array([1.0, -1.0]))
        model = SandwichModel(layers=[identity], mu=1.0, nu=1.0)
        y = sandwich_forward(model, [], np.zeros((5, m)))
        assert np.allclose(y, np.array([1.0, -1.0]), atol=0)

    def test_empirical_ratios_within_composed_bounds(self):
        from bilipren.learning import empirical_bilip_probe
        model = make_sandwich(2, 0.25, 4.0, 2, 4, 1, seed=3)
        mu, nu = composed_bounds(model)
        lo, hi = empirical_bilip_probe(model, trials=100, horizon=40, seed=4)
        assert lo >= mu * (1 - 1e-6)
        assert hi <= nu * (1 + 1e-6)


class TestComposedBounds:
    def test_product_rule(self):
        model = make_sandwich(2, 0.25, 4.0, 2, 3, 1, seed=5)
        mu, nu = composed_bounds(model)
        assert mu == pytest.approx(0.25)
        assert nu == pytest.approx(4.0)

    def test_single_block_passthrough(self):
        block = make_block(0.5, 2.0, 2, 3, 1, seed=6)
        assert composed_bounds(wrap_block(block)) == (0.5, 2.0)

    def test_fourth_root_allocation_recovers_composite(self):
        model = make_sandwich(4, 0.1, 5.0, 2, 2, 1, seed=7)
        mu, nu = composed_bounds(model)
        assert mu == pytest.approx(0.1)
        assert nu == pytest.approx(5.0)


class TestInverse:
    def test_identity_stack(self):
        m = 2
        identity = make_static(np.zeros((m, m)), np.zeros(m))
        model = SandwichModel(layers=[identity], mu=1.0, nu=1.0)
        y = np.random.default_rng(8).standard_normal((12, m))
        assert np.array_equal(sandwich_inverse(model, [], y), y)

    @pytest.mark.parametrize("depth", [1, 2, 3, 4])
    def test_round_trip(self, depth):
        model = make_sandwich(depth, 0.5, 2.0, 2, 4, 1, seed=10 + depth)
        rng = np.random.default_rng(20 + depth)
        u = rng.standard_normal((100, 1))
        x0 = [np.zeros(2)] * depth
        y = sandwich_forward(model, x0, u)
        u_hat = sandwich_inverse(model, x0, y)
        assert np.abs(u_hat - u).max() <= 1e-8

    def test_mismatched_initial_state_decays_at_certified_rate(self):
        model = make_sandwich(1, 0.5, 2.0, 3, 4, 1, seed=30)
        block = model.ren_blocks[0]
        rng = np.random.default_rng(31)
        u = rng.standard_normal((220, 1))
        y = sandwich_forward(model, [np.zeros(3)], u)
        u_hat = sandwich_inverse(model, [rng.standard_normal(3)], y)
        err = np.linalg.norm(u_hat - u, axis=1)
        alpha = block.certificate.alpha_bar
        # tail error shrinks at least geometrically at the certified rate
        t0, t1 = 40, 200
        assert err[t1] <= err[t0] * alpha ** (t1 - t0) + 1e-12


class TestFactor:
    def test_delay_inner_shifts_outer(self):
        block = make_block(0.5, 2.0, 2, 3, 1, seed=40)
        outer = wrap_block(block)
        model = FactorModel(inner=delay_dyn(m=1, steps=1), outer=outer)
        rng = np.random.default_rng(41)
        u = rng.standard_normal((30, 1))
        y_outer = sandwich_forward(outer, None, u)
        y = factor_forward(model, None, u)
        assert np.array_equal(y[1:], y_outer[:-1])
        assert not y[0].any()

    def test_identity_like_inner_reduces_to_outer(self):
        block = make_block(0.5, 2.0, 2, 3, 1, seed=42)
        outer = wrap_block(block)
        rng = np.random.default_rng(43)
        from bilipren.orthogonal import make_dyn
        inner = make_dyn(np.zeros((1, 1)), np.zeros(0), np.zeros(1), p=0, m=1)
        model = FactorModel(inner=inner, outer=outer)
        u = rng.standard_normal((15, 1))
        assert np.allclose(factor_forward(model, None, u),
                           sandwich_forward(outer, None, u), atol=0)

    def test_inner_never_amplifies_increments(self):
        block = make_block(0.5, 2.0, 2, 3, 1, seed=44)
        model = FactorModel(inner=delay_dyn(m=1, steps=2), outer=wrap_block(block))
        rng = np.random.default_rng(45)
        u, v = rng.standard_normal((2, 60, 1))
        mid_u = sandwich_forward(model.outer, None, u)
        mid_v = sandwich_forward(model.outer, None, v)
        out_u = factor_forward(model, None, u)
        out_v = factor_forward(model, None, v)
        assert (np.linalg.norm(out_u - out_v)
                <= np.linalg.norm(mid_u - mid_v) + 1e-12)


class TestSimulateDispatch:
    def test_types(self):
        block = make_block(0.5, 2.0, 2, 3, 1, seed=50)
        u = np.random.default_rng(51).standard_normal((8, 1))
        assert simulate(block, u).shape == (8, 1)
        assert simulate(wrap_block(block), u).shape == (8, 1)
        assert simulate(block.weights, u).shape == (8, 1)
        with pytest.raises(TypeError):
            simulate(object(), u)

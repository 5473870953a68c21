import numpy as np
import pytest

from dnfnet import autodiff as ad
from dnfnet.autodiff import ContractError, DimensionError
from dnfnet.blocks import dnnf_forward
from dnfnet.model import (
    ABLATIONS,
    DataError,
    DnfNet,
    DnfNetSpec,
    Fcn,
    FcnSpec,
    fcn_equivalent_widths,
    load_checkpoint,
    save_checkpoint,
)
from dnfnet.selection import effective_mask, regularizer

from conftest import model_gradient_errors


class TestSpec:
    def test_literal_and_conjunction_counts(self):
        net = DnfNet(DnfNetSpec(64, 10), seed=0)
        assert net.n_conj == 672
        assert net.n_literals == 2688

    def test_ablation_presets(self):
        spec = DnfNetSpec(4, 3)
        assert spec.with_ablation("exp4") == spec
        assert spec.with_ablation("exp6") == spec.with_ablation("exp3")
        e1 = spec.with_ablation("exp1")
        assert (e1.dnf_structure, e1.feature_selection, e1.localization) == (False, False, False)
        with pytest.raises(ContractError):
            spec.with_ablation("exp9")

    def test_exp1_is_plain_tanh_network(self):
        net = DnfNet(DnfNetSpec(8, 5).with_ablation("exp1"), seed=0)
        assert set(net.parameters()) == {"W", "b", "W2", "b2", "W3", "b3", "w_out", "b_out"}
        assert fcn_equivalent_widths(net.spec) == [net.n_literals, net.n_conj, 8]


class TestDnfNetForward:
    @pytest.mark.parametrize("preset", sorted(ABLATIONS))
    def test_output_shapes(self, preset, rng):
        net = DnfNet(DnfNetSpec(6, 4).with_ablation(preset), seed=1)
        assert net.forward(rng.normal(size=(5, 4))).shape == (5,)
        multi = DnfNet(DnfNetSpec(6, 4, n_classes=3).with_ablation(preset), seed=1)
        probs = multi.predict_proba(rng.normal(size=(5, 4)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)

    def test_packed_matches_per_block_reference(self, rng):
        net = DnfNet(DnfNetSpec(7, 5), seed=3)
        net.m_t.data[0, :2] = 0.3  # switch a couple of features off
        x = rng.normal(size=(9, 5))
        packed = net.dnnf_outputs(x).data
        for i in range(7):
            spec, params, mask = net.block(i)
            ref = dnnf_forward(x, spec, params, effective_mask(mask)).data
            np.testing.assert_allclose(packed[:, i], ref, rtol=1e-12, atol=1e-14)
        reg = np.mean([regularizer(net.block(i)[2]).item() for i in range(7)])
        assert net.regularization().item() == pytest.approx(reg, rel=1e-12)

    def test_single_formula_without_gating(self, rng):
        net = DnfNet(DnfNetSpec(1, 3), seed=2)
        x = rng.normal(size=(4, 3))
        dnnf = net.dnnf_outputs(x).data[:, 0]
        expected = 1 / (1 + np.exp(-(dnnf * net.w_out.data[0, 0] + net.b_out.data[0])))
        np.testing.assert_allclose(net.predict_proba(x), expected, rtol=1e-12)

    def test_logit_bound(self, rng):
        net = DnfNet(DnfNetSpec(16, 6), seed=4)
        logits = net.forward(rng.normal(size=(50, 6))).data
        bound = np.abs(net.w_out.data).sum() + abs(net.b_out.data.sum())
        assert np.all(np.isfinite(logits)) and np.all(np.abs(logits) <= bound)

    def test_swapping_twin_blocks(self, rng):
        # blocks 0 and 1 share k and p, so exchanging all their parameters is a relabelling
        net = DnfNet(DnfNetSpec(8, 3), seed=5)
        x = rng.normal(size=(6, 3))
        before = net.forward(x).data
        m = net.dnnfs[0].m
        assert net.dnnfs[1] == net.dnnfs[0]
        cols = np.r_[m : 2 * m, 0:m, 2 * m : net.n_literals]
        swap = np.r_[1, 0, 2:8]
        net.W.data, net.b.data = net.W.data[:, cols], net.b.data[cols]
        net.m_s, net.m_t.data, net.alpha.data = net.m_s[swap], net.m_t.data[swap], net.alpha.data[swap]
        net.loc.mu.data, net.loc.sigma_diag.data = net.loc.mu.data[swap], net.loc.sigma_diag.data[swap]
        net.w_out.data = net.w_out.data[swap]
        np.testing.assert_allclose(net.forward(x).data, before, rtol=1e-12)

    def test_input_dimension_checked(self, rng):
        with pytest.raises(DimensionError):
            DnfNet(DnfNetSpec(2, 3), seed=0).forward(np.ones((2, 4)))


class TestLoss:
    def test_balance_point_gives_pure_cross_entropy(self, rng):
        net = DnfNet(DnfNetSpec(3, 4), seed=0)
        net.m_t.data[:] = 1.0  # m_t = epsilon with beta = 1
        x, y = rng.normal(size=(5, 4)), rng.integers(0, 2, 5)
        assert net.regularization().item() == 0.0
        ce = ad.sigmoid_cross_entropy(net.forward(x), y).item()
        assert net.loss(x, y).item() == ce

    def test_uniform_multiclass(self):
        net = Fcn(FcnSpec(depth=0), 3, n_classes=5, seed=0)
        net.head[0].data[:] = 0.0
        assert net.loss(np.ones((4, 3)), np.array([0, 1, 2, 4])).item() == pytest.approx(np.log(5))

    def test_bad_labels(self):
        net = DnfNet(DnfNetSpec(2, 3), seed=0)
        with pytest.raises(DataError):
            net.loss(np.ones((2, 3)), np.array([0, 2]))

    def test_full_model_gradient(self, rng):
        net = DnfNet(DnfNetSpec(4, 8), seed=11)
        x, y = rng.normal(size=(16, 8)), rng.integers(0, 2, 16)
        errors = model_gradient_errors(net, x, y)
        assert max(errors.values()) < 1e-4, errors

    def test_exp1_and_multiclass_gradient(self, rng):
        net = DnfNet(DnfNetSpec(2, 4, n_classes=3).with_ablation("exp7"), seed=2)
        x, y = rng.normal(size=(6, 4)), rng.integers(0, 3, 6)
        errors = model_gradient_errors(net, x, y)
        assert max(errors.values()) < 1e-4, errors


class TestFcn:
    def test_halving_widths(self):
        assert FcnSpec(4, 512, "halving").widths() == [512, 256, 128, 64]
        assert FcnSpec(2, 64, "halving").widths() == [64, 32]

    def test_gradient_single_block(self, rng):
        net = Fcn(FcnSpec(depth=1, width=5), 3, seed=1)
        x, y = rng.normal(size=(8, 3)), rng.integers(0, 2, 8)
        assert max(model_gradient_errors(net, x, y).values()) < 1e-6

    def test_learned_mask_gradient(self, rng):
        net = Fcn(FcnSpec(depth=2, width=6, l2=1e-3), 4, seed=1, input_mask="learned", beta=0.7)
        x, y = rng.normal(size=(8, 4)), rng.integers(0, 2, 8)
        assert max(model_gradient_errors(net, x, y).values()) < 1e-4

    def test_inference_is_deterministic(self, rng):
        net = Fcn(FcnSpec(depth=2, width=8, dropout=0.5), 3, seed=1)
        x = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(net.predict_proba(x), net.predict_proba(x))

    def test_oracle_mask_ignores_features(self, rng):
        net = Fcn(FcnSpec(depth=1, width=4), 3, seed=1, input_mask=np.array([1.0, 0.0, 1.0]))
        x = rng.normal(size=(5, 3))
        x2 = x.copy()
        x2[:, 1] = 100.0
        np.testing.assert_array_equal(net.predict_proba(x), net.predict_proba(x2))

    def test_bad_mask_mode(self):
        with pytest.raises(ContractError):
            Fcn(FcnSpec(), 3, input_mask="magic")


class TestCheckpoint:
    @pytest.mark.parametrize("factory", [
        lambda: DnfNet(DnfNetSpec(5, 4, n_classes=3, beta=0.7), seed=9),
        lambda: DnfNet(DnfNetSpec(5, 4).with_ablation("exp1"), seed=9),
        lambda: Fcn(FcnSpec(2, 8, "halving", 0.25, 1e-4), 4, seed=3, input_mask="learned", beta=0.4),
        lambda: Fcn(FcnSpec(1, 8), 4, seed=3, input_mask=np.array([1.0, 0.0, 0.0, 1.0])),
    ])
    def test_round_trip(self, factory, tmp_path, rng):
        model = factory()
        for p in model.parameters().values():
            p.data = p.data + rng.normal(scale=0.1, size=p.data.shape)
        path = save_checkpoint(model, tmp_path / "m.npz")
        restored = load_checkpoint(path)
        x = rng.normal(size=(7, 4))
        np.testing.assert_array_equal(restored.predict_proba(x), model.predict_proba(x))
        assert restored.rng.bit_generator.state == model.rng.bit_generator.state

    def test_bytes_are_reproducible(self, tmp_path):
        model = DnfNet(DnfNetSpec(3, 4), seed=1)
        a = save_checkpoint(model, tmp_path / "a.npz").read_bytes()
        b = save_checkpoint(model, tmp_path / "b.npz").read_bytes()
        assert a == b

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.npz"
        np.savez(path, header=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
        with pytest.raises(ContractError):
            load_checkpoint(path)

import math

import numpy as np
import pytest

from sparsity_forge.errors import (
    DimMismatch,
    InvalidConfig,
    TopologyMismatch,
    UnsupportedTopology,
)
from sparsity_forge.evalbench import (
    SynthConfig,
    audit,
    default_config,
    divergence,
    forward,
    gen_synthetic,
    lod,
    lod_summary,
    outlier_schedule,
    reconstruction_error,
)
from sparsity_forge.metrics import ScoreSet, score_model
from sparsity_forge.model_io import (
    Allocation,
    Block,
    BlockMask,
    Layer,
    MaskSet,
    Model,
    save_batch,
    save_calib,
    save_model,
)


class TestGenSynthetic:
    def test_same_seed_same_bytes(self, tmp_path):
        for tag in ("a", "b"):
            cfg = default_config(3, 16, 16, seed=99)
            model, calib, holdout = gen_synthetic(cfg)
            save_model(model, tmp_path / tag)
            save_calib(calib, tmp_path / tag)
            save_batch(holdout, tmp_path / tag)
        for suffix in (".model.bin", ".model.json", ".calib.bin", ".batch.bin"):
            assert (tmp_path / ("a" + suffix)).read_bytes() == (
                tmp_path / ("b" + suffix)
            ).read_bytes()

    def test_different_seed_different_bytes(self):
        m1, _, _ = gen_synthetic(default_config(2, 8, 8, seed=1))
        m2, _, _ = gen_synthetic(default_config(2, 8, 8, seed=2))
        assert (
            m1.layers[0].blocks[0].weights.tobytes()
            != m2.layers[0].blocks[0].weights.tobytes()
        )

    def test_no_outliers_means_nearly_gaussian_kurtosis(self):
        # >= 1e5 weights per layer so the moment estimate is tight
        cfg = default_config(2, 320, 320, seed=3, outlier_rate=0.0)
        model, _, _ = gen_synthetic(cfg)
        for layer in model.layers:
            w = layer.blocks[0].weights.astype(np.float64).ravel()
            z = (w - w.mean()) / w.std()
            excess = np.mean(z**4) - 3.0
            assert abs(excess) < 0.5

    def test_outliers_raise_lod_at_m5(self):
        for seed in range(3):
            base = dict(layers=3, rows=32, cols=32, seed=seed)
            with_q = default_config(**base, outlier_rate=0.05, redundancy_gradient=0.0)
            no_q = default_config(**base, outlier_rate=0.0, redundancy_gradient=0.0)
            lods = []
            for cfg in (with_q, no_q):
                model, calib, _ = gen_synthetic(cfg)
                scores = score_model(model, "wanda", calib)
                per_unit = lod(scores, 5.0)
                numels = {u: 32 * 32 for u in per_unit}
                lods.append(lod_summary(per_unit, numels)["pooled"])
            assert lods[0] > lods[1]

    def test_median_schedule_ramps_with_depth(self):
        from sparsity_forge.importance import unimportance
        from sparsity_forge.stats import Aggregator

        cfg = default_config(8, 64, 64, seed=5, redundancy_gradient=1.0)
        model, calib, _ = gen_synthetic(cfg)
        scores = score_model(model, "wanda", calib)
        med = unimportance(model, scores, "per-layer", Aggregator.MEDIAN).values
        assert med[-1] > 1.5 * med[0]

    def test_invalid_config(self):
        with pytest.raises(InvalidConfig):
            SynthConfig(
                layer_count=2,
                dims=[(4, 4), (4, 8)],  # chain-incompatible
                base_scale=0.1,
                outlier_rates=[0.0, 0.0],
                outlier_factor=10.0,
                redundancy_gradient=1.0,
                seed=0,
            )
        with pytest.raises(InvalidConfig):
            outlier_schedule(1.5, 4, 1.0)

    def test_seed_must_fit_unsigned_64_bits(self):
        for bad in (-1, 2**64):
            with pytest.raises(InvalidConfig):
                default_config(2, 8, 8, seed=bad)

    def test_outlier_schedule_mean_and_tilt(self):
        q = outlier_schedule(0.05, 8, 1.0)
        assert np.mean(q) == pytest.approx(0.05, abs=1e-12)
        assert q == sorted(q)
        assert outlier_schedule(0.05, 8, 0.0) == [0.05] * 8


class TestForward:
    def test_scalar_identity(self):
        m = Model([Layer("l0", "identity", [Block("w", np.array([[2.0]], np.float32))])])
        out, inputs = forward(m, np.array([[3.0]], np.float32))
        assert out.tolist() == [[6.0]]
        assert inputs[0].tolist() == [[3.0]]

    def test_relu_clamps(self):
        m = Model([Layer("l0", "relu", [Block("w", np.array([[-1.0]], np.float32))])])
        out, _ = forward(m, np.array([[5.0]], np.float32))
        assert out.tolist() == [[0.0]]

    def test_two_layer_chain_matches_matrix_product(self):
        rng = np.random.Generator(np.random.Philox(key=50))
        w1 = rng.normal(size=(5, 4)).astype(np.float32)
        w2 = rng.normal(size=(3, 5)).astype(np.float32)
        m = Model(
            [
                Layer("l0", "identity", [Block("w", w1)]),
                Layer("l1", "identity", [Block("w", w2)]),
            ]
        )
        x = rng.normal(size=(10, 4)).astype(np.float32)
        out, _ = forward(m, x)
        want = x.astype(np.float64) @ (w2.astype(np.float64) @ w1.astype(np.float64)).T
        np.testing.assert_allclose(out, want, rtol=1e-5, atol=1e-5)

    def test_identity_forward_is_linear(self):
        rng = np.random.Generator(np.random.Philox(key=51))
        m, _, _ = gen_synthetic(default_config(3, 8, 8, seed=7, activation="identity"))
        x = rng.normal(size=(6, 8)).astype(np.float32)
        y = rng.normal(size=(6, 8)).astype(np.float32)
        a, b = 1.5, -0.5
        lhs, _ = forward(m, a * x + b * y)
        rhs = a * forward(m, x)[0] + b * forward(m, y)[0]
        np.testing.assert_allclose(lhs, rhs, rtol=1e-4, atol=1e-4)

    def test_multi_block_layer_unsupported(self):
        m = Model(
            [
                Layer(
                    "l0",
                    "identity",
                    [
                        Block("a", np.ones((2, 2), np.float32)),
                        Block("b", np.ones((2, 2), np.float32)),
                    ],
                )
            ]
        )
        with pytest.raises(UnsupportedTopology):
            forward(m, np.ones((1, 2), np.float32))

    def test_feature_count_mismatch(self):
        m = Model([Layer("l0", "identity", [Block("w", np.ones((2, 3), np.float32))])])
        with pytest.raises(DimMismatch):
            forward(m, np.ones((1, 2), np.float32))


class TestReconstructionError:
    def test_identity_mask_is_zero(self):
        rng = np.random.Generator(np.random.Philox(key=52))
        w = rng.normal(size=(4, 5))
        x = rng.normal(size=(5, 7))
        assert reconstruction_error(w, w, x) == 0.0

    def test_hand_case(self):
        w = np.array([[1.0, 1.0]])
        wm = np.array([[1.0, 0.0]])
        x = np.array([[1.0], [1.0]])  # one sample with features (1, 1)
        assert reconstruction_error(w, wm, x) == pytest.approx(1.0)

    def test_monotone_under_mask_nesting_with_diagonal_inputs(self):
        rng = np.random.Generator(np.random.Philox(key=53))
        w = rng.normal(size=(6, 6))
        x = np.diag(rng.uniform(0.5, 2.0, size=6))
        keep_small = rng.random((6, 6)) < 0.4
        keep_big = keep_small | (rng.random((6, 6)) < 0.4)  # superset of kept weights
        err_more_pruned = reconstruction_error(w, w * keep_small, x)
        err_less_pruned = reconstruction_error(w, w * keep_big, x)
        assert err_more_pruned >= err_less_pruned

    def test_f64_accumulation_matches_compensated_summation(self):
        rng = np.random.Generator(np.random.Philox(key=54))
        w = rng.normal(size=(1000, 64)).astype(np.float32)
        wm = w * (rng.random((1000, 64)) < 0.5)
        x = rng.normal(size=(64, 1000)).astype(np.float32)
        got = reconstruction_error(w, wm, x)
        d = (w.astype(np.float64) - wm.astype(np.float64)) @ x.astype(np.float64)
        want = math.fsum(float(v) ** 2 for v in d.ravel())  # 10^6 squared terms
        assert got == pytest.approx(want, rel=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            reconstruction_error(np.ones((2, 2)), np.ones((2, 2)), np.ones((3, 1)))


class TestLod:
    def scoreset(self, values):
        return ScoreSet("magnitude", {("l0", "w"): np.asarray([values], np.float32)})

    def test_hand_case(self):
        d = lod(self.scoreset([1.0, 1.0, 1.0, 1.0, 10.0]), 3.0)
        assert d["l0"] == pytest.approx(0.2)

    def test_huge_multiplier_gives_zero(self):
        d = lod(self.scoreset([1.0, 5.0, 2.0]), 1e6)
        assert d["l0"] == 0.0

    def test_constant_scores_give_zero_for_multiplier_above_one(self):
        d = lod(self.scoreset([2.0, 2.0, 2.0]), 1.0)
        assert d["l0"] == 0.0

    def test_bounded_and_monotone_in_multiplier(self):
        rng = np.random.Generator(np.random.Philox(key=55))
        s = ScoreSet(
            "magnitude",
            {("l0", "w"): np.abs(rng.normal(size=(20, 20))).astype(np.float32)},
        )
        prev = 1.1
        for m in (1.0, 2.0, 5.0, 7.0, 20.0):
            d = lod(s, m)["l0"]
            assert 0.0 <= d <= 1.0
            assert d <= prev
            prev = d

    def test_summary_pooled_vs_mean(self):
        per_unit = {"a": 0.1, "b": 0.3}
        s = lod_summary(per_unit, {"a": 100, "b": 300})
        assert s["mean"] == pytest.approx(0.2)
        assert s["pooled"] == pytest.approx((0.1 * 100 + 0.3 * 300) / 400)


class TestDivergence:
    def test_identical_models_zero(self):
        m, _, b = gen_synthetic(default_config(2, 8, 8, seed=9))
        assert divergence(m, m, b) == 0.0

    def test_all_pruned_identity_model_equals_mean_square_of_dense_output(self):
        m, _, b = gen_synthetic(default_config(2, 8, 8, seed=10, activation="identity"))
        zeroed = Model(
            [
                Layer(l.name, l.activation, [Block("w", np.zeros_like(l.blocks[0].weights))])
                for l in m.layers
            ]
        )
        out, _ = forward(m, b)
        want = float(np.mean(out.astype(np.float64) ** 2))
        assert divergence(m, zeroed, b) == pytest.approx(want, rel=1e-6)

    def test_topology_mismatch(self):
        m1, _, b = gen_synthetic(default_config(2, 8, 8, seed=11))
        m2, _, _ = gen_synthetic(default_config(3, 8, 8, seed=11))
        with pytest.raises(TopologyMismatch):
            divergence(m1, m2, b)


class TestAudit:
    def test_all_keep_masks(self):
        masks = MaskSet({("l0", "w"): BlockMask.from_bool(np.ones((4, 4), bool))})
        alloc = Allocation("per-layer", {"l0": 0.0})
        rep = audit(masks, alloc)
        assert rep["global"]["achieved_sparsity"] == 0.0
        assert not rep["units"][0]["flagged"]

    def test_half_sparse_4x4(self):
        keep = np.zeros((4, 4), bool)
        keep.ravel()[:8] = True
        masks = MaskSet({("l0", "w"): BlockMask.from_bool(keep)})
        rep = audit(masks, Allocation("per-layer", {"l0": 0.5}))
        assert rep["units"][0]["achieved_sparsity"] == 0.5
        assert rep["units"][0]["zeros"] == 8

    def test_per_row_rounding_is_exact_at_seven_tenths(self):
        keep = np.ones((5, 10), bool)
        keep[:, :7] = False  # 7 zeros per row of 10
        masks = MaskSet({("l0", "w"): BlockMask.from_bool(keep)})
        rep = audit(masks, Allocation("per-layer", {"l0": 0.7}))
        assert rep["units"][0]["achieved_sparsity"] == pytest.approx(0.7)
        assert not rep["units"][0]["flagged"]

    def test_flag_on_large_deviation(self):
        masks = MaskSet({("l0", "w"): BlockMask.from_bool(np.ones((4, 4), bool))})
        rep = audit(masks, Allocation("per-layer", {"l0": 0.9}))
        assert rep["units"][0]["flagged"]

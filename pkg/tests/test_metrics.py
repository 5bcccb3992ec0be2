import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bnexpand.data import LabeledDataset
from bnexpand.nn import BatchNorm, Network, StatsMode, mlp_bn
from bnexpand.metrics import (ConfusionMatrix, accuracy, bn_variance_probe,
                              export_penultimate_features, group_average_predictions,
                              kappa_band, linear_weighted_kappa, penultimate_features,
                              stacked_bn_probe_network)


def kappa_oracle(counts):
    """Definition of linearly weighted kappa, written with plain loops."""
    k = len(counts)
    n = float(sum(sum(row) for row in counts))
    rows = [sum(counts[i]) / n for i in range(k)]
    cols = [sum(counts[i][j] for i in range(k)) / n for j in range(k)]
    num = den = 0.0
    for i in range(k):
        for j in range(k):
            w = abs(i - j) / (k - 1)
            num += w * counts[i][j] / n
            den += w * rows[i] * cols[j]
    return 1.0 - num / den


class TestAccuracy:
    def test_examples(self):
        assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
        assert accuracy([0, 0], [1, 1]) == 0.0
        assert accuracy([0, 1, 1, 1], [0, 1, 1, 0]) == 0.75

    def test_errors(self):
        with pytest.raises(ValueError):
            accuracy([], [])
        with pytest.raises(ValueError):
            accuracy([1], [1, 2])


class TestKappa:
    def test_oracle_1000_matrices(self):
        rng = np.random.default_rng(2024)
        checked = 0
        while checked < 1000:
            k = int(rng.integers(2, 5))
            counts = rng.integers(0, 101, size=(k, k))
            cm = ConfusionMatrix(counts)
            try:
                ours = linear_weighted_kappa(cm)
            except ValueError:
                continue
            assert abs(ours - kappa_oracle(counts.tolist())) < 1e-10
            checked += 1

    def test_diagonal(self):
        assert linear_weighted_kappa(ConfusionMatrix(np.diag([3, 5, 7]))) == 1.0

    def test_independence(self):
        assert linear_weighted_kappa(ConfusionMatrix(np.array([[25, 25], [25, 25]]))) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 4), st.integers(0, 10_000), st.integers(2, 50))
    def test_scaling_invariance(self, k, seed, c):
        counts = np.random.default_rng(seed).integers(0, 101, size=(k, k))
        try:
            base = linear_weighted_kappa(ConfusionMatrix(counts))
        except ValueError:
            return
        assert abs(linear_weighted_kappa(ConfusionMatrix(counts * c)) - base) < 1e-12

    def test_degenerate(self):
        assert linear_weighted_kappa(ConfusionMatrix(np.array([[4, 0], [0, 0]]))) == 1.0
        with pytest.raises(ValueError):
            linear_weighted_kappa(ConfusionMatrix(np.zeros((3, 3), dtype=int)))

    def test_from_predictions(self):
        cm = ConfusionMatrix.from_predictions([0, 1, 1, 2], [0, 2, 1, 2], 3)
        assert cm.counts.tolist() == [[1, 0, 0], [0, 1, 1], [0, 0, 1]]
        assert cm.total == 4


class TestBands:
    @pytest.mark.parametrize("k,band", [(0.67, "substantial"), (0.41, "moderate"),
                                        (0.00, "unclassified"), (0.21, "fair"), (0.40, "fair"),
                                        (0.60, "moderate"), (0.80, "substantial"),
                                        (0.81, "unclassified"), (-0.5, "unclassified")])
    def test_examples(self, k, band):
        assert kappa_band(k) == band


class TestGroupAverage:
    def test_single_members(self, rng):
        p = rng.dirichlet(np.ones(3), size=10)
        out = group_average_predictions(p, np.arange(10))
        assert [out[g] for g in range(10)] == p.argmax(axis=1).tolist()

    def test_tie_goes_low(self):
        assert group_average_predictions([[1, 0], [0, 1]], [7, 7]) == {7: 0}

    def test_three_members(self):
        p = [[.6, .4], [.2, .8], [.3, .7]]
        assert group_average_predictions(p, ["a", "a", "a"]) == {"a": 1}
        assert np.mean(p, axis=0) == pytest.approx([0.3667, 0.6333], abs=1e-4)

    def test_rows_must_sum_to_one(self):
        with pytest.raises(ValueError):
            group_average_predictions([[0.5, 0.6]], [0])


def one_bn(gamma=1.0, mean=0.0, var=1.0, c=4):
    bn = BatchNorm(c, mode=StatsMode.FROZEN_EXTERNAL)
    bn.gamma.data = np.full(c, gamma, dtype=np.float32)
    bn.running_mean = np.full(c, mean, dtype=np.float32)
    bn.running_var = np.full(c, var, dtype=np.float32)
    return Network([bn])


class TestVarianceProbe:
    @pytest.mark.parametrize("gamma", [1.0, 3.0])
    def test_matched_is_gamma_squared(self, rng, gamma):
        x = rng.standard_normal((256, 64))
        rep = bn_variance_probe(one_bn(gamma, c=64), x)
        measured = np.array([r.measured_var for r in rep.rows])
        # Monte-Carlo tolerance on the channel average; each channel is exact given its batch
        assert abs(measured.mean() / gamma ** 2 - 1) < 0.1
        np.testing.assert_allclose(measured, gamma ** 2 * x.var(axis=0) / (1 + 1e-5), rtol=1e-5)
        assert all(r.theory_var == pytest.approx(gamma ** 2) for r in rep.rows if r.matched)
        assert np.all((rep.ratios() >= 0.8) & (rep.ratios() <= 1.25))

    def test_doubling_sigma_quadruples(self, rng):
        net = one_bn(var=0.25)
        x = rng.standard_normal((256, 4))
        a = bn_variance_probe(net, x)
        b = bn_variance_probe(net, 2 * x)
        ratio = np.array([rb.measured_var / ra.measured_var for ra, rb in zip(a.rows, b.rows)])
        assert np.all(np.abs(ratio / 4 - 1) < 0.15)
        assert not any(r.matched for r in a.rows + b.rows)

    @pytest.mark.parametrize("mode", list(StatsMode))
    def test_theory_ratio_after_training(self, rng, mode):
        net = mlp_bn(6, [8, 8], 3, seed=1)
        for _ in range(40):
            net.forward(rng.normal(0.5, 2.0, size=(64, 6)), "train")
        for _, bn in net.batchnorm_layers():
            bn.gamma.data = rng.uniform(0.5, 2.0, size=8).astype(np.float32)
            bn.mode = mode
        rep = bn_variance_probe(net, rng.normal(0.0, 1.0, size=(512, 6)))
        r = rep.ratios()
        assert np.all((r >= 0.8) & (r <= 1.25))

    def test_batch_floor(self, rng):
        with pytest.raises(ValueError):
            bn_variance_probe(one_bn(), rng.standard_normal((7, 4)))

    def test_csv(self, rng, tmp_path):
        rep = bn_variance_probe(one_bn(), rng.standard_normal((16, 4)), provenance="unit")
        text = rep.to_csv(tmp_path / "p.csv")
        rows = list(csv.reader(text.splitlines()))
        assert rows[0] == ["layer", "channel", "mode", "measured_var", "theory_var"]
        assert len(rows) == 5 and rows[1][2] == "frozen_external"
        assert (tmp_path / "p.csv").read_text() == text

    def test_depth_amplification(self, rng):
        x = rng.standard_normal((1024, 32))
        mismatched = bn_variance_probe(stacked_bn_probe_network(32, 5, frozen_var=0.5), x)
        means = [mismatched.layer_mean(l) for l in mismatched.layers()]
        assert all(b >= a for a, b in zip(means, means[1:]))
        assert means[-1] > 8 * means[0]

    def test_matched_depth_stays_flat(self, rng):
        x = rng.standard_normal((1024, 32))
        rep = bn_variance_probe(stacked_bn_probe_network(32, 6, frozen_var=1.0), x)
        assert all(0.8 <= r.measured_var <= 1.25 for r in rep.rows)


class TestFeatures:
    def _ds(self, rng, n=9):
        return LabeledDataset(rng.uniform(size=(n, 5)), rng.integers(0, 3, size=n), 3)

    def test_export(self, rng, tmp_path):
        net = mlp_bn(5, [7, 6], 3)
        ds = self._ds(rng)
        dump = export_penultimate_features(net, ds, tmp_path / "f.csv")
        rows = list(csv.reader((tmp_path / "f.csv").read_text().splitlines()))
        assert rows[0] == ["label"] + [f"f{j}" for j in range(6)]
        assert len(rows) - 1 == len(dump) == len(ds)
        assert [int(r[0]) for r in rows[1:]] == ds.labels.tolist()
        export_penultimate_features(net, ds, tmp_path / "g.csv")
        assert (tmp_path / "g.csv").read_bytes() == (tmp_path / "f.csv").read_bytes()

    def test_width_matches_penultimate(self, rng):
        net = mlp_bn(5, [7, 6], 3)
        feats = penultimate_features(net, self._ds(rng).images)
        assert feats.shape == (9, 6)
        assert (feats >= 0).all()  # after the last ReLU

    def test_too_shallow(self, rng):
        with pytest.raises(ValueError):
            penultimate_features(Network([BatchNorm(5)]), self._ds(rng).images)

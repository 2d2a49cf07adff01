import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wavefcn.analysis import (PROBE_KINDS, correlation_exports, hf_probe, neighbor_profile, probe_pair,
                              receptive_field, weight_correlation, write_probe_spectra)
from wavefcn.models import Arch, ModelSpec, build
from wavefcn.spectral import read_pgm

matrices = st.tuples(st.integers(2, 12), st.integers(2, 12)).flatmap(
    lambda shape: arrays(np.float64, shape, elements=st.floats(-10, 10, allow_nan=False)))


def loop_corr(w):
    # textbook Pearson correlation between rows, entry by entry
    n = w.shape[0]
    c = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            a, b = w[i] - w[i].mean(), w[j] - w[j].mean()
            c[i, j] = a @ b / (np.linalg.norm(a) * np.linalg.norm(b))
    return c


def test_hand_oracles():
    c = weight_correlation([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]]).values
    assert c[0, 1] == pytest.approx(-1.0, abs=1e-10)
    w1 = np.array([0.3, -1.2, 2.0, 0.7])
    c = weight_correlation(np.stack([w1, 5 * w1 + 7])).values
    assert c[0, 1] == pytest.approx(1.0, abs=1e-10)


def test_matches_loop_oracle():
    w = np.random.default_rng(0).standard_normal((6, 20))
    np.testing.assert_allclose(weight_correlation(w).values, loop_corr(w), rtol=0, atol=1e-13)


@settings(max_examples=50, deadline=None)
@given(matrices)
def test_correlation_invariants(w):
    corr = weight_correlation(w)
    c = corr.values
    ok = np.ones(c.shape[0], bool)
    ok[list(corr.degenerate_rows)] = False
    sub = c[np.ix_(ok, ok)]
    assert np.all(np.abs(sub - sub.T) <= 1e-12)
    assert np.all(np.abs(np.diag(c) - 1.0) <= 1e-12)
    assert np.all((sub >= -1.0) & (sub <= 1.0))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_row_affine_invariance(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((8, 16))
    a = rng.uniform(0.1, 10.0, size=(8, 1))
    b = rng.uniform(-5.0, 5.0, size=(8, 1))
    np.testing.assert_allclose(weight_correlation(a * w + b).values, weight_correlation(w).values,
                               rtol=0, atol=1e-10)


def test_constant_row_is_flagged():
    corr = weight_correlation([[1.0, 1.0, 1.0], [1.0, 2.0, 4.0], [0.0, 1.0, 0.0]])
    assert corr.degenerate_rows == (0,)
    assert np.isnan(corr.values[0, 1]) and corr.values[0, 0] == 1.0
    assert np.isfinite(corr.values[1, 2])


def test_rejects_non_matrix():
    with pytest.raises(ValueError):
        weight_correlation(np.ones(4))


def test_neighbor_profile():
    w = np.random.default_rng(1).standard_normal((6, 10))
    corr = weight_correlation(w)
    assert neighbor_profile(corr, 0) == 1.0
    assert neighbor_profile(corr, 2) == pytest.approx(np.mean([corr.values[i, i + 2] for i in range(4)]))
    with pytest.raises(ValueError):
        neighbor_profile(corr, 6)


def test_orthogonal_rows_have_flat_profile():
    # centred, mutually orthogonal rows: Helmert-style contrast vectors
    q, _ = np.linalg.qr(np.random.default_rng(2).standard_normal((64, 64)))
    basis = q[:, 1:] - q[:, 1:].mean(axis=0)
    w, _ = np.linalg.qr(basis)
    corr = weight_correlation(w.T[:32])
    assert abs(neighbor_profile(corr, 1)) < 1e-10


# --------------------------------------------------------------- receptive field


@pytest.mark.parametrize("index,expected", [(256, (226, 286)), (0, (0, 30)), (511, (481, 511))])
def test_fcn_receptive_field(index, expected):
    fcn = build(ModelSpec(Arch.WAVE_FCN, seed=1))
    assert receptive_field(fcn, index) == expected


def test_dnn_receptive_field_is_full_frame():
    dnn = build(ModelSpec(Arch.WAVE_DNN, seed=1))
    assert receptive_field(dnn, 100) == (0, 511)


def test_receptive_field_index_check():
    with pytest.raises(ValueError):
        receptive_field(build(ModelSpec(Arch.WAVE_FCN)), 512)


# --------------------------------------------------------------------- probe


def test_probe_pair_is_seeded_and_split():
    c0, n0 = probe_pair(6000.0, 3, 0)
    c0b, n0b = probe_pair(6000.0, 3, 0)
    c1, n1 = probe_pair(6000.0, 3, 1)
    assert n0.samples.tobytes() == n0b.samples.tobytes()
    assert not np.array_equal(n0.samples, n1.samples)
    assert len(c0) == 16 * 512


def test_hf_probe_argument_checks():
    with pytest.raises(ValueError, match="unknown probe kind"):
        hf_probe("wave-cnn")
    with pytest.raises(ValueError, match="Hz"):
        hf_probe("wave-fcn", train_freq_hz=8000.0)


@pytest.mark.parametrize("kind", PROBE_KINDS)
def test_hf_probe_short_run(tmp_path, kind):
    rep = hf_probe(kind, epochs=2, seed=0)
    assert rep.kind == kind and rep.cutoff_hz == 5500.0
    assert len(rep.train_loss) == 2
    assert 0.0 <= rep.band_ratio <= 1.0 and np.isfinite(rep.final_mse)
    write_probe_spectra(rep, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "freq_hz,clean_power,output_power" and len(lines) == 258


def test_correlation_exports(tmp_path):
    corr = weight_correlation(np.random.default_rng(3).standard_normal((5, 9)))
    correlation_exports(corr, tmp_path)
    grid = np.loadtxt(tmp_path / "correlation.csv", delimiter=",")
    assert grid.shape == (5, 5)
    img = read_pgm(tmp_path / "correlation.pgm")
    assert img.shape == (5, 5) and np.all(np.diag(img) == 255)

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scom.channel import (GeometryConfig, PowerConstraintError, aggregate_stats, cn,
                          dbm_to_watts, db_to_linear, empirical_sigma_w, post_process,
                          sample_channels, sample_geometry, transmit)
from scom.sparse_coding import (CodecConfig, DeviceCodecState, build_compressor, encode_gradient,
                                flatten_streams, make_flip_vector)

UNIT = GeometryConfig(cell_radius_m=0.0, ref_loss_db=0.0, path_loss_exp=0.0,
                      gain_tx_dbi=0.0, gain_rx_dbi=0.0)


def test_db_conventions():
    assert dbm_to_watts(-90) == pytest.approx(1e-12, rel=1e-12)
    assert db_to_linear(-60) == pytest.approx(1e-6, rel=1e-12)
    assert GeometryConfig().noise_power == pytest.approx(1e-12, rel=1e-12)


def test_degenerate_cell_puts_devices_under_ps():
    pos = sample_geometry(0, 5, GeometryConfig(cell_radius_m=0.0))
    np.testing.assert_array_equal(pos.radial, 0.0)
    np.testing.assert_allclose(pos.distance, 10.0)


def test_geometry_deterministic():
    a = sample_geometry(4, 10, GeometryConfig())
    b = sample_geometry(4, 10, GeometryConfig())
    np.testing.assert_array_equal(a.distance, b.distance)
    np.testing.assert_array_equal(a.azimuth, b.azimuth)


def test_geometry_uniform_area_law():
    pos = sample_geometry(1, 10**5, GeometryConfig(cell_radius_m=100.0))
    assert np.mean(pos.radial ** 2) == pytest.approx(100.0 ** 2 / 2, rel=0.02)
    assert np.all((pos.azimuth >= 0) & (pos.azimuth < 2 * np.pi))
    np.testing.assert_array_equal(pos.height, 0.0)


def test_amplitude_scale_at_ten_metres():
    cfg = GeometryConfig()
    amp = math.sqrt(cfg.large_scale_gain(10.0))
    assert amp == pytest.approx(math.sqrt(10 * 1e-6 * 10 ** -3.8), rel=1e-12)
    assert amp == pytest.approx(3.98e-5, rel=1e-3)


def test_unit_large_scale_gain_leaves_small_scale_fading():
    pos = sample_geometry(0, 3, UNIT)
    ch = sample_channels(9, pos, 4, 2, UNIT)
    ref = cn(np.random.default_rng(9), (3, 4, 2))
    np.testing.assert_allclose(ch.H, ref, rtol=0, atol=1e-15)


def test_channel_energy_monte_carlo():
    cfg = GeometryConfig()
    pos = sample_geometry(2, 3, cfg)
    n_rx, n_tx = 4, 3
    draws = [sample_channels(s, pos, n_rx, n_tx, cfg).H for s in range(10**4)]
    energy = np.mean([np.sum(np.abs(H) ** 2, axis=(1, 2)) for H in draws], axis=0)
    np.testing.assert_allclose(energy, n_rx * n_tx * cfg.large_scale_gain(pos.distance), rtol=0.03)


def test_transmit_identity_noiseless():
    G = cn(np.random.default_rng(0), (3, 5))
    Y = transmit(np.eye(3)[None], [np.eye(3)], [G], 0.0)
    np.testing.assert_array_equal(Y, G)


def test_transmit_noise_power():
    H = np.eye(4)[None]
    sigma = 0.3
    powers = [np.mean(np.abs(transmit(H, [np.eye(4)], [np.zeros((4, 8))], sigma, seed=s)) ** 2)
              for s in range(1000)]
    assert np.mean(powers) == pytest.approx(sigma, rel=0.03)


def test_transmit_superposition_noiseless():
    rng = np.random.default_rng(1)
    G1, G2 = cn(rng, (2, 4)), cn(rng, (2, 4))
    H = np.stack([np.eye(2), np.eye(2)])
    Y = transmit(H, [np.eye(2)] * 2, [G1, G2], 0.0)
    np.testing.assert_allclose(Y, G1 + G2, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_transmit_linearity_single_noise_draw(seed):
    rng = np.random.default_rng(seed)
    H = cn(rng, (3, 4, 2))
    P = cn(rng, (3, 2, 2))
    frames = [cn(rng, (2, 5)) for _ in range(3)]
    Y = transmit(H, P, frames, 0.7, seed=seed)
    parts = sum(transmit(H[[m]], P[[m]], [frames[m]], 0.0) for m in range(3))
    noise = transmit(H, P, [np.zeros((2, 5))] * 3, 0.7, seed=seed)
    np.testing.assert_allclose(Y, parts + noise, atol=1e-12)
    np.testing.assert_array_equal(Y, transmit(H, P, frames, 0.7, seed=seed))


def test_transmit_power_violation():
    with pytest.raises(PowerConstraintError):
        transmit(np.eye(2)[None], [2 * np.eye(2)], [np.ones((2, 1))], 0.0, power_budget=1.0)


def test_transmit_shape_mismatch():
    with pytest.raises(ValueError):
        transmit(np.eye(2)[None], [np.eye(3)], [np.ones((3, 1))], 0.0)


def test_post_process_examples():
    Y = cn(np.random.default_rng(3), (3, 4))
    np.testing.assert_array_equal(post_process(np.eye(3), Y), Y)
    np.testing.assert_array_equal(post_process(np.zeros((2, 3)), Y), 0)


def test_empirical_sigma_w_examples():
    R = np.zeros((2, 2))
    assert empirical_sigma_w(R, R) == 0
    assert empirical_sigma_w(np.ones((2, 2)), R) == 1


def test_observation_model_identity():
    """flatten(F Y) - A sum_m q_m g_no,m equals flatten(W) on the compressed entries."""
    rng = np.random.default_rng(8)
    dim, m_dev, n_s = 60, 3, 2
    cfg = CodecConfig(model_dim=dim, sparsity_ratio=0.2, compression_ratio=0.5, streams=n_s, shared_seed=3)
    op = build_compressor(3, dim, 0.5)
    flips = make_flip_vector(3, cfg.half_dim)
    q = np.array([0.5, 0.3, 0.2])
    enc = [encode_gradient(rng.standard_normal(dim), DeviceCodecState.zeros(cfg.half_dim), cfg, op, flips)[0]
           for _ in range(m_dev)]
    frames = [e.frame for e in enc]
    H = cn(rng, (m_dev, 4, 3))
    P = cn(rng, (m_dev, 3, n_s))
    F = cn(rng, (n_s, 4))
    R_hat = F @ transmit(H, P, frames, 0.1, seed=5)
    W = aggregate_stats(R_hat, frames, q).residual
    g_bar = sum(qm * e.g_no for qm, e in zip(q, enc))
    c = op.compressed_len
    np.testing.assert_allclose(flatten_streams(R_hat)[:c] - op.compress(g_bar),
                               flatten_streams(W)[:c], atol=1e-12)

"""Recurrent cell tests: gate-equation oracles, the conv/dense GRU
degeneracy, and parameter counts."""

import numpy as np
import numpy.testing as npt
import pytest

from rfcn import cells
from rfcn.errors import ShapeError
from rfcn.tensor import Rng, sigmoid


def gru_oracle(x, h, p):
    """Gate equations written out directly."""
    z = sigmoid(p.w_hz @ h + p.w_xz @ x + p.b_z)
    r = sigmoid(p.w_hr @ h + p.w_xr @ x + p.b_r)
    hc = np.tanh(p.w_h @ (r * h) + p.w_x @ x + p.b)
    return (1 - z) * h + z * hc


def test_gru_step_matches_gate_equations():
    rng = Rng(200)
    for _ in range(10):
        p = cells.DenseGruParams.init(6, 4, rng, dtype=np.float64)
        x = rng.uniform(-1, 1, 4)
        h = rng.uniform(-1, 1, 6)
        state, _ = cells.gru_step(x, cells.RecurrentCellState(h), p)
        npt.assert_allclose(state.h, gru_oracle(x, h, p), atol=1e-14)


def test_gru_step_increments_step_index():
    rng = Rng(201)
    p = cells.DenseGruParams.init(3, 2, rng, dtype=np.float64)
    s = cells.RecurrentCellState(np.zeros(3), step_index=4)
    s2, _ = cells.gru_step(rng.uniform(-1, 1, 2), s, p)
    assert s2.step_index == 5


def test_gru_rejects_mismatched_dims():
    rng = Rng(202)
    p = cells.DenseGruParams.init(3, 2, rng, dtype=np.float64)
    with pytest.raises(ShapeError):
        cells.gru_step(np.zeros(5), cells.RecurrentCellState(np.zeros(3)), p)


def test_conv_gru_1x1_degenerates_to_dense_gru():
    """On 1x1 spatial maps with 1x1 kernels, the convolutional GRU is the
    dense GRU exactly: |difference| <= 1e-12 over 10 chained random steps."""
    rng = Rng(203)
    hidden, cin = 5, 3
    dp = cells.DenseGruParams.init(hidden, cin, rng, dtype=np.float64)
    cp = cells.ConvGruParams(**{k: (v.reshape(v.shape + (1, 1)) if v.ndim == 2
                                    else v.copy())
                                for k, v in dp.as_dict().items()})
    hd = rng.uniform(-1, 1, hidden)
    sd = cells.RecurrentCellState(hd)
    sc = cells.RecurrentCellState(hd.reshape(hidden, 1, 1).copy())
    for _ in range(10):
        x = rng.uniform(-1, 1, cin)
        sd, _ = cells.gru_step(x, sd, dp)
        sc, _ = cells.conv_gru_step(x.reshape(cin, 1, 1), sc, cp)
        assert np.abs(sc.h[:, 0, 0] - sd.h).max() <= 1e-12


def test_conv_gru_preserves_spatial_dims():
    rng = Rng(204)
    p = cells.ConvGruParams.init(4, 2, 3, rng, dtype=np.float64)
    x = rng.uniform(-1, 1, (2, 7, 9))
    s = cells.RecurrentCellState(np.zeros((4, 7, 9)))
    s2, _ = cells.conv_gru_step(x, s, p)
    assert s2.h.shape == (4, 7, 9)


def test_conv_gru_requires_odd_kernel():
    rng = Rng(205)
    with pytest.raises(ShapeError):
        cells.ConvGruParams.init(4, 2, 2, rng)


def test_lstm_step_matches_gate_equations():
    rng = Rng(206)
    for act in ("sigmoid", "tanh"):
        p = cells.LstmParams.init(5, 3, rng, dtype=np.float64,
                                  candidate_activation=act)
        x = rng.uniform(-1, 1, 3)
        h = rng.uniform(-1, 1, 5)
        c = rng.uniform(-1, 1, 5)
        s, _ = cells.lstm_step(x, cells.RecurrentCellState(h, c=c), p)
        i = sigmoid(p.w_xi @ x + p.w_hi @ h + p.b_i)
        f = sigmoid(p.w_xf @ x + p.w_hf @ h + p.b_f)
        o = sigmoid(p.w_xo @ x + p.w_ho @ h + p.b_o)
        a = p.w_xc @ x + p.w_hc @ h + p.b_c
        g = sigmoid(a) if act == "sigmoid" else np.tanh(a)
        c_new = f * c + i * g
        npt.assert_allclose(s.c, c_new, atol=1e-14)
        npt.assert_allclose(s.h, o * np.tanh(c_new), atol=1e-14)


def test_rnn_step_matches_equations():
    rng = Rng(207)
    p = cells.RnnParams.init(5, 3, 2, rng, dtype=np.float64)
    x = rng.uniform(-1, 1, 3)
    h = rng.uniform(-1, 1, 5)
    s, y, _ = cells.rnn_step(x, cells.RecurrentCellState(h), p)
    h_new = p.theta @ np.tanh(h) + p.theta_x @ x
    npt.assert_allclose(s.h, h_new, atol=1e-14)
    npt.assert_allclose(y, p.theta_y @ np.tanh(h_new), atol=1e-14)


def test_param_count_helpers_match_instances():
    rng = Rng(208)
    dp = cells.DenseGruParams.init(7, 4, rng)
    assert dp.param_count() == cells.dense_gru_param_count(7, 4)
    cp = cells.ConvGruParams.init(6, 3, 5, rng)
    assert cp.param_count() == cells.conv_gru_param_count(6, 3, 5)


def test_gru_backward_consistent_with_finite_difference():
    """Spot-check one analytic gradient against central differences here;
    the exhaustive audit lives in the gradcheck module."""
    rng = Rng(209)
    p = cells.DenseGruParams.init(4, 3, rng, dtype=np.float64)
    x = rng.uniform(-1, 1, 3)
    h0 = rng.uniform(-0.5, 0.5, 4)
    wout = rng.uniform(-1, 1, 4)

    def loss():
        s, _ = cells.gru_step(x, cells.RecurrentCellState(h0), p)
        return float(s.h @ wout)

    _, cache = cells.gru_step(x, cells.RecurrentCellState(h0), p)
    gx, gh, grads = cells.gru_backward(wout, cache, p)
    eps = 1e-6
    for i in range(3):
        orig = x[i]
        x[i] = orig + eps
        fp = loss()
        x[i] = orig - eps
        fm = loss()
        x[i] = orig
        npt.assert_allclose(gx[i], (fp - fm) / (2 * eps), rtol=1e-5, atol=1e-8)

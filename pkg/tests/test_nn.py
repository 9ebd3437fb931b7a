"""Neural core: LSTM equation fidelity against a naive transcription oracle,
tape gradients against central finite differences, op semantics."""

import math

import numpy as np
import pytest

from soilqc.errors import DataError
from soilqc import nn
from soilqc.nn import (
    LstmCellParams,
    LstmState,
    Tensor,
    add,
    affine,
    backward,
    bilstm_forward,
    clip,
    concat,
    dual_affine,
    init_lstm_cell,
    log,
    lstm_step,
    mean,
    mul,
    no_grad,
    scale,
    sigmoid,
    tanh,
    tsum,
    zero_state,
)


def naive_sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def naive_lstm_step(cell: LstmCellParams, x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray):
    """Direct elementwise transcription of the gate equations, no matrix ops.

    f_t = sig(W_xf.x + b_xf + W_hf.h + b_hf); i_t likewise;
    c~ = tanh(W_xc.x + b_xc + W_hc.h + b_hc); C = f*C_prev + i*c~;
    o_t = sig(W_xo.x + b_xo + W_ho.h + b_ho); h = o*tanh(C).
    """
    hidden = cell.hidden_dim

    def gate(Wx, bx, Wh, bh, squash):
        out = np.zeros(hidden)
        for j in range(hidden):
            acc = bx.data[j] + bh.data[j]
            for k in range(len(x)):
                acc += Wx.data[j, k] * x[k]
            for k in range(hidden):
                acc += Wh.data[j, k] * h_prev[k]
            out[j] = squash(acc)
        return out

    f = gate(cell.W_xf, cell.b_xf, cell.W_hf, cell.b_hf, naive_sigmoid)
    i = gate(cell.W_xi, cell.b_xi, cell.W_hi, cell.b_hi, naive_sigmoid)
    c_hat = gate(cell.W_xc, cell.b_xc, cell.W_hc, cell.b_hc, math.tanh)
    C = f * c_prev + i * c_hat
    o = gate(cell.W_xo, cell.b_xo, cell.W_ho, cell.b_ho, naive_sigmoid)
    h = o * np.tanh(C)
    return h, C, f, i, c_hat, o


class TestActivations:
    def test_sigmoid_symmetry_point(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_saturation_no_overflow(self):
        hi = sigmoid(Tensor(40.0)).item()
        lo = sigmoid(Tensor(-40.0)).item()
        assert abs(hi - 1.0) < 1e-15
        assert abs(lo) < 1e-15
        with np.errstate(over="raise"):
            sigmoid(Tensor(np.array([-800.0, 800.0])))

    def test_tanh_matches_numpy(self):
        x = np.linspace(-3, 3, 11)
        np.testing.assert_allclose(tanh(Tensor(x)).data, np.tanh(x), atol=1e-15)

    def test_linear_identity(self):
        x = np.array([0.4, -0.2, 1.5])
        out = affine(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_linear_matches_matmul(self):
        rng = np.random.default_rng(0)
        W, b, x = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=3)
        out = affine(Tensor(x), Tensor(W), Tensor(b))
        np.testing.assert_allclose(out.data, W @ x + b, atol=1e-14)

    def test_dimension_mismatch_raises(self):
        with pytest.raises(DataError):
            affine(Tensor(np.zeros(3)), Tensor(np.zeros((4, 2))), Tensor(np.zeros(4)))


class TestLstmStep:
    def test_zero_weights_zero_state(self):
        rng = np.random.default_rng(0)
        cell = init_lstm_cell(rng, 2, 3)
        for _, t in cell.named_tensors():
            t.data[:] = 0.0
        x = Tensor(np.array([0.7, -0.1]))
        out = lstm_step(cell, x, zero_state(cell, x))
        np.testing.assert_array_equal(out.C.data, np.zeros(3))
        np.testing.assert_array_equal(out.h.data, np.zeros(3))
        # gate values are forced: sigmoid(0) = 0.5 exactly
        h, C, f, i, c_hat, o = naive_lstm_step(cell, x.data, np.zeros(3), np.zeros(3))
        assert (f == 0.5).all() and (i == 0.5).all() and (o == 0.5).all()

    def test_zero_weights_nonzero_cell_state(self):
        rng = np.random.default_rng(0)
        cell = init_lstm_cell(rng, 2, 3)
        for _, t in cell.named_tensors():
            t.data[:] = 0.0
        c_prev = np.array([1.0, -2.0, 0.5])
        x = Tensor(np.array([0.7, -0.1]))
        out = lstm_step(cell, x, LstmState(h=Tensor(np.zeros(3)), C=Tensor(c_prev)))
        np.testing.assert_allclose(out.C.data, 0.5 * c_prev, atol=1e-15)
        np.testing.assert_allclose(out.h.data, 0.5 * np.tanh(0.5 * c_prev), atol=1e-15)

    def test_matches_naive_transcription_100_cases(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(100):
            cell = init_lstm_cell(rng, 2, 3)
            for _, t in cell.named_tensors():
                t.data[:] = rng.normal(scale=1.0, size=t.data.shape)
            x = rng.normal(size=2)
            h_prev = rng.uniform(-1, 1, size=3)
            c_prev = rng.normal(size=3)
            out = lstm_step(cell, Tensor(x), LstmState(h=Tensor(h_prev), C=Tensor(c_prev)))
            h, C, f, i, c_hat, o = naive_lstm_step(cell, x, h_prev, c_prev)
            worst = max(worst, np.abs(out.h.data - h).max(), np.abs(out.C.data - C).max())
            assert ((f > 0) & (f < 1)).all() and ((i > 0) & (i < 1)).all() and ((o > 0) & (o < 1)).all()
            assert ((c_hat > -1) & (c_hat < 1)).all()
            assert (np.abs(out.h.data) <= 1).all()
        assert worst < 1e-12

    def test_batched_matches_per_row(self):
        rng = np.random.default_rng(3)
        cell = init_lstm_cell(rng, 4, 5)
        xs = rng.normal(size=(6, 4))
        state = zero_state(cell, Tensor(xs))
        batched = lstm_step(cell, Tensor(xs), state)
        for row in range(6):
            x1 = Tensor(xs[row])
            single = lstm_step(cell, x1, zero_state(cell, x1))
            np.testing.assert_allclose(batched.h.data[row], single.h.data, atol=1e-14)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(0)
        cell = init_lstm_cell(rng, 2, 3)
        x = Tensor(np.zeros(5))
        with pytest.raises(DataError):
            lstm_step(cell, x, zero_state(cell, Tensor(np.zeros(2))))


class TestBilstm:
    def test_length_one_sequence(self):
        rng = np.random.default_rng(1)
        fwd = init_lstm_cell(rng, 2, 3)
        bwd = init_lstm_cell(rng, 2, 3)
        x = Tensor(np.array([0.3, -0.4]))
        out = bilstm_forward(fwd, bwd, [x])
        f = lstm_step(fwd, x, zero_state(fwd, x))
        b = lstm_step(bwd, x, zero_state(bwd, x))
        np.testing.assert_allclose(out[0].data, np.concatenate([f.h.data, b.h.data]), atol=1e-15)

    def test_direction_symmetry(self):
        rng = np.random.default_rng(2)
        fwd = init_lstm_cell(rng, 2, 3)
        bwd = init_lstm_cell(rng, 2, 3)
        xs = [Tensor(rng.normal(size=2)) for _ in range(5)]
        out = bilstm_forward(fwd, bwd, xs)
        flipped = bilstm_forward(bwd, fwd, xs[::-1])
        for t in range(5):
            fwd_half, bwd_half = out[t].data[:3], out[t].data[3:]
            np.testing.assert_allclose(
                flipped[4 - t].data, np.concatenate([bwd_half, fwd_half]), atol=1e-15
            )

    def test_matches_manual_composition(self):
        rng = np.random.default_rng(7)
        fwd = init_lstm_cell(rng, 2, 4)
        bwd = init_lstm_cell(rng, 2, 4)
        xs = [Tensor(rng.normal(size=2)) for _ in range(5)]
        out = bilstm_forward(fwd, bwd, xs)

        state = zero_state(fwd, xs[0])
        fwd_hs = []
        for x in xs:
            state = lstm_step(fwd, x, state)
            fwd_hs.append(state.h.data)
        state = zero_state(bwd, xs[0])
        bwd_hs = [None] * 5
        for t in range(4, -1, -1):
            state = lstm_step(bwd, xs[t], state)
            bwd_hs[t] = state.h.data
        for t in range(5):
            np.testing.assert_allclose(
                out[t].data, np.concatenate([fwd_hs[t], bwd_hs[t]]), atol=1e-13
            )

    def test_output_depends_on_whole_sequence(self):
        rng = np.random.default_rng(12)
        fwd = init_lstm_cell(rng, 2, 4)
        bwd = init_lstm_cell(rng, 2, 4)
        xs = [rng.normal(size=2) for _ in range(8)]
        base = bilstm_forward(fwd, bwd, [Tensor(x) for x in xs])
        for s in range(8):
            bumped = [x.copy() for x in xs]
            bumped[s] = bumped[s] + 0.25
            out = bilstm_forward(fwd, bwd, [Tensor(x) for x in bumped])
            for t in range(8):
                assert np.abs(out[t].data - base[t].data).max() > 0, (s, t)

    def test_empty_sequence_rejected(self):
        rng = np.random.default_rng(0)
        cell = init_lstm_cell(rng, 2, 3)
        with pytest.raises(DataError):
            bilstm_forward(cell, cell, [])

    def test_forward_deterministic(self):
        rng = np.random.default_rng(5)
        fwd = init_lstm_cell(rng, 2, 4)
        bwd = init_lstm_cell(rng, 2, 4)
        xs = [Tensor(rng.normal(size=2)) for _ in range(6)]
        a = bilstm_forward(fwd, bwd, xs)
        b = bilstm_forward(fwd, bwd, xs)
        for t1, t2 in zip(a, b):
            assert (t1.data == t2.data).all()  # bitwise


def central_diff(f, tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(tensor.data)
    it = np.nditer(tensor.data, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = tensor.data[idx]
        tensor.data[idx] = orig + step
        f_plus = f()
        tensor.data[idx] = orig - step
        f_minus = f()
        tensor.data[idx] = orig
        out[idx] = (f_plus - f_minus) / (2 * step)
        it.iternext()
    return out


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float((np.abs(a - b) / denom).max())


class TestBackward:
    def test_sigmoid_grad_at_zero(self):
        # loss = sigmoid(w . x) at w = 0: dloss/dw = 0.25 * x
        x = np.array([0.3, -1.2, 0.7])
        w = Tensor(np.zeros((1, 3)), requires_grad=True)
        loss = tsum(sigmoid(affine(Tensor(x), w, Tensor(np.zeros(1)))))
        loss.backward()
        np.testing.assert_allclose(w.grad, 0.25 * x[None, :], atol=1e-15)

    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(0)
        w = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        loss = tsum(tanh(affine(Tensor(rng.normal(size=3)), w, Tensor(np.zeros(2)))))
        backward(loss, upstream=np.zeros(()))
        np.testing.assert_array_equal(w.grad, np.zeros((2, 3)))

    def test_backward_without_graph_rejected(self):
        with pytest.raises(DataError):
            backward(Tensor(np.array(1.0)))

    def test_nonscalar_loss_needs_upstream(self):
        w = Tensor(np.ones(3), requires_grad=True)
        out = mul(w, Tensor(np.ones(3)))
        with pytest.raises(DataError):
            backward(out)
        backward(out, upstream=np.ones(3))
        np.testing.assert_array_equal(w.grad, np.ones(3))

    def test_upstream_shape_checked(self):
        w = Tensor(np.ones(3), requires_grad=True)
        out = mul(w, Tensor(np.ones(3)))
        with pytest.raises(DataError):
            backward(out, upstream=np.ones(4))

    @pytest.mark.parametrize("op_name", ["affine", "dual_affine", "mul", "concat", "clip_log", "lstm"])
    def test_op_gradients_match_finite_differences(self, op_name):
        rng = np.random.default_rng(hash(op_name) % 2**32)

        if op_name == "affine":
            W = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            b = Tensor(rng.normal(size=3), requires_grad=True)
            x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
            m = Tensor(rng.normal(size=(5, 3)))
            params = [W, b, x]

            def build():
                return tsum(mul(sigmoid(affine(x, W, b)), m))
        elif op_name == "dual_affine":
            Wx = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
            bx = Tensor(rng.normal(size=3), requires_grad=True)
            Wh = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
            bh = Tensor(rng.normal(size=3), requires_grad=True)
            x = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
            h = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            m = Tensor(rng.normal(size=(4, 3)))
            params = [Wx, bx, Wh, bh, x, h]

            def build():
                return tsum(mul(tanh(dual_affine(x, Wx, bx, h, Wh, bh)), m))
        elif op_name == "mul":
            a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            b = Tensor(rng.normal(size=3), requires_grad=True)  # broadcast
            params = [a, b]

            def build():
                return tsum(mul(a, b))
        elif op_name == "concat":
            a = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
            b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            m = Tensor(rng.normal(size=(3, 6)))
            params = [a, b]

            def build():
                return tsum(mul(concat((a, b), axis=1), m))
        elif op_name == "clip_log":
            a = Tensor(rng.uniform(0.2, 0.8, size=(6,)), requires_grad=True)
            params = [a]

            def build():
                return tsum(log(clip(a, 0.3, 0.7)))
        else:  # lstm
            cell = init_lstm_cell(rng, 2, 3)
            xs_data = rng.normal(size=(4, 2))
            params = [t for _, t in cell.named_tensors()]

            def build():
                xs = [Tensor(row) for row in xs_data]
                outs = bilstm_forward(cell, cell, xs)
                return tsum(concat(outs, axis=0))

        def value():
            with no_grad():
                return build().item()

        loss = build()
        loss.backward()
        for p in params:
            assert rel_err(p.grad, central_diff(value, p)) < 1e-4

    def test_grad_accumulates_across_shared_use(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        out = add(mul(w, Tensor(np.array([3.0]))), mul(w, w))
        backward(out, upstream=np.ones(1))
        np.testing.assert_allclose(w.grad, [3.0 + 4.0], atol=1e-14)


class TestNoGrad:
    def test_no_tape_recorded(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = mul(w, w)
        assert out._parents == ()
        assert not out.requires_grad

    def test_scale_and_mean(self):
        a = Tensor(np.arange(6, dtype=float).reshape(2, 3), requires_grad=True)
        m = mean(scale(a, 2.0))
        assert m.item() == pytest.approx(5.0)
        m.backward()
        np.testing.assert_allclose(a.grad, np.full((2, 3), 2.0 / 6.0), atol=1e-15)

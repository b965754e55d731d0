"""Sequence layers: shapes, masking, and gradients vs independent oracles."""

import numpy as np
import pytest

from crossmodal import tensor as T
from crossmodal.gradcheck import check_gradients
from crossmodal.layers import (
    BatchNorm,
    BiLstm,
    Conv1d,
    Dropout,
    InputError,
    LayerNorm,
    Linear,
    SeqBatch,
)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def lstm_loop_reference(x, gates, reverse=False):
    """Step-by-step scalar LSTM, independent of the tensor library.

    ``gates`` maps gate name -> (w [HxD], u [HxH], b [H]).
    """
    n_frames = x.shape[0]
    hidden = gates["input"][2].size
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    out = np.zeros((n_frames, hidden))
    order = range(n_frames - 1, -1, -1) if reverse else range(n_frames)
    for t in order:
        pre = {k: w @ x[t] + u @ h + b for k, (w, u, b) in gates.items()}
        gi = _sigmoid(pre["input"])
        gf = _sigmoid(pre["forget"])
        gg = np.tanh(pre["cell"])
        go = _sigmoid(pre["output"])
        c = gf * c + gi * gg
        h = go * np.tanh(c)
        out[t] = h
    return out


def _extract_gates(lstm, direction):
    return {
        g: (
            lstm._params[f"{direction}.{g}.w"].data,
            lstm._params[f"{direction}.{g}.u"].data,
            lstm._params[f"{direction}.{g}.b"].data,
        )
        for g in BiLstm.GATES
    }


class TestConv1d:
    def test_length_formula(self):
        rng = np.random.default_rng(0)
        conv = Conv1d(2, 3, kernel_size=3, stride=2, padding=1, rng=rng)
        out = conv(SeqBatch.single(rng.normal(size=(8, 2))))
        assert out.frames == 4
        assert list(out.lengths) == [4]

    def test_identity_kernel_reproduces_input(self):
        rng = np.random.default_rng(1)
        conv = Conv1d(2, 2, kernel_size=3, stride=1, padding=1, rng=rng)
        w = np.zeros((2, 2, 3))
        w[0, 0, 1] = 1.0
        w[1, 1, 1] = 1.0
        conv.weight.data[:] = w
        conv.bias.data[:] = 0.0
        x = rng.normal(size=(6, 2))
        out = conv(SeqBatch.single(x))
        np.testing.assert_allclose(out.x.data, x, atol=1e-12)

    def test_weight_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(2)
        conv = Conv1d(6, 3, kernel_size=3, stride=2, padding=1, rng=rng)
        x = rng.normal(size=(4, 6))

        def loss():
            return T.sum(conv(SeqBatch.single(x)).x)

        errs = check_gradients(loss, conv.parameters())
        assert max(errs.values()) < 1e-5, errs

    def test_stride2_halves_even_lengths(self):
        rng = np.random.default_rng(3)
        conv = Conv1d(2, 2, kernel_size=3, stride=2, padding=1, rng=rng)
        for n in (4, 8, 16, 60):
            out = conv(SeqBatch.single(rng.normal(size=(n, 2))))
            assert out.frames == n // 2
        # two layers -> T/4 when 4 | T
        conv2 = Conv1d(2, 2, kernel_size=3, stride=2, padding=1, rng=rng)
        for n in (4, 12, 40):
            out = conv2(conv(SeqBatch.single(rng.normal(size=(n, 2)))))
            assert out.frames == n // 4

    def test_too_short_raises(self):
        rng = np.random.default_rng(4)
        conv = Conv1d(2, 2, kernel_size=3, stride=1, padding=0, rng=rng)
        with pytest.raises(InputError, match="shorter"):
            conv(SeqBatch.single(rng.normal(size=(2, 2))))

    def test_mask_downsampling_mixed_lengths(self):
        rng = np.random.default_rng(5)
        conv = Conv1d(2, 3, kernel_size=3, stride=2, padding=1, rng=rng)
        block = np.zeros((2, 7, 2))
        block[0, :7] = rng.normal(size=(7, 2))
        block[1, :4] = rng.normal(size=(4, 2))
        out = conv(SeqBatch.from_padded(block, np.array([7, 4])))
        assert list(out.lengths) == [4, 2]
        # padded output rows are exactly zero
        assert (out.x.data[~out.valid_mask().reshape(-1)] == 0.0).all()

    def test_batched_matches_single(self):
        rng = np.random.default_rng(6)
        conv = Conv1d(3, 4, kernel_size=3, stride=2, padding=1, rng=rng)
        a = rng.normal(size=(9, 3))
        b = rng.normal(size=(5, 3))
        block = np.zeros((2, 9, 3))
        block[0] = a
        block[1, :5] = b
        batched = conv(SeqBatch.from_padded(block, np.array([9, 5])))
        for sample, idx in ((a, 0), (b, 1)):
            alone = conv(SeqBatch.single(sample))
            lo, hi = batched.rows_of(idx)
            np.testing.assert_allclose(
                batched.x.data[lo:hi], alone.x.data[: alone.lengths[0]], atol=1e-12
            )


class TestBiLstm:
    def test_zero_weights_zero_input_gives_zero(self):
        rng = np.random.default_rng(7)
        lstm = BiLstm(3, 2, rng=rng)
        for _, p in lstm.parameters():
            p.data[:] = 0.0
        out = lstm(SeqBatch.single(np.zeros((5, 3))))
        np.testing.assert_array_equal(out.x.data, np.zeros((5, 4)))

    def test_single_frame_mirrored_directions(self):
        rng = np.random.default_rng(8)
        lstm = BiLstm(3, 2, rng=rng)
        for g in BiLstm.GATES:
            for part in ("w", "u", "b"):
                lstm._params[f"bwd.{g}.{part}"].data[:] = lstm._params[f"fwd.{g}.{part}"].data
        out = lstm(SeqBatch.single(rng.normal(size=(1, 3)))).x.data
        np.testing.assert_allclose(out[0, :2], out[0, 2:], atol=1e-12)

    def test_matches_scalar_loop_reference(self):
        rng = np.random.default_rng(9)
        lstm = BiLstm(2, 2, rng=rng)
        x = rng.normal(size=(3, 2))
        out = lstm(SeqBatch.single(x)).x.data
        ref_f = lstm_loop_reference(x, _extract_gates(lstm, "fwd"))
        ref_b = lstm_loop_reference(x, _extract_gates(lstm, "bwd"), reverse=True)
        np.testing.assert_allclose(out, np.concatenate([ref_f, ref_b], axis=1), atol=1e-10)

    def test_forward_direction_is_causal(self):
        rng = np.random.default_rng(10)
        lstm = BiLstm(3, 4, rng=rng)
        x = rng.normal(size=(6, 3))
        base = lstm(SeqBatch.single(x)).x.data[:, :4].copy()
        x2 = x.copy()
        x2[4] += 10.0  # future frame for t <= 3
        pert = lstm(SeqBatch.single(x2)).x.data[:, :4]
        np.testing.assert_array_equal(base[:4], pert[:4])
        assert not np.allclose(base[4:], pert[4:])

    def test_padding_never_influences_valid_frames(self):
        rng = np.random.default_rng(11)
        lstm = BiLstm(3, 2, rng=rng)
        x = rng.normal(size=(4, 3))
        alone = lstm(SeqBatch.single(x)).x.data
        block = np.zeros((2, 9, 3))
        block[0, :4] = x
        block[1] = rng.normal(size=(9, 3))
        batched = lstm(SeqBatch.from_padded(block, np.array([4, 9])))
        lo, hi = batched.rows_of(0)
        np.testing.assert_allclose(batched.x.data[lo:hi], alone, atol=1e-12)
        assert (batched.x.data[hi:batched.frames] == 0.0).all()

    def test_parameter_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(12)
        lstm = BiLstm(2, 2, rng=rng)
        x = rng.normal(size=(3, 2))
        weights = np.array([0.7, -1.3, 0.4, 0.9])  # break symmetry in the loss

        def loss():
            out = lstm(SeqBatch.single(x)).x
            return T.sum(T.mask_mul(out, weights))

        errs = check_gradients(loss, lstm.parameters())
        assert max(errs.values()) < 1e-5, errs


class TestNorms:
    def test_layer_norm_constant_frame_is_zero(self):
        ln = LayerNorm(4)
        out = ln(T.Tensor(np.full((3, 4), 2.5)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_layer_norm_standardizes_each_frame(self):
        rng = np.random.default_rng(13)
        ln = LayerNorm(16)
        out = ln(T.Tensor(rng.normal(loc=3.0, scale=2.0, size=(5, 16)))).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-3)

    def test_layer_norm_gradients(self):
        rng = np.random.default_rng(14)
        ln = LayerNorm(5)
        ln.gain.data[:] = rng.normal(size=5)
        ln.shift.data[:] = rng.normal(size=5)
        x = T.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        weights = rng.normal(size=(3, 5))

        def loss():
            return T.sum(T.mask_mul(ln(x), weights))

        errs = check_gradients(loss, [("x", x)] + ln.parameters())
        assert max(errs.values()) < 1e-5, errs

    def test_batch_norm_inference_formula(self):
        rng = np.random.default_rng(15)
        bn = BatchNorm(3)
        bn.running_mean[:] = [1.0, -2.0, 0.5]
        bn.running_var[:] = [4.0, 0.25, 1.0]
        bn.gain.data[:] = [2.0, 1.0, -1.0]
        bn.shift.data[:] = [0.0, 1.0, 3.0]
        x = rng.normal(size=(6, 3))
        out = bn(SeqBatch.single(x), training=False).x.data
        expect = (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps) * bn.gain.data + bn.shift.data
        np.testing.assert_array_equal(out, expect)

    def test_batch_norm_single_valid_frame_raises(self):
        bn = BatchNorm(3)
        with pytest.raises(InputError, match="variance"):
            bn(SeqBatch.single(np.ones((1, 3))), training=True)

    def test_batch_norm_train_standardizes(self):
        rng = np.random.default_rng(16)
        bn = BatchNorm(4)
        out = bn(SeqBatch.single(rng.normal(loc=5.0, size=(50, 4))), training=True).x.data
        np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-4)

    def test_batch_norm_running_stats_update(self):
        rng = np.random.default_rng(17)
        bn = BatchNorm(2, momentum=0.1)
        x = rng.normal(size=(20, 2))
        bn(SeqBatch.single(x), training=True)
        np.testing.assert_allclose(bn.running_mean, 0.9 * 0.0 + 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(bn.running_var, 0.9 * 1.0 + 0.1 * x.var(axis=0))

    def test_batch_norm_ignores_padding(self):
        rng = np.random.default_rng(18)
        bn = BatchNorm(3)
        a = rng.normal(size=(6, 3))
        b = rng.normal(size=(4, 3))
        tight = np.zeros((2, 6, 3))
        tight[0] = a
        tight[1, :4] = b
        loose = np.zeros((2, 11, 3))
        loose[0, :6] = a
        loose[1, :4] = b
        out_tight = bn(SeqBatch.from_padded(tight, np.array([6, 4])), training=True)
        bn.running_mean[:] = 0.0
        bn.running_var[:] = 1.0
        out_loose = bn(SeqBatch.from_padded(loose, np.array([6, 4])), training=True)
        for s in range(2):
            lo_t, hi_t = out_tight.rows_of(s)
            lo_l, hi_l = out_loose.rows_of(s)
            np.testing.assert_allclose(
                out_tight.x.data[lo_t:hi_t], out_loose.x.data[lo_l:hi_l], atol=1e-12
            )

    def test_batch_norm_gradients(self):
        rng = np.random.default_rng(19)
        bn = BatchNorm(3)
        x = rng.normal(size=(2, 5, 3))
        lengths = np.array([5, 3])
        weights = rng.normal(size=(10, 3))

        def loss():
            out = bn(SeqBatch.from_padded(x, lengths), training=True)
            # freeze running stats so repeated evaluations are identical
            bn.running_mean[:] = 0.0
            bn.running_var[:] = 1.0
            return T.sum(T.mask_mul(out.x, weights))

        errs = check_gradients(loss, bn.parameters())
        assert max(errs.values()) < 1e-5, errs


class TestDropout:
    def test_eval_mode_is_bitwise_identity(self):
        rng = np.random.default_rng(20)
        x = T.Tensor(rng.normal(size=(7, 3)))
        out = Dropout(0.5)(x, rng, training=False)
        assert out is x

    def test_rate_zero_is_identity_in_train(self):
        rng = np.random.default_rng(21)
        x = T.Tensor(rng.normal(size=(7, 3)))
        out = Dropout(0.0)(x, rng, training=True)
        assert out is x

    def test_survivor_statistics(self):
        rng = np.random.default_rng(22)
        x = T.Tensor(np.ones(100_000))
        out = Dropout(0.2)(x, rng, training=True).data
        survivors = out != 0.0
        assert abs(survivors.mean() - 0.8) < 0.01
        assert (out[survivors] == 1.25).all()

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            Dropout(1.0)


class TestLinear:
    def test_affine_definition(self):
        rng = np.random.default_rng(23)
        lin = Linear(4, 3, rng=rng)
        x = rng.normal(size=(5, 4))
        out = lin(T.Tensor(x))
        np.testing.assert_allclose(out.data, x @ lin.weight.data.T + lin.bias.data)

    def test_gradients(self):
        rng = np.random.default_rng(24)
        lin = Linear(3, 2, rng=rng)
        x = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)

        def loss():
            return T.sum(lin(x))

        errs = check_gradients(loss, [("x", x)] + lin.parameters())
        assert max(errs.values()) < 1e-6, errs

"""Parameterized layers composed from the tensor core.

All sequence layers consume and produce a :class:`SeqBatch`: a batch of
right-padded, time-major frame sequences stored as one stacked 2-D tensor
(rows are frames, sample-major) plus per-sample valid lengths. Every layer
keeps the invariant that padded rows of its output are exactly zero, so
padding can never leak into valid frames downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class InputError(ValueError):
    """Raised when an input sequence violates a layer's preconditions."""


@dataclass
class SeqBatch:
    """Right-padded batch of frame sequences, stacked sample-major.

    ``x`` has shape [(batch * frames) x channels]; row ``b * frames + t``
    is frame ``t`` of sample ``b``. Frames at ``t >= lengths[b]`` are
    padding and must be zero.
    """

    x: Tensor
    lengths: np.ndarray  # [batch] ints
    frames: int          # common padded length

    @property
    def batch(self) -> int:
        return len(self.lengths)

    @property
    def channels(self) -> int:
        return self.x.shape[1]

    def valid_mask(self) -> np.ndarray:
        """Boolean [batch x frames] marking real frames."""
        return np.arange(self.frames)[None, :] < self.lengths[:, None]

    def mask_col(self) -> np.ndarray:
        """Float column [(batch*frames) x 1] of the valid mask, in x's dtype."""
        return self.valid_mask().reshape(-1, 1).astype(self.x.dtype)

    def rows_of(self, b: int) -> tuple[int, int]:
        """Row range (start, stop) of sample ``b``'s valid frames."""
        start = b * self.frames
        return start, start + int(self.lengths[b])

    @classmethod
    def single(cls, features: np.ndarray, dtype=np.float64) -> "SeqBatch":
        """Wrap one unpadded [T x D] sequence as a batch of one."""
        arr = np.asarray(features, dtype=dtype)
        if arr.ndim != 2:
            raise InputError(f"expected a [T x D] sequence, got shape {arr.shape}")
        return cls(x=Tensor(arr), lengths=np.array([arr.shape[0]]), frames=arr.shape[0])

    @classmethod
    def from_padded(cls, block: np.ndarray, lengths: np.ndarray, dtype=np.float64) -> "SeqBatch":
        """Wrap a padded [B x T x D] block; padded frames are forced to zero."""
        arr = np.asarray(block, dtype=dtype)
        if arr.ndim != 3:
            raise InputError(f"expected a [B x T x D] block, got shape {arr.shape}")
        lengths = np.asarray(lengths, dtype=np.int64)
        b, t, d = arr.shape
        mask = (np.arange(t)[None, :] < lengths[:, None]).astype(arr.dtype)
        arr = arr * mask[:, :, None]
        return cls(x=Tensor(arr.reshape(b * t, d)), lengths=lengths, frames=t)

    def to_arrays(self) -> list[np.ndarray]:
        """Per-sample [len x C] numpy views of the valid frames."""
        out = []
        for b in range(self.batch):
            lo, hi = self.rows_of(b)
            out.append(self.x.data[lo:hi])
        return out


def zero_padding_rows(seqs: SeqBatch) -> SeqBatch:
    """Force padded rows of the stacked tensor to zero (grad-correct)."""
    if bool(seqs.valid_mask().all()):
        return seqs
    return SeqBatch(T.mask_mul(seqs.x, seqs.mask_col()), seqs.lengths, seqs.frames)


def _uniform(rng: np.random.Generator, bound: float, shape, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return _uniform(rng, np.sqrt(6.0 / fan_in), shape, dtype)


class Linear:
    """Affine map: out = x @ weight.T + bias, weight stored [out x in]."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float64):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(kaiming_uniform(rng, (out_dim, in_dim), in_dim, dtype), requires_grad=True)
        self.bias = Tensor(_uniform(rng, 1.0 / np.sqrt(in_dim), out_dim, dtype), requires_grad=True)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("weight", self.weight), ("bias", self.bias)]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise InputError(f"linear expects {self.in_dim} features, got {x.shape[-1]}")
        return T.bias_add(T.matmul(x, T.transpose(self.weight)), self.bias)


class Conv1d:
    """1-D convolution over time, weight stored [out x in x kernel].

    Output length follows floor((L + 2*padding - kernel)/stride) + 1; an
    output frame is valid iff the input frame at the centre of its
    receptive field is valid.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int, padding: int,
                 rng: np.random.Generator, dtype=np.float64):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size
        self.weight = Tensor(
            kaiming_uniform(rng, (out_channels, in_channels, kernel_size), fan_in, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(_uniform(rng, 1.0 / np.sqrt(fan_in), out_channels, dtype), requires_grad=True)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("weight", self.weight), ("bias", self.bias)]

    def out_frames(self, in_frames: int) -> int:
        return (in_frames + 2 * self.padding - self.kernel_size) // self.stride + 1

    def out_lengths(self, lengths: np.ndarray, out_frames: int) -> np.ndarray:
        # valid output frame t: centre input frame t*stride + (k-1)//2 - padding < length
        centre_shift = (self.kernel_size - 1) // 2 - self.padding
        counts = np.ceil((lengths - centre_shift) / self.stride).astype(np.int64)
        if (counts < 1).any():
            raise InputError(
                f"a sample of length {int(lengths.min())} is shorter than the "
                f"receptive field of this convolution"
            )
        return np.minimum(counts, out_frames)

    def __call__(self, seqs: SeqBatch) -> SeqBatch:
        if seqs.channels != self.in_channels:
            raise InputError(
                f"conv1d expects {self.in_channels} channels, got {seqs.channels}"
            )
        t_in = seqs.frames
        if t_in + 2 * self.padding < self.kernel_size:
            raise InputError(
                f"sequence of {t_in} frames is shorter than the receptive field "
                f"(kernel {self.kernel_size}, padding {self.padding})"
            )
        t_out = self.out_frames(t_in)
        b = seqs.batch

        # im2col row gather: index -1 marks taps outside the sample's frame range
        taps = np.arange(self.kernel_size)
        starts = np.arange(t_out) * self.stride - self.padding
        rel = starts[:, None] + taps[None, :]                     # [t_out x k]
        base = (np.arange(b) * t_in)[:, None, None]
        idx = np.where((rel >= 0) & (rel < t_in), rel[None] + base, -1)

        cols = T.take_rows(seqs.x, idx.reshape(-1))               # [(b*t_out*k) x in]
        cols = T.reshape(cols, (b * t_out, self.kernel_size * self.in_channels))
        w2d = T.reshape(T.transpose(self.weight, (0, 2, 1)),
                        (self.out_channels, self.kernel_size * self.in_channels))
        out = T.bias_add(T.matmul(cols, T.transpose(w2d)), self.bias)
        result = SeqBatch(out, self.out_lengths(seqs.lengths, t_out), t_out)
        return zero_padding_rows(result)


class BatchNorm:
    """Per-channel normalization over all valid frames of the batch.

    Training mode uses masked batch statistics (population variance) and
    updates the running buffers with momentum; inference mode applies
    (x - running_mean) / sqrt(running_var + eps) * gain + shift exactly.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float64):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gain = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("gain", self.gain), ("shift", self.shift)]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def __call__(self, seqs: SeqBatch, training: bool) -> SeqBatch:
        if seqs.channels != self.channels:
            raise InputError(f"batch_norm expects {self.channels} channels, got {seqs.channels}")
        x = seqs.x
        if training:
            mask = seqs.mask_col()
            count = float(mask.sum())
            if count <= 1:
                raise InputError(
                    "batch_norm needs more than one valid frame to estimate variance"
                )
            masked = T.mask_mul(x, mask)
            mu = T.scale(T.sum(masked, axis=0), 1.0 / count)
            mean_sq = T.scale(T.sum(T.mask_mul(T.mul(x, x), mask), axis=0), 1.0 / count)
            var = T.sub(mean_sq, T.mul(mu, mu))
            inv = T.reciprocal(T.sqrt(T.add(var, self.eps)))
            xhat = T.channel_scale(T.bias_add(x, T.scale(mu, -1.0)), inv)
            m = self.momentum
            self.running_mean *= 1 - m
            self.running_mean += m * mu.data
            self.running_var *= 1 - m
            self.running_var += m * var.data
        else:
            # literal (x - m) / sqrt(v + eps) * gain + shift, bit-exact
            std = np.sqrt(self.running_var + self.eps).astype(x.dtype)
            mean_ = self.running_mean.astype(x.dtype)
            xhat_data = (x.data - mean_) / std
            gain, shift = self.gain, self.shift
            out_data = xhat_data * gain.data + shift.data

            def back(dout):
                return (
                    dout * gain.data / std,
                    (dout * xhat_data).sum(axis=0),
                    dout.sum(axis=0),
                )

            out = T.record(out_data, (x, gain, shift), back)
            return zero_padding_rows(SeqBatch(out, seqs.lengths, seqs.frames))
        out = T.bias_add(T.channel_scale(xhat, self.gain), self.shift)
        return zero_padding_rows(SeqBatch(out, seqs.lengths, seqs.frames))


class LayerNorm:
    """Per-frame normalization over features (population variance)."""

    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float64):
        self.dim = dim
        self.eps = eps
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("gain", self.gain), ("shift", self.shift)]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.dim:
            raise InputError(f"layer_norm expects {self.dim} features, got {x.shape[-1]}")
        mu = T.mean(x, axis=1)
        centered = T.row_shift(x, T.scale(mu, -1.0))
        var = T.mean(T.mul(centered, centered), axis=1)
        inv = T.reciprocal(T.sqrt(T.add(var, self.eps)))
        xhat = T.row_scale(centered, inv)
        return T.bias_add(T.channel_scale(xhat, self.gain), self.shift)


class Dropout:
    """Inverted dropout: train mode zeroes with probability ``rate`` and
    scales survivors by 1/(1-rate); eval mode is the identity."""

    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def __call__(self, x: Tensor, rng: np.random.Generator, training: bool) -> Tensor:
        if not training or self.rate == 0.0:
            return x
        keep = (rng.random(x.shape) >= self.rate).astype(x.dtype)
        return T.mask_mul(x, keep * (1.0 / (1.0 - self.rate)))


class BiLstm:
    """Single bidirectional LSTM layer; per-frame output is [h_fwd ; h_bwd].

    Standard recurrence per direction: input/forget/output gates via
    sigmoid, candidate via tanh, c_t = f*c_{t-1} + i*g, h_t = o*tanh(c_t),
    zero initial states. The backward direction visits only valid frames,
    in reverse. Weights start uniform(-1/sqrt(H), 1/sqrt(H)) with
    forget-gate biases at 1.0.
    """

    GATES = ("input", "forget", "cell", "output")

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator, dtype=np.float64):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        bound = 1.0 / np.sqrt(hidden_dim)
        self._params: dict[str, Tensor] = {}
        for direction in ("fwd", "bwd"):
            for gate in self.GATES:
                w = Tensor(_uniform(rng, bound, (hidden_dim, input_dim), dtype), requires_grad=True)
                u = Tensor(_uniform(rng, bound, (hidden_dim, hidden_dim), dtype), requires_grad=True)
                b_init = np.full(hidden_dim, 1.0 if gate == "forget" else 0.0, dtype=dtype)
                b = Tensor(b_init, requires_grad=True)
                self._params[f"{direction}.{gate}.w"] = w
                self._params[f"{direction}.{gate}.u"] = u
                self._params[f"{direction}.{gate}.b"] = b

    def parameters(self) -> list[tuple[str, Tensor]]:
        return sorted(self._params.items())

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden_dim

    def _run_direction(self, seqs: SeqBatch, direction: str) -> Tensor:
        h_dim = self.hidden_dim
        b, t_max = seqs.batch, seqs.frames
        w_cat = T.concat([self._params[f"{direction}.{g}.w"] for g in self.GATES], axis=0)
        u_cat = T.concat([self._params[f"{direction}.{g}.u"] for g in self.GATES], axis=0)
        b_cat = T.concat([self._params[f"{direction}.{g}.b"] for g in self.GATES], axis=0)

        x_proj = T.bias_add(T.matmul(seqs.x, T.transpose(w_cat)), b_cat)  # [(b*t) x 4H]
        u_t = T.transpose(u_cat)
        valid = seqs.valid_mask().astype(seqs.x.dtype)
        base = np.arange(b) * t_max

        h = Tensor(np.zeros((b, h_dim), dtype=seqs.x.dtype))
        c = Tensor(np.zeros((b, h_dim), dtype=seqs.x.dtype))
        steps = range(t_max) if direction == "fwd" else range(t_max - 1, -1, -1)
        frames: list[Tensor | None] = [None] * t_max
        for t in steps:
            rows = T.take_rows(x_proj, base + t)
            gates = T.add(rows, T.matmul(h, u_t))
            gi = T.sigmoid(T.narrow(gates, 1, 0, h_dim))
            gf = T.sigmoid(T.narrow(gates, 1, h_dim, h_dim))
            gg = T.tanh(T.narrow(gates, 1, 2 * h_dim, h_dim))
            go = T.sigmoid(T.narrow(gates, 1, 3 * h_dim, h_dim))
            c_new = T.add(T.mul(gf, c), T.mul(gi, gg))
            h_new = T.mul(go, T.tanh(c_new))
            m = valid[:, t:t + 1]
            if m.all():
                c, h = c_new, h_new
            else:
                c = T.add(T.mask_mul(c_new, m), T.mask_mul(c, 1.0 - m))
                h = T.add(T.mask_mul(h_new, m), T.mask_mul(h, 1.0 - m))
            frames[t] = h

        stacked = T.concat(frames, axis=0)                        # t-major [(t*b) x H]
        rows = np.arange(b * t_max)
        to_sample_major = (rows % t_max) * b + rows // t_max
        return T.take_rows(stacked, to_sample_major)

    def __call__(self, seqs: SeqBatch) -> SeqBatch:
        if seqs.channels != self.input_dim:
            raise InputError(f"bilstm expects {self.input_dim} features, got {seqs.channels}")
        fwd = self._run_direction(seqs, "fwd")
        bwd = self._run_direction(seqs, "bwd")
        out = T.concat([fwd, bwd], axis=1)
        return zero_padding_rows(SeqBatch(out, seqs.lengths, seqs.frames))

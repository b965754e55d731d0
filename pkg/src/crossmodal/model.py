"""The two-stream emotion classifier.

Audio stream: two strided 1-D convolutions (each with batch norm + ReLU)
followed by a bidirectional LSTM, reducing the frame rate four-fold and
landing on the shared model width. Text stream: a kernel-1 convolution
projecting token vectors to the same width. Two cross-modal attention
blocks attend in both directions (audio queries over text keys, and the
mirror), each stream is pooled to its mean and standard deviation over
time, and the concatenated utterance vector feeds a linear classifier.

Unimodal variants keep one stream, skip attention entirely, and classify
the pooled stream directly.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .layers import (
    BatchNorm,
    BiLstm,
    Conv1d,
    Dropout,
    InputError,
    LayerNorm,
    Linear,
    SeqBatch,
    zero_padding_rows,
)
from .tensor import Tensor

MODES = ("fused", "audio", "text")

POOL_EPS = 1e-8


class DegenerateAttentionError(ValueError):
    """All key frames of an attention input are masked."""


@dataclass
class ModelConfig:
    """Hyperparameters shaping the network; defaults follow the full-size setup."""

    audio_input_dim: int = 1024
    text_input_dim: int = 768
    model_dim: int = 256       # conv filters, BiLSTM output, attention width
    conv_kernel: int = 3
    conv_stride: int = 2
    conv_padding: int = 1
    lstm_hidden: int = 128
    dropout: float = 0.2
    heads: int = 8
    head_dim: int = 32
    ffn_dim: int = 256
    classes: int = 4
    residual: bool = True
    precision: str = "float64"

    def __post_init__(self):
        if 2 * self.lstm_hidden != self.model_dim:
            raise ValueError(
                f"BiLSTM output (2 x {self.lstm_hidden}) must equal model_dim "
                f"({self.model_dim})"
            )
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    @property
    def pooled_dim(self) -> int:
        return 2 * self.model_dim

    @property
    def fused_dim(self) -> int:
        return 2 * self.pooled_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """A minimal configuration for gradient checks and fast tests."""
        base = dict(
            audio_input_dim=8, text_input_dim=8, model_dim=8, lstm_hidden=4,
            heads=2, head_dim=2, ffn_dim=8, dropout=0.0,
        )
        base.update(overrides)
        return cls(**base)


class AudioFeatureEncoder:
    """conv -> bn -> relu, twice, then BiLSTM with dropout on its output."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.dtype
        self.cfg = cfg
        self.conv1 = Conv1d(cfg.audio_input_dim, cfg.model_dim, cfg.conv_kernel,
                            cfg.conv_stride, cfg.conv_padding, rng, dtype=d)
        self.bn1 = BatchNorm(cfg.model_dim, dtype=d)
        self.conv2 = Conv1d(cfg.model_dim, cfg.model_dim, cfg.conv_kernel,
                            cfg.conv_stride, cfg.conv_padding, rng, dtype=d)
        self.bn2 = BatchNorm(cfg.model_dim, dtype=d)
        self.bilstm = BiLstm(cfg.model_dim, cfg.lstm_hidden, rng, dtype=d)
        self.drop = Dropout(cfg.dropout)

    def parameters(self):
        out = []
        for name, mod in (("conv1", self.conv1), ("bn1", self.bn1),
                          ("conv2", self.conv2), ("bn2", self.bn2),
                          ("bilstm", self.bilstm)):
            out += [(f"{name}.{p}", t) for p, t in mod.parameters()]
        return out

    def buffers(self):
        out = []
        for name, mod in (("bn1", self.bn1), ("bn2", self.bn2)):
            out += [(f"{name}.{p}", a) for p, a in mod.buffers()]
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        mod_name, attr = name.split(".", 1)
        mod = {"bn1": self.bn1, "bn2": self.bn2}[mod_name]
        getattr(mod, attr)[:] = value

    def __call__(self, seqs: SeqBatch, training: bool, rng: np.random.Generator | None) -> SeqBatch:
        if int(seqs.lengths.min()) < 4:
            raise InputError(
                f"audio sequence of {int(seqs.lengths.min())} frames is too short "
                f"(need at least 4)"
            )
        h = self.conv1(seqs)
        h = SeqBatch(T.relu(self.bn1(h, training).x), h.lengths, h.frames)
        h = self.conv2(h)
        h = SeqBatch(T.relu(self.bn2(h, training).x), h.lengths, h.frames)
        h = self.bilstm(h)
        if training and self.cfg.dropout > 0.0:
            h = zero_padding_rows(SeqBatch(self.drop(h.x, rng, training), h.lengths, h.frames))
        return h


class TextProjection:
    """Kernel-1 convolution: a shared per-frame linear map to the model width."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.proj = Conv1d(cfg.text_input_dim, cfg.model_dim, kernel_size=1,
                           stride=1, padding=0, rng=rng, dtype=cfg.dtype)

    def parameters(self):
        return [(f"proj.{p}", t) for p, t in self.proj.parameters()]

    def __call__(self, seqs: SeqBatch) -> SeqBatch:
        return self.proj(seqs)


class CrossModalAttention:
    """Multi-head scaled dot-product attention across modalities.

    Queries come from one stream, keys/values from the other. Layer norm is
    applied to both inputs before the projections (pre-norm); residual
    connections wrap the attention and feed-forward sublayers unless
    disabled in the config.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.dtype
        self.cfg = cfg
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        width = cfg.heads * cfg.head_dim
        self.ln_query = LayerNorm(cfg.model_dim, dtype=d)
        self.ln_kv = LayerNorm(cfg.model_dim, dtype=d)
        self.w_query = Linear(cfg.model_dim, width, rng, dtype=d)
        self.w_key = Linear(cfg.model_dim, width, rng, dtype=d)
        self.w_value = Linear(cfg.model_dim, width, rng, dtype=d)
        self.w_out = Linear(width, cfg.model_dim, rng, dtype=d)
        self.ffn_in = Linear(cfg.model_dim, cfg.ffn_dim, rng, dtype=d)
        self.ffn_out = Linear(cfg.ffn_dim, cfg.model_dim, rng, dtype=d)

    def parameters(self):
        out = []
        for name, mod in (("ln_query", self.ln_query), ("ln_kv", self.ln_kv),
                          ("w_query", self.w_query), ("w_key", self.w_key),
                          ("w_value", self.w_value), ("w_out", self.w_out),
                          ("ffn_in", self.ffn_in), ("ffn_out", self.ffn_out)):
            out += [(f"{name}.{p}", t) for p, t in mod.parameters()]
        return out

    def _heads_first(self, x: Tensor, batch: int, frames: int) -> Tensor:
        x = T.reshape(x, (batch, frames, self.heads, self.head_dim))
        return T.transpose(x, (0, 2, 1, 3))

    def __call__(self, query: SeqBatch, kv: SeqBatch) -> tuple[SeqBatch, np.ndarray]:
        if (kv.lengths < 1).any():
            raise DegenerateAttentionError("a sample has no valid key/value frames")
        b, tq, tk = query.batch, query.frames, kv.frames

        q_in = self.ln_query(query.x)
        kv_in = self.ln_kv(kv.x)
        q = self._heads_first(self.w_query(q_in), b, tq)               # [b,h,tq,hd]
        k = T.transpose(self._heads_first(self.w_key(kv_in), b, tk), (0, 1, 3, 2))
        v = self._heads_first(self.w_value(kv_in), b, tk)              # [b,h,tk,hd]

        scores = T.scale(T.matmul(q, k), 1.0 / np.sqrt(self.head_dim))
        key_mask = kv.valid_mask()[:, None, None, :]                   # [b,1,1,tk]
        attn = T.softmax(scores, axis=-1, mask=key_mask)               # [b,h,tq,tk]
        ctx = T.matmul(attn, v)                                        # [b,h,tq,hd]
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b * tq, self.heads * self.head_dim))
        attended = self.w_out(ctx)

        x1 = T.add(query.x, attended) if self.cfg.residual else attended
        ffn = self.ffn_out(T.relu(self.ffn_in(x1)))
        out = T.add(x1, ffn) if self.cfg.residual else ffn

        seq_out = zero_padding_rows(SeqBatch(out, query.lengths, query.frames))
        return seq_out, attn.data


def stats_pool(seqs: SeqBatch) -> Tensor:
    """Per-sample [mean ; population std] over valid frames -> [B x 2C].

    The variance gets a 1e-8 floor inside the square root, keeping the op
    differentiable for constant (zero-variance) sequences.
    """
    if (seqs.lengths < 1).any():
        raise InputError("stats_pool requires at least one valid frame per sample")
    b, t, c = seqs.batch, seqs.frames, seqs.channels
    x3 = T.reshape(seqs.x, (b, t, c))
    mask3 = seqs.valid_mask()[:, :, None].astype(seqs.x.dtype)
    inv_counts = (1.0 / seqs.lengths.astype(seqs.x.dtype))[:, None]

    mu = T.mask_mul(T.sum(T.mask_mul(x3, mask3), axis=1), inv_counts)
    mean_sq = T.mask_mul(T.sum(T.mask_mul(T.mul(x3, x3), mask3), axis=1), inv_counts)
    var = T.relu(T.sub(mean_sq, T.mul(mu, mu)))   # clamp rounding residue
    std = T.sqrt(T.add(var, POOL_EPS))
    return T.concat([mu, std], axis=1)


class EmotionClassifier:
    """Complete classifier in one of three modes: fused, audio-only, text-only.

    Unimodal modes build no attention blocks at all, so their parameter
    lists contain no cross-modal weights.
    """

    def __init__(self, cfg: ModelConfig, mode: str = "fused", seed: int = 0):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.cfg = cfg
        self.mode = mode
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        d = cfg.dtype

        self.audio_encoder = None
        self.text_projection = None
        self.cma_audio_query = None
        self.cma_text_query = None
        self.classifier = None

        if mode in ("fused", "audio"):
            self.audio_encoder = AudioFeatureEncoder(cfg, rng)
        if mode in ("fused", "text"):
            self.text_projection = TextProjection(cfg, rng)
        if mode == "fused":
            self.cma_audio_query = CrossModalAttention(cfg, rng)
            self.cma_text_query = CrossModalAttention(cfg, rng)
            self.classifier = Linear(cfg.fused_dim, cfg.classes, rng, dtype=d)
        else:
            self.classifier = Linear(cfg.pooled_dim, cfg.classes, rng, dtype=d)

    # -- parameter plumbing -------------------------------------------------

    def _components(self):
        comps = []
        if self.audio_encoder is not None:
            comps.append(("audio_encoder", self.audio_encoder))
        if self.text_projection is not None:
            comps.append(("text_projection", self.text_projection))
        if self.cma_audio_query is not None:
            comps.append(("cma_audio_query", self.cma_audio_query))
            comps.append(("cma_text_query", self.cma_text_query))
        comps.append(("classifier", self.classifier))
        return comps

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for prefix, comp in self._components():
            out += [(f"{prefix}.{n}", t) for n, t in comp.parameters()]
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        if self.audio_encoder is None:
            return []
        return [(f"audio_encoder.{n}", a) for n, a in self.audio_encoder.buffers()]

    def num_parameters(self) -> int:
        return int(np.sum([t.size for _, t in self.named_parameters()]))

    def encoder_parameter_names(self) -> set[str]:
        """Names covered by the freeze-encoders flag: the audio feature
        encoder and the text projection."""
        return {
            name for name, _ in self.named_parameters()
            if name.startswith(("audio_encoder.", "text_projection."))
        }

    # -- forward ------------------------------------------------------------

    def _check_dims(self, seqs: SeqBatch, expected: int, stream: str) -> None:
        if seqs.channels != expected:
            raise InputError(
                f"{stream} features must have dimension {expected}, got {seqs.channels}"
            )

    def forward_batch(
        self,
        audio: SeqBatch | None,
        text: SeqBatch | None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, np.ndarray | None, np.ndarray | None]:
        """Run a padded batch; returns (logits [B x classes], attn1, attn2).

        The attention tensors are the post-softmax weights
        [B x heads x Tq x Tk], None for unimodal modes.
        """
        attn1 = attn2 = None
        if self.mode in ("fused", "audio"):
            if audio is None:
                raise InputError("audio features required in mode " + self.mode)
            self._check_dims(audio, self.cfg.audio_input_dim, "audio")
            audio_hidden = self.audio_encoder(audio, training, rng)
        if self.mode in ("fused", "text"):
            if text is None:
                raise InputError("text features required in mode " + self.mode)
            self._check_dims(text, self.cfg.text_input_dim, "text")
            text_hidden = self.text_projection(text)

        if self.mode == "fused":
            from_audio, attn1 = self.cma_audio_query(audio_hidden, text_hidden)
            from_text, attn2 = self.cma_text_query(text_hidden, audio_hidden)
            fused = T.concat([stats_pool(from_audio), stats_pool(from_text)], axis=1)
            logits = self.classifier(fused)
        elif self.mode == "audio":
            logits = self.classifier(stats_pool(audio_hidden))
        else:
            logits = self.classifier(stats_pool(text_hidden))
        return logits, attn1, attn2

    def forward(
        self,
        audio_features: np.ndarray | None,
        text_features: np.ndarray | None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, np.ndarray | None, np.ndarray | None]:
        """Single-utterance forward; attention weights come back as
        [heads x Tq x Tk]."""
        d = self.cfg.dtype
        audio = SeqBatch.single(audio_features, dtype=d) if audio_features is not None else None
        text = SeqBatch.single(text_features, dtype=d) if text_features is not None else None
        logits, attn1, attn2 = self.forward_batch(audio, text, training, rng)
        squeeze = lambda a: None if a is None else a[0]
        return T.reshape(logits, (self.cfg.classes,)), squeeze(attn1), squeeze(attn2)

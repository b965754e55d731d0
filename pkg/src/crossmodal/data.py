"""Feature files, the synthetic fusion task, and batching.

The on-disk interchange format ("CMAF") carries, per utterance, an id,
session, label, and two float32 feature matrices: audio frames (1024-dim)
and text token vectors (768-dim). All integers are unsigned 32-bit
little-endian unless noted; there is no alignment padding, so files are
bit-exact across producers.

The synthetic task plants one motif per modality into a reserved channel
band of otherwise-Gaussian features. The audio motif encodes the label's
high bit, the text motif its low bit, so either modality alone caps at
50% accuracy while both together determine the label exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

EMOTIONS = ("angry", "happy", "neutral", "sad")
AUDIO_DIM = 1024
TEXT_DIM = 768
SESSIONS = (1, 2, 3, 4, 5)

MAGIC = b"CMAF"
VERSION = 1


class FeatureFileError(ValueError):
    """Malformed feature file or invalid sample data."""


@dataclass
class FeatureSequence:
    """Time-major [frames x dim] float32 features for one modality."""

    features: np.ndarray
    modality: str

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise FeatureFileError(
                f"{self.modality} features must be [frames x dim], got shape "
                f"{self.features.shape}"
            )

    @property
    def frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class UtteranceSample:
    """One labeled example: id, session, audio and text feature sequences."""

    utt_id: str
    session: int
    label: int
    audio: FeatureSequence
    text: FeatureSequence

    def validate(self) -> None:
        if self.session not in SESSIONS:
            raise FeatureFileError(
                f"utterance {self.utt_id!r}: session {self.session} outside 1..5"
            )
        if not 0 <= self.label < len(EMOTIONS):
            raise FeatureFileError(
                f"utterance {self.utt_id!r}: label {self.label} outside 0..3"
            )
        if self.audio.dim != AUDIO_DIM:
            raise FeatureFileError(
                f"utterance {self.utt_id!r}: audio dim {self.audio.dim} != {AUDIO_DIM}"
            )
        if self.text.dim != TEXT_DIM:
            raise FeatureFileError(
                f"utterance {self.utt_id!r}: text dim {self.text.dim} != {TEXT_DIM}"
            )


# ---------------------------------------------------------------------------
# CMAF read/write
# ---------------------------------------------------------------------------

def write_feature_file(samples: list[UtteranceSample], path: str | Path) -> None:
    for s in samples:
        s.validate()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(samples)))
        for s in samples:
            raw_id = s.utt_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_id)))
            fh.write(raw_id)
            fh.write(struct.pack("<BB", s.session, s.label))
            for seq in (s.audio, s.text):
                fh.write(struct.pack("<II", seq.frames, seq.dim))
                fh.write(np.ascontiguousarray(seq.features, dtype="<f4").tobytes())


class _Cursor:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path
        self.context = "header"

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FeatureFileError(
                f"{self.path}: truncated while reading {self.context}"
            )
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def read_feature_file(path: str | Path) -> list[UtteranceSample]:
    """Parse and validate a CMAF file; every malformation is a distinct error."""
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read(), str(path))
    if cur.take(4) != MAGIC:
        raise FeatureFileError(f"{path}: bad magic (not a CMAF feature file)")
    version = cur.u32()
    if version != VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    count = cur.u32()
    samples = []
    for i in range(count):
        cur.context = f"utterance #{i}"
        utt_id = cur.take(cur.u32()).decode("utf-8")
        cur.context = f"utterance {utt_id!r}"
        session = cur.u8()
        label = cur.u8()
        if session not in SESSIONS:
            raise FeatureFileError(f"{path}: utterance {utt_id!r}: session {session} outside 1..5")
        if label >= len(EMOTIONS):
            raise FeatureFileError(f"{path}: utterance {utt_id!r}: label {label} outside 0..3")
        seqs = {}
        for modality, want_dim in (("audio", AUDIO_DIM), ("text", TEXT_DIM)):
            frames, dim = cur.u32(), cur.u32()
            if dim != want_dim:
                raise FeatureFileError(
                    f"{path}: utterance {utt_id!r}: {modality} dim {dim} != {want_dim}"
                )
            raw = cur.take(4 * frames * dim)
            feats = np.frombuffer(raw, dtype="<f4").reshape(frames, dim)
            seqs[modality] = FeatureSequence(feats.copy(), modality)
        samples.append(UtteranceSample(utt_id, session, label, seqs["audio"], seqs["text"]))
    if cur.pos != len(cur.blob):
        raise FeatureFileError(f"{path}: {len(cur.blob) - cur.pos} trailing bytes")
    return samples


# ---------------------------------------------------------------------------
# synthetic fusion-required task
# ---------------------------------------------------------------------------

@dataclass
class SyntheticTaskSpec:
    """Controls the generator. The label is 2*audio_bit + text_bit; each
    modality's motif bank has two patterns per bit value (four total)."""

    count: int = 1000
    noise: float = 0.2
    audio_len: tuple[int, int] = (40, 120)
    text_len: tuple[int, int] = (5, 20)
    band: int = 64          # reserved channels carrying the motif
    audio_motif_frames: int = 8
    text_motif_frames: int = 3
    amplitude: float = 1.5
    seed: int = 0

    def validate(self) -> None:
        if self.count < 1:
            raise ValueError("count must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        lo, hi = self.audio_len
        if not (4 <= lo <= hi) or lo < self.audio_motif_frames:
            raise ValueError(f"invalid audio length range {self.audio_len}")
        lo, hi = self.text_len
        if not (1 <= lo <= hi) or lo < self.text_motif_frames:
            raise ValueError(f"invalid text length range {self.text_len}")
        if not 0 < self.band <= min(AUDIO_DIM, TEXT_DIM):
            raise ValueError(f"invalid band width {self.band}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["audio_len"] = list(d["audio_len"])
        d["text_len"] = list(d["text_len"])
        return d


@dataclass
class MotifBanks:
    """The four patterns per modality; index = 2*bit + variant."""

    audio: np.ndarray  # [4 x audio_motif_frames x band]
    text: np.ndarray   # [4 x text_motif_frames x band]


def motif_banks(spec: SyntheticTaskSpec) -> MotifBanks:
    bank_rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(2)[0])
    audio = bank_rng.choice([-1.0, 1.0], size=(4, spec.audio_motif_frames, spec.band))
    text = bank_rng.choice([-1.0, 1.0], size=(4, spec.text_motif_frames, spec.band))
    return MotifBanks(audio * spec.amplitude, text * spec.amplitude)


def generate_synthetic(spec: SyntheticTaskSpec) -> list[UtteranceSample]:
    """Balanced, session-round-robin samples whose label needs both modalities.

    Classes cycle 0..3 and sessions advance every full class cycle, so any
    count gives per-session class balance within one sample.
    """
    spec.validate()
    banks = motif_banks(spec)
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(2)[1])
    samples = []
    for i in range(spec.count):
        label = i % 4
        session = (i // 4) % 5 + 1
        audio_bit, text_bit = label >> 1, label & 1

        def one_stream(bit, length_range, bank, motif_frames, dim, modality):
            length = int(rng.integers(length_range[0], length_range[1] + 1))
            feats = rng.normal(0.0, spec.noise, size=(length, dim)) if spec.noise > 0 \
                else np.zeros((length, dim))
            variant = int(rng.integers(2))
            offset = int(rng.integers(0, length - motif_frames + 1))
            feats[offset:offset + motif_frames, :spec.band] += bank[2 * bit + variant]
            return FeatureSequence(feats, modality)

        audio = one_stream(audio_bit, spec.audio_len, banks.audio,
                           spec.audio_motif_frames, AUDIO_DIM, "audio")
        text = one_stream(text_bit, spec.text_len, banks.text,
                          spec.text_motif_frames, TEXT_DIM, "text")
        samples.append(UtteranceSample(f"synth-{i:05d}", session, label, audio, text))
    return samples


def decode_nearest_motif(seq: FeatureSequence, bank: np.ndarray) -> int:
    """Best-matching pattern index by least residual over all offsets.

    Serves as the (Bayes-proxy) oracle: with the generator's additive
    construction the residual at the true offset and pattern is exactly
    the noise energy.
    """
    motif_frames, band = bank.shape[1], bank.shape[2]
    windows = np.stack([
        seq.features[off:off + motif_frames, :band]
        for off in range(seq.frames - motif_frames + 1)
    ])  # [offsets x frames x band]
    # residual energy for each (offset, pattern)
    diffs = windows[:, None, :, :] - bank[None, :, :, :]
    scores = (diffs ** 2).sum(axis=(2, 3))
    return int(np.unravel_index(scores.argmin(), scores.shape)[1])


def decode_bits(sample: UtteranceSample, banks: MotifBanks) -> tuple[int, int]:
    """(audio_bit, text_bit) recovered by the nearest-motif decoder."""
    return (
        decode_nearest_motif(sample.audio, banks.audio) // 2,
        decode_nearest_motif(sample.text, banks.text) // 2,
    )


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Zero-padded feature blocks plus the masks that mark real frames."""

    audio: np.ndarray          # [B x Na_max x 1024] float32
    audio_lengths: np.ndarray  # [B]
    text: np.ndarray           # [B x Nt_max x 768] float32
    text_lengths: np.ndarray   # [B]
    labels: np.ndarray         # [B]
    ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def audio_mask(self) -> np.ndarray:
        return np.arange(self.audio.shape[1])[None, :] < self.audio_lengths[:, None]

    @property
    def text_mask(self) -> np.ndarray:
        return np.arange(self.text.shape[1])[None, :] < self.text_lengths[:, None]


def _pad_block(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([s.shape[0] for s in seqs], dtype=np.int64)
    block = np.zeros((len(seqs), int(lengths.max()), seqs[0].shape[1]), dtype=np.float32)
    for i, s in enumerate(seqs):
        block[i, : s.shape[0]] = s
    return block, lengths


def make_batches(
    samples: list[UtteranceSample],
    batch_size: int,
    shuffle_seed: int | np.random.SeedSequence | None = None,
) -> list[Batch]:
    """Deterministic batching: optional seeded shuffle, zero padding, masks;
    the final partial batch is kept."""
    if not samples:
        raise ValueError("make_batches needs at least one sample")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    batches = []
    for start in range(0, len(samples), batch_size):
        chunk = [samples[j] for j in order[start:start + batch_size]]
        audio, audio_lengths = _pad_block([s.audio.features for s in chunk])
        text, text_lengths = _pad_block([s.text.features for s in chunk])
        batches.append(Batch(
            audio=audio,
            audio_lengths=audio_lengths,
            text=text,
            text_lengths=text_lengths,
            labels=np.array([s.label for s in chunk], dtype=np.int64),
            ids=[s.utt_id for s in chunk],
        ))
    return batches

"""Acceptance suite: one test per release criterion, at its stated tolerance.

Run with ``pytest -s tests/test_acceptance.py`` to see the one-line
pass/fail summary per criterion.
"""

import json
import time

import numpy as np
import pytest

from test_layers import _extract_gates, lstm_loop_reference
from test_model import brute_force_block

from crossmodal import tensor as T
from crossmodal.checkpoint import save_checkpoint
from crossmodal.cli import main
from crossmodal.data import SyntheticTaskSpec, generate_synthetic
from crossmodal.gradcheck import check_gradients
from crossmodal.layers import BiLstm, SeqBatch
from crossmodal.model import (
    AudioFeatureEncoder,
    CrossModalAttention,
    EmotionClassifier,
    ModelConfig,
    stats_pool,
)
from crossmodal.training import (
    TrainConfig,
    cross_entropy,
    evaluate,
    loso_run,
    split_by_session,
    train,
)


def _report(name: str, ok: bool, detail: str = "") -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


def test_gradient_suite():
    """Every parameter group of the tiny end-to-end model passes central
    finite differences (eps 1e-4, double precision) below 1e-3, in < 60 s."""
    started = time.time()
    cfg = ModelConfig.tiny()
    model = EmotionClassifier(cfg, mode="fused", seed=0)
    rng = np.random.default_rng(0)
    audio = rng.normal(size=(8, cfg.audio_input_dim))
    text = rng.normal(size=(5, cfg.text_input_dim))
    label = np.array([1])

    def loss():
        logits, _, _ = model.forward(audio, text, training=True,
                                     rng=np.random.default_rng(0))
        for name, buf in model.named_buffers():
            buf[:] = 0.0 if name.endswith("mean") else 1.0
        return cross_entropy(T.reshape(logits, (1, cfg.classes)), label)

    errors = check_gradients(loss, model.named_parameters(), eps=1e-4, floor=1e-6)
    worst = max(errors.values())
    elapsed = time.time() - started
    _report("gradient-suite", worst < 1e-3 and elapsed < 60.0,
            f"worst rel err {worst:.2e} over {len(errors)} tensors, {elapsed:.1f}s")


def test_attention_invariants():
    """On 100 random inputs every attention row sums to 1 +- 1e-6, masked
    keys get exactly 0, and single-key rows are exactly 1.0."""
    cfg = ModelConfig.tiny()
    block = CrossModalAttention(cfg, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    for trial in range(100):
        tq = int(rng.integers(1, 7))
        tk = int(rng.integers(1, 7))
        pad = int(rng.integers(0, 4))
        q = SeqBatch.single(rng.normal(scale=3.0, size=(tq, cfg.model_dim)))
        kv_block = np.zeros((1, tk + pad, cfg.model_dim))
        kv_block[0, :tk] = rng.normal(scale=3.0, size=(tk, cfg.model_dim))
        kv = SeqBatch.from_padded(kv_block, np.array([tk]))
        _, attn = block(q, kv)
        assert np.abs(attn.sum(axis=-1) - 1.0).max() <= 1e-6
        if pad:
            assert (attn[..., tk:] == 0.0).all()
        if tk == 1:
            assert (attn[..., 0] == 1.0).all()
    _report("attention-invariants", True, "100 random instances")


def test_frame_rate_contract():
    """audio_encode output length is ceil(ceil(N/2)/2) for every N in
    4..512, which equals N/4 whenever 4 divides N."""
    cfg = ModelConfig.tiny(audio_input_dim=4, model_dim=2, lstm_hidden=1,
                           heads=1, head_dim=2, ffn_dim=2)
    enc = AudioFeatureEncoder(cfg, np.random.default_rng(3))
    rng = np.random.default_rng(4)
    for n in range(4, 513):
        out = enc(SeqBatch.single(rng.normal(size=(n, 4))), training=False, rng=None)
        want = int(np.ceil(np.ceil(n / 2) / 2))
        assert out.frames == want, f"N={n}: got {out.frames}, want {want}"
        if n % 4 == 0:
            assert out.frames == n // 4
    _report("frame-rate-contract", True, "N in 4..512")


def test_shape_contract():
    """Fused utterance vector is 1024-dim and logits 4-dim on random valid
    inputs at the full-size configuration."""
    cfg = ModelConfig()
    model = EmotionClassifier(cfg, mode="fused", seed=5)
    rng = np.random.default_rng(6)
    for _ in range(5):
        n_audio = int(rng.integers(4, 80))
        n_text = int(rng.integers(1, 20))
        audio = SeqBatch.single(rng.normal(size=(n_audio, 1024)))
        text = SeqBatch.single(rng.normal(size=(n_text, 768)))
        hidden_audio = model.audio_encoder(audio, False, None)
        hidden_text = model.text_projection(text)
        out1, _ = model.cma_audio_query(hidden_audio, hidden_text)
        out2, _ = model.cma_text_query(hidden_text, hidden_audio)
        fused = T.concat([stats_pool(out1), stats_pool(out2)], axis=1)
        assert fused.shape == (1, 1024)
        logits, _, _ = model.forward(audio.x.data, text.x.data)
        assert logits.shape == (4,)
    _report("shape-contract", True, "fused 1024, logits 4")


def test_fusion_beats_unimodal():
    """On the synthetic task (1000 samples, noise 0.2, fixed seed) the fused
    model reaches test UA >= 0.95 within 50 epochs while identically trained
    unimodal models stay <= 0.60; the whole experiment finishes in < 15 min."""
    started = time.time()
    spec = SyntheticTaskSpec(count=1000, noise=0.2, seed=42)
    samples = generate_synthetic(spec)
    train_set, test_set = split_by_session(samples, 5)
    model_cfg = ModelConfig(model_dim=32, lstm_hidden=16, heads=4, head_dim=8,
                            ffn_dim=32, dropout=0.2, precision="float32")
    train_cfg = TrainConfig(epochs=10, batch_size=16, lr=1e-3)

    final_ua = {}
    peak_ua = {}
    for mode in ("fused", "audio", "text"):
        model = EmotionClassifier(model_cfg, mode=mode, seed=1)
        result = train(model, train_set, test_set, train_cfg, seed=2)
        final_ua[mode] = evaluate(model, test_set, 16).unweighted_accuracy
        peak_ua[mode] = max(h.heldout_ua for h in result.history)
        print(f"  {mode}: final UA {final_ua[mode]:.3f}, peak {peak_ua[mode]:.3f}")

    elapsed = time.time() - started
    ok = (
        final_ua["fused"] >= 0.95
        and peak_ua["audio"] <= 0.60
        and peak_ua["text"] <= 0.60
        and elapsed < 900.0
    )
    _report("fusion-beats-unimodal", ok,
            f"fused {final_ua['fused']:.3f}, audio <= {peak_ua['audio']:.3f}, "
            f"text <= {peak_ua['text']:.3f}, {elapsed:.0f}s")


def test_loso_protocol():
    """Five-fold LOSO yields five per-session reports whose arithmetic mean
    equals the reported average to 1e-12."""
    spec = SyntheticTaskSpec(count=30, seed=9, audio_len=(8, 16), text_len=(3, 6))
    samples = generate_synthetic(spec)
    cfg = ModelConfig(model_dim=8, lstm_hidden=4, heads=2, head_dim=2,
                      ffn_dim=8, dropout=0.0)
    report = loso_run(samples, cfg, TrainConfig(epochs=1, batch_size=4, lr=1e-3), seed=10)
    assert len(report.folds) == 5
    assert sorted(f.session for f in report.folds) == [1, 2, 3, 4, 5]
    mean_ua = float(np.mean([f.report.unweighted_accuracy for f in report.folds]))
    _report("loso-protocol", abs(report.average_ua - mean_ua) <= 1e-12,
            f"average {report.average_ua:.4f}")


def test_determinism(tmp_path):
    """One master seed makes checkpoints and reports bitwise identical
    across runs."""
    config = {
        "model": {"model_dim": 8, "lstm_hidden": 4, "heads": 2, "head_dim": 2,
                  "ffn_dim": 8},
        "training": {"epochs": 2, "batch_size": 4, "lr": 1e-3},
        "synthetic": {"audio_len": [8, 16], "text_len": [3, 6]},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))
    data_path = tmp_path / "data.cmaf"
    assert main(["gen-data", "--out", str(data_path), "--samples", "40",
                 "--seed", "3", "--config", str(cfg_path)]) == 0

    artifacts = []
    for run in ("a", "b"):
        out_dir = tmp_path / run
        assert main(["train", "--data", str(data_path), "--config", str(cfg_path),
                     "--seed", "17", "--out-dir", str(out_dir)]) == 0
        artifacts.append((
            (out_dir / "checkpoints" / "session5.ckpt").read_bytes(),
            (out_dir / "report.json").read_bytes(),
            (out_dir / "history.log").read_bytes(),
        ))
    _report("determinism", artifacts[0] == artifacts[1],
            "checkpoint, report, history bitwise equal")


def test_oracle_equivalence_attention():
    """The attention block on a 2-query/3-key micro-instance matches a
    scalar brute-force evaluation to 1e-10."""
    cfg = ModelConfig.tiny(heads=1, head_dim=2)
    block = CrossModalAttention(cfg, np.random.default_rng(11))
    rng = np.random.default_rng(12)
    q = rng.normal(size=(2, cfg.model_dim))
    kv = rng.normal(size=(3, cfg.model_dim))
    out, _ = block(SeqBatch.single(q), SeqBatch.single(kv))
    ref = brute_force_block(q, kv, block, residual=True)
    err = np.abs(out.x.data - ref).max()
    _report("oracle-equivalence-attention", err <= 1e-10, f"max abs err {err:.2e}")


def test_oracle_equivalence_bilstm():
    """The BiLSTM matches a step-by-step scalar reference to 1e-10."""
    lstm = BiLstm(2, 2, rng=np.random.default_rng(13))
    x = np.random.default_rng(14).normal(size=(3, 2))
    out = lstm(SeqBatch.single(x)).x.data
    ref = np.concatenate([
        lstm_loop_reference(x, _extract_gates(lstm, "fwd")),
        lstm_loop_reference(x, _extract_gates(lstm, "bwd"), reverse=True),
    ], axis=1)
    err = np.abs(out - ref).max()
    _report("oracle-equivalence-bilstm", err <= 1e-10, f"max abs err {err:.2e}")


def test_freeze_ablation():
    """With freeze_encoders the audio feature encoder and text projection are
    bitwise unchanged by training while downstream parameters move."""
    rng = np.random.default_rng(15)
    spec = SyntheticTaskSpec(count=24, seed=16, audio_len=(8, 16), text_len=(3, 6))
    samples = generate_synthetic(spec)
    cfg = ModelConfig(model_dim=8, lstm_hidden=4, heads=2, head_dim=2,
                      ffn_dim=8, dropout=0.0)
    model = EmotionClassifier(cfg, mode="fused", seed=17)
    frozen = model.encoder_parameter_names()
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    train_set, heldout = split_by_session(samples, 5)
    train(model, train_set, heldout,
          TrainConfig(epochs=1, batch_size=8, lr=1e-2, freeze_encoders=True), seed=18)
    frozen_ok = all(
        np.array_equal(p.data, before[n])
        for n, p in model.named_parameters() if n in frozen
    )
    downstream_moved = all(
        not np.array_equal(p.data, before[n])
        for n, p in model.named_parameters() if n not in frozen
    )
    _report("freeze-ablation", frozen_ok and downstream_moved,
            f"{len(frozen)} frozen tensors unchanged")

"""Command-line interface: data generation, training, evaluation, gradcheck.

Exit codes: 0 success, 1 validation/input error, 2 runtime or training
failure. Every command is deterministic for a fixed --seed; one master
seed derives model-init, shuffle, and dropout sub-seeds through a fixed
splitting scheme, so artifacts are bitwise reproducible.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    EMOTIONS,
    FeatureFileError,
    SyntheticTaskSpec,
    generate_synthetic,
    read_feature_file,
    write_feature_file,
)
from .gradcheck import check_gradients
from .layers import InputError
from .model import EmotionClassifier, ModelConfig
from .training import (
    OptimizerError,
    ProtocolError,
    TrainConfig,
    TrainingDiverged,
    cross_entropy,
    evaluate,
    history_to_jsonl,
    loso_run,
    split_by_session,
    train,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


class ConfigError(ValueError):
    """Unknown keys or malformed values in a run configuration file."""


_SECTIONS = {
    "model": ModelConfig,
    "training": TrainConfig,
    "synthetic": SyntheticTaskSpec,
}


def resolve_config(path: str | None) -> dict:
    """Merge a JSON config file over the defaults; unknown keys are errors."""
    overrides = {}
    if path is not None:
        try:
            overrides = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
        if not isinstance(overrides, dict):
            raise ConfigError(f"{path}: top level must be an object")
    unknown_sections = set(overrides) - set(_SECTIONS)
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")
    resolved = {}
    for section, cls in _SECTIONS.items():
        values = overrides.get(section, {})
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown keys in section {section!r}: {sorted(unknown)}")
        if section == "synthetic":
            for key in ("audio_len", "text_len"):
                if key in values:
                    values[key] = tuple(values[key])
        try:
            resolved[section] = cls(**values)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"config section {section!r}: {e}") from e
    return resolved


def echo_config(resolved: dict, out_dir: Path) -> None:
    payload = {name: obj.to_dict() for name, obj in resolved.items()}
    (out_dir / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _format_confusion(confusion: np.ndarray) -> str:
    width = max(len(e) for e in EMOTIONS) + 1
    lines = [" " * width + "".join(f"{e:>9}" for e in EMOTIONS) + "   (predicted)"]
    for name, row in zip(EMOTIONS, confusion):
        lines.append(f"{name:<{width}}" + "".join(f"{int(v):>9}" for v in row))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    resolved = resolve_config(args.config)
    spec: SyntheticTaskSpec = resolved["synthetic"]
    spec = dataclasses.replace(spec, count=args.samples, noise=args.noise, seed=args.seed)
    samples = generate_synthetic(spec)
    write_feature_file(samples, args.out)
    by_label = Counter(s.label for s in samples)
    by_session = Counter(s.session for s in samples)
    print(f"wrote {len(samples)} utterances to {args.out}")
    print("per class:  " + "  ".join(f"{EMOTIONS[k]}={by_label.get(k, 0)}" for k in range(4)))
    print("per session: " + "  ".join(f"s{k}={by_session.get(k, 0)}" for k in sorted(by_session)))
    return EXIT_OK


def _session_seeds(master: int) -> tuple[int, int]:
    init_ss, train_ss = np.random.SeedSequence(master).spawn(2)
    return int(init_ss.generate_state(1)[0]), int(train_ss.generate_state(1)[0])


def cmd_train(args) -> int:
    resolved = resolve_config(args.config)
    model_cfg: ModelConfig = resolved["model"]
    train_cfg: TrainConfig = resolved["training"]
    if args.freeze_encoders:
        train_cfg = dataclasses.replace(train_cfg, freeze_encoders=True)
    if args.epochs is not None:
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)

    samples = read_feature_file(args.data)
    out_dir = Path(args.out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    echo_config(resolved, out_dir)

    if args.loso:
        report = loso_run(samples, model_cfg, train_cfg, mode=args.mode,
                          seed=args.seed, jobs=args.jobs,
                          checkpoint_dir=ckpt_dir)
        history_lines = []
        for fold in report.folds:
            for entry in fold.history:
                row = entry.to_dict()
                row["session"] = fold.session
                history_lines.append(json.dumps(row, sort_keys=True))
            print(f"session {fold.session}: "
                  f"UA={fold.report.unweighted_accuracy:.4f} "
                  f"WA={fold.report.weighted_accuracy:.4f}")
        (out_dir / "history.log").write_text("\n".join(history_lines) + "\n")
        (out_dir / "report.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        print(f"averaged UA over 5 sessions: {report.average_ua:.4f}")
        return EXIT_OK

    train_samples, test_samples = split_by_session(samples, args.test_session)
    init_seed, train_seed = _session_seeds(args.seed)
    model = EmotionClassifier(model_cfg, mode=args.mode, seed=init_seed)
    print(f"training {args.mode} model ({model.num_parameters()} parameters) "
          f"on {len(train_samples)} samples, testing on session {args.test_session}")
    result = train(model, train_samples, test_samples, train_cfg, seed=train_seed)
    ckpt_path = ckpt_dir / f"session{args.test_session}.ckpt"
    save_checkpoint(model, ckpt_path)
    (out_dir / "history.log").write_text(history_to_jsonl(result.history))

    # report from the reloaded checkpoint so a later `eval` run reproduces it
    report = evaluate(load_checkpoint(ckpt_path), test_samples, train_cfg.batch_size)
    payload = {
        "session": args.test_session,
        "mode": args.mode,
        "best_epoch": result.best_epoch,
        "report": report.to_dict(),
    }
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"best epoch {result.best_epoch}: "
          f"UA={report.unweighted_accuracy:.4f} WA={report.weighted_accuracy:.4f}")
    print(_format_confusion(report.confusion))
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    samples = read_feature_file(args.data)
    if args.test_session is not None:
        _, samples = split_by_session(samples, args.test_session)
    report = evaluate(model, samples, args.batch_size)
    print(f"UA={report.unweighted_accuracy:.6f} WA={report.weighted_accuracy:.6f} "
          f"({len(samples)} samples)")
    print(_format_confusion(report.confusion))
    for w in report.warnings:
        print(f"warning: {w}")
    payload = {
        "checkpoint": str(args.checkpoint),
        "test_session": args.test_session,
        "report": report.to_dict(),
    }
    Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"report written to {args.out}")
    return EXIT_OK


GRADCHECK_GROUPS = (
    ("conv", ("audio_encoder.conv", "text_projection.proj")),
    ("bilstm", ("audio_encoder.bilstm",)),
    ("norms", ("audio_encoder.bn", ".ln_")),
    ("cma_query", (".w_query",)),
    ("cma_key", (".w_key",)),
    ("cma_value", (".w_value",)),
    ("cma_out", (".w_out",)),
    ("cma_ffn", (".ffn_",)),
    ("classifier", ("classifier.",)),
)


def cmd_gradcheck(args) -> int:
    cfg = ModelConfig.tiny()
    model = EmotionClassifier(cfg, mode="fused", seed=args.seed)
    rng = np.random.default_rng(args.seed)
    audio = rng.normal(size=(8, cfg.audio_input_dim))
    text = rng.normal(size=(5, cfg.text_input_dim))
    label = np.array([int(rng.integers(4))])

    def loss():
        logits, _, _ = model.forward(audio, text, training=True,
                                     rng=np.random.default_rng(0))
        for name, buf in model.named_buffers():
            buf[:] = 0.0 if name.endswith("mean") else 1.0
        from . import tensor as T
        return cross_entropy(T.reshape(logits, (1, cfg.classes)), label)

    errors = check_gradients(loss, model.named_parameters(), eps=args.eps, floor=1e-6)

    print(f"{'group':<12} {'params':>7} {'max rel err':>12}  status")
    worst_overall = 0.0
    grouped: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name, err in errors.items():
        for group, needles in GRADCHECK_GROUPS:
            if any(n in name for n in needles):
                grouped[group] = max(grouped.get(group, 0.0), err)
                counts[group] = counts.get(group, 0) + 1
                break
        else:
            raise RuntimeError(f"parameter {name!r} matches no gradcheck group")
    failed = False
    for group, _ in GRADCHECK_GROUPS:
        err = grouped.get(group, 0.0)
        ok = err < args.tolerance
        failed = failed or not ok
        worst_overall = max(worst_overall, err)
        print(f"{group:<12} {counts.get(group, 0):>7} {err:>12.3e}  "
              f"{'ok' if ok else 'FAIL'}")
    print(f"worst: {worst_overall:.3e} (tolerance {args.tolerance:g})")
    return EXIT_OK if not failed else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossmodal",
        description="Two-stream cross-modal attention emotion classifier.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("gen-data", formatter_class=fmt,
                       help="write a synthetic CMAF feature file")
    p.add_argument("--out", required=True, help="output CMAF path")
    p.add_argument("--samples", type=int, default=1000, help="number of utterances")
    p.add_argument("--noise", type=float, default=0.2, help="feature noise level")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--config", default=None, help="JSON config (synthetic section)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", formatter_class=fmt,
                       help="train a model on a CMAF feature file")
    p.add_argument("--data", required=True, help="CMAF feature file")
    p.add_argument("--config", default=None, help="JSON run configuration")
    p.add_argument("--mode", choices=("fused", "audio", "text"), default="fused",
                   help="model variant")
    p.add_argument("--freeze-encoders", action="store_true",
                   help="exclude the audio feature encoder and text projection from updates")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--loso", action="store_true",
                       help="run all five leave-one-session-out folds")
    group.add_argument("--test-session", type=int, default=5, choices=range(1, 6),
                       help="held-out session for a single fold")
    p.add_argument("--epochs", type=int, default=None,
                   help="override the configured epoch count")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out-dir", required=True, help="run directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel LOSO folds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", formatter_class=fmt,
                       help="evaluate a checkpoint on a CMAF feature file")
    p.add_argument("--data", required=True, help="CMAF feature file")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--test-session", type=int, default=None, choices=range(1, 6),
                   help="restrict to one session (default: all samples)")
    p.add_argument("--batch-size", type=int, default=8, help="evaluation batch size")
    p.add_argument("--out", default="eval_report.json", help="report file path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", formatter_class=fmt,
                       help="finite-difference gradient suite on the tiny model")
    p.add_argument("--seed", type=int, default=0, help="seed for weights and inputs")
    p.add_argument("--eps", type=float, default=1e-4, help="finite-difference step")
    p.add_argument("--tolerance", type=float, default=1e-3,
                   help="max acceptable relative error")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FeatureFileError, CheckpointError, ProtocolError,
            InputError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingDiverged, OptimizerError) as e:
        print(f"training failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

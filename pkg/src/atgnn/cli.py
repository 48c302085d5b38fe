"""Command-line entry point: ``atgnn {train,eval,gradcheck,gen-data,export-graph}``.

Exit codes: 0 ok, 2 configuration error, 3 I/O or data error, 4 numeric failure.
"""

from __future__ import annotations

import os


def _apply_thread_cap() -> str | None:
    # BLAS pools read these at numpy import time, so this runs before numpy loads
    cap = os.environ.get("ATGNN_THREADS")
    if cap is None:
        return None
    if not cap.isdigit() or int(cap) < 1:
        return f"ATGNN_THREADS: expected a positive integer, got {cap!r}"
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = cap
    return None


_THREAD_ERROR = _apply_thread_cap()

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import checkpoint  # noqa: E402
from . import tensor as T  # noqa: E402
from .config import load_config  # noqa: E402
from .data import generate_synthetic, load_dataset, read_vocabulary  # noqa: E402
from .errors import ConfigError, DataError, EvaluationError, NumericError  # noqa: E402
from .metrics import evaluate  # noqa: E402
from .mlg import adjacency_csv  # noqa: E402
from .model import ATGNN  # noqa: E402
from .training import TrainState, fit, predict_scores  # noqa: E402

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
GRADCHECK_TOLERANCE = 1e-4


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    run = load_config(cfg_path)
    base = cfg_path.parent
    if not run.data.train_manifest:
        raise ConfigError("data.train_manifest", "required for training")
    model_cfg = run.model
    if run.data.vocabulary:
        names = read_vocabulary(_resolve(base, run.data.vocabulary))
        if len(names) != model_cfg.num_classes:
            raise ConfigError("model.num_classes", f"is {model_cfg.num_classes} but the vocabulary has {len(names)} names")
    train = load_dataset(
        _resolve(base, run.data.train_manifest), model_cfg.num_classes, model_cfg.input_frames, model_cfg.input_bins
    )
    val = None
    if run.data.eval_manifest:
        val = load_dataset(
            _resolve(base, run.data.eval_manifest), model_cfg.num_classes, model_cfg.input_frames, model_cfg.input_bins
        )
    out = _resolve(base, run.data.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        ck = checkpoint.load(args.resume)
        model, state = ck.model, ck.state
    else:
        mean, std = train.normalization()
        model = ATGNN(dataclasses.replace(model_cfg, input_mean=mean, input_std=std or 1.0))
        state = TrainState.fresh(run.train)
        checkpoint.save(out / "epoch_000.ckpt", model, run.train, state)
    log_path = out / "train_log.jsonl"

    def on_epoch(st, stats):
        checkpoint.save(out / f"epoch_{st.epoch:03d}.ckpt", model, run.train, st)
        print(stats.to_json(), flush=True)

    state = fit(model, train, run.train, state, val, log_path, on_epoch=on_epoch)
    checkpoint.save(out / "last.ckpt", model, run.train, state)
    print(f"wrote {out / 'last.ckpt'} (epoch {state.epoch}, step {state.step})")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = checkpoint.load(args.ckpt)
    cfg = ck.model.config
    data = load_dataset(args.manifest, cfg.num_classes, cfg.input_frames, cfg.input_bins)
    report = evaluate(predict_scores(ck.model, data), data.targets)
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix(".eval.json")
    out.write_text(report.to_json() + "\n")
    print(f"mAP {report.mAP:.6f} over {len(data)} clips ({len(report.skipped)} classes skipped); report {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    run = load_config(args.config)
    model = ATGNN(run.model)
    rng = np.random.default_rng(args.seed)
    spec = rng.normal(size=(run.model.input_frames, run.model.input_bins))
    targets = (rng.random(run.model.num_classes) < 0.5).astype(float)
    max_entries = None if args.all else args.entries
    err = T.check_gradient(
        lambda: model.loss(spec, targets), model.parameters(), eps=1e-5, max_entries=max_entries, rng=rng
    )
    print(f"max relative gradient error {err:.3e} ({model.num_parameters()} parameters)")
    return EXIT_OK if err < GRADCHECK_TOLERANCE else EXIT_NUMERIC


def cmd_gen_data(args) -> int:
    manifest = generate_synthetic(args.out, args.classes, args.count, args.seed, frames=args.frames)
    print(f"wrote {args.count} clips and {manifest}")
    return EXIT_OK


def cmd_export_graph(args) -> int:
    ck = checkpoint.load(args.ckpt)
    names = read_vocabulary(args.vocab) if args.vocab else None
    blocks = [k for k in ck.model.params if k.endswith(".adjacency")]
    if not blocks:
        raise ConfigError("model.stage_mlg", "checkpoint has no label-label blocks")
    name = args.block or blocks[-1]
    if name not in blocks:
        raise ConfigError("block", f"unknown block {name!r}; choose from {blocks}")
    text = adjacency_csv(ck.model.params[name].data, names)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atgnn", description="Audio tagging with patch and label graph networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a manifest and write an mAP report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="report path (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare tape gradients with finite differences")
    p.add_argument("--config", required=True)
    p.add_argument("--entries", type=int, default=128, help="entries probed per parameter tensor")
    p.add_argument("--all", action="store_true", help="probe every parameter entry")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="write a synthetic multi-label tone dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=64, help="spectrogram frames per clip")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("export-graph", help="dump a learned label adjacency as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--block", help="parameter name, e.g. stage0.mlg0.adjacency (default: last)")
    p.add_argument("--vocab", help="vocabulary JSON for row and column names")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_graph)
    return parser


def main(argv: list[str] | None = None) -> int:
    if _THREAD_ERROR:
        print(f"config error: {_THREAD_ERROR}", file=sys.stderr)
        return EXIT_CONFIG
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DataError, EvaluationError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""
ECG-NAT command-line entry point.

Subcommands:
    synth     write a labeled synthetic corpus (records, sidecars, manifest)
    pretrain  masked-autoencoder pretraining on one or more manifests
    finetune  dual-loss fine-tuning over seeded split repeats
    eval      evaluate a saved model on a labeled manifest
    bench     parameter count and kernel scaling table
    verify    oracle, gradient, loss-identity and metric self-checks

Settings resolve as defaults, then `--config FILE`, then `--set key=value`,
then dedicated flags. Exit codes: 0 ok, 1 invalid configuration, 2 runtime
failure, 3 verification failure.
"""

from contextlib import ExitStack
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence
import argparse
import logging
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from autograd import precision
from models import ModelConfig, count_params
from models.model_manager import read_checkpoint_header
from utils import RunConfig, configure_logging, load_run_config, parse_key_value
from utils.error_handling import EXIT_OK, VerificationError, handle_error

logger = logging.getLogger("ecgnat")

CONFIG_KEYS = set(RunConfig.__dataclass_fields__)


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_common(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run")
    group.add_argument("--config", help="key=value, YAML or JSON config file")
    group.add_argument("-s", "--set", dest="settings", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
    group.add_argument("--seed", type=int)
    group.add_argument("--threads", type=int, help="BLAS/OpenMP thread cap")
    group.add_argument("--precision", choices=["float32", "float64"])
    group.add_argument("--out-dir", dest="out_dir")
    group.add_argument("--batch-size", dest="batch_size", type=int)
    group.add_argument("--no-progress", dest="progress", action="store_const", const=False)
    group.add_argument("--log-level", default="INFO")
    group.add_argument("--log-file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecgnat", description="ECG-NAT pretraining, fine-tuning and checks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic three-rhythm corpus")
    _add_common(p)
    p.add_argument("--n-per-class", dest="n_per_class", type=int)
    p.add_argument("--noise", dest="synth_noise", type=float, default=0.05, help="additive noise std of the raw leads")

    p = sub.add_parser("pretrain", help="masked-autoencoder pretraining")
    _add_common(p)
    p.add_argument("--manifest", dest="manifests", action="append", help="repeat for several datasets")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--ablation", choices=["none", "zero-mask"])
    p.add_argument("--epochs", dest="pretrain_epochs", type=int)
    p.add_argument("--lr", dest="pretrain_lr", type=float)
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)

    p = sub.add_parser("finetune", help="dual-loss fine-tuning")
    _add_common(p)
    p.add_argument("--manifest", dest="manifests", action="append")
    p.add_argument("--mode", choices=["linear_eval", "full_finetune"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--label-fraction", dest="label_fraction", type=float)
    p.add_argument("--init-checkpoint", dest="init_checkpoint")
    p.add_argument("--epochs", dest="finetune_epochs", type=int)
    p.add_argument("--lr", dest="finetune_lr", type=float)
    p.add_argument("--repeats", type=int)
    p.add_argument("--alpha-sweep", dest="alpha_sweep", type=_float_list, metavar="A,B,...")
    p.add_argument("--dump-embeddings", dest="dump_embeddings")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("checkpoint")
    p.add_argument("--manifest", dest="eval_manifest", required=True)
    p.add_argument("--output", help="result JSON path (default: <out_dir>/eval.json)")
    p.add_argument("--dump-embeddings", dest="dump_embeddings")

    p = sub.add_parser("bench", help="parameter count and kernel scaling benchmark")
    _add_common(p)
    p.add_argument("--k", dest="window_k", type=int)
    p.add_argument("--d", dest="head_dim", type=int, default=32)
    p.add_argument("--heads", dest="bench_heads", type=int, default=4)
    p.add_argument("--lengths", type=_int_list, default=[512, 1024, 2048, 4096])
    p.add_argument("--repeats", dest="bench_repeats", type=int, default=10)
    p.add_argument("--impls", default="na_forward,na_reference")
    p.add_argument("--output", help="CSV path (default: <out_dir>/bench.csv)")

    p = sub.add_parser("verify", help="run the self-check suites")
    _add_common(p)
    p.add_argument("--level", choices=["quick", "full"], default="full")
    p.add_argument("--suites", help="comma-separated subset of oracle,gradcheck,losses,metrics")
    p.add_argument("--inject-fault", dest="inject_fault", choices=["na-backward"])
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """`--set` pairs, then every flag whose dest is a config key (None means unset)."""
    overrides: Dict[str, Any] = dict(parse_key_value("\n".join(args.settings), source="--set"))
    for dest, value in vars(args).items():
        if dest in CONFIG_KEYS and value is not None:
            overrides[dest] = value
    return overrides


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base = None
    if args.command == "eval":
        base = read_checkpoint_header(args.checkpoint).get("config") or None
    return load_run_config(args.config, collect_overrides(args), base=base)


# --- commands ----------------------------------------------------------------

def cmd_synth(args: argparse.Namespace, config: RunConfig) -> None:
    from simulation import synth_corpus
    duration = config.input_len / (config.fs / 2.0)
    manifest = synth_corpus(config.out_dir, config.n_per_class, seed=config.seed, progress=config.progress,
                            sampling_rate=config.fs, duration=duration, n_leads=config.n_leads,
                            noise_std=args.synth_noise)
    print(f"wrote {len(manifest)} records to {Path(config.out_dir) / 'manifest.csv'}")


def cmd_pretrain(args: argparse.Namespace, config: RunConfig) -> None:
    from training import load_pretrain_datasets, run_pretrain
    result = run_pretrain(config, load_pretrain_datasets(config), resume=args.resume)
    print(f"initial recon_loss={result.initial_loss:.5f}")
    first = result.state.epoch - len(result.losses) + 1
    for epoch, loss in enumerate(result.losses, start=first):
        print(f"epoch {epoch}: recon_loss={loss:.5f}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"log: {result.log_path}")


def cmd_finetune(args: argparse.Namespace, config: RunConfig) -> None:
    from training import alpha_sweep, run_finetune
    if args.alpha_sweep:
        frame = alpha_sweep(config, args.alpha_sweep)
        print(frame.to_string(index=False))
        return
    result = run_finetune(config, dump_embeddings=args.dump_embeddings)
    for r in result.repeats:
        print(f"repeat {r.repeat}: accuracy={r.result.accuracy:.4f} macro_f1={r.result.macro_f1:.4f} "
              f"auroc={r.result.auroc}")
    summary = result.summary
    print(" ".join(f"{m}={summary[f'{m}_mean']:.4f}+-{summary[f'{m}_std']:.4f}"
                   for m in ("accuracy", "macro_f1", "auroc")))


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> None:
    from evaluation import write_eval_json
    from training import evaluate_checkpoint
    result = evaluate_checkpoint(args.checkpoint, args.eval_manifest, config,
                                 dump_embeddings=args.dump_embeddings)
    path = write_eval_json(result, args.output or Path(config.out_dir) / "eval.json")
    print(result.to_json())
    logger.info(f"Wrote {path}")


def cmd_bench(args: argparse.Namespace, config: RunConfig) -> None:
    from natten1d import bench_scaling, doubling_ratios, write_bench_csv
    model_config = ModelConfig.from_run_config(config)
    print(f"parameters: {count_params(model_config):,} "
          f"(embed_dim={model_config.embed_dim}, depths={list(model_config.depths)})")
    impls = [i.strip() for i in args.impls.split(",") if i.strip()]
    frame = bench_scaling(config.window_k, args.lengths, args.head_dim, args.bench_heads,
                          repeats=args.bench_repeats, seed=config.seed, impls=impls,
                          dtype=np.dtype(config.precision), progress=config.progress)
    path = write_bench_csv(frame, args.output or Path(config.out_dir) / "bench.csv")
    print(frame.to_string(index=False))
    for impl in impls:
        ratios = ", ".join(f"{r:.2f}" for r in doubling_ratios(frame, impl))
        print(f"{impl} time ratio per doubling: {ratios}")
    logger.info(f"Wrote {path}")


def cmd_verify(args: argparse.Namespace, config: RunConfig) -> None:
    from verification import run_verification
    suites = [s.strip() for s in args.suites.split(",")] if args.suites else None
    report = run_verification(args.level, seed=config.seed, suites=suites, fault=args.inject_fault,
                              progress=config.progress)
    print(report.format())
    if not report.ok:
        failed = [s.name for s in report.suites if s.failed]
        raise VerificationError("Verification failed", f"failing suites: {', '.join(failed)}", report=report)


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], None]] = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "verify": cmd_verify,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return the process exit code."""
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, args.log_file)
    try:
        config = resolve_config(args)
        logger.info(f"{args.command}: seed={config.seed} precision={config.precision} out_dir={config.out_dir}")
        with ExitStack() as stack:
            if config.threads:
                stack.enter_context(threadpool_limits(limits=config.threads))
            stack.enter_context(precision(config.precision))
            COMMANDS[args.command](args, config)
        return EXIT_OK
    except KeyboardInterrupt:
        logger.error("Interrupted")
        return 130
    except Exception as e:  # noqa: BLE001
        return handle_error(e)


if __name__ == "__main__":
    sys.exit(main())

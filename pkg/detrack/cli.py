import argparse
import os
import sys
import time
import pandas as pd  # type: ignore

from .ablation import ABLATIONS, run_ablation
from .config import ASSIGNMENT_MODES, ConfigurationError, TrainConfig, apply_overrides, load_config
from .data.synthetic import validation_sequences
from .flops import ArchSpec, compare, format_report, reference_tables, save_report
from .model import load_checkpoint
from .selftest import gradcheck, selftest
from .track import track
from .train import train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="detrack", description="Desk-scale deformable-decoder tracker"
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--assignment", choices=ASSIGNMENT_MODES)
    common.add_argument("--dn", choices=["on", "off"])
    common.add_argument("--layers-train", type=int, dest="layers_train")
    common.add_argument("--layers-test", type=int, dest="layers_test")
    common.add_argument("--out", default="output")
    common.add_argument("--quiet", action="store_true")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("train", parents=[common], help="train one model")
    track_parser = commands.add_parser(
        "track", parents=[common], help="track the validation sequences with a checkpoint"
    )
    track_parser.add_argument(
        "--checkpoint", help="defaults to the latest checkpoint under <out>/checkpoints"
    )
    track_parser.add_argument("--no-window", action="store_true", dest="no_window")
    ablate_parser = commands.add_parser("ablate", parents=[common], help="run an ablation")
    ablate_parser.add_argument("which", choices=ABLATIONS)
    ablate_parser.add_argument("--seeds", type=int, nargs="+")
    commands.add_parser("flops", parents=[common], help="analytic FLOPs and parameter report")
    commands.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    commands.add_parser("selftest", parents=[common], help="property checks")
    return parser


def build_config(args: argparse.Namespace) -> TrainConfig:
    """Config file values first, then any flags given on the command line."""
    config = load_config(args.config) if args.config else TrainConfig()
    top: dict[str, object] = {}
    if args.seed is not None:
        top["seed"] = args.seed
    if args.epochs is not None:
        top["epochs"] = args.epochs
    if args.assignment is not None:
        top["assignment"] = args.assignment
    model = {} if args.layers_train is None else {"decoder_layers": args.layers_train}
    dn = {} if args.dn is None else {"enabled": args.dn == "on"}
    return apply_overrides(config, {"": top, "model": model, "dn": dn}).validate()


def latest_checkpoint(out_dir: str) -> str:
    checkpoint_dir = os.path.join(out_dir, "checkpoints")
    names = (
        sorted(name for name in os.listdir(checkpoint_dir) if name.startswith("step_"))
        if os.path.isdir(checkpoint_dir)
        else []
    )
    if not names:
        raise ConfigurationError(f"no checkpoints under {checkpoint_dir}; pass --checkpoint")
    return os.path.join(checkpoint_dir, names[-1])


def run_track(args: argparse.Namespace, config: TrainConfig) -> int:
    start_time = time.time()
    path = args.checkpoint or latest_checkpoint(args.out)
    model = load_checkpoint(path)
    verbose = not args.quiet
    if verbose:
        print(f"-----tracking with {path}-----")
    sequences = validation_sequences(
        config.eval_sequences,
        config.eval_frames,
        config.difficulty,
        template_size=model.cfg.template_size,
        search_size=model.cfg.search_size,
    )
    results = []
    for index, sequence in enumerate(sequences):
        frames = track(model, sequence, args.layers_test, window=not args.no_window)
        results.append(frames.assign(sequence=index))
        if verbose:
            print(f"sequence {index}: AO {frames['iou'].mean():.4f}")
    tracks = pd.concat(results, ignore_index=True)
    os.makedirs(args.out, exist_ok=True)
    tracks.to_csv(os.path.join(args.out, "tracks.csv"), index=False)
    if verbose:
        print(f"AO over {len(sequences)} sequences: {tracks['iou'].mean():.4f}")
        print(f"Time taken: {time.time() - start_time:.2f}s")
    return 0


def run_flops(args: argparse.Namespace, config: TrainConfig) -> int:
    tables = {
        **reference_tables(),
        "configured": compare(
            ArchSpec.from_model_config(config.model, "conv"),
            ArchSpec.from_model_config(config.model, "decoder"),
        ),
    }
    save_report(tables, args.out)
    if not args.quiet:
        for name, table in tables.items():
            print(format_report(table, f"-----{name}-----"))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    verbose = not args.quiet
    try:
        config = build_config(args)
        if args.command == "train":
            train(config, args.out, verbose)
        elif args.command == "track":
            return run_track(args, config)
        elif args.command == "ablate":
            run_ablation(args.which, config, args.seeds, args.out, verbose)
        elif args.command == "flops":
            return run_flops(args, config)
        elif args.command == "gradcheck":
            return 0 if gradcheck(verbose)["passed"].all() else 1
        elif args.command == "selftest":
            return 0 if selftest(verbose)["passed"].all() else 1
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    return 0

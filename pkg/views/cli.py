"""Command-line surface: argparse subcommands mapped onto the controllers.

Exit codes: 0 success, 1 one or more benchmark cells failed, 2 usage, configuration or
missing-input errors. Logs go to stderr as JSON lines; stdout carries results only.
"""
import argparse
import csv
import logging
import sys
from typing import Callable, Dict, List, Optional
from controllers.benchmark import BenchmarkController, failed_cells
from controllers.dataset import DatasetController
from controllers.report import ReportController
from utils import TOOL_VERSION
from utils.errors import SegbenchError
from utils.logging_utils import configure_logging, log_event
from utils.validators import EMPTY_RULES, ENCODER_FAMILIES, EXPERIMENTS
from views.results_ui import aggregate_table, records_table

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CELL_FAILURES = 1
EXIT_USAGE = 2


def _shape(text: str):
    parts = text.lower().replace("x", ",").split(",")
    try:
        values = [int(p) for p in parts if p]
    except ValueError:
        raise argparse.ArgumentTypeError("shape must be N or RxC, got {!r}".format(text)) from None
    if len(values) == 1:
        values = values * 2
    if len(values) != 2 or min(values) < 1:
        raise argparse.ArgumentTypeError("shape must be N or RxC, got {!r}".format(text))
    return tuple(values)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segbench", description="Desk-scale segmentation benchmark harness")
    parser.add_argument("--verbose", action="store_true", help="debug-level logging")
    parser.add_argument("--version", action="version", version="%(prog)s " + TOOL_VERSION)
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("generate-synthetic", help="write a synthetic CT-like dataset")
    p.add_argument("--n", type=int, required=True, help="total slices (>= 3)")
    p.add_argument("--shape", type=_shape, default=(64, 64), help="N or RxC (default 64)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--balanced", action="store_true", help="large lesions instead of small ones")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_generate_synthetic)

    p = commands.add_parser("benchmark", help="train and test every cell of a config matrix")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--config", help="benchmark config JSON")
    source.add_argument("--manifest", help="run_manifest.json (or run directory) of a previous run to repeat")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel cells")
    p.add_argument("--strict-repro", action="store_true", help="zero timings and pin math threads")
    p.set_defaults(handler=cmd_benchmark)

    p = commands.add_parser("evaluate", help="score a checkpoint without training")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset manifest or directory")
    p.add_argument("--experiment", choices=EXPERIMENTS, help="defaults to the checkpoint's experiment")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--empty-rule", choices=EMPTY_RULES, default=EMPTY_RULES[0])
    p.set_defaults(handler=cmd_evaluate)

    p = commands.add_parser("report", help="write analysis artifacts for a finished run")
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--histograms", action="store_true")
    p.add_argument("--scatter", action="store_true")
    p.add_argument("--weights", nargs="?", const="", default=None, metavar="LAYER",
                   help="weight mosaics; LAYER defaults to the first convolution")
    p.add_argument("--volumes", action="store_true", help="stack best-cell test predictions per volume")
    p.add_argument("--overlays", action="store_true", help="predicted-mask overlays of best cells")
    p.add_argument("--table", action="store_true", help="print the per-cell and aggregate tables")
    p.set_defaults(handler=cmd_report)

    p = commands.add_parser("pretrain-encoder", help="train a Unet and save its encoder for warm starts")
    p.add_argument("--dataset", required=True)
    p.add_argument("--experiment", choices=EXPERIMENTS, default=EXPERIMENTS[0])
    p.add_argument("--encoder", choices=ENCODER_FAMILIES, required=True)
    p.add_argument("--width-scale", type=float, default=0.125)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(handler=cmd_pretrain_encoder)
    return parser


def cmd_generate_synthetic(args: argparse.Namespace) -> int:
    if args.n < 3:
        print("error: --n must be >= 3", file=sys.stderr)
        return EXIT_USAGE
    manifest = DatasetController().generate(args.n, args.shape, args.seed, args.balanced, args.out)
    print(manifest)
    return EXIT_OK


def cmd_benchmark(args: argparse.Namespace) -> int:
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    result = BenchmarkController().run(args.out, config_path=args.config, manifest_path=args.manifest,
                                       jobs=args.jobs, strict_repro=args.strict_repro)
    for line in failed_cells(result):
        log_event(logger, "cell_failed_summary", level=logging.WARNING, detail=line)
    print(result.run_dir)
    return EXIT_CELL_FAILURES if result.failed else EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    record = BenchmarkController().evaluate(args.checkpoint, args.dataset, args.experiment, args.split,
                                            args.threshold, args.empty_rule)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(record.to_row())
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    controller = ReportController()
    controller.generate(args.run, histograms=args.histograms, scatter=args.scatter,
                        weights=args.weights is not None, volumes=args.volumes, overlays=args.overlays,
                        weight_layer=args.weights or None)
    if args.table:
        records = controller.load_records(args.run)
        print(records_table(records))
        if any(r.ok for r in records):
            print(aggregate_table(controller.aggregates(records, ("experiment", "architecture", "weight_init"))))
    return EXIT_OK


def cmd_pretrain_encoder(args: argparse.Namespace) -> int:
    path = BenchmarkController().pretrain(args.dataset, args.experiment, args.encoder, args.width_scale, args.out,
                                          {"epochs": args.epochs, "batch_size": args.batch_size}, args.seed)
    print(path)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Parse argv, configure logging and run one command"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    configure_logging(logging.DEBUG if args.verbose else logging.INFO)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except SegbenchError as e:
        log_event(logger, "command_failed", level=logging.ERROR, command=args.command,
                  error=str(e), error_type=type(e).__name__)
        print("error: {}".format(e), file=sys.stderr)
        return EXIT_USAGE


COMMANDS: Dict[str, str] = {
    "generate-synthetic": "Generate Synthetic Dataset",
    "benchmark": "Run Benchmark",
    "evaluate": "Evaluate Checkpoint",
    "report": "Write Report",
    "pretrain-encoder": "Pretrain Encoder",
}

"""CLI entry point for volprint."""

import argparse
import logging
import sys
from pathlib import Path

from dotenv import load_dotenv

from src.config import SiblingType, load_run_config
from src.errors import InputOutputError, VolprintError
from src.handlers import (
    cmd_evaluate,
    cmd_extract,
    cmd_graph,
    cmd_phantom,
    cmd_similarity,
    cmd_sweep_k,
    cmd_visualize,
)
from src.logger import setup_logger
from src.parallel import default_threads

logger = logging.getLogger("volprint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="volprint - volumetric fingerprints for sibling identification"
    )
    parser.add_argument("--config", type=Path, help="Run config (JSON or TOML)")
    parser.add_argument("--threads", type=int, help="Worker thread cap")
    parser.add_argument("--seed", type=int, help="Run-wide random seed")
    subparsers = parser.add_subparsers(dest="command", required=True)

    extract_parser = subparsers.add_parser(
        "extract", help="Extract subject fingerprints"
    )
    extract_parser.add_argument("--manifest", type=Path, help="Cohort manifest CSV")
    extract_parser.add_argument("--subject", help="Subject id for explicit volumes")
    extract_parser.add_argument(
        "--out", type=Path, required=True, help="Fingerprint output directory"
    )
    extract_parser.add_argument(
        "volumes", nargs="*", help="Volume paths, optionally as MODALITY=path"
    )

    graph_parser = subparsers.add_parser("graph", help="Build the K-NN graph")
    graph_parser.add_argument("fingerprints", nargs="+", type=Path)
    graph_parser.add_argument("--out", type=Path, required=True)
    graph_parser.add_argument("-k", type=int, help="Neighbors per descriptor")
    graph_parser.add_argument("--modalities", nargs="+", help="Modality subset")

    similarity_parser = subparsers.add_parser(
        "similarity", help="Jaccard similarity matrix from graphs"
    )
    similarity_parser.add_argument("graphs", nargs="+", type=Path)
    similarity_parser.add_argument("--out", type=Path, required=True)

    evaluate_parser = subparsers.add_parser(
        "evaluate", help="Recall curves and significance tests"
    )
    evaluate_parser.add_argument("matrix", type=Path)
    evaluate_parser.add_argument("--manifest", type=Path, required=True)
    evaluate_parser.add_argument("--out", type=Path, required=True)
    evaluate_parser.add_argument(
        "--sibling-type",
        nargs="+",
        type=SiblingType,
        choices=list(SiblingType),
        help="Sibling types to evaluate (default from config)",
    )

    sweep_parser = subparsers.add_parser("sweep-k", help="Recall curves over K")
    sweep_parser.add_argument("fingerprints", nargs="+", type=Path)
    sweep_parser.add_argument("--manifest", type=Path, required=True)
    sweep_parser.add_argument("--out", type=Path, required=True)

    phantom_parser = subparsers.add_parser(
        "phantom", help="Generate a synthetic cohort"
    )
    phantom_parser.add_argument("--out", type=Path, required=True)
    phantom_parser.add_argument("--spec", type=Path, help="Phantom spec JSON/TOML")

    visualize_parser = subparsers.add_parser(
        "visualize", help="Overlay matched keypoints of a pair"
    )
    visualize_parser.add_argument("graph", type=Path)
    visualize_parser.add_argument("--manifest", type=Path, required=True)
    visualize_parser.add_argument(
        "--pair", nargs=2, required=True, metavar=("A", "B")
    )
    visualize_parser.add_argument("--axis", type=int, choices=(0, 1, 2), default=2)
    visualize_parser.add_argument("--slice", type=int, required=True)
    visualize_parser.add_argument("--modality", help="Modality to display")
    visualize_parser.add_argument("--out", type=Path, required=True)

    return parser


def run(args: argparse.Namespace) -> None:
    cfg = load_run_config(args.config).with_seed(args.seed)
    threads = args.threads or cfg.threads or default_threads()

    if args.command == "extract":
        cmd_extract(
            cfg,
            args.out,
            manifest_path=args.manifest,
            volume_args=args.volumes,
            subject_id=args.subject,
            threads=threads,
        )
    elif args.command == "graph":
        cmd_graph(cfg, args.fingerprints, args.out, args.k, args.modalities, threads)
    elif args.command == "similarity":
        cmd_similarity(args.graphs, args.out)
    elif args.command == "evaluate":
        cmd_evaluate(cfg, args.matrix, args.manifest, args.out, args.sibling_type)
    elif args.command == "sweep-k":
        cmd_sweep_k(cfg, args.fingerprints, args.manifest, args.out, threads)
    elif args.command == "phantom":
        cmd_phantom(cfg, args.out, args.spec, threads)
    elif args.command == "visualize":
        cmd_visualize(
            cfg,
            args.graph,
            args.manifest,
            (args.pair[0], args.pair[1]),
            args.axis,
            args.slice,
            args.out,
            args.modality,
        )


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    setup_logger()

    args = build_parser().parse_args(argv)
    try:
        run(args)
    except VolprintError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return InputOutputError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from dotenv import load_dotenv
from pydantic import ValidationError
from rich.console import Console

from config import RunConfig, load_run_config
from errors import (
    DimensionMismatchError,
    FeatureError,
    IntrinsicsMismatchError,
    KnowledgeBaseError,
    MapFormatError,
    QueryParseError,
    SequenceFormatError,
    WorldParamsError,
)
from graph.export import export_dot, export_json
from graph.persistence import load_map, save_map
from model_client import ProviderRole, ProviderSet, get_latency_recorder

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_SCHEMA = 1
EXIT_RUNTIME = 2
EXIT_PARSE = 3

RESUME_FILE = "RESUME"

SCHEMA_ERRORS = (
    SequenceFormatError,
    MapFormatError,
    IntrinsicsMismatchError,
    FeatureError,
    DimensionMismatchError,
    WorldParamsError,
    ValidationError,
    FileNotFoundError,
)


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the documented process exit code"""
    if isinstance(error, QueryParseError):
        return EXIT_PARSE
    if isinstance(error, SCHEMA_ERRORS):
        return EXIT_SCHEMA
    # config layering reports bad keys and overrides as plain ValueError
    if isinstance(error, ValueError) and not isinstance(error, KnowledgeBaseError):
        return EXIT_SCHEMA
    return EXIT_RUNTIME


def configure_logging() -> None:
    logging.basicConfig(
        level=os.getenv("LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Layer config file, --set flags and --providers, then print the reproducibility header"""
    overrides: List[str] = list(getattr(args, "set", None) or [])
    mode = getattr(args, "providers", None)
    if mode:
        overrides.extend(f"providers.{role.value}.mode={mode}" for role in ProviderRole)
    config = load_run_config(getattr(args, "config", None), overrides)
    print("\n".join(config.header_lines()), file=sys.stderr)
    return config


def make_providers(config: RunConfig) -> ProviderSet:
    return ProviderSet.from_config(config.providers, config.pipeline.embedding_dim)


def write_resume(out_dir: Path, last_frame_index: int) -> None:
    (out_dir / RESUME_FILE).write_text(f"{last_frame_index}\n", encoding="utf-8")


def cmd_build(args: argparse.Namespace) -> int:
    """
    Build a map directory from a recorded sequence

    Returns:
        0 on success, 1 on schema errors, 2 on runtime failure (partial map kept with RESUME)
    """
    from streams.pipeline import BuildPipeline
    from streams.sequence import load_sequence

    config = resolve_config(args)
    sequence = load_sequence(args.input)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    providers = make_providers(config)
    pipeline = BuildPipeline(sequence, config, providers, artifacts_dir=out_dir / "artifacts")
    try:
        result = pipeline.run()
    except Exception as e:
        logger.error(f"Build failed after frame {pipeline.result.last_frame_index}: {e}")
        save_map(pipeline.graph, pipeline.store, str(out_dir))
        write_resume(out_dir, pipeline.result.last_frame_index)
        raise
    finally:
        providers.close()
    save_map(result.graph, result.store, str(out_dir))
    (out_dir / RESUME_FILE).unlink(missing_ok=True)
    counts = result.graph.snapshot().counts()
    print(
        f"built {out_dir}: {counts} from {result.frames} frames, "
        f"{len(result.reports)} updates in {result.elapsed_s:.2f}s"
    )
    return EXIT_OK


def _retrieval_config(config: RunConfig, args: argparse.Namespace):
    updates: Dict[str, object] = {}
    if getattr(args, "k", None):
        updates["k"] = args.k
    if getattr(args, "verify", None):
        updates["verify"] = args.verify == "on"
    return config.retrieval.model_copy(update=updates)


def cmd_query(args: argparse.Namespace) -> int:
    from cli.repl import print_answer
    from retrieval.flow import RetrievalWorkflow

    config = resolve_config(args)
    graph, store = load_map(args.map)
    providers = make_providers(config)
    try:
        workflow = RetrievalWorkflow(graph.snapshot(), store, providers, _retrieval_config(config, args))
        answer = workflow.retrieve(args.text)
    finally:
        providers.close()
    if args.json:
        print(json.dumps(answer.audit_record(), indent=2))
    else:
        print_answer(Console(), answer, graph.snapshot())
    return EXIT_OK


def cmd_repl(args: argparse.Namespace) -> int:
    from cli.repl import QueryRepl

    config = resolve_config(args)
    graph, store = load_map(args.map)
    providers = make_providers(config)
    try:
        repl = QueryRepl(graph, store, providers, _retrieval_config(config, args), Console())
        repl.run()
        if args.persist and repl.fused:
            save_map(graph, store, args.map)
    finally:
        providers.close()
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    resolve_config(args)
    graph, store = load_map(args.map)
    document = export_json(graph, store) if args.format == "json" else export_dot(graph)
    if args.out:
        Path(args.out).write_text(document if document.endswith("\n") else document + "\n", encoding="utf-8")
        logger.info(f"Exported {args.format} to {args.out}")
    else:
        sys.stdout.write(document if document.endswith("\n") else document + "\n")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    from cli.bench import load_sweep, run_bench

    config = resolve_config(args)
    sweep = load_sweep(args.sweep) if args.sweep else {}
    report = run_bench(config, args.seeds, Path(args.out), sweep, Console(), recorder=get_latency_recorder())
    return EXIT_OK if report.runs else EXIT_RUNTIME


def cmd_simulate(args: argparse.Namespace) -> int:
    from synthetic.truth import simulate

    config = resolve_config(args)
    world_cfg = config.world if args.seed is None else config.world.model_copy(update={"seed": args.seed})
    world, simulated, truth = simulate(world_cfg, config.trajectory, args.out, config.pipeline.embedding_dim)
    print(
        f"simulated {args.out}: {len(world.rooms)} rooms, {len(world.objects)} objects, "
        f"{len(simulated.sequence.frames)} frames, {len(truth.queries)} queries"
    )
    return EXIT_OK


def _add_config_flags(parser: argparse.ArgumentParser, providers: bool = True) -> None:
    parser.add_argument("--config", help="flat section.key = value file (default $IKB_CONFIG)")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")
    if providers:
        parser.add_argument("--providers", choices=("stub", "http"), help="provider mode for every role")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ikb", description="Incremental hierarchical spatial knowledge base")
    commands = parser.add_subparsers(dest="command", required=True)

    build = commands.add_parser("build", help="build a map from a recorded sequence")
    build.add_argument("--input", required=True, help="sequence directory")
    build.add_argument("--out", required=True, help="map directory")
    _add_config_flags(build)
    build.set_defaults(handler=cmd_build)

    query = commands.add_parser("query", help="answer one query against a map")
    query.add_argument("--map", required=True, help="map directory")
    query.add_argument("text", help="query text")
    query.add_argument("--k", type=int, help="number of ranked candidates")
    query.add_argument("--verify", choices=("on", "off"), help="visual audit of the ranked candidates")
    query.add_argument("--json", action="store_true", help="print the audit trail as JSON")
    _add_config_flags(query)
    query.set_defaults(handler=cmd_query)

    repl = commands.add_parser("repl", help="interactive queries with score breakdowns")
    repl.add_argument("--map", required=True, help="map directory")
    repl.add_argument("--k", type=int, help="number of ranked candidates")
    repl.add_argument("--verify", choices=("on", "off"))
    repl.add_argument("--persist", action="store_true", help="save fused descriptions back to the map on exit")
    _add_config_flags(repl)
    repl.set_defaults(handler=cmd_repl)

    export = commands.add_parser("export", help="export a map as JSON or DOT")
    export.add_argument("--map", required=True, help="map directory")
    export.add_argument("--format", choices=("json", "dot"), default="json")
    export.add_argument("--out", help="output file (default stdout)")
    _add_config_flags(export, providers=False)
    export.set_defaults(handler=cmd_export)

    bench = commands.add_parser("bench", help="simulate, build and score query banks across seeds")
    bench.add_argument("--seeds", type=int, default=5, help="number of seeds")
    bench.add_argument("--sweep", help="flat file of section.key = v1,v2 lists")
    bench.add_argument("--out", default="bench_out", help="working and report directory")
    _add_config_flags(bench)
    bench.set_defaults(handler=cmd_bench)

    sim = commands.add_parser("simulate", help="write a synthetic sequence with its ground truth")
    sim.add_argument("--out", required=True, help="sequence directory")
    sim.add_argument("--seed", type=int, help="world seed (overrides world.seed)")
    _add_config_flags(sim, providers=False)
    sim.set_defaults(handler=cmd_simulate)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Entry point for the ikb command

    Args:
        argv: Arguments without the program name (defaults to sys.argv[1:])

    Returns:
        Process exit code
    """
    load_dotenv()
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except QueryParseError as e:
        start, end = e.span
        print(f"parse error at [{start}, {end}): {e}", file=sys.stderr)
        return EXIT_PARSE
    except Exception as e:
        code = exit_code_for(e)
        kind = "schema error" if code == EXIT_SCHEMA else "error"
        logger.debug(f"{args.command} failed", exc_info=True)
        print(f"{kind}: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())

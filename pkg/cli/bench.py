"""
Desk-scale benchmark: simulate worlds, build maps, run the query banks

Variants:
    full        built map, visual audit with a verifier keyed on the true answers
    no-verify   built map, audit disabled
    with-areas  truth graph with functional areas, area queries only
    no-areas    truth graph without areas, area queries only

bench_report.json holds only deterministic numbers; timings go to bench_latency.json.
"""
import itertools
import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel, Field
from rich.console import Console
from rich.table import Table
from scipy.optimize import linear_sum_assignment

from config import RunConfig, deep_merge, nest
from graph.keyframes import KeyframeStore
from graph.persistence import save_map
from graph.scene_graph import GraphView
from model_client import LatencyRecorder, ProviderSet
from retrieval.audit import KeyedAuditor
from retrieval.flow import RetrievalWorkflow
from streams.pipeline import BuildPipeline
from synthetic.queries import AREA_TEMPLATES, QueryInstance
from synthetic.truth import simulate
from synthetic.world import WorldSpec, world_to_graph

logger = logging.getLogger(__name__)

MATCH_RADIUS_M = 0.75
VARIANTS = ("full", "no-verify", "with-areas", "no-areas")
DENSE_KEYS = frozenset({"points", "point_cloud", "voxels", "colors"})
REPORT_FILE = "bench_report.json"
LATENCY_FILE = "bench_latency.json"


class VariantScore(BaseModel):
    variant: str
    seed: int
    queries: int = 0
    successes: int = 0
    floor_violations: int = 0

    @property
    def rate(self) -> float:
        return self.successes / self.queries if self.queries else 0.0


class StorageRow(BaseModel):
    """Serialized sizes in bytes; per-node columns are means over object nodes"""
    seed: int
    objects: int
    feat_per_node: float
    txt_per_node: float
    node_per_node: float
    img_total: int
    map_total: int
    dense_records: int


class BenchRun(BaseModel):
    label: str
    overrides: Dict[str, str] = Field(default_factory=dict)
    scores: List[VariantScore] = Field(default_factory=list)
    storage: List[StorageRow] = Field(default_factory=list)

    def totals(self) -> Dict[str, Tuple[int, int, int]]:
        """variant -> (successes, queries, floor violations) over all seeds"""
        totals: Dict[str, List[int]] = defaultdict(lambda: [0, 0, 0])
        for score in self.scores:
            entry = totals[score.variant]
            entry[0] += score.successes
            entry[1] += score.queries
            entry[2] += score.floor_violations
        return {variant: tuple(totals[variant]) for variant in VARIANTS if variant in totals}


class BenchReport(BaseModel):
    seeds: int
    runs: List[BenchRun] = Field(default_factory=list)


def load_sweep(path: str) -> Dict[str, List[str]]:
    """Read `section.key = v1,v2` lines; every key is swept over its listed values"""
    values = dotenv_values(path)
    return {key: [v.strip() for v in value.split(",") if v.strip()] for key, value in values.items() if value}


def sweep_points(sweep: Mapping[str, Sequence[str]]) -> List[Dict[str, str]]:
    if not sweep:
        return [{}]
    keys = sorted(sweep)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(sweep[k] for k in keys))]


def apply_overrides(config: RunConfig, overrides: Mapping[str, str]) -> RunConfig:
    if not overrides:
        return config
    merged = deep_merge(config.model_dump(mode="json"), nest(overrides))
    resolved = RunConfig.model_validate(merged)
    resolved.source_file = config.source_file
    return resolved


def match_objects(world: WorldSpec, view: GraphView, radius: float = MATCH_RADIUS_M) -> Dict[int, int]:
    """
    Map truth object ids to built node ids

    Candidates share label and floor; each group is matched one-to-one by minimum total
    centroid distance and pairs farther apart than `radius` are dropped.
    """
    truth_groups: Dict[Tuple[str, int], List] = defaultdict(list)
    for obj in world.objects:
        truth_groups[(obj.label, obj.floor_index)].append(obj)
    built_groups: Dict[Tuple[str, int], List] = defaultdict(list)
    for node in view.objects.values():
        floor = view.floors.get(node.floor_id)
        if floor is not None:
            built_groups[(node.label, floor.index)].append(node)

    matched: Dict[int, int] = {}
    for key, truths in truth_groups.items():
        nodes = sorted(built_groups.get(key, []), key=lambda n: n.id)
        if not nodes:
            continue
        a = np.array([t.center for t in truths])
        b = np.array([n.centroid for n in nodes])
        cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
        rows, cols = linear_sum_assignment(cost)
        for r, c in zip(rows, cols):
            if cost[r, c] <= radius:
                matched[truths[r].id] = nodes[c].id
    return matched


def _floor_violations(answer, view: GraphView) -> int:
    target = answer.query.target_floor
    if target is None:
        return 0
    wrong = 0
    for candidate in answer.candidates:
        floor = view.floors.get(view.objects[candidate.object_id].floor_id)
        if floor is None or floor.index != target:
            wrong += 1
    return wrong


def score_queries(
    variant: str,
    seed: int,
    workflow: RetrievalWorkflow,
    queries: Iterable[QueryInstance],
    id_map: Mapping[int, int],
    keyed: bool = False,
) -> VariantScore:
    score = VariantScore(variant=variant, seed=seed)
    for query in queries:
        positives: Set[int] = {id_map[p] for p in query.positives if p in id_map}
        if keyed:
            workflow.auditor = KeyedAuditor(positives)
        answer = workflow.retrieve(query.text)
        score.queries += 1
        score.floor_violations += _floor_violations(answer, workflow.view)
        if answer.object_id is not None and answer.object_id in positives:
            score.successes += 1
    logger.info(f"{variant} seed {seed}: {score.successes}/{score.queries}")
    return score


def _walk_keys(record, found: Set[str]) -> None:
    if isinstance(record, dict):
        for key, value in record.items():
            found.add(key)
            _walk_keys(value, found)
    elif isinstance(record, list):
        for value in record:
            _walk_keys(value, found)


def storage_breakdown(map_dir: Path, seed: int) -> StorageRow:
    """Feat / Img / Txt / Node / Map size columns measured on a saved map"""
    feat, txt, node = [], [], []
    for line in (map_dir / "objects.jsonl").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        feat.append(len(json.dumps(record["embedding"]).encode("utf-8")))
        txt.append(len(f"{record.get('description', '')} {record['label']}".encode("utf-8")))
        node.append(len(line.encode("utf-8")))

    dense = 0
    for path in sorted(map_dir.glob("*.jsonl")):
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                keys: Set[str] = set()
                _walk_keys(json.loads(line), keys)
                dense += bool(keys & DENSE_KEYS)

    images = map_dir / "images"
    img_total = sum(p.stat().st_size for p in images.glob("*.png")) if images.is_dir() else 0
    map_total = sum(
        p.stat().st_size for p in map_dir.rglob("*")
        if p.is_file() and "artifacts" not in p.relative_to(map_dir).parts
    )
    return StorageRow(
        seed=seed,
        objects=len(node),
        feat_per_node=float(np.mean(feat)) if feat else 0.0,
        txt_per_node=float(np.mean(txt)) if txt else 0.0,
        node_per_node=float(np.mean(node)) if node else 0.0,
        img_total=img_total,
        map_total=map_total,
        dense_records=dense,
    )


def _label(overrides: Mapping[str, str]) -> str:
    return ",".join(f"{k}={v}" for k, v in sorted(overrides.items())) or "default"


def run_seed(config: RunConfig, seed: int, work_dir: Path, recorder: Optional[LatencyRecorder] = None) -> BenchRun:
    """Simulate, build and score one seed; returns a run holding that seed's rows only"""
    dim = config.pipeline.embedding_dim
    world_cfg = config.world.model_copy(update={"seed": seed})
    seq_dir = work_dir / f"seed_{seed}" / "sequence"
    map_dir = work_dir / f"seed_{seed}" / "map"
    world, simulated, truth = simulate(world_cfg, config.trajectory, str(seq_dir), dim)
    queries = [q for q in truth.queries if not q.manual_eval]
    area_queries = [q for q in queries if q.template in AREA_TEMPLATES]

    providers = ProviderSet.from_config(config.providers, dim, recorder=recorder)
    run = BenchRun(label="")
    try:
        result = BuildPipeline(simulated.sequence, config, providers, artifacts_dir=map_dir / "artifacts").run()
        save_map(result.graph, result.store, str(map_dir))
        view = result.graph.snapshot()
        id_map = match_objects(world, view)
        logger.info(f"Seed {seed}: matched {len(id_map)}/{len(world.objects)} truth objects to built nodes")

        full_cfg = config.retrieval.model_copy(update={"verify": True})
        workflow = RetrievalWorkflow(view, result.store, providers, full_cfg, auditor=KeyedAuditor(()), recorder=recorder)
        run.scores.append(score_queries("full", seed, workflow, queries, id_map, keyed=True))

        plain_cfg = config.retrieval.model_copy(update={"verify": False})
        workflow = RetrievalWorkflow(view, result.store, providers, plain_cfg, recorder=recorder)
        run.scores.append(score_queries("no-verify", seed, workflow, queries, id_map))

        for variant, with_areas in (("with-areas", True), ("no-areas", False)):
            truth_graph, truth_map = world_to_graph(world, dim, with_areas=with_areas)
            workflow = RetrievalWorkflow(truth_graph.snapshot(), KeyframeStore(), providers, plain_cfg, recorder=recorder)
            run.scores.append(score_queries(variant, seed, workflow, area_queries, truth_map))

        run.storage.append(storage_breakdown(map_dir, seed))
    finally:
        providers.close()
    return run


def _rate(successes: int, queries: int) -> str:
    return f"{100.0 * successes / queries:.1f}% ({successes}/{queries})" if queries else "-"


def print_report(console: Console, report: BenchReport, recorder: Optional[LatencyRecorder]) -> None:
    for run in report.runs:
        table = Table(title=f"Success rate, {report.seeds} seeds ({run.label})")
        table.add_column("Variant", style="cyan")
        table.add_column("Success", justify="right")
        table.add_column("Wrong-floor candidates", justify="right")
        for variant, (successes, queries, violations) in run.totals().items():
            table.add_row(variant, _rate(successes, queries), str(violations))
        console.print(table)

        storage = Table(title=f"Storage ({run.label})")
        for column in ("Seed", "Objects", "Feat (B/node)", "Img (B)", "Txt (B/node)", "Node (B/node)", "Map size (B)", "Dense"):
            storage.add_column(column, justify="right")
        for row in run.storage:
            storage.add_row(
                str(row.seed), str(row.objects), f"{row.feat_per_node:.0f}", str(row.img_total),
                f"{row.txt_per_node:.0f}", f"{row.node_per_node:.0f}", str(row.map_total), str(row.dense_records),
            )
        console.print(storage)

    if recorder is not None:
        latency = Table(title="Latency (mean seconds)")
        latency.add_column("Stage", style="cyan")
        latency.add_column("Mean (s)", justify="right")
        for title, seconds in recorder.table_rows():
            latency.add_row(title, "-" if seconds is None else f"{seconds:.4f}")
        console.print(latency)


def run_bench(
    config: RunConfig,
    seeds: int,
    out_dir: Path,
    sweep: Optional[Mapping[str, Sequence[str]]] = None,
    console: Optional[Console] = None,
    recorder: Optional[LatencyRecorder] = None,
) -> BenchReport:
    """
    Run every sweep point over `seeds` consecutive world seeds

    Args:
        config: Base configuration; world.seed is the first seed
        seeds: Number of seeds per sweep point
        out_dir: Working directory for sequences and maps, and where reports are written
        sweep: section.key -> values, expanded as a cartesian product
        console: Where tables are printed, None for silent runs
        recorder: Latency recorder shared by every provider and workflow

    Returns:
        The deterministic report (also written to bench_report.json)
    """
    if seeds < 1:
        raise ValueError("bench needs at least one seed")
    out_dir.mkdir(parents=True, exist_ok=True)
    report = BenchReport(seeds=seeds)
    for index, overrides in enumerate(sweep_points(sweep or {})):
        point_cfg = apply_overrides(config, overrides)
        run = BenchRun(label=_label(overrides), overrides=dict(overrides))
        for offset in range(seeds):
            seed_run = run_seed(point_cfg, point_cfg.world.seed + offset, out_dir / f"point_{index}", recorder)
            run.scores.extend(seed_run.scores)
            run.storage.extend(seed_run.storage)
        report.runs.append(run)

    (out_dir / REPORT_FILE).write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    if recorder is not None:
        latency = {
            "roles": {role: stats.model_dump() for role, stats in recorder.latency_report().items()},
            "table": [{"stage": title, "mean_s": seconds} for title, seconds in recorder.table_rows()],
        }
        (out_dir / LATENCY_FILE).write_text(json.dumps(latency, indent=2) + "\n", encoding="utf-8")
    if console is not None:
        print_report(console, report, recorder)
    logger.info(f"Bench finished: {len(report.runs)} sweep points x {seeds} seeds, report in {out_dir}")
    return report

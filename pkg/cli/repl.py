"""
Interactive query loop over a loaded map

Each query prints the ranked candidates with one column per constraint showing its
polar, weighted similarity term, so a ranking can be read off the table.

Commands:
    :fuse <object id> <text>   merge an interaction into an object's description
    :quit                      leave the loop
"""
import logging
from typing import Callable, Optional

from rich.console import Console
from rich.markup import escape
from rich.table import Table

from config import RetrievalConfig
from errors import QueryParseError, UnknownNodeError
from graph.keyframes import KeyframeStore
from graph.scene_graph import GraphView, SceneGraph
from model_client import ProviderRole, ProviderSet
from query_schema import ConstraintKind, RetrievalAnswer
from retrieval.flow import RetrievalWorkflow
from retrieval.memory import fuse_temporal_memory

logger = logging.getLogger(__name__)

PROMPT = "[bold green]query>[/bold green] "


def _constraint_title(constraint) -> str:
    sign = "not " if constraint.polarity < 0 else ""
    kind = constraint.relation.value if constraint.kind == ConstraintKind.RELATION else constraint.kind.value
    anchor = f"@{constraint.anchor}" if constraint.anchor is not None else ""
    return f"{constraint.index}{anchor} {sign}{kind}: {constraint.text}"


def answer_table(answer: RetrievalAnswer, view: GraphView) -> Table:
    query = answer.query
    scored = [c for c in query.constraints if c.kind != ConstraintKind.FLOOR]
    title = f"{len(answer.candidates)} candidates"
    if query.target_floor is not None:
        title += f", floor {query.target_floor} only"
    table = Table(title=title)
    table.add_column("#", style="dim")
    table.add_column("Object", style="cyan")
    table.add_column("Label", style="white")
    table.add_column("Score", style="yellow", justify="right")
    for constraint in scored:
        table.add_column(_constraint_title(constraint), justify="right")
    table.add_column("Reference", style="dim")

    for position, candidate in enumerate(answer.candidates, start=1):
        node = view.objects.get(candidate.object_id)
        terms = {t.constraint_index: t for t in candidate.terms}
        cells = []
        for constraint in scored:
            term = terms.get(constraint.index)
            if term is None:
                cells.append("-")
                continue
            contribution = term.polarity * term.weight * term.sim
            cells.append(f"{contribution:+.3f} (sim {term.sim:.3f})")
        reference = "-"
        if candidate.reference_id is not None:
            reference = f"{candidate.reference_id} at {candidate.reference_distance:.2f} m"
        table.add_row(
            str(position),
            str(candidate.object_id),
            node.label if node is not None else "?",
            f"{candidate.score:.4f}",
            *cells,
            reference,
        )
    return table


def print_answer(console: Console, answer: RetrievalAnswer, view: GraphView) -> None:
    console.print(answer_table(answer, view))
    for verification in answer.verifications:
        console.print(f"[dim]audit {verification.object_id}: {verification.verdict} {verification.rationale}[/dim]")
    if answer.object_id is None:
        console.print("[yellow]No candidate matched.[/yellow]")
        return
    x, y, z = answer.centroid
    console.print(
        f"[bold]{answer.label}[/bold] (object {answer.object_id}) at ({x:.2f}, {y:.2f}, {z:.2f}), "
        f"{answer.status}, {answer.elapsed_ms:.1f} ms"
    )


class QueryRepl:
    """
    Line-oriented query loop

    Args:
        graph: Live scene graph; `:fuse` writes go to it
        store: Keyframe store for visual audits
        providers: Model providers
        config: Retrieval settings
        console: Where tables are printed
        input_fn: Reads one line given the prompt; raises EOFError at end of input
    """

    def __init__(
        self,
        graph: SceneGraph,
        store: Optional[KeyframeStore],
        providers: ProviderSet,
        config: RetrievalConfig,
        console: Console,
        input_fn: Optional[Callable[[str], str]] = None,
    ):
        self.graph = graph
        self.providers = providers
        self.config = config
        self.console = console
        self.input_fn = input_fn or console.input
        self.workflow = RetrievalWorkflow(graph.snapshot(), store, providers, config)
        self.fused = 0

    def fuse(self, argument: str) -> None:
        parts = argument.split(None, 1)
        if len(parts) < 2 or not parts[0].isdigit():
            self.console.print("[yellow]usage: :fuse <object id> <text>[/yellow]")
            return
        try:
            node = fuse_temporal_memory(
                self.graph,
                int(parts[0]),
                parts[1],
                client=self.providers.get(ProviderRole.SUMMARIZER),
                max_len=self.config.max_desc_len,
            )
        except (UnknownNodeError, ValueError) as e:
            self.console.print(f"[red]{escape(str(e))}[/red]")
            return
        self.fused += 1
        self.workflow.refresh(self.graph.snapshot())
        self.console.print(f"[green]object {node.id}:[/green] {escape(node.description)}")

    def ask(self, text: str) -> Optional[RetrievalAnswer]:
        try:
            answer = self.workflow.retrieve(text)
        except QueryParseError as e:
            start, end = e.span
            self.console.print(f"[red]parse error at [{start}, {end}): {escape(str(e))}[/red]")
            return None
        print_answer(self.console, answer, self.workflow.view)
        return answer

    def run(self) -> None:
        while True:
            try:
                raw = self.input_fn(PROMPT).strip()
            except (EOFError, KeyboardInterrupt):
                break
            if not raw:
                continue
            if raw == ":quit":
                break
            if raw.startswith(":fuse"):
                self.fuse(raw[len(":fuse"):].strip())
                continue
            if raw.startswith(":"):
                self.console.print(f"[dim]Unknown command: {raw.split()[0]}. Use :fuse or :quit.[/dim]")
                continue
            self.ask(raw)
        logger.info(f"REPL closed after {self.fused} fused interactions")

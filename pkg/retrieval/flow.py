import logging
import time
from typing import List, Optional

from langgraph.graph import END, StateGraph
from typing_extensions import TypedDict

from config import RetrievalConfig
from errors import QueryParseError
from graph.keyframes import KeyframeStore
from graph.scene_graph import GraphView
from model_client import LatencyRecorder, ProviderRole, ProviderSet, get_latency_recorder
from query_schema import CandidateScore, ParsedQuery, RetrievalAnswer, VerificationResult
from retrieval.audit import Auditor, make_auditor, verify_candidate
from retrieval.parser import parse_query
from retrieval.scoring import SimilarityIndex, rank

logger = logging.getLogger(__name__)


class RetrievalState(TypedDict):
    """State object for the retrieval workflow"""
    text: str
    query: Optional[ParsedQuery]
    candidates: List[CandidateScore]
    verifications: List[VerificationResult]
    answer: Optional[RetrievalAnswer]
    parse_error: Optional[QueryParseError]
    error: str


class RetrievalWorkflow:
    """
    LangGraph workflow: parse -> rank -> verify -> finalize

    One workflow serves one graph snapshot; `refresh` swaps in a newer one.

    Args:
        view: Graph snapshot to answer from
        store: Keyframe store holding best-view images, None for maps without images
        providers: Model providers
        config: Retrieval settings (parser mode, k, verification budget, auditor)
        auditor: Explicit auditor, overriding the one named in config
        recorder: Latency recorder receiving the "query" samples
    """

    def __init__(
        self,
        view: GraphView,
        store: Optional[KeyframeStore],
        providers: ProviderSet,
        config: RetrievalConfig,
        auditor: Optional[Auditor] = None,
        recorder: Optional[LatencyRecorder] = None,
    ):
        self.store = store
        self.providers = providers
        self.config = config
        self.auditor = auditor if auditor is not None else make_auditor(config, providers)
        self.recorder = recorder if recorder is not None else get_latency_recorder()
        self.view = view
        self._index: Optional[SimilarityIndex] = None
        self.workflow = self._build_workflow()

    def refresh(self, view: GraphView) -> None:
        if view is not self.view:
            self.view = view
            self._index = None

    def _build_workflow(self):
        """Build the LangGraph workflow"""
        workflow = StateGraph(RetrievalState)

        workflow.add_node("parse", self.parse_node)
        workflow.add_node("rank", self.rank_node)
        workflow.add_node("verify", self.verify_node)
        workflow.add_node("finalize", self.finalize_node)

        workflow.set_entry_point("parse")
        workflow.add_conditional_edges(
            "parse",
            lambda state: "finalize" if state.get("parse_error") or state.get("error") else "rank",
            {"rank": "rank", "finalize": "finalize"},
        )
        workflow.add_edge("rank", "verify")
        workflow.add_edge("verify", "finalize")
        workflow.add_edge("finalize", END)

        return workflow.compile()

    def parse_node(self, state: RetrievalState) -> RetrievalState:
        """
        Parse node - decompose the query into polar, weighted constraints

        Args:
            state: Current workflow state

        Returns:
            Updated state with the parsed query or the parse error
        """
        logger.info(f"Starting retrieval for query: {state['text'][:50]}...")
        try:
            query = parse_query(
                state["text"],
                mode=self.config.parser,
                client=self.providers.get(ProviderRole.PARSER),
            )
            return {**state, "query": query}
        except QueryParseError as e:
            logger.info(f"Query did not parse: {e}")
            return {**state, "parse_error": e}

    def rank_node(self, state: RetrievalState) -> RetrievalState:
        """
        Rank node - score every object and keep the top k

        Args:
            state: Current workflow state

        Returns:
            Updated state with ranked candidates
        """
        try:
            if self._index is None or not self._index.matches(self.view):
                self._index = SimilarityIndex(self.view, self.providers.embedder)
            candidates = rank(self.view, state["query"], self.config.k, self.providers.embedder, self._index)
            return {**state, "candidates": candidates}
        except Exception as e:
            error_msg = f"Error in rank node: {str(e)}"
            logger.error(error_msg)
            return {**state, "candidates": [], "error": error_msg}

    def verify_node(self, state: RetrievalState) -> RetrievalState:
        """
        Verify node - audit candidates in rank order until one is accepted or the budget runs out

        Args:
            state: Current workflow state

        Returns:
            Updated state with the verdicts collected so far
        """
        candidates = state["candidates"]
        if not candidates:
            return {**state, "verifications": []}
        if not self.config.verify:
            skipped = VerificationResult(
                object_id=candidates[0].object_id,
                verdict="provider_unavailable",
                rationale="verification disabled",
            )
            return {**state, "verifications": [skipped]}

        verifications: List[VerificationResult] = []
        for candidate in candidates[: self.config.verify_budget]:
            result = verify_candidate(candidate, state["query"], self.view, self.store, self.auditor)
            verifications.append(result)
            if result.verdict == "accept":
                break
        return {**state, "verifications": verifications}

    def finalize_node(self, state: RetrievalState) -> RetrievalState:
        """
        Finalize node - pick the answer and assemble the audit trail

        Args:
            state: Current workflow state

        Returns:
            Final state with the answer (None after a parse error)
        """
        query = state.get("query")
        if query is None:
            return {**state, "answer": None}
        candidates = state.get("candidates") or []
        verifications = state.get("verifications") or []
        if not candidates:
            answer = RetrievalAnswer(query=query, status="empty", candidates=[], verifications=verifications)
            return {**state, "answer": answer}

        chosen, status = candidates[0], "unverified"
        if not self.config.verify:
            status = "accepted"
        else:
            accepted = next((v for v in verifications if v.verdict == "accept"), None)
            if accepted is not None:
                chosen = next(c for c in candidates if c.object_id == accepted.object_id)
                status = "accepted"
        node = self.view.get_object(chosen.object_id)
        answer = RetrievalAnswer(
            query=query,
            status=status,
            object_id=node.id,
            label=node.label,
            centroid=node.centroid,
            score=chosen,
            candidates=candidates,
            verifications=verifications,
        )
        logger.info(f"Retrieval answer: object {node.id} ({node.label}), {status}")
        return {**state, "answer": answer}

    def retrieve(self, text: str) -> RetrievalAnswer:
        """
        Run one query through the workflow

        Args:
            text: Query text

        Returns:
            RetrievalAnswer with the audit trail

        Raises:
            QueryParseError: when the query has no recognizable target
        """
        started = time.perf_counter()
        initial_state = RetrievalState(
            text=text,
            query=None,
            candidates=[],
            verifications=[],
            answer=None,
            parse_error=None,
            error="",
        )
        final_state = self.workflow.invoke(initial_state)
        if final_state.get("parse_error") is not None:
            raise final_state["parse_error"]
        elapsed_ms = (time.perf_counter() - started) * 1000.0
        self.recorder.record_latency("query", elapsed_ms)
        answer = final_state["answer"]
        return answer.model_copy(update={"elapsed_ms": elapsed_ms})


def retrieve(
    view: GraphView,
    text: str,
    config: RetrievalConfig,
    providers: ProviderSet,
    store: Optional[KeyframeStore] = None,
    auditor: Optional[Auditor] = None,
) -> RetrievalAnswer:
    """One-shot retrieval over a snapshot"""
    return RetrievalWorkflow(view, store, providers, config, auditor=auditor).retrieve(text)

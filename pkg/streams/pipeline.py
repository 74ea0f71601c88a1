import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from config import RunConfig
from errors import GraphInvariantError
from graph.keyframes import KeyframeStore
from graph.scene_graph import SceneGraph
from model_client import ProviderSet
from scene_schema import UpdateReport
from streams.geometric import EndOfStream, FloorItem, GeometricStream, KeyframeItem, RoomMaskRegistry, TriggerCheck
from streams.semantic import KeyframeDelta, SemanticStream
from streams.sequence import RecordedSequence
from supervisor.update import Supervisor

logger = logging.getLogger(__name__)


class _Cancelled(Exception):
    pass


@dataclass(frozen=True)
class ProducerFailed:
    error: BaseException


@dataclass
class BuildResult:
    graph: SceneGraph
    store: KeyframeStore
    reports: List[UpdateReport] = field(default_factory=list)
    deltas: List[KeyframeDelta] = field(default_factory=list)
    frames: int = 0
    last_frame_index: int = -1
    elapsed_s: float = 0.0


class BuildPipeline:
    """
    Hosts both streams under the semantic queue contract

    The geometric stream produces into a bounded FIFO (the producer blocks when it is
    full, nothing is dropped); the writer context drains it and owns every graph mutation.

    Args:
        sequence: Recorded input sequence
        config: Fully resolved run configuration
        providers: Model providers (stub or http)
        artifacts_dir: Where updates.jsonl and BEV images go, None to skip them
    """

    def __init__(
        self,
        sequence: RecordedSequence,
        config: RunConfig,
        providers: ProviderSet,
        artifacts_dir: Optional[Path] = None,
    ):
        self.sequence = sequence
        self.config = config
        self.providers = providers
        self.graph = SceneGraph(
            embedding_dim=config.pipeline.embedding_dim,
            known_categories=config.association.known_categories,
            grid_resolution_m=config.grid.resolution_m,
        )
        self.store = KeyframeStore()
        self.registry = RoomMaskRegistry()
        self.semantic = SemanticStream(
            self.graph, self.store, self.registry, providers,
            config.association, config.topology,
            room_match_iou=config.supervisor.room_match_iou,
            crop_pad=config.retrieval.crop_pad,
        )
        self.supervisor = Supervisor(
            self.graph, self.store, providers, config.grid, config.supervisor,
            artifacts_dir=artifacts_dir,
            horizontal_fov=sequence.meta.intrinsics.horizontal_fov,
        )
        self.result = BuildResult(graph=self.graph, store=self.store)
        self._stop = threading.Event()

    def handle(self, item: object) -> bool:
        """Apply one queue item on the writer context; False once the stream has ended"""
        if isinstance(item, FloorItem):
            floor = self.graph.add_floor(item.floor.index, item.floor.z_min, item.floor.z_max)
            if floor.id != item.floor.id:
                raise GraphInvariantError("floor-id-order", f"writer created {floor.id}, producer expected {item.floor.id}")
        elif isinstance(item, KeyframeItem):
            frame = item.frame
            self.store.add(
                frame.keyframe_id, frame.pose, frame.intrinsics.width, frame.intrinsics.height,
                floor_id=frame.floor_id, image_bytes=item.image_bytes,
            )
            delta = self.semantic.process_keyframe(frame, item.image_bytes)
            self.supervisor.note_changes(delta.created)
            self.result.deltas.append(delta)
            self.result.last_frame_index = item.frame_index
        elif isinstance(item, TriggerCheck):
            self.result.reports.extend(self.supervisor.on_check(item))
            self.result.last_frame_index = item.frame_index
        elif isinstance(item, EndOfStream):
            self.result.reports.extend(self.supervisor.on_end(item))
            self.result.last_frame_index = item.frame_index
            return False
        elif isinstance(item, ProducerFailed):
            raise item.error
        return True

    def _run_inline(self) -> None:
        pending: List[object] = []
        stream = GeometricStream(self.sequence, self.config.grid, self.config.pipeline, self.registry, pending.append)
        for index, frame in enumerate(self.sequence.frames):
            stream.process(index, frame)
            while pending:
                self.handle(pending.pop(0))
        stream.finish()
        for item in pending:
            self.handle(item)

    def _emit(self, channel: "queue.Queue[object]", item: object) -> None:
        while not self._stop.is_set():
            try:
                channel.put(item, timeout=0.1)
                return
            except queue.Full:
                continue
        raise _Cancelled()

    def _run_threaded(self) -> None:
        channel: "queue.Queue[object]" = queue.Queue(maxsize=self.config.pipeline.queue_capacity)
        stream = GeometricStream(
            self.sequence, self.config.grid, self.config.pipeline, self.registry,
            lambda item: self._emit(channel, item),
        )

        def produce() -> None:
            try:
                stream.run()
            except _Cancelled:
                logger.debug("Geometric stream cancelled")
            except Exception as e:
                logger.error(f"Geometric stream failed: {e}")
                try:
                    self._emit(channel, ProducerFailed(e))
                except _Cancelled:
                    pass

        producer = threading.Thread(target=produce, name="geometric-stream", daemon=True)
        producer.start()
        try:
            while self.handle(channel.get()):
                pass
        finally:
            self._stop.set()
            producer.join(timeout=5.0)

    def run(self) -> BuildResult:
        started = time.perf_counter()
        logger.info(
            f"Building from {self.sequence.root} ({len(self.sequence.frames)} frames, "
            f"{'threaded' if self.config.pipeline.threaded else 'inline'})"
        )
        if self.config.pipeline.threaded:
            self._run_threaded()
        else:
            self._run_inline()
        self.result.frames = len(self.sequence.frames)
        self.result.elapsed_s = time.perf_counter() - started
        logger.info(f"Build finished in {self.result.elapsed_s:.2f}s: {self.graph.snapshot().counts()}")
        return self.result

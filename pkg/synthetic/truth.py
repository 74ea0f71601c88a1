import json
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError

from config import TrajectoryConfig, WorldConfig
from errors import SequenceFormatError
from synthetic.queries import QueryInstance, generate_query_bank
from synthetic.sequence import SimulatedSequence, generate_sequence
from synthetic.world import TruthRelation, WorldSpec, generate_world

logger = logging.getLogger(__name__)

WORLD_FILE = "world.json"
TRUTH_FILE = "truth.json"


class GroundTruth(BaseModel):
    """Answer key of a simulated run: who each detection saw, where objects live, and the query bank"""
    seed: int
    detections: Dict[str, List[int]] = Field(default_factory=dict)
    object_rooms: Dict[int, int]
    object_areas: Dict[int, Optional[str]]
    object_floors: Dict[int, int]
    relations: List[TruthRelation]
    queries: List[QueryInstance]

    def observed_objects(self) -> List[int]:
        return sorted({oid for ids in self.detections.values() for oid in ids})


def build_ground_truth(
    world: WorldSpec,
    detections: Mapping[str, List[int]],
    queries: List[QueryInstance],
) -> GroundTruth:
    return GroundTruth(
        seed=world.seed,
        detections=dict(detections),
        object_rooms={o.id: o.room_id for o in world.objects},
        object_areas={o.id: o.area for o in world.objects},
        object_floors={o.id: o.floor_index for o in world.objects},
        relations=list(world.relations),
        queries=queries,
    )


def simulate(
    world_cfg: WorldConfig,
    trajectory_cfg: TrajectoryConfig,
    directory: str,
    embedding_dim: int = 512,
) -> Tuple[WorldSpec, SimulatedSequence, GroundTruth]:
    """
    Generate a world, drive a sequence through it and write world.json + truth.json beside it

    Returns:
        (world, simulated sequence, ground truth)
    """
    world = generate_world(world_cfg)
    simulated = generate_sequence(world, trajectory_cfg, directory, embedding_dim)
    truth = build_ground_truth(world, simulated.detections, generate_query_bank(world, world_cfg))
    root = Path(directory)
    (root / WORLD_FILE).write_text(world.model_dump_json(indent=2) + "\n", encoding="utf-8")
    (root / TRUTH_FILE).write_text(truth.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"Simulated seed {world.seed} into {root}: {len(truth.queries)} queries, {len(truth.observed_objects())} objects seen")
    return world, simulated, truth


def _load(path: Path, model):
    if not path.is_file():
        raise SequenceFormatError(f"{path}: missing")
    try:
        return model.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as e:
        raise SequenceFormatError(f"{path}: {str(e).splitlines()[0]}") from e


def load_world(directory: str) -> WorldSpec:
    return _load(Path(directory) / WORLD_FILE, WorldSpec)


def load_ground_truth(directory: str) -> GroundTruth:
    return _load(Path(directory) / TRUTH_FILE, GroundTruth)

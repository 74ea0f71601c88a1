import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, Field, field_validator, model_validator

from model_client import ProviderRole, ProvidersConfig

logger = logging.getLogger(__name__)

DEFAULT_KNOWN_CATEGORIES: Tuple[str, ...] = (
    "bed", "nightstand", "wardrobe", "pillow", "chair", "table", "sofa", "tv", "remote",
    "desk", "lamp", "book", "monitor", "laptop", "fridge", "stove", "sink", "microwave",
    "cup", "toilet", "bathtub", "towel", "mirror", "cabinet", "plant", "shelf",
)

DEFAULT_ROOM_HINTS: Dict[str, str] = {
    "bed": "bedroom", "nightstand": "bedroom", "wardrobe": "bedroom", "pillow": "bedroom",
    "sofa": "living room", "tv": "living room", "remote": "living room",
    "desk": "office", "monitor": "office", "laptop": "office",
    "fridge": "kitchen", "stove": "kitchen", "microwave": "kitchen",
    "toilet": "bathroom", "bathtub": "bathroom", "towel": "bathroom",
    "cabinet": "dining room",
}


def _split_list(value):
    if isinstance(value, str):
        return tuple(item.strip() for item in value.split(",") if item.strip())
    return value


class GridConfig(BaseModel):
    resolution_m: float = Field(default=0.05, gt=0)
    door_half_width_m: float = Field(default=0.6, gt=0)
    min_room_area_m2: float = Field(default=2.0, ge=0)
    min_free_cells: int = Field(default=50, ge=1)
    floor_gap_m: float = Field(default=1.5, gt=0)
    dwell_frames: int = Field(default=30, ge=1)
    hysteresis_m: float = Field(default=0.3, ge=0)
    tau_sim: float = Field(default=0.85, ge=0.0, le=1.0)
    max_range_m: float = Field(default=10.0, gt=0)
    depth_band_fraction: float = Field(default=0.1, gt=0, le=1.0)


class AssociationConfig(BaseModel):
    tau_iou3d: float = Field(default=0.25, ge=0.0, le=1.0)
    tau_vis_strict: float = Field(default=0.80, ge=0.0, le=1.0)
    tau_vis_open: float = Field(default=0.90, ge=0.0, le=1.0)
    relaxed_radius: float = Field(default=0.75, ge=0)
    cluster_radius: float = Field(default=1.5, gt=0)
    k_min_depth: int = Field(default=10, ge=1)
    known_categories: Tuple[str, ...] = DEFAULT_KNOWN_CATEGORIES

    @field_validator("known_categories", mode="before")
    @classmethod
    def split_categories(cls, v):
        return _split_list(v)

    @model_validator(mode="after")
    def check_open_threshold(self) -> "AssociationConfig":
        if self.tau_vis_open < self.tau_vis_strict:
            raise ValueError("tau_vis_open must be >= tau_vis_strict")
        return self


class TopologyConfig(BaseModel):
    mode: Literal["geometric", "model"] = "geometric"
    on_gap_min_m: float = -0.05
    on_gap_max_m: float = 0.15
    on_overlap: float = Field(default=0.3, ge=0.0, le=1.0)
    near_distance_m: float = Field(default=1.0, gt=0)
    next_to_vertical: float = Field(default=0.5, ge=0.0, le=1.0)


class SupervisorConfig(BaseModel):
    mode: Literal["rules", "model"] = "rules"
    loop_radius_m: float = Field(default=2.0, gt=0)
    loop_path_len_m: float = Field(default=15.0, ge=0)
    n_obj_trigger: int = Field(default=25, ge=1)
    area_radius_m: float = Field(default=2.0, gt=0)
    room_match_iou: float = Field(default=0.3, ge=0.0, le=1.0)
    area_match_jaccard: float = Field(default=0.5, ge=0.0, le=1.0)
    wedge_fade_s: float = Field(default=120.0, gt=0)
    fov_rays: int = Field(default=90, ge=2)
    view_range_m: float = Field(default=10.0, gt=0)
    bev_scale_m: float = Field(default=0.05, gt=0)
    room_hints: Dict[str, str] = Field(default_factory=lambda: dict(DEFAULT_ROOM_HINTS))

    @field_validator("room_hints", mode="before")
    @classmethod
    def parse_hints(cls, v):
        if isinstance(v, str):
            hints = {}
            for pair in v.split(","):
                if ":" in pair:
                    label, room = pair.split(":", 1)
                    hints[label.strip()] = room.strip()
            return hints
        return v


class RetrievalConfig(BaseModel):
    parser: Literal["rules", "model"] = "rules"
    k: int = Field(default=5, ge=1)
    verify_budget: int = Field(default=3, ge=1)
    verify: bool = True
    auditor: Literal["model", "accept_all", "keyed"] = "model"
    max_desc_len: int = Field(default=512, ge=16)
    crop_pad: float = Field(default=0.1, ge=0.0)


class PipelineConfig(BaseModel):
    queue_capacity: int = Field(default=64, ge=1)
    segment_every: int = Field(default=10, ge=1)
    check_every: int = Field(default=5, ge=1)
    threaded: bool = True
    embedding_dim: int = Field(default=512, ge=8)
    seed: int = 0


class WorldConfig(BaseModel):
    """Size parameters of a generated synthetic world"""
    seed: int = 0
    floors: int = Field(default=1, ge=1, le=4)
    rooms_per_floor: int = Field(default=3, ge=1, le=8)
    room_min_m: float = Field(default=4.0, gt=1.0)
    room_max_m: float = Field(default=5.0, gt=1.0)
    wall_m: float = Field(default=0.2, gt=0)
    door_min_m: float = Field(default=0.7, gt=0)
    door_max_m: float = Field(default=1.0, gt=0)
    floor_height_m: float = Field(default=3.0, gt=0)
    clutter_per_room: int = Field(default=0, ge=0)
    queries_per_template: int = Field(default=4, ge=1)
    room_kinds: Tuple[str, ...] = ()

    @field_validator("room_kinds", mode="before")
    @classmethod
    def split_kinds(cls, v):
        return _split_list(v)

    @model_validator(mode="after")
    def check_ranges(self) -> "WorldConfig":
        if self.room_min_m > self.room_max_m:
            raise ValueError("room_min_m exceeds room_max_m")
        if self.door_min_m > self.door_max_m:
            raise ValueError("door_min_m exceeds door_max_m")
        return self


class TrajectoryConfig(BaseModel):
    step_m: float = Field(default=0.3, gt=0)
    spin_steps: int = Field(default=8, ge=0)
    revisits: int = Field(default=0, ge=0)
    jitter_sigma_m: float = Field(default=0.0, ge=0)
    image_width: int = Field(default=320, ge=16)
    image_height: int = Field(default=240, ge=16)
    fx: float = Field(default=160.0, gt=0)
    rays: int = Field(default=160, ge=4)
    max_range_m: float = Field(default=10.0, gt=0)
    min_depth_m: float = Field(default=1.0, gt=0)
    corner_views: bool = True
    corner_inset_m: float = Field(default=0.35, gt=0)
    stair_frames: int = Field(default=10, ge=1)
    landing_frames: int = Field(default=40, ge=1)
    frame_dt_s: float = Field(default=0.1, gt=0)
    write_images: bool = True


class RunConfig(BaseModel):
    """Fully resolved run configuration"""
    grid: GridConfig = Field(default_factory=GridConfig)
    association: AssociationConfig = Field(default_factory=AssociationConfig)
    topology: TopologyConfig = Field(default_factory=TopologyConfig)
    supervisor: SupervisorConfig = Field(default_factory=SupervisorConfig)
    retrieval: RetrievalConfig = Field(default_factory=RetrievalConfig)
    providers: ProvidersConfig = Field(default_factory=ProvidersConfig)
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    world: WorldConfig = Field(default_factory=WorldConfig)
    trajectory: TrajectoryConfig = Field(default_factory=TrajectoryConfig)
    source_file: Optional[str] = Field(default=None, exclude=True)

    def header_lines(self) -> List[str]:
        """Reproducibility header: precedence order followed by every resolved key"""
        lines = [
            f"# precedence: defaults < config file ({self.source_file or 'none'}) < flags < environment"
        ]
        for key, value in sorted(flatten(self.model_dump(mode="json")).items()):
            lines.append(f"{key} = {value}")
        return lines


def flatten(data: Mapping[str, object], prefix: str = "") -> Dict[str, object]:
    flat: Dict[str, object] = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping) and value and not dotted.endswith("room_hints"):
            flat.update(flatten(value, dotted + "."))
        elif isinstance(value, Mapping):
            flat[dotted] = ",".join(f"{k}:{v}" for k, v in sorted(value.items()))
        elif isinstance(value, (list, tuple)):
            flat[dotted] = ",".join(str(v) for v in value)
        else:
            flat[dotted] = value
    return flat


def nest(flat: Mapping[str, object]) -> Dict[str, object]:
    """Turn dotted keys into nested dicts"""
    nested: Dict[str, object] = {}
    for key, value in flat.items():
        parts = [part for part in key.strip().split(".") if part]
        if len(parts) < 2:
            raise ValueError(f"config key {key!r} needs a section prefix")
        cursor = nested
        for part in parts[:-1]:
            cursor = cursor.setdefault(part, {})
        cursor[parts[-1]] = value
    return nested


def deep_merge(base: Dict[str, object], layer: Mapping[str, object]) -> Dict[str, object]:
    merged = dict(base)
    for key, value in layer.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(dict(merged[key]), value)
        else:
            merged[key] = value
    return merged


def parse_overrides(overrides: Sequence[str]) -> Dict[str, str]:
    """Parse --set section.key=value flags"""
    flat = {}
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not section.key=value")
        key, value = item.split("=", 1)
        flat[key.strip()] = value.strip()
    return flat


def environment_layer(environ: Mapping[str, str]) -> Dict[str, str]:
    flat = {}
    for role in ProviderRole:
        prefix = f"IKB_{role.name}_"
        for suffix, field in (("ENDPOINT", "endpoint"), ("MODEL", "model"), ("MODE", "mode")):
            value = environ.get(prefix + suffix)
            if value:
                flat[f"providers.{role.value}.{field}"] = value
        if environ.get(prefix + "TOKEN"):
            flat[f"providers.{role.value}.token_env"] = prefix + "TOKEN"
    return flat


def load_run_config(
    config_path: Optional[str] = None,
    overrides: Sequence[str] = (),
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """
    Resolve the run configuration from its layers

    Args:
        config_path: Flat key-value file; falls back to $IKB_CONFIG
        overrides: section.key=value strings from the command line
        environ: Environment mapping (defaults to os.environ)

    Returns:
        Validated RunConfig
    """
    environ = os.environ if environ is None else environ
    config_path = config_path or environ.get("IKB_CONFIG")
    merged: Dict[str, object] = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {config_path}")
        file_values = {k: v for k, v in dotenv_values(path).items() if v is not None}
        logger.info(f"Loaded {len(file_values)} config keys from {config_path}")
        merged = deep_merge(merged, nest(file_values))
    merged = deep_merge(merged, nest(parse_overrides(overrides)))
    merged = deep_merge(merged, nest(environment_layer(environ)))
    config = RunConfig.model_validate(merged)
    config.source_file = str(config_path) if config_path else None
    return config

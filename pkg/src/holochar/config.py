"""Project configuration: one JSON file naming every asset plus stage settings.

Serialization is canonical (sorted keys, fixed indentation), so
parse -> serialize -> parse is a fixed point and configs diff cleanly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ValidationError


@dataclass
class FitSettings:
    learning_rate: float = 0.05
    iterations: int = 200
    lambda_lap: float | None = None
    chamfer_samples: int = 10_000
    grid_cell: float | None = None
    optimize_graph: bool = False
    seed: int = 0


@dataclass
class TrainSettings:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    steps: int = 5000
    seed: int = 0
    checkpoint_interval: int = 1000
    frames: list = field(default_factory=lambda: [0])
    target_camera: str = ""
    texfeat_base: int = 32
    srnet_base: int = 32
    srnet_blocks: int = 4


@dataclass
class ProjectConfig:
    name: str = "project"
    mesh: str = "template.obj"
    skeleton: str = "skeleton.json"
    graph: str = "graph.json"
    skinning: str = "skinning.json"
    motion: str = "motion.jsonl"
    cameras: str = "cameras.json"
    hand_mask: str | None = None
    images_dir: str = "images"
    masks_dir: str = "masks"
    targets_dir: str = "targets"
    out_dir: str = "out"
    weights: str | None = None
    texture_size: list = field(default_factory=lambda: [1024, 1024])  # [W, H]
    render_size: list = field(default_factory=lambda: [1024, 768])  # [W', H']
    epsilon: float | None = None  # None -> 0.5% of posed bbox diagonal
    delta_deg: float = 80.0
    window: int = 3  # motion window length T
    input_views: list = field(default_factory=lambda: ["cam0", "cam1", "cam2", "cam3"])
    fit: FitSettings = field(default_factory=FitSettings)
    train: TrainSettings = field(default_factory=TrainSettings)

    def __post_init__(self):
        if len(self.input_views) < 1:
            raise ValidationError("at least one input view is required")
        if self.window < 1:
            raise ValidationError("motion window must be >= 1")
        for pair, what in ((self.texture_size, "texture_size"), (self.render_size, "render_size")):
            if len(pair) != 2 or pair[0] < 1 or pair[1] < 1:
                raise ValidationError(f"{what} must be [W, H] with positive entries")
        if isinstance(self.fit, dict):
            self.fit = FitSettings(**self.fit)
        if isinstance(self.train, dict):
            self.train = TrainSettings(**self.train)

    def resolve(self, key: str, base: Path) -> Path:
        value = getattr(self, key)
        if value is None:
            raise ValidationError(f"config field {key} is not set")
        p = Path(value)
        return p if p.is_absolute() else base / p


def config_to_json(config: ProjectConfig) -> str:
    return json.dumps(asdict(config), indent=2, sort_keys=True) + "\n"


def config_from_json(text: str) -> ProjectConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"bad config JSON: {exc}") from exc
    known = {f for f in ProjectConfig.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown config fields: {sorted(unknown)}")
    return ProjectConfig(**data)


def load_config(path) -> ProjectConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_json(fh.read())


def save_config(path, config: ProjectConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_json(config))

"""Run configuration: desk-scale defaults, JSON round-trip."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .dethead import HeadConfig
from .encodings import BevConfig
from .pa import PaDesign
from .scenegen import SceneConfig
from .va import AttentionStack, SchemeKind

# Reference values of the full-scale model, kept for documentation and the cost model.
FULL_SCALE = {
    "image_hw": (640, 1600),
    "bev": (64, 64, 256),
    "perception_range_m": (-51.2, 51.2),
    "n_self": 1,
    "n_cross": 6,
    "epochs": 24,
    "lr_milestones": (20, 23),
    "lr": 2e-4,
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 6
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 1e-2
    # same shape as the full-scale schedule: decay x0.1 at 20/24 and 23/24 of training
    milestones: tuple[float, ...] = (20 / 24, 23 / 24)
    gamma: float = 0.1
    n_train: int = 1000
    n_eval: int = 50
    grad_clip: float = 10.0


@dataclass(frozen=True)
class RunConfig:
    bev: BevConfig = BevConfig()
    scene: SceneConfig = SceneConfig()
    head: HeadConfig = HeadConfig()
    stack: AttentionStack = AttentionStack()
    train: TrainConfig = TrainConfig()
    n_views: int = 6
    backbone_channels: tuple[int, int] = (16, 32)
    img_pos_dim: int = 16
    scheme: SchemeKind = SchemeKind.REC2X2
    design: PaDesign = PaDesign.EXPLICIT
    baseline_z: float = 0.5
    baseline_subsample: int = 4
    seed: int = 0
    # scene seeds: train = data_seed + [0, n_train), eval = data_seed + 10**6 + [0, n_eval)
    data_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scheme", SchemeKind(self.scheme))
        object.__setattr__(self, "design", PaDesign(self.design))
        H, W = self.scene.image_hw
        if H % 4 or W % 4:
            raise ValueError("image extents must be divisible by the backbone stride 4")
        if self.head.n_classes != len(self.scene.class_probs):
            raise ValueError("head class count differs from the scene class set")

    @property
    def feature_hw(self) -> tuple[int, int]:
        H, W = self.scene.image_hw
        return H // 4, W // 4

    def train_seeds(self) -> list[int]:
        return [self.data_seed + i for i in range(self.train.n_train)]

    def eval_seeds(self) -> list[int]:
        return [self.data_seed + 10**6 + i for i in range(self.train.n_eval)]

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme"] = self.scheme.value
        d["design"] = self.design.value
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        nested = {"bev": BevConfig, "scene": SceneConfig, "head": HeadConfig,
                  "stack": AttentionStack, "train": TrainConfig}
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            value = d[f.name]
            if f.name in nested:
                value = nested[f.name](**{k: _tuples(v) for k, v in value.items()})
            kwargs[f.name] = _tuples(value)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _tuples(v):
    return tuple(_tuples(x) for x in v) if isinstance(v, list) else v

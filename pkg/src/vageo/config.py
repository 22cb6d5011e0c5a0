"""Resolved run configuration: file values first, command-line flags on top."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .csha import CSHAConfig
from .model import BackboneConfig, ModelConfig
from .train import TrainConfig
from .vspe import DroneEncodingConfig, GroundEncodingConfig

# Desk-scale overfit preset: one batch of 8 per epoch, 300 steps.
TOY_TRAIN = TrainConfig(lr0=1e-3, halve_every=100, batch_size=8, epochs=300)


@dataclass(frozen=True)
class RunConfig:
    view: str = "ground"
    ground: GroundEncodingConfig = field(default_factory=GroundEncodingConfig)
    drone: DroneEncodingConfig = field(default_factory=DroneEncodingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    query_hw: tuple[int, int] | None = None  # resize target, None keeps native size
    ref_hw: tuple[int, int] | None = None
    seed: int = 0
    manifest: str | None = None
    out: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "ground" in d:
            d["ground"] = GroundEncodingConfig(**d["ground"])
        if "drone" in d:
            d["drone"] = DroneEncodingConfig(tuple(d["drone"]["weights"]))
        if "model" in d:
            m = dict(d["model"])
            for k in ("query_backbone", "reference_backbone"):
                if k in m:
                    m[k] = BackboneConfig(**m[k])
            if "csha" in m:
                m["csha"] = CSHAConfig(**m["csha"])
            d["model"] = ModelConfig(**m)
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        for k in ("query_hw", "ref_hw"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def with_overrides(self, **flags) -> "RunConfig":
        """Apply flat flag values (``None`` means not given)."""
        f = {k: v for k, v in flags.items() if v is not None}
        cfg = self
        top = {k: f.pop(k) for k in ("view", "seed", "manifest", "out", "query_hw", "ref_hw") if k in f}
        if top:
            cfg = replace(cfg, **{k: (tuple(v) if k.endswith("_hw") else v) for k, v in top.items()})
        g = {k: f.pop(k) for k in ("sigma", "kernel", "normalize_peak") if k in f}
        if g:
            cfg = replace(cfg, ground=replace(cfg.ground, **g))
        if "ring_weights" in f:
            cfg = replace(cfg, drone=DroneEncodingConfig(tuple(f.pop("ring_weights"))))
        t = {k: f.pop(k) for k in ("lr0", "halve_every", "batch_size", "epochs") if k in f}
        if t:
            cfg = replace(cfg, train=replace(cfg.train, **t))
        c = {k: f.pop(k) for k in ("reduction", "kernel_size", "spatial_relu", "use_channel", "use_spatial") if k in f}
        m = cfg.model
        if c:
            m = replace(m, csha=replace(m.csha, **c))
        if "query_backbone" in f:
            m = replace(m, query_backbone=replace(m.query_backbone, preset=f.pop("query_backbone")))
        if "reference_backbone" in f:
            m = replace(m, reference_backbone=replace(m.reference_backbone, preset=f.pop("reference_backbone")))
        if "width" in f:
            w = f.pop("width")
            m = replace(m, query_backbone=replace(m.query_backbone, width=w),
                        reference_backbone=replace(m.reference_backbone, width=w))
        if "bypass_csha" in f:
            m = replace(m, bypass_csha=f.pop("bypass_csha"))
        if f:
            raise ValueError(f"unknown overrides: {sorted(f)}")
        return replace(cfg, model=m)

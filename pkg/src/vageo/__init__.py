"""Cross-view object geo-localization with view-specific click encodings and
channel-spatial hybrid attention, at desk scale."""

from .boxes import BBox
from .csha import CSHA, CSHAConfig
from .model import BackboneConfig, ModelConfig, VAGeoNet
from .train import TrainConfig, lr_schedule
from .vspe import ClickPoint, DroneEncodingConfig, GroundEncodingConfig, drone_encoding, ground_encoding

__all__ = [
    "BBox",
    "BackboneConfig",
    "CSHA",
    "CSHAConfig",
    "ClickPoint",
    "DroneEncodingConfig",
    "GroundEncodingConfig",
    "ModelConfig",
    "TrainConfig",
    "VAGeoNet",
    "drone_encoding",
    "ground_encoding",
    "lr_schedule",
]

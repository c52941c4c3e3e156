"""Scene data model, persistence, splitting and synthetic generation."""

from hlsf.scenes.core import AgentTrack, Scene, VectorMap
from hlsf.scenes.io import read_scenes, scene_from_dict, scene_io, scene_to_dict, write_scenes
from hlsf.scenes.split import split_dataset
from hlsf.scenes.synth import (PRESETS, TARGET_ID, TEMPLATES, DatasetSpec, generate_scene,
                               generate_synthetic_dataset, template_of)

__all__ = [
    "AgentTrack", "Scene", "VectorMap", "read_scenes", "write_scenes", "scene_io",
    "scene_from_dict", "scene_to_dict", "split_dataset", "DatasetSpec", "generate_scene",
    "generate_synthetic_dataset", "template_of", "TEMPLATES", "PRESETS", "TARGET_ID",
]

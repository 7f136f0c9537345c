"""Seeded synthetic scenes: block-transform GSM textures with one planted object.

Each scene has a smooth background and an elliptical object region whose
transform coefficients have a larger scale. A coarse class model whose
importance peaks on the object accompanies every image, so filtering,
coding and fidelity trends can all be measured on small images.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import numpy as np

from .gsm import ExtractorConfig, reconstruct_image
from .semantic import ClassModel
from .tensorio import save_ppm


@dataclass(frozen=True)
class SceneConfig:
    size: int = 128
    block_size: int = 8
    background_std: float = 8.0
    object_std: float = 40.0
    dc_std: float = 6.0
    spectral_decay: float = 0.5
    map_size: int = 8
    map_channels: int = 4


@dataclass
class Scene:
    image_id: str
    image: np.ndarray
    class_model: ClassModel
    object_mask: np.ndarray


def _spectral_profile(b: int, decay: float) -> np.ndarray:
    u = np.arange(b)
    spectrum = 1.0 / (1.0 + decay * (u[:, None] + u[None, :]))
    spectrum[0, 0] = 0.0
    return spectrum / np.sqrt(np.sum(spectrum ** 2) / b ** 2)  # unit pixel variance


def _ellipse_distance(n: int, rng: np.random.Generator) -> np.ndarray:
    cx, cy = rng.uniform(0.3 * n, 0.7 * n, size=2)
    rx, ry = rng.uniform(0.15 * n, 0.3 * n, size=2)
    i, j = np.meshgrid(np.arange(n) + 0.5, np.arange(n) + 0.5, indexing="ij")
    return np.sqrt(((i - cx) / rx) ** 2 + ((j - cy) / ry) ** 2)


def make_scene(seed: int, index: int = 0, scene: SceneConfig = SceneConfig()) -> Scene:
    rng = np.random.default_rng([seed, index])
    b = scene.block_size
    n = scene.size // b
    dist = _ellipse_distance(n, rng)
    inside = dist <= 1.0

    spectrum = _spectral_profile(b, scene.spectral_decay)
    std = np.where(inside, scene.object_std, scene.background_std)
    noise = rng.standard_normal((n, n, 3, b, b))
    coef = std[:, :, None, None, None] * spectrum[None, None, None] * noise
    base_bg = rng.uniform(80, 170, size=3)
    base_obj = rng.uniform(50, 200, size=3)
    means = np.where(inside[:, :, None], base_obj, base_bg) + scene.dc_std * rng.standard_normal((n, n, 3))
    coef[:, :, :, 0, 0] = b * means
    unit = ExtractorConfig(block_size=b, gain=1.0)
    image = np.rint(reconstruct_image(coef.reshape(n, n, 3 * b * b), unit))

    # coarse backbone maps: object response, its complement, two noise maps
    m = scene.map_size
    coarse = _downsample(np.exp(-dist ** 2), m)
    maps = np.stack([coarse, 1.0 - coarse] + [rng.uniform(0, 0.2, (m, m))
                                              for _ in range(scene.map_channels - 2)], axis=2)
    maps[:, :, 0] += rng.uniform(0, 0.05, (m, m))
    weights = np.zeros((2, scene.map_channels))
    weights[0, 0], weights[0, 2:] = 1.0, 0.1
    weights[1, 1], weights[1, 2:] = 0.05, 0.1
    model = ClassModel(maps, weights, ("object", "background"))
    return Scene(f"scene{index:03d}", image, model, inside)


def _downsample(field: np.ndarray, m: int) -> np.ndarray:
    """Block-average a square field to m x m (replicating first if m does not divide it)."""
    k = m // math.gcd(field.shape[0], m)
    field = np.repeat(np.repeat(field, k, axis=0), k, axis=1)
    f = field.shape[0] // m
    return field.reshape(m, f, m, f).mean(axis=(1, 3))


def make_dataset(count: int, seed: int = 0, scene: SceneConfig = SceneConfig()) -> List[Scene]:
    return [make_scene(seed, k, scene) for k in range(count)]


def write_dataset(directory: Union[str, Path], scenes: List[Scene]) -> List[Path]:
    """Write ``<id>.ppm`` plus ``<id>.cam.gvtf`` and ``<id>.weights.txt`` per scene."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for s in scenes:
        path = directory / f"{s.image_id}.ppm"
        save_ppm(path, s.image)
        s.class_model.save(directory / f"{s.image_id}.cam.gvtf",
                           directory / f"{s.image_id}.weights.txt")
        paths.append(path)
    return paths

"""Synthetic 4-class shape dataset: sphere, cube, cylinder and cone surfaces."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from ..pointops import PointCloud, normalize_unit

CLASSES = ("sphere", "cube", "cylinder", "cone")


@dataclass
class Sample:
    cloud: PointCloud
    label: int
    center: np.ndarray
    scale: float
    shape_params: dict

    def denormalized(self) -> np.ndarray:
        return self.cloud.positions * self.scale + self.center


@dataclass
class Dataset:
    train: list
    test: list


def _sphere(rng, n, p):
    v = rng.normal(size=(n, 3))
    return p["r"] * v / np.linalg.norm(v, axis=1, keepdims=True)


def _box(rng, n, p):
    h = np.array([p["a"], p["b"], p["c"]])
    # faces come in +/- pairs; area of the pair orthogonal to axis i
    areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
    sign = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), axis] = sign * h[axis]
    return pts


def _cylinder(rng, n, p):
    r, hh = p["r"], p["h"]
    side, cap = 2 * np.pi * r * 2 * hh, np.pi * r * r
    on_side = rng.random(n) < side / (side + 2 * cap)
    theta = rng.uniform(0, 2 * np.pi, n)
    rho = np.where(on_side, r, r * np.sqrt(rng.random(n)))
    z = np.where(on_side, rng.uniform(-hh, hh, n), rng.choice([-hh, hh], size=n))
    return np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z])


def _cone(rng, n, p):
    r, height = p["r"], p["h"]
    lateral, base = np.pi * r * np.hypot(r, height), np.pi * r * r
    on_side = rng.random(n) < lateral / (lateral + base)
    theta = rng.uniform(0, 2 * np.pi, n)
    u = np.sqrt(rng.random(n))  # area grows linearly with distance from the apex
    rho = np.where(on_side, r * u, r * np.sqrt(rng.random(n)))
    z = np.where(on_side, height * (1.0 - u), 0.0)
    return np.column_stack([rho * np.cos(theta), rho * np.sin(theta), z])


_SAMPLERS = (_sphere, _box, _cylinder, _cone)


def _shape_params(rng, label):
    if label == 0:
        return {"r": float(rng.uniform(0.5, 1.5))}
    if label == 1:
        return {k: float(rng.uniform(0.4, 0.8)) for k in "abc"}
    if label == 2:
        return {"r": float(rng.uniform(0.4, 0.8)), "h": float(rng.uniform(0.4, 0.9))}
    return {"r": float(rng.uniform(0.5, 1.0)), "h": float(rng.uniform(0.8, 1.6))}


def sample_shape(rng, label: int, n_points: int, noise_sigma: float, rotate: str) -> Sample:
    params = _shape_params(rng, label)
    pts = _SAMPLERS[label](rng, n_points, params)
    if rotate == "full":
        pts = pts @ Rotation.random(random_state=rng).as_matrix().T
    elif rotate == "z":
        angle = rng.uniform(0.0, 2.0 * np.pi)
        pts = pts @ Rotation.from_euler("z", angle).as_matrix().T
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    norm, center, scale = normalize_unit(pts)
    return Sample(PointCloud(norm), label, center, scale, params)


def _split(rng, count, n_points, noise_sigma, rotate, n_classes):
    labels = np.arange(count) % n_classes
    return [sample_shape(rng, int(lab), n_points, noise_sigma, rotate) for lab in labels]


def gen_dataset(n_train: int, n_test: int, points_per_cloud: int, noise_sigma: float,
                seed: int, rotate: str = "none", n_classes: int = 4) -> Dataset:
    """Balanced labeled clouds, deterministic in ``seed``.

    Labels cycle 0..n_classes-1 so each class gets ``n/n_classes`` samples
    when the count divides evenly.
    """
    if not 1 <= n_classes <= len(CLASSES):
        raise ValueError(f"n_classes must be in 1..{len(CLASSES)}")
    rng = np.random.default_rng(seed)
    train = _split(rng, n_train, points_per_cloud, noise_sigma, rotate, n_classes)
    test = _split(rng, n_test, points_per_cloud, noise_sigma, rotate, n_classes)
    return Dataset(train, test)


def dataset_from_config(data_cfg, n_classes: int = 4) -> Dataset:
    return gen_dataset(data_cfg.n_train, data_cfg.n_test, data_cfg.points, data_cfg.noise,
                       data_cfg.seed, data_cfg.rotate, n_classes)

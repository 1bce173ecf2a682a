"""Domain types for Gaussian primitives, cameras, and scene bounds.

The per-primitive dataclass is the validated value type used at module
boundaries and in checkpoints; hot paths (rendering, training) use the
struct-of-arrays `GaussianCloud` built from the same data.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidInputError

log = logging.getLogger(__name__)

QUAT_TOL = 1e-6
ROT_TOL = 1e-6
# Axes whose point spread collapses still need a usable box: sigma = 2/extent
# must stay finite.
MIN_EXTENT = 1e-3


def _as_vec(x, n, name):
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if v.shape[0] != n:
        raise InvalidInputError(f"{name} must have {n} components, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return v


@dataclass
class GaussianPrimitive:
    """One anisotropic 3D Gaussian: mean, rotation, scale, color, opacity."""

    mu: np.ndarray
    rot: np.ndarray  # unit quaternion (w, x, y, z)
    scale: np.ndarray
    color: np.ndarray
    raw_opacity: float
    accum_grad: float = 0.0

    def __post_init__(self):
        self.mu = _as_vec(self.mu, 3, "mu")
        self.rot = _as_vec(self.rot, 4, "rot")
        self.scale = _as_vec(self.scale, 3, "scale")
        self.color = _as_vec(self.color, 3, "color")
        if abs(np.linalg.norm(self.rot) - 1.0) > QUAT_TOL:
            raise InvalidInputError(f"quaternion norm {np.linalg.norm(self.rot):.8f} != 1")
        if np.any(self.scale <= 0):
            raise InvalidInputError("scale components must be > 0")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise InvalidInputError("color must lie in [0, 1]")
        if not (0.0 <= self.raw_opacity <= 1.0) or not math.isfinite(self.raw_opacity):
            raise InvalidInputError("raw_opacity must lie in [0, 1]")
        if self.accum_grad < 0:
            raise InvalidInputError("accum_grad must be >= 0")


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float
    rotation: np.ndarray  # (3, 3), x_cam = R @ x_world + t
    translation: np.ndarray  # (3,)
    id: str = "cam"

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = _as_vec(self.translation, 3, "translation")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be > 0")
        if not (0 < self.near < self.far):
            raise InvalidInputError("require 0 < near < far")
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError("image dimensions must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > ROT_TOL:
            raise InvalidInputError(f"pose rotation not orthonormal (err {err:.2e})")

    @classmethod
    def from_world_to_cam(cls, fx, fy, cx, cy, width, height, near, far, world_to_cam, id="cam"):
        m = np.asarray(world_to_cam, dtype=np.float64).reshape(4, 4)
        return cls(fx, fy, cx, cy, int(width), int(height), near, far,
                   m[:3, :3], m[:3, 3], id=id)

    @property
    def world_to_cam(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def center(self) -> np.ndarray:
        """Camera origin in world coordinates."""
        return -self.rotation.T @ self.translation

    def downsampled(self, level: int) -> "Camera":
        """Camera for rendering at 1/2^level resolution (wavelet schedule)."""
        if level == 0:
            return self
        f = 2 ** level
        if self.width % f or self.height % f:
            raise InvalidInputError(f"image {self.width}x{self.height} not divisible by {f}")
        return Camera(self.fx / f, self.fy / f, self.cx / f, self.cy / f,
                      self.width // f, self.height // f, self.near, self.far,
                      self.rotation, self.translation, id=self.id)

    def pixel_directions(self, dtype=torch.float32) -> torch.Tensor:
        """(H, W, 3) camera-frame ray directions scaled to unit z through pixel centers."""
        u = (torch.arange(self.width, dtype=dtype) + 0.5 - self.cx) / self.fx
        v = (torch.arange(self.height, dtype=dtype) + 0.5 - self.cy) / self.fy
        vv, uu = torch.meshgrid(v, u, indexing="ij")
        return torch.stack([uu, vv, torch.ones_like(uu)], dim=-1)


@dataclass
class SceneBounds:
    """Axis-aligned box enclosing the primary primitives; extent is per-axis size B."""

    center: np.ndarray
    extent: np.ndarray

    def __post_init__(self):
        self.center = _as_vec(self.center, 3, "center")
        self.extent = _as_vec(self.extent, 3, "extent")
        if np.any(self.extent <= 0):
            raise InvalidInputError("extent components must be > 0")


@dataclass
class View:
    """One observation: ground-truth color, optional disparity prior, camera reference."""

    image: np.ndarray  # (H, W, 3) float in [0, 1]
    camera_id: str
    disparity: np.ndarray | None = None  # (H, W) float32
    disparity_mask: np.ndarray | None = None  # (H, W) bool


@dataclass
class ImageSet:
    views: list[View] = field(default_factory=list)

    def validate_against(self, cameras: dict[str, Camera]):
        for i, v in enumerate(self.views):
            if v.camera_id not in cameras:
                raise InvalidInputError(f"view {i} references unknown camera '{v.camera_id}'")
            cam = cameras[v.camera_id]
            if v.image.shape[:2] != (cam.height, cam.width):
                raise InvalidInputError(
                    f"view {i} image {v.image.shape[:2]} != camera {cam.height}x{cam.width}")
            if v.disparity is not None:
                if v.disparity.shape != (cam.height, cam.width):
                    raise InvalidInputError(f"view {i} disparity shape mismatch")
                m = v.disparity_mask if v.disparity_mask is not None else np.ones_like(v.disparity, bool)
                d = v.disparity[m]
                if d.size and (not np.all(np.isfinite(d)) or np.any(d <= 0)):
                    raise InvalidInputError(f"view {i} has invalid disparity inside its mask")


def quat_to_rotation(rot) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion (normalized internally)."""
    q = _as_vec(rot, 4, "rot")
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def covariance_from_params(rot, scale) -> np.ndarray:
    """3x3 covariance R diag(scale^2) R^T from quaternion + per-axis scales."""
    s = _as_vec(scale, 3, "scale")
    if np.any(s <= 0):
        raise InvalidInputError("scale components must be > 0")
    q = _as_vec(rot, 4, "rot")
    if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
        raise InvalidInputError("quaternion must be normalized")
    r = quat_to_rotation(q)
    m = r * s[None, :]  # columns scaled: R @ diag(s)
    cov = m @ m.T
    return 0.5 * (cov + cov.T)


def bounds_from_points(points, margin_fraction: float = 0.05,
                       percentile: tuple[float, float] = (2.0, 98.0)) -> SceneBounds:
    """Percentile bounding box of a point set, inflated by margin_fraction.

    Degenerate axes are floored at MIN_EXTENT so downstream sigma = 2/B stays
    finite.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise InvalidInputError("bounds_from_points requires at least one point")
    if margin_fraction < 0:
        raise InvalidInputError("margin_fraction must be >= 0")
    lo = np.percentile(pts, percentile[0], axis=0)
    hi = np.percentile(pts, percentile[1], axis=0)
    center = 0.5 * (lo + hi)
    extent = (hi - lo) * (1.0 + margin_fraction)
    if np.any(extent < MIN_EXTENT):
        log.warning("degenerate bounding axes floored at %g (extent was %s)", MIN_EXTENT, extent)
        extent = np.maximum(extent, MIN_EXTENT)
    return SceneBounds(center, extent)


def _logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, 1e-6, 1.0 - 1e-6)
    return np.log(p / (1.0 - p))


class GaussianCloud:
    """Struct-of-arrays primitive set on torch tensors.

    Scales are stored in log space and opacities as logits so the positivity
    and range invariants hold for any parameter value the optimizer writes.
    """

    def __init__(self, means, quaternions, log_scales, colors, opacity_logits,
                 dtype=torch.float32):
        as_t = lambda a: torch.as_tensor(a, dtype=dtype).clone()
        self.means = as_t(means)
        self.quaternions = as_t(quaternions)
        self.log_scales = as_t(log_scales)
        self.colors = as_t(colors)
        self.opacity_logits = as_t(opacity_logits).reshape(-1)
        self.accum_grad = torch.zeros(len(self), dtype=dtype)
        self.accum_count = torch.zeros(len(self), dtype=dtype)
        n = len(self)
        for name in ("means", "quaternions", "log_scales", "colors"):
            t = getattr(self, name)
            if t.shape[0] != n:
                raise InvalidInputError(f"{name} row count {t.shape[0]} != {n}")

    def __len__(self) -> int:
        return self.opacity_logits.shape[0]

    @property
    def dtype(self):
        return self.means.dtype

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def parameters(self) -> dict[str, torch.Tensor]:
        return {"means": self.means, "quaternions": self.quaternions,
                "log_scales": self.log_scales, "colors": self.colors,
                "opacity_logits": self.opacity_logits}

    def requires_grad_(self, flag: bool = True) -> "GaussianCloud":
        for t in self.parameters().values():
            t.requires_grad_(flag)
        return self

    @torch.no_grad()
    def normalize_rotations_(self):
        self.quaternions /= self.quaternions.norm(dim=1, keepdim=True).clamp_min(1e-12)

    @torch.no_grad()
    def clamp_colors_(self):
        self.colors.clamp_(0.0, 1.0)

    @classmethod
    def from_primitives(cls, prims: list[GaussianPrimitive], dtype=torch.float32) -> "GaussianCloud":
        if not prims:
            raise InvalidInputError("empty primitive list")
        return cls(
            np.stack([p.mu for p in prims]),
            np.stack([p.rot for p in prims]),
            np.log(np.stack([p.scale for p in prims])),
            np.stack([p.color for p in prims]),
            _logit(np.array([p.raw_opacity for p in prims])),
            dtype=dtype,
        )

    @classmethod
    def from_points(cls, points, colors=None, opacity: float = 0.1,
                    scale: np.ndarray | None = None, dtype=torch.float32) -> "GaussianCloud":
        """Initialize one primitive per point; scale defaults to mean 3-NN distance."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = pts.shape[0]
        if n == 0:
            raise InvalidInputError("empty point set")
        if colors is None:
            colors = np.full((n, 3), 0.5)
        if scale is None:
            from scipy.spatial import cKDTree
            if n > 3:
                d, _ = cKDTree(pts).query(pts, k=4)
                per_point = np.clip(d[:, 1:].mean(axis=1), 1e-4, None)
            else:
                per_point = np.full(n, 0.01)
            scale = np.repeat(per_point[:, None], 3, axis=1)
        else:
            scale = np.broadcast_to(np.asarray(scale, np.float64), (n, 3))
        quats = np.zeros((n, 4))
        quats[:, 0] = 1.0
        return cls(pts, quats, np.log(scale), np.asarray(colors, np.float64),
                   _logit(np.full(n, opacity)), dtype=dtype)

    def to_primitives(self) -> list[GaussianPrimitive]:
        with torch.no_grad():
            mu = self.means.double().numpy()
            q = self.quaternions.double().numpy()
            q = q / np.linalg.norm(q, axis=1, keepdims=True)
            s = np.exp(self.log_scales.double().numpy())
            c = np.clip(self.colors.double().numpy(), 0, 1)
            o = torch.sigmoid(self.opacity_logits).double().numpy()
            g = self.accum_grad.double().numpy()
        return [GaussianPrimitive(mu[i], q[i], s[i], c[i], float(o[i]), float(max(g[i], 0)))
                for i in range(len(self))]


def save_scene_checkpoint(path, cloud: GaussianCloud, bounds: SceneBounds, iteration: int,
                          opacities=None):
    """JSON-lines checkpoint: header with bounds + iteration, one primitive per line.

    `opacities` overrides the stored raw_opacity column (used after SDF
    activation so the file renders standalone).
    """
    prims = cloud.to_primitives()
    if opacities is not None:
        opacities = np.asarray(opacities, np.float64).reshape(-1)
        if opacities.shape[0] != len(prims):
            raise InvalidInputError("opacity override length mismatch")
    with open(path, "w") as f:
        header = {"format": "gsdf-scene", "version": 1, "iteration": int(iteration),
                  "count": len(prims),
                  "bounds": {"center": bounds.center.tolist(), "extent": bounds.extent.tolist()}}
        f.write(json.dumps(header) + "\n")
        for i, p in enumerate(prims):
            o = float(opacities[i]) if opacities is not None else p.raw_opacity
            f.write(json.dumps({"mu": p.mu.tolist(), "rot": p.rot.tolist(),
                                "scale": p.scale.tolist(), "color": p.color.tolist(),
                                "raw_opacity": min(max(o, 0.0), 1.0)}) + "\n")


def load_scene_checkpoint(path, dtype=torch.float32):
    """Returns (cloud, bounds, iteration)."""
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise InvalidInputError(f"cannot read scene checkpoint: {e}") from e
    if not lines:
        raise InvalidInputError("empty scene checkpoint")
    try:
        header = json.loads(lines[0])
        if header.get("format") != "gsdf-scene":
            raise InvalidInputError("not a gsdf scene checkpoint")
        bounds = SceneBounds(header["bounds"]["center"], header["bounds"]["extent"])
        prims = []
        for ln in lines[1:]:
            if not ln.strip():
                continue
            d = json.loads(ln)
            prims.append(GaussianPrimitive(d["mu"], d["rot"], d["scale"], d["color"],
                                           float(d["raw_opacity"])))
    except (KeyError, ValueError, TypeError) as e:
        raise InvalidInputError(f"malformed scene checkpoint: {e}") from e
    if len(prims) != header.get("count", len(prims)):
        raise InvalidInputError("scene checkpoint count mismatch")
    return GaussianCloud.from_primitives(prims, dtype=dtype), bounds, int(header["iteration"])

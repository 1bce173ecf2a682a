"""Dataset loading, synthetic scenes with analytic ground truth, image metrics.

The manifest is a single JSON file referencing PNG color images, raw float32
disparity grids (JSON sidecar with dims + validity sentinel), an optional PLY
point cloud for initialization, and an optional analytic descriptor giving the
exact scene SDF for evaluation. Synthetic scenes are rendered by sphere
tracing the analytic SDF with a procedural 3D texture, so every pixel has
exact depth; emitted disparity is 1/depth warped by a known affine
perturbation to exercise the alignment objective.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import imageio.v3 as iio
import numpy as np

from .errors import EmptyResultError, InvalidInputError
from .scene import Camera, ImageSet, View

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# analytic SDF shapes

def _sphere_sdf(p, center, radius):
    return np.linalg.norm(p - center, axis=-1) - radius


def _box_sdf(p, center, half):
    q = np.abs(p - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def _plane_sdf(p, point, normal):
    return (p - point) @ normal


@dataclass
class AnalyticSdf:
    """Exact min-union SDF of spheres / boxes / planes, with surface sampling."""

    shapes: list[dict]

    def __post_init__(self):
        if not self.shapes:
            raise InvalidInputError("analytic scene needs at least one shape")
        for s in self.shapes:
            if s.get("type") not in ("sphere", "box", "plane"):
                raise InvalidInputError(f"unknown shape type {s.get('type')!r}")

    def _shape_sdf(self, s, p):
        if s["type"] == "sphere":
            return _sphere_sdf(p, np.asarray(s["center"], float), float(s["radius"]))
        if s["type"] == "box":
            return _box_sdf(p, np.asarray(s["center"], float),
                            np.asarray(s["size"], float) / 2.0)
        n = np.asarray(s["normal"], float)
        return _plane_sdf(p, np.asarray(s["point"], float), n / np.linalg.norm(n))

    def query(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        vals = np.stack([self._shape_sdf(s, p) for s in self.shapes])
        return vals.min(axis=0)

    def __call__(self, points):
        return self.query(points)

    def gradient(self, points, eps: float = 1e-6) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        g = np.zeros_like(p)
        for a in range(3):
            d = np.zeros(3)
            d[a] = eps
            g[:, a] = (self.query(p + d) - self.query(p - d)) / (2 * eps)
        return g

    def bounding_radius(self, origin=np.zeros(3)) -> float:
        r = 0.0
        for s in self.shapes:
            if s["type"] == "sphere":
                r = max(r, np.linalg.norm(np.asarray(s["center"]) - origin) + s["radius"])
            elif s["type"] == "box":
                c = np.asarray(s["center"], float)
                r = max(r, np.linalg.norm(c - origin)
                        + np.linalg.norm(np.asarray(s["size"], float)) / 2)
            else:
                r = max(r, 1.0)
        return float(r)

    def _shape_samples(self, s, count, rng):
        if s["type"] == "sphere":
            d = rng.normal(size=(count, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            return np.asarray(s["center"], float) + d * float(s["radius"])
        if s["type"] == "box":
            half = np.asarray(s["size"], float) / 2.0
            areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
            areas = np.repeat(areas, 2)
            face = rng.choice(6, size=count, p=areas / areas.sum())
            u = rng.uniform(-1, 1, size=(count, 3)) * half
            axis = face // 2
            sign = np.where(face % 2 == 0, 1.0, -1.0)
            u[np.arange(count), axis] = sign * half[axis]
            return np.asarray(s["center"], float) + u
        n = np.asarray(s["normal"], float)
        n = n / np.linalg.norm(n)
        a = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0, 1.0, 0])
        t1 = np.cross(n, a)
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(n, t1)
        uv = rng.uniform(-2, 2, size=(count, 2))
        return np.asarray(s["point"], float) + uv[:, :1] * t1 + uv[:, 1:] * t2

    def surface_samples(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Points on the union boundary (per-shape samples inside other shapes dropped)."""
        out = []
        need = count
        for _ in range(20):
            per = max(need // len(self.shapes) + 1, 1)
            batch = np.concatenate([self._shape_samples(s, per, rng) for s in self.shapes])
            keep = np.abs(self.query(batch)) < 1e-9
            batch = batch[keep]
            if len(batch):
                out.append(batch)
                need -= len(batch)
            if need <= 0:
                break
        if not out:
            raise EmptyResultError("no union-boundary samples found")
        return np.concatenate(out)[:count]


# ---------------------------------------------------------------------------
# synthetic scene generation

@dataclass
class SyntheticSpec:
    shapes: list = field(default_factory=lambda: [
        {"type": "sphere", "center": [0.0, 0.0, 0.0], "radius": 0.5}])
    n_views: int = 16
    image_size: int = 64
    ring_radius: float = 2.0
    ring_height: float = 0.35  # elevation amplitude as a fraction of ring_radius
    fov_deg: float = 50.0
    near: float = 0.1
    far: float = 10.0
    disparity_warp: tuple = (1.0, 0.0)  # emitted Z = s0 / depth + t0
    background: tuple = (0.0, 0.0, 0.0)
    # None scales the texture with the scene so angular detail is size-invariant
    texture_freq: float | None = None
    light_dir: tuple = (0.4, 0.3, 0.85)
    n_points: int = 2000


def _look_at(position, target, up=(0.0, 0.0, 1.0)):
    f = np.asarray(target, float) - np.asarray(position, float)
    f = f / np.linalg.norm(f)
    upv = np.asarray(up, float)
    if abs(f @ upv) > 0.999:
        upv = np.array([0.0, 1.0, 0.0])
    r = np.cross(f, upv)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    rot = np.stack([r, d, f])  # rows: right, down, forward
    return rot, -rot @ np.asarray(position, float)


def _texture(points, normals, freq, light_dir):
    """View-consistent procedural albedo with Lambert shading."""
    p = points * freq
    phases = np.array([0.0, 2.1, 4.2])
    albedo = 0.5 + 0.33 * np.sin(p + phases[None, :]) \
        + 0.12 * np.sin(2.7 * p[:, [1, 2, 0]] + 1.3)
    light = np.asarray(light_dir, float)
    light = light / np.linalg.norm(light)
    lambert = 0.45 + 0.55 * np.clip(normals @ light, 0.0, 1.0)
    return np.clip(albedo * lambert[:, None], 0.0, 1.0)


def _sphere_trace(analytic: AnalyticSdf, origins, dirs, far, eps=1e-7, max_steps=256):
    """Returns (hit mask, hit points, ray distance)."""
    t = np.zeros(dirs.shape[0])
    alive = np.ones(dirs.shape[0], dtype=bool)
    hit = np.zeros(dirs.shape[0], dtype=bool)
    p = origins + t[:, None] * dirs
    for _ in range(max_steps):
        if not alive.any():
            break
        s = analytic.query(p[alive])
        converged = s < eps
        idx = np.nonzero(alive)[0]
        hit[idx[converged]] = True
        alive[idx[converged]] = False
        adv = idx[~converged]
        t[adv] += s[~converged]
        escaped = t[adv] > far
        alive[adv[escaped]] = False
        p[adv] = origins[adv] + t[adv, None] * dirs[adv]
    return hit, p, t


def make_synthetic(spec: SyntheticSpec, out_dir, seed: int = 0):
    """Render a synthetic dataset to disk; returns (manifest path, AnalyticSdf).

    Ground truth comes from sphere-tracing the exact union SDF; pseudo
    disparity is 1/depth warped by the known affine perturbation.
    """
    analytic = AnalyticSdf(spec.shapes)
    scene_radius = analytic.bounding_radius()
    if spec.ring_radius <= scene_radius:
        raise InvalidInputError(
            f"camera ring radius {spec.ring_radius} must exceed scene radius {scene_radius:.3f}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    w = h = int(spec.image_size)
    focal = (w / 2.0) / np.tan(np.radians(spec.fov_deg) / 2.0)
    s0, t0 = spec.disparity_warp
    texture_freq = (spec.texture_freq if spec.texture_freq is not None
                    else 3.5 / scene_radius)

    cameras = []
    views = []
    depth_files = []
    for i in range(spec.n_views):
        ang = 2 * np.pi * i / spec.n_views
        elev = spec.ring_height * spec.ring_radius * (1.0 if i % 2 == 0 else -1.0)
        pos = np.array([spec.ring_radius * np.cos(ang),
                        spec.ring_radius * np.sin(ang), elev])
        rot, tvec = _look_at(pos, np.zeros(3))
        cam = Camera(focal, focal, w / 2.0, h / 2.0, w, h, spec.near, spec.far,
                     rot, tvec, id=f"cam{i:02d}")
        cameras.append(cam)

        uu, vv = np.meshgrid((np.arange(w) + 0.5 - cam.cx) / cam.fx,
                             (np.arange(h) + 0.5 - cam.cy) / cam.fy)
        dirs_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
        dirs_world = dirs_cam @ rot  # R^T rows applied to each dir
        norms = np.linalg.norm(dirs_world, axis=1, keepdims=True)
        unit = dirs_world / norms
        origins = np.broadcast_to(pos, unit.shape).copy()
        hit, points, _ = _sphere_trace(analytic, origins, unit, spec.far)

        depth = np.zeros(w * h, dtype=np.float64)
        depth[hit] = (points[hit] - pos) @ rot[2]  # camera-space z
        img = np.tile(np.asarray(spec.background, float), (w * h, 1))
        if hit.any():
            normals = analytic.gradient(points[hit])
            normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
            img[hit] = _texture(points[hit], normals, texture_freq, spec.light_dir)
        img = img.reshape(h, w, 3)
        depth = depth.reshape(h, w)
        mask = hit.reshape(h, w)

        img_path = out / f"view{i:02d}.png"
        iio.imwrite(img_path, (np.clip(img, 0, 1) * 255).round().astype(np.uint8))

        disparity = np.zeros((h, w), dtype=np.float32)
        disparity[mask] = (s0 / depth[mask] + t0).astype(np.float32)
        disp_path = out / f"disp{i:02d}.f32"
        disparity.tofile(disp_path)
        (out / f"disp{i:02d}.f32.json").write_text(json.dumps(
            {"width": w, "height": h, "invalid": 0.0}))

        depth_path = out / f"depth{i:02d}.f32"
        depth.astype(np.float32).tofile(depth_path)
        (out / f"depth{i:02d}.f32.json").write_text(json.dumps(
            {"width": w, "height": h, "invalid": 0.0}))
        depth_files.append(depth_path.name)

        views.append({"camera": cam.id, "image": img_path.name,
                      "disparity": disp_path.name})

    pts = analytic.surface_samples(spec.n_points, rng)
    normals = analytic.gradient(pts)
    normals /= np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
    colors = _texture(pts, normals, texture_freq, spec.light_dir)
    points_path = out / "points.ply"
    _write_points_ply(points_path, pts, colors)

    manifest = {
        "cameras": [{"id": c.id, "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                     "width": c.width, "height": c.height, "near": c.near, "far": c.far,
                     "world_to_cam": c.world_to_cam.reshape(-1).tolist()}
                    for c in cameras],
        "views": views,
        "points": points_path.name,
        "analytic": {"shapes": spec.shapes,
                     "disparity_warp": [s0, t0],
                     "background": list(spec.background),
                     "texture_freq": texture_freq,
                     "light_dir": list(spec.light_dir),
                     "depth_files": depth_files},
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path, analytic


def _write_points_ply(path, points, colors):
    dt = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                   ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    arr = np.empty(len(points), dtype=dt)
    arr["x"], arr["y"], arr["z"] = points.T.astype(np.float32)
    c = (np.clip(colors, 0, 1) * 255).round().astype(np.uint8)
    arr["red"], arr["green"], arr["blue"] = c.T
    with open(path, "wb") as f:
        f.write(b"ply\nformat binary_little_endian 1.0\n")
        f.write(f"element vertex {len(points)}\n".encode())
        f.write(b"property float x\nproperty float y\nproperty float z\n")
        f.write(b"property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write(b"end_header\n")
        f.write(arr.tobytes())


# ---------------------------------------------------------------------------
# loading

def _load_disparity(path: Path):
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        raise InvalidInputError(f"disparity sidecar missing: {sidecar}")
    try:
        meta = json.loads(sidecar.read_text())
        w, h = int(meta["width"]), int(meta["height"])
        invalid = float(meta.get("invalid", 0.0))
        data = np.fromfile(path, dtype="<f4")
    except (OSError, ValueError, KeyError) as e:
        raise InvalidInputError(f"cannot read disparity {path}: {e}") from e
    if data.size != w * h:
        raise InvalidInputError(f"disparity {path} has {data.size} values, expected {w * h}")
    grid = data.reshape(h, w)
    mask = np.isfinite(grid) & (grid != invalid) & (grid > 0)
    return grid, mask


def load_dataset(path):
    """Load a manifest directory/file -> (ImageSet, cameras, points, colors, manifest).

    Views without disparity are valid; geometry-cue losses are then disabled.
    """
    p = Path(path)
    manifest_path = p / "manifest.json" if p.is_dir() else p
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text())
    except OSError as e:
        raise InvalidInputError(f"cannot read manifest: {e}") from e
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"malformed manifest JSON: {e}") from e

    cameras: dict[str, Camera] = {}
    for i, c in enumerate(manifest.get("cameras", [])):
        try:
            cam = Camera.from_world_to_cam(
                c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"],
                c["near"], c["far"], c["world_to_cam"], id=str(c["id"]))
        except KeyError as e:
            raise InvalidInputError(f"camera entry {i} missing field {e}") from e
        cameras[cam.id] = cam

    views = []
    have_disparity = False
    for i, v in enumerate(manifest.get("views", [])):
        cam_id = str(v.get("camera", ""))
        if cam_id not in cameras:
            raise InvalidInputError(f"view {i} references unknown camera '{cam_id}'")
        img_path = root / v["image"]
        try:
            raw = iio.imread(img_path)
        except (OSError, ValueError) as e:
            raise InvalidInputError(f"view {i}: cannot read image {img_path}: {e}") from e
        img = np.asarray(raw, dtype=np.float64)
        if img.dtype != np.float64:
            img = img.astype(np.float64)
        if raw.dtype == np.uint8:
            img = img / 255.0
        elif raw.dtype == np.uint16:
            img = img / 65535.0
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        img = img[..., :3]
        disparity = disparity_mask = None
        if v.get("disparity"):
            disparity, disparity_mask = _load_disparity(root / v["disparity"])
            have_disparity = True
        views.append(View(image=img, camera_id=cam_id, disparity=disparity,
                          disparity_mask=disparity_mask))
    image_set = ImageSet(views=views)
    image_set.validate_against(cameras)
    if not have_disparity:
        log.info("dataset has no disparity priors: geometry-cue losses disabled")

    points = colors = None
    if manifest.get("points"):
        from .mesher import read_ply_points
        points, colors = read_ply_points(root / manifest["points"])
    return image_set, cameras, points, colors, manifest


def analytic_from_manifest(manifest: dict) -> AnalyticSdf | None:
    a = manifest.get("analytic")
    if not a:
        return None
    return AnalyticSdf(a["shapes"])


# ---------------------------------------------------------------------------
# metrics

PSNR_CAP = 99.0


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images cap at 99 dB."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidInputError(f"psnr shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))

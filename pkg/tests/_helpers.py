"""Shared test utilities: random scene generators and finite-difference oracles.

The FD oracles here are the independent gradient references required by the
acceptance suite; they only ever call forward passes.
"""

import numpy as np
import torch

from gsdf.scene import Camera


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def look_at_camera(position, target=(0, 0, 0), width=16, height=16, fov_deg=60.0,
                   near=0.05, far=50.0, up=(0.0, 0.0, 1.0), cam_id="cam") -> Camera:
    position = np.asarray(position, float)
    f = np.asarray(target, float) - position
    f = f / np.linalg.norm(f)
    upv = np.asarray(up, float)
    if abs(f @ upv) > 0.999:
        upv = np.array([0.0, 1.0, 0.0])
    r = np.cross(f, upv)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    rot = np.stack([r, d, f])
    focal = (width / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
    return Camera(focal, focal, width / 2.0, height / 2.0, width, height,
                  near, far, rot, -rot @ position, id=cam_id)


def central_difference(fn, tensor: torch.Tensor, step: float) -> torch.Tensor:
    """Central finite differences of scalar fn w.r.t. every element of tensor.

    Perturbs a float64 clone elementwise; fn must not retain state between
    calls. This is the independent oracle: no autograd involved.
    """
    base = tensor.detach().clone()
    grad = torch.zeros_like(base, dtype=torch.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + step
        f_plus = float(fn(base))
        flat[i] = old - step
        f_minus = float(fn(base))
        flat[i] = old
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """max |a - n| / max(|a|, |n|, floor); floor scales with the gradient batch
    so elements far below the dominant magnitude are held to an absolute bar
    (central differences cannot resolve them relatively)."""
    a = analytic.detach().double()
    n = numeric.double()
    if not a.numel():
        return 0.0
    scale = float(torch.maximum(a.abs().max(), n.abs().max()))
    floor = max(1e-8, 1e-5 * scale)
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
    return float(((a - n).abs() / denom).max())


def random_scene_tensors(rng: np.random.Generator, n: int, *,
                         depth_range=(1.2, 3.0), spread=0.6, min_depth_gap=2e-3,
                         opacity_range=(0.2, 0.9), scale_range=(0.05, 0.25),
                         dtype=torch.float64, requires_grad=False):
    """Random primitives in front of a +z-looking camera at the origin.

    Construction avoids the discontinuities finite differences cannot cross:
    depths are separated by min_depth_gap, scale axes are distinct, and the
    shortest-axis/facing sign margins are regenerated when too small.
    """
    means = np.zeros((n, 3))
    means[:, 0] = rng.uniform(-spread, spread, n)
    means[:, 1] = rng.uniform(-spread, spread, n)
    z = rng.uniform(*depth_range, n)
    for _ in range(100):
        z = np.sort(z)
        gaps = np.diff(z)
        if not len(gaps) or gaps.min() > min_depth_gap:
            break
        z = rng.uniform(*depth_range, n)
    means[:, 2] = rng.permutation(z)

    quats = random_quaternions(rng, n)
    scales = np.zeros((n, 3))
    for i in range(n):
        while True:
            s = np.sort(rng.uniform(*scale_range, 3))
            if np.diff(s).min() > 0.01:
                break
        scales[i] = rng.permutation(s)
    colors = rng.uniform(0.05, 0.95, (n, 3))
    opac = rng.uniform(*opacity_range, n)

    t = lambda a: torch.tensor(a, dtype=dtype, requires_grad=requires_grad)
    return t(means), t(quats), t(scales), t(colors), t(opac)


def origin_camera(width=16, height=16, focal=None, near=0.05, far=50.0) -> Camera:
    """Camera at the world origin looking along +z (identity pose)."""
    focal = focal if focal is not None else width * 1.2
    return Camera(focal, focal, width / 2.0, height / 2.0, width, height,
                  near, far, np.eye(3), np.zeros(3))

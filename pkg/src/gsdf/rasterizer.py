"""Differentiable software rasterizer for anisotropic Gaussian primitives.

Projection follows the EWA recipe: camera-frame covariance pushed through the
projection Jacobian at the mean, plus an isotropic screen-space dilation.
Blending is front-to-back alpha compositing evaluated at pixel centers, with
per-pixel intersection records kept for the distortion regularizer.

The forward pass is built from torch ops end to end, so reverse-mode autodiff
provides exact partial derivatives of every blended output with respect to
every primitive parameter; `render_backward` exposes them behind a buffer-level
interface. Candidate (pixel, splat) pairs are computed index-only (no
gradients) and the blend runs on a padded (pixels x max-candidates) layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ._torchops import gather_rows
from .errors import InvalidInputError
from .scene import Camera, GaussianCloud, GaussianPrimitive

DILATION = 0.3  # pixel^2, anti-aliasing floor on cov2d
DEFAULT_TRANSMITTANCE_FLOOR = 1e-4


@dataclass
class RenderSettings:
    # None disables the screen-space footprint cutoff (every splat reaches
    # every pixel); gradient checks need the smooth variant.
    footprint_sigma: float | None = 3.0
    transmittance_floor: float = DEFAULT_TRANSMITTANCE_FLOOR
    max_splats_per_pixel: int | None = 256
    dilation: float = DILATION
    # False leaves the normal buffer zeroed (skips its blend); the trainer
    # disables it until a normal-consuming loss activates.
    need_normal: bool = True


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    normal: np.ndarray
    opacity: float
    color: np.ndarray
    source_index: int


@dataclass
class RenderedMaps:
    """Blended buffers plus per-pixel intersection records (CSR layout)."""

    color: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W)
    normal: torch.Tensor  # (H, W, 3)
    alpha: torch.Tensor  # (H, W)
    transmittance: torch.Tensor  # (H, W) residual after the last blended splat
    isect_offsets: np.ndarray  # (H*W + 1,) int64, row-major pixels
    isect_weights: torch.Tensor  # (S,)
    isect_depths: torch.Tensor  # (S,)
    isect_source: np.ndarray  # (S,) int64 primitive ids
    width: int = 0
    height: int = 0
    stats: dict = field(default_factory=dict)
    _outputs: dict = field(default_factory=dict, repr=False)
    _inputs: dict = field(default_factory=dict, repr=False)
    # (screen-space means of kept splats with retained grad, their source ids);
    # the trainer reads densification statistics from here after backward.
    _screen: tuple = (None, None)

    def pixel_intersections(self, row: int, col: int):
        """(weights, depths, sources) for one pixel, depth-ascending."""
        p = row * self.width + col
        a, b = self.isect_offsets[p], self.isect_offsets[p + 1]
        return self.isect_weights[a:b], self.isect_depths[a:b], self.isect_source[a:b]


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """(N, 4) wxyz quaternions -> (N, 3, 3) rotation matrices (normalized inside)."""
    q = q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    w, x, y, z = q.unbind(-1)
    return torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1).reshape(q.shape[:-1] + (3, 3))


def _camera_tensors(camera: Camera, dtype):
    R = torch.as_tensor(camera.rotation, dtype=dtype)
    t = torch.as_tensor(camera.translation, dtype=dtype)
    return R, t


def splat_normals(quaternions, scales, mu_cam, cam_rot) -> torch.Tensor:
    """Camera-frame unit normals: shortest-scale axis, flipped toward the camera.

    Ties on the shortest axis resolve to the smallest index (torch argmin).
    """
    rot = quat_to_rotmat(quaternions)
    axis = torch.argmin(scales.detach(), dim=1)
    n_world = torch.take_along_dim(rot, axis[:, None, None].expand(-1, 3, 1), dim=2).squeeze(2)
    n_cam = n_world @ cam_rot.T
    facing = (n_cam * mu_cam).sum(dim=1)
    flip = torch.where(facing > 0, -torch.ones_like(facing), torch.ones_like(facing))
    return n_cam * flip[:, None]


def _project_batch(means, quaternions, scales, camera: Camera, settings: RenderSettings):
    """EWA projection of all primitives; returns per-splat tensors + keep mask.

    keep excludes splats behind near / beyond far, with a degenerate cov2d, or
    (when footprint_sigma is set) whose 3-sigma footprint misses the image.
    """
    dtype = means.dtype
    R, t = _camera_tensors(camera, dtype)
    mu_cam = means @ R.T + t
    x, y, z = mu_cam.unbind(-1)
    in_depth = (z > camera.near) & (z <= camera.far)

    zs = torch.where(in_depth, z, torch.ones_like(z))  # guard divisions for culled rows
    u = camera.fx * x / zs + camera.cx
    v = camera.fy * y / zs + camera.cy
    mean2d = torch.stack([u, v], dim=-1)

    rot = quat_to_rotmat(quaternions)
    m = (R @ rot) * scales[:, None, :]  # world->cam rotation of the scaled axes
    cov_cam = m @ m.transpose(1, 2)

    n = means.shape[0]
    J = torch.zeros(n, 2, 3, dtype=dtype)
    J[:, 0, 0] = camera.fx / zs
    J[:, 0, 2] = -camera.fx * x / zs ** 2
    J[:, 1, 1] = camera.fy / zs
    J[:, 1, 2] = -camera.fy * y / zs ** 2
    cov2d = J @ cov_cam @ J.transpose(1, 2)
    a = cov2d[:, 0, 0] + settings.dilation
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + settings.dilation

    det = a * c - b * b
    invertible = det > 1e-12
    det_safe = torch.where(invertible, det, torch.ones_like(det))
    conic = torch.stack([c / det_safe, -b / det_safe, a / det_safe], dim=-1)

    mid = 0.5 * (a + c)
    lam_max = mid + torch.sqrt(torch.clamp((0.5 * (a - c)) ** 2 + b * b, min=0.0))
    radius = 3.0 * torch.sqrt(torch.clamp(lam_max, min=0.0))

    keep = in_depth & invertible
    if settings.footprint_sigma is not None:
        r = radius * (settings.footprint_sigma / 3.0)
        on_image = ((u + r > 0) & (u - r < camera.width)
                    & (v + r > 0) & (v - r < camera.height))
        keep = keep & on_image

    normal = splat_normals(quaternions, scales, mu_cam, R)
    return {
        "mean2d": mean2d, "conic": conic, "cov2d_aug": (a, b, c), "depth": z,
        "normal": normal, "radius": radius, "keep": keep,
        "culled_depth": int((~in_depth).sum()),
        "culled_degenerate": int((in_depth & ~invertible).sum()),
    }


def project_primitive(g: GaussianPrimitive, opacity: float, camera: Camera,
                      settings: RenderSettings | None = None) -> Splat2D | None:
    """Project one primitive; None when culled."""
    if not (0.0 <= opacity <= 1.0):
        raise InvalidInputError("opacity must lie in [0, 1]")
    settings = settings or RenderSettings()
    means = torch.as_tensor(g.mu, dtype=torch.float64)[None]
    quats = torch.as_tensor(g.rot, dtype=torch.float64)[None]
    scales = torch.as_tensor(g.scale, dtype=torch.float64)[None]
    p = _project_batch(means, quats, scales, camera, settings)
    if not bool(p["keep"][0]):
        return None
    a, b, c = (float(v[0]) for v in p["cov2d_aug"])
    return Splat2D(
        mean2d=p["mean2d"][0].numpy(),
        cov2d=np.array([[a, b], [b, c]]),
        depth=float(p["depth"][0]),
        normal=p["normal"][0].numpy(),
        opacity=float(opacity),
        color=g.color.copy(),
        source_index=0,
    )


def normal_from_splat(g: GaussianPrimitive, camera: Camera) -> np.ndarray:
    """Camera-frame unit normal of a primitive (shortest axis, camera-facing)."""
    R, t = _camera_tensors(camera, torch.float64)
    mu_cam = torch.as_tensor(g.mu, dtype=torch.float64)[None] @ R.T + t
    n = splat_normals(torch.as_tensor(g.rot, dtype=torch.float64)[None],
                      torch.as_tensor(g.scale, dtype=torch.float64)[None], mu_cam, R)
    return n[0].numpy()


def _candidate_pairs(mean2d_np, radius_np, depth_np, source_np, camera, settings):
    """Sorted (pixel, splat) candidate pairs; index-only work, all numpy.

    Ordering is (pixel, depth, source_index): depth ascending with the original
    primitive id as tie-break, which makes buffers invariant to input order.
    """
    W, H = camera.width, camera.height
    nk = mean2d_np.shape[0]
    if settings.footprint_sigma is None:
        pair_splat = np.repeat(np.arange(nk, dtype=np.int64), W * H)
        pair_pixel = np.tile(np.arange(W * H, dtype=np.int64), nk)
    else:
        r = radius_np * (settings.footprint_sigma / 3.0)
        x0 = np.clip(np.floor(mean2d_np[:, 0] - r), 0, W).astype(np.int64)
        x1 = np.clip(np.ceil(mean2d_np[:, 0] + r), 0, W).astype(np.int64)
        y0 = np.clip(np.floor(mean2d_np[:, 1] - r), 0, H).astype(np.int64)
        y1 = np.clip(np.ceil(mean2d_np[:, 1] + r), 0, H).astype(np.int64)
        nx = np.maximum(x1 - x0, 0)
        ny = np.maximum(y1 - y0, 0)
        cnt = nx * ny
        total = int(cnt.sum())
        if total == 0:
            return (np.empty(0, np.int64), np.empty(0, np.int64),
                    np.zeros(W * H, np.int64))
        pair_splat = np.repeat(np.arange(nk, dtype=np.int64), cnt)
        start = np.concatenate([[0], np.cumsum(cnt)[:-1]])
        local = np.arange(total, dtype=np.int64) - np.repeat(start, cnt)
        nx_rep = np.repeat(nx, cnt)
        px = np.repeat(x0, cnt) + local % nx_rep
        py = np.repeat(y0, cnt) + local // nx_rep
        pair_pixel = py * W + px

    order = np.lexsort((source_np[pair_splat], depth_np[pair_splat], pair_pixel))
    pair_pixel = pair_pixel[order]
    pair_splat = pair_splat[order]
    counts = np.bincount(pair_pixel, minlength=W * H)

    cap = settings.max_splats_per_pixel
    if cap is not None and counts.max(initial=0) > cap:
        start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        rank = np.arange(pair_pixel.shape[0], dtype=np.int64) - start[pair_pixel]
        m = rank < cap
        pair_pixel, pair_splat = pair_pixel[m], pair_splat[m]
        counts = np.bincount(pair_pixel, minlength=W * H)
    return pair_splat, pair_pixel, counts


def padded_indices(counts: np.ndarray):
    """(P, K) gather indices + validity mask for a CSR layout with `counts` rows."""
    offsets = np.concatenate([[0], np.cumsum(counts)])
    k = int(counts.max(initial=0))
    ar = np.arange(k, dtype=np.int64)[None, :]
    idx = offsets[:-1, None] + ar
    valid = ar < counts[:, None]
    idx = np.minimum(idx, max(offsets[-1] - 1, 0))
    return idx, valid, offsets


def render(scene, camera: Camera, background=(0.0, 0.0, 0.0), opacities=None,
           settings: RenderSettings | None = None) -> RenderedMaps:
    """Render a Gaussian scene into color/depth/normal/alpha buffers.

    `scene` is either a GaussianCloud (with `opacities` supplied separately,
    defaulting to the cloud's own) or a list of (GaussianPrimitive, opacity)
    pairs. Opacity is decoupled from the primitives so the SDF coupling can
    inject it.
    """
    if isinstance(scene, GaussianCloud):
        cloud = scene
        ops = cloud.opacities if opacities is None else torch.as_tensor(opacities, dtype=cloud.dtype)
        return render_tensors(cloud.means, cloud.quaternions, cloud.scales, cloud.colors,
                              ops, camera, background, settings)
    pairs = list(scene)
    if not pairs:
        return render_tensors(torch.zeros(0, 3), torch.zeros(0, 4), torch.ones(0, 3),
                              torch.zeros(0, 3), torch.zeros(0), camera, background, settings)
    means = torch.tensor(np.stack([p.mu for p, _ in pairs]), dtype=torch.float64)
    quats = torch.tensor(np.stack([p.rot for p, _ in pairs]), dtype=torch.float64)
    scales = torch.tensor(np.stack([p.scale for p, _ in pairs]), dtype=torch.float64)
    colors = torch.tensor(np.stack([p.color for p, _ in pairs]), dtype=torch.float64)
    ops = torch.tensor([o for _, o in pairs], dtype=torch.float64)
    for t in (means, quats, scales, colors, ops):
        t.requires_grad_(True)
    return render_tensors(means, quats, scales, colors, ops, camera, background, settings)


def render_tensors(means, quaternions, scales, colors, opacities, camera: Camera,
                   background=(0.0, 0.0, 0.0), settings: RenderSettings | None = None
                   ) -> RenderedMaps:
    settings = settings or RenderSettings()
    dtype = means.dtype
    W, H = camera.width, camera.height
    P = W * H
    bg = torch.as_tensor(background, dtype=dtype)
    if bg.numel() != 3:
        raise InvalidInputError("background must be RGB")
    inputs = {"means": means, "quaternions": quaternions, "scales": scales,
              "colors": colors, "opacities": opacities}

    def _empty(stats):
        color = bg.expand(H, W, 3).clone()
        zero = torch.zeros(H, W, dtype=dtype)
        maps = RenderedMaps(color, zero.clone(), torch.zeros(H, W, 3, dtype=dtype),
                            zero.clone(), torch.ones(H, W, dtype=dtype),
                            np.zeros(P + 1, np.int64), torch.zeros(0, dtype=dtype),
                            torch.zeros(0, dtype=dtype), np.zeros(0, np.int64),
                            width=W, height=H, stats=stats, _inputs=inputs)
        maps._outputs = {"color": maps.color, "depth": maps.depth,
                         "normal": maps.normal, "alpha": maps.alpha}
        maps._screen = (torch.zeros(0, 2, dtype=dtype), np.zeros(0, np.int64))
        return maps

    if means.shape[0] == 0:
        return _empty({"culled_depth": 0, "culled_degenerate": 0, "kept": 0})

    proj = _project_batch(means, quaternions, scales, camera, settings)
    keep = proj["keep"]
    kept_idx = torch.nonzero(keep, as_tuple=False).squeeze(1)
    stats = {"culled_depth": proj["culled_depth"],
             "culled_degenerate": proj["culled_degenerate"],
             "kept": int(kept_idx.numel())}
    if kept_idx.numel() == 0:
        return _empty(stats)

    mean2d = proj["mean2d"][kept_idx]
    if torch.is_grad_enabled() and mean2d.requires_grad:
        mean2d.retain_grad()
    conic = proj["conic"][kept_idx]
    depth = proj["depth"][kept_idx]
    normal = proj["normal"][kept_idx]
    color = colors[kept_idx]
    opac = opacities[kept_idx]
    source = kept_idx.numpy().astype(np.int64)

    pair_splat, pair_pixel, counts = _candidate_pairs(
        mean2d.detach().numpy(), proj["radius"][kept_idx].detach().numpy(),
        depth.detach().numpy(), source, camera, settings)
    if pair_splat.shape[0] == 0:
        return _empty(stats)

    cols = torch.arange(W, dtype=dtype) + 0.5
    rows = torch.arange(H, dtype=dtype) + 0.5
    vv, uu = torch.meshgrid(rows, cols, indexing="ij")
    pix_uv = torch.stack([uu.reshape(-1), vv.reshape(-1)], dim=-1)

    sp = torch.from_numpy(pair_splat)
    px = torch.from_numpy(pair_pixel)
    d = pix_uv[px] - gather_rows(mean2d, sp)
    cn = gather_rows(conic, sp)
    power = -0.5 * (cn[:, 0] * d[:, 0] ** 2 + 2 * cn[:, 1] * d[:, 0] * d[:, 1]
                    + cn[:, 2] * d[:, 1] ** 2)
    o_pair = gather_rows(opac, sp) * torch.exp(power)

    idx, valid, offsets = padded_indices(counts)
    idx_t = torch.from_numpy(idx)
    valid_t = torch.from_numpy(valid)
    o_pad = torch.where(valid_t, o_pair[idx_t], torch.zeros((), dtype=dtype))

    # One cumprod; the early exit zeroes weights past the cut and reads the
    # residual at the cut index, keeping the telescoping identity
    # (residual + sum of weights = 1) intact through the exit.
    t_full = torch.cumprod(1.0 - o_pad, dim=1)
    t_prev = torch.cat([torch.ones(P, 1, dtype=dtype), t_full[:, :-1]], dim=1)
    if settings.transmittance_floor > 0:
        live = t_prev.detach() >= settings.transmittance_floor
        w_pad = t_prev * o_pad * live
        last_live = live.sum(dim=1)  # live is a prefix (t_prev nonincreasing)
        padded = torch.cat([torch.ones(P, 1, dtype=dtype), t_full], dim=1)
        residual = padded.gather(1, last_live[:, None]).squeeze(1)
    else:
        w_pad = t_prev * o_pad
        residual = t_full[:, -1]

    col_pad = gather_rows(color, sp)[idx_t] * valid_t[..., None]
    dep_pad = gather_rows(depth, sp)[idx_t]

    out_color = (w_pad[..., None] * col_pad).sum(dim=1) + residual[:, None] * bg[None, :]
    out_depth = (w_pad * torch.where(valid_t, dep_pad, torch.zeros((), dtype=dtype))).sum(dim=1)
    if settings.need_normal:
        nrm_pad = gather_rows(normal, sp)[idx_t]
        out_normal = (w_pad[..., None] * torch.where(valid_t[..., None], nrm_pad,
                                                     torch.zeros((), dtype=dtype))).sum(dim=1)
    else:
        out_normal = torch.zeros(P, 3, dtype=dtype)
    out_alpha = w_pad.sum(dim=1)

    w_csr = w_pad[valid_t]
    z_csr = dep_pad[valid_t]

    maps = RenderedMaps(
        color=out_color.reshape(H, W, 3),
        depth=out_depth.reshape(H, W),
        normal=out_normal.reshape(H, W, 3),
        alpha=out_alpha.reshape(H, W),
        transmittance=residual.reshape(H, W),
        isect_offsets=offsets,
        isect_weights=w_csr,
        isect_depths=z_csr,
        isect_source=source[pair_splat],
        width=W, height=H, stats=stats, _inputs=inputs)
    maps._outputs = {"color": maps.color, "depth": maps.depth,
                     "normal": maps.normal, "alpha": maps.alpha}
    maps._screen = (mean2d, source)
    return maps


def render_backward(maps: RenderedMaps, upstream: dict) -> dict:
    """Gradients of the blended buffers w.r.t. every primitive parameter.

    `upstream` maps buffer names ('color', 'depth', 'normal', 'alpha') to
    cotangent arrays of matching shape. Returns gradients keyed like the
    render inputs (means, quaternions, scales, colors, opacities).
    """
    if not maps._outputs or not maps._inputs:
        raise InvalidInputError("maps lack retained intersection records / graph")
    outputs, grads = [], []
    for name, g in upstream.items():
        if name not in maps._outputs:
            raise InvalidInputError(f"unknown output buffer '{name}'")
        out = maps._outputs[name]
        g = torch.as_tensor(g, dtype=out.dtype)
        if g.shape != out.shape:
            raise InvalidInputError(f"upstream gradient for '{name}' has shape "
                                    f"{tuple(g.shape)}, expected {tuple(out.shape)}")
        outputs.append(out)
        grads.append(g)
    if not outputs:
        raise InvalidInputError("no upstream gradients supplied")
    inputs = maps._inputs
    if not any(t.requires_grad for t in inputs.values()):
        raise InvalidInputError("render inputs were not differentiable")
    if not any(o.grad_fn is not None for o in outputs):
        # Every primitive was culled: gradients are identically zero.
        return {k: torch.zeros_like(v) for k, v in inputs.items()}
    names = list(inputs)
    tensors = [inputs[k] for k in names]
    out = torch.autograd.grad(outputs, tensors, grad_outputs=grads,
                              retain_graph=True, allow_unused=True)
    return {k: (g if g is not None else torch.zeros_like(inputs[k]))
            for k, g in zip(names, out)}

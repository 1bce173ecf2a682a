"""Training objectives: wavelet-pyramid photometric loss, monocular geometry
cues, back-projected SDF regularization, and the GOF-style distortion and
depth-normal regularizers, combined by a schedule-gated weighted sum.

All reductions are means over valid elements so the loss weights transfer
across image resolutions. Everything is torch end to end; gradients reach the
primitives through the rendered buffers and the field through its queries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from ._torchops import gather_rows
from .config import TrainConfig
from .errors import EmptyResultError, InvalidInputError, NumericFailureError
from .rasterizer import RenderedMaps, padded_indices
from .scene import Camera
from .sdf_field import SdfField

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# multi-resolution photometric supervision

def wavelet_level(img, level: int) -> torch.Tensor:
    """l-fold Haar approximation, rescaled to preserve intensity (block means).

    Non-divisible dimensions are cropped to the largest divisible size.
    level 0 returns the input unchanged.
    """
    if level < 0:
        raise InvalidInputError("wavelet level must be >= 0")
    t = torch.as_tensor(img)
    if level == 0:
        return t
    squeeze = t.dim() == 2
    if squeeze:
        t = t[..., None]
    h, w, c = t.shape
    f = 2 ** level
    if h % f or w % f:
        log.warning("wavelet_level: cropping %dx%d to divisible-by-%d", h, w, f)
        t = t[: (h // f) * f, : (w // f) * f]
    x = t.permute(2, 0, 1)[None]  # (1, C, H, W)
    for _ in range(level):
        x = F.avg_pool2d(x, 2)
    out = x[0].permute(1, 2, 0)
    return out[..., 0] if squeeze else out


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 11,
         dynamic_range: float = 1.0) -> torch.Tensor:
    """Mean SSIM with a uniform window (clamped to fit small images)."""
    if a.shape != b.shape:
        raise InvalidInputError(f"ssim shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 2:
        a, b = a[..., None], b[..., None]
    h, w, _ = a.shape
    win = min(window, h, w)
    if win % 2 == 0:
        win -= 1
    win = max(win, 1)
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]
    mu_x = F.avg_pool2d(x, win, stride=1)
    mu_y = F.avg_pool2d(y, win, stride=1)
    var_x = F.avg_pool2d(x * x, win, stride=1) - mu_x ** 2
    var_y = F.avg_pool2d(y * y, win, stride=1) - mu_y ** 2
    cov = F.avg_pool2d(x * y, win, stride=1) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return (num / den).mean()


def photometric_loss(rendered: torch.Tensor, gt) -> torch.Tensor:
    """0.8 * mean L1 + 0.2 * (1 - SSIM); gt must already be at the rendered level."""
    gt_t = torch.as_tensor(gt, dtype=rendered.dtype)
    if gt_t.shape != rendered.shape:
        raise InvalidInputError(
            f"photometric shapes differ: {tuple(rendered.shape)} vs {tuple(gt_t.shape)}")
    l1 = (rendered - gt_t).abs().mean()
    return 0.8 * l1 + 0.2 * (1.0 - ssim(rendered, gt_t))


# ---------------------------------------------------------------------------
# monocular geometry cues

class AlignParams(nn.Module):
    """Learnable disparity scale/shift (s, t) and depth scale/shift (a, b)."""

    def __init__(self, s=1.0, t=0.0, a=1.0, b=0.0, dtype=torch.float32):
        super().__init__()
        self.s = nn.Parameter(torch.tensor(float(s), dtype=dtype))
        self.t = nn.Parameter(torch.tensor(float(t), dtype=dtype))
        self.a = nn.Parameter(torch.tensor(float(a), dtype=dtype))
        self.b = nn.Parameter(torch.tensor(float(b), dtype=dtype))

    def values(self):
        with torch.no_grad():
            return (float(self.s), float(self.t), float(self.a), float(self.b))


@dataclass
class AlignResult:
    loss: torch.Tensor
    pseudo_depth: torch.Tensor  # (H, W), zero outside mask
    mask: torch.Tensor  # (H, W) bool, pixels that survived the denominator check
    dropped: int = 0


def align_pseudo_depth(disparity, mask, rendered_depth: torch.Tensor,
                       params: AlignParams, eps: float = 1e-6) -> AlignResult:
    """Projective alignment of a disparity prior to rendered depth.

    pseudo_depth = a / (s * disparity + t) + b on the valid mask; the loss is
    the masked mean absolute difference to rendered depth. Pixels whose
    denominator falls below eps are dropped (counted); an empty result is an
    error. The disparity input is treated as data (no gradient).
    """
    z = torch.as_tensor(disparity, dtype=rendered_depth.dtype).detach()
    m = torch.as_tensor(mask, dtype=torch.bool)
    if int(m.sum()) == 0:
        raise EmptyResultError("pseudo-depth alignment: empty mask")
    denom = params.s * z + params.t
    good = m & (denom.detach() > eps)
    dropped = int(m.sum() - good.sum())
    if int(good.sum()) == 0:
        raise EmptyResultError("pseudo-depth alignment: all pixels dropped (singular map)")
    denom_safe = torch.where(good, denom, torch.ones_like(denom))
    d_hat = torch.where(good, params.a / denom_safe + params.b,
                        torch.zeros_like(denom))
    loss = (d_hat - rendered_depth)[good].abs().mean()
    return AlignResult(loss=loss, pseudo_depth=d_hat, mask=good, dropped=dropped)


def fit_alignment(disparity, mask, depth, params: AlignParams | None = None,
                  adam_steps: int = 300, lr: float = 0.05, gn_steps: int = 30,
                  eps: float = 1e-6) -> tuple[AlignParams, AlignResult]:
    """Optimize the 4 alignment parameters against a fixed rendered depth.

    Adam on the L1 objective gets near the basin; damped Gauss-Newton on the
    residuals finishes to machine precision when an exact affine-warp solution
    exists. The (s, t, a) gauge redundancy leaves the normal equations rank
    deficient, which the damping absorbs. Deterministic.
    """
    d = torch.as_tensor(depth, dtype=torch.float64).detach()
    z = torch.as_tensor(disparity, dtype=torch.float64).detach()
    m = torch.as_tensor(mask, dtype=torch.bool)
    params = params or AlignParams(dtype=torch.float64)
    opt = torch.optim.Adam(params.parameters(), lr=lr)
    for _ in range(adam_steps):
        opt.zero_grad()
        align_pseudo_depth(z, m, d, params, eps=eps).loss.backward()
        opt.step()

    with torch.no_grad():
        theta = torch.tensor([float(params.s), float(params.t),
                              float(params.a), float(params.b)], dtype=torch.float64)
        zm = z[m].reshape(-1)
        dm = d[m].reshape(-1)

        def residual(th):
            q = th[0] * zm + th[1]
            good = q > eps
            return th[2] / q[good] + th[3] - dm[good], q, good

        best = theta.clone()
        best_l1 = float(residual(theta)[0].abs().mean())
        for _ in range(gn_steps):
            r, q, good = residual(theta)
            qg = q[good]
            jac = torch.stack([
                -theta[2] * zm[good] / qg ** 2,
                -theta[2] / qg ** 2,
                1.0 / qg,
                torch.ones_like(qg),
            ], dim=1)
            jtj = jac.T @ jac
            damp = 1e-9 * torch.diag(jtj).max().clamp_min(1e-12)
            step = torch.linalg.solve(jtj + damp * torch.eye(4, dtype=torch.float64),
                                      -(jac.T @ r))
            theta = theta + step
            l1 = float(residual(theta)[0].abs().mean())
            if l1 < best_l1:
                best_l1 = l1
                best = theta.clone()
        params.s.copy_(best[0])
        params.t.copy_(best[1])
        params.a.copy_(best[2])
        params.b.copy_(best[3])
    return params, align_pseudo_depth(z, m, d, params, eps=eps)


def pseudo_normal_from_depth(depth: torch.Tensor, camera: Camera, valid=None):
    """Unit normals from a depth image by back-projection and tangent cross products.

    Central differences in the interior, one-sided at image borders; a pixel is
    invalid when any referenced neighbor is invalid or the cross product
    degenerates. Returns (normals (H, W, 3), valid (H, W)).
    """
    d = torch.as_tensor(depth)
    h, w = d.shape
    v_in = (torch.ones(h, w, dtype=torch.bool) if valid is None
            else torch.as_tensor(valid, dtype=torch.bool))
    dirs = camera.pixel_directions(dtype=d.dtype)
    pts = d[..., None] * dirs

    # central differences via slices (one-sided at borders); slice-based
    # shifts keep the backward pass free of duplicate-index scatters
    def shifted_diff(x, dim):
        first = x.narrow(dim, 1, 1) - x.narrow(dim, 0, 1)
        mid = x.narrow(dim, 2, x.shape[dim] - 2) - x.narrow(dim, 0, x.shape[dim] - 2)
        last = x.narrow(dim, x.shape[dim] - 1, 1) - x.narrow(dim, x.shape[dim] - 2, 1)
        return torch.cat([first, mid, last], dim=dim)

    def neighbor_and(v, dim):
        k = v.shape[dim]
        lo = torch.cat([v.narrow(dim, 0, 1), v.narrow(dim, 0, k - 1)], dim=dim)
        hi = torch.cat([v.narrow(dim, 1, k - 1), v.narrow(dim, k - 1, 1)], dim=dim)
        return lo & hi

    t_u = shifted_diff(pts, 1)
    t_v = shifted_diff(pts, 0)
    n = torch.cross(t_v, t_u, dim=-1)
    norm = n.norm(dim=-1, keepdim=True)
    ok = (v_in & neighbor_and(v_in, 1) & neighbor_and(v_in, 0)
          & (norm[..., 0] > 1e-12))
    normals = torch.where(ok[..., None], n / norm.clamp_min(1e-12), torch.zeros_like(n))
    return normals, ok


def normal_cue_loss(pseudo_normal: torch.Tensor, rendered_normal: torch.Tensor,
                    mask) -> torch.Tensor:
    """Mean (1 - dot) between unit pseudo-normals and (normalized) rendered normals."""
    m = torch.as_tensor(mask, dtype=torch.bool)
    norm = rendered_normal.norm(dim=-1)
    m = m & (norm > 1e-8)
    if int(m.sum()) == 0:
        raise EmptyResultError("normal cue loss: empty mask")
    unit = rendered_normal / norm[..., None].clamp_min(1e-12)
    dot = (pseudo_normal * unit).sum(dim=-1)
    return (1.0 - dot[m]).mean()


# ---------------------------------------------------------------------------
# back-projected SDF supervision

@dataclass
class SdfSampleBatch:
    """Ray samples split into a near-surface band and free space.

    t values parametrize camera-space z-depth, so surface_depth - t is the
    signed offset the near-surface regression targets (positive on the camera
    side, matching the +1 free-space convention). Sample positions are fixed
    once drawn; only the regression target keeps the graph into rendered depth.
    """

    pixel_indices: np.ndarray  # (R,) flat row-major pixel ids
    surface_depth: torch.Tensor  # (R,) rendered depth at those pixels (with graph)
    near_ray: np.ndarray  # (Nn,) index into rays
    near_t: torch.Tensor  # (Nn,) detached depths
    near_points: torch.Tensor  # (Nn, 3) world, detached
    free_ray: np.ndarray
    free_t: torch.Tensor
    free_points: torch.Tensor
    truncation: float
    near_plane: float
    sdf_values: tuple | None = None
    stats: dict = dc_field(default_factory=dict)


def sample_sdf_rays(depth: torch.Tensor, alpha: torch.Tensor, camera: Camera,
                    pixel_count: int, near_count: int, free_count: int,
                    truncation: float, generator: torch.Generator,
                    coverage: float = 0.5) -> SdfSampleBatch:
    """Draw M covered pixels and stratify per-ray samples around rendered depth.

    Near-surface: uniform in [D - tr, D + tr] (clamped above the near plane).
    Free space: uniform in [near, D - tr); rays too close to the near plane
    simply contribute no free-space samples.
    """
    h, w = depth.shape
    # expectation of depth given a hit: the raw blend carries an alpha factor
    # that would drag the supervised surface toward the camera wherever
    # coverage is partial
    flat_depth = (depth / torch.clamp(alpha, min=1e-6)).reshape(-1)
    covered = torch.nonzero(alpha.detach().reshape(-1) >= coverage, as_tuple=False).squeeze(1)
    if covered.numel() == 0:
        raise EmptyResultError("sample_sdf_rays: no covered pixels")
    if covered.numel() < pixel_count:
        if not getattr(sample_sdf_rays, "_warned_short", False):
            sample_sdf_rays._warned_short = True
            log.warning("sample_sdf_rays: only %d covered pixels (< M=%d), using all "
                        "(warning once; later occurrences counted in batch stats)",
                        covered.numel(), pixel_count)
        chosen = covered
    else:
        perm = torch.randperm(covered.numel(), generator=generator)[:pixel_count]
        chosen = covered[perm]
    chosen_np = chosen.numpy()
    r = chosen.numel()
    dtype = depth.dtype

    d_live = flat_depth[chosen]
    d_det = d_live.detach()
    near = camera.near + 1e-6

    lo = torch.clamp(d_det - truncation, min=near)
    hi = d_det + truncation
    u = torch.rand((r, near_count), generator=generator, dtype=dtype)
    t_near = lo[:, None] + u * (hi - lo)[:, None]
    near_ray = np.repeat(np.arange(r), near_count)

    hi_f = d_det - truncation
    has_free = hi_f > near
    u_f = torch.rand((r, free_count), generator=generator, dtype=dtype)
    t_free_all = near + u_f * (hi_f - near).clamp_min(0.0)[:, None]
    free_mask = has_free[:, None].expand(-1, free_count)
    t_free = t_free_all[free_mask]
    free_ray = np.repeat(np.arange(r), free_count)[free_mask.numpy().reshape(-1)]

    dirs = camera.pixel_directions(dtype=dtype).reshape(-1, 3)[chosen]
    rot = torch.as_tensor(camera.rotation, dtype=dtype)
    tvec = torch.as_tensor(camera.translation, dtype=dtype)

    def back_project(ray_idx, t):
        x_cam = t[:, None] * dirs[torch.from_numpy(ray_idx)]
        return (x_cam - tvec) @ rot  # R^T (x_cam - t)

    t_near_flat = t_near.reshape(-1)
    batch = SdfSampleBatch(
        pixel_indices=chosen_np,
        surface_depth=d_live,
        near_ray=near_ray,
        near_t=t_near_flat,
        near_points=back_project(near_ray, t_near_flat),
        free_ray=free_ray,
        free_t=t_free,
        free_points=back_project(free_ray, t_free),
        truncation=truncation,
        near_plane=camera.near,
        stats={"rays": r, "free_dropped": int((~has_free).sum()) * free_count,
               "short_sample": max(pixel_count - r, 0)},
    )
    return batch


def sdf_regularization(batch: SdfSampleBatch, field: SdfField,
                       detach_depth: bool = False):
    """(L_ns, L_fs): near-surface regression to D - t and free-space push to +1.

    Gradients flow into the field and, unless detach_depth, into the rendered
    depth that defined the targets.
    """
    dtype = batch.surface_depth.dtype
    depth = batch.surface_depth.detach() if detach_depth else batch.surface_depth
    if batch.near_t.numel():
        s_near = field.query(batch.near_points).to(dtype)
        target = gather_rows(depth, torch.from_numpy(batch.near_ray)) - batch.near_t
        l_ns = ((s_near - target) ** 2).mean()
    else:
        batch.stats["empty_near"] = batch.stats.get("empty_near", 0) + 1
        s_near = torch.zeros(0, dtype=dtype)
        l_ns = torch.zeros((), dtype=dtype)
    if batch.free_t.numel():
        s_free = field.query(batch.free_points).to(dtype)
        l_fs = ((s_free - 1.0) ** 2).mean()
    else:
        s_free = torch.zeros(0, dtype=dtype)
        l_fs = torch.zeros((), dtype=dtype)
    batch.sdf_values = (s_near.detach(), s_free.detach())
    return l_ns, l_fs


# ---------------------------------------------------------------------------
# splat-geometry regularizers

def distortion_loss(maps: RenderedMaps) -> torch.Tensor:
    """Mean over pixels of sum_{i,j} w_i w_j |z_i - z_j| over ordered pairs.

    Depths are stored ascending per pixel, so the double sum reduces to
    2 * sum_i w_i (z_i W_i - Z_i) with prefix sums W, Z.
    """
    if maps.isect_weights.numel() == 0:
        return torch.zeros((), dtype=maps.depth.dtype)
    counts = np.diff(maps.isect_offsets)
    idx, valid, _ = padded_indices(counts)
    idx_t = torch.from_numpy(idx)
    valid_t = torch.from_numpy(valid)
    w = torch.where(valid_t, maps.isect_weights[idx_t], torch.zeros((), dtype=maps.isect_weights.dtype))
    z = torch.where(valid_t, maps.isect_depths[idx_t], torch.zeros((), dtype=maps.isect_depths.dtype))
    w_prefix = torch.cumsum(w, dim=1) - w
    wz_prefix = torch.cumsum(w * z, dim=1) - w * z
    per_pixel = 2.0 * (w * (z * w_prefix - wz_prefix)).sum(dim=1)
    return per_pixel.mean()


def depth_normal_loss(maps: RenderedMaps, camera: Camera,
                      coverage: float = 0.5) -> torch.Tensor:
    """Consistency between blended normals and normals of the rendered depth."""
    mask = maps.alpha.detach() >= coverage
    expected_depth = maps.depth / torch.clamp(maps.alpha, min=1e-6)
    normals, ok = pseudo_normal_from_depth(expected_depth, camera, valid=mask)
    m = mask & ok
    norm = maps.normal.norm(dim=-1)
    m = m & (norm.detach() > 1e-8)
    if int(m.sum()) == 0:
        log.warning("depth_normal_loss: empty mask, returning 0")
        return torch.zeros((), dtype=maps.depth.dtype)
    unit = maps.normal / norm[..., None].clamp_min(1e-12)
    dot = (normals * unit).sum(dim=-1)
    return (1.0 - dot[m]).mean()


# ---------------------------------------------------------------------------
# weighted objective

@dataclass
class LossReport:
    iteration: int
    p: float
    D: float
    N: float
    ns: float
    fs: float
    d: float
    n: float
    total: float
    total_tensor: torch.Tensor | None = None

    def to_json_dict(self, **extra) -> dict:
        out = {"iter": self.iteration, "p": self.p, "D": self.D, "N": self.N,
               "ns": self.ns, "fs": self.fs, "d": self.d, "n": self.n,
               "total": self.total}
        out.update(extra)
        return out


def gate_table(cfg: TrainConfig, iteration: int) -> dict[str, bool]:
    """Which loss terms are active at an iteration, per the schedule."""
    geo = cfg.geo and (cfg.lambda_depth > 0 or cfg.lambda_normal > 0)
    return {
        "p": True,
        "D": geo,
        "N": geo,
        "ns": iteration >= cfg.sdf_from,
        "fs": iteration >= cfg.sdf_from,
        "d": iteration >= cfg.distortion_from,
        "n": iteration >= cfg.depthnormal_from,
    }


def total_loss(terms: dict, cfg: TrainConfig, iteration: int) -> LossReport:
    """Schedule-gated weighted sum of the per-term losses.

    `terms` maps term names (p, D, N, ns, fs, d, n) to scalars/tensors; missing
    or gated-off terms contribute zero. Non-finite active terms abort.
    """
    gates = gate_table(cfg, iteration)
    weights = {"p": 1.0, "D": cfg.lambda_depth, "N": cfg.lambda_normal,
               "ns": cfg.lambda_ns, "fs": cfg.lambda_fs,
               "d": cfg.lambda_d, "n": cfg.lambda_n}
    values = {}
    total = None
    for name in ("p", "D", "N", "ns", "fs", "d", "n"):
        t = terms.get(name)
        if t is None or not gates[name]:
            values[name] = 0.0
            continue
        t = t if torch.is_tensor(t) else torch.as_tensor(float(t), dtype=torch.float64)
        if not torch.isfinite(t.detach()):
            raise NumericFailureError(f"loss term '{name}' is non-finite at iteration {iteration}")
        values[name] = float(t.detach())
        contrib = weights[name] * t
        total = contrib if total is None else total + contrib
    if total is None:
        total = torch.zeros(())
    return LossReport(iteration=iteration, total=float(total.detach()),
                      total_tensor=total, **values)

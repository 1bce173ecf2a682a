"""Joint optimization of explicit Gaussian primitives and the implicit SDF.

One step renders a view at the scheduled wavelet level, evaluates the gated
losses, and updates primitives, field, and alignment parameters with Adam
(moment decay 0.9/0.999). After the SDF activates, primitive opacity is a pure
function of the signed distance at the primitive center, so the photometric
loss trains the field through the rasterizer and the back-projected depth
supervision trains rendered depth through its own targets. Pruning removes
primitives whose signed distance exceeds the truncation band; opacities are
never reset.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .errors import EmptyResultError, InvalidInputError, NumericFailureError
from .losses import (AlignParams, align_pseudo_depth, depth_normal_loss,
                     distortion_loss, gate_table, normal_cue_loss, photometric_loss,
                     pseudo_normal_from_depth, sample_sdf_rays, sdf_regularization,
                     total_loss, wavelet_level)
from .rasterizer import RenderSettings, render_tensors
from .scene import (Camera, GaussianCloud, ImageSet, SceneBounds, bounds_from_points,
                    save_scene_checkpoint)
from .sdf_field import SdfField, bell_opacity, sdf_to_opacity

log = logging.getLogger(__name__)


def wavelet_schedule(iteration: int, cfg: TrainConfig) -> int:
    """Start level stepping down on equal intervals, 0 from full_res_from on."""
    if not cfg.multires or cfg.wavelet_start_level == 0:
        return 0
    if iteration >= cfg.full_res_from:
        return 0
    s = cfg.wavelet_start_level
    return s - int(math.floor(s * iteration / cfg.full_res_from))


def opacity_from_sdf(sdf_values: torch.Tensor, field: SdfField, mode: str,
                     beta_scale: float = 1.0) -> torch.Tensor:
    """SDF-to-opacity map; `mode` selects the Gaussian-shaped default or the
    capped bell used by the ablation registry. `beta_scale` implements the
    post-activation sharpness ramp (1.0 = the configured beta)."""
    beta = field.beta_param if field.beta_param is not None else field.beta
    beta = beta * beta_scale
    if mode == "bell":
        t = torch.sigmoid(beta * sdf_values)
        return t * (1.0 - t)
    return torch.exp(-((beta * sdf_values) ** 2))


def beta_ramp(iteration: int, cfg: TrainConfig) -> float:
    """Geometric 0.1 -> 1.0 sharpness multiplier over beta_ramp_iters after
    activation; 1.0 from then on."""
    if iteration < cfg.sdf_from:
        return 1.0
    progress = min(1.0, (iteration - cfg.sdf_from) / max(cfg.beta_ramp_iters, 1))
    return 0.1 ** (1.0 - progress)


def prune_by_sdf(cloud: GaussianCloud, field: SdfField, truncation: float,
                 optimizer: "CloudOptimizer | None" = None) -> GaussianCloud:
    """Keep exactly the primitives with sdf(mu) <= truncation (order preserved)."""
    if truncation <= 0:
        raise InvalidInputError("truncation must be > 0")
    with torch.no_grad():
        s = field.query(cloud.means.detach())
    keep = s <= truncation
    if int(keep.sum()) == 0:
        raise EmptyResultError("prune_by_sdf removed every primitive (training diverged)")
    if int(keep.sum()) == len(cloud):
        return cloud
    return _rebuild_cloud(cloud, keep, {}, optimizer)


def prune_by_opacity(cloud: GaussianCloud, opacities: torch.Tensor, threshold: float,
                     optimizer: "CloudOptimizer | None" = None) -> GaussianCloud:
    keep = opacities.detach() >= threshold
    if int(keep.sum()) == 0:
        raise EmptyResultError("opacity pruning removed every primitive")
    if int(keep.sum()) == len(cloud):
        return cloud
    return _rebuild_cloud(cloud, keep, {}, optimizer)


def densify(cloud: GaussianCloud, cfg: TrainConfig, extent_norm: float,
            generator: torch.Generator,
            optimizer: "CloudOptimizer | None" = None) -> tuple[GaussianCloud, dict]:
    """Clone small / split large primitives whose mean screen gradient exceeds
    the threshold. Split replaces the original with two at scale / split_factor;
    clones are jittered copies. Accumulated statistics reset afterwards.
    """
    with torch.no_grad():
        avg = cloud.accum_grad / cloud.accum_count.clamp_min(1.0)
        hot = avg > cfg.densify_grad_threshold
        budget = max(1, int(np.ceil(cfg.densify_max_fraction * len(cloud))))
        if int(hot.sum()) > budget:
            cutoff = torch.topk(avg, budget).values.min()
            hot = hot & (avg >= cutoff)
        if int(hot.sum()) == 0:
            cloud.accum_grad.zero_()
            cloud.accum_count.zero_()
            return cloud, {"cloned": 0, "split": 0}
        scales = cloud.scales
        big = scales.max(dim=1).values > cfg.densify_size_threshold * extent_norm
        split_mask = hot & big
        clone_mask = hot & ~big

        from .rasterizer import quat_to_rotmat
        appended = {k: [] for k in ("means", "quaternions", "log_scales", "colors",
                                    "opacity_logits")}

        def _sample_offsets(idx, sigma_factor):
            n = int(idx.sum())
            eps = torch.randn((n, 3), generator=generator, dtype=cloud.dtype)
            rot = quat_to_rotmat(cloud.quaternions[idx])
            return (rot @ (eps * scales[idx] * sigma_factor)[..., None]).squeeze(-1)

        if int(clone_mask.sum()):
            appended["means"].append(cloud.means[clone_mask]
                                     + _sample_offsets(clone_mask, 0.05))
            appended["quaternions"].append(cloud.quaternions[clone_mask])
            appended["log_scales"].append(cloud.log_scales[clone_mask])
            appended["colors"].append(cloud.colors[clone_mask])
            appended["opacity_logits"].append(cloud.opacity_logits[clone_mask])
        if int(split_mask.sum()):
            for _ in range(2):
                appended["means"].append(cloud.means[split_mask]
                                         + _sample_offsets(split_mask, 1.0))
                appended["quaternions"].append(cloud.quaternions[split_mask])
                appended["log_scales"].append(cloud.log_scales[split_mask]
                                              - math.log(cfg.densify_split_factor))
                appended["colors"].append(cloud.colors[split_mask])
                appended["opacity_logits"].append(cloud.opacity_logits[split_mask])
        new_rows = {k: torch.cat(v) if v else torch.zeros((0,) + tuple(getattr(cloud, k).shape[1:]),
                                                          dtype=cloud.dtype)
                    for k, v in appended.items()}
    stats = {"cloned": int(clone_mask.sum()), "split": int(split_mask.sum())}
    cloud = _rebuild_cloud(cloud, ~split_mask, new_rows, optimizer)
    cloud.accum_grad.zero_()
    cloud.accum_count.zero_()
    return cloud, stats


class CloudOptimizer:
    """Adam over the cloud's parameter tensors, one group per attribute.

    The position learning rate is multiplied by the scene's spatial scale
    (published position lrs assume that convention; without it step sizes are
    absolute world units and depend on the dataset's unit choice).
    Densify/prune swap parameter tensors; moment buffers follow the surviving
    rows and appended rows start with zero moments.
    """

    GROUPS = (("means", "lr_position"), ("quaternions", "lr_rotation"),
              ("log_scales", "lr_scale"), ("colors", "lr_color"),
              ("opacity_logits", "lr_opacity"))

    def __init__(self, cloud: GaussianCloud, cfg: TrainConfig, spatial_scale: float = 1.0):
        cloud.requires_grad_(True)
        self.cfg = cfg
        self.spatial_scale = spatial_scale
        groups = []
        for name, lr in self.GROUPS:
            value = getattr(cfg, lr) * (spatial_scale if name == "means" else 1.0)
            groups.append({"params": [getattr(cloud, name)], "lr": value, "name": name})
        self.opt = torch.optim.Adam(groups, betas=(0.9, 0.999), eps=1e-15)

    def set_position_lr(self, lr: float):
        for g in self.opt.param_groups:
            if g["name"] == "means":
                g["lr"] = lr * self.spatial_scale

    def step(self):
        self.opt.step()

    def zero_grad(self):
        self.opt.zero_grad(set_to_none=True)

    def replace_params(self, cloud: GaussianCloud, keep: torch.Tensor,
                       appended: dict[str, torch.Tensor]):
        for g in self.opt.param_groups:
            name = g["name"]
            old = g["params"][0]
            extra = appended.get(name)
            parts = [old.detach()[keep]]
            if extra is not None and extra.shape[0]:
                parts.append(extra.detach())
            new = torch.cat(parts).requires_grad_(True)
            state = self.opt.state.pop(old, None)
            if state is not None:
                n_new = new.shape[0] - int(keep.sum())
                pad = lambda t: torch.cat([t[keep], torch.zeros((n_new,) + tuple(t.shape[1:]),
                                                                dtype=t.dtype)])
                self.opt.state[new] = {"step": state["step"],
                                       "exp_avg": pad(state["exp_avg"]),
                                       "exp_avg_sq": pad(state["exp_avg_sq"])}
            g["params"][0] = new
            setattr(cloud, name, new)


def _rebuild_cloud(cloud: GaussianCloud, keep: torch.Tensor,
                   appended: dict[str, torch.Tensor],
                   optimizer: CloudOptimizer | None) -> GaussianCloud:
    if optimizer is not None:
        optimizer.replace_params(cloud, keep, appended)
    else:
        for name in ("means", "quaternions", "log_scales", "colors", "opacity_logits"):
            old = getattr(cloud, name)
            extra = appended.get(name)
            parts = [old.detach()[keep]]
            if extra is not None and extra.shape[0]:
                parts.append(extra.detach())
            new = torch.cat(parts)
            if old.requires_grad:
                new.requires_grad_(True)
            setattr(cloud, name, new)
    n = len(cloud)
    cloud.accum_grad = torch.zeros(n, dtype=cloud.dtype)
    cloud.accum_count = torch.zeros(n, dtype=cloud.dtype)
    return cloud


@dataclass
class TrainResult:
    cloud: GaussianCloud
    field: SdfField
    bounds: SceneBounds
    log: list = dc_field(default_factory=list)
    align: dict = dc_field(default_factory=dict)
    truncation: float = 0.0
    population: list = dc_field(default_factory=list)
    final_opacities: np.ndarray | None = None


def _downsample_disparity(disp: np.ndarray, mask: np.ndarray, level: int, dtype):
    d = torch.as_tensor(disp, dtype=dtype)
    m = torch.as_tensor(mask, dtype=dtype)
    if level == 0:
        return d, m > 0.5
    f = 2 ** level
    d = d[: d.shape[0] // f * f, : d.shape[1] // f * f]
    m = m[: d.shape[0], : d.shape[1]]
    import torch.nn.functional as F
    dm = F.avg_pool2d((d * m)[None, None], f)[0, 0]
    mm = F.avg_pool2d(m[None, None], f)[0, 0]
    valid = mm >= 1.0 - 1e-9  # whole block valid
    return torch.where(valid, dm / mm.clamp_min(1e-9), torch.zeros_like(dm)), valid


def _init_cloud(init_points, init_colors, cameras, cfg, generator) -> tuple[GaussianCloud, SceneBounds]:
    if init_points is not None and len(init_points):
        pts = np.asarray(init_points, dtype=np.float64).reshape(-1, 3)
    else:
        centers = np.stack([c.center for c in cameras])
        mid = centers.mean(axis=0)
        radius = float(np.linalg.norm(centers - mid, axis=1).mean()) or 1.0
        u = torch.rand((cfg.random_init_points, 3), generator=generator).numpy()
        pts = mid + (u - 0.5) * radius
        init_colors = None
        log.info("no init points: sampling %d uniform points in the camera box", len(pts))
    bounds = bounds_from_points(pts, cfg.bounds_margin, cfg.bounds_percentile)
    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    cloud = GaussianCloud.from_points(pts, colors=init_colors, opacity=cfg.init_opacity,
                                      dtype=dtype)
    return cloud, bounds


def _field_warmup(cloud, field, field_opt, image_set, cameras, train_views, cfg,
                  truncation, settings, generator, level, dtype):
    """Fit the field to depth rendered with the pre-activation opacities.

    Runs once when the SDF starts dictating opacity: the coupling map at
    beta=100 extinguishes any primitive whose signed distance is not already
    near zero, so the zero level set must sit on the rendered surface before
    the first coupled render.
    """
    with torch.no_grad():
        opac = torch.sigmoid(cloud.opacity_logits)
        buffers = []
        for idx in train_views[: cfg.sdf_warmup_views]:
            view = image_set.views[idx]
            cam = cameras[view.camera_id].downsampled(level)
            maps = render_tensors(cloud.means, cloud.quaternions, cloud.scales,
                                  cloud.colors, opac, cam,
                                  background=cfg.background, settings=settings)
            buffers.append((maps.depth, maps.alpha, cam))
    for step in range(cfg.sdf_warmup_steps):
        depth, alpha, cam = buffers[step % len(buffers)]
        try:
            batch = sample_sdf_rays(depth, alpha, cam, cfg.pixel_samples,
                                    cfg.near_samples, cfg.free_samples,
                                    truncation, generator)
        except EmptyResultError:
            return
        l_ns, l_fs = sdf_regularization(batch, field)
        field_opt.zero_grad(set_to_none=True)
        (cfg.lambda_ns * l_ns + cfg.lambda_fs * l_fs).backward()
        field_opt.step()


def train(image_set: ImageSet, cameras: dict[str, Camera], init_points=None,
          cfg: TrainConfig | None = None, *, seed: int = 0, out_dir=None,
          holdout: tuple = (), init_colors=None) -> TrainResult:
    """Run the full joint optimization; deterministic given the seed.

    `holdout` lists view indices excluded from training (kept for evaluation).
    Writes scene/field checkpoints and a JSON-lines loss log when out_dir is set.
    """
    cfg = (cfg or TrainConfig()).validate()
    if len(image_set.views) - len(holdout) < 2:
        raise InvalidInputError("training needs at least 2 views")
    image_set.validate_against(cameras)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
    gen = torch.Generator().manual_seed(seed)
    cloud, bounds = _init_cloud(init_points, init_colors, list(cameras.values()), cfg, gen)
    extent_norm = float(np.linalg.norm(bounds.extent))
    truncation = cfg.resolve_truncation(extent_norm)

    field = SdfField(bounds, num_levels=cfg.num_levels,
                     features_per_level=cfg.features_per_level,
                     base_resolution=cfg.base_resolution, growth_factor=cfg.growth_factor,
                     table_size_log2=cfg.table_size_log2, oneblob_bins=cfg.oneblob_bins,
                     beta=cfg.beta, learnable_beta=cfg.learnable_beta,
                     hidden_dim=cfg.hidden_dim, hidden_layers=cfg.hidden_layers,
                     normalization=cfg.normalization, dtype=dtype, generator=gen)
    field.geometric_init_(generator=gen, steps=cfg.sdf_init_steps)

    opt = CloudOptimizer(cloud, cfg, spatial_scale=extent_norm)
    field_opt = torch.optim.Adam(field.parameters(), lr=cfg.lr_sdf, betas=(0.9, 0.999))
    train_views = [i for i in range(len(image_set.views)) if i not in set(holdout)]
    align = {i: AlignParams(dtype=dtype) for i in train_views
             if image_set.views[i].disparity is not None}
    align_opt = (torch.optim.Adam([p for m in align.values() for p in m.parameters()],
                                  lr=cfg.lr_align, betas=(0.9, 0.999))
                 if align else None)

    import dataclasses
    settings_full = RenderSettings(footprint_sigma=cfg.footprint_sigma,
                                   transmittance_floor=cfg.transmittance_floor,
                                   max_splats_per_pixel=cfg.max_splats_per_pixel)
    settings_nonormal = dataclasses.replace(settings_full, need_normal=False)

    result = TrainResult(cloud=cloud, field=field, bounds=bounds,
                         truncation=truncation)
    log_file = open(out / "losses.jsonl", "w") if out is not None else None

    def current_opacity():
        return torch.sigmoid(cloud.opacity_logits)

    def save_checkpoints(tag, iteration, sdf_state=None):
        if out is None:
            return
        use_sdf = sdf_state if sdf_state is not None else iteration >= cfg.sdf_from
        with torch.no_grad():
            if use_sdf:
                ops = opacity_from_sdf(field.query(cloud.means.detach()),
                                       field, cfg.sdf2o,
                                       beta_scale=beta_ramp(iteration, cfg)).numpy()
            else:
                ops = current_opacity().detach().numpy()
        save_scene_checkpoint(out / f"scene{tag}.jsonl", cloud, bounds, iteration,
                              opacities=ops)
        field.save(out / f"field{tag}.bin")

    order: list[int] = []
    lr_ratio = cfg.lr_position_final / cfg.lr_position
    warmed = False
    try:
        for it in range(cfg.iterations):
            if not order:
                order = [train_views[int(i)]
                         for i in torch.randperm(len(train_views), generator=gen)]
            view_idx = order.pop()
            view = image_set.views[view_idx]
            camera = cameras[view.camera_id]

            level = wavelet_schedule(it, cfg)
            while level > 0 and (camera.width % (2 ** level) or camera.height % (2 ** level)):
                level -= 1
            cam_l = camera.downsampled(level)

            opt.set_position_lr(cfg.lr_position * lr_ratio ** (it / max(cfg.iterations, 1)))

            sdf_active = it >= cfg.sdf_from
            if sdf_active and not warmed:
                _field_warmup(cloud, field, field_opt, image_set, cameras,
                              train_views, cfg, truncation, settings_nonormal,
                              gen, level, dtype)
                warmed = True
            bscale = beta_ramp(it, cfg)
            if sdf_active:
                sdf_at_means = field.forward(cloud.means)
                opac = opacity_from_sdf(sdf_at_means, field, cfg.sdf2o,
                                        beta_scale=bscale)
            else:
                opac = current_opacity()

            gates = gate_table(cfg, it)
            needs_normal = (gates["n"]
                            or (gates["N"] and view.disparity is not None))
            maps = render_tensors(cloud.means, cloud.quaternions, cloud.scales,
                                  cloud.colors, opac, cam_l,
                                  background=cfg.background,
                                  settings=settings_full if needs_normal
                                  else settings_nonormal)

            gt = wavelet_level(torch.as_tensor(view.image, dtype=dtype), level)
            terms = {"p": photometric_loss(maps.color, gt)}
            if gates["D"] and view.disparity is not None and view_idx in align:
                disp_l, mask_l = _downsample_disparity(
                    view.disparity,
                    view.disparity_mask if view.disparity_mask is not None
                    else np.isfinite(view.disparity) & (view.disparity > 0),
                    level, dtype)
                mask_l = mask_l & (maps.alpha.detach() >= 0.5)
                if int(mask_l.sum()):
                    expected_depth = maps.depth / torch.clamp(maps.alpha, min=1e-6)
                    res = align_pseudo_depth(disp_l, mask_l, expected_depth,
                                             align[view_idx])
                    terms["D"] = res.loss
                    n_hat, ok = pseudo_normal_from_depth(res.pseudo_depth, cam_l,
                                                         valid=res.mask)
                    cue_mask = ok & (maps.alpha.detach() >= 0.5)
                    if int(cue_mask.sum()):
                        terms["N"] = normal_cue_loss(n_hat, maps.normal, cue_mask)

            if gates["ns"]:
                try:
                    batch = sample_sdf_rays(maps.depth, maps.alpha, cam_l,
                                            cfg.pixel_samples, cfg.near_samples,
                                            cfg.free_samples, truncation, gen)
                    terms["ns"], terms["fs"] = sdf_regularization(
                        batch, field, detach_depth=cfg.detach_depth_in_sdf)
                except EmptyResultError:
                    pass
            if gates["d"]:
                terms["d"] = distortion_loss(maps)
            if gates["n"]:
                terms["n"] = depth_normal_loss(maps, cam_l)

            report = total_loss(terms, cfg, it)

            opt.zero_grad()
            field_opt.zero_grad(set_to_none=True)
            if align_opt is not None:
                align_opt.zero_grad(set_to_none=True)
            report.total_tensor.backward()

            # densification statistics only at full resolution: the published
            # threshold is calibrated for full-res screen gradients, and at the
            # coarse wavelet levels the silhouette ring keeps most of the
            # population above any fixed threshold (coarse phases are exactly
            # where the pipeline is meant to run with few primitives)
            screen, kept_idx = maps._screen
            if level == 0 and screen.grad is not None and kept_idx.size:
                g2d = screen.grad * torch.tensor([cam_l.width / 2, cam_l.height / 2],
                                                 dtype=dtype)
                idx_t = torch.from_numpy(kept_idx)
                cloud.accum_grad.index_add_(0, idx_t, g2d.norm(dim=1).to(cloud.dtype))
                cloud.accum_count.index_add_(0, idx_t, torch.ones(len(kept_idx),
                                                                  dtype=cloud.dtype))

            audit = {}
            if sdf_active and (it % cfg.log_interval == 0 or it == cfg.iterations - 1):
                with torch.no_grad():
                    recomputed = opacity_from_sdf(field.query(cloud.means.detach()),
                                                  field, cfg.sdf2o, beta_scale=bscale)
                audit["opacity_audit_max_diff"] = float(
                    (recomputed - opac.detach()).abs().max())
                audit["surface_opacity"] = float(
                    opacity_from_sdf(torch.zeros((), dtype=dtype), field, cfg.sdf2o))

            opt.step()
            if sdf_active:
                field_opt.step()
            if align_opt is not None and "D" in terms:
                align_opt.step()
            cloud.normalize_rotations_()
            cloud.clamp_colors_()

            in_window = cfg.densify_from <= it < cfg.densify_until
            if in_window and it > 0 and it % cfg.densify_interval == 0 \
                    and float(cloud.accum_count.sum()) > 0 \
                    and (cfg.max_gaussians is None or len(cloud) < cfg.max_gaussians):
                result.cloud, dstats = densify(cloud, cfg, extent_norm, gen, optimizer=opt)
                cloud = result.cloud
                result.population.append({"iter": it, "count": len(cloud),
                                          "event": "densify", **dstats})
            # pruning waits for full-resolution supervision: below level 0 the
            # depth targets carry a pixel-footprint error wider than the
            # truncation band, and the field cannot be more accurate than its
            # supervision, so earlier pruning decimates at random
            first_prune = (max(cfg.sdf_from, cfg.full_res_from if cfg.multires else 0)
                           + max(cfg.prune_warmup, cfg.effective_prune_interval))
            if sdf_active and it >= first_prune \
                    and (it - first_prune) % cfg.effective_prune_interval == 0:
                try:
                    if cfg.prune_mode == "sdf":
                        cloud = prune_by_sdf(cloud, field, truncation, optimizer=opt)
                        with torch.no_grad():
                            post = float(field.query(cloud.means.detach()).max())
                        audit["post_prune_max_sdf"] = post
                        if post > truncation + 1e-6:
                            raise NumericFailureError(
                                f"pruning soundness violated: max sdf {post} > tr {truncation}")
                    else:
                        with torch.no_grad():
                            cur = opacity_from_sdf(field.query(cloud.means.detach()),
                                                   field, cfg.sdf2o)
                        cloud = prune_by_opacity(cloud, cur, cfg.opacity_prune_threshold,
                                                 optimizer=opt)
                except EmptyResultError:
                    save_checkpoints("_diverged", it)
                    raise
                result.cloud = cloud
                result.population.append({"iter": it, "count": len(cloud), "event": "prune"})

            if it % cfg.log_interval == 0 or it == cfg.iterations - 1:
                with torch.no_grad():
                    audit["opacity_q50"] = float(opac.detach().median())
                    audit["opacity_max"] = float(opac.detach().max())
                    audit["alpha_covered"] = int((maps.alpha.detach() >= 0.5).sum())
                line = report.to_json_dict(gaussian_count=len(cloud), level=level,
                                           view=view_idx, opacity_resets=0, **audit)
                result.log.append(line)
                if log_file is not None:
                    log_file.write(json.dumps(line) + "\n")
                    log_file.flush()
            if out is not None and cfg.checkpoint_interval > 0 and it > 0 \
                    and it % cfg.checkpoint_interval == 0:
                save_checkpoints(f"_{it:06d}", it)
    except NumericFailureError:
        save_checkpoints("_diverged", cfg.iterations)
        if log_file is not None:
            log_file.close()
        raise
    finally:
        if log_file is not None and not log_file.closed:
            log_file.close()

    result.cloud = cloud
    trained_past_sdf = cfg.iterations > cfg.sdf_from
    with torch.no_grad():
        if trained_past_sdf:
            result.final_opacities = opacity_from_sdf(
                field.query(cloud.means.detach()), field, cfg.sdf2o,
                beta_scale=beta_ramp(cfg.iterations, cfg)).numpy()
        else:
            result.final_opacities = torch.sigmoid(cloud.opacity_logits).detach().numpy()
    result.align = {i: m.values() for i, m in align.items()}
    result.population.append({"iter": cfg.iterations, "count": len(cloud), "event": "end"})
    save_checkpoints("", cfg.iterations, sdf_state=trained_past_sdf)
    if out is not None:
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    return result

"""Training configuration: schedules, loss weights, sampling counts.

Defaults follow the full-scale 30000-iteration recipe; `scaled_to` rescales
every iteration mark proportionally for desk-scale runs so the phase
structure (densify window, SDF activation, wavelet ramp, ...) is preserved.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .errors import InvalidInputError


@dataclass
class TrainConfig:
    iterations: int = 30000

    # learning rates; position decays exponentially lr_position -> lr_position_final
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2  # pre-SDF phase only
    lr_sdf: float = 2e-3
    lr_align: float = 1e-2

    # densification / pruning
    densify_from: int = 500
    densify_until: int = 15000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    densify_split_factor: float = 1.6
    densify_size_threshold: float = 0.01  # fraction of ||extent||
    # per-event budget: at most this fraction of the population densifies
    # (hottest gradients first); keeps growth geometric-with-small-ratio even
    # through transients (resolution switches, SDF activation)
    densify_max_fraction: float = 0.05
    max_gaussians: int | None = None  # population guardrail; None = unbounded
    prune_interval: int | None = None  # defaults to densify_interval
    # iterations of SDF training before the first prune; right after activation
    # the field is still near its geometric init and would gate survival on noise
    prune_warmup: int = 500
    prune_mode: str = "sdf"  # "sdf" | "opacity" (ablation)
    opacity_prune_threshold: float = 0.005

    # loss activation schedule
    sdf_from: int = 5000
    distortion_from: int = 3000
    depthnormal_from: int = 7000
    wavelet_start_level: int = 3
    full_res_from: int = 10000

    # loss weights
    lambda_d: float = 100.0
    lambda_n: float = 0.05
    lambda_ns: float = 1000.0
    lambda_fs: float = 10.0
    lambda_depth: float = 0.05  # pseudo-depth cue
    lambda_normal: float = 0.1  # pseudo-normal cue

    # SDF supervision sampling
    pixel_samples: int = 10000  # M
    near_samples: int = 11  # K_n
    free_samples: int = 64  # K_f
    truncation: float | None = None  # defaults to 5% of ||extent||

    # SDF-to-opacity and field
    beta: float = 100.0
    learnable_beta: bool = False
    sdf2o: str = "gaussian"  # "gaussian" | "bell" (ablation)
    normalization: str = "sigmoid"  # "sigmoid" | "contraction" (ablation)
    num_levels: int = 9
    features_per_level: int = 2
    base_resolution: int = 16
    growth_factor: float = 1.5
    table_size_log2: int = 16
    oneblob_bins: int = 16
    hidden_dim: int = 32
    hidden_layers: int = 2
    sdf_init_steps: int = 400
    # optimization burst fitting the field to pre-activation rendered depth at
    # the moment the opacity coupling switches on; without it the beta=100 map
    # zeroes every primitive whose signed distance exceeds a few centimils of
    # scene scale and the render collapses (absolute steps, not scaled)
    sdf_warmup_steps: int = 300
    sdf_warmup_views: int = 8
    # opacity sharpness ramps geometrically from 10% of beta to beta across
    # this window after activation; switching straight to the final sharpness
    # lets the photometric transient shove the field off the surface faster
    # than the band supervision can hold it (the coupling map is unchanged
    # after the window)
    beta_ramp_iters: int = 2000

    # rasterizer
    transmittance_floor: float = 1e-4
    footprint_sigma: float = 3.0
    # depth-rank cap per pixel; contributions past it are < (1-o_min)^64 of
    # the pixel mass and the cut keeps CPU blending tractable
    max_splats_per_pixel: int = 64
    background: tuple = (0.0, 0.0, 0.0)

    # regularization routing
    multires: bool = True
    geo: bool = True
    detach_depth_in_sdf: bool = False

    # scene init
    init_opacity: float = 0.1
    random_init_points: int = 2000
    bounds_percentile: tuple = (2.0, 98.0)
    bounds_margin: float = 0.05

    # bookkeeping
    checkpoint_interval: int = 1000
    log_interval: int = 100
    dtype: str = "float32"

    def validate(self) -> "TrainConfig":
        for name in ("lr_position", "lr_position_final", "lr_scale", "lr_rotation",
                     "lr_color", "lr_opacity", "lr_sdf", "lr_align"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be > 0")
        if self.iterations < 0:
            raise InvalidInputError("iterations must be >= 0")
        for name in ("densify_from", "densify_until", "sdf_from", "distortion_from",
                     "depthnormal_from", "full_res_from"):
            # marks beyond `iterations` simply never activate (phase disabled)
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be >= 0")
        if self.truncation is not None and self.truncation <= 0:
            raise InvalidInputError("truncation must be > 0")
        if self.beta <= 0:
            raise InvalidInputError("beta must be > 0")
        if self.sdf2o not in ("gaussian", "bell"):
            raise InvalidInputError(f"unknown sdf2o variant '{self.sdf2o}'")
        if self.normalization not in ("sigmoid", "contraction"):
            raise InvalidInputError(f"unknown normalization '{self.normalization}'")
        if self.prune_mode not in ("sdf", "opacity"):
            raise InvalidInputError(f"unknown prune_mode '{self.prune_mode}'")
        if self.wavelet_start_level < 0:
            raise InvalidInputError("wavelet_start_level must be >= 0")
        return self

    def scaled_to(self, iterations: int, **overrides) -> "TrainConfig":
        """Proportionally rescaled schedule for a shorter run."""
        f = iterations / 30000.0
        marks = dict(
            iterations=iterations,
            densify_from=round(self.densify_from * f),
            densify_until=round(self.densify_until * f),
            densify_interval=max(1, round(self.densify_interval * f)),
            sdf_from=round(self.sdf_from * f),
            distortion_from=round(self.distortion_from * f),
            depthnormal_from=round(self.depthnormal_from * f),
            full_res_from=max(1, round(self.full_res_from * f)),
            # floor of 100: the first prune must not land inside the re-fitting
            # transient right after the resolution switch
            prune_warmup=max(100, round(self.prune_warmup * f)),
            beta_ramp_iters=max(1, round(self.beta_ramp_iters * f)),
            checkpoint_interval=max(1, round(self.checkpoint_interval * f)),
            log_interval=max(1, round(self.log_interval * f)),
        )
        marks.update(overrides)
        return dataclasses.replace(self, **marks).validate()

    @property
    def effective_prune_interval(self) -> int:
        return self.prune_interval if self.prune_interval is not None else self.densify_interval

    def resolve_truncation(self, extent_norm: float) -> float:
        # 15% of the extent norm: the band must sit above the field's
        # attainable accuracy or scheduled pruning decimates healthy scenes
        return self.truncation if self.truncation is not None else 0.15 * extent_norm

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["background"] = list(self.background)
        d["bounds_percentile"] = list(self.bounds_percentile)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("background", "bounds_percentile"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        try:
            with open(path, "rb") as f:
                raw = f.read()
        except OSError as e:
            raise InvalidInputError(f"cannot read config: {e}") from e
        text = raw.decode()
        if str(path).endswith(".toml"):
            try:
                import tomllib
            except ImportError as e:
                raise InvalidInputError("toml configs need Python >= 3.11; use JSON") from e
            return cls.from_dict(tomllib.loads(text))
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise InvalidInputError(f"malformed config JSON: {e}") from e

    def with_overrides(self, pairs: dict[str, str]) -> "TrainConfig":
        """Apply key=value string overrides with field-typed coercion."""
        fields = {f.name: f for f in dataclasses.fields(self)}
        patch = {}
        for key, val in pairs.items():
            if key not in fields:
                raise InvalidInputError(f"unknown config key '{key}'")
            current = getattr(self, key)
            try:
                if isinstance(current, bool):
                    patch[key] = val.lower() in ("1", "true", "yes", "on")
                elif isinstance(current, int) and not isinstance(current, bool):
                    patch[key] = int(val)
                elif isinstance(current, float):
                    patch[key] = float(val)
                elif isinstance(current, tuple):
                    patch[key] = tuple(float(x) for x in val.split(","))
                elif current is None:
                    patch[key] = float(val)
                else:
                    patch[key] = val
            except ValueError as e:
                raise InvalidInputError(f"cannot parse override {key}={val}: {e}") from e
        return dataclasses.replace(self, **patch).validate()

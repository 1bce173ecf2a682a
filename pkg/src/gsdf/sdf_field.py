"""Implicit surface field: normalization, one-blob encoding, hash grid, MLP.

World coordinates pass through a per-axis sigmoid keyed to the scene bounds
(sigma = 2/B), so the box of primary primitives covers most of the (0,1)^3
grid domain while distant points compress smoothly. Features come from a
multi-resolution hashed lattice read by trilinear interpolation, concatenated
with a one-blob encoding of the normalized coordinate, and decoded by a small
MLP to a scalar signed distance (negative inside, positive outside).
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch
from torch import nn

from ._torchops import gather_rows
from .errors import InvalidInputError, NumericFailureError
from .scene import SceneBounds

HASH_PRIMES = (1, 2654435761, 805459861)
ONEBLOB_TRUNCATION_BINS = 3.0

_oneblob_clamped = 0


def oneblob_clamp_count() -> int:
    return _oneblob_clamped


def normalize_coord(x, bounds: SceneBounds):
    """Per-axis sigmoid map of world coordinates into the open unit cube.

    h(x) = sigmoid(2 * (x - center) / extent); the Jacobian at the center is
    diag(1 / (2 * extent)), i.e. near-linear over the primary box.
    """
    t = torch.as_tensor(x)
    if not torch.isfinite(t).all():
        raise InvalidInputError("normalize_coord: non-finite input")
    center = torch.as_tensor(bounds.center, dtype=t.dtype)
    extent = torch.as_tensor(bounds.extent, dtype=t.dtype)
    out = torch.sigmoid(2.0 * (t - center) / extent)
    # float sigmoid rounds to exactly 0/1 far out; keep the interval open
    eps = torch.finfo(out.dtype).eps
    return out.clamp(min=eps, max=1.0 - eps)


def denormalize_coord(u, bounds: SceneBounds):
    """Closed-form logit inverse of normalize_coord."""
    t = torch.as_tensor(u)
    center = torch.as_tensor(bounds.center, dtype=t.dtype)
    extent = torch.as_tensor(bounds.extent, dtype=t.dtype)
    return center + 0.5 * extent * torch.log(t / (1.0 - t))


def contract_coord(x, bounds: SceneBounds):
    """Fixed ball-contraction alternative (ablation): unbounded -> (0,1)^3.

    Scales by the half-extent, contracts radii beyond 1 to 2 - 1/r, then maps
    the radius-2 ball affinely into the unit cube.
    """
    t = torch.as_tensor(x)
    center = torch.as_tensor(bounds.center, dtype=t.dtype)
    extent = torch.as_tensor(bounds.extent, dtype=t.dtype)
    y = (t - center) / (0.5 * extent)
    r = y.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    contracted = torch.where(r <= 1.0, y, (2.0 - 1.0 / r) * y / r)
    return contracted / 4.0 + 0.5


def oneblob_encode(u, bins: int):
    """Soft bin activations of scalars in (0,1): Gaussian kernel of width 1/bins.

    The kernel is truncated beyond 3 bins by subtracting the 3-sigma value and
    clamping at zero (rescaled so a sample exactly on a bin center encodes 1),
    keeping the encoding continuous.
    """
    global _oneblob_clamped
    if bins < 4:
        raise InvalidInputError("oneblob bins must be >= 4")
    t = torch.as_tensor(u)
    bad = (t <= 0) | (t >= 1)
    if bool(bad.any()):
        _oneblob_clamped += int(bad.sum())
        t = t.clamp(1e-7, 1 - 1e-7)
    centers = (torch.arange(bins, dtype=t.dtype) + 0.5) / bins
    d = (t[..., None] - centers) * bins
    raw = torch.exp(-0.5 * d * d)
    floor = float(np.exp(-0.5 * ONEBLOB_TRUNCATION_BINS ** 2))
    return torch.clamp((raw - floor) / (1.0 - floor), min=0.0)


def _hash_corners(corners: torch.Tensor, table_size: int) -> torch.Tensor:
    """Spatial hash of integer lattice coordinates; table_size is a power of two."""
    h = (corners[..., 0] * HASH_PRIMES[0]
         ^ corners[..., 1] * HASH_PRIMES[1]
         ^ corners[..., 2] * HASH_PRIMES[2])
    return h & (table_size - 1)


_CORNER_OFFSETS = torch.tensor(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=torch.int64)


class SdfField(nn.Module):
    """Hash-grid + one-blob + MLP signed distance field over SceneBounds."""

    def __init__(self, bounds: SceneBounds, num_levels: int = 9,
                 features_per_level: int = 2, base_resolution: int = 16,
                 growth_factor: float = 1.5, table_size_log2: int = 16,
                 oneblob_bins: int = 16, beta: float = 100.0,
                 learnable_beta: bool = False, hidden_dim: int = 32,
                 hidden_layers: int = 2, activation_sharpness: float = 100.0,
                 normalization: str = "sigmoid", dtype=torch.float32,
                 generator: torch.Generator | None = None):
        super().__init__()
        if beta <= 0:
            raise InvalidInputError("beta must be > 0")
        if normalization not in ("sigmoid", "contraction"):
            raise InvalidInputError(f"unknown normalization '{normalization}'")
        self.bounds = bounds
        self.num_levels = num_levels
        self.features_per_level = features_per_level
        self.table_size = 1 << table_size_log2
        self.oneblob_bins = oneblob_bins
        self.normalization = normalization
        self.activation_sharpness = activation_sharpness
        res = [int(np.floor(base_resolution * growth_factor ** l)) for l in range(num_levels)]
        if any(b <= a for a, b in zip(res, res[1:])):
            raise InvalidInputError(f"level resolutions must strictly increase, got {res}")
        self.resolutions = res
        self._res_t = torch.tensor(res, dtype=dtype).view(1, num_levels, 1)
        self.base_resolution = base_resolution
        self.growth_factor = growth_factor

        g = generator if generator is not None else torch.Generator().manual_seed(0)
        feats = (torch.rand((num_levels, self.table_size, features_per_level),
                            dtype=dtype, generator=g) * 2e-4 - 1e-4)
        self.features = nn.Parameter(feats)

        in_dim = 3 * oneblob_bins + num_levels * features_per_level
        dims = [in_dim] + [hidden_dim] * hidden_layers + [1]
        layers = []
        for i in range(len(dims) - 1):
            lin = nn.Linear(dims[i], dims[i + 1])
            _init_linear(lin, g, dtype)
            layers.append(lin)
        self.layers = nn.ModuleList(layers)
        self.activation = nn.Softplus(beta=activation_sharpness)

        if learnable_beta:
            self.beta_param = nn.Parameter(torch.tensor(float(beta), dtype=dtype))
        else:
            self.beta_param = None
            self._beta = float(beta)
        self.to(dtype)
        self._dtype = dtype

    @property
    def beta(self) -> float:
        return float(self.beta_param) if self.beta_param is not None else self._beta

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        if self.normalization == "contraction":
            return contract_coord(x, self.bounds)
        return normalize_coord(x, self.bounds)

    def grid_features(self, p: torch.Tensor) -> torch.Tensor:
        """Trilinear hash-grid read at unit-cube points p (B, 3) -> (B, L*F)."""
        b = p.shape[0]
        res = self._res_t.to(p.dtype)
        scaled = p[:, None, :] * res  # (B, L, 3)
        base = torch.floor(scaled.detach())
        frac = scaled - base  # keeps the graph into p
        # hash the 8 corners from per-axis products (xor distributes over the
        # corner offsets), avoiding a (B, L, 8, 3) int64 intermediate
        ibase = base.long()
        off = _CORNER_OFFSETS
        hx = torch.stack([ibase[..., 0] * HASH_PRIMES[0],
                          (ibase[..., 0] + 1) * HASH_PRIMES[0]], dim=-1)
        hy = torch.stack([ibase[..., 1] * HASH_PRIMES[1],
                          (ibase[..., 1] + 1) * HASH_PRIMES[1]], dim=-1)
        hz = torch.stack([ibase[..., 2] * HASH_PRIMES[2],
                          (ibase[..., 2] + 1) * HASH_PRIMES[2]], dim=-1)
        idx = (hx[:, :, off[:, 0]] ^ hy[:, :, off[:, 1]] ^ hz[:, :, off[:, 2]]) \
            & (self.table_size - 1)
        level_off = (torch.arange(self.num_levels, dtype=torch.int64)
                     * self.table_size).view(1, -1, 1)
        flat = (idx + level_off).reshape(-1)
        feats = gather_rows(self.features.reshape(-1, self.features_per_level), flat)
        feats = feats.view(b, self.num_levels, 8, self.features_per_level).to(p.dtype)
        # corner order is x-major (x*4 + y*2 + z): lerp z, then y, then x
        fz = frac[:, :, 2:3]
        c = feats[:, :, 0::2] + (feats[:, :, 1::2] - feats[:, :, 0::2]) * fz[..., None]
        fy = frac[:, :, 1:2]
        c = c[:, :, 0::2] + (c[:, :, 1::2] - c[:, :, 0::2]) * fy[..., None]
        fx = frac[:, :, 0:1]
        out = c[:, :, 0] + (c[:, :, 1] - c[:, :, 0]) * fx
        return out.reshape(b, -1)

    def encode(self, p: torch.Tensor) -> torch.Tensor:
        blob = oneblob_encode(p, self.oneblob_bins).reshape(p.shape[0], -1)
        return torch.cat([blob, self.grid_features(p)], dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = self.normalize(x)
        h = self.encode(p)
        for lin in self.layers[:-1]:
            h = self.activation(lin(h))
        out = self.layers[-1](h).squeeze(-1)
        if not torch.isfinite(out).all():
            self._diagnose(x)
        return out

    def query(self, x) -> torch.Tensor:
        """SDF values at world points; accepts (3,) or (B, 3), numpy or tensor."""
        t = torch.as_tensor(x, dtype=self._dtype)
        single = t.dim() == 1
        t = t.reshape(-1, 3)
        out = self.forward(t)
        return out[0] if single else out

    def gradient(self, x) -> torch.Tensor:
        """dSDF/dx at world points via the chain rule through the full field."""
        t = torch.as_tensor(x, dtype=self._dtype)
        single = t.dim() == 1
        t = t.reshape(-1, 3).detach().requires_grad_(True)
        s = self.forward(t)
        (g,) = torch.autograd.grad(s.sum(), t, create_graph=False)
        return g[0] if single else g

    def _diagnose(self, x: torch.Tensor):
        with torch.no_grad():
            stages = {"normalize": self.normalize(x)}
            stages["oneblob"] = oneblob_encode(stages["normalize"], self.oneblob_bins)
            stages["grid"] = self.grid_features(stages["normalize"])
            h = torch.cat([stages["oneblob"].reshape(x.shape[0], -1), stages["grid"]], dim=-1)
            for i, lin in enumerate(self.layers):
                h = lin(h)
                if i < len(self.layers) - 1:
                    h = self.activation(h)
                stages[f"layer{i}"] = h
            for name, v in stages.items():
                if not torch.isfinite(v).all():
                    raise NumericFailureError(f"sdf field produced non-finite values at stage '{name}'")
        raise NumericFailureError("sdf field produced non-finite output")

    @torch.enable_grad()
    def geometric_init_(self, generator: torch.Generator | None = None,
                        steps: int = 400, batch: int = 512, lr: float = 2e-3):
        """Fit the decoder so the initial zero level set approximates a centered
        sphere of radius 0.25 * ||extent|| (outside positive, clamped at +1).

        Only MLP weights move; grid features keep their near-zero init. An
        additive analytic term is ruled out because a field with zeroed output
        weights must be constant.
        """
        g = generator if generator is not None else torch.Generator().manual_seed(7)
        center = torch.as_tensor(self.bounds.center, dtype=self._dtype)
        enorm = float(np.linalg.norm(self.bounds.extent))
        radius = 0.25 * enorm
        opt = torch.optim.Adam([p for lyr in self.layers for p in lyr.parameters()], lr=lr)
        for _ in range(steps):
            dirs = torch.randn((batch, 3), generator=g, dtype=self._dtype)
            dirs = dirs / dirs.norm(dim=1, keepdim=True).clamp_min(1e-9)
            mag = enorm * 10.0 ** (torch.rand(batch, generator=g, dtype=self._dtype) * 2.3 - 1.2)
            x = center + dirs * mag[:, None]
            target = torch.clamp((x - center).norm(dim=1) - radius, max=1.0)
            opt.zero_grad()
            loss = ((self.forward(x) - target) ** 2).mean()
            loss.backward()
            opt.step()
        for p in self.parameters():
            p.grad = None
        return self

    def save(self, path):
        header = {
            "format": "gsdf-field", "version": 1,
            "num_levels": self.num_levels, "features_per_level": self.features_per_level,
            "base_resolution": self.base_resolution, "growth_factor": self.growth_factor,
            "table_size_log2": int(np.log2(self.table_size)),
            "oneblob_bins": self.oneblob_bins, "beta": self.beta,
            "learnable_beta": self.beta_param is not None,
            "hidden_dim": self.layers[0].out_features,
            "hidden_layers": len(self.layers) - 1,
            "activation_sharpness": self.activation_sharpness,
            "normalization": self.normalization,
            "bounds": {"center": self.bounds.center.tolist(),
                       "extent": self.bounds.extent.tolist()},
        }
        blobs = [self.features.detach().to(torch.float32).numpy().tobytes()]
        for lin in self.layers:
            blobs.append(lin.weight.detach().to(torch.float32).numpy().tobytes())
            blobs.append(lin.bias.detach().to(torch.float32).numpy().tobytes())
        with open(path, "wb") as f:
            hb = json.dumps(header).encode()
            f.write(struct.pack("<I", len(hb)))
            f.write(hb)
            for b in blobs:
                f.write(b)

    @classmethod
    def load(cls, path, dtype=torch.float32) -> "SdfField":
        try:
            with open(path, "rb") as f:
                (hlen,) = struct.unpack("<I", f.read(4))
                header = json.loads(f.read(hlen).decode())
                if header.get("format") != "gsdf-field":
                    raise InvalidInputError("not a gsdf field checkpoint")
                bounds = SceneBounds(header["bounds"]["center"], header["bounds"]["extent"])
                field = cls(bounds, num_levels=header["num_levels"],
                            features_per_level=header["features_per_level"],
                            base_resolution=header["base_resolution"],
                            growth_factor=header["growth_factor"],
                            table_size_log2=header["table_size_log2"],
                            oneblob_bins=header["oneblob_bins"], beta=header["beta"],
                            learnable_beta=header["learnable_beta"],
                            hidden_dim=header["hidden_dim"],
                            hidden_layers=header["hidden_layers"],
                            activation_sharpness=header["activation_sharpness"],
                            normalization=header.get("normalization", "sigmoid"),
                            dtype=dtype)
                def read_into(param):
                    n = param.numel()
                    buf = f.read(4 * n)
                    if len(buf) != 4 * n:
                        raise InvalidInputError("truncated field checkpoint")
                    arr = np.frombuffer(buf, dtype="<f4").reshape(param.shape)
                    with torch.no_grad():
                        param.copy_(torch.from_numpy(arr.copy()).to(dtype))
                read_into(field.features)
                for lin in field.layers:
                    read_into(lin.weight)
                    read_into(lin.bias)
        except (OSError, struct.error, ValueError, KeyError) as e:
            raise InvalidInputError(f"cannot read field checkpoint: {e}") from e
        return field


def _init_linear(lin: nn.Linear, generator: torch.Generator, dtype):
    bound = 1.0 / np.sqrt(lin.in_features)
    with torch.no_grad():
        lin.weight.copy_((torch.rand(lin.weight.shape, generator=generator, dtype=dtype)
                          * 2 - 1) * bound)
        lin.bias.copy_((torch.rand(lin.bias.shape, generator=generator, dtype=dtype)
                        * 2 - 1) * bound)


def grid_lookup(field: SdfField, p) -> torch.Tensor:
    """Concatenated multi-level features at unit-cube points."""
    t = torch.as_tensor(p, dtype=field._dtype)
    single = t.dim() == 1
    out = field.grid_features(t.reshape(-1, 3))
    return out[0] if single else out


def sdf_query(field: SdfField, x) -> torch.Tensor:
    return field.query(x)


def sdf_gradient(field: SdfField, x) -> torch.Tensor:
    return field.gradient(x)


def sdf_to_opacity(s, beta: float):
    """Gaussian-shaped SDF-to-opacity map: exp(-(beta*s)^2), 1 exactly on the surface."""
    if beta <= 0:
        raise InvalidInputError("beta must be > 0")
    t = torch.as_tensor(s)
    return torch.exp(-((beta * t) ** 2))


def sdf_to_opacity_derivative(s, beta: float):
    """d/ds of sdf_to_opacity: -2 beta^2 s exp(-(beta*s)^2)."""
    t = torch.as_tensor(s)
    return -2.0 * beta * beta * t * torch.exp(-((beta * t) ** 2))


def bell_opacity(s, beta: float):
    """Capped bell alternative (ablation): sigmoid'(beta*s) shape, 0.25 at s = 0."""
    t = torch.sigmoid(beta * torch.as_tensor(s))
    return t * (1.0 - t)

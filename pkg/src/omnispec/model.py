"""Camera-agnostic spectral image model.

Forward path: shared per-channel patch projection -> wavelength positional
encoding -> spectral encoder (alternating self-attention over channel tokens
and cross-attention into K learned representations) -> summation readout ->
norm + linear transition -> 2D positional encoding -> spatial transformer ->
task head. The spectral stage runs per patch, so the model accepts any
channel count with one parameter set.

Parameters live in a flat dict of dotted names, which keeps checkpointing
and finite-difference auditing trivial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .encoding import WavelengthEncoder, discrete_pe, grid_pe
from .errors import ShapeError, ValidationError
from .rng import stream, truncated_normal
from .tensor import Tensor


@dataclass
class ModelConfig:
    patch: int = 8                  # patch edge; projection kernel == stride
    d_spec: int = 384               # spectral encoder width
    d_spat: int | None = None       # spatial width (defaults to d_spec)
    n_reps: int = 8                 # learned spectral representations (K)
    depth_spec: int = 4             # self-attn/cross-attn module count (L)
    depth_spat: int = 8             # spatial transformer blocks
    heads: int | None = None        # defaults to width // 64 (min 1)
    mlp_ratio: int = 4
    sigma: float = 3.0              # wavelength PE frequency std
    alpha: float = 1e-3             # wavelength scale, per nm
    n_classes: int | None = None    # adds classifier head weights when set

    def __post_init__(self):
        if self.d_spat is None:
            self.d_spat = self.d_spec
        if self.heads is None:
            self.heads = max(1, self.d_spec // 64)
        if self.d_spec % 2 != 0:
            raise ValidationError("d_spec must be even")
        for width in (self.d_spec, self.d_spat):
            if width % self.heads != 0:
                raise ValidationError(f"width {width} not divisible by {self.heads} heads")
        if self.d_spat % 4 != 0:
            raise ValidationError("d_spat must be divisible by 4 (2D grid encoding)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


_INIT_STD = 0.02
_REP_STD = 0.5


def _attn_param_names(prefix: str, d: int, mlp_ratio: int, cross: bool):
    names = {
        f"{prefix}.norm1.g": (d,), f"{prefix}.norm1.b": (d,),
        f"{prefix}.q.w": (d, d), f"{prefix}.q.b": (d,),
        f"{prefix}.k.w": (d, d), f"{prefix}.k.b": (d,),
        f"{prefix}.v.w": (d, d), f"{prefix}.v.b": (d,),
        f"{prefix}.proj.w": (d, d), f"{prefix}.proj.b": (d,),
        f"{prefix}.norm2.g": (d,), f"{prefix}.norm2.b": (d,),
        f"{prefix}.mlp.fc1.w": (d, mlp_ratio * d), f"{prefix}.mlp.fc1.b": (mlp_ratio * d,),
        f"{prefix}.mlp.fc2.w": (mlp_ratio * d, d), f"{prefix}.mlp.fc2.b": (d,),
    }
    if cross:
        names[f"{prefix}.norm_kv.g"] = (d,)
        names[f"{prefix}.norm_kv.b"] = (d,)
    return names


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Stable name -> shape map for every tensor in a parameter set."""
    d, ds = cfg.d_spec, cfg.d_spat
    shapes: dict[str, tuple[int, ...]] = {
        "proj.w": (cfg.patch * cfg.patch, d),
        "proj.b": (d,),
        "spec_reps": (cfg.n_reps, d),
        "wavelength_pe.b": (d // 2,),
    }
    for i in range(cfg.depth_spec):
        shapes.update(_attn_param_names(f"spec.{i}.self", d, cfg.mlp_ratio, cross=False))
        shapes.update(_attn_param_names(f"spec.{i}.cross", d, cfg.mlp_ratio, cross=True))
    shapes.update({
        "transition.norm.g": (d,), "transition.norm.b": (d,),
        "transition.w": (d, ds), "transition.b": (ds,),
    })
    for i in range(cfg.depth_spat):
        shapes.update(_attn_param_names(f"spat.{i}", ds, cfg.mlp_ratio, cross=False))
    shapes.update({"norm.g": (ds,), "norm.b": (ds,)})
    if cfg.n_classes is not None:
        shapes.update({"head.w": (ds, cfg.n_classes), "head.b": (cfg.n_classes,)})
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Initialize every named parameter from the model init stream.

    The wavelength frequency bank is stored alongside the weights but is
    frozen (requires_grad False) and never optimized.
    """
    rng = stream(seed, "init")
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if name == "wavelength_pe.b":
            data = rng.normal(0.0, cfg.sigma, size=shape)
            params[name] = Tensor(data, requires_grad=False)
        elif name == "spec_reps":
            params[name] = Tensor(truncated_normal(rng, shape, std=_REP_STD),
                                  requires_grad=True)
        elif name.endswith(".w"):
            params[name] = Tensor(truncated_normal(rng, shape, std=_INIT_STD),
                                  requires_grad=True)
        elif name.endswith(".g"):
            params[name] = Tensor(np.ones(shape), requires_grad=True)
        else:  # biases
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
    return params


def wavelength_encoder(cfg: ModelConfig, params: dict[str, Tensor]) -> WavelengthEncoder:
    return WavelengthEncoder(cfg.d_spec, sigma=cfg.sigma, alpha=cfg.alpha,
                             b=params["wavelength_pe.b"].data)


def _heads_split(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _heads_merge(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _attention(p: dict[str, Tensor], prefix: str, q_in: Tensor, kv_in: Tensor,
               heads: int) -> Tensor:
    q = T.linear(q_in, p[f"{prefix}.q.w"], p[f"{prefix}.q.b"])
    k = T.linear(kv_in, p[f"{prefix}.k.w"], p[f"{prefix}.k.b"])
    v = T.linear(kv_in, p[f"{prefix}.v.w"], p[f"{prefix}.v.b"])
    dh = q.shape[-1] // heads
    qh, kh, vh = _heads_split(q, heads), _heads_split(k, heads), _heads_split(v, heads)
    scores = T.mul_scalar(T.matmul(qh, T.swap_last2(kh)), 1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    out = _heads_merge(T.matmul(attn, vh))
    return T.linear(out, p[f"{prefix}.proj.w"], p[f"{prefix}.proj.b"])


def _mlp(p: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    h = T.gelu(T.linear(x, p[f"{prefix}.mlp.fc1.w"], p[f"{prefix}.mlp.fc1.b"]))
    return T.linear(h, p[f"{prefix}.mlp.fc2.w"], p[f"{prefix}.mlp.fc2.b"])


def self_attn_block(p: dict[str, Tensor], prefix: str, x: Tensor, heads: int) -> Tensor:
    """Pre-norm transformer block: x + attn(norm(x)), then x + mlp(norm(x))."""
    normed = T.layer_norm(x, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"])
    x = T.add(x, _attention(p, prefix, normed, normed, heads))
    normed2 = T.layer_norm(x, p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"])
    return T.add(x, _mlp(p, prefix, normed2))


def cross_attn_block(p: dict[str, Tensor], prefix: str, queries: Tensor,
                     context: Tensor, heads: int) -> Tensor:
    """Pre-norm cross-attention: queries read from context, then MLP."""
    qn = T.layer_norm(queries, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"])
    cn = T.layer_norm(context, p[f"{prefix}.norm_kv.g"], p[f"{prefix}.norm_kv.b"])
    queries = T.add(queries, _attention(p, prefix, qn, cn, heads))
    normed2 = T.layer_norm(queries, p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"])
    return T.add(queries, _mlp(p, prefix, normed2))


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, C) -> (hw, C, patch*patch) non-overlapping patch pixels."""
    h, w, c = image.shape
    if h % patch or w % patch:
        raise ValidationError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = image.reshape(gh, patch, gw, patch, c)
    # (gh, gw, C, patch, patch) -> rows are row-major grid cells
    x = x.transpose(0, 2, 4, 1, 3).reshape(gh * gw, c, patch * patch)
    return x


def patchify_project(params: dict[str, Tensor], cfg: ModelConfig,
                     image: np.ndarray) -> Tensor:
    """Shared projection of every channel's patches: (hw, C, D)."""
    patches = patchify(image, cfg.patch)
    return T.linear(Tensor(patches), params["proj.w"], params["proj.b"])


def _spectral_core(params: dict[str, Tensor], cfg: ModelConfig,
                   x: Tensor) -> tuple[Tensor, Tensor]:
    """Alternating self-/cross-attention over already-positioned tokens."""
    n, _, d = x.shape
    reps = T.add(params["spec_reps"], Tensor(discrete_pe(cfg.n_reps, cfg.d_spec)))
    reps = T.broadcast_to(T.reshape(reps, (1, cfg.n_reps, d)), (n, cfg.n_reps, d))
    for i in range(cfg.depth_spec):
        x = self_attn_block(params, f"spec.{i}.self", x, cfg.heads)
        reps = cross_attn_block(params, f"spec.{i}.cross", reps, x, cfg.heads)
    return reps, x


def spectral_forward(params: dict[str, Tensor], cfg: ModelConfig,
                     patch_tokens: Tensor, wavelengths_nm) -> tuple[Tensor, Tensor]:
    """Run the spectral encoder over (N, C, D) channel tokens.

    Returns (reps (N, K, D), tokens (N, C, D)); the final tokens double as
    self-supervision targets. N is any flattened batch-of-patches axis.
    """
    n, c, d = patch_tokens.shape
    if c == 0:
        raise ValidationError("spectral encoder needs at least one channel")
    wavelengths_nm = np.asarray(wavelengths_nm, dtype=np.float64).reshape(-1)
    if wavelengths_nm.shape[0] != c:
        raise ShapeError(f"{wavelengths_nm.shape[0]} wavelengths for {c} channels")
    pe = wavelength_encoder(cfg, params).encode(wavelengths_nm)
    x = T.add(patch_tokens, Tensor(pe[None, :, :]))
    return _spectral_core(params, cfg, x)


def aggregate(reps: Tensor) -> Tensor:
    """Summation readout over the K axis: (..., K, D) -> (..., D)."""
    return T.tsum(reps, axis=-2)


def transition(params: dict[str, Tensor], cfg: ModelConfig, agg: Tensor,
               grid: tuple[int, int] | None = None) -> Tensor:
    """Norm + linear into the spatial width; adds 2D grid encoding when the
    patch-grid shape is given (rows of agg in row-major cell order)."""
    x = T.layer_norm(agg, params["transition.norm.g"], params["transition.norm.b"])
    x = T.linear(x, params["transition.w"], params["transition.b"])
    if grid is not None:
        gh, gw = grid
        pe = grid_pe(gh, gw, cfg.d_spat)
        x = T.add(x, Tensor(pe if x.ndim == 2 else pe[None]))
    return x


def spatial_forward(params: dict[str, Tensor], cfg: ModelConfig, x: Tensor) -> Tensor:
    """Spatial transformer over (..., hw, D) patch features, final norm."""
    if x.ndim == 2:
        x = T.reshape(x, (1,) + x.shape)
        squeeze = True
    else:
        squeeze = False
    for i in range(cfg.depth_spat):
        x = self_attn_block(params, f"spat.{i}", x, cfg.heads)
    x = T.layer_norm(x, params["norm.g"], params["norm.b"])
    return T.reshape(x, x.shape[1:]) if squeeze else x


def forward(params: dict[str, Tensor], cfg: ModelConfig, image: np.ndarray,
            wavelengths_nm, head: str = "features") -> Tensor:
    """Full pass for one image.

    head: 'features' (hw, D); 'patch_logits' (hw, n_classes);
    'image_logits' (n_classes,) via global mean pooling.
    """
    h, w, _ = image.shape
    grid = (h // cfg.patch, w // cfg.patch)
    tokens = patchify_project(params, cfg, image)
    reps, _ = spectral_forward(params, cfg, tokens, wavelengths_nm)
    x = transition(params, cfg, aggregate(reps), grid=grid)
    feats = spatial_forward(params, cfg, x)
    if head == "features":
        return feats
    if cfg.n_classes is None:
        raise ValidationError("model has no classifier head (n_classes unset)")
    if head == "patch_logits":
        return T.linear(feats, params["head.w"], params["head.b"])
    if head == "image_logits":
        pooled = T.tmean(feats, axis=0)
        logits = T.linear(T.reshape(pooled, (1, -1)), params["head.w"], params["head.b"])
        return T.reshape(logits, (cfg.n_classes,))
    raise ValidationError(f"unknown head {head!r}")


def forward_batch(params: dict[str, Tensor], cfg: ModelConfig,
                  images: np.ndarray, wavelengths_nm: np.ndarray,
                  head: str = "features") -> Tensor:
    """Vectorized pass over (B, H, W, C) images sharing one channel count.

    Wavelengths are per image, (B, C). Output carries a leading batch axis:
    features/patch_logits (B, hw, .), image_logits (B, n_classes).
    """
    b, h, w, c = images.shape
    grid = (h // cfg.patch, w // cfg.patch)
    hw = grid[0] * grid[1]
    wavelengths_nm = np.asarray(wavelengths_nm, dtype=np.float64)
    if wavelengths_nm.shape != (b, c):
        raise ShapeError(f"need (B, C) wavelengths, got {wavelengths_nm.shape}")
    patches = np.stack([patchify(images[i], cfg.patch) for i in range(b)])
    tokens = T.linear(Tensor(patches.reshape(b * hw, c, -1)),
                      params["proj.w"], params["proj.b"])
    enc = wavelength_encoder(cfg, params)
    pe = np.stack([enc.encode(wavelengths_nm[i]) for i in range(b)])
    pe = np.repeat(pe, hw, axis=0)  # per-image rows for every patch
    x = T.add(tokens, Tensor(pe))
    reps, _ = _spectral_core(params, cfg, x)
    agg = T.reshape(aggregate(reps), (b, hw, cfg.d_spec))
    feats = spatial_forward(params, cfg, transition(params, cfg, agg, grid=grid))
    if head == "features":
        return feats
    if cfg.n_classes is None:
        raise ValidationError("model has no classifier head (n_classes unset)")
    if head == "patch_logits":
        return T.linear(feats, params["head.w"], params["head.b"])
    if head == "image_logits":
        pooled = T.tmean(feats, axis=1)
        return T.linear(pooled, params["head.w"], params["head.b"])
    raise ValidationError(f"unknown head {head!r}")


def upsample_patch_labels(patch_values: np.ndarray, grid: tuple[int, int],
                          patch: int) -> np.ndarray:
    """Nearest-neighbor upsample of per-patch values to pixel resolution."""
    gh, gw = grid
    per_patch = patch_values.reshape(gh, gw, *patch_values.shape[1:])
    return np.repeat(np.repeat(per_patch, patch, axis=0), patch, axis=1)


def channel_subsample(image: np.ndarray, wavelengths_nm: np.ndarray, max_c: int,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Keep at most max_c channels, distinct, in original wavelength order."""
    if max_c < 1:
        raise ValidationError(f"max_c must be >= 1, got {max_c}")
    c = image.shape[2]
    if c <= max_c:
        return image, wavelengths_nm
    idx = np.sort(rng.choice(c, size=max_c, replace=False))
    return image[:, :, idx], np.asarray(wavelengths_nm)[idx]


def flop_estimate(cfg: ModelConfig, c: int, hw: int) -> dict[str, float]:
    """Analytic multiply-accumulate counts for one forward pass.

    Spectral self-attention is quadratic in C, cross-attention linear in C,
    the spatial stage independent of C.
    """
    d, ds, k = cfg.d_spec, cfg.d_spat, cfg.n_reps
    mlp = 2 * cfg.mlp_ratio  # fc1 + fc2 MACs per token, in units of d^2
    self_block = hw * ((4 + mlp) * c * d * d + 2 * c * c * d)
    cross_block = hw * (2 * c * d * d + (2 + mlp) * k * d * d + 2 * c * k * d)
    spat_block = (4 + mlp) * hw * ds * ds + 2 * hw * hw * ds
    projection = hw * c * cfg.patch * cfg.patch * d
    trans = hw * d * ds
    out = {
        "projection": float(projection),
        "spectral_self_attn": float(cfg.depth_spec * self_block),
        "spectral_cross_attn": float(cfg.depth_spec * cross_block),
        "transition": float(trans),
        "spatial": float(cfg.depth_spat * spat_block),
    }
    out["total"] = sum(out.values())
    return out


def params_digest(params: dict[str, Tensor]) -> str:
    """Content hash of a parameter set (names, shapes, and exact bytes)."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(params):
        arr = params[name].data
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()

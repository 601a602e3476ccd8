"""Joint-embedding self-supervised pretraining.

A student/teacher pair of the full model is trained by masking part of the
student's input and predicting the teacher's features at the masked
locations, along two axes at once: spectral (hide a block of channels,
predict the teacher's final channel tokens) and spatial (hide rectangular
patch blocks, predict the teacher's spatial features). Both predictions are
scored with a variance/invariance/covariance loss; the teacher is an
exponential moving average of the student and never receives gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .encoding import grid_pe
from .errors import NumericError, ValidationError
from .optim import AdamWState, adamw_init, adamw_step, zero_grads
from .rng import stream, truncated_normal
from .tensor import Tensor

HYPERSPECTRAL_MIN_CHANNELS = 17   # above this, ratio-based channel masks
MASK_RATIO_LO = 0.15
MASK_RATIO_HI = 0.30
MULTISPECTRAL_MASK_SIZES = (2, 3)
BLOCK_AREA_LO = 0.30
BLOCK_AREA_HI = 0.50
BLOCK_ASPECT = (0.75, 1.5)
VAR_EPS = 1e-4
COV_WEIGHT = 0.05
MOMENTUM_START = 0.996
MOMENTUM_END = 1.0
SSL_MAX_CHANNELS = 64
PREDICTOR_DEPTH = 3


# ---------------------------------------------------------------------------
# masks


@dataclass
class SpectralMask:
    masked: np.ndarray   # sorted channel indices hidden from the student
    kept: np.ndarray     # complement, original order

    @property
    def n_masked(self) -> int:
        return int(self.masked.size)


def _mask_lengths(c: int, kind: str) -> list[int]:
    if kind == "auto":
        kind = "hyperspectral" if c > HYPERSPECTRAL_MIN_CHANNELS - 1 else "multispectral"
    if kind == "hyperspectral":
        lo = int(np.ceil(MASK_RATIO_LO * c))
        hi = int(np.floor(MASK_RATIO_HI * c))
    elif kind == "multispectral":
        lo, hi = MULTISPECTRAL_MASK_SIZES[0], MULTISPECTRAL_MASK_SIZES[-1]
    else:
        raise ValidationError(f"unknown mask kind {kind!r}")
    lengths = [n for n in range(max(lo, 1), hi + 1) if n < c]
    if not lengths:
        raise ValidationError(f"no admissible mask length for C={c} ({kind})")
    return lengths


def sample_channel_mask(c: int, kind: str, rng: np.random.Generator,
                        style: str = "contiguous") -> SpectralMask:
    """Sample the channels hidden from the student.

    kind: 'hyperspectral' (single block, 15-30% of channels),
    'multispectral' (2-3 channels), or 'auto' (by channel count).
    style 'scatter' draws the same sizes as non-contiguous subsets.
    """
    if c < 3:
        raise ValidationError(f"channel masking needs C >= 3, got {c}")
    lengths = _mask_lengths(c, kind)
    if style == "contiguous":
        pairs = [(start, n) for n in lengths for start in range(c - n + 1)]
        start, n = pairs[int(rng.integers(len(pairs)))]
        masked = np.arange(start, start + n)
    elif style == "scatter":
        n = lengths[int(rng.integers(len(lengths)))]
        masked = np.sort(rng.choice(c, size=n, replace=False))
    else:
        raise ValidationError(f"unknown mask style {style!r}")
    kept = np.setdiff1d(np.arange(c), masked)
    return SpectralMask(masked=masked, kept=kept)


@dataclass
class BlockMaskPair:
    targets: list[np.ndarray]   # two target blocks, flat patch indices
    context: np.ndarray         # complement of their union

    @property
    def target_union(self) -> np.ndarray:
        return np.unique(np.concatenate(self.targets))


def _admissible_blocks(h: int, w: int) -> list[tuple[int, int]]:
    area = h * w
    lo = int(np.ceil(BLOCK_AREA_LO * area))
    hi = int(np.floor(BLOCK_AREA_HI * area))
    dims = []
    for bh in range(1, h + 1):
        for bw in range(1, w + 1):
            if lo <= bh * bw <= hi and BLOCK_ASPECT[0] <= bh / bw <= BLOCK_ASPECT[1]:
                dims.append((bh, bw))
    return dims


def sample_block_mask_pair(h: int, w: int, rng: np.random.Generator) -> BlockMaskPair:
    """Two rectangular target blocks, each 30-50% of the grid area, with a
    nonempty context left over."""
    if h * w < 8:
        raise ValidationError(f"patch grid {h}x{w} too small for block masking")
    dims = _admissible_blocks(h, w)
    if not dims:
        raise ValidationError(f"no admissible block shape on a {h}x{w} grid")
    flat = np.arange(h * w).reshape(h, w)
    for _ in range(100):
        targets = []
        for _ in range(2):
            bh, bw = dims[int(rng.integers(len(dims)))]
            r0 = int(rng.integers(h - bh + 1))
            c0 = int(rng.integers(w - bw + 1))
            targets.append(flat[r0:r0 + bh, c0:c0 + bw].reshape(-1))
        union = np.unique(np.concatenate(targets))
        if union.size < h * w:
            context = np.setdiff1d(np.arange(h * w), union)
            return BlockMaskPair(targets=targets, context=context)
    raise ValidationError(f"could not sample a nonempty context on {h}x{w}")


# ---------------------------------------------------------------------------
# loss


def vicreg_loss(pred: Tensor, target: np.ndarray) -> tuple[Tensor, dict[str, float]]:
    """Invariance + variance + 0.05 * covariance over (B, N, D) predictions.

    The target is a constant (teacher output); variance uses the population
    estimator across the batch axis, covariance the 1/(B-1) estimator.
    """
    if pred.ndim != 3:
        raise ValidationError(f"expected (B, N, D) predictions, got {pred.shape}")
    b, n, d = pred.shape
    if b < 2:
        raise ValidationError(f"batch covariance undefined for B={b}")
    if target.shape != pred.shape:
        raise ValidationError(f"target shape {target.shape} != pred {pred.shape}")

    diff = pred - Tensor(target)
    inv = T.tmean(T.mul(diff, diff))

    centered = pred - T.tmean(pred, axis=0, keepdims=True)
    var = T.tmean(T.mul(centered, centered), axis=0)          # (N, D) population
    hinge = T.relu(add1(-T.sqrt(add_eps(var))))
    var_term = T.tmean(hinge)

    per_n = T.transpose(centered, (1, 0, 2))                  # (N, B, D)
    cov = T.mul_scalar(T.matmul(T.transpose(per_n, (0, 2, 1)), per_n), 1.0 / (b - 1))
    off_diag = T.mul(cov, Tensor(1.0 - np.eye(d)))
    cov_term = T.mul_scalar(T.tsum(T.mul(off_diag, off_diag)), 1.0 / (n * d))

    total = T.add(T.add(inv, var_term), T.mul_scalar(cov_term, COV_WEIGHT))
    parts = {"inv": inv.item(), "var": var_term.item(), "cov": cov_term.item(),
             "total": total.item()}
    return total, parts


def add_eps(x: Tensor) -> Tensor:
    return T.add_scalar(x, VAR_EPS)


def add1(x: Tensor) -> Tensor:
    return T.add_scalar(x, 1.0)


# ---------------------------------------------------------------------------
# predictors


def predictor_shapes(d: int, depth: int = PREDICTOR_DEPTH, mlp_ratio: int = 4):
    shapes = {"token": (d,)}
    for i in range(depth):
        shapes.update(M._attn_param_names(f"blk.{i}", d, mlp_ratio, cross=False))
    # final norm + linear head: predictions must reach the teacher's
    # unnormalized feature scale
    shapes.update({"norm.g": (d,), "norm.b": (d,), "out.w": (d, d), "out.b": (d,)})
    return shapes


def init_predictor(d: int, seed: int, label: str,
                   depth: int = PREDICTOR_DEPTH) -> dict[str, Tensor]:
    rng = stream(seed, "predictor", label)
    params: dict[str, Tensor] = {}
    for name, shape in predictor_shapes(d, depth).items():
        if name.endswith(".w") or name == "token":
            params[name] = Tensor(truncated_normal(rng, shape, std=0.02),
                                  requires_grad=True)
        elif name.endswith(".g"):
            params[name] = Tensor(np.ones(shape), requires_grad=True)
        else:
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
    return params


def _predictor_depth(params: dict[str, Tensor]) -> int:
    return 1 + max(int(k.split(".")[1]) for k in params if k.startswith("blk."))


def predictor_forward(params: dict[str, Tensor], context: Tensor,
                      mask_pe: np.ndarray, heads: int) -> Tensor:
    """Run a predictor over [context tokens, mask tokens] and return the
    outputs at the mask positions.

    context: (B, N, D); mask_pe: (n_masked, D) positional rows identifying
    what to predict. Mask tokens are copies of one learned embedding plus
    their positional encoding.
    """
    if mask_pe.ndim != 2 or mask_pe.shape[0] == 0:
        raise ValidationError("predictor needs at least one mask position")
    b, n, d = context.shape
    n_mask = mask_pe.shape[0]
    tok = T.add(T.reshape(params["token"], (1, 1, d)), Tensor(mask_pe[None]))
    tok = T.broadcast_to(tok, (b, n_mask, d))
    x = T.concat([context, tok], axis=1)
    for i in range(_predictor_depth(params)):
        x = M.self_attn_block(params, f"blk.{i}", x, heads)
    x = T.layer_norm(x, params["norm.g"], params["norm.b"])
    x = T.linear(x, params["out.w"], params["out.b"])
    return T.take(x, np.arange(n, n + n_mask), axis=1)


# ---------------------------------------------------------------------------
# teacher update


def momentum_at(step: int, total: int, start: float = MOMENTUM_START,
                end: float = MOMENTUM_END) -> float:
    if total <= 0:
        raise ValidationError("total steps must be positive")
    frac = min(max(step / total, 0.0), 1.0)
    return start + (end - start) * frac


def ema_update(teacher: dict[str, Tensor], student: dict[str, Tensor],
               m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, for every named weight."""
    if teacher.keys() != student.keys():
        raise ValidationError("teacher/student parameter names differ")
    for name, t in teacher.items():
        s = student[name]
        if t.data.shape != s.data.shape:
            raise ValidationError(f"shape mismatch for {name}: "
                                  f"{t.data.shape} vs {s.data.shape}")
        t.data *= m
        t.data += (1.0 - m) * s.data


# ---------------------------------------------------------------------------
# pretraining state and step


@dataclass
class PretrainState:
    cfg: M.ModelConfig
    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    pred_spec: dict[str, Tensor]
    pred_spat: dict[str, Tensor]
    opt: AdamWState
    seed: int
    total_steps: int
    step: int = 0
    mask_style: str = "contiguous"
    last_report: dict = field(default_factory=dict)

    def trainable(self) -> dict[str, Tensor]:
        merged: dict[str, Tensor] = {}
        for prefix, group in (("student", self.student), ("pred_spec", self.pred_spec),
                              ("pred_spat", self.pred_spat)):
            for k, v in group.items():
                merged[f"{prefix}.{k}"] = v
        return merged


def new_pretrain_state(cfg: M.ModelConfig, seed: int, total_steps: int,
                       mask_style: str = "contiguous") -> PretrainState:
    student = M.init_params(cfg, seed)
    teacher = {k: Tensor(v.data.copy()) for k, v in student.items()}
    pred_spec = init_predictor(cfg.d_spec, seed, "spectral")
    pred_spat = init_predictor(cfg.d_spat, seed, "spatial")
    state = PretrainState(cfg=cfg, student=student, teacher=teacher,
                          pred_spec=pred_spec, pred_spat=pred_spat,
                          opt=AdamWState(), seed=seed, total_steps=total_steps,
                          mask_style=mask_style)
    state.opt = adamw_init(state.trainable())
    return state


def downsample_channels(image: np.ndarray, wavelengths_nm: np.ndarray,
                        target: int = SSL_MAX_CHANNELS) -> tuple[np.ndarray, np.ndarray]:
    """Uniform-stride channel selection down to `target` channels."""
    c = image.shape[2]
    if c <= target:
        return image, wavelengths_nm
    idx = (np.arange(target) * c) // target
    return image[:, :, idx], np.asarray(wavelengths_nm)[idx]


def _batch_tokens(params: dict[str, Tensor], cfg: M.ModelConfig,
                  images: np.ndarray) -> Tensor:
    """(B, H, W, C) batch -> (B*hw, C, D) projected patch tokens."""
    b = images.shape[0]
    patches = np.stack([M.patchify(images[i], cfg.patch) for i in range(b)])
    hw = patches.shape[1]
    flat = patches.reshape(b * hw, patches.shape[2], patches.shape[3])
    return T.linear(Tensor(flat), params["proj.w"], params["proj.b"])


def pretrain_step(state: PretrainState, images: np.ndarray,
                  wavelengths_nm: np.ndarray, lr: float,
                  weight_decay: float = 0.04) -> dict:
    """One training step over a camera-homogeneous batch (B, H, W, C).

    Follows the joint recipe: teacher encodes the full input (no gradient);
    the student sees spectrally and spatially masked views; two predictors
    fill in the teacher's features at the hidden locations; both losses
    backpropagate through student and predictors; the teacher then takes an
    EMA step toward the student.
    """
    cfg = state.cfg
    if images.ndim != 4:
        raise ValidationError(f"expected (B, H, W, C) batch, got {images.shape}")
    b, h, w, c = images.shape
    if b < 2:
        raise ValidationError("pretraining needs batch size >= 2")
    gh, gw = h // cfg.patch, w // cfg.patch
    hw = gh * gw
    wavelengths_nm = np.asarray(wavelengths_nm, dtype=np.float64)

    mask_rng = stream(state.seed, "masks", state.step)
    smask = sample_channel_mask(c, "auto", mask_rng, style=state.mask_style)
    bmask = sample_block_mask_pair(gh, gw, mask_rng)
    target_idx = bmask.target_union

    enc = M.wavelength_encoder(cfg, state.student)

    # teacher targets from the complete input
    with T.no_grad():
        t_tokens = _batch_tokens(state.teacher, cfg, images)
        t_reps, t_chan = M.spectral_forward(state.teacher, cfg, t_tokens, wavelengths_nm)
        target_spec = t_chan.data[:, smask.masked, :]
        t_spat_in = T.reshape(M.aggregate(t_reps), (b, hw, cfg.d_spec))
        t_feats = M.spatial_forward(state.teacher, cfg,
                                    M.transition(state.teacher, cfg, t_spat_in,
                                                 grid=(gh, gw)))
        target_spat = t_feats.data[:, target_idx, :]

    # student: spectral path on the kept channels only
    s_tokens = _batch_tokens(state.student, cfg, images)
    kept_tokens = T.take(s_tokens, smask.kept, axis=1)
    s_reps, _ = M.spectral_forward(state.student, cfg, kept_tokens,
                                   wavelengths_nm[smask.kept])
    spec_hat = predictor_forward(state.pred_spec, s_reps,
                                 enc.encode(wavelengths_nm[smask.masked]), cfg.heads)
    loss_spec, spec_parts = vicreg_loss(spec_hat, target_spec)

    # student: spatial path on the context patches only
    s_spat_in = T.reshape(M.aggregate(s_reps), (b, hw, cfg.d_spec))
    s_grid = M.transition(state.student, cfg, s_spat_in, grid=(gh, gw))
    ctx_feats = M.spatial_forward(state.student, cfg,
                                  T.take(s_grid, bmask.context, axis=1))
    pe_rows = grid_pe(gh, gw, cfg.d_spat)[target_idx]
    spat_hat = predictor_forward(state.pred_spat, ctx_feats, pe_rows, cfg.heads)
    loss_spat, spat_parts = vicreg_loss(spat_hat, target_spat)

    loss = T.add(loss_spec, loss_spat)
    if not np.isfinite(loss.item()):
        raise NumericError(f"non-finite pretraining loss at step {state.step}")

    trainable = state.trainable()
    zero_grads(trainable)
    T.backward(loss)
    adamw_step(trainable, None, state.opt, lr, weight_decay=weight_decay)
    m = momentum_at(state.step, state.total_steps)
    ema_update(state.teacher, state.student, m)
    state.step += 1

    report = {
        "loss": loss.item(),
        "loss_spec": spec_parts["total"], "spec_inv": spec_parts["inv"],
        "spec_var": spec_parts["var"], "spec_cov": spec_parts["cov"],
        "loss_spat": spat_parts["total"], "spat_inv": spat_parts["inv"],
        "spat_var": spat_parts["var"], "spat_cov": spat_parts["cov"],
        "lr": lr, "momentum": m,
        "channels_total": c, "channels_student": int(smask.kept.size),
        "channels_masked": smask.n_masked,
        "context_patches": int(bmask.context.size),
        "target_patches": int(target_idx.size),
    }
    state.last_report = report
    return report

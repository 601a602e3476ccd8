"""Training loops, feature extraction, and checkpoint wiring.

Every source of per-step randomness (batch choice, channel subsampling,
masks) is keyed by (seed, purpose, step), so resuming from a checkpoint
replays the exact uninterrupted run.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as M
from . import ssl as S
from . import tensor as T
from .dataio import (Corpus, SpectralImage, load_checkpoint, save_checkpoint)
from .datagen import group_by_camera
from .errors import NumericError, ValidationError
from .evalprobe import patch_majority_labels
from .optim import AdamWState, adamw_init, adamw_step, cosine_lr, zero_grads
from .rng import stream
from .tensor import Tensor

from .dataio import UNLABELED


# ---------------------------------------------------------------------------
# feature extraction


def extract_features(params: dict[str, Tensor], cfg: M.ModelConfig,
                     image: np.ndarray, wavelengths_nm, layer: str = "spatial") -> np.ndarray:
    """Frozen per-patch features: 'spatial' (after the spatial encoder) or
    'spectral' (aggregated representations before the transition)."""
    with T.no_grad():
        if layer == "spatial":
            return M.forward(params, cfg, image, wavelengths_nm, head="features").data
        if layer == "spectral":
            tokens = M.patchify_project(params, cfg, image)
            reps, _ = M.spectral_forward(params, cfg, tokens, wavelengths_nm)
            return M.aggregate(reps).data
    raise ValidationError(f"unknown feature layer {layer!r}")


def corpus_features(params: dict[str, Tensor], cfg: M.ModelConfig, corpus: Corpus,
                    entries, layer: str = "spatial", max_channels: int | None = None,
                    seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Patch features, patch labels, and camera ids for a list of entries."""
    feats, labels, cameras = [], [], []
    camera_ids = sorted({e.camera for e in entries})
    for i, entry in enumerate(entries):
        img = corpus.load(entry)
        data, wl = img.data, img.wavelengths_nm
        if max_channels is not None:
            data, wl = M.channel_subsample(data, wl, max_channels,
                                           stream(seed, "probe-subsample", i))
        feats.append(extract_features(params, cfg, data, wl, layer=layer))
        labels.append(patch_majority_labels(img.labels, cfg.patch))
        cameras.append(np.full(feats[-1].shape[0], camera_ids.index(entry.camera)))
    return np.concatenate(feats), np.concatenate(labels), np.concatenate(cameras)


# ---------------------------------------------------------------------------
# loss helpers


def supervised_loss(params: dict[str, Tensor], cfg: M.ModelConfig,
                    image: np.ndarray, wavelengths_nm, patch_labels: np.ndarray,
                    use_dice: bool = False) -> Tensor:
    logits = M.forward(params, cfg, image, wavelengths_nm, head="patch_logits")
    loss = T.cross_entropy(logits, patch_labels, ignore_index=UNLABELED)
    if use_dice:
        loss = T.mul_scalar(T.add(loss, _soft_dice(logits, patch_labels, cfg.n_classes)), 0.5)
    return loss


def _soft_dice(logits: Tensor, labels: np.ndarray, n_classes: int) -> Tensor:
    keep = np.flatnonzero(labels != UNLABELED)
    if keep.size == 0:
        raise ValidationError("dice loss: every label is ignored")
    probs = T.softmax(T.take(logits, keep, axis=0), axis=-1)
    onehot = np.zeros((keep.size, n_classes))
    onehot[np.arange(keep.size), labels[keep].astype(int)] = 1.0
    present = np.flatnonzero(onehot.sum(axis=0) > 0)
    inter = T.take(T.reshape(T.tsum(T.mul(probs, Tensor(onehot)), axis=0), (1, -1)),
                   present, axis=1)
    denom = T.take(T.reshape(T.add(T.tsum(probs, axis=0),
                                   Tensor(onehot.sum(axis=0))), (1, -1)),
                   present, axis=1)
    dice = T.mul(T.mul_scalar(inter, 2.0), reciprocal(denom))
    return T.add_scalar(T.mul_scalar(T.tmean(dice), -1.0), 1.0)


def reciprocal(x: Tensor) -> Tensor:
    data = 1.0 / x.data
    return T._wrap(data, (x,), lambda g: (-g * data * data,))


# ---------------------------------------------------------------------------
# supervised training


@dataclass
class TrainState:
    cfg: M.ModelConfig
    params: dict[str, Tensor]
    opt: AdamWState
    seed: int
    total_steps: int
    step: int = 0


def new_train_state(cfg: M.ModelConfig, seed: int, total_steps: int) -> TrainState:
    if cfg.n_classes is None:
        raise ValidationError("supervised training needs n_classes in the config")
    params = M.init_params(cfg, seed)
    return TrainState(cfg=cfg, params=params, opt=adamw_init(params), seed=seed,
                      total_steps=total_steps)


class _ImageCache:
    def __init__(self, corpus: Corpus):
        self.corpus = corpus
        self._cache: dict[str, SpectralImage] = {}

    def get(self, entry) -> SpectralImage:
        if entry.path not in self._cache:
            self._cache[entry.path] = self.corpus.load(entry)
        return self._cache[entry.path]


def train_step(state: TrainState, cache: _ImageCache, entries, lr: float,
               batch: int, max_channels: int, weight_decay: float,
               use_dice: bool = False) -> float:
    """One step: sample a batch, group images by channel count so each group
    runs as a single vectorized pass, average cross-entropy over every
    labeled patch in the batch."""
    rng = stream(state.seed, "batch", state.step)
    picks = rng.integers(0, len(entries), size=batch)
    groups: dict[int, list] = {}
    for slot, idx in enumerate(picks):
        img = cache.get(entries[int(idx)])
        data, wl = M.channel_subsample(
            img.data, img.wavelengths_nm, max_channels,
            stream(state.seed, "subsample", state.step, slot))
        labels = patch_majority_labels(img.labels, state.cfg.patch)
        groups.setdefault(data.shape[2], []).append((data, wl, labels))

    zero_grads(state.params)
    group_losses = []
    total_labeled = 0
    for c in sorted(groups):
        items = groups[c]
        images = np.stack([it[0] for it in items])
        wavelengths = np.stack([it[1] for it in items])
        labels = np.concatenate([it[2] for it in items])
        logits = M.forward_batch(state.params, state.cfg, images, wavelengths,
                                 head="patch_logits")
        logits = T.reshape(logits, (labels.size, state.cfg.n_classes))
        loss = T.cross_entropy(logits, labels, ignore_index=UNLABELED)
        if use_dice:
            loss = T.mul_scalar(
                T.add(loss, _soft_dice(logits, labels, state.cfg.n_classes)), 0.5)
        n_labeled = int((labels != UNLABELED).sum())
        group_losses.append((loss, n_labeled))
        total_labeled += n_labeled
    total = group_losses[0][0] if len(group_losses) == 1 else None
    if total is None:
        total = group_losses[0][0] * (group_losses[0][1] / total_labeled)
        for loss, n in group_losses[1:]:
            total = T.add(total, loss * (n / total_labeled))
    value = total.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite training loss at step {state.step}")
    T.backward(total)
    adamw_step(state.params, None, state.opt, lr, weight_decay=weight_decay)
    state.step += 1
    return float(value)


def run_training(state: TrainState, corpus: Corpus, out_dir, steps: int,
                 batch: int = 8, lr0: float = 1e-3, lr_final: float = 1e-5,
                 weight_decay: float = 0.04, max_channels: int = 32,
                 use_dice: bool = False, log_every: int = 1,
                 checkpoint_every: int = 0) -> Path:
    """Train for `steps` more steps, appending to loss.csv in out_dir and
    saving train.ckpt at the end (and every checkpoint_every steps)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = corpus.split("train")
    if not entries:
        raise ValidationError("no train entries in manifest")
    cache = _ImageCache(corpus)
    csv_path = out_dir / "loss.csv"
    new_file = not csv_path.exists()
    ckpt_path = out_dir / "train.ckpt"
    with open(csv_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["step", "loss", "lr"])
        while state.step < steps:
            step_idx = state.step
            lr = cosine_lr(step_idx, state.total_steps, lr0, lr_final)
            loss = train_step(state, cache, entries, lr, batch, max_channels,
                              weight_decay, use_dice)
            if step_idx % log_every == 0 or step_idx == steps - 1:
                writer.writerow([step_idx, repr(loss), repr(lr)])
            if checkpoint_every and state.step % checkpoint_every == 0:
                save_train_checkpoint(ckpt_path, state)
    save_train_checkpoint(ckpt_path, state)
    return ckpt_path


def save_train_checkpoint(path, state: TrainState) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, p in state.params.items():
        tensors[f"model.{name}"] = p.data
    for name, arr in state.opt.m.items():
        tensors[f"opt.m.{name}"] = arr
    for name, arr in state.opt.v.items():
        tensors[f"opt.v.{name}"] = arr
    meta = {"kind": "supervised", "config": state.cfg.to_dict(), "seed": state.seed,
            "step": state.step, "total_steps": state.total_steps, "opt_t": state.opt.t,
            "rng": {"root_seed": state.seed}}
    save_checkpoint(path, meta, tensors)


def _restore_params(cfg: M.ModelConfig, tensors: dict[str, np.ndarray],
                    prefix: str) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for name, shape in M.param_shapes(cfg).items():
        key = f"{prefix}.{name}"
        if key not in tensors:
            raise ValidationError(f"checkpoint missing tensor {key}")
        arr = tensors[key]
        if arr.shape != shape:
            raise ValidationError(f"checkpoint tensor {key} has shape {arr.shape}, "
                                  f"config wants {shape}")
        params[name] = Tensor(arr.copy(), requires_grad=name != "wavelength_pe.b")
    return params


def _restore_opt(trainable: dict[str, Tensor], tensors: dict[str, np.ndarray],
                 opt_t: int) -> AdamWState:
    opt = AdamWState(t=opt_t)
    for name, p in trainable.items():
        if not p.requires_grad:
            continue
        for slot, store in (("m", opt.m), ("v", opt.v)):
            key = f"opt.{slot}.{name}"
            if key not in tensors:
                raise ValidationError(f"checkpoint missing tensor {key}")
            if tensors[key].shape != p.data.shape:
                raise ValidationError(f"checkpoint tensor {key} shape mismatch")
            store[name] = tensors[key].copy()
    return opt


def load_train_checkpoint(path) -> TrainState:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "supervised":
        raise ValidationError(f"{path}: not a supervised checkpoint")
    cfg = M.ModelConfig.from_dict(meta["config"])
    params = _restore_params(cfg, tensors, "model")
    state = TrainState(cfg=cfg, params=params, opt=AdamWState(), seed=meta["seed"],
                       total_steps=meta["total_steps"], step=meta["step"])
    state.opt = _restore_opt(params, tensors, meta["opt_t"])
    return state


# ---------------------------------------------------------------------------
# self-supervised pretraining


def _camera_groups(corpus: Corpus):
    """Camera -> (stacked image array list, shared wavelengths), with
    hyperspectral inputs downsampled to the SSL channel budget."""
    groups = {}
    for camera, entries in sorted(group_by_camera(corpus, "train").items()):
        arrays, wavelengths = [], None
        for e in entries:
            img = corpus.load(e)
            data, wl = S.downsample_channels(img.data, img.wavelengths_nm)
            if wavelengths is None:
                wavelengths = wl
            elif not np.array_equal(wavelengths, wl):
                raise ValidationError(f"camera group {camera} mixes wavelength sets")
            arrays.append(data)
        groups[camera] = (arrays, wavelengths)
    if not groups:
        raise ValidationError("no train entries in manifest")
    return groups


PRETRAIN_CSV_FIELDS = ["step", "loss", "loss_spec", "spec_inv", "spec_var", "spec_cov",
                       "loss_spat", "spat_inv", "spat_var", "spat_cov", "lr", "momentum"]


def run_pretraining(state: S.PretrainState, corpus: Corpus, out_dir, steps: int,
                    batch: int = 8, lr0: float = 1e-3, lr_final: float = 1e-6,
                    weight_decay: float = 0.04, log_every: int = 1,
                    checkpoint_every: int = 0) -> Path:
    if batch < 2:
        raise ValidationError("pretraining batch size must be >= 2")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups = _camera_groups(corpus)
    keys = sorted(groups)
    csv_path = out_dir / "pretrain.csv"
    new_file = not csv_path.exists()
    ckpt_path = out_dir / "pretrain.ckpt"
    with open(csv_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(PRETRAIN_CSV_FIELDS)
        while state.step < steps:
            step_idx = state.step
            rng = stream(state.seed, "batch", step_idx)
            arrays, wavelengths = groups[keys[int(rng.integers(len(keys)))]]
            picks = rng.integers(0, len(arrays), size=batch)
            images = np.stack([arrays[int(i)] for i in picks])
            lr = cosine_lr(step_idx, state.total_steps, lr0, lr_final)
            report = S.pretrain_step(state, images, wavelengths, lr,
                                     weight_decay=weight_decay)
            if step_idx % log_every == 0 or step_idx == steps - 1:
                writer.writerow([step_idx]
                                + [repr(float(report[k])) for k in PRETRAIN_CSV_FIELDS[1:]])
            if checkpoint_every and state.step % checkpoint_every == 0:
                save_pretrain_checkpoint(ckpt_path, state)
    save_pretrain_checkpoint(ckpt_path, state)
    return ckpt_path


def save_pretrain_checkpoint(path, state: S.PretrainState) -> None:
    tensors: dict[str, np.ndarray] = {}
    for prefix, group in (("student", state.student), ("teacher", state.teacher),
                          ("pred_spec", state.pred_spec), ("pred_spat", state.pred_spat)):
        for name, p in group.items():
            tensors[f"{prefix}.{name}"] = p.data
    for name, arr in state.opt.m.items():
        tensors[f"opt.m.{name}"] = arr
    for name, arr in state.opt.v.items():
        tensors[f"opt.v.{name}"] = arr
    meta = {"kind": "pretrain", "config": state.cfg.to_dict(), "seed": state.seed,
            "step": state.step, "total_steps": state.total_steps, "opt_t": state.opt.t,
            "mask_style": state.mask_style, "rng": {"root_seed": state.seed}}
    save_checkpoint(path, meta, tensors)


def load_pretrain_checkpoint(path) -> S.PretrainState:
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "pretrain":
        raise ValidationError(f"{path}: not a pretraining checkpoint")
    cfg = M.ModelConfig.from_dict(meta["config"])
    student = _restore_params(cfg, tensors, "student")
    teacher_raw = _restore_params(cfg, tensors, "teacher")
    teacher = {k: Tensor(v.data) for k, v in teacher_raw.items()}

    def restore_pred(prefix: str, d: int) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, shape in S.predictor_shapes(d).items():
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise ValidationError(f"checkpoint missing tensor {key}")
            if tensors[key].shape != shape:
                raise ValidationError(f"checkpoint tensor {key} shape mismatch")
            params[name] = Tensor(tensors[key].copy(), requires_grad=True)
        return params

    state = S.PretrainState(cfg=cfg, student=student, teacher=teacher,
                            pred_spec=restore_pred("pred_spec", cfg.d_spec),
                            pred_spat=restore_pred("pred_spat", cfg.d_spat),
                            opt=AdamWState(), seed=meta["seed"],
                            total_steps=meta["total_steps"], step=meta["step"],
                            mask_style=meta.get("mask_style", "contiguous"))
    state.opt = _restore_opt(state.trainable(), tensors, meta["opt_t"])
    return state


def load_any_params(path) -> tuple[M.ModelConfig, dict[str, Tensor]]:
    """Model weights from either checkpoint kind (student for pretrain)."""
    meta, tensors = load_checkpoint(path)
    cfg = M.ModelConfig.from_dict(meta["config"])
    prefix = "model" if meta.get("kind") == "supervised" else "student"
    return cfg, _restore_params(cfg, tensors, prefix)

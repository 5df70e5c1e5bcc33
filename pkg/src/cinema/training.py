"""Pre-training and fine-tuning loops.

Covers the learning-rate schedule, the AdamW parameter partition, gradient
clipping, early stopping, augmentation, checkpoints, and the three
fine-tuning arms (pre-trained encoder, random init, UNet baseline).
"""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from . import metrics
from .backbone import CineMA, ModelConfig, MultiViewEncoder, masked_mse, sample_mask_pattern
from .dataio import read_container, write_container
from .heads import (
    N_LANDMARKS,
    N_SEG_CLASSES,
    CoordinateModel,
    HeatmapModel,
    LinearModel,
    SegmentationModel,
    ce_label_smooth,
    dice_ce,
    landmark_heatmaps,
    mse,
    wing,
)
from .unet import UNET_WIDTHS, UNetModel

TASKS = ("pretrain", "segmentation", "classification", "regression", "landmark_heatmap", "landmark_coord")
DENSE_TASKS = ("segmentation", "landmark_heatmap")
ARMS = ("finetune", "randinit", "unet")
# favourable direction of each validation metric
METRIC_SIGN = {"MCC": 1.0, "Dice": 1.0, "AbsErr": -1.0, "L2": -1.0}
TASK_METRIC = {
    "segmentation": "Dice",
    "classification": "MCC",
    "regression": "AbsErr",
    "landmark_heatmap": "L2",
    "landmark_coord": "L2",
}

# (epochs, warmup, end_lr, validation frequency) from the recipe table
_RECIPES = {
    "pretrain": (800, 10, 1e-6, 0),
    "classification": (800, 10, 1e-5, 20),
    "regression": (800, 10, 1e-5, 20),
    "segmentation": (4000, 50, 1e-5, 100),
    "landmark_heatmap": (400, 10, 1e-5, 20),
    "landmark_coord": (400, 10, 1e-5, 20),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    task: str
    epochs: int
    warmup_epochs: int
    peak_lr: float = 1e-3
    end_lr: float = 1e-5
    batch_size: int = 64
    weight_decay: float = 0.05
    grad_clip_norm: float = 5.0
    label_smoothing: float = 0.1
    validation_frequency: int = 20
    validation_patience: int = 5
    validation_metric: str | None = None
    seed: int = 0
    augment: bool = True
    gamma_range: tuple[float, float] = (0.7, 1.5)
    rotation_deg: float = 15.0
    zoom_range: tuple[float, float] = (0.9, 1.1)
    shear_deg: float = 5.0
    shift_px: float = 10.0
    dropout_prob: float = 0.1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need 0 <= warmup_epochs < epochs")
        if not self.peak_lr > self.end_lr > 0:
            raise ConfigError("need peak_lr > end_lr > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.validation_patience < 1:
            raise ConfigError("validation_patience must be at least 1")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive")
        if self.task != "pretrain":
            if self.validation_metric != TASK_METRIC[self.task]:
                raise ConfigError(f"task {self.task} is validated with {TASK_METRIC[self.task]}, not {self.validation_metric}")
            if self.validation_frequency < 1:
                raise ConfigError("validation_frequency must be positive")
        for name in ("gamma_range", "zoom_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 < low <= high")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


def recipe(task: str, **overrides) -> TrainConfig:
    """Default recipe for ``task``; keyword arguments override single fields."""
    if task not in _RECIPES:
        raise ConfigError(f"unknown task {task!r}")
    epochs, warmup, end_lr, freq = _RECIPES[task]
    base = dict(
        task=task,
        epochs=epochs,
        warmup_epochs=warmup,
        end_lr=end_lr,
        batch_size=128 if task == "pretrain" else 64,
        validation_frequency=freq,
        validation_metric=TASK_METRIC.get(task),
    )
    base.update(overrides)
    return TrainConfig.from_dict(base)


# ---------------------------------------------------------------------------
# schedule and optimisation


def lr_schedule(step: int, total_steps: int, warmup_steps: int, peak_lr: float, end_lr: float) -> float:
    """Linear warm-up from 0 to ``peak_lr``, then half-cosine down to ``end_lr``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    span = total_steps - warmup_steps
    frac = (step - warmup_steps) / span if span else 1.0
    return end_lr + 0.5 * (peak_lr - end_lr) * (1.0 + math.cos(math.pi * frac))


def effective_batch_size(requested: int, n_samples: int) -> int:
    """``requested``, or the largest power of two not above ``n_samples`` when the data is smaller."""
    if n_samples < 1:
        raise ValueError("empty dataset")
    if n_samples >= requested:
        return requested
    return 1 << (n_samples.bit_length() - 1)


def decay_parameter_names(model: nn.Module) -> list[str]:
    """Transformer block weight matrices; biases, norms and conv stems are excluded."""
    return [n for n, p in model.named_parameters() if "blocks." in n and p.ndim >= 2 and p.requires_grad]


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.AdamW:
    decay = set(decay_parameter_names(model))
    groups = [
        {"params": [p for n, p in model.named_parameters() if n in decay], "weight_decay": config.weight_decay},
        {"params": [p for n, p in model.named_parameters() if n not in decay and p.requires_grad], "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=0.0, betas=(0.9, 0.95))


def clip_gradients(model: nn.Module, max_norm: float) -> float:
    """Rescale gradients to global norm ``max_norm``; returns the pre-clip norm."""
    params = [p for p in model.parameters() if p.grad is not None]
    return float(torch.nn.utils.clip_grad_norm_(params, max_norm))


class EarlyStopping:
    """Track the best validation score; stop after ``patience`` evaluations without improvement.

    Improvement means at least ``min_delta`` better in the metric's
    favourable direction.
    """

    def __init__(self, metric: str, patience: int, min_delta: float = 1e-6):
        if metric not in METRIC_SIGN:
            raise ValueError(f"unknown metric {metric!r}")
        self.sign = METRIC_SIGN[metric]
        self.patience = patience
        self.min_delta = min_delta
        self.best: float | None = None
        self.best_eval = -1
        self.best_state = None
        self.n_evals = 0
        self.bad_evals = 0

    def update(self, value: float, state=None) -> bool:
        """Record one evaluation; returns True when training should stop."""
        if self.best is None or self.sign * (value - self.best) >= self.min_delta:
            self.best, self.best_eval, self.bad_evals = float(value), self.n_evals, 0
            self.best_state = copy.deepcopy(state)
        else:
            self.bad_evals += 1
        self.n_evals += 1
        return self.bad_evals >= self.patience


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    gamma: float = 1.0
    rotation: float = 0.0  # radians
    zoom: float = 1.0
    shear: float = 0.0  # radians
    shift: tuple[float, float] = (0.0, 0.0)  # pixels

    @property
    def is_identity(self) -> bool:
        return self == AugmentParams()


def sample_augment(config: TrainConfig, rng: np.random.Generator) -> AugmentParams:
    rot, shear = np.deg2rad(config.rotation_deg), np.deg2rad(config.shear_deg)
    return AugmentParams(
        gamma=float(rng.uniform(*config.gamma_range)),
        rotation=float(rng.uniform(-rot, rot)),
        zoom=float(rng.uniform(*config.zoom_range)),
        shear=float(rng.uniform(-shear, shear)),
        shift=tuple(float(s) for s in rng.uniform(-config.shift_px, config.shift_px, size=2)),
    )


def affine_matrix(params: AugmentParams) -> np.ndarray:
    """In-plane forward map (input pixel -> output pixel) about the image centre."""
    c, s = np.cos(params.rotation), np.sin(params.rotation)
    rot = np.array([[c, -s], [s, c]])
    shear = np.array([[1.0, np.tan(params.shear)], [0.0, 1.0]])
    return params.zoom * rot @ shear


def _warp(image: np.ndarray, params: AugmentParams, order: int) -> np.ndarray:
    A = affine_matrix(params)
    inv = np.linalg.inv(A)
    c = (np.asarray(image.shape[:2], float) - 1) / 2
    offset = c - inv @ (c + np.asarray(params.shift))
    if image.ndim == 2:
        return ndimage.affine_transform(image, inv, offset, order=order, mode="constant", cval=0.0)
    out = np.empty_like(image)
    for k in range(image.shape[2]):
        out[..., k] = ndimage.affine_transform(image[..., k], inv, offset, order=order, mode="constant", cval=0.0)
    return out


def transform_landmarks(landmarks_mm: np.ndarray, params: AugmentParams, shape, spacing) -> np.ndarray:
    """Map mm landmarks through the same in-plane affine applied to the image."""
    sp = np.asarray(spacing[:2], float)
    c = (np.asarray(shape[:2], float) - 1) / 2
    px = np.asarray(landmarks_mm, float) / sp - 0.5
    out = (px - c) @ affine_matrix(params).T + c + np.asarray(params.shift)
    return (out + 0.5) * sp


def augment_view(image, params: AugmentParams, mask=None, landmarks=None, spacing=None):
    """Gamma then affine on one view; masks (nearest) and landmarks follow the image.

    Returns ``(image, mask, landmarks)``; absent targets come back as None.
    """
    image = np.asarray(image, dtype=np.float32)
    if params.is_identity:
        return image, mask, landmarks
    out = np.clip(image, 0.0, 1.0) ** params.gamma
    geometric = dataclasses.replace(params, gamma=1.0) != AugmentParams()
    if geometric:
        out = _warp(out, params, order=1)
        if mask is not None:
            mask = _warp(np.asarray(mask), params, order=0).astype(np.asarray(mask).dtype)
        if landmarks is not None:
            landmarks = transform_landmarks(landmarks, params, image.shape, spacing)
    return out.astype(np.float32), mask, landmarks


def drop_slices(image: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Zero whole SAX slices independently with probability ``prob``."""
    if image.ndim < 3 or prob <= 0:
        return image
    keep = rng.random(image.shape[2]) >= prob
    return image * keep.astype(image.dtype)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    kind: str  # "pretrain" or "finetune"
    model: dict  # everything needed to rebuild the module
    weights: dict[str, np.ndarray]
    train_config: dict | None = None
    optimizer: dict | None = None
    rng_state: dict | None = None
    torch_rng: np.ndarray | None = None
    step: int = 0
    epoch: int = 0
    extra: dict = field(default_factory=dict)


def _weight_key(name: str) -> str:
    return "head/" + name[5:] if name.startswith("head.") else "weights/" + name


def _state_name(key: str) -> str:
    return "head." + key[5:] if key.startswith("head/") else key[len("weights/"):]


def state_to_numpy(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays = {_weight_key(k): v for k, v in ckpt.weights.items()}
    meta = {
        "kind": ckpt.kind,
        "model": ckpt.model,
        "train_config": ckpt.train_config,
        "rng_state": ckpt.rng_state,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "extra": ckpt.extra,
    }
    if ckpt.optimizer is not None:
        meta["optimizer_groups"] = ckpt.optimizer["param_groups"]
        for idx, st in ckpt.optimizer["state"].items():
            for name, t in st.items():
                arrays[f"optim/{idx}/{name}"] = t.detach().cpu().numpy()
    if ckpt.torch_rng is not None:
        arrays["rng/torch"] = ckpt.torch_rng
    write_container(arrays, path, meta=meta)


def load_checkpoint(path) -> Checkpoint:
    arrays = read_container(path)
    meta = arrays.meta
    weights = {_state_name(k): v for k, v in arrays.items() if k.startswith(("weights/", "head/"))}
    optimizer = None
    if "optimizer_groups" in meta:
        state: dict[int, dict] = {}
        for k, v in arrays.items():
            if k.startswith("optim/"):
                _, idx, name = k.split("/")
                state.setdefault(int(idx), {})[name] = torch.as_tensor(v)
        optimizer = {"state": state, "param_groups": meta["optimizer_groups"]}
    return Checkpoint(
        kind=meta["kind"],
        model=meta["model"],
        weights=weights,
        train_config=meta.get("train_config"),
        optimizer=optimizer,
        rng_state=meta.get("rng_state"),
        torch_rng=arrays.get("rng/torch"),
        step=meta.get("step", 0),
        epoch=meta.get("epoch", 0),
        extra=meta.get("extra", {}),
    )


def _load_weights(module: nn.Module, weights: dict[str, np.ndarray], strict: bool = True) -> None:
    ref = module.state_dict()
    state = {k: torch.as_tensor(v, dtype=ref[k].dtype) for k, v in weights.items() if k in ref}
    missing = sorted(set(ref) - set(state))
    if strict and missing:
        raise KeyError(f"checkpoint lacks weights for {missing[:5]}")
    module.load_state_dict(state, strict=strict)


# ---------------------------------------------------------------------------
# pre-training


@dataclass
class TrainResult:
    model: nn.Module
    history: list[dict]
    checkpoint: Checkpoint
    best_metric: float | None = None


def _seed_all(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def pretrain(
    model_config: ModelConfig,
    config: TrainConfig,
    studies: Sequence,
    *,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    log: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Masked-reconstruction training on whole cine studies.

    Every step draws one random phase per study and a fresh mask. The final
    epoch's weights are kept. ``stop_after`` ends the run after that many
    optimiser steps (the schedule still spans the full run) so it can be
    resumed later from the returned checkpoint.
    """
    if config.task != "pretrain":
        raise ConfigError("pretrain needs a config with task='pretrain'")
    for s in studies:
        missing = [v for v in model_config.view_ids if s.images.get(v) is None]
        if missing:
            raise ValueError(f"pre-training requires every view; study lacks {missing}")
    rng = _seed_all(config.seed)
    model = CineMA(model_config)
    bs = effective_batch_size(config.batch_size, len(studies))
    per_epoch = len(studies) // bs
    total, warm = config.epochs * per_epoch, config.warmup_epochs * per_epoch
    opt = make_optimizer(model, config)
    step, start_epoch, order = 0, 0, None
    if resume is not None:
        _load_weights(model, resume.weights)
        opt.load_state_dict(resume.optimizer)
        rng.bit_generator.state = resume.rng_state
        torch.set_rng_state(torch.as_tensor(resume.torch_rng))
        step, start_epoch = resume.step, resume.epoch
        order = np.asarray(resume.extra["order"]) if "order" in resume.extra else None
    history = []
    model.train()
    for epoch in range(start_epoch, config.epochs):
        if order is None or step % per_epoch == 0:
            order = rng.permutation(len(studies))
        for b in range(step % per_epoch, per_epoch):
            if stop_after is not None and step >= stop_after:
                return TrainResult(model, history, _pretrain_ckpt(model, config, opt, rng, step, epoch, order))
            batch = {v: [] for v in model_config.view_ids}
            for i in order[b * bs : (b + 1) * bs]:
                s = studies[i]
                t = int(rng.integers(s.n_phases))
                for v in model_config.view_ids:
                    img = s.images[v][..., t]
                    if config.augment:
                        img = augment_view(img, sample_augment(config, rng))[0]
                    batch[v].append(img)
            images = {v: torch.as_tensor(np.stack(x), dtype=torch.float32).unsqueeze(1) for v, x in batch.items()}
            pattern = sample_mask_pattern(model_config, bs, rng)
            lr = lr_schedule(step, total, warm, config.peak_lr, config.end_lr)
            for g in opt.param_groups:
                g["lr"] = lr
            loss = masked_mse(model(images, pattern), images, pattern, model_config)
            opt.zero_grad()
            loss.backward()
            norm = clip_gradients(model, config.grad_clip_norm)
            opt.step()
            rec = {"step": step, "epoch": epoch, "lr": lr, "loss": loss.item(), "grad_norm": norm}
            history.append(rec)
            if log:
                log(rec)
            step += 1
    return TrainResult(model, history, _pretrain_ckpt(model, config, opt, rng, step, config.epochs, order))


def _pretrain_ckpt(model, config, opt, rng, step, epoch, order) -> Checkpoint:
    return Checkpoint(
        kind="pretrain",
        model={"model_config": model.config.to_dict()},
        weights=state_to_numpy(model),
        train_config=config.to_dict(),
        optimizer=copy.deepcopy(opt.state_dict()),
        rng_state=rng.bit_generator.state,
        torch_rng=torch.get_rng_state().numpy().copy(),
        step=step,
        epoch=epoch,
        extra={"order": [int(i) for i in order]},
    )


@torch.no_grad()
def reconstruction_loss(model: CineMA, studies: Sequence, phase: int = 0, seed: int = 0) -> float:
    """Masked MSE at a fixed phase under a fixed mask; a stable yardstick across training."""
    cfg = model.config
    rng = np.random.default_rng(seed)
    images = {
        v: torch.as_tensor(np.stack([s.images[v][..., phase] for s in studies]), dtype=torch.float32).unsqueeze(1)
        for v in cfg.view_ids
    }
    pattern = sample_mask_pattern(cfg, len(studies), rng)
    was_training = model.training
    model.eval()
    loss = float(masked_mse(model(images, pattern), images, pattern, cfg))
    model.train(was_training)
    return loss


def encoder_from_pretrain(ckpt: Checkpoint, views: Sequence[str] | None = None) -> MultiViewEncoder:
    """Rebuild the encoder of a pre-training checkpoint, keeping only ``views``."""
    if ckpt.kind != "pretrain":
        raise ValueError("expected a pre-training checkpoint")
    enc = MultiViewEncoder(ModelConfig.from_dict(ckpt.model["model_config"]))
    weights = {k[len("encoder."):]: v for k, v in ckpt.weights.items() if k.startswith("encoder.")}
    _load_weights(enc, weights)
    if views is not None:
        missing = [v for v in views if v not in enc.view_ids]
        if missing:
            raise ValueError(f"checkpoint has no encoder branch for {missing}")
        enc.drop_views(views)
    return enc


# ---------------------------------------------------------------------------
# fine-tuning data


@dataclass
class Example:
    """One fine-tuning sample.

    ``frames`` holds one or more time frames, each a view -> image mapping.
    ``target`` is a mask, a ``(3, 2)`` landmark array in mm, or a scalar.
    """

    frames: list[dict[str, np.ndarray]]
    target: object
    spacing: tuple[float, ...]
    subject: str = ""


def _phases(study, which) -> list[int]:
    if which == "all":
        return list(range(study.n_phases))
    if which == "edes":
        return [int(study.meta.get("ed_phase", 0)), int(study.meta.get("es_phase", study.n_phases // 2))]
    return [int(t) for t in which]


def segmentation_examples(studies, view: str = "sax", phases="edes", subjects=None) -> list[Example]:
    out = []
    for i, s in enumerate(studies):
        if not s.gt_masks or view not in s.gt_masks:
            raise ValueError(f"study {i} has no {view} mask")
        for t in _phases(s, phases):
            out.append(Example([{view: s.images[view][..., t]}], s.gt_masks[view][..., t], s.spacing(view), _subject(subjects, i)))
    return out


def landmark_examples(studies, view: str = "lax_4c", phases="edes", subjects=None) -> list[Example]:
    out = []
    for i, s in enumerate(studies):
        if not s.gt_landmarks or view not in s.gt_landmarks:
            raise ValueError(f"study {i} has no {view} landmarks")
        for t in _phases(s, phases):
            out.append(Example([{view: s.images[view][..., t]}], s.gt_landmarks[view][t], s.spacing(view), _subject(subjects, i)))
    return out


def scalar_examples(studies, targets, views=("sax",), frames="edes", subjects=None) -> list[Example]:
    """Scalar targets (EF, a class index, ...) from the given frames of each study."""
    if len(targets) != len(studies):
        raise ValueError("one target per study is required")
    out = []
    for i, (s, y) in enumerate(zip(studies, targets)):
        fr = [{v: s.images[v][..., t] for v in views} for t in _phases(s, frames)]
        out.append(Example(fr, float(y), s.spacing(views[0]), _subject(subjects, i)))
    return out


def _subject(subjects, i) -> str:
    return str(subjects[i]) if subjects is not None else f"subject_{i:04d}"


def _augment_example(ex: Example, task: str, config: TrainConfig, rng: np.random.Generator) -> Example:
    params = {v: sample_augment(config, rng) for v in ex.frames[0]}
    frames, target = [], ex.target
    for fr in ex.frames:
        new = {}
        for v, img in fr.items():
            if task == "segmentation":
                img, target, _ = augment_view(img, params[v], mask=ex.target)
                img = drop_slices(img, config.dropout_prob, rng)
            elif task in ("landmark_heatmap", "landmark_coord"):
                img, _, target = augment_view(img, params[v], landmarks=ex.target, spacing=ex.spacing)
            else:
                img = augment_view(img, params[v])[0]
            new[v] = img
        frames.append(new)
    if task in ("landmark_heatmap", "landmark_coord"):
        shape = np.asarray(next(iter(frames[0].values())).shape[:2])
        px = np.asarray(target) / np.asarray(ex.spacing[:2]) - 0.5
        if np.any(px < -0.5) or np.any(px > shape - 0.5):
            return ex  # the draw pushed a landmark off the grid; keep the sample unaugmented
    return Example(frames, target, ex.spacing, ex.subject)


# ---------------------------------------------------------------------------
# fine-tuning models


def build_task_model(spec: dict, encoder: MultiViewEncoder | None = None) -> nn.Module:
    """Assemble a model from its description (as stored in checkpoints)."""
    task, arm, views = spec["task"], spec["arm"], list(spec["views"])
    if task in DENSE_TASKS and len(views) != 1:
        raise ValueError("dense tasks use exactly one view")
    n_out = spec.get("n_out") or (N_SEG_CLASSES if task == "segmentation" else N_LANDMARKS)
    if arm == "unet":
        if task not in DENSE_TASKS:
            raise ValueError("the UNet baseline covers segmentation and heatmap tasks only")
        return UNetModel(views[0], n_out, views[0] == "sax", tuple(spec.get("unet_widths", UNET_WIDTHS)))
    if encoder is None:
        encoder = MultiViewEncoder(ModelConfig.from_dict(spec["model_config"]))
        encoder.drop_views(views)
    channels = tuple(spec.get("head_channels", (64, 32, 16, 16)))
    if task == "segmentation":
        return SegmentationModel(encoder, views[0], n_out, channels)
    if task == "landmark_heatmap":
        return HeatmapModel(encoder, views[0], channels)
    n_frames = int(spec.get("n_frames", 1))
    if task == "landmark_coord":
        model = CoordinateModel(encoder, n_frames)
    else:
        model = LinearModel(encoder, int(spec.get("n_out") or 1), n_frames)
    model.register_buffer("out_shift", torch.zeros(model.head.fc.out_features))
    model.register_buffer("out_scale", torch.ones(model.head.fc.out_features))
    return model


def _frames_tensor(examples: Sequence[Example], views) -> list[dict[str, torch.Tensor]]:
    n_frames = len(examples[0].frames)
    return [
        {v: torch.as_tensor(np.stack([ex.frames[f][v] for ex in examples]), dtype=torch.float32).unsqueeze(1) for v in views}
        for f in range(n_frames)
    ]


def _forward(model: nn.Module, task: str, examples: Sequence[Example], views) -> torch.Tensor:
    frames = _frames_tensor(examples, views)
    if task in DENSE_TASKS:
        return model(frames[0][views[0]])
    raw = model(frames)
    return raw * model.out_scale + model.out_shift


def _loss(model, task: str, out: torch.Tensor, examples: Sequence[Example], config: TrainConfig) -> torch.Tensor:
    if task == "segmentation":
        y = torch.as_tensor(np.stack([ex.target for ex in examples]).astype(np.int64))
        return dice_ce(out, y)
    if task == "landmark_heatmap":
        shape = out.shape[2:]
        y = np.stack([landmark_heatmaps(ex.target, shape, ex.spacing[:2]) for ex in examples])
        return dice_ce(out, torch.as_tensor(y, dtype=out.dtype), activation="sigmoid")
    if task == "landmark_coord":
        y = torch.as_tensor(np.stack([np.asarray(ex.target).reshape(-1) for ex in examples]), dtype=out.dtype)
        return wing(out, y)
    y = torch.as_tensor([ex.target for ex in examples], dtype=out.dtype)
    if task == "regression":
        scale = model.out_scale
        return mse((out - model.out_shift) / scale, (y[:, None] - model.out_shift) / scale)
    if out.shape[-1] == 1:
        return ce_label_smooth(out, y[:, None], config.label_smoothing)
    return ce_label_smooth(out, y.long(), config.label_smoothing)


@torch.no_grad()
def predict(model: nn.Module, task: str, examples: Sequence[Example], batch_size: int = 16) -> list:
    """Per-example predictions: label masks, ``(3, 2)`` mm landmarks or scalars."""
    model.eval()
    views = _model_views(model)
    out = []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i : i + batch_size]
        pred = _forward(model, task, chunk, views)
        for ex, p in zip(chunk, pred):
            if task == "segmentation":
                out.append(p.argmax(0).numpy().astype(np.uint8))
            elif task == "landmark_heatmap":
                out.append(metrics.heatmap_to_landmarks(torch.sigmoid(p).numpy(), ex.spacing[:2]))
            elif task == "landmark_coord":
                out.append(p.numpy().reshape(N_LANDMARKS, 2).astype(float))
            elif task == "classification":
                out.append(int(p[0] > 0) if p.numel() == 1 else int(p.argmax()))
            else:
                out.append(float(p[0]))
    return out


def _model_views(model) -> list[str]:
    if hasattr(model, "view"):
        return [model.view]
    return list(model.encoder.view_ids)


def score(task: str, preds: Sequence, examples: Sequence[Example]) -> float:
    """The task's validation metric (Dice, MCC, absolute error or L2 in mm)."""
    if task == "segmentation":
        return float(np.mean([[metrics.dice(p, ex.target, c) for c in (1, 2, 3)] for p, ex in zip(preds, examples)]))
    if task in ("landmark_heatmap", "landmark_coord"):
        return float(np.mean([metrics.landmark_error(p, ex.target).mean() for p, ex in zip(preds, examples)]))
    if task == "regression":
        return metrics.mean_absolute_error(preds, [ex.target for ex in examples])
    counts = metrics.ConfusionCounts.from_labels(preds, [ex.target for ex in examples])
    mcc = metrics.classification_metrics(counts, strict=False)["mcc"]
    return 0.0 if np.isnan(mcc) else mcc


def finetune(
    task: str,
    train: Sequence[Example],
    val: Sequence[Example],
    config: TrainConfig,
    *,
    arm: str = "finetune",
    pretrained: Checkpoint | None = None,
    model_config: ModelConfig | None = None,
    n_out: int | None = None,
    unet_widths=UNET_WIDTHS,
    head_channels=(64, 32, 16, 16),
    log: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train a task model and keep the weights of its best validation evaluation.

    ``arm`` selects the starting point: the pre-trained encoder
    (``pretrained`` checkpoint), a randomly initialised encoder
    (``model_config``) or the UNet baseline.
    """
    if task not in TASK_METRIC or config.task != task:
        raise ConfigError(f"config task {config.task!r} does not match {task!r}")
    if arm not in ARMS:
        raise ConfigError(f"unknown arm {arm!r}")
    if not train:
        raise ValueError("empty training split")
    if not val:
        raise ValueError("empty validation split")
    views = list(train[0].frames[0])
    for ex in list(train) + list(val):
        if any(list(fr) != views for fr in ex.frames):
            raise ValueError(f"examples mix views; expected {views}")
    rng = _seed_all(config.seed)
    encoder = None
    if arm == "finetune":
        if pretrained is None:
            raise ValueError("the finetune arm needs a pre-training checkpoint")
        encoder = encoder_from_pretrain(pretrained, views)
        model_config = ModelConfig.from_dict(pretrained.model["model_config"])
    elif arm == "randinit":
        if model_config is None:
            raise ValueError("the randinit arm needs a model config")
        encoder = MultiViewEncoder(model_config)
        encoder.drop_views(views)
    spec = {
        "task": task,
        "arm": arm,
        "views": views,
        "n_out": n_out,
        "n_frames": len(train[0].frames),
        "unet_widths": list(unet_widths),
        "head_channels": list(head_channels),
        "model_config": model_config.to_dict() if model_config is not None else None,
    }
    model = build_task_model(spec, encoder)
    if task in ("regression", "landmark_coord"):
        y = np.stack([np.asarray(ex.target, float).reshape(-1) for ex in train])
        model.out_shift.copy_(torch.as_tensor(y.mean(0), dtype=torch.float32))
        if task == "regression":
            model.out_scale.copy_(torch.as_tensor(np.maximum(y.std(0), 1e-6), dtype=torch.float32))

    bs = effective_batch_size(config.batch_size, len(train))
    per_epoch = len(train) // bs
    total, warm = config.epochs * per_epoch, config.warmup_epochs * per_epoch
    opt = make_optimizer(model, config)
    stopper = EarlyStopping(config.validation_metric, config.validation_patience)
    history, step = [], 0
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(len(train))
        for b in range(per_epoch):
            chunk = [train[i] for i in order[b * bs : (b + 1) * bs]]
            if config.augment:
                chunk = [_augment_example(ex, task, config, rng) for ex in chunk]
            lr = lr_schedule(step, total, warm, config.peak_lr, config.end_lr)
            for g in opt.param_groups:
                g["lr"] = lr
            loss = _loss(model, task, _forward(model, task, chunk, views), chunk, config)
            opt.zero_grad()
            loss.backward()
            clip_gradients(model, config.grad_clip_norm)
            opt.step()
            rec = {"step": step, "epoch": epoch, "lr": lr, "loss": loss.item()}
            step += 1
            history.append(rec)
            if log:
                log(rec)
        if (epoch + 1) % config.validation_frequency == 0 or epoch + 1 == config.epochs:
            value = score(task, predict(model, task, val), val)
            rec = {"step": step, "epoch": epoch, "val_metric": config.validation_metric, "val": value}
            history.append(rec)
            if log:
                log(rec)
            if stopper.update(value, model.state_dict()):
                break
    model.load_state_dict(stopper.best_state)
    model.eval()
    ckpt = Checkpoint(
        kind="finetune",
        model=spec,
        weights=state_to_numpy(model),
        train_config=config.to_dict(),
        step=step,
        epoch=epoch + 1,
        extra={"best_metric": stopper.best, "best_eval": stopper.best_eval},
    )
    return TrainResult(model, history, ckpt, stopper.best)


def model_from_checkpoint(ckpt: Checkpoint) -> nn.Module:
    """Rebuild a fine-tuned model for inference."""
    if ckpt.kind != "finetune":
        raise ValueError("expected a fine-tuning checkpoint")
    model = build_task_model(ckpt.model)
    _load_weights(model, ckpt.weights)
    model.eval()
    return model

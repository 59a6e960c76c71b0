"""Separate and end-to-end training of the SR pipeline with its detector."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import yaml

from .adversary import (DiscriminatorConfig, FeatureConfig, FeatureExtractor, build_discriminator,
                        weight_hash)
from .detector import DetectorConfig, build_detector, detect
from .edge_enhance import EENConfig, EENOutput, build_een
from .evaluation import EvalReport, ap_iou_curve
from .imaging import bicubic_upsample
from .losses import (LossBreakdown, LossWeights, adversarial_losses, assemble, consistency_losses,
                     content_loss, perceptual_loss)
from .sr_generator import ConfigError, RRDBConfig, build_generator
from .synthdata import AUGMENT_OPS, AnnotatedTile, augment

log = logging.getLogger(__name__)

MODES = ("separate", "end_to_end")
DETECTOR_INPUTS = ("sr", "hr", "bicubic")
CHECKPOINT_FORMAT = "eesrdet-checkpoint"
CHECKPOINT_VERSION = 1
# config sections that determine tensor shapes / network semantics
ARCH_KEYS = ("scale", "detector_input", "generator", "een", "discriminator", "detector", "features")


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "separate"
    detector_input: str = "sr"
    scale: int = 4
    lr: float = 1e-4
    lr_halving_interval: int = 50_000
    batch_size: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    max_steps: int = 1000
    # end-to-end runs start with this many separate steps; no paper default
    pretrain_steps: int = 0
    seed: int = 0
    augment: bool = True
    val_every: int = 0
    checkpoint_every: int = 0
    eval_score_thresh: float = 0.05
    eval_nms_iou: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    generator: RRDBConfig = field(default_factory=RRDBConfig)
    een: EENConfig = field(default_factory=EENConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}, got {self.mode!r}")
        if self.detector_input not in DETECTOR_INPUTS:
            raise ConfigError(f"detector_input: expected one of {DETECTOR_INPUTS}, got {self.detector_input!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr: must be > 0, got {self.lr}")
        if self.lr_halving_interval < 1:
            raise ConfigError("lr_halving_interval: must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        return _from_dict(cls, data, "")

    def with_overrides(self, **kw) -> "TrainConfig":
        merged = _deep_merge(self.to_dict(), kw)
        return TrainConfig.from_dict(merged)


def _deep_merge(base: dict, over: Mapping) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _to_tuple(v):
    return tuple(_to_tuple(x) for x in v) if isinstance(v, (list, tuple)) else v


def _from_dict(cls, data: Mapping, prefix: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{prefix}{sorted(unknown)[0]}: unknown config key")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _from_dict(hint, value, f"{prefix}{name}.")
        else:
            kwargs[name] = _to_tuple(value)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(prefix) else f"{prefix}{msg}") from None
    except TypeError as exc:
        raise ConfigError(f"{prefix}: {exc}") from None


def load_config(path: str | Path | None, overrides: Mapping | None = None) -> TrainConfig:
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data = {k: v for k, v in data.items() if k not in ("data", "run")}
    return TrainConfig.from_dict(_deep_merge(data, overrides or {}))


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    return cfg.lr * 0.5 ** (step // cfg.lr_halving_interval)


# --------------------------------------------------------------------------- state

@dataclass
class TrainState:
    cfg: TrainConfig
    step: int
    generator: nn.Module | None
    een: nn.Module | None
    discriminator: nn.Module | None
    detector: nn.Module
    features: FeatureExtractor | None
    optimizers: dict[str, torch.optim.Optimizer]
    best: dict = field(default_factory=dict)

    @property
    def uses_sr(self) -> bool:
        return self.cfg.detector_input == "sr"

    def sr_parameters(self) -> list[nn.Parameter]:
        return list(self.generator.parameters()) + list(self.een.parameters())

    def modules(self) -> dict[str, nn.Module]:
        mods = {"detector": self.detector}
        if self.uses_sr:
            mods.update(generator=self.generator, een=self.een, discriminator=self.discriminator)
        return mods


def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))


def init_state(cfg: TrainConfig) -> TrainState:
    detector = build_detector(cfg.detector, init_seed=cfg.seed + 3)
    opts = {"detector": _adam(detector.parameters(), cfg)}
    g = een = d = fx = None
    if cfg.detector_input == "sr":
        g = build_generator(cfg.generator, cfg.scale, init_seed=cfg.seed)
        een = build_een(cfg.een, init_seed=cfg.seed + 1)
        d = build_discriminator(cfg.discriminator, init_seed=cfg.seed + 2)
        fx = FeatureExtractor(cfg.features)
        opts["sr"] = _adam(list(g.parameters()) + list(een.parameters()), cfg)
        opts["discriminator"] = _adam(d.parameters(), cfg)
    return TrainState(cfg, 0, g, een, d, detector, fx, opts)


# --------------------------------------------------------------------------- data

@dataclass
class Batch:
    lr: torch.Tensor
    hr: torch.Tensor
    boxes: list[torch.Tensor]
    ids: list[str]


def collate(tiles: Sequence[AnnotatedTile]) -> Batch:
    return Batch(lr=torch.stack([t.lr for t in tiles]), hr=torch.stack([t.hr for t in tiles]),
                 boxes=[t.boxes_tensor() for t in tiles], ids=[t.id for t in tiles])


def make_batch(tiles: Sequence[AnnotatedTile], step: int, cfg: TrainConfig) -> Batch:
    """The batch for ``step`` is a pure function of (tiles, seed, step)."""
    n = len(tiles)
    if n == 0:
        raise TrainingError("no training tiles")
    picks = []
    for k in range(step * cfg.batch_size, (step + 1) * cfg.batch_size):
        epoch, pos = divmod(k, n)
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        picks.append(tiles[perm[pos]])
    if cfg.augment:
        ops = np.random.default_rng([cfg.seed, step, 7]).integers(0, len(AUGMENT_OPS), size=len(picks))
        picks = [augment(t, AUGMENT_OPS[o]) for t, o in zip(picks, ops)]
    return collate(picks)


def _sample_generator(cfg: TrainConfig, step: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(np.random.default_rng([cfg.seed, step, 11]).integers(2 ** 62)))


# --------------------------------------------------------------------------- steps

def sr_forward(state: TrainState, lr: torch.Tensor) -> EENOutput:
    return state.een(state.generator(lr))


def detector_input(state: TrainState, batch: Batch) -> torch.Tensor:
    if state.cfg.detector_input == "hr":
        return batch.hr
    if state.cfg.detector_input == "bicubic":
        return bicubic_upsample(batch.lr, state.cfg.scale)
    with torch.no_grad():
        return sr_forward(state, batch.lr).sr.clamp(0.0, 1.0)


def _compute_losses(state: TrainState, batch: Batch, couple: bool):
    cfg, w = state.cfg, state.cfg.weights
    gen = _sample_generator(cfg, state.step)
    out = sr_forward(state, batch.lr)
    # one graph for both sides: each optimiser only ever receives gradients of its own objective
    l_g_ra, l_d_ra = adversarial_losses(state.discriminator(batch.hr), state.discriminator(out.isr))
    l_img, l_edge, _ = consistency_losses(out.sr, batch.hr, w.charbonnier_eps)
    # separate mode: the detector sees SR severed from the generator graph
    det = state.detector.loss(out.sr if couple else out.sr.detach(), batch.boxes, gen)
    bd = assemble(w, l_percep=perceptual_loss(state.features, out.isr, batch.hr), l_g_ra=l_g_ra,
                  l_content=content_loss(out.isr, batch.hr), l_img_cst=l_img, l_edge_cst=l_edge,
                  l_d_ra=l_d_ra, l_cls=det.l_cls, l_reg=det.l_reg, flags={"no_positive": det.no_positive})
    return bd, out


def _grads(loss: torch.Tensor, params: list[nn.Parameter], retain: bool = True) -> None:
    grads = torch.autograd.grad(loss, params, allow_unused=True, retain_graph=retain)
    for p, g in zip(params, grads):
        p.grad = g


def _guard(bd: LossBreakdown, state: TrainState) -> LossBreakdown:
    flat = bd.detached()
    if not flat.is_finite():
        raise TrainingError(f"non-finite loss at step {state.step}: {json.dumps(flat.as_dict())}")
    flat.check(state.cfg.weights)
    return flat


def _set_lr(state: TrainState) -> None:
    lr = lr_schedule(state.step, state.cfg)
    for opt in state.optimizers.values():
        for group in opt.param_groups:
            group["lr"] = lr


def _sr_step(state: TrainState, batch: Batch, couple: bool) -> LossBreakdown:
    _set_lr(state)
    bd, _ = _compute_losses(state, batch, couple)
    flat = _guard(bd, state)
    sr_params = state.sr_parameters()
    g_obj = bd.l_g_een + state.cfg.weights.eta * bd.l_det if couple else bd.l_g_een
    # generator(+EEN), then discriminator, then detector
    _grads(g_obj, sr_params)
    _grads(bd.l_d_ra, list(state.discriminator.parameters()))
    _grads(bd.l_det, list(state.detector.parameters()), retain=False)
    for name in ("sr", "discriminator", "detector"):
        state.optimizers[name].step()
        state.optimizers[name].zero_grad(set_to_none=True)
    state.step += 1
    return flat


def train_step_separate(state: TrainState, batch: Batch) -> LossBreakdown:
    return _sr_step(state, batch, couple=False)


def train_step_end_to_end(state: TrainState, batch: Batch) -> LossBreakdown:
    return _sr_step(state, batch, couple=True)


def train_step_detector_only(state: TrainState, batch: Batch) -> LossBreakdown:
    _set_lr(state)
    det = state.detector.loss(detector_input(state, batch), batch.boxes, _sample_generator(state.cfg, state.step))
    bd = assemble(state.cfg.weights, l_cls=det.l_cls, l_reg=det.l_reg, flags={"no_positive": det.no_positive})
    flat = _guard(bd, state)
    _grads(bd.l_det, list(state.detector.parameters()), retain=False)
    state.optimizers["detector"].step()
    state.optimizers["detector"].zero_grad(set_to_none=True)
    state.step += 1
    return flat


def train_step(state: TrainState, batch: Batch) -> LossBreakdown:
    cfg = state.cfg
    if not state.uses_sr:
        return train_step_detector_only(state, batch)
    if cfg.mode == "end_to_end" and state.step >= cfg.pretrain_steps:
        return train_step_end_to_end(state, batch)
    return train_step_separate(state, batch)


def detector_gradient_on_generator(state: TrainState, batch: Batch, couple: bool | None = None) -> list[torch.Tensor]:
    """Gradient of the detector loss w.r.t. every generator(+EEN) weight, as the chosen regime routes it."""
    if couple is None:
        couple = state.cfg.mode == "end_to_end"
    bd, _ = _compute_losses(state, batch, couple)
    params = state.sr_parameters()
    grads = torch.autograd.grad(bd.l_det, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


# --------------------------------------------------------------------------- checkpoints

def _arch(cfg: TrainConfig) -> dict:
    d = cfg.to_dict()
    return {k: d[k] for k in ARCH_KEYS}


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.cfg.to_dict(),
        "step": state.step,
        "models": {k: m.state_dict() for k, m in state.modules().items()},
        "optimizers": {k: o.state_dict() for k, o in state.optimizers.items()},
        "best": state.best,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, cfg: TrainConfig | None = None) -> TrainState:
    """Restore a state; ``cfg`` may change training knobs (e.g. mode) but not the architecture."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {payload.get('format')!r} "
                              f"version {payload.get('version')!r} (expected {CHECKPOINT_VERSION})")
    saved = TrainConfig.from_dict(payload["config"])
    if cfg is None:
        cfg = saved
    elif _arch(cfg) != _arch(saved):
        diff = [k for k in ARCH_KEYS if _arch(cfg)[k] != _arch(saved)[k]]
        raise CheckpointError(f"{path}: checkpoint version {CHECKPOINT_VERSION} was written for a different "
                              f"architecture (mismatched sections: {', '.join(diff)})")
    state = init_state(cfg)
    for k, m in state.modules().items():
        m.load_state_dict(payload["models"][k])
    for k, o in state.optimizers.items():
        o.load_state_dict(payload["optimizers"][k])
    state.step = int(payload["step"])
    state.best = dict(payload.get("best", {}))
    return state


# --------------------------------------------------------------------------- inference / evaluation

def predict(state: TrainState, tiles: Sequence[AnnotatedTile], input_kind: str | None = None,
            score_thresh: float | None = None, nms_iou: float | None = None,
            batch_size: int = 16) -> dict:
    cfg = state.cfg
    kind = input_kind or cfg.detector_input
    score_thresh = cfg.eval_score_thresh if score_thresh is None else score_thresh
    nms_iou = cfg.eval_nms_iou if nms_iou is None else nms_iou
    out = {}
    for i in range(0, len(tiles), batch_size):
        chunk = collate(tiles[i:i + batch_size])
        with torch.no_grad():
            if kind == "hr":
                x = chunk.hr
            elif kind == "bicubic":
                x = bicubic_upsample(chunk.lr, cfg.scale)
            else:
                if state.generator is None:
                    raise TrainingError("SR input requested but the checkpoint has no SR networks")
                x = sr_forward(state, chunk.lr).sr.clamp(0.0, 1.0)
        for tid, dets in zip(chunk.ids, detect(state.detector, x, score_thresh, nms_iou)):
            out[tid] = dets
    return out


def evaluate(state: TrainState, tiles: Sequence[AnnotatedTile], input_kind: str | None = None,
             label: str = "") -> EvalReport:
    dets = predict(state, tiles, input_kind)
    gts = {t.id: t.boxes for t in tiles}
    return ap_iou_curve(dets, gts, label=label or (input_kind or state.cfg.detector_input))


# --------------------------------------------------------------------------- loop

def _trim_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line and json.loads(line)["step"] < step]
    path.write_text("".join(line + "\n" for line in keep))


def run_training(cfg: TrainConfig, train_tiles: Sequence[AnnotatedTile], run_dir: str | Path,
                 val_tiles: Sequence[AnnotatedTile] = (), resume: bool = False,
                 state: TrainState | None = None) -> TrainState:
    """Train until ``cfg.max_steps``, logging one JSON line of losses per step.

    Checkpoints go to ``run_dir/checkpoints/{last,best}.pt``.  With ``resume``
    the last checkpoint is restored and the log is cut back to its step.
    """
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    log_path = run_dir / "train_log.jsonl"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    if state is None:
        if resume:
            state = load_checkpoint(ckpt_dir / "last.pt", cfg)
        else:
            state = init_state(cfg)
    else:
        state.cfg = cfg
    _trim_log(log_path, state.step)
    fx_hash = weight_hash(state.features) if state.features is not None else None
    with log_path.open("a") as fh:
        while state.step < cfg.max_steps:
            step = state.step
            bd = train_step(state, make_batch(train_tiles, step, cfg))
            fh.write(json.dumps({"step": step, "lr": lr_schedule(step, cfg), **bd.as_dict()}) + "\n")
            fh.flush()
            if cfg.val_every and val_tiles and state.step % cfg.val_every == 0:
                ap50 = evaluate(state, val_tiles).ap_at(0.5)
                log.info("step %d val AP@0.5 %.4f", state.step, ap50)
                if ap50 > state.best.get("ap50", -math.inf):
                    state.best = {"ap50": ap50, "step": state.step}
                    save_checkpoint(state, ckpt_dir / "best.pt")
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(state, ckpt_dir / "last.pt")
    if fx_hash is not None and weight_hash(state.features) != fx_hash:
        raise TrainingError("feature extractor weights changed during training")
    save_checkpoint(state, ckpt_dir / "last.pt")
    return state

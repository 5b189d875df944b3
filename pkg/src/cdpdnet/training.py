"""Optimization: schedule, data sampling, the training step and the full loop."""
from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .evaluation import aggregate, evaluate_case
from .inference import masks_from_logits, sliding_window_predict
from .losses import masked_loss
from .model import ModelConfig, build_model, save_checkpoint
from .partial_labels import presence_mask, to_multihot, uniform_task_sampler
from .volume import augment, extract_patch, preprocess_pair, read_volume

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    dice_smooth: float = 1e-5


@dataclass
class OptimConfig:
    lr0: float = 4e-4
    weight_decay: float = 1e-5
    momentum_beta: float = 0.9
    warmup_epochs: int = 50
    total_epochs: int = 200
    batch_per_device: int = 1
    grad_clip: Optional[float] = 12.0


@dataclass
class AugmentConfig:
    p_rot: float = 0.2
    p_int: float = 0.1
    shift: float = 0.1


@dataclass
class TrainConfig:
    seed: int = 0
    steps_per_epoch: Optional[int] = None  # default: number of training cases
    patch_size: int = 96
    foreground_bias: bool = False
    val_every: int = 10
    target_dsc: Optional[float] = None  # stop once validation DSC reaches this
    clip: bool = True
    target_spacing: Optional[list] = field(default_factory=lambda: [1.5, 1.5, 1.5])
    device: str = "cpu"
    threads: Optional[int] = None


SECTIONS = {"loss": LossConfig, "optim": OptimConfig, "augment": AugmentConfig, "train": TrainConfig}


def default_config():
    cfg = {k: dataclasses.asdict(v()) for k, v in SECTIONS.items()}
    cfg["model"] = {}
    cfg["data"] = {}
    return cfg


def merge(base, update):
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_overrides(cfg, overrides):
    """Apply ``section.key=value`` strings; values parse as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = value
    return cfg


def parse_config(cfg):
    cfg = merge(default_config(), cfg or {})
    try:
        parsed = {k: cls(**cfg[k]) for k, cls in SECTIONS.items()}
    except TypeError as e:
        raise ConfigError(str(e)) from e
    o = parsed["optim"]
    if o.total_epochs <= o.warmup_epochs:
        raise ConfigError(f"total_epochs ({o.total_epochs}) must exceed warmup_epochs ({o.warmup_epochs})")
    return cfg, parsed


def lr_schedule(epoch, cfg: OptimConfig) -> float:
    """Linear warm-up to ``lr0`` over ``warmup_epochs`` then cosine decay."""
    w, total = cfg.warmup_epochs, cfg.total_epochs
    if total <= w:
        raise ConfigError(f"total_epochs ({total}) must exceed warmup_epochs ({w})")
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    if epoch < w:
        return cfg.lr0 * ((epoch + 1) / w)
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * (epoch - w) / (total - w)))


def make_optimizer(model, cfg: OptimConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.lr0, betas=(cfg.momentum_beta, 0.999), weight_decay=cfg.weight_decay)


# data

@dataclass
class CaseData:
    case_id: str
    task_id: int
    image: np.ndarray
    label: np.ndarray
    spacing: tuple
    full_label: Optional[np.ndarray] = None


def load_cases(manifest, registry, clip=True, target_spacing=(1.5, 1.5, 1.5), full_labels=False):
    """Read and preprocess every case; returns ``{task_id: [CaseData]}``."""
    out = {}
    for d in manifest.datasets:
        task = registry.task(d.task_id)
        if sorted(d.label_set) != sorted(registry.label_ids(task)):
            raise ValueError(f"manifest label_set for task {d.task_id} disagrees with the registry")
        cases = []
        for c in d.cases:
            img = read_volume(manifest.resolve(c.image_path), "image")
            lbl = read_volume(manifest.resolve(c.label_path), "label")
            if img.shape != lbl.shape:
                raise ValueError(f"{c.case_id}: image {img.shape} and label {lbl.shape} differ")
            img, lbl = preprocess_pair(img, lbl, target_spacing, clip)
            full = None
            if full_labels and c.full_label_path:
                _, full = preprocess_pair(img, read_volume(manifest.resolve(c.full_label_path), "label"),
                                          target_spacing, clip=False)
                full = full.data
            cases.append(CaseData(c.case_id, d.task_id, img.data.astype(np.float32), lbl.data,
                                  img.spacing, full))
        out[d.task_id] = cases
    return out


def sample_batch(cases, registry, rng, sampler, patch_size, aug: AugmentConfig, batch=1, foreground_bias=False):
    images, targets, masks, ids, names = [], [], [], [], []
    for _ in range(batch):
        tid = next(sampler)
        pool = cases.get(tid) or []
        while not pool:  # tasks without cases are skipped
            tid = next(sampler)
            pool = cases.get(tid) or []
        case = pool[int(rng.integers(len(pool)))]
        p = extract_patch(case.image, case.label, rng, patch_size, tid, foreground_bias)
        p = augment(p, rng, aug.p_rot, aug.p_int, aug.shift)
        task = registry.task(tid)
        images.append(p.image[None])
        targets.append(to_multihot(p.label, task, registry))
        masks.append(presence_mask(task, registry))
        ids.append(tid)
        names.append(case.case_id)
    return (torch.from_numpy(np.stack(images)), torch.from_numpy(np.stack(targets)),
            torch.from_numpy(np.stack(masks)), torch.tensor(ids), names)


def train_step(model, optimizer, batch, loss_cfg: LossConfig, grad_clip=None, grad_norms=None):
    """One optimizer step; returns loss statistics.

    When ``grad_norms`` is a dict, the per-group gradient norm is accumulated
    into it before the step.
    """
    image, target, mask, ids, names = batch
    model.train()
    optimizer.zero_grad(set_to_none=True)
    logits = model(image, ids)
    loss, terms = masked_loss(logits, target, mask, loss_cfg.alpha, loss_cfg.beta, loss_cfg.dice_smooth)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss.item()} for tasks {ids.tolist()} cases {names}")
    loss.backward()
    if grad_norms is not None:
        for g, mod in model.trainable_groups().items():
            sq = sum(float(p.grad.pow(2).sum()) for p in mod.parameters() if p.grad is not None)
            grad_norms[g] = grad_norms.get(g, 0.0) + math.sqrt(sq)
    if grad_clip:
        torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.requires_grad], grad_clip)
    optimizer.step()
    return {"loss": loss.item(), "dice_term": terms["dice_term"].item(), "ce_term": terms["ce_term"].item()}


def validate(model, cases, registry, patch_size, overlap=0.5):
    """Mean DSC over present channels, predicting each case under its own task ID."""
    results = []
    for tid, pool in cases.items():
        task = registry.task(tid)
        mask = presence_mask(task, registry)
        for c in pool:
            logits = sliding_window_predict(model, c.image, tid, patch_size, overlap)
            results.append(evaluate_case(masks_from_logits(logits), to_multihot(c.label, task, registry),
                                         mask, c.spacing, c.case_id, tid))
    return results


def mean_case_dsc(results):
    vals = [v for r in results for v in r.dsc.values()]
    return math.fsum(vals) / len(vals) if vals else float("nan")


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.use_deterministic_algorithms(True, warn_only=True)


def train_loop(manifest, registry, config=None, out_dir=None, cases=None, model=None, callback=None):
    """Train per the resolved config; returns ``(model, summary)``.

    Writes ``metrics.ndjson`` (one record per step), ``validation.ndjson``,
    ``resolved_config.json``, and ``best.pt`` / ``last.pt`` under ``out_dir``.
    """
    raw, cfg = parse_config(config)
    tc, oc = cfg["train"], cfg["optim"]
    if tc.threads:
        torch.set_num_threads(tc.threads)
    seed_everything(tc.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "resolved_config.json", "w") as fh:
            json.dump(raw, fh, indent=2, sort_keys=True)
    if cases is None:
        cases = load_cases(manifest, registry, tc.clip, tc.target_spacing)
    n_cases = sum(len(v) for v in cases.values())
    if n_cases == 0:
        raise ValueError("manifest has no training cases")
    if model is None:
        mcfg = ModelConfig.from_dict({"label_count": registry.num_labels, "task_count": registry.num_tasks,
                                      "patch_size": tc.patch_size, **raw.get("model", {})})
        model = build_model(mcfg, registry, cache=raw.get("data", {}).get("embedding_cache"))
    model.to(tc.device)
    optimizer = make_optimizer(model, oc)
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 0, 0]))
    sampler = uniform_task_sampler(registry, rng)
    steps = tc.steps_per_epoch or n_cases
    fingerprint = registry.fingerprint()
    metrics_fh = open(out_dir / "metrics.ndjson", "w") if out_dir is not None else None
    val_fh = open(out_dir / "validation.ndjson", "w") if out_dir is not None else None
    best, history, step = -1.0, [], 0
    started = time.time()
    try:
        for epoch in range(oc.total_epochs):
            lr = lr_schedule(epoch, oc)
            for g in optimizer.param_groups:
                g["lr"] = lr
            for _ in range(steps):
                batch = sample_batch(cases, registry, rng, sampler, tc.patch_size, cfg["augment"],
                                     oc.batch_per_device, tc.foreground_bias)
                try:
                    stats = train_step(model, optimizer, batch, cfg["loss"], oc.grad_clip)
                except TrainingDivergedError as e:
                    raise TrainingDivergedError(f"step {step} epoch {epoch}: {e}") from None
                rec = {"step": step, "epoch": epoch, "task_id": int(batch[3][0]), **stats, "lr": lr}
                history.append(rec)
                if metrics_fh:
                    metrics_fh.write(json.dumps(rec) + "\n")
                step += 1
            last_epoch = epoch == oc.total_epochs - 1
            if tc.val_every and ((epoch + 1) % tc.val_every == 0 or last_epoch):
                results = validate(model, cases, registry, tc.patch_size)
                score = mean_case_dsc(results)
                vrec = {"epoch": epoch, "step": step, "val_dsc": score}
                log.info("epoch %d val dsc %.4f (%.0fs)", epoch, score, time.time() - started)
                if val_fh:
                    val_fh.write(json.dumps(vrec) + "\n")
                    val_fh.flush()
                if score > best:
                    best = score
                    if out_dir is not None:
                        save_checkpoint(out_dir / "best.pt", model, fingerprint, {"epoch": epoch, "val_dsc": score})
                if callback:
                    callback(vrec)
                if tc.target_dsc is not None and score >= tc.target_dsc:
                    break
            if metrics_fh:
                metrics_fh.flush()
    finally:
        if metrics_fh:
            metrics_fh.close()
        if val_fh:
            val_fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "last.pt", model, fingerprint, {"epoch": epoch})
    return model, {"best_val_dsc": best, "epochs_run": epoch + 1, "steps": step, "history": history,
                   "seconds": time.time() - started}

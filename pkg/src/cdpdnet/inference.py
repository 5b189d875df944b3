"""Sliding-window prediction over volumes larger than one patch."""
from __future__ import annotations

import itertools

import numpy as np
import torch

from .volume import pad_to


def window_corners(size, patch, overlap=0.5):
    """Window start offsets along one axis; the last window is flush with the end."""
    if size <= patch:
        return [0]
    step = max(1, int(round(patch * (1.0 - overlap))))
    starts = list(range(0, size - patch + 1, step))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def gaussian_importance(patch, sigma_scale=0.125):
    axes = []
    for n in patch:
        x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        axes.append(np.exp(-0.5 * (x / (sigma_scale * n)) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    w = w / w.max()
    # keep edges strictly positive so every voxel has weight
    return np.maximum(w, 1e-3).astype(np.float32)


@torch.no_grad()
def sliding_window_predict(model, image, task_id, patch_size=None, overlap=0.5, sigma_scale=0.125):
    """Gaussian-blended logits ``(|L|, Z, Y, X)`` for a preprocessed image ``(Z, Y, X)``."""
    model.eval()
    image = np.asarray(image, dtype=np.float32)
    patch_size = patch_size or model.config.patch_size
    patch = (patch_size,) * 3 if np.isscalar(patch_size) else tuple(patch_size)
    orig = image.shape
    image = pad_to(image, patch, 0.0)
    weight = gaussian_importance(patch, sigma_scale)
    acc = np.zeros((model.config.label_count,) + image.shape, dtype=np.float64)
    norm = np.zeros(image.shape, dtype=np.float64)
    device = next(model.parameters()).device
    corners = itertools.product(*[window_corners(n, p, overlap) for n, p in zip(image.shape, patch)])
    for corner in corners:
        sl = tuple(slice(c, c + p) for c, p in zip(corner, patch))
        x = torch.from_numpy(np.ascontiguousarray(image[sl]))[None, None].to(device)
        logits = model(x, task_id)[0].cpu().numpy()
        acc[(slice(None),) + sl] += logits * weight
        norm[sl] += weight
    out = acc / norm
    crop = tuple(slice(0, n) for n in orig)
    return out[(slice(None),) + crop].astype(np.float32)


def masks_from_logits(logits, threshold=0.5):
    prob = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    return prob > threshold

"""Frozen text encoders and the on-disk embedding cache.

Cache format: ``<name>.npy`` holds a float32 ``(rows, 512)`` matrix and
``<name>.json`` lists the prompts in row order plus the backend id, so caches
produced by the real CLIP tower and by the stand-in are interchangeable.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
import torch

TEXT_DIM = 512


class TextEncoder:
    """Maps prompts to ``TEXT_DIM`` vectors. Deterministic and gradient-free."""

    backend = "abstract"
    dim = TEXT_DIM

    def encode(self, prompts) -> np.ndarray:
        raise NotImplementedError

    def parameters(self):
        return iter(())


class StandinTextEncoder(TextEncoder):
    """Unit vectors expanded from a seeded hash of the prompt text."""

    backend = "standin"

    def __init__(self, seed=0, dim=TEXT_DIM):
        self.seed = int(seed)
        self.dim = dim
        self.backend = f"standin:{self.seed}"

    def encode(self, prompts):
        out = np.empty((len(prompts), self.dim), dtype=np.float32)
        for i, p in enumerate(prompts):
            digest = hashlib.sha256(f"{self.seed}\x00{p}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            v = rng.standard_normal(self.dim)
            out[i] = v / np.linalg.norm(v)
        return out


class ClipTextEncoder(TextEncoder):
    """Pretrained CLIP ViT-B/32 text tower via ``transformers`` (loaded lazily)."""

    def __init__(self, model_path="openai/clip-vit-base-patch32", device="cpu"):
        try:
            from transformers import CLIPTextModelWithProjection, CLIPTokenizer
        except ImportError as e:  # pragma: no cover - transformers is optional
            raise RuntimeError("the CLIP text backend needs the transformers package") from e
        self.backend = f"clip:{model_path}"
        self.tokenizer = CLIPTokenizer.from_pretrained(model_path)
        self.model = CLIPTextModelWithProjection.from_pretrained(model_path).to(device).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.device = device

    def parameters(self):
        return self.model.parameters()

    @torch.no_grad()
    def encode(self, prompts):
        tok = self.tokenizer(list(prompts), padding=True, return_tensors="pt").to(self.device)
        emb = self.model(**tok).text_embeds
        return emb.cpu().numpy().astype(np.float32)


def make_text_encoder(cfg=None) -> TextEncoder:
    cfg = dict(cfg or {"standin": {"seed": 0}})
    if "pretrained" in cfg:
        return ClipTextEncoder(**cfg["pretrained"])
    return StandinTextEncoder(**cfg.get("standin", {}))


def cache_dir(directory=None) -> Path:
    if directory is not None:
        return Path(directory)
    return Path(os.environ.get("CDPD_CACHE_DIR") or Path.home() / ".cache" / "cdpdnet")


def cache_key(backend, prompts) -> str:
    h = hashlib.sha256(backend.encode())
    for p in prompts:
        h.update(b"\x00" + p.encode())
    return h.hexdigest()[:20]


def save_embeddings(stem, matrix, prompts, backend):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    matrix = np.asarray(matrix, dtype=np.float32)
    if matrix.shape[0] != len(prompts):
        raise ValueError(f"{matrix.shape[0]} rows for {len(prompts)} prompts")
    np.save(stem.with_suffix(".npy"), matrix)
    with open(stem.with_suffix(".json"), "w") as fh:
        json.dump({"backend": backend, "dim": int(matrix.shape[1]), "prompts": list(prompts)}, fh, indent=2)


def load_embeddings(stem):
    stem = Path(stem)
    with open(stem.with_suffix(".json")) as fh:
        meta = json.load(fh)
    matrix = np.load(stem.with_suffix(".npy"))
    if matrix.shape != (len(meta["prompts"]), meta["dim"]):
        raise ValueError(f"{stem}: matrix {matrix.shape} disagrees with sidecar")
    return matrix, meta


def cached_encode(prompts, encoder=None, directory=None, backend=None):
    """Encode ``prompts`` once; later calls read the cache.

    ``encoder`` may be None when a cache for ``backend`` already exists.
    """
    prompts = list(prompts)
    backend = backend or (encoder.backend if encoder is not None else None)
    if backend is None:
        raise ValueError("need an encoder or a backend id to locate the cache")
    stem = cache_dir(directory) / cache_key(backend, prompts)
    if stem.with_suffix(".npy").exists():
        matrix, meta = load_embeddings(stem)
        if meta["prompts"] == prompts:
            return matrix
    if encoder is None:
        raise RuntimeError(f"no cached embeddings for backend {backend!r} and no encoder available")
    matrix = encoder.encode(prompts)
    save_embeddings(stem, matrix, prompts, backend)
    return matrix


def embed_roi_names(registry, encoder=None, directory=None, backend=None):
    return cached_encode(registry.roi_prompts(), encoder, directory, backend)


def embed_task_prompts(registry, encoder=None, directory=None, backend=None):
    return cached_encode(registry.task_prompts(), encoder, directory, backend)

"""Small torch-side helpers: tensor conversion, seeding, batching."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def to_image_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(N, H, W) or (N, H, W, C) numpy images -> (N, C, H, W) tensor."""
    x = torch.as_tensor(np.ascontiguousarray(images), dtype=dtype)
    if x.dim() == 3:
        x = x.unsqueeze(1)
    elif x.dim() == 4:
        x = x.permute(0, 3, 1, 2).contiguous()
    else:
        raise ValueError(f"expected (N,H,W) or (N,H,W,C) images, got shape {tuple(x.shape)}")
    return x


def chw_shape(data_shape) -> tuple:
    """Dataset image shape (H, W) or (H, W, C) -> network shape (C, H, W)."""
    if len(data_shape) == 2:
        return (1, *data_shape)
    if len(data_shape) == 3:
        h, w, c = data_shape
        return (c, h, w)
    raise ValueError(f"unsupported image shape {tuple(data_shape)}")


def to_numpy_images(x: torch.Tensor) -> np.ndarray:
    """(N, C, H, W) tensor -> (N, H, W) or (N, H, W, C) numpy images."""
    x = x.detach().cpu()
    if x.shape[1] == 1:
        return x.squeeze(1).numpy()
    return x.permute(0, 2, 3, 1).numpy()


def derive_seed(seed: int, *parts) -> int:
    """Stable sub-seed for a named stage, e.g. derive_seed(0, 'local_vae', 3)."""
    key = f"{seed}/" + "/".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "little")


def batch_indices(n: int, batch: int, rng: np.random.Generator | None = None):
    """Yield index arrays covering [0, n), shuffled when rng is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch):
        yield order[start : start + batch]

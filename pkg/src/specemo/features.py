"""Path -> spectrogram image loading with an optional content-addressed disk cache."""

from __future__ import annotations

import hashlib
import logging
import os
from pathlib import Path
from typing import Optional

import numpy as np

from .audio_io import CANONICAL_RATE, load_canonical
from .spectro import SpectroParams, extract

log = logging.getLogger(__name__)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def default_cache_root() -> Optional[Path]:
    root = os.environ.get("SPECEMO_CACHE")
    return Path(root) if root else None


class ImageLoader:
    """Callable mapping an audio path to its float32 H x W x 3 spectrogram image.

    With a cache directory, images are stored as ``.npy`` under
    ``<cache>/spectro/<params digest>/<file digest>.npy`` so unchanged audio is
    never re-rendered, whatever its path or mtime.
    """

    def __init__(self, params: SpectroParams = SpectroParams(), cache_dir=None, rate: int = CANONICAL_RATE):
        self.params = params
        self.rate = rate
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.hits = 0
        self.misses = 0

    @property
    def shape(self):
        return tuple(self.params.image_hw) + (3,)

    def _cache_path(self, digest: str) -> Path:
        return self.cache_dir / "spectro" / self.params.digest()[:16] / f"{digest}.npy"

    def compute(self, path) -> np.ndarray:
        return extract(load_canonical(path, self.rate), self.params).pixels.astype(np.float32)

    def __call__(self, path) -> np.ndarray:
        if self.cache_dir is None:
            self.misses += 1
            return self.compute(path)
        target = self._cache_path(file_digest(path))
        if target.exists():
            self.hits += 1
            return np.load(target)
        img = self.compute(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_suffix(f".{os.getpid()}.tmp")
        with open(tmp, "wb") as f:
            np.save(f, img)
        os.replace(tmp, target)
        self.misses += 1
        return img

"""Mel-spectrogram images: STFT, Mel filterbank, dB scaling, colormap rendering."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Optional, Tuple

import numpy as np

from .audio_io import AudioClip, CANONICAL_RATE

log = logging.getLogger(__name__)


class DegenerateFilter(ValueError):
    pass


@lru_cache(maxsize=None)
def load_colormap(name: str = "viridis") -> np.ndarray:
    """Return the named 256x3 RGB table shipped with the package."""
    text = resources.files("specemo").joinpath("data", f"{name}.csv").read_text()
    rows = [line.split(",") for line in text.splitlines() if line and not line.startswith("#")]
    table = np.array(rows, dtype=np.float64)
    if table.shape != (256, 3):
        raise ValueError(f"colormap {name} has shape {table.shape}")
    table.setflags(write=False)
    return table


@dataclass(frozen=True)
class SpectroParams:
    window_ms: float = 32.0
    hop_ms: float = 10.0
    fft_len: int = 512
    n_mels: int = 64
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    db_floor: float = -80.0
    image_hw: Tuple[int, int] = (64, 64)
    colormap: str = "viridis"

    def __post_init__(self):
        object.__setattr__(self, "image_hw", tuple(int(v) for v in self.image_hw))
        if self.fft_len <= 0 or self.fft_len & (self.fft_len - 1):
            raise ValueError("fft_len must be a power of two")
        if not 0 <= self.fmin_hz < self.fmax_hz:
            raise ValueError("need 0 <= fmin_hz < fmax_hz")
        if self.db_floor >= 0:
            raise ValueError("db_floor must be negative")
        if self.n_mels <= 0 or min(self.image_hw) <= 0 or len(self.image_hw) != 2:
            raise ValueError("n_mels and image_hw must be positive")

    def window_len(self, rate: int) -> int:
        return int(round(self.window_ms * rate / 1000.0))

    def hop_len(self, rate: int) -> int:
        return max(1, int(round(self.hop_ms * rate / 1000.0)))

    def check_rate(self, rate: int) -> None:
        if self.fmax_hz > rate / 2:
            raise ValueError(f"fmax_hz {self.fmax_hz} above Nyquist for {rate} Hz")
        if self.window_len(rate) > self.fft_len:
            raise ValueError("window longer than fft_len")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_hw"] = list(self.image_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SpectroParams":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class SpecImage:
    pixels: np.ndarray
    params: SpectroParams = field(default_factory=SpectroParams)
    source_path: str = ""


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def pad_to_window(x: np.ndarray, w: int, source: str = "") -> np.ndarray:
    if len(x) >= w:
        return x
    log.info("zero-padding %s from %d to %d samples", source or "clip", len(x), w)
    return np.concatenate([x, np.zeros(w - len(x))])


def stft(clip: AudioClip, params: SpectroParams) -> np.ndarray:
    """Frames x (fft_len // 2 + 1) complex STFT, Hann-windowed, no centering."""
    rate = clip.sample_rate_hz
    params.check_rate(rate)
    w, hop = params.window_len(rate), params.hop_len(rate)
    x = pad_to_window(np.asarray(clip.samples, dtype=np.float64), w, clip.source_path)
    n_frames = 1 + (len(x) - w) // hop
    idx = np.arange(w)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * hann(w)[None, :]
    return np.fft.rfft(frames, n=params.fft_len, axis=1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(params: SpectroParams, rate_hz: int = CANONICAL_RATE) -> np.ndarray:
    """Triangular Mel filters, n_mels x bins, each row summing to one.

    Raises DegenerateFilter if any triangle falls between two FFT bins.
    """
    n_bins = params.fft_len // 2 + 1
    freqs = np.arange(n_bins) * rate_hz / params.fft_len
    edges = mel_to_hz(np.linspace(hz_to_mel(params.fmin_hz), hz_to_mel(params.fmax_hz), params.n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    sums = fb.sum(axis=1)
    empty = np.flatnonzero(sums == 0)
    if len(empty):
        raise DegenerateFilter(
            f"{len(empty)} empty Mel filter(s) (first #{empty[0]}) for n_mels={params.n_mels}, "
            f"fft_len={params.fft_len} at {rate_hz} Hz"
        )
    return fb / sums[:, None]


def power_to_db(power: np.ndarray, db_floor: float = -80.0, eps: float = 1e-10) -> np.ndarray:
    power = np.asarray(power, dtype=np.float64)
    peak = power.max() if power.size else 0.0
    if peak <= 0:
        return np.full(power.shape, float(db_floor))
    db = 10.0 * np.log10(np.maximum(power, eps) / max(peak, eps))
    return np.maximum(db, db_floor)


def apply_colormap(values: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to RGB with linear interpolation between entries."""
    pos = np.clip(values, 0.0, 1.0) * (len(table) - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), len(table) - 2)
    frac = (pos - i0)[..., None]
    return table[i0] * (1.0 - frac) + table[i0 + 1] * frac


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped (the usual INTER_LINEAR convention)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.minimum(np.floor(src).astype(np.int64), max(n_in - 2, 0))
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img: np.ndarray, hw) -> np.ndarray:
    """Bilinear resize over the first two axes of ``img``."""
    h, w = hw
    y0, y1, fy = _axis_weights(img.shape[0], h)
    x0, x1, fx = _axis_weights(img.shape[1], w)
    extra = (1,) * (img.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    fx = fx.reshape((1, -1) + extra)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def render(db: np.ndarray, params: SpectroParams, source_path: str = "") -> SpecImage:
    """Render an n_mels x frames dB matrix to an RGB image.

    Low frequencies end up in the bottom row; time runs left to right.
    """
    norm = (np.asarray(db, dtype=np.float64) - params.db_floor) / -params.db_floor
    rgb = apply_colormap(np.clip(norm, 0.0, 1.0)[::-1, :], load_colormap(params.colormap))
    pixels = np.clip(resize_bilinear(rgb, params.image_hw), 0.0, 1.0)
    return SpecImage(pixels, params, source_path)


def mel_power(clip: AudioClip, params: SpectroParams) -> np.ndarray:
    spec = stft(clip, params)
    power = spec.real ** 2 + spec.imag ** 2
    return mel_filterbank(params, clip.sample_rate_hz) @ power.T


def extract(clip: AudioClip, params: SpectroParams = SpectroParams()) -> SpecImage:
    """Whole-clip Mel-spectrogram image."""
    db = power_to_db(mel_power(clip, params), params.db_floor)
    return render(db, params, clip.source_path)


def to_ppm(pixels: np.ndarray, comment: Optional[str] = None) -> bytes:
    """Binary PPM (P6) for an HxWx3 image in [0, 1], or P5 for HxW.

    ``comment`` goes into a ``#`` header line (used for provenance tags).
    """
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot encode shape {arr.shape} as PPM/PGM")
    h, w = arr.shape[:2]
    note = b"" if comment is None else b"\n# " + comment.replace("\n", " ").encode()
    return magic + note + b"\n%d %d\n255\n" % (w, h) + arr.tobytes()


_PPM_HEADER = re.compile(rb"(P[56])((?:\s+|#[^\n]*\n)+)(\d+)((?:\s+|#[^\n]*\n)+)(\d+)"
                         rb"((?:\s+|#[^\n]*\n)+)(\d+)\s")


def ppm_comments(data: bytes) -> list:
    """The ``#`` comment lines of a PPM/PGM header."""
    m = _PPM_HEADER.match(data)
    if m is None:
        raise ValueError("not a binary PGM/PPM")
    seps = b"".join(m.group(i) for i in (2, 4, 6))
    return [c.decode().strip() for c in re.findall(rb"#([^\n]*)\n", seps)]


def from_ppm(data: bytes) -> np.ndarray:
    """Parse P5/P6 bytes (as written by ``to_ppm``) into a uint8 array."""
    m = _PPM_HEADER.match(data)
    if m is None:
        raise ValueError("not a binary PGM/PPM")
    magic, w, h, maxval = m.group(1), int(m.group(3)), int(m.group(5)), int(m.group(7))
    payload = data[m.end():]
    if maxval != 255:
        raise ValueError("only maxval 255 supported")
    ch = 3 if magic == b"P6" else 1
    if len(payload) < w * h * ch:
        raise ValueError("truncated PGM/PPM payload")
    arr = np.frombuffer(payload[:w * h * ch], dtype=np.uint8)
    return arr.reshape((h, w, 3) if ch == 3 else (h, w))


def write_ppm(path, pixels: np.ndarray, comment: Optional[str] = None) -> None:
    with open(path, "wb") as f:
        f.write(to_ppm(pixels, comment))

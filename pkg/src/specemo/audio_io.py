"""Audio decoding, resampling, dataset manifests and the synthetic test corpus."""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

CANONICAL_RATE = 16000

LABELS = ("ANGER", "DISGUST", "FEAR", "JOY", "NEUTRAL", "SADNESS", "SURPRISE")
STYLES = ("fast", "slow", "soft", "loud", "normal")

# corpus-specific spellings folded onto the shared label space
_LABEL_ALIASES = {"happiness": "JOY", "happy": "JOY"}

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


class AudioError(ValueError):
    pass


class MalformedHeader(AudioError):
    pass


class UnsupportedEncoding(AudioError):
    pass


class EmptyAudio(AudioError):
    pass


class ManifestError(ValueError):
    pass


class UnknownLabel(ManifestError):
    pass


class MissingColumn(ManifestError):
    pass


class DuplicatePath(ManifestError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int
    source_path: str = ""

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if len(self.samples) < 1:
            raise EmptyAudio(f"{self.source_path or '<clip>'}: no samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate_hz


# -- WAV ---------------------------------------------------------------------

def _read_chunks(data: bytes, path: str):
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedHeader(f"{path}: not a RIFF/WAVE file")
    pos = 12
    chunks = {}
    while pos + 8 <= len(data):
        cid, size = struct.unpack("<4sI", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        chunks.setdefault(cid, body)
        pos += 8 + size + (size & 1)
    return chunks


def decode_wav(data: bytes, path: str = "<bytes>") -> AudioClip:
    """Decode an in-memory RIFF/WAVE byte string into a mono AudioClip."""
    chunks = _read_chunks(data, path)
    fmt = chunks.get(b"fmt ")
    if fmt is None or len(fmt) < 16:
        raise MalformedHeader(f"{path}: missing or short fmt chunk")
    if b"data" not in chunks:
        raise MalformedHeader(f"{path}: missing data chunk")
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _WAVE_FORMAT_EXTENSIBLE:
        if len(fmt) < 26:
            raise MalformedHeader(f"{path}: short WAVE_FORMAT_EXTENSIBLE header")
        tag = struct.unpack("<H", fmt[24:26])[0]
    if channels not in (1, 2):
        raise UnsupportedEncoding(f"{path}: {channels} channels")
    if rate <= 0:
        raise MalformedHeader(f"{path}: sample rate {rate}")

    raw = chunks[b"data"]
    width = bits // 8
    if tag == _WAVE_FORMAT_PCM and bits in (8, 16, 24, 32):
        if bits == 32:
            raise UnsupportedEncoding(f"{path}: 32-bit integer PCM")
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        pass
    else:
        raise UnsupportedEncoding(f"{path}: format tag {tag:#06x}, {bits} bits")
    if block_align != width * channels:
        raise MalformedHeader(f"{path}: block align {block_align} inconsistent")

    n_frames = len(raw) // block_align
    if n_frames == 0:
        raise EmptyAudio(f"{path}: 0 frames")
    raw = raw[:n_frames * block_align]

    if tag == _WAVE_FORMAT_IEEE_FLOAT:
        x = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        x = np.nan_to_num(x, nan=0.0, posinf=1.0, neginf=-1.0)
    elif bits == 8:
        x = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif bits == 16:
        x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    else:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        x = v.astype(np.float64) / float(1 << 23)

    x = x.reshape(n_frames, channels).mean(axis=1)
    return AudioClip(np.clip(x, -1.0, 1.0), int(rate), path)


def load_wav(path) -> AudioClip:
    path = str(path)
    with open(path, "rb") as f:
        data = f.read()
    return decode_wav(data, path)


def encode_wav(samples: np.ndarray, rate: int, bits: int = 16) -> bytes:
    """Encode mono samples in [-1, 1] as PCM (8/16/24 bit) or float (32 bit)."""
    x = np.clip(np.asarray(samples, dtype=np.float64).ravel(), -1.0, 1.0)
    if bits == 8:
        payload = np.clip(np.round(x * 128.0) + 128, 0, 255).astype(np.uint8).tobytes()
        tag = _WAVE_FORMAT_PCM
    elif bits == 16:
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag = _WAVE_FORMAT_PCM
    elif bits == 24:
        v = np.clip(np.round(x * float(1 << 23)), -(1 << 23), (1 << 23) - 1).astype(np.int32)
        v = v & 0xFFFFFF
        payload = np.stack([v & 0xFF, (v >> 8) & 0xFF, (v >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
        tag = _WAVE_FORMAT_PCM
    elif bits == 32:
        payload = x.astype("<f4").tobytes()
        tag = _WAVE_FORMAT_IEEE_FLOAT
    else:
        raise ValueError(f"unsupported bit depth {bits}")
    width = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, rate, rate * width, width, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path, samples: np.ndarray, rate: int, bits: int = 16) -> None:
    with open(path, "wb") as f:
        f.write(encode_wav(samples, rate, bits))


# -- resampling --------------------------------------------------------------

RESAMPLE_TAPS = 64
KAISER_BETA = 8.0


def resample(clip: AudioClip, target_hz: int, chunk: int = 8192) -> AudioClip:
    """Band-limited resampling with a Kaiser-windowed sinc.

    Every output sample is a 64-tap dot product with the input around its
    exact fractional position. The cutoff sits at the lower of the two
    Nyquist rates, and each tap set is normalised to unit DC gain.
    """
    if target_hz <= 0:
        raise ValueError("target_hz must be positive")
    src = clip.sample_rate_hz
    if target_hz == src:
        return clip
    x = np.asarray(clip.samples, dtype=np.float64)
    n_in = len(x)
    n_out = max(1, int(round(n_in * target_hz / src)))
    cutoff = min(1.0, target_hz / src)
    half = RESAMPLE_TAPS // 2
    offsets = np.arange(-half + 1, half + 1)
    out = np.empty(n_out)
    for start in range(0, n_out, chunk):
        n = np.arange(start, min(n_out, start + chunk))
        # exact arithmetic on the position before converting to float
        t = n * src / target_hz
        base = np.floor(t).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        d = t[:, None] - idx
        win = np.i0(KAISER_BETA * np.sqrt(np.clip(1.0 - (d / half) ** 2, 0.0, None))) / np.i0(KAISER_BETA)
        h = cutoff * np.sinc(cutoff * d) * win
        h /= h.sum(axis=1, keepdims=True)
        valid = (idx >= 0) & (idx < n_in)
        vals = np.where(valid, x[np.clip(idx, 0, n_in - 1)], 0.0)
        out[start:start + len(n)] = (vals * h).sum(axis=1)
    return AudioClip(np.clip(out, -1.0, 1.0), int(target_hz), clip.source_path)


def load_canonical(path, rate: int = CANONICAL_RATE) -> AudioClip:
    return resample(load_wav(path), rate)


# -- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class LabeledSample:
    path: str
    label: str
    speaker_id: str
    style: Optional[str] = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise UnknownLabel(self.label)
        if self.style is not None and self.style not in STYLES:
            raise ManifestError(f"unknown style {self.style!r}")
        if self.style is not None and self.label != "NEUTRAL":
            raise ManifestError(f"{self.path}: style only allowed on NEUTRAL rows")


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    samples: tuple
    label_set: tuple = LABELS
    root: str = ""

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "label_set", tuple(self.label_set))
        for s in self.samples:
            if s.label not in self.label_set:
                raise UnknownLabel(f"{s.label} not in label set")
            if not s.speaker_id:
                raise ManifestError(f"{s.path}: empty speaker id")

    def __len__(self):
        return len(self.samples)

    def resolve(self, sample: LabeledSample) -> str:
        p = Path(sample.path)
        if not p.is_absolute() and self.root:
            p = Path(self.root) / p
        return str(p)

    @property
    def labels(self) -> list:
        return [s.label for s in self.samples]

    @property
    def speakers(self) -> list:
        return sorted({s.speaker_id for s in self.samples})

    def label_indices(self) -> np.ndarray:
        lookup = {lab: i for i, lab in enumerate(self.label_set)}
        return np.array([lookup[s.label] for s in self.samples], dtype=np.int64)

    def subset(self, indices: Iterable[int], name: Optional[str] = None) -> "DatasetManifest":
        return replace(self, name=name or self.name,
                       samples=tuple(self.samples[i] for i in indices))


def parse_label(text: str) -> str:
    key = text.strip().lower()
    if key in _LABEL_ALIASES:
        return _LABEL_ALIASES[key]
    up = key.upper()
    if up not in LABELS:
        raise UnknownLabel(text)
    return up


def read_manifest(stream, name: str = "manifest", root: str = "") -> DatasetManifest:
    reader = csv.DictReader(stream)
    missing = [c for c in ("path", "label", "speaker", "style") if c not in (reader.fieldnames or [])]
    if missing:
        raise MissingColumn(", ".join(missing))
    seen = set()
    rows = []
    for row in reader:
        path = row["path"].strip()
        if path in seen:
            raise DuplicatePath(path)
        seen.add(path)
        style = (row.get("style") or "").strip().lower() or None
        if style == "none":
            style = None
        rows.append(LabeledSample(path, parse_label(row["label"]), row["speaker"].strip(), style))
    return DatasetManifest(name, rows, LABELS, root)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as f:
        return read_manifest(f, name=path.stem, root=str(path.parent))


def format_manifest(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    buf.write("path,label,speaker,style\n")
    for s in manifest.samples:
        buf.write(f"{s.path},{s.label.lower()},{s.speaker_id},{s.style or ''}\n")
    return buf.getvalue()


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(format_manifest(manifest))


# -- synthetic corpus --------------------------------------------------------

# Per-class recipes: carrier pitch (Hz), amplitude-modulation rate (Hz),
# chirp span (fraction of pitch over the clip) and noise level.
_RECIPES = {
    "ANGER": (220.0, 9.0, 0.00, 0.02),
    "DISGUST": (420.0, 3.0, -0.15, 0.02),
    "FEAR": (780.0, 14.0, 0.25, 0.02),
    "JOY": (1400.0, 6.0, 0.10, 0.02),
    "NEUTRAL": (2400.0, 0.0, 0.00, 0.01),
    "SADNESS": (160.0, 2.0, -0.05, 0.01),
    "SURPRISE": (3600.0, 5.0, 0.30, 0.02),
}


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 4
    speakers: int = 5
    clips: int = 2
    seed: int = 0
    rate: int = CANONICAL_RATE
    min_dur: float = 0.6
    max_dur: float = 1.0
    neutral_styles: bool = False
    labels: Optional[Sequence[str]] = None

    def class_labels(self) -> list:
        if self.labels is not None:
            return [parse_label(x) for x in self.labels]
        return list(LABELS[:self.classes])


def _synth_clip(rng, label: str, speaker_shift: float, rate: int, dur: float) -> np.ndarray:
    pitch, am_rate, chirp, noise = _RECIPES[label]
    n = int(round(dur * rate))
    t = np.arange(n) / rate
    f0 = pitch * speaker_shift * (1.0 + chirp * t / dur)
    phase = 2 * np.pi * np.cumsum(f0) / rate + rng.uniform(0, 2 * np.pi)
    tone = np.sin(phase) + 0.4 * np.sin(2 * phase) + 0.2 * np.sin(3 * phase)
    if am_rate > 0:
        tone *= 0.6 + 0.4 * np.sin(2 * np.pi * am_rate * t + rng.uniform(0, 2 * np.pi))
    ramp = min(n // 2, int(0.02 * rate))
    env = np.ones(n)
    if ramp:
        env[:ramp] = np.linspace(0, 1, ramp)
        env[-ramp:] = np.linspace(1, 0, ramp)
    y = 0.5 * tone / 1.6 * env * rng.uniform(0.6, 1.0) + noise * rng.standard_normal(n)
    return np.clip(y, -1.0, 1.0)


def synth_dataset(spec: SynthSpec, out_dir, name: str = "synth") -> DatasetManifest:
    """Generate a small acoustically separable corpus and its manifest.

    Writes ``<out_dir>/<name>.csv`` plus one 16-bit WAV per clip. Output is a
    pure function of ``spec``.
    """
    labels = spec.class_labels()
    if len(labels) < 2 or spec.speakers < 2 or spec.clips < 2:
        raise ValueError("need >= 2 classes, >= 2 speakers, >= 2 clips per cell")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    shifts = rng.uniform(0.92, 1.08, size=spec.speakers)
    rows = []
    for s in range(spec.speakers):
        spk = f"S{s + 1:02d}"
        for label in labels:
            for c in range(spec.clips):
                dur = rng.uniform(spec.min_dur, spec.max_dur)
                y = _synth_clip(rng, label, shifts[s], spec.rate, dur)
                style = None
                if spec.neutral_styles and label == "NEUTRAL":
                    style = STYLES[c % len(STYLES)]
                fname = f"{spk}_{label.lower()}_{c:02d}.wav"
                write_wav(out / fname, y, spec.rate)
                rows.append(LabeledSample(fname, label, spk, style))
    manifest = DatasetManifest(name, rows, LABELS, str(out))
    save_manifest(manifest, out / f"{name}.csv")
    return manifest

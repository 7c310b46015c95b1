"""Synthetic order-sensitive videos, manifest ingestion and frame sampling."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .rng import stream

__all__ = [
    "VideoSample",
    "DatasetSpec",
    "ManifestError",
    "gen_synthetic",
    "render_trajectory",
    "export_manifest",
    "load_manifest",
    "read_raw_frame",
    "write_raw_frame",
    "sample_frames",
    "stack_frames",
]


class ManifestError(ValueError):
    def __init__(self, path, lineno, msg):
        self.path, self.lineno = path, lineno
        where = f"{path}:{lineno}" if lineno else str(path)
        super().__init__(f"{where}: {msg}")


@dataclass
class VideoSample:
    frames: np.ndarray  # [F, C, H, W], values in [0, 1]
    label: int
    id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ValueError(f"{self.id or 'sample'}: frames must be [F, C, H, W], got {self.frames.shape}")
        if self.label < 0:
            raise ValueError(f"{self.id or 'sample'}: negative label {self.label}")

    @property
    def n_frames(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class DatasetSpec:
    """Synthetic set: a tinted blob sweeping along a class-specific axis.

    The blob's colour is a function of where it sits on the axis, so frames
    differ in appearance as well as location.

    Classes come in pairs sharing an axis and moving in opposite directions,
    so a clip of class ``2p`` played backwards is a clip of class ``2p+1``
    and only frame order separates the pair.
    """

    classes: int = 4
    samples_per_class: int = 75
    frames: int = 16
    image_size: int = 32
    pad: int = 4
    channels: int = 3
    noise: float = 0.1
    blob_sigma: float = 9.0
    amplitude: float = 0.3
    phase_range: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name in ("classes", "samples_per_class", "frames", "image_size", "channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"DatasetSpec.{name} must be positive")
        if self.pad < 0 or self.noise < 0 or self.blob_sigma <= 0:
            raise ValueError("DatasetSpec: pad and noise must be >= 0, blob_sigma > 0")
        if self.samples_per_class < 3:
            raise ValueError("DatasetSpec.samples_per_class must be >= 3 for a 2:1 split")

    @property
    def edge(self):
        return self.image_size + self.pad


def _axis(spec, label):
    n_pairs = (spec.classes + 1) // 2
    theta = np.pi * (label // 2) / n_pairs
    return np.array([np.cos(theta), np.sin(theta)])  # (x, y)


def _palette(spec, label):
    """Per-pair endpoint colours; the blob's tint slides between them."""
    n_pairs = (spec.classes + 1) // 2
    angle = 2 * np.pi * (np.arange(spec.channels) / spec.channels + (label // 2) / (2 * n_pairs))
    start = 0.5 + 0.5 * np.cos(angle)
    return start, 1.0 - start


def render_trajectory(spec, label, phase, noise_rng=None):
    """Frames [F, C, edge, edge] for one clip of ``label`` at ``phase``."""
    edge = spec.edge
    amp = spec.amplitude * edge
    direction = 1.0 if label % 2 == 0 else -1.0
    f = spec.frames
    sweep = np.linspace(-1.0, 1.0, f) if f > 1 else np.zeros(1)
    offsets = direction * amp * sweep + phase * amp
    centre = (edge - 1) / 2.0
    u = _axis(spec, label)
    yy, xx = np.mgrid[0:edge, 0:edge].astype(np.float64)
    start, end = _palette(spec, label)
    frames = np.empty((f, spec.channels, edge, edge))
    for t, s in enumerate(offsets):
        cx, cy = centre + s * u[0], centre + s * u[1]
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * spec.blob_sigma**2))
        # colour follows position along the axis, not time
        w = np.clip(0.5 + 0.5 * s / amp, 0.0, 1.0) if amp else 0.5
        frames[t] = ((1 - w) * start + w * end)[:, None, None] * blob[None]
    if noise_rng is not None and spec.noise > 0:
        frames += noise_rng.normal(0.0, spec.noise, size=frames.shape)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def gen_synthetic(spec):
    """``(train, test)`` lists, split 2:1 within each class."""
    train, test = [], []
    n_test = spec.samples_per_class // 3
    for k in range(spec.classes):
        for n in range(spec.samples_per_class):
            rng = stream(spec.seed, "sample", k, n)
            phase = rng.uniform(-spec.phase_range, spec.phase_range)
            split = "test" if n >= spec.samples_per_class - n_test else "train"
            frames = render_trajectory(spec, k, phase, noise_rng=rng)
            (test if split == "test" else train).append(
                VideoSample(frames, k, f"{split}-c{k}-{n:04d}"))
    return train, test


# -- raw frames and manifests ----------------------------------------------

def write_raw_frame(path, frame):
    frame = np.ascontiguousarray(frame, dtype="<f4")
    if frame.ndim != 3:
        raise ValueError(f"raw frames are C x H x W, got {frame.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3I", *frame.shape))
        fh.write(frame.tobytes())


def read_raw_frame(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise ValueError(f"{path}: truncated raw frame header")
    c, h, w = struct.unpack("<3I", data[:12])
    if len(data) != 12 + 4 * c * h * w:
        raise ValueError(f"{path}: header says {c}x{h}x{w} but payload has {(len(data) - 12) // 4} values")
    return np.frombuffer(data[12:], dtype="<f4").reshape(c, h, w).astype(np.float32)


def export_manifest(samples, out_dir, classes, name="manifest.txt"):
    """Write raw frames under ``out_dir/frames`` plus a manifest; returns its path."""
    frame_dir = os.path.join(out_dir, "frames")
    os.makedirs(frame_dir, exist_ok=True)
    n_frames = {s.n_frames for s in samples}
    if len(n_frames) != 1:
        raise ValueError("all samples in one manifest must share a frame count")
    lines = [f"classes={classes} frames={n_frames.pop()}"]
    for s in samples:
        if "\t" in s.id or not s.id:
            raise ValueError(f"sample id {s.id!r} is empty or contains a tab")
        rels = []
        for t, frame in enumerate(s.frames):
            rel = f"frames/{s.id}_{t:03d}.f32"
            write_raw_frame(os.path.join(out_dir, rel), frame)
            rels.append(rel)
        lines.append(f"{s.id}\t{s.label}\t{','.join(rels)}")
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def _parse_header(path, line):
    fields = dict(part.split("=", 1) for part in line.split() if "=" in part)
    try:
        classes, frames = int(fields["classes"]), int(fields["frames"])
    except (KeyError, ValueError):
        raise ManifestError(path, 1, "header must read 'classes=<n> frames=<F>'") from None
    if classes < 1 or frames < 1:
        raise ManifestError(path, 1, "classes and frames must be positive")
    return classes, frames


def is_manifest(path):
    try:
        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
    except (OSError, UnicodeDecodeError):
        return False
    words = first.split()
    return len(words) == 2 and words[0].startswith("classes=") and words[1].startswith("frames=")


def load_manifest(path):
    """Samples listed in a manifest; returns ``(samples, classes)``."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ManifestError(path, 1, "empty manifest")
    classes, n_frames = _parse_header(path, lines[0])
    samples, shape = [], None
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(path, lineno, "expected 'id<TAB>label<TAB>frame,frame,...'")
        sid, label_s, paths = parts
        try:
            label = int(label_s)
        except ValueError:
            raise ManifestError(path, lineno, f"label {label_s!r} is not an integer") from None
        if not 0 <= label < classes:
            raise ManifestError(path, lineno, f"label {label} outside declared classes 0..{classes - 1}")
        rels = [p for p in paths.split(",") if p]
        if len(rels) != n_frames:
            raise ManifestError(path, lineno, f"{len(rels)} frames listed, header declares {n_frames}")
        frames = []
        for rel in rels:
            fp = rel if os.path.isabs(rel) else os.path.join(base, rel)
            if not os.path.isfile(fp):
                raise ManifestError(path, lineno, f"missing frame file {rel}")
            try:
                frames.append(read_raw_frame(fp))
            except ValueError as exc:
                raise ManifestError(path, lineno, str(exc)) from None
        if any(f.shape != frames[0].shape for f in frames) or (shape and frames[0].shape != shape):
            raise ManifestError(path, lineno, "frame shapes disagree")
        shape = frames[0].shape
        arr = np.stack(frames)
        if arr.size and arr.max() > 1.0:
            arr = arr / 255.0
        samples.append(VideoSample(np.clip(arr, 0.0, 1.0), label, sid))
    return samples, classes


# -- sampling --------------------------------------------------------------

def sample_frames(sample, n_frames, crop, train=False, seed=0, start="center"):
    """``n_frames`` consecutive frames cropped to ``crop x crop``.

    Training draws the start offset and crop window from ``seed``; evaluation
    uses the ``start`` policy ("center" or "first") and a centre crop.
    """
    f, _, h, w = sample.frames.shape
    if f < n_frames:
        raise ValueError(f"{sample.id or 'sample'}: {f} frames, need {n_frames}")
    if h < crop or w < crop:
        raise ValueError(f"{sample.id or 'sample'}: {h}x{w} frames cannot be cropped to {crop}")
    if train:
        rng = stream(seed, "sample-frames")
        t0 = int(rng.integers(0, f - n_frames + 1))
        y0 = int(rng.integers(0, h - crop + 1))
        x0 = int(rng.integers(0, w - crop + 1))
    else:
        t0 = (f - n_frames) // 2 if start == "center" else 0
        y0, x0 = (h - crop) // 2, (w - crop) // 2
    clip = sample.frames[t0:t0 + n_frames, :, y0:y0 + crop, x0:x0 + crop]
    return VideoSample(clip.copy(), sample.label, sample.id)


def stack_frames(samples):
    """``(X, y)`` with X of shape [N, F, C, H, W]."""
    return (np.stack([s.frames for s in samples]).astype(np.float32),
            np.array([s.label for s in samples], dtype=np.int64))


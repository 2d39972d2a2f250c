"""Gaze datasets: manifest loading, raw float blobs and a synthetic eye renderer.

A manifest is a CSV with header ``path,subject,yaw_rad,pitch_rad``; paths are
relative to the manifest's directory and point at 8-bit RGB PNGs or at
``.nchw`` blobs::

    b"NCHWF32" | u32 rank | rank x u32 extents | little-endian float32 data

Pixels are kept in [0, 1]; the network sees ``(pixel - 0.5) / 0.5`` per
channel (:func:`normalize`).
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, FormatError, UsageError
from .gaze import yawpitch_to_vec

BLOB_MAGIC = b"NCHWF32"
MANIFEST_HEADER = ("path", "subject", "yaw_rad", "pitch_rad")
NORM_MEAN = 0.5
NORM_STD = 0.5
SYNTH_RANGE_DEG = 20.0


def normalize(pixels: np.ndarray) -> np.ndarray:
    return ((pixels - np.float32(NORM_MEAN)) / np.float32(NORM_STD)).astype(np.float32, copy=False)


@dataclass
class GazeSample:
    image: np.ndarray          # normalized [3, H, W]
    gaze_vec: np.ndarray       # unit [3]
    yaw_pitch: tuple
    subject: str


@dataclass
class GazeDataset:
    """Images as raw [0, 1] pixels ``[N, 3, H, W]`` plus yaw/pitch labels."""

    pixels: np.ndarray
    yaw_pitch: np.ndarray
    subjects: list
    paths: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.yaw_pitch = np.asarray(self.yaw_pitch, dtype=np.float64).reshape(-1, 2)
        self.subjects = [str(s) for s in self.subjects]
        if self.pixels.ndim != 4 or self.pixels.shape[1] != 3:
            raise UsageError(f"pixels must be [N, 3, H, W], got {self.pixels.shape}")
        if not (len(self.pixels) == len(self.yaw_pitch) == len(self.subjects)):
            raise UsageError("pixels, labels and subjects must have the same length")

    def __len__(self) -> int:
        return len(self.pixels)

    def __getitem__(self, i: int) -> GazeSample:
        yaw, pitch = self.yaw_pitch[i]
        return GazeSample(normalize(self.pixels[i]), yawpitch_to_vec(yaw, pitch),
                          (float(yaw), float(pitch)), self.subjects[i])

    @property
    def gaze(self) -> np.ndarray:
        return yawpitch_to_vec(self.yaw_pitch[:, 0], self.yaw_pitch[:, 1])

    @property
    def image_size(self) -> tuple:
        return tuple(self.pixels.shape[2:])

    def images(self, idx=None) -> np.ndarray:
        return normalize(self.pixels if idx is None else self.pixels[idx])

    def subset(self, idx) -> "GazeDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return GazeDataset(self.pixels[idx], self.yaw_pitch[idx],
                           [self.subjects[i] for i in idx],
                           [self.paths[i] for i in idx] if self.paths else [])


# ------------------------------------------------------------------ blob I/O

def write_blob(path, arr) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = BLOB_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_blob(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:len(BLOB_MAGIC)] != BLOB_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {BLOB_MAGIC!r}")
    pos = len(BLOB_MAGIC)
    try:
        (rank,) = struct.unpack_from("<I", buf, pos)
        shape = struct.unpack_from(f"<{rank}I", buf, pos + 4)
    except struct.error:
        raise FormatError(f"{path}: truncated header") from None
    pos += 4 + 4 * rank
    count = math.prod(shape)
    if len(buf) - pos != 4 * count:
        raise FormatError(f"{path}: expected {4 * count} data bytes for shape {shape}, "
                          f"found {len(buf) - pos}")
    return np.frombuffer(buf, dtype="<f4", offset=pos).reshape(shape).astype(np.float32)


def _read_image(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".nchw":
        arr = read_blob(path)
        if arr.ndim == 4 and arr.shape[0] == 1:
            arr = arr[0]
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise FormatError(f"{path}: blob must hold a [1, 3, H, W] or [3, H, W] image, got {arr.shape}")
        return arr
    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float32)
    except OSError as exc:
        raise FormatError(f"{path}: cannot decode image: {exc}") from None
    return (rgb / np.float32(255.0)).transpose(2, 0, 1).copy()


def _write_image(path: Path, pixels: np.ndarray, fmt: str) -> None:
    if fmt == "nchw":
        write_blob(path, pixels[None])
    else:
        q = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(q, "RGB").save(path)


# ----------------------------------------------------------------- manifests

def load_dataset(manifest, lenient: bool = False) -> GazeDataset:
    """Read a manifest and decode its images in row order.

    Any bad row raises :class:`DataError` naming the CSV line; with
    ``lenient=True`` such rows are skipped and described in ``errors``.
    """
    manifest = Path(manifest)
    try:
        text = manifest.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest}: {exc}") from None
    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
        raise DataError(f"{manifest}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
    root = manifest.parent
    pixels, labels, subjects, paths, errors = [], [], [], [], []
    size = None
    for lineno, row in enumerate(reader, 2):
        if not row or not "".join(row).strip():
            continue
        try:
            if len(row) != 4:
                raise DataError(f"expected 4 fields, got {len(row)}")
            rel, subject, yaw_s, pitch_s = (c.strip() for c in row)
            if not subject:
                raise DataError("empty subject")
            try:
                yaw, pitch = float(yaw_s), float(pitch_s)
            except ValueError:
                raise DataError(f"yaw/pitch must be numbers, got {yaw_s!r}, {pitch_s!r}") from None
            if not (math.isfinite(yaw) and math.isfinite(pitch)):
                raise DataError(f"yaw/pitch must be finite, got {yaw}, {pitch}")
            path = root / rel
            if not path.is_file():
                raise DataError(f"missing image file {rel}")
            img = _read_image(path)
            if size is None:
                size = img.shape
            elif img.shape != size:
                raise DataError(f"image {rel} has shape {img.shape}, expected {size}")
        except DataError as exc:
            msg = f"{manifest}:{lineno}: {exc}"
            if not lenient:
                raise type(exc)(msg) from None
            errors.append(msg)
            continue
        pixels.append(img)
        labels.append((yaw, pitch))
        subjects.append(subject)
        paths.append(rel)
    if not pixels:
        raise DataError(f"{manifest}: no loadable rows" + (f" ({len(errors)} rejected)" if errors else ""))
    return GazeDataset(np.stack(pixels), np.asarray(labels), subjects, paths, errors)


def write_dataset(ds: GazeDataset, root, fmt: str = "nchw") -> Path:
    """Write images plus ``labels.csv`` under ``root``; returns the manifest path."""
    if fmt not in ("nchw", "png"):
        raise UsageError(f"image format must be 'nchw' or 'png', got {fmt!r}")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    manifest = root / "labels.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER)
        for i in range(len(ds)):
            rel = f"images/{i:06d}.{fmt}"
            _write_image(root / rel, ds.pixels[i], fmt)
            yaw, pitch = ds.yaw_pitch[i]
            w.writerow([rel, ds.subjects[i], repr(float(yaw)), repr(float(pitch))])
    return manifest


# ----------------------------------------------------------------- synthetic

BALL_COLOR = np.array([0.92, 0.90, 0.87], dtype=np.float64)
BACKGROUND = 0.35


@dataclass(frozen=True)
class EyeGeometry:
    """Disc layout for a ``size x size`` synthetic eye, all in pixels."""

    size: int

    @property
    def center(self) -> float:
        return (self.size - 1) / 2.0

    @property
    def ball_radius(self) -> float:
        return 0.38 * self.size

    @property
    def pupil_radius(self) -> float:
        return 0.14 * self.size

    @property
    def travel(self) -> float:
        # pupil offset at the edge of the angular range; the sqrt(2) keeps the
        # pupil inside the ball even at a corner of the yaw/pitch square
        return (self.ball_radius - self.pupil_radius - 0.04 * self.size) / math.sqrt(2.0)

    def pupil_center(self, yaw: float, pitch: float) -> tuple:
        """(row, col); yaw to the subject's left moves the pupil right in the image."""
        k = self.travel / math.radians(SYNTH_RANGE_DEG)
        return self.center - k * pitch, self.center + k * yaw


def pupil_color(subject_index: int) -> np.ndarray:
    hue = (subject_index * 0.37) % 1.0
    base = np.array([0.10 + 0.15 * hue, 0.12 + 0.1 * (1 - hue), 0.08 + 0.12 * abs(0.5 - hue)])
    return base


def _coverage(dist: np.ndarray, radius: float) -> np.ndarray:
    # one-pixel linear ramp across the edge
    return np.clip(radius - dist + 0.5, 0.0, 1.0)


def render_eye(yaw: float, pitch: float, size: int, subject_index: int = 0,
               rng: np.random.Generator | None = None, noise: float = 0.04) -> np.ndarray:
    """Render one eye as [3, size, size] pixels in [0, 1].

    Background noise is drawn from ``rng``; ``rng=None`` gives the clean image.
    """
    geo = EyeGeometry(size)
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    ball = _coverage(np.hypot(rows - geo.center, cols - geo.center), geo.ball_radius)
    pr, pc = geo.pupil_center(yaw, pitch)
    pupil = _coverage(np.hypot(rows - pr, cols - pc), geo.pupil_radius)
    bg = np.full((3, size, size), BACKGROUND)
    if rng is not None and noise > 0:
        bg = bg + rng.normal(0.0, noise, size=bg.shape)
    img = bg * (1 - ball) + BALL_COLOR[:, None, None] * ball
    img = img * (1 - pupil) + pupil_color(subject_index)[:, None, None] * pupil
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def decode_pupil(pixels: np.ndarray, subject_index: int = 0) -> tuple:
    """Recover (yaw, pitch) from a clean rendering via the pupil's centroid."""
    size = pixels.shape[-1]
    geo = EyeGeometry(size)
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    inside = np.hypot(rows - geo.center, cols - geo.center) <= geo.ball_radius - 1.0
    contrast = BALL_COLOR.sum() - pupil_color(subject_index).sum()
    dark = np.where(inside, (BALL_COLOR.sum() - pixels.astype(np.float64).sum(axis=0)) / contrast, 0.0)
    total = dark.sum()
    r = (dark * rows).sum() / total
    c = (dark * cols).sum() / total
    k = geo.travel / math.radians(SYNTH_RANGE_DEG)
    return (c - geo.center) / k, (geo.center - r) / k


def synth_dataset(n: int, seed: int = 0, size: int = 224, n_subjects: int = 15,
                  noise: float = 0.04) -> GazeDataset:
    """``n`` seeded eye renderings with yaw, pitch uniform in +-20 degrees.

    Subjects are assigned round-robin and differ in pupil colour.
    """
    if n < 1:
        raise UsageError(f"synth_dataset needs n >= 1, got {n}")
    if size < 8:
        raise UsageError(f"synthetic images need size >= 8, got {size}")
    if n_subjects < 1:
        raise UsageError(f"n_subjects must be >= 1, got {n_subjects}")
    rng = np.random.default_rng(seed)
    lim = math.radians(SYNTH_RANGE_DEG)
    yp = rng.uniform(-lim, lim, size=(n, 2))
    subj = np.arange(n) % n_subjects
    pixels = np.stack([render_eye(yp[i, 0], yp[i, 1], size, int(subj[i]), rng, noise)
                       for i in range(n)])
    return GazeDataset(pixels, yp, [f"s{s:02d}" for s in subj])

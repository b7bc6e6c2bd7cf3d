"""Manifests, PPM image I/O, bilinear resizing and synthetic identities."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import SynthSpec
from .errors import DataError, FormatError, ManifestError

log = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
HEADER = ("path", "identity", "camera", "split")
HEADER_LINE = "\t".join(HEADER)


@dataclass(frozen=True)
class Sample:
    path: str
    identity: int
    camera: int
    split: str


class Manifest:
    """Dataset index. Relative paths resolve against ``root``."""

    def __init__(self, samples: Sequence[Sample], root: Optional[Path] = None, validate: bool = True):
        self.samples: List[Sample] = list(samples)
        self.root = Path(root) if root is not None else Path(".")
        if validate:
            self.validate()

    def __len__(self) -> int:
        return len(self.samples)

    def split(self, name: str) -> List[Sample]:
        return [s for s in self.samples if s.split == name]

    def resolve(self, sample: Sample) -> Path:
        p = Path(sample.path)
        return p if p.is_absolute() else self.root / p

    @property
    def cameras(self) -> List[int]:
        return sorted({s.camera for s in self.samples})

    @property
    def n_train_classes(self) -> int:
        return len({s.identity for s in self.split("train")})

    def validate(self) -> None:
        seen = set()
        for s in self.samples:
            if s.split not in SPLITS:
                raise ManifestError(f"unknown split {s.split!r} for {s.path}")
            key = (s.path, s.split)
            if key in seen:
                raise ManifestError(f"duplicate manifest row: {s.path} in split {s.split}")
            seen.add(key)
        train_ids = sorted({s.identity for s in self.split("train")})
        if train_ids and train_ids != list(range(len(train_ids))):
            raise ManifestError("train identities must be contiguous integers 0..C-1")
        both = {s.path for s in self.split("query")} & {s.path for s in self.split("gallery")}
        if both:
            raise ManifestError(f"path appears in both query and gallery: {sorted(both)[0]}")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        rows = list(csv.reader(text.splitlines(), delimiter="\t"))
        if not rows or tuple(rows[0]) != HEADER:
            raise ManifestError(f"manifest {path} must start with the header {HEADER_LINE!r}")
        samples = []
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(row)}")
            try:
                samples.append(Sample(row[0], int(row[1]), int(row[2]), row[3]))
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
        return cls(samples, root=path.parent)

    def save(self, path) -> None:
        lines = [HEADER_LINE]
        lines += [f"{s.path}\t{s.identity}\t{s.camera}\t{s.split}" for s in self.samples]
        Path(path).write_text("\n".join(lines) + "\n")

    def load_images(self, split: str) -> np.ndarray:
        return np.stack([load_image(self.resolve(s)) for s in self.split(split)])


# images


def write_ppm(path, image: np.ndarray) -> None:
    """Write a ``3 x H x W`` image in [0, 1] as binary PPM (P6, maxval 255)."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"expected a 3 x H x W image, got shape {img.shape}")
    raw = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = raw.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + raw.tobytes())


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise FormatError("not a binary PPM: magic must be P6", offset=0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed PPM header", offset=pos)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("malformed PPM header: missing separator before pixel data", offset=pos)
    pos += 1
    w, h, maxval = fields
    if w < 1 or h < 1 or maxval != 255:
        raise FormatError(f"unsupported PPM geometry {w}x{h} or maxval {maxval}", offset=pos)
    need = w * h * 3
    if len(buf) - pos < need:
        raise FormatError(f"truncated PPM payload: need {need} bytes, have {len(buf) - pos}", offset=len(buf))
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float64) / 255.0


def load_image(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return decode_ppm(buf)


def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of ``C x H x W`` with pixel-centre alignment."""
    if height < 1 or width < 1:
        raise DataError(f"resize targets must be positive, got {height}x{width}")
    img = np.asarray(image, dtype=np.float64)
    c, h, w = img.shape
    if (h, w) == (height, width):
        return img.copy()
    y0, y1, wy = _axis_weights(h, height)
    x0, x1, wx = _axis_weights(w, width)
    rows = img[:, y0, :] * (1 - wy)[None, :, None] + img[:, y1, :] * wy[None, :, None]
    return rows[:, :, x0] * (1 - wx)[None, None, :] + rows[:, :, x1] * wx[None, None, :]


# synthetic identities


def _identity_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """A left-right symmetric appearance: coloured horizontal bands with stripes."""
    n_bands = 4
    edges = np.linspace(0, h, n_bands + 1).round().astype(int)
    img = np.empty((3, h, w))
    yy = np.arange(h)[:, None]
    xx = np.abs(np.arange(w) - (w - 1) / 2.0)[None, :]
    for b in range(n_bands):
        base, accent = rng.uniform(0.1, 0.9, size=3), rng.uniform(0.1, 0.9, size=3)
        freq = rng.uniform(0.3, 1.2)
        phase = rng.uniform(0, 2 * np.pi)
        if rng.random() < 0.5:
            pattern = 0.5 + 0.5 * np.sin(freq * yy + phase) + 0 * xx
        else:
            pattern = 0.5 + 0.5 * np.sin(freq * xx + phase) + 0 * yy
        sl = slice(edges[b], edges[b + 1])
        mix = pattern[sl]
        img[:, sl, :] = base[:, None, None] * (1 - mix)[None] + accent[:, None, None] * mix[None]
    return img


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = img.shape[1:]
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[:, ys][:, :, xs]


def synth_generate(spec: SynthSpec, out_dir) -> Manifest:
    """Write a synthetic identity dataset and its ``manifest.tsv`` into ``out_dir``.

    ``closed`` protocol: every identity contributes train images, one
    gallery image (camera 0) and ``queries_per_identity`` queries (other
    cameras when available). ``open`` protocol: the first half of the
    identities are train-only, each remaining identity puts one random image
    in the gallery and the rest in the query set.
    """
    spec.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    h, w = spec.height, spec.width
    cam_rng = np.random.default_rng([spec.seed, 1_000_003])
    cam_cast = np.vstack([np.ones(3)] + [cam_rng.uniform(0.85, 1.15, size=3) for _ in range(spec.n_cameras - 1)])
    n_train_ids = spec.n_identities // 2
    samples = []
    for ident in range(spec.n_identities):
        rng = np.random.default_rng([spec.seed, ident])
        texture = _identity_texture(rng, h, w)
        n = spec.images_per_identity
        if spec.protocol == "closed":
            roles = ["gallery"] + ["query"] * spec.queries_per_identity
            roles += ["train"] * (n - len(roles))
            label = ident
        elif ident < n_train_ids:
            roles, label = ["train"] * n, ident
        else:
            roles = ["query"] * n
            roles[int(rng.integers(n))] = "gallery"
            label = ident
        for k, role in enumerate(roles):
            if spec.n_cameras == 1 or role == "gallery":
                cam = 0
            elif role == "query":
                cam = int(rng.integers(1, spec.n_cameras))
            else:
                cam = int(rng.integers(spec.n_cameras))
            max_dy, max_dx = int(spec.translation * h), int(spec.translation * w)
            dy = int(rng.integers(-max_dy, max_dy + 1))
            dx = int(rng.integers(-max_dx, max_dx + 1))
            img = _shift(texture, dy, dx)
            img = img * rng.uniform(1 - spec.brightness, 1 + spec.brightness) * cam_cast[cam][:, None, None]
            img = img + rng.normal(0.0, spec.noise, size=img.shape)
            rel = f"images/{ident:04d}_{k:03d}.ppm"
            write_ppm(out / rel, np.clip(img, 0.0, 1.0))
            samples.append(Sample(rel, label, cam, role))
    manifest = Manifest(samples, root=out)
    manifest.save(out / "manifest.tsv")
    log.info("wrote %d synthetic images for %d identities to %s", len(samples), spec.n_identities, out)
    return manifest


def split_by_role(manifest: Manifest) -> Dict[str, List[Sample]]:
    return {name: manifest.split(name) for name in SPLITS}

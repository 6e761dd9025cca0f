"""Synthetic shape dataset, PPM image IO, manifests and token corpora.

Class ``c`` renders shape ``c % 3`` (circle, square, triangle) in palette
``c // 3`` over a dark noisy background, with jittered position, size and
color. Rendering is a pure function of ``(spec, index)``.
"""

from __future__ import annotations

import hashlib
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, MagicError, MaxvalError, TruncatedError

SHAPES = ("circle", "square", "triangle")
PALETTES = np.array(
    [
        [0.90, 0.15, 0.15],  # red
        [0.15, 0.85, 0.20],  # green
        [0.20, 0.30, 0.95],  # blue
        [0.90, 0.85, 0.15],  # yellow
        [0.85, 0.20, 0.85],  # magenta
        [0.15, 0.85, 0.85],  # cyan
    ]
)
MANIFEST_HEADER = "#vim-manifest v1"


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic shape family.

    Sizes are half-extents as fractions of ``image_size``.
    """

    image_size: int = 32
    num_classes: int = 10
    samples_per_class: int = 200
    seed: int = 0
    val_fraction: float = 0.1
    size_min: float = 0.30
    size_max: float = 0.42
    color_jitter: float = 0.08
    background_max: float = 0.15
    noise: float = 0.02

    def validate(self) -> SyntheticSpec:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.num_classes > len(SHAPES) * len(PALETTES):
            raise ConfigError(f"at most {len(SHAPES) * len(PALETTES)} classes are supported")
        if self.samples_per_class < 1 or self.image_size < 8:
            raise ConfigError("need samples_per_class >= 1 and image_size >= 8")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if not 0.0 < self.size_min <= self.size_max < 0.5:
            raise ConfigError("need 0 < size_min <= size_max < 0.5")
        return self

    @property
    def total(self) -> int:
        return self.num_classes * self.samples_per_class


def class_of(spec: SyntheticSpec, index: int) -> int:
    return index % spec.num_classes


def shape_mask(kind: int, size: int, cx: float, cy: float, s: float) -> np.ndarray:
    """Boolean coverage of pixel centers for shape ``kind`` centered at (cx, cy), half-extent s."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if kind == 0:
        return dx * dx + dy * dy <= s * s
    if kind == 1:
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    # upright isosceles triangle: apex at top, base at cy + s
    return (dy <= s) & (np.abs(dx) <= (dy + s) / 2)


def render(spec: SyntheticSpec, index: int) -> tuple[np.ndarray, int]:
    """Image [H, W, 3] on the 1/255 lattice and its label."""
    label = class_of(spec, index)
    rng = np.random.default_rng([spec.seed, index])
    n = spec.image_size
    s = rng.uniform(spec.size_min, spec.size_max) * n
    cx = rng.uniform(s, n - s)
    cy = rng.uniform(s, n - s)
    bg = rng.uniform(0.0, spec.background_max, size=3)
    fg = np.clip(PALETTES[label // 3] + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3), 0.0, 1.0)
    img = np.empty((n, n, 3))
    img[:] = bg
    img[shape_mask(label % 3, n, cx, cy, s)] = fg
    img += rng.uniform(-spec.noise, spec.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return quantize_255(img), label


def quantize_255(img: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5) / 255.0


def split_of(spec: SyntheticSpec) -> np.ndarray:
    """Boolean val mask: the ``val_fraction`` of indices with the smallest hash."""
    keys = [hashlib.sha256(f"{spec.seed}:{i}".encode()).digest()[:8] for i in range(spec.total)]
    order = sorted(range(spec.total), key=lambda i: keys[i])
    n_val = int(round(spec.val_fraction * spec.total))
    mask = np.zeros(spec.total, dtype=bool)
    mask[order[:n_val]] = True
    return mask


def generate_arrays(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """In-memory dataset: (images [N, H, W, 3] float32, labels [N], val mask [N])."""
    spec.validate()
    imgs = np.empty((spec.total, spec.image_size, spec.image_size, 3), dtype=np.float32)
    labels = np.empty(spec.total, dtype=np.int64)
    for i in range(spec.total):
        img, labels[i] = render(spec, i)
        imgs[i] = img
    return imgs, labels, split_of(spec)


# -- rule-based oracle classifier ---------------------------------------------------------

_SHAPE_FILL = np.array([np.pi / 4, 1.0, 0.5])  # circle, square, triangle bbox fill ratios


def _foreground(img: np.ndarray, threshold: float = 0.45) -> np.ndarray:
    return img.max(axis=-1) > threshold


def shape_features(img: np.ndarray) -> tuple[np.ndarray, float]:
    """Mean foreground color and foreground / bounding-box fill ratio."""
    mask = _foreground(img)
    if not mask.any():
        return np.zeros(3), 0.0
    ys, xs = np.nonzero(mask)
    box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
    return img[mask].mean(axis=0), mask.sum() / box


def classify(img: np.ndarray, num_classes: int = 10) -> int:
    """Hard rule: nearest palette by color, shape by fill-ratio thresholds."""
    color, fill = shape_features(img)
    palette = int(np.argmin(((PALETTES[: (num_classes + 2) // 3] - color) ** 2).sum(axis=1)))
    shape = 1 if fill > 0.9 else (0 if fill > 0.65 else 2)
    return min(palette * 3 + shape, num_classes - 1)


def class_scores(images: np.ndarray, num_classes: int = 10, sharpness: float = 20.0) -> np.ndarray:
    """Soft class probabilities [B, num_classes] from the same color and fill cues."""
    images = np.asarray(images, dtype=np.float64)
    n_pal = (num_classes + 2) // 3
    out = np.empty((len(images), num_classes))
    for b, img in enumerate(images):
        color, fill = shape_features(img)
        pal = -sharpness * ((PALETTES[:n_pal] - color) ** 2).sum(axis=1)
        shp = -sharpness * 4.0 * (_SHAPE_FILL - fill) ** 2
        logits = (pal[:, None] + shp[None, :]).reshape(-1)[:num_classes]
        logits -= logits.max()
        p = np.exp(logits)
        out[b] = p / p.sum()
    return out


# -- PPM ---------------------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def ppm_to_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"expected an [H, W, 3] image, got shape {img.shape}")
    h, w, _ = img.shape
    raw = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + raw.tobytes()


def ppm_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise MagicError(f"not a binary P6 file (magic {buf[:2]!r})")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise TruncatedError("PPM header ended early")
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"bad PPM header field {m.group(1)!r}") from None
        pos = m.end()
    w, h, maxval = fields
    if maxval != 255:
        raise MaxvalError(f"maxval {maxval} is not supported (need 255)")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise TruncatedError("PPM header missing the separator before the payload")
    pos += 1
    need = w * h * 3
    if len(buf) - pos < need:
        raise TruncatedError(f"PPM payload has {len(buf) - pos} bytes, expected {need}")
    if len(buf) - pos > need:
        raise FormatError(f"{len(buf) - pos - need} trailing bytes after PPM payload")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3) / 255.0


def write_ppm(path, img: np.ndarray) -> None:
    _atomic_write(path, ppm_to_bytes(img))


def read_ppm(path) -> np.ndarray:
    return ppm_from_bytes(Path(path).read_bytes())


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# -- manifests ----------------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    """``(relative path, label)`` entries resolved against ``root``."""

    split: str
    entries: list[tuple[str, int | None]] = field(default_factory=list)
    root: Path = field(default_factory=Path)
    version: int = 1

    def paths(self) -> list[Path]:
        return [self.root / p for p, _ in self.entries]

    def labels(self) -> np.ndarray | None:
        labels = [lbl for _, lbl in self.entries]
        if any(lbl is None for lbl in labels):
            return None
        return np.asarray(labels, dtype=np.int64)

    def validate(self, num_classes: int | None = None) -> DatasetManifest:
        for rel, label in self.entries:
            if not (self.root / rel).is_file():
                raise FormatError(f"manifest entry {rel!r} does not exist under {self.root}")
            if label is not None and (label < 0 or (num_classes is not None and label >= num_classes)):
                raise FormatError(f"label {label} of {rel!r} outside [0, {num_classes})")
        return self


def manifest_to_text(manifest: DatasetManifest) -> str:
    lines = [MANIFEST_HEADER]
    for rel, label in manifest.entries:
        if "\t" in rel or "\n" in rel:
            raise FormatError(f"path {rel!r} contains a tab or newline")
        lines.append(f"{rel}\t{'' if label is None else label}")
    return "\n".join(lines) + "\n"


def manifest_from_text(text: str, split: str = "", root=".") -> DatasetManifest:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise MagicError(f"manifest must start with {MANIFEST_HEADER!r}")
    entries: list[tuple[str, int | None]] = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        rel, sep, label = line.partition("\t")
        if not sep:
            raise FormatError(f"manifest line {lineno}: expected path<TAB>label")
        label = label.strip()
        try:
            entries.append((rel, int(label) if label else None))
        except ValueError:
            raise FormatError(f"manifest line {lineno}: bad label {label!r}") from None
    return DatasetManifest(split=split, entries=entries, root=Path(root))


def write_manifest(path, manifest: DatasetManifest) -> None:
    Path(path).write_text(manifest_to_text(manifest), encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return manifest_from_text(text, split=path.stem, root=path.parent)


def gen_synthetic(spec: SyntheticSpec, out_dir) -> dict[str, DatasetManifest]:
    """Write every sample as PPM plus ``train.manifest`` / ``val.manifest`` under ``out_dir``."""
    spec.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    val = split_of(spec)
    manifests = {"train": DatasetManifest("train", root=out), "val": DatasetManifest("val", root=out)}
    for i in range(spec.total):
        img, label = render(spec, i)
        rel = f"images/{i:05d}.ppm"
        write_ppm(out / rel, img)
        manifests["val" if val[i] else "train"].entries.append((rel, label))
    for name, m in manifests.items():
        write_manifest(out / f"{name}.manifest", m)
    return manifests


def load_images(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray | None]:
    """Stack every image of the manifest as float32 [N, H, W, 3]."""
    imgs = [read_ppm(p) for p in manifest.paths()]
    if not imgs:
        raise ConfigError(f"manifest {manifest.split!r} is empty")
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise ConfigError(f"images have mixed shapes {sorted(shapes)}")
    return np.stack(imgs).astype(np.float32), manifest.labels()


# -- token corpora --------------------------------------------------------------------------------


def encode_corpus(manifest: DatasetManifest, params, codec_config, out_dir, batch_size: int = 64) -> DatasetManifest:
    """Encode every image with a frozen codec into one VIMQ file each; returns the token manifest."""
    from . import codec
    from . import tensor as T
    from .formats import write_grid
    from .prior import TokenGrid

    images, labels = load_images(manifest)
    size = codec_config.image_size
    if images.shape[1:] != (size, size, codec_config.channels):
        raise ConfigError(f"images are {images.shape[1:]}, codec expects {(size, size, codec_config.channels)}")
    out = Path(out_dir)
    (out / "tokens").mkdir(parents=True, exist_ok=True)
    K = codec_config.quantizer.K
    result = DatasetManifest(manifest.split, root=out)
    for s in range(0, len(images), batch_size):
        with T.no_grad():
            _, tokens = codec.encode(images[s:s + batch_size], params, codec_config)
        for j, grid in enumerate(tokens):
            i = s + j
            rel, label = manifest.entries[i]
            name = f"tokens/{Path(rel).stem}.vimq"
            write_grid(out / name, TokenGrid(grid.shape[0], grid.shape[1], grid, label), K)
            result.entries.append((name, label))
    write_manifest(out / f"{manifest.split}.manifest", result)
    return result


def load_tokens(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray | None, int, tuple[int, int]]:
    """Read a token manifest: (ids [N, h*w], labels or None, K, (h, w))."""
    from .formats import read_grid
    from .prior import stack_grids

    grids, Ks = [], set()
    for p in manifest.paths():
        g, K = read_grid(p)
        grids.append(g)
        Ks.add(K)
    if not grids:
        raise ConfigError(f"token manifest {manifest.split!r} is empty")
    if len(Ks) != 1 or len({(g.height, g.width) for g in grids}) != 1:
        raise ConfigError("token files disagree on vocabulary size or grid shape")
    ids, labels = stack_grids(grids)
    return ids, labels, Ks.pop(), (grids[0].height, grids[0].width)

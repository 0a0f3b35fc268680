"""Synthetic two-style landscape dataset, normalisation and PGM image I/O.

Images are layered mountain ridgelines drawn from 1-D value noise. The
"chinese" style is soft, foggy and low-contrast; the "modern" style is sharp
and high-contrast.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import RandomStream

PROMPTS = {
    "chinese": "A picture of Chinese Landscape Painting",
    "modern": "A picture of Modern Landscape Painting",
}
# relative class sizes mirrored by the synthetic split
STYLE_COUNTS = {"chinese": 1973, "modern": 6335}
NORMALIZATION = "x/127.5-1"


@dataclass(frozen=True)
class StyleParams:
    style: str
    layers: tuple  # inclusive range of ridge layers
    frequency: float  # value-noise knots per image width
    contrast: float  # spread of layer tones
    fog: float  # 0 = none, 1 = layers fade fully into the sky toward their base
    softness: float  # ridge edge width in pixels
    base_seed: int = 0


STYLES = {
    "chinese": StyleParams("chinese", (3, 5), 2.5, 0.55, 0.7, 1.4),
    "modern": StyleParams("modern", (2, 3), 6.0, 1.0, 0.0, 0.25),
}


def style_split(total: int) -> tuple[int, int]:
    """Split ``total`` images between the two styles at the reference class ratio."""
    a = int(round(total * STYLE_COUNTS["chinese"] / sum(STYLE_COUNTS.values())))
    return a, total - a


def _value_noise(stream: RandomStream, size: int, frequency: float) -> np.ndarray:
    knots = int(np.ceil(frequency)) + 2
    values = stream.uniform(knots)
    pos = np.arange(size) / size * frequency
    i = np.floor(pos).astype(int)
    f = pos - i
    f = (1 - np.cos(np.pi * f)) / 2
    return values[i] * (1 - f) + values[i + 1] * f


def render_landscape(style: StyleParams, size: int, stream: RandomStream) -> np.ndarray:
    """One grayscale uint8 image of shape (size, size)."""
    lo, hi = style.layers
    n_layers = lo + int(stream.integers(hi - lo + 1, 1)[0])
    y = np.arange(size, dtype=np.float64)[:, None]
    if style.style == "chinese":
        sky = 0.88 + 0.06 * stream.uniform(1)[0]
    else:
        sky = 0.75 + 0.2 * stream.uniform(1)[0]
    img = np.full((size, size), sky)
    for layer in range(n_layers):
        depth = (layer + 1) / n_layers  # 1 = nearest
        base = size * (0.3 + 0.5 * depth) + size * 0.05 * (stream.uniform(1)[0] - 0.5)
        amp = size * (0.25 + 0.15 * stream.uniform(1)[0])
        ridge = base - amp * (0.6 * _value_noise(stream, size, style.frequency) + 0.4 * _value_noise(stream, size, 2 * style.frequency))
        tone = sky - style.contrast * (0.25 + 0.6 * depth) - 0.05 * stream.uniform(1)[0]
        alpha = 1.0 / (1.0 + np.exp(-(y - ridge[None, :]) / max(style.softness, 1e-3)))
        if style.fog > 0:
            below = np.clip((y - ridge[None, :]) / (0.35 * size), 0.0, 1.0)
            layer_img = tone + style.fog * (sky - tone) * below * (1.0 - 0.5 * depth)
        else:
            layer_img = np.full_like(img, tone)
        img = img * (1 - alpha) + layer_img * alpha
    grain = 0.015 * (stream.uniform((size, size)) - 0.5)
    return np.clip(np.round((img + grain) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- normalisation


def normalize(pixels) -> np.ndarray:
    """Map [0, 255] to [-1, 1] via ``x / 127.5 - 1``."""
    p = np.asarray(pixels, dtype=np.float64)
    if p.size and (p.min() < 0 or p.max() > 255):
        raise ValueError("pixel values must lie in [0, 255]")
    return (p / 127.5 - 1.0).astype(np.float32)


def denormalize(x) -> np.ndarray:
    return np.clip(np.round((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- PGM


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM images must be 2-D uint8 arrays")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5)")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        try:
            fields.append(int(raw[start:pos]))
        except ValueError:
            raise ValueError(f"{path}: malformed PGM header") from None
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    pos += 1
    data = raw[pos : pos + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated PGM data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def contact_sheet(images, cols: int, gap: int = 2, fill: int = 255) -> np.ndarray:
    """Tile 2-D uint8 images row-major with ``gap``-pixel separators between tiles."""
    images = [np.asarray(im) for im in images]
    if not images:
        raise ValueError("no images to tile")
    h, w = images[0].shape
    rows = -(-len(images) // cols)
    sheet = np.full((rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap), fill, dtype=np.uint8)
    for k, im in enumerate(images):
        r, c = divmod(k, cols)
        sheet[r * (h + gap) : r * (h + gap) + h, c * (w + gap) : c * (w + gap) + w] = im
    return sheet


# ---------------------------------------------------------------- manifest


@dataclass
class DatasetManifest:
    root: str
    image_size: int
    records: list = field(default_factory=list)
    normalization: str = NORMALIZATION

    def to_json(self) -> dict:
        return asdict(self)

    def save(self) -> Path:
        path = Path(self.root) / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=1))
        return path

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        path = Path(root)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read manifest {path}: {exc}") from exc
        d["root"] = str(path.parent)
        return cls(**d)

    def filter(self, style: str | None) -> list:
        if style is None:
            return list(self.records)
        if style not in PROMPTS:
            raise ValueError(f"unknown style {style!r}; expected one of {sorted(PROMPTS)}")
        return [r for r in self.records if r["style"] == style]

    def load_images(self, style: str | None = None):
        """Normalised images (n, 1, s, s) and their prompts."""
        records = self.filter(style)
        if not records:
            raise ValueError(f"no records for class filter {style!r}")
        images = np.stack([normalize(read_pgm(Path(self.root) / r["file"]))[None] for r in records])
        return images, [r["prompt"] for r in records]

    def verify(self) -> list[str]:
        problems = []
        for r in self.records:
            path = Path(self.root) / r["file"]
            if not path.exists():
                problems.append(f"missing {r['file']}")
                continue
            if hashlib.sha256(path.read_bytes()).hexdigest() != r.get("sha256"):
                problems.append(f"hash mismatch {r['file']}")
                continue
            try:
                im = read_pgm(path)
            except ValueError as exc:
                problems.append(str(exc))
                continue
            if im.shape != (self.image_size, self.image_size):
                problems.append(f"wrong size {r['file']}")
        return problems


def synth_generate(count_a: int, count_b: int, size: int, seed: int, out_dir) -> DatasetManifest:
    """Write ``count_a`` chinese-style and ``count_b`` modern-style images plus manifest.json."""
    if count_a < 1 or count_b < 1:
        raise ValueError("both class counts must be at least 1")
    if size not in (16, 32, 64):
        raise ValueError("size must be 16, 32 or 64")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"dataset directory {out} is not writable")
    manifest = DatasetManifest(str(out), size)
    styles = ["chinese"] * count_a + ["modern"] * count_b
    for index, style in enumerate(styles):
        img = render_landscape(STYLES[style], size, RandomStream(seed, index))
        rel = f"images/{index:05d}.pgm"
        write_pgm(out / rel, img)
        manifest.records.append(
            {
                "file": rel,
                "prompt": PROMPTS[style],
                "style": style,
                "seed": seed,
                "index": index,
                "sha256": hashlib.sha256((out / rel).read_bytes()).hexdigest(),
            }
        )
    manifest.save()
    return manifest


def batch_iter(manifest: DatasetManifest, batch_size: int, stream: RandomStream, class_filter: str | None = None):
    """One shuffled epoch of ``(images, prompts)`` batches; the last batch may be short."""
    images, prompts = manifest.load_images(class_filter)
    order = stream.permutation(len(images))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield images[idx], [prompts[i] for i in idx]

"""Synthetic lung phantoms, common corruptions and binary PGM I/O."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# ---------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 32
    num_samples: int = 1000
    positive_fraction: float = 0.5
    lesion_count_range: tuple[int, int] = (1, 4)
    lesion_contrast_range: tuple[float, float] = (0.06, 0.12)
    lesion_sigma_range: tuple[float, float] = (0.14, 0.22)
    background_noise_sigma: float = 0.04
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16")
        if self.num_samples < 0:
            raise ValueError("num_samples must be non-negative")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ValueError("positive_fraction must lie in [0, 1]")
        lo, hi = self.lesion_count_range
        if not 1 <= lo <= hi:
            raise ValueError("lesion_count_range must satisfy 1 <= lo <= hi")


@dataclass
class Phantoms:
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    lesion_masks: np.ndarray  # (N, H, W) bool
    lung_masks: np.ndarray  # (N, H, W) bool

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Phantoms":
        return Phantoms(self.images[idx], self.labels[idx], self.lesion_masks[idx], self.lung_masks[idx])


def _ellipse(u, v, cu, cv, au, av):
    return ((u - cu) / au) ** 2 + ((v - cv) / av) ** 2 <= 1.0


def _one_phantom(spec: PhantomSpec, index: int, positive: bool):
    rng = np.random.default_rng([spec.seed, index])
    n = spec.image_size
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    v, u = np.meshgrid(coords, coords, indexing="ij")

    img = np.full((n, n), 0.05)
    jit = lambda s: rng.uniform(-s, s)  # noqa: E731
    body = _ellipse(u, v, jit(0.03), jit(0.03), 0.86 + jit(0.05), 0.72 + jit(0.05))
    img[body] = 0.58 + jit(0.04)
    spine = _ellipse(u, v, jit(0.02), 0.5 + jit(0.03), 0.1, 0.1)
    img[spine] = 0.85

    lung_value = 0.18 + jit(0.04)
    lung = np.zeros((n, n), dtype=bool)
    dv = jit(0.04)
    for side in (-1.0, 1.0):
        lung |= _ellipse(u, v, side * (0.38 + jit(0.03)), -0.05 + dv, 0.27 + jit(0.03), 0.46 + jit(0.04))
    img[lung] = lung_value

    lesion = np.zeros((n, n), dtype=bool)
    if positive:
        count = rng.integers(spec.lesion_count_range[0], spec.lesion_count_range[1] + 1)
        candidates = np.argwhere(lung)
        for _ in range(count):
            cy, cx = candidates[rng.integers(len(candidates))]
            sigma = rng.uniform(*spec.lesion_sigma_range)
            amp = rng.uniform(*spec.lesion_contrast_range)
            r2 = (u - coords[cx]) ** 2 + (v - coords[cy]) ** 2
            blob = np.exp(-r2 / (2 * sigma**2))
            img += amp * blob * lung
            lesion |= (blob > 0.5) & lung
    img += rng.normal(0.0, spec.background_noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0), lesion, lung


# keeps the label draw independent of other consumers of default_rng(seed)
_LABEL_STREAM = 0x6C616265


def generate_phantoms(spec: PhantomSpec) -> Phantoms:
    """Body ellipse, two dark lungs and a bright spine; positives carry gaussian lesions.

    Sample ``i`` depends only on ``(seed, i)`` and its label; labels come from
    a seeded permutation with exactly ``round(positive_fraction * N)`` positives.
    """
    n = spec.num_samples
    n_pos = int(round(spec.positive_fraction * n))
    labels = np.zeros(n, dtype=np.int64)
    labels[np.random.default_rng([_LABEL_STREAM, spec.seed]).permutation(n)[:n_pos]] = 1
    size = spec.image_size
    images = np.empty((n, size, size), dtype=np.float32)
    lesions = np.zeros((n, size, size), dtype=bool)
    lungs = np.zeros((n, size, size), dtype=bool)
    for i in range(n):
        images[i], lesions[i], lungs[i] = _one_phantom(spec, i, bool(labels[i]))
    return Phantoms(images, labels, lesions, lungs)


# ---------------------------------------------------------------------------
# corruptions

CORRUPTIONS = ("gaussian_noise", "shot_noise", "impulse_noise", "contrast", "brightness")

# severity 1..5, one row per kind
CORRUPTION_TABLE: dict[str, tuple[float, ...]] = {
    "gaussian_noise": (0.02, 0.04, 0.06, 0.09, 0.12),  # noise std
    "shot_noise": (250.0, 120.0, 60.0, 30.0, 15.0),  # photons per unit intensity
    "impulse_noise": (0.01, 0.02, 0.04, 0.07, 0.10),  # salt-and-pepper fraction
    "contrast": (0.75, 0.6, 0.45, 0.3, 0.2),  # factor around the image mean
    "brightness": (0.05, 0.1, 0.15, 0.2, 0.3),  # additive offset
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_TABLE:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.severity not in (1, 2, 3, 4, 5):
            raise ValueError("severity must be in 1..5")

    @property
    def parameter(self) -> float:
        return CORRUPTION_TABLE[self.kind][self.severity - 1]


def corrupt(x, spec: CorruptionSpec, seed: int = 0) -> np.ndarray:
    """Apply one corruption to an image or a stack of images; result clamped to [0, 1]."""
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    xf = x.astype(np.float64)
    rng = np.random.default_rng([seed, CORRUPTIONS.index(spec.kind), spec.severity])
    c = spec.parameter
    if spec.kind == "gaussian_noise":
        out = xf + rng.normal(0.0, c, xf.shape)
    elif spec.kind == "shot_noise":
        out = rng.poisson(xf * c) / c
    elif spec.kind == "impulse_noise":
        out = xf.copy()
        hit = rng.random(xf.shape) < c
        out[hit] = rng.integers(0, 2, int(hit.sum()))
    elif spec.kind == "contrast":
        m = xf.mean(axis=(-2, -1), keepdims=True)
        out = (xf - m) * c + m
    else:
        out = xf + c
    return np.clip(out, 0.0, 1.0).astype(dtype)


# ---------------------------------------------------------------------------
# PGM (P5, maxval <= 255)


class PgmError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _pgm_tokens(buf: bytes, count: int):
    pos = 2
    out = []
    while len(out) < count:
        if pos >= len(buf):
            raise PgmError("truncated header", pos)
        ch = buf[pos:pos + 1]
        if ch == b"#":
            end = buf.find(b"\n", pos)
            if end < 0:
                raise PgmError("unterminated comment in header", pos)
            pos = end + 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
                pos += 1
            tok = buf[start:pos]
            if not tok.isdigit():
                raise PgmError(f"expected an integer, found {tok[:16]!r}", start)
            out.append((int(tok), start))
    return out, pos


def parse_pgm(buf: bytes) -> np.ndarray:
    if len(buf) < 2:
        raise PgmError("file too short for a PGM header", 0)
    magic = buf[:2]
    if magic == b"P2":
        raise PgmError("ASCII PGM (P2) is not supported; expected binary P5", 0)
    if magic != b"P5":
        raise PgmError(f"bad magic {magic!r}; expected b'P5'", 0)
    toks, pos = _pgm_tokens(buf, 3)
    (w, wo), (h, ho), (maxval, mo) = toks
    if w <= 0:
        raise PgmError("width must be positive", wo)
    if h <= 0:
        raise PgmError("height must be positive", ho)
    if not 0 < maxval <= 255:
        raise PgmError(f"unsupported maxval {maxval}", mo)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PgmError("missing whitespace after maxval", pos)
    pos += 1
    need = w * h
    if len(buf) - pos < need:
        raise PgmError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}", len(buf))
    pix = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w)
    return pix.astype(np.float64) / maxval


def pgm_read(path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())


def encode_pgm(img) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = q.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def pgm_write(path, img):
    Path(path).write_bytes(encode_pgm(img))


# ---------------------------------------------------------------------------
# dataset directories: images/*.pgm, masks/*.pgm, manifest.csv (path,label)


def write_dataset(out_dir, data: Phantoms) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["path", "label"])
    for i in range(len(data)):
        sid = f"{i:05d}"
        rel = f"images/{sid}.pgm"
        pgm_write(out / rel, data.images[i])
        pgm_write(out / "masks" / f"{sid}_lesion.pgm", data.lesion_masks[i])
        pgm_write(out / "masks" / f"{sid}_lung.pgm", data.lung_masks[i])
        writer.writerow([rel, int(data.labels[i])])
    manifest = out / "manifest.csv"
    manifest.write_text(buf.getvalue(), encoding="utf-8")
    return manifest


def read_dataset(data_dir) -> tuple[Phantoms, list[str]]:
    """Load a dataset written by :func:`write_dataset`; returns (data, sample ids)."""
    root = Path(data_dir)
    with open(root / "manifest.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{root}/manifest.csv lists no samples")
    images, labels, lesions, lungs, ids = [], [], [], [], []
    for row in rows:
        path = root / row["path"]
        sid = path.stem
        img = pgm_read(path)
        images.append(img)
        labels.append(int(row["label"]))
        ids.append(sid)
        les = root / "masks" / f"{sid}_lesion.pgm"
        lun = root / "masks" / f"{sid}_lung.pgm"
        lesions.append(pgm_read(les) > 0.5 if les.exists() else np.zeros(img.shape, bool))
        lungs.append(pgm_read(lun) > 0.5 if lun.exists() else np.zeros(img.shape, bool))
    data = Phantoms(np.stack(images).astype(np.float32), np.asarray(labels, dtype=np.int64),
                    np.stack(lesions), np.stack(lungs))
    return data, ids

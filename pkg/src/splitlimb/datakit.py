"""Dataset plumbing: synthesis, image ops, vertical sharding, archives.

Images are float32 arrays in [0, 1], shape [h, w].  A "shard" is a vertical
strip of every image flattened row-major; limb i holds strip i.  All
generation and preprocessing here is elementwise or order-pinned arithmetic,
so every party (and the monolithic reference) reconstructs byte-identical
data from the same seed or the same files.

Values that reach training are always on the 256-level grid k/255 (the
quantization a PGM round-trip imposes), so in-memory runs and runs that go
through on-disk archives see exactly the same numbers.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .rng import Rng, derive_seed

GRAY_R = np.float32(0.299)
GRAY_G = np.float32(0.587)
GRAY_B = np.float32(0.114)


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Luma conversion 0.299 R + 0.587 G + 0.114 B, float32 in, float32 out."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"to_grayscale expects [h, w, 3], got {rgb.shape}")
    rgb = rgb.astype(np.float32, copy=False)
    return (rgb[:, :, 0] * GRAY_R + rgb[:, :, 1] * GRAY_G) + rgb[:, :, 2] * GRAY_B


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-aligned sample centers.

    Source coordinate for output pixel d is (d + 0.5) * in/out - 0.5, clamped
    to the valid range.  Interpolation runs in float64 and the result is cast
    to float32:  top = a + (b-a)*fx; bot = c + (d-c)*fx; out = top + (bot-top)*fy.
    """
    if img.ndim != 2:
        raise ValueError(f"resize_bilinear expects [h, w], got {img.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    in_h, in_w = img.shape
    src = img.astype(np.float64)

    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)

    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]

    a = src[np.ix_(y0, x0)]
    b = src[np.ix_(y0, x1)]
    c = src[np.ix_(y1, x0)]
    d = src[np.ix_(y1, x1)]
    top = a + (b - a) * fx
    bot = c + (d - c) * fx
    out = top + (bot - top) * fy
    return out.astype(np.float32)


def quantize_u8(img: np.ndarray) -> np.ndarray:
    """Snap [0, 1] floats to the 256-level grid a PGM round-trip imposes.

    The final division is float32/float32, the exact operation ``load_image``
    performs, so quantize-then-save-then-load is the identity bit for bit.
    """
    levels = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.float32)
    return levels / np.float32(255.0)


def band_bounds(width: int, k: int) -> list[tuple[int, int]]:
    """Column ranges of the k vertical bands: widths differ by at most one.

    The first (width mod k) bands get the extra column.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if width < k:
        raise ValueError(f"cannot split width {width} into {k} bands")
    base, rem = divmod(width, k)
    bounds = []
    c = 0
    for i in range(k):
        w = base + 1 if i < rem else base
        bounds.append((c, c + w))
        c += w
    return bounds


def vertical_split(img: np.ndarray, k: int) -> list[np.ndarray]:
    """Cut an image into k vertical bands, left to right."""
    if img.ndim != 2:
        raise ValueError(f"vertical_split expects [h, w], got {img.shape}")
    return [img[:, c0:c1].copy() for c0, c1 in band_bounds(img.shape[1], k)]


@dataclass(frozen=True)
class ShardSpec:
    """Which strip of the image a limb holds."""

    limb_index: int
    k: int
    image_h: int
    image_w: int
    col_start: int
    col_end: int

    @property
    def band_w(self) -> int:
        return self.col_end - self.col_start

    @property
    def flat_dim(self) -> int:
        return self.image_h * self.band_w


@dataclass
class LabeledShardSet:
    """One limb's view of the dataset.

    sample_ids are stable ordinals aligning rows across limbs; labels are
    present only at the label-holding limb (limb 0).
    """

    spec: ShardSpec
    sample_ids: np.ndarray  # int64 [n]
    shards: np.ndarray  # float32 [n, flat_dim]
    labels: Optional[np.ndarray] = None  # float32 [n] of {0, 1}

    @property
    def n(self) -> int:
        return self.shards.shape[0]


def build_shard_sets(images: np.ndarray, labels: np.ndarray, k: int) -> list[LabeledShardSet]:
    """Shard a [n, h, w] stack into k limb views; labels attach to limb 0."""
    n, h, w = images.shape
    ids = np.arange(n, dtype=np.int64)
    sets = []
    for i, (c0, c1) in enumerate(band_bounds(w, k)):
        flat = np.ascontiguousarray(images[:, :, c0:c1]).reshape(n, -1)
        spec = ShardSpec(i, k, h, w, c0, c1)
        lab = labels.astype(np.float32) if i == 0 else None
        sets.append(LabeledShardSet(spec, ids.copy(), flat.astype(np.float32), lab))
    return sets


def synth_dataset(n: int, image_size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Binary phantom set: radial-gradient disc, plus a bright blob for class 1.

    Per sample (label = id mod 2, so classes alternate and balance exactly):

    * a centered disc with brightness fading linearly from B at the center to
      0 at radius R; B, R and a small center jitter are drawn per sample,
    * class 1 only: an off-center ellipsoidal blob, profile peak*(1-q)^2 with
      q the squared elliptic radius, composited with max() so its core is
      brighter than anything a class-0 image can produce,
    * additive uniform speckle in ±0.05, clipped to [0, 1],
    * quantized to the 256-level grid (so archives reload bit-exactly).

    All randomness comes from ``Rng(derive_seed(seed, "sample", id))``; no
    other stream is touched, so datasets are reproducible sample by sample.
    """
    if n < 1 or image_size < 8:
        raise ValueError("need n >= 1 and image_size >= 8")
    s = float(image_size)
    yy = np.arange(image_size, dtype=np.float64)[:, None]
    xx = np.arange(image_size, dtype=np.float64)[None, :]
    images = np.empty((n, image_size, image_size), dtype=np.float32)
    labels = np.empty(n, dtype=np.float32)
    for sid in range(n):
        rng = Rng(derive_seed(seed, "sample", sid))
        label = sid % 2
        cx = s / 2.0 + (rng.u01() * 2.0 - 1.0) * 0.05 * s
        cy = s / 2.0 + (rng.u01() * 2.0 - 1.0) * 0.05 * s
        radius = (0.32 + rng.u01() * 0.10) * s
        bright = 0.55 + rng.u01() * 0.20
        r = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        img = bright * np.clip(1.0 - r / radius, 0.0, 1.0)
        if label == 1:
            dx = (0.08 + rng.u01() * 0.14) * s * (1.0 if rng.u01() < 0.5 else -1.0)
            dy = (0.08 + rng.u01() * 0.14) * s * (1.0 if rng.u01() < 0.5 else -1.0)
            ax = (0.09 + rng.u01() * 0.06) * s
            ay = (0.09 + rng.u01() * 0.06) * s
            peak = 0.88 + rng.u01() * 0.12
            q = ((xx - (cx + dx)) / ax) ** 2 + ((yy - (cy + dy)) / ay) ** 2
            bump = peak * np.clip(1.0 - q, 0.0, 1.0) ** 2
            img = np.maximum(img, bump)
        noise = rng.u01_array(image_size * image_size).reshape(image_size, image_size)
        img = img + 0.05 * (2.0 * noise - 1.0)
        images[sid] = quantize_u8(img.astype(np.float32))
        labels[sid] = np.float32(label)
    return images, labels


def split_train_test(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic unstratified split.

    Permutes 0..n-1 with the stream derived from (seed, "split") and takes the
    first floor(n * train_fraction) ids for training, the rest for test, both
    kept in permutation order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    perm = Rng(derive_seed(seed, "split")).permutation(n)
    n_train = int(n * train_fraction)
    if n_train == 0 or n_train == n:
        raise ValueError(f"split leaves an empty side: n={n}, fraction={train_fraction}")
    return perm[:n_train].copy(), perm[n_train:].copy()


# ---------------------------------------------------------------------------
# PGM / PPM files


def save_pgm(path, img: np.ndarray) -> None:
    """Write a [h, w] float image in [0, 1] as binary PGM (P5, maxval 255)."""
    if img.ndim != 2:
        raise ValueError(f"save_pgm expects [h, w], got {img.shape}")
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = u8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(u8.tobytes())


def _read_pnm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Parse `count` whitespace-separated integer header tokens, skipping
    # comments.  Returns (tokens, offset just past the single whitespace byte
    that terminates the header)."""
    tokens: list[int] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise ValueError("truncated PNM header")
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            tok = data[i:j]
            if not tok.isdigit():
                raise ValueError(f"bad PNM header token {tok!r}")
            tokens.append(int(tok))
            i = j
    if i >= len(data) or not data[i : i + 1].isspace():
        raise ValueError("PNM header not terminated")
    return tokens, i + 1


def load_image(path) -> np.ndarray:
    """Load P5 (returns [h, w]) or P6 (returns [h, w, 3]) as float32 in [0, 1]."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
    (w, h, maxval), off = _read_pnm_tokens(data[2:], 3)
    off += 2
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    raw = data[off : off + need]
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} pixel bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=np.uint8).astype(np.float32) / np.float32(255.0)
    if channels == 1:
        return arr.reshape(h, w)
    return arr.reshape(h, w, 3)


def load_pgm(path) -> np.ndarray:
    img = load_image(path)
    if img.ndim != 2:
        raise ValueError(f"{path}: expected grayscale PGM, got color PPM")
    return img


# ---------------------------------------------------------------------------
# Shard archives: one directory per limb, manifest.tsv + one PGM strip per sample

_META_RE = re.compile(
    r"^# k=(\d+) limb=(\d+) image_h=(\d+) image_w=(\d+) col_start=(\d+) col_end=(\d+)$"
)


def write_shard_archive(root, sset: LabeledShardSet) -> None:
    """Write a limb's shard set: manifest.tsv plus one PGM strip per sample."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    spec = sset.spec
    lines = [
        "# splitlimb-shard-archive v1",
        f"# k={spec.k} limb={spec.limb_index} image_h={spec.image_h} "
        f"image_w={spec.image_w} col_start={spec.col_start} col_end={spec.col_end}",
        "sample_id\tlabel\tfile",
    ]
    for row, sid in enumerate(sset.sample_ids):
        fname = f"sample_{int(sid):05d}.pgm"
        strip = sset.shards[row].reshape(spec.image_h, spec.band_w)
        save_pgm(root / fname, strip)
        if sset.labels is None:
            lab = "-"
        else:
            lab = str(int(sset.labels[row]))
        lines.append(f"{int(sid)}\t{lab}\t{fname}")
    (root / "manifest.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_shard_archive(root) -> LabeledShardSet:
    root = Path(root)
    text = (root / "manifest.tsv").read_text(encoding="utf-8")
    lines = text.splitlines()
    meta = None
    rows: list[tuple[int, str, str]] = []
    for line in lines:
        if not line or line.startswith("#"):
            m = _META_RE.match(line)
            if m:
                meta = tuple(int(g) for g in m.groups())
            continue
        if line.startswith("sample_id\t"):
            continue
        sid, lab, fname = line.split("\t")
        rows.append((int(sid), lab, fname))
    if meta is None:
        raise ValueError(f"{root}: manifest has no shard-spec header line")
    k, limb, image_h, image_w, c0, c1 = meta
    spec = ShardSpec(limb, k, image_h, image_w, c0, c1)
    ids = np.array([r[0] for r in rows], dtype=np.int64)
    shards = np.empty((len(rows), spec.flat_dim), dtype=np.float32)
    for row, (_, _, fname) in enumerate(rows):
        strip = load_pgm(root / fname)
        if strip.shape != (spec.image_h, spec.band_w):
            raise ValueError(f"{fname}: strip shape {strip.shape} does not match manifest")
        shards[row] = strip.reshape(-1)
    has_labels = any(r[1] != "-" for r in rows)
    labels = None
    if has_labels:
        labels = np.array([float(r[1]) for r in rows], dtype=np.float32)
    return LabeledShardSet(spec, ids, shards, labels)


def read_manifest_ids(root) -> np.ndarray:
    """Sample ids recorded in an archive manifest, without touching pixels."""
    text = (Path(root) / "manifest.tsv").read_text(encoding="utf-8")
    ids = []
    for line in text.splitlines():
        if not line or line.startswith("#") or line.startswith("sample_id\t"):
            continue
        ids.append(int(line.split("\t")[0]))
    return np.array(ids, dtype=np.int64)


def partition_images(image_dir, labels_path, out_root, k: int, image_size: int) -> int:
    """Preprocess a directory of PGM/PPM files into k limb archives.

    Files are processed in sorted filename order, which assigns the stable
    sample ordinals.  Color inputs are grayscaled, everything is resized to
    image_size x image_size, quantized, and vertically sharded.  The labels
    file maps filename to 0/1, one tab-separated pair per line.  Returns the
    number of samples written.
    """
    image_dir = Path(image_dir)
    label_map: dict[str, int] = {}
    for line in Path(labels_path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        name, lab = line.split("\t")
        label_map[name] = int(lab)
    files = sorted(p for p in image_dir.iterdir() if p.suffix in (".pgm", ".ppm"))
    if not files:
        raise ValueError(f"{image_dir}: no .pgm/.ppm files found")
    missing = [p.name for p in files if p.name not in label_map]
    if missing:
        raise ValueError(f"labels file has no entry for: {', '.join(missing[:5])}")
    images = np.empty((len(files), image_size, image_size), dtype=np.float32)
    labels = np.empty(len(files), dtype=np.float32)
    for idx, p in enumerate(files):
        img = load_image(p)
        if img.ndim == 3:
            img = to_grayscale(img)
        img = resize_bilinear(img, image_size, image_size)
        images[idx] = quantize_u8(img)
        labels[idx] = float(label_map[p.name])
    for sset in build_shard_sets(images, labels, k):
        write_shard_archive(Path(out_root) / f"limb_{sset.spec.limb_index}", sset)
    return len(files)

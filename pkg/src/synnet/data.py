"""Synthetic multi-modality phantoms, augmentation, PGM I/O and batching.

A phantom sample is a shared base field rendered into four modality images
(m1..m4, aliases t1/t2/t1c/flair) by deterministic transforms, standing in
for registered multi-contrast MR slices. Everything is seeded; the same
(seed, h, w) always produces bit-identical samples.

Dataset directory layout: <root>/<sample_id>/<modality>.pgm plus a
manifest.txt with one "id<TAB>h<TAB>w" line per sample.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import RngStream, ShapeError, ParameterError
from .loss import sobel_magnitude

MODALITIES = ("m1", "m2", "m3", "m4")
MODALITY_ALIASES = {"t1": "m1", "t2": "m2", "t1c": "m3", "flair": "m4",
                    "m1": "m1", "m2": "m2", "m3": "m3", "m4": "m4"}


def canonical_modality(name: str) -> str:
    key = name.strip().lower()
    if key not in MODALITY_ALIASES:
        raise ParameterError(f"unknown modality {name!r}")
    return MODALITY_ALIASES[key]


@dataclass
class PhantomSample:
    sample_id: str
    modalities: dict          # name -> (1, 1, h, w) tensor in [0, 1]


@dataclass
class DatasetManifest:
    root: str
    sample_ids: list
    height: int
    width: int


# ---------------------------------------------------------------------------
# phantom generation
# ---------------------------------------------------------------------------

def _box_blur3(img4):
    xp = np.pad(img4, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")
    h, w = img4.shape[2], img4.shape[3]
    out = np.zeros_like(img4, dtype=np.float64)
    for u in range(3):
        for v in range(3):
            out += xp[:, :, u:u + h, v:v + w]
    return out / 9.0


def generate_phantom(seed: int, h: int, w: int, sample_id: str = None) -> PhantomSample:
    """Render one deterministic multi-modality phantom.

    Base field: clipped sum of 5-12 Gaussian blobs and 1-3 ellipse masks,
    normalized to [0, 1]. Modalities: m1 = base, m2 = 3x3 box blur of the
    inverted base, m3 = base plus half the normalized edge magnitude
    (clipped), m4 = sqrt(base).
    """
    if h < 16 or w < 16:
        raise ParameterError(f"phantom size must be >= 16, got {h}x{w}")
    rng = RngStream(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = np.zeros((h, w), dtype=np.float64)
    for _ in range(rng.integers(5, 13)):
        cy, cx = rng.random() * h, rng.random() * w
        sy = (0.05 + 0.15 * rng.random()) * h
        sx = (0.05 + 0.15 * rng.random()) * w
        amp = 0.3 + 0.7 * rng.random()
        base += amp * np.exp(-((yy - cy) ** 2 / (2 * sy * sy)
                               + (xx - cx) ** 2 / (2 * sx * sx)))
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.random() * h, rng.random() * w
        ry = (0.08 + 0.20 * rng.random()) * h
        rx = (0.08 + 0.20 * rng.random()) * w
        amp = 0.2 + 0.4 * rng.random()
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        base += amp * mask
    base = np.clip(base, 0.0, 2.0)
    lo, hi = base.min(), base.max()
    if hi > lo:
        base = (base - lo) / (hi - lo)
    else:
        base = np.zeros_like(base)

    b4 = base[None, None]
    edges = sobel_magnitude(b4)
    peak = edges.max()
    if peak > 0:
        edges = edges / peak
    mods = {
        "m1": b4,
        "m2": _box_blur3(1.0 - b4),
        "m3": np.clip(b4 + 0.5 * edges, 0.0, 1.0),
        "m4": np.sqrt(b4),
    }
    sid = sample_id if sample_id is not None else f"s{seed:06d}"
    return PhantomSample(sid, {k: v.astype(np.float64) for k, v in mods.items()})


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def bilinear_resize(img2d: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img2d.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = img2d[np.ix_(y0, x0)]
    b = img2d[np.ix_(y0, x1)]
    c = img2d[np.ix_(y1, x0)]
    d = img2d[np.ix_(y1, x1)]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
            + c * fy * (1 - fx) + d * fy * fx)


def _center_fit(img2d: np.ndarray, h: int, w: int) -> np.ndarray:
    """Center-crop or zero-pad a 2-D image back to (h, w)."""
    ih, iw = img2d.shape
    if ih >= h:
        top = (ih - h) // 2
        img2d = img2d[top:top + h]
    if iw >= w:
        left = (iw - w) // 2
        img2d = img2d[:, left:left + w]
    ih, iw = img2d.shape
    if ih < h or iw < w:
        out = np.zeros((h, w), dtype=img2d.dtype)
        top, left = (h - ih) // 2, (w - iw) // 2
        out[top:top + ih, left:left + iw] = img2d
        return out
    return img2d


def draw_transform(rng: RngStream) -> dict:
    return {
        "hflip": rng.random() < 0.5,
        "vflip": rng.random() < 0.5,
        "rot90": rng.integers(0, 4),
        "scale": (0.9, 1.0, 1.1)[rng.integers(0, 3)],
    }


def apply_transform(t4: np.ndarray, tf: dict) -> np.ndarray:
    img = t4[0, 0]
    if tf["hflip"]:
        img = img[:, ::-1]
    if tf["vflip"]:
        img = img[::-1, :]
    if tf["rot90"]:
        img = np.rot90(img, tf["rot90"])
    if tf["scale"] != 1.0:
        h, w = t4.shape[2], t4.shape[3]
        img = bilinear_resize(img, round(h * tf["scale"]), round(w * tf["scale"]))
        img = _center_fit(img, h, w)
    return np.ascontiguousarray(img)[None, None]


def augment(sample: PhantomSample, rng: RngStream) -> PhantomSample:
    """One seeded flip/rotation/scale draw, applied identically to every
    modality of the sample."""
    tf = draw_transform(rng)
    return PhantomSample(sample.sample_id,
                         {k: apply_transform(v, tf) for k, v in sample.modalities.items()})


# ---------------------------------------------------------------------------
# PGM I/O
# ---------------------------------------------------------------------------

class PgmParseError(ValueError):
    """Malformed PGM file; message carries the byte offset."""


def save_pgm(path: str, t: np.ndarray):
    if t.ndim != 4 or t.shape[0] != 1 or t.shape[1] != 1:
        raise ShapeError(f"save_pgm expects a (1,1,h,w) tensor, got {t.shape}")
    if t.min() < 0 or t.max() > 1:
        raise ParameterError("save_pgm expects values in [0, 1]")
    h, w = t.shape[2], t.shape[3]
    payload = np.rint(t[0, 0] * 255.0).astype(np.uint8).tobytes()
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(payload)


def load_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(raw):
            if raw[pos:pos + 1].isspace():
                pos += 1
            elif raw[pos:pos + 1] == b"#":
                while pos < len(raw) and raw[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmParseError(f"unexpected end of header at byte {start}")
        return raw[start:pos], start

    magic, off = token()
    if magic != b"P5":
        raise PgmParseError(f"bad magic {magic!r} at byte {off}")
    fields = []
    for _ in range(3):
        tok, off = token()
        try:
            fields.append(int(tok))
        except ValueError:
            raise PgmParseError(f"non-numeric header field {tok!r} at byte {off}")
    w, h, maxval = fields
    if maxval != 255:
        raise PgmParseError(f"unsupported maxval {maxval} at byte {off}")
    pos += 1  # single whitespace after maxval
    body = raw[pos:pos + h * w]
    if len(body) != h * w:
        raise PgmParseError(
            f"truncated payload at byte {pos + len(body)}: "
            f"expected {h * w} bytes, got {len(body)}")
    img = np.frombuffer(body, dtype=np.uint8).reshape(h, w)
    return (img.astype(np.float64) / 255.0)[None, None]


# ---------------------------------------------------------------------------
# padding to a pooling-compatible size
# ---------------------------------------------------------------------------

@dataclass
class CropRecord:
    top: int
    left: int
    height: int
    width: int


def pad_to_multiple(t: np.ndarray, factor: int):
    """Symmetric zero-pad up to the next multiple of `factor` in h and w."""
    n, c, h, w = t.shape
    nh = -(-h // factor) * factor
    nw = -(-w // factor) * factor
    top, left = (nh - h) // 2, (nw - w) // 2
    out = np.zeros((n, c, nh, nw), dtype=t.dtype)
    out[:, :, top:top + h, left:left + w] = t
    return out, CropRecord(top, left, h, w)


def crop_back(t: np.ndarray, rec: CropRecord) -> np.ndarray:
    return t[:, :, rec.top:rec.top + rec.height,
             rec.left:rec.left + rec.width].copy()


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------

def write_dataset(root: str, count: int, h: int, w: int, seed: int) -> DatasetManifest:
    os.makedirs(root, exist_ok=True)
    ids = []
    for i in range(count):
        sid = f"s{i:04d}"
        sample = generate_phantom(seed + i, h, w, sample_id=sid)
        sdir = os.path.join(root, sid)
        os.makedirs(sdir, exist_ok=True)
        for mod in MODALITIES:
            save_pgm(os.path.join(sdir, f"{mod}.pgm"), sample.modalities[mod])
        ids.append(sid)
    with open(os.path.join(root, "manifest.txt"), "w") as f:
        for sid in ids:
            f.write(f"{sid}\t{h}\t{w}\n")
    return DatasetManifest(root, ids, h, w)


def load_manifest(root: str) -> DatasetManifest:
    path = os.path.join(root, "manifest.txt")
    ids, h, w = [], None, None
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParameterError(f"{path}:{lineno}: expected id<TAB>h<TAB>w")
            sid, hh, ww = parts[0], int(parts[1]), int(parts[2])
            if h is None:
                h, w = hh, ww
            elif (hh, ww) != (h, w):
                raise ParameterError(f"{path}:{lineno}: inconsistent image size")
            ids.append(sid)
    return DatasetManifest(root, ids, h, w)


def load_sample(manifest: DatasetManifest, sample_id: str) -> PhantomSample:
    sdir = os.path.join(manifest.root, sample_id)
    mods = {m: load_pgm(os.path.join(sdir, f"{m}.pgm")) for m in MODALITIES}
    return PhantomSample(sample_id, mods)


def split_ids(ids, train_frac: float = 0.8):
    cut = max(1, int(len(ids) * train_frac))
    return ids[:cut], ids[cut:]


def training_pairs(samples, input_mods, output_mods):
    """Per-sample (inputs, targets) lists in the layout `optim.train` expects."""
    in_mods = [canonical_modality(m) for m in input_mods]
    out_mods = [canonical_modality(m) for m in output_mods]
    return [([s.modalities[m] for m in in_mods],
             [s.modalities[m] for m in out_mods]) for s in samples]


def batches(samples, input_mods, output_mods, batch_size, epoch_seed,
            augment_flag=False):
    """Seeded per-epoch permutation of samples, stacked into mini-batches.

    Yields (inputs, targets): lists of (b, 1, h, w) tensors, one entry per
    input/output modality.
    """
    in_mods = [canonical_modality(m) for m in input_mods]
    out_mods = [canonical_modality(m) for m in output_mods]
    rng = RngStream(epoch_seed)
    order = rng.permutation(len(samples))
    ordered = [samples[i] for i in order]
    if augment_flag:
        ordered = [augment(s, rng.child(f"aug{j}")) for j, s in enumerate(ordered)]
    for lo in range(0, len(ordered), batch_size):
        chunk = ordered[lo:lo + batch_size]
        inputs = [np.concatenate([s.modalities[m] for s in chunk], axis=0)
                  for m in in_mods]
        targets = [np.concatenate([s.modalities[m] for s in chunk], axis=0)
                   for m in out_mods]
        yield inputs, targets

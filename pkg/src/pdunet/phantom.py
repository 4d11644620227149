"""Synthetic bladder-like images with exact ground-truth labels.

Each sample is an elliptical bright lumen wrapped in a darker wall ring,
optionally with tumors carved out of the lumen: attached ones sit on
the inner wall boundary, disconnected ones float strictly inside.  A
random quadratic bias field and additive Gaussian noise roughen the
intensities, so class boundaries are weak the way bladder MRI slices
are: bright lumen against dark wall, mid-grey tumors touching both.

Generation is deterministic: sample ``index`` under dataset ``seed``
always produces the same image, whoever generates it, because each
sample owns the random stream derived from (seed, index).
"""

from __future__ import annotations

import math
import os
from typing import NamedTuple

import numpy as np

from .errors import ConfigError
from .metrics import LabelMap
from .tensor import Tensor, read_container, write_container

_JITTER = 0.08        # center offset bound, fraction of image size
_POLE_FACTOR = 1.6    # vertical wall thickening when thick_poles is on
_TUMOR_GAP = 2.0      # clearance (px) kept around disconnected tumors


class PhantomConfig:
    """Geometry, intensity and noise knobs for one dataset.

    Axis and radius ranges are inclusive (low, high) pairs; axes are
    fractions of the image size, thickness and radii are pixels.
    """

    def __init__(self, size=128, lumen_axes=(0.12, 0.30),
                 wall_thickness=(3.0, 7.0), thick_poles=True,
                 tumor_count=(0, 2), tumor_radius=(3.0, 9.0), attached=True,
                 intensity_background=0.15, intensity_lumen=0.85,
                 intensity_wall=0.35, intensity_tumor=0.55,
                 bias_amplitude=0.3, noise_sigma=0.03,
                 spacing=(0.5, 0.5), seed=0):
        self.size = int(size)
        self.lumen_axes = (float(lumen_axes[0]), float(lumen_axes[1]))
        self.wall_thickness = (float(wall_thickness[0]),
                               float(wall_thickness[1]))
        self.thick_poles = bool(thick_poles)
        self.tumor_count = (int(tumor_count[0]), int(tumor_count[1]))
        self.tumor_radius = (float(tumor_radius[0]), float(tumor_radius[1]))
        self.attached = bool(attached)
        self.intensities = (float(intensity_background),
                            float(intensity_lumen),
                            float(intensity_wall),
                            float(intensity_tumor))
        self.bias_amplitude = float(bias_amplitude)
        self.noise_sigma = float(noise_sigma)
        self.spacing = (float(spacing[0]), float(spacing[1]))
        self.seed = int(seed)
        self._validate()

    def _validate(self):
        if self.size < 32:
            raise ConfigError(f"image size must be >= 32, got {self.size}")
        lo, hi = self.lumen_axes
        if not 0.0 < lo <= hi < 0.5:
            raise ConfigError(f"lumen axis fractions must satisfy "
                              f"0 < low <= high < 0.5, got {self.lumen_axes}")
        t_lo, t_hi = self.wall_thickness
        if not 2.0 <= t_lo <= t_hi:
            raise ConfigError(f"wall thickness range must be >= 2 px and "
                              f"ordered, got {self.wall_thickness}")
        c_lo, c_hi = self.tumor_count
        if not 0 <= c_lo <= c_hi <= 2:
            raise ConfigError(f"tumor count range must lie in 0..2, got "
                              f"{self.tumor_count}")
        r_lo, r_hi = self.tumor_radius
        if not 1.0 <= r_lo <= r_hi:
            raise ConfigError(f"tumor radius range must be >= 1 px and "
                              f"ordered, got {self.tumor_radius}")
        for v in self.intensities:
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"intensities must lie in [0, 1], got "
                                  f"{self.intensities}")
        if self.intensities[1] <= self.intensities[2]:
            raise ConfigError("lumen must be brighter than wall")
        if not 0.0 <= self.bias_amplitude <= 0.3:
            raise ConfigError(f"bias amplitude must lie in [0, 0.3], got "
                              f"{self.bias_amplitude}")
        if self.noise_sigma < 0.0:
            raise ConfigError("noise sigma must be >= 0")
        if self.spacing[0] <= 0 or self.spacing[1] <= 0:
            raise ConfigError(f"spacing must be positive, got {self.spacing}")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        pole = _POLE_FACTOR if self.thick_poles else 1.0
        reach = hi * self.size + t_hi * pole
        if self.size / 2.0 - _JITTER * self.size - reach < 2.0:
            raise ConfigError(
                f"outer wall (reach {reach:.1f} px plus jitter) does not fit "
                f"a {self.size} px image")
        if c_hi > 0:
            bore = lo * self.size
            if self.attached:
                if r_hi > bore:
                    raise ConfigError(
                        f"attached tumor radius {r_hi} px exceeds the "
                        f"smallest lumen semi-axis {bore:.1f} px")
            elif bore - (r_hi + _TUMOR_GAP) < 1.0:
                raise ConfigError(
                    f"disconnected tumor radius {r_hi} px cannot float "
                    f"inside the smallest lumen semi-axis {bore:.1f} px")


class Sample(NamedTuple):
    image: Tensor       # (1, 1, H, W) float32 in [0, 1]
    labels: LabelMap
    index: int
    seed: int           # per-sample random stream identifier


def sample_seed(cfg_seed: int, index: int) -> int:
    """Stable identifier of the (seed, index) random stream."""
    ss = np.random.SeedSequence((cfg_seed, index))
    return int(ss.generate_state(1, np.uint64)[0])


def generate_sample(cfg: PhantomConfig, index: int):
    """One (image float32 HxW, labels uint8 HxW) pair for a sample index."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, index)))
    n = cfg.size
    cy, cx = n / 2.0 + rng.uniform(-_JITTER, _JITTER, size=2) * n
    a = rng.uniform(*cfg.lumen_axes) * n
    b = rng.uniform(*cfg.lumen_axes) * n
    theta = rng.uniform(0.0, math.pi)
    t = rng.uniform(*cfg.wall_thickness)
    a_out = a + t
    b_out = b + t * (_POLE_FACTOR if cfg.thick_poles else 1.0)

    yy, xx = np.ogrid[:n, :n]
    dx = xx - cx
    dy = yy - cy
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    u = cos_t * dx + sin_t * dy
    v = -sin_t * dx + cos_t * dy
    lumen = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    outer = (u / a_out) ** 2 + (v / b_out) ** 2 <= 1.0

    labels = np.zeros((n, n), dtype=np.uint8)
    labels[outer] = 2
    labels[lumen] = 1

    for _ in range(rng.integers(cfg.tumor_count[0], cfg.tumor_count[1] + 1)):
        r = rng.uniform(*cfg.tumor_radius)
        if cfg.attached:
            phi = rng.uniform(0.0, 2.0 * math.pi)
            pu, pv = a * math.cos(phi), b * math.sin(phi)
        else:
            a_in = a - r - _TUMOR_GAP
            b_in = b - r - _TUMOR_GAP
            rho = math.sqrt(rng.uniform(0.0, 1.0))
            psi = rng.uniform(0.0, 2.0 * math.pi)
            pu, pv = a_in * rho * math.cos(psi), b_in * rho * math.sin(psi)
        px = cx + cos_t * pu - sin_t * pv
        py = cy + sin_t * pu + cos_t * pv
        disk = (xx - px) ** 2 + (yy - py) ** 2 <= r * r
        labels[disk & (labels == 1)] = 3

    image = np.asarray(cfg.intensities, dtype=np.float64)[labels]
    if cfg.bias_amplitude > 0.0:
        axis = (np.arange(n) - (n - 1) / 2.0) / ((n - 1) / 2.0)
        gx = axis[np.newaxis, :]
        gy = axis[:, np.newaxis]
        c = rng.uniform(-1.0, 1.0, size=5)
        field = (c[0] * gx + c[1] * gy + c[2] * gx * gx
                 + c[3] * gx * gy + c[4] * gy * gy)
        field = field - field.mean()
        peak = np.abs(field).max()
        if peak > 1e-12:
            image = image * (1.0 + cfg.bias_amplitude * field / peak)
    if cfg.noise_sigma > 0.0:
        image = image + rng.normal(0.0, cfg.noise_sigma, size=(n, n))
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


def generate(cfg: PhantomConfig, count: int):
    """``count`` samples at indices 0..count-1, each from its own stream."""
    if count < 0:
        raise ConfigError(f"count must be nonnegative, got {count}")
    out = []
    for index in range(count):
        img, lab = generate_sample(cfg, index)
        out.append(Sample(Tensor(img[np.newaxis, np.newaxis]),
                          LabelMap(lab.astype(np.int64), cfg.spacing),
                          index, sample_seed(cfg.seed, index)))
    return out


def split_counts(total: int, ratios=(40, 5, 15)):
    """Largest-remainder apportionment of ``total`` into three parts."""
    if len(ratios) != 3:
        raise ConfigError(f"need exactly (train, val, test) ratios, got "
                          f"{ratios!r}")
    ratios = tuple(int(r) for r in ratios)
    if any(r < 0 for r in ratios) or sum(ratios) == 0:
        raise ConfigError(f"ratios must be nonnegative and not all zero, "
                          f"got {ratios}")
    if total < 0:
        raise ConfigError(f"total must be nonnegative, got {total}")
    s = sum(ratios)
    base = [total * r // s for r in ratios]
    fracs = [total * r % s for r in ratios]
    for i in sorted(range(3), key=lambda i: (-fracs[i], i))[
            :total - sum(base)]:
        base[i] += 1
    for part, ratio in zip(base, ratios):
        if part == 0 and ratio > 0:
            raise ConfigError(
                f"{total} samples cannot fill all of {ratios}: a nonzero "
                f"ratio received an empty part {tuple(base)}")
    return tuple(base)


def split(samples, ratios=(40, 5, 15), seed=0):
    """Seed-deterministic disjoint (train, val, test) partition."""
    n_train, n_val, _ = split_counts(len(samples), ratios)
    perm = np.random.default_rng(seed).permutation(len(samples))
    train = [samples[i] for i in sorted(perm[:n_train])]
    val = [samples[i] for i in sorted(perm[n_train:n_train + n_val])]
    test = [samples[i] for i in sorted(perm[n_train + n_val:])]
    return train, val, test


def write_dataset(path, cfg: PhantomConfig, count: int, ratios=(40, 5, 15)):
    """Generate and store a dataset directory.

    Layout: NNNN_img.dls / NNNN_lbl.dls tensor containers plus
    manifest.txt with one "id seed split" line per sample.
    """
    samples = generate(cfg, count)
    parts = split(samples, ratios, seed=cfg.seed)
    os.makedirs(path, exist_ok=True)
    split_names = {}
    for name, part in zip(("train", "val", "test"), parts):
        for s in part:
            split_names[s.index] = name
    lines = []
    for s in samples:
        stem = os.path.join(path, f"{s.index:04d}")
        write_container(stem + "_img.dls", s.image.data)
        write_container(stem + "_lbl.dls", s.labels.grid.astype(np.uint8))
        lines.append(f"{s.index:04d}\t{s.seed}\t{split_names[s.index]}\n")
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.writelines(lines)
    return samples, parts


def read_dataset(path, spacing=(0.5, 0.5)):
    """Load a dataset directory back into per-split Sample lists."""
    manifest = os.path.join(path, "manifest.txt")
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"no manifest.txt under {path!r}")
    out = {"train": [], "val": [], "test": []}
    with open(manifest) as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            sid, seed, part = line.split("\t")
            if part not in out:
                raise ConfigError(f"manifest names unknown split {part!r}")
            stem = os.path.join(path, sid)
            img = read_container(stem + "_img.dls")
            lab = read_container(stem + "_lbl.dls")
            out[part].append(Sample(
                Tensor(img), LabelMap(lab.astype(np.int64), spacing),
                int(sid), int(seed)))
    return out


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM into a uint8 (H, W) array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4 and pos < len(blob):
        ch = blob[pos:pos + 1]
        if ch == b"#":
            pos = blob.find(b"\n", pos)
            pos = len(blob) if pos < 0 else pos + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end:end + 1].isspace():
                end += 1
            tokens.append(blob[pos:end])
            pos = end
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise ConfigError(f"{path}: not a binary 8-bit PGM")
    w, h, maxval = (int(t) for t in tokens[1:4])
    if maxval != 255:
        raise ConfigError(f"{path}: only maxval 255 is supported")
    pos += 1  # single whitespace after the header
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=pos)
    if data.size != h * w:
        raise ConfigError(f"{path}: truncated pixel data")
    return data.reshape(h, w).copy()


def write_pgm(path, image):
    """8-bit binary PGM; floats are taken as [0, 1], integers as 0..255."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ConfigError(f"PGM export needs a 2D array, got rank {arr.ndim}")
    if np.issubdtype(arr.dtype, np.floating):
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    elif arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise ConfigError("integer PGM values must lie in 0..255")
        arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())

"""Synthetic training/test data.

Ground-truth patches are cut from PGM images in a source directory or, by
default, from procedurally generated piecewise-smooth images (shaded
background, rectangles, disks and a striped region).  Pixel values live in
[0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import UsageError
from .operators import BicubicDown, Identity, LinearOperator, MriOp, RadonOp, cartesian_mask, cg_solve
from .rng import CounterRNG


@dataclass
class Dataset:
    x_init: np.ndarray
    y: np.ndarray
    z: np.ndarray
    op: LinearOperator = field(default_factory=Identity)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.x_init[idx], self.y[idx], self.z[idx], self.op, dict(self.meta))


def procedural_image(rng: CounterRNG, size: int = 64) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    u = rng.uniform(3)
    img = 0.3 + 0.4 * u[0] + 0.3 * (u[1] - 0.5) * xx + 0.3 * (u[2] - 0.5) * yy
    n_shapes = 3 + int(rng.integers(5, ()))
    for _ in range(n_shapes):
        kind = rng.uniform()
        v = rng.uniform(5)
        val = v[0]
        if kind < 0.45:
            x0, y0 = 0.9 * v[1], 0.9 * v[2]
            w, h = 0.1 + 0.4 * v[3], 0.1 + 0.4 * v[4]
            m = (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
        elif kind < 0.85:
            r = 0.06 + 0.2 * v[3]
            m = (xx - v[1]) ** 2 + (yy - v[2]) ** 2 < r * r
        else:
            freq = 3 + 6 * v[3]
            ang = np.pi * v[4]
            stripes = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * freq * (xx * np.cos(ang) + yy * np.sin(ang))))
            m = ((xx - v[1]) ** 2 + (yy - v[2]) ** 2 < 0.08) & (stripes > 0.5)
        img = np.where(m, val, img)
    return np.clip(img, 0.0, 1.0)


def load_source_images(source) -> list:
    from .io import read_pgm

    paths = sorted(Path(source).glob("*.pgm"))
    if not paths:
        raise UsageError(f"no PGM images found in {source}")
    return [read_pgm(p) for p in paths]


def draw_patches(seed: int, count: int, patch: int, source=None, image_size: int = 64) -> np.ndarray:
    rng = CounterRNG(seed)
    if source is not None:
        images = load_source_images(source)
    else:
        images = [procedural_image(rng, max(image_size, patch)) for _ in range(max(4, count // 4))]
    out = np.empty((count, 1, patch, patch))
    for i in range(count):
        img = images[int(rng.integers(len(images), ()))]
        H, W = img.shape
        if H < patch or W < patch:
            raise UsageError(f"source image {img.shape} smaller than patch {patch}")
        r = int(rng.integers(H - patch + 1, ()))
        c = int(rng.integers(W - patch + 1, ()))
        out[i, 0] = img[r:r + patch, c:c + patch]
    return out


def synth_dataset(seed: int, count: int, patch: int, sigma_or_gamma: float, task: str = "denoise",
                  source=None, **kw) -> Dataset:
    """(x_init, y, z) triplets for a task.

    denoise: z = y + sigma n, x_init = z.
    sr:      z = A y with bicubic decimation by gamma, x_init from 3 CG steps on ||A x - z||^2.
    mri:     z = A y (+ sigma n) with a Cartesian mask, x_init = A^T z (zero filling).
    ct:      z = A y (+ sigma n) with a parallel-beam projector, x_init from 50 CG steps.
    """
    if count < 1:
        raise UsageError("count must be positive")
    y = draw_patches(seed, count, patch, source)
    noise_rng = CounterRNG(seed + 0x9E3779B9)
    meta = {"task": task, "seed": seed, "count": count, "patch": patch}
    if task == "denoise":
        sigma = float(sigma_or_gamma)
        z = y + sigma * noise_rng.normal(y.shape) if sigma > 0 else y.copy()
        meta["sigma"] = sigma
        return Dataset(z.copy(), y, z, Identity(), meta)
    if task == "sr":
        gamma = int(sigma_or_gamma)
        op = BicubicDown(gamma, (1, patch, patch))
        z = op.apply(y)
        x0 = cg_solve(op.normal, op.adjoint(z), kw.get("init_iters", 3), per_sample=True)
        meta["gamma"] = gamma
        return Dataset(x0, y, z, op, meta)
    sigma = float(sigma_or_gamma)
    if task == "mri":
        op = MriOp(cartesian_mask(patch, patch, kw.get("acceleration", 4), kw.get("center_lines", 4)))
    elif task == "ct":
        op = RadonOp(patch, n_angles=kw.get("n_angles", 32) // kw.get("undersample", 1))
    else:
        raise UsageError(f"unknown task {task!r}")
    z = op.apply(y)
    if sigma > 0:
        z = z + sigma * noise_rng.normal(z.shape)
    if task == "mri":
        x0 = op.adjoint(z)
    else:
        x0 = cg_solve(op.normal, op.adjoint(z), kw.get("init_iters", 50), per_sample=True)
    meta["sigma"] = sigma
    return Dataset(x0, y, z, op, meta)

"""Contour-localised momentum PGD baseline with strictly binary outputs.

Each iteration: contour mask from the current binary silhouette, loss on the
binary sequence with a straight-through gradient, L1-normalised momentum,
signed step on masked pixels, projection, hard re-binarisation.

The signed steps accumulate on a continuous iterate ``u`` (clipped to the
l_inf ball around the source and to [0, 1]); the silhouette that is shown
to the recognisers and returned is always ``hard_binarize(u)``. Stepping
the binary image itself would never flip a pixel for a step below 0.5.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from . import kernels
from .objective import LossReport, LossWeights, Objective
from .protector import NumericalAbort, ProtectedResult
from .silhouette import SilhouetteSequence, hard_binarize


@dataclass(frozen=True)
class PgdConfig:
    iterations: int = 50
    alpha: float = 0.25
    momentum: float = 0.9
    eps_inf: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not 0.0 < self.eps_inf <= 1.0:
            raise ValueError(f"eps_inf must lie in (0, 1], got {self.eps_inf}")
        if not self.alpha > 0:
            raise ValueError(f"step size must be > 0, got {self.alpha}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")

    def snapshot(self):
        return asdict(self)


def _is_binary(a):
    return bool(np.all((a == 0.0) | (a == 1.0)))


def contour_mask(x):
    """Dilation XOR erosion with a 3x3 cross, per frame (zero padding).

    Accepts an (H, W) frame or an (L, H, W) stack; returns a bool mask of the
    same shape.
    """
    arr = x.frames if isinstance(x, SilhouetteSequence) else np.asarray(x, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ValueError(f"expected a frame or a frame stack, got shape {arr.shape}")
    if not _is_binary(arr):
        raise ValueError("contour mask needs a strictly binary silhouette")
    stack = arr[None] if arr.ndim == 2 else arr
    mask = kernels.contour_mask(np.ascontiguousarray(stack, dtype=np.float64)).astype(bool)
    return mask[0] if arr.ndim == 2 else mask


def pgd_protect(x_src, x_tar, cfg=None, ensemble=(), record_masks=True):
    """Run the baseline; ``result.extra["mask_union"]`` holds the union of
    every contour mask used (when ``record_masks``)."""
    cfg = cfg or PgdConfig()
    start = time.perf_counter()
    src = x_src if isinstance(x_src, SilhouetteSequence) else SilhouetteSequence(x_src)
    tar = x_tar if isinstance(x_tar, SilhouetteSequence) else SilhouetteSequence(x_tar)
    if src.shape != tar.shape:
        raise ValueError(f"source {src.shape} and target {tar.shape} shapes differ")
    x0 = hard_binarize(src.frames)
    objective = Objective(src, tar, ensemble, cfg.weights)
    report = LossReport(cfg.weights)
    lo, hi = np.clip(x0 - cfg.eps_inf, 0.0, 1.0), np.clip(x0 + cfg.eps_inf, 0.0, 1.0)
    u = x0.copy()
    x = x0
    g_acc = np.zeros_like(x0)
    union = np.zeros(x0.shape, dtype=bool)
    for it in range(cfg.iterations + 1):
        try:
            with dc.Tape() as tape:
                xt = dc.Tensor(x, requires_grad=True)
                total, entry = objective(xt, it)
            if not np.isfinite(entry.total):
                raise NumericalAbort(it, "loss")
            report.append(entry)
            if it == cfg.iterations:
                break
            grad = tape.backward(total)[xt]  # straight-through: d/dx of the binary input
        except dc.NonFiniteError as exc:
            raise NumericalAbort(it, str(exc)) from exc
        if not np.all(np.isfinite(grad)):
            raise NumericalAbort(it, "gradient")
        mask = contour_mask(x)
        if record_masks:
            union |= mask
        l1 = np.abs(grad).sum()
        g_acc = cfg.momentum * g_acc + (grad / l1 if l1 > 0 else grad)
        u = u - cfg.alpha * np.sign(g_acc) * mask
        u = np.clip(u, lo, hi)
        x = hard_binarize(u)
    out = src.with_frames(x, target_identity=tar.identity, method="pgd")
    extra = {"mask_union": union} if record_masks else {}
    return ProtectedResult(
        out,
        None,
        report,
        time.perf_counter() - start,
        {"pgd": cfg.snapshot()},
        {"surrogates": [g.seed for g in ensemble]},
        method="pgd",
        extra=extra,
    )

"""Impersonation / obfuscation losses over a surrogate embedder ensemble."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class LossWeights:
    lambda_imp: float = 1.5
    lambda_obf: float = 0.1

    def __post_init__(self):
        for name in ("lambda_imp", "lambda_obf"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not 1.0 <= self.lambda_imp <= 2.0 or not 0.0 <= self.lambda_obf <= 0.3:
            warnings.warn(
                f"loss weights ({self.lambda_imp}, {self.lambda_obf}) outside the recommended "
                "ranges lambda_imp in [1, 2], lambda_obf in [0, 0.3]",
                stacklevel=2,
            )


def cosine(a, b):
    """Cosine of two unit-norm embeddings, clamped to [-1, 1]."""
    if isinstance(a, dc.Tensor) or isinstance(b, dc.Tensor):
        return dc.clamp(dc.dot(a, b), -1.0, 1.0)
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


def _embed_all(x, ensemble):
    return [g(x) if isinstance(x, dc.Tensor) else g.embed(x) for g in ensemble]


def _mean(terms):
    if any(isinstance(t, dc.Tensor) for t in terms):
        acc = terms[0]
        for t in terms[1:]:
            acc = dc.add(acc, t)
        return dc.scale(acc, 1.0 / len(terms))
    return float(np.mean(terms))


def _one_minus(c):
    return dc.sub(1.0, c) if isinstance(c, dc.Tensor) else 1.0 - c


def loss_imp(x_pro, x_tar, ensemble, tar_embeddings=None):
    """(1/K) sum_k (1 - cos(e_k(pro), e_k(tar)))."""
    e_tar = tar_embeddings or [g.embed(x_tar) for g in ensemble]
    e_pro = _embed_all(x_pro, ensemble)
    return _mean([_one_minus(cosine(p, t)) for p, t in zip(e_pro, e_tar)])


def loss_obf(x_pro, x_src, ensemble, src_embeddings=None):
    """(1/K) sum_k cos(e_k(pro), e_k(src))."""
    e_src = src_embeddings or [g.embed(x_src) for g in ensemble]
    e_pro = _embed_all(x_pro, ensemble)
    return _mean([cosine(p, s) for p, s in zip(e_pro, e_src)])


@dataclass
class LossEntry:
    iteration: int
    loss_imp: float
    loss_obf: float
    total: float
    cos_src: list
    cos_tar: list

    def as_dict(self):
        return {
            "iteration": self.iteration,
            "loss_imp": self.loss_imp,
            "loss_obf": self.loss_obf,
            "total": self.total,
            "cos_src": list(self.cos_src),
            "cos_tar": list(self.cos_tar),
        }


@dataclass
class LossReport:
    weights: LossWeights
    entries: list = field(default_factory=list)

    def append(self, entry):
        self.entries.append(entry)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def to_json(self):
        return [e.as_dict() for e in self.entries]


class Objective:
    """Weighted impersonation + obfuscation loss with cached source/target embeddings.

    Call with a differentiable protected sequence (Tensor); returns the total
    loss Tensor and a :class:`LossEntry` of float values.
    """

    def __init__(self, x_src, x_tar, ensemble, weights=None):
        if not ensemble:
            raise ValueError("need at least one surrogate embedder")
        self.ensemble = list(ensemble)
        self.weights = weights or LossWeights()
        self.e_src = [g.embed(x_src) for g in self.ensemble]
        self.e_tar = [g.embed(x_tar) for g in self.ensemble]

    def __call__(self, x_pro, iteration=0):
        x_pro = dc.as_tensor(getattr(x_pro, "frames", x_pro))
        e_pro = [g(x_pro) for g in self.ensemble]
        c_tar = [cosine(p, t) for p, t in zip(e_pro, self.e_tar)]
        c_src = [cosine(p, s) for p, s in zip(e_pro, self.e_src)]
        l_imp = _mean([_one_minus(c) for c in c_tar])
        l_obf = _mean(c_src)
        w = self.weights
        total = dc.add(dc.scale(l_imp, w.lambda_imp), dc.scale(l_obf, w.lambda_obf))
        li, lo = float(l_imp.data), float(l_obf.data)
        entry = LossEntry(
            iteration,
            li,
            lo,
            w.lambda_imp * li + w.lambda_obf * lo,
            [float(c.data) for c in c_src],
            [float(c.data) for c in c_tar],
        )
        return total, entry


def loss_total(x_pro, x_src, x_tar, weights, ensemble):
    """Weighted total as a Tensor plus its :class:`LossEntry`."""
    return Objective(x_src, x_tar, ensemble, weights)(x_pro)

"""Latent-optimisation protection loop.

encode -> DDIM-invert to ``t_init`` -> repeat {Phi -> loss -> backward ->
AdamW step} for a fixed budget, where Phi = soft_binarize o decode o
DDIM-sample. The "vae-only" pipeline drops the DDIM part and optimises the
autoencoder latent directly.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from .diffusion import DDIM, DiffusionConfig, build_schedule
from .objective import LossReport, LossWeights, Objective
from .silhouette import BinarizationConfig, SilhouetteSequence, soft_binarize

PIPELINES = ("full", "vae-only")


class NumericalAbort(FloatingPointError):
    def __init__(self, iteration, detail):
        self.iteration = iteration
        super().__init__(f"non-finite value at iteration {iteration}: {detail}")


@dataclass(frozen=True)
class ProtectionConfig:
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    iterations: int = 50
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    weights: LossWeights = field(default_factory=LossWeights)
    binarization: BinarizationConfig = field(default_factory=BinarizationConfig)
    pipeline: str = "full"

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.pipeline not in PIPELINES:
            raise ValueError(f"unknown pipeline {self.pipeline!r}")

    def snapshot(self):
        return asdict(self)


class AdamW:
    """Adam with bias correction and decoupled weight decay, on flat arrays."""

    def __init__(self, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.m = None
        self.v = None
        self.t = 0

    def step(self, param, grad):
        """Return the updated parameter; ``param`` is not modified."""
        grad = np.asarray(grad, dtype=np.float64)
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        p = np.asarray(param, dtype=np.float64)
        if self.weight_decay:
            p = p * (1.0 - self.lr * self.weight_decay)
        return p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class ProtectedResult:
    x_pro: SilhouetteSequence
    z_adv: np.ndarray | None
    report: LossReport
    wall_time: float
    config: dict
    seeds: dict
    method: str = "full"
    latents: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def meta(self):
        return {
            "method": self.method,
            "wall_time_s": self.wall_time,
            "config": self.config,
            "seeds": self.seeds,
            "iterations_recorded": len(self.report),
            **{k: v for k, v in self.extra.items() if not isinstance(v, np.ndarray)},
        }


class Protector:
    """Holds the frozen models and the DDIM machinery for a protection config."""

    def __init__(self, models, config=None):
        self.models = models
        self.config = config or ProtectionConfig()
        dcfg = self.config.diffusion
        if models.predictor.T != dcfg.T:
            raise ValueError(f"predictor built for T={models.predictor.T}, config asks T={dcfg.T}")
        self.ddim = DDIM(build_schedule(dcfg.T), models.predictor, dcfg.variant)

    @property
    def t_init(self):
        return 0 if self.config.pipeline == "vae-only" else self.config.diffusion.t_init

    def initial_latent(self, x_src):
        z0 = self.models.autoencoder.encode(x_src)
        return self.ddim.invert_to(z0, self.t_init)

    def phi(self, z_adv):
        """Latent (Tensor or array) -> protected sequence Tensor, differentiable."""
        z = dc.as_tensor(z_adv)
        if z.shape != (self.models.autoencoder.dim,):
            raise ValueError(f"latent length {z.shape} != {self.models.autoencoder.dim}")
        z0 = self.ddim.sample_from(z, self.t_init)
        x_tilde = self.models.autoencoder.decode(z0)
        return soft_binarize(x_tilde, self.config.binarization.tau)

    def loss_and_grad(self, z, objective, iteration=0):
        with dc.Tape() as tape:
            zt = dc.Tensor(z, requires_grad=True)
            x_pro = self.phi(zt)
            total, entry = objective(x_pro, iteration)
        if not np.isfinite(entry.total):
            raise NumericalAbort(iteration, "loss")
        grad = tape.backward(total)[zt]
        return float(total.data), grad, entry, np.array(x_pro.data)

    def loss_value(self, z, objective, iteration=0):
        _, entry = objective(self.phi(z), iteration)
        return entry.total

    def protect(self, x_src, x_tar, ensemble, keep_latents=True):
        cfg = self.config
        start = time.perf_counter()
        src = x_src if isinstance(x_src, SilhouetteSequence) else SilhouetteSequence(x_src)
        tar = x_tar if isinstance(x_tar, SilhouetteSequence) else SilhouetteSequence(x_tar)
        if src.shape != tar.shape:
            raise ValueError(f"source {src.shape} and target {tar.shape} shapes differ")
        objective = Objective(src, tar, ensemble, cfg.weights)
        report = LossReport(cfg.weights)
        opt = AdamW(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        z = self.initial_latent(src)
        latents = []
        x_pro = None
        for it in range(cfg.iterations + 1):
            if keep_latents:
                latents.append(z.copy())
            try:
                if it == cfg.iterations:
                    x_t = self.phi(z)
                    _, entry = objective(x_t, it)
                    x_pro = np.array(x_t.data)
                else:
                    _, grad, entry, _ = self.loss_and_grad(z, objective, it)
            except dc.NonFiniteError as exc:
                raise NumericalAbort(it, str(exc)) from exc
            if not np.isfinite(entry.total):
                raise NumericalAbort(it, "loss")
            report.append(entry)
            if x_pro is not None:
                break
            if not np.all(np.isfinite(grad)):
                raise NumericalAbort(it, "gradient")
            z = opt.step(z, grad)
        out = src.with_frames(x_pro, target_identity=tar.identity, method=cfg.pipeline)
        m = self.models.config
        seeds = {
            "autoencoder": m.autoencoder_seed,
            "predictor": m.predictor_seed,
            "surrogates": [g.seed for g in ensemble],
            "evaluator": m.eval_seed,
        }
        return ProtectedResult(
            out,
            z,
            report,
            time.perf_counter() - start,
            {"protection": cfg.snapshot(), "models": asdict(m)},
            seeds,
            method=cfg.pipeline,
            latents=latents,
        )


def protect(x_src, x_tar, cfg, ensemble, models):
    return Protector(models, cfg).protect(x_src, x_tar, ensemble)

"""Consensus-guided iterative denoising.

Step indices run from ``T - 1`` (noisiest) down to ``0``. Guidance is applied on the
``ceil(fraction * T)`` least-noisy steps.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .consensus import ViewTargets


def huber(residual, delta_h: float = 1.0):
    """Huber value and derivative, elementwise."""
    r = np.asarray(residual, dtype=np.float64)
    a = np.abs(r)
    value = np.where(a <= delta_h, 0.5 * r * r, delta_h * (a - 0.5 * delta_h))
    deriv = np.clip(r, -delta_h, delta_h)
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def consensus_loss(pred: np.ndarray, targets: ViewTargets | None, delta_h: float = 1.0):
    """Weighted Huber loss of ``pred`` against guidance targets and its image-space gradient.

    Held-out entries are ignored.
    """
    grad = np.zeros(pred.shape, dtype=np.float64)
    if targets is None or len(targets) == 0:
        return 0.0, grad
    keep = ~targets.holdout
    rows, cols, w = targets.rows[keep], targets.cols[keep], targets.weights[keep]
    r = pred[rows, cols].astype(np.float64) - targets.values[keep]
    val, der = huber(r, delta_h)
    loss = float(np.sum(w * val.sum(axis=1)))
    grad[rows, cols] = w[:, None] * der
    return loss, grad


def guidance_schedule(num_steps: int, fraction: float) -> frozenset[int]:
    """Guided steps: ``{t : t < ceil(fraction * T)}``."""
    if num_steps < 1 or not 0.0 < fraction <= 1.0:
        raise ValueError("need num_steps >= 1 and fraction in (0, 1]")
    # guard against 0.8 * 10 -> 8.000000000000002
    n = math.ceil(round(fraction * num_steps, 9))
    return frozenset(range(min(n, num_steps)))


@dataclass
class GuidanceState:
    steps: frozenset[int]
    optimizer: str = "plain"
    losses: list[tuple[int, float]] = field(default_factory=list)
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    adam_steps: int = 0

    def loss_values(self) -> list[float]:
        return [l for _, l in self.losses]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            for t, loss in self.losses:
                writer.writerow([t, repr(loss)])


ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def latent_update(x: np.ndarray, grad: np.ndarray, eta: float, optimizer: str = "plain", state=None):
    """One gradient step on the latent.

    ``plain`` is ``x - eta * grad``. ``adam`` is a bias-corrected Adam step whose
    moments live in ``state`` for the whole trajectory.
    """
    if x.shape != grad.shape:
        raise ValueError(f"latent {x.shape} and gradient {grad.shape} differ in shape")
    if optimizer == "plain":
        return x - eta * grad
    if optimizer != "adam":
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if state is None:
        raise ValueError("adam needs a GuidanceState")
    b1, b2 = ADAM_BETAS
    if state.m is None:
        state.m = np.zeros_like(grad)
        state.v = np.zeros_like(grad)
    state.adam_steps += 1
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = state.m / (1 - b1**state.adam_steps)
    v_hat = state.v / (1 - b2**state.adam_steps)
    return x - eta * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


class Denoiser(Protocol):
    """What a sampler needs from a predictor. Clean estimates live in image space."""

    num_steps: int

    def init_latent(self, view_index: int, seed: int) -> np.ndarray: ...

    def predict_clean(self, x: np.ndarray, t: int) -> np.ndarray: ...

    def pullback(self, x: np.ndarray, t: int, grad: np.ndarray) -> np.ndarray: ...

    def advance(self, x: np.ndarray, t: int, clean: np.ndarray) -> np.ndarray: ...

    def decode(self, x: np.ndarray) -> np.ndarray: ...


def derive_seed(seed: int, *keys: int) -> int:
    """Mix integer keys into a seed with splitmix64."""
    mask = (1 << 64) - 1
    z = seed & mask
    for k in keys:
        z = (z ^ (k & mask)) & mask
        z = (z + 0x9E3779B97F4A7C15) & mask
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        z = z ^ (z >> 31)
    return z


class ToyDenoiser:
    """Linear stand-in for a diffusion predictor that converges to a fixed map.

    The latent is image shaped and starts as ``base + noise_scale(T-1) * n``. The
    noise ``n`` is known to the model, so on an unperturbed trajectory every clean
    estimate is exactly ``base``. A perturbation ``d`` of the latent shows up in the
    clean estimate attenuated by ``1 - gamma_t``::

        clean = (1 - gamma_t) * (x - noise_t * n) + gamma_t * base

    with ``noise_t = rho0 * (t + 1) / T`` and ``gamma_t = noise_t / (noise_t + prior_scale)``.
    ``advance`` is the deterministic update ``clean + noise_{t-1} / noise_t * (x - clean)``.
    With this pairing the clean estimate is unchanged by ``advance``, so only
    guidance updates move it.
    """

    def __init__(self, base: np.ndarray, num_steps: int = 50, rho0: float = 1.0, prior_scale: float = 0.1):
        self.base = np.asarray(base, dtype=np.float64)
        self.num_steps = int(num_steps)
        self.rho0 = float(rho0)
        self.prior_scale = float(prior_scale)
        self.noise = np.zeros_like(self.base)

    def noise_level(self, t: int) -> float:
        return self.rho0 * (t + 1) / self.num_steps if t >= 0 else 0.0

    def gamma(self, t: int) -> float:
        s = self.noise_level(t)
        return s / (s + self.prior_scale)

    def init_latent(self, view_index: int = 0, seed: int = 0) -> np.ndarray:
        rng = np.random.default_rng(derive_seed(seed, view_index))
        self.noise = rng.standard_normal(self.base.shape)
        return self.base + self.noise_level(self.num_steps - 1) * self.noise

    def predict_clean(self, x: np.ndarray, t: int) -> np.ndarray:
        g = self.gamma(t)
        return (1.0 - g) * (x - self.noise_level(t) * self.noise) + g * self.base

    def pullback(self, x: np.ndarray, t: int, grad: np.ndarray) -> np.ndarray:
        return (1.0 - self.gamma(t)) * grad

    def advance(self, x: np.ndarray, t: int, clean: np.ndarray) -> np.ndarray:
        ratio = self.noise_level(t - 1) / self.noise_level(t)
        return clean + ratio * (x - clean)

    def decode(self, x: np.ndarray) -> np.ndarray:
        return x

    def stability_bound(self, steps, max_weight: float) -> float:
        """Largest plain step size for which every guided step contracts residuals."""
        a = max(1.0 - self.gamma(t) for t in steps)
        return 2.0 / (a * a * max_weight)


def guided_sample(
    denoiser: Denoiser,
    targets: ViewTargets | None,
    *,
    fraction: float = 0.8,
    eta: float = 0.5,
    delta_h: float = 1.0,
    optimizer: str = "plain",
    seed: int = 0,
    view_index: int = 0,
    return_latent: bool = False,
):
    """Run one sampling trajectory, nudging the latent toward ``targets`` on guided steps.

    ``targets=None`` gives the unguided trajectory. Returns the final prediction
    clamped to [0, 1] and the trajectory's :class:`GuidanceState`.
    """
    T = denoiser.num_steps
    state = GuidanceState(guidance_schedule(T, fraction), optimizer)
    x = denoiser.init_latent(view_index, seed)
    for t in range(T - 1, -1, -1):
        if targets is not None and t in state.steps:
            clean = denoiser.predict_clean(x, t)
            loss, g = consensus_loss(clean, targets, delta_h)
            state.losses.append((t, loss))
            x = latent_update(x, denoiser.pullback(x, t, g), eta, optimizer, state)
        clean = denoiser.predict_clean(x, t)
        x = denoiser.advance(x, t, clean)
    out = np.clip(denoiser.decode(x), 0.0, 1.0)
    if return_latent:
        return out, state, x
    return out, state

"""Conditional shortcut generative model.

A velocity field ``v(x, t, dt, cond)`` is trained so that Euler
integration of ``x' = v`` transports standard normal noise at t=0 to data
at t=1, and so that doubling the step size stays consistent with two
chained half steps. That second property is what makes single-step
sampling (t=0, dt=1) usable.

Step sizes live on a dyadic grid {1/M, 2/M, ..., 1/2} with M a power of
two; times live on {i/M}. All random draws come from numpy generators so
results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError
from .nets import ParamStore, VelocityNetSpec, init_params, velocity_net_forward


@dataclass
class ShortcutModel:
    """Velocity net plus its data/condition shapes and base step count M."""

    spec: VelocityNetSpec
    params: ParamStore
    base_steps: int = 128
    nfe: int = field(default=0, compare=False)  # velocity-net call counter

    def __post_init__(self):
        if self.base_steps < 2 or self.base_steps & (self.base_steps - 1):
            raise ConfigError(f"base step count must be a power of two >= 2, got {self.base_steps}")

    @property
    def data_shape(self) -> tuple[int, ...]:
        return self.spec.data_shape

    @property
    def dt_min(self) -> float:
        return 1.0 / self.base_steps

    def velocity(self, x, t, dt, cond=None) -> torch.Tensor:
        self.nfe += 1
        return velocity_net_forward(self.spec, self.params, x, t, dt, cond)

    def reset_nfe(self) -> None:
        self.nfe = 0


def make_shortcut_model(
    data_shape,
    cond_width: int,
    seed: int,
    hidden=(128, 128),
    time_width: int = 16,
    base_steps: int = 128,
    activation: str = "gelu",
    dtype: torch.dtype = torch.float64,
) -> ShortcutModel:
    spec = VelocityNetSpec(
        data_shape=tuple(data_shape),
        cond_width=cond_width,
        time_width=time_width,
        hidden=tuple(hidden),
        activation=activation,
    )
    return ShortcutModel(spec=spec, params=init_params(spec, seed, dtype=dtype), base_steps=base_steps)


def interpolant(x0, x1, t):
    """Linear path (1-t) x0 + t x1 with t in [0, 1]; t broadcasts over a batch."""
    x0 = torch.as_tensor(x0)
    x1 = torch.as_tensor(x1)
    if x0.shape != x1.shape:
        raise ValueError(f"endpoint shapes differ: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    t = torch.as_tensor(t, dtype=x0.dtype)
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValueError("interpolation time must lie in [0, 1]")
    while t.ndim < x0.ndim:
        t = t[..., None]
    return (1.0 - t) * x0 + t * x1


def sample_noise(shape, rng: np.random.Generator, dtype=torch.float64) -> torch.Tensor:
    return torch.as_tensor(rng.standard_normal(shape), dtype=dtype)


def euler_sample(model: ShortcutModel, cond, n_steps: int, seed=None, rng=None, batch=None) -> torch.Tensor:
    """Integrate the velocity field from seeded standard normal noise.

    ``n_steps`` must be 1 or a divisor of the model's base step count; with
    n_steps=1 the velocity net is evaluated exactly once (t=0, dt=1).
    Returns the endpoint with shape (batch?, *data_shape).
    """
    if n_steps != 1 and (n_steps < 1 or model.base_steps % n_steps):
        raise ConfigError(f"n_steps must be 1 or divide {model.base_steps}, got {n_steps}")
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(seed))
    shape = ((batch,) if batch else ()) + model.data_shape
    x = sample_noise(shape, rng, dtype=model.params.dtype)
    if cond is not None:
        cond = torch.as_tensor(cond, dtype=model.params.dtype)
    dt = 1.0 / n_steps
    with torch.no_grad():
        for i in range(n_steps):
            x = x + model.velocity(x, i * dt, dt, cond) * dt
    return x


def _draw_dyadic(rng: np.random.Generator, m: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (t, dt) with t on {i/M} and dt = 2^k/M, k uniform over
    exponents below M/2, redrawing any pair with t + 2 dt > 1.
    """
    n_exp = int(np.log2(m))  # exponents 0 .. log2(M)-1, i.e. dt in {1/M .. 1/2}
    t = rng.integers(0, m, size=size) / m
    dt = 2.0 ** rng.integers(0, n_exp, size=size) / m
    bad = t + 2 * dt > 1.0
    while np.any(bad):
        t[bad] = rng.integers(0, m, size=int(bad.sum())) / m
        dt[bad] = 2.0 ** rng.integers(0, n_exp, size=int(bad.sum())) / m
        bad = t + 2 * dt > 1.0
    return t, dt


def self_consistency_target(model: ShortcutModel, xt, t, dt, cond=None) -> torch.Tensor:
    """Bootstrap regression target: the average of two chained dt steps,
    computed without gradient tracking (the target is a constant).
    """
    with torch.no_grad():
        v_a = model.velocity(xt, t, dt, cond)
        dt_col = torch.as_tensor(dt, dtype=v_a.dtype).reshape(
            (-1,) + (1,) * len(model.data_shape) if np.ndim(dt) else ()
        )
        x_next = torch.as_tensor(xt, dtype=v_a.dtype) + v_a * dt_col
        v_b = model.velocity(x_next, torch.as_tensor(t) + torch.as_tensor(dt), dt, cond)
        return (v_a + v_b) / 2.0


def self_consistency_loss(model: ShortcutModel, xt, t, dt, cond, v_target) -> torch.Tensor:
    """MSE between the velocity at step 2 dt and a fixed bootstrap target."""
    v_big = model.velocity(xt, t, 2.0 * torch.as_tensor(dt, dtype=model.params.dtype), cond)
    return ((v_big - torch.as_tensor(v_target, dtype=v_big.dtype)) ** 2).mean()


def shortcut_train_losses(model: ShortcutModel, x1, cond, rng: np.random.Generator) -> dict[str, torch.Tensor]:
    """Flow-matching and self-consistency losses for a batch of targets.

    The flow-matching term regresses the velocity at the smallest step size
    onto the endpoint difference x1 - x0; the self-consistency term
    regresses the velocity at 2 dt onto the average of two chained dt
    steps, treated as a constant target. Draw order from ``rng``: noise x0
    first, then the dyadic (t, dt) pairs.
    """
    x1 = torch.as_tensor(x1, dtype=model.params.dtype)
    batched = x1.ndim > len(model.data_shape)
    if not batched:
        x1 = x1[None]
    if x1.shape[1:] != model.data_shape:
        raise ValueError(f"target shape {tuple(x1.shape)} incompatible with {model.data_shape}")
    b = x1.shape[0]
    if cond is not None:
        cond = torch.as_tensor(cond, dtype=model.params.dtype)
        if not batched:
            cond = cond[None]

    x0 = sample_noise(x1.shape, rng, dtype=model.params.dtype)
    t_np, dt_np = _draw_dyadic(rng, model.base_steps, b)
    t = torch.as_tensor(t_np, dtype=model.params.dtype)
    dt = torch.as_tensor(dt_np, dtype=model.params.dtype)
    xt = interpolant(x0, x1, t)

    v_fm = model.velocity(xt, t, model.dt_min, cond)
    loss_fm = ((x1 - x0 - v_fm) ** 2).mean()

    v_target = self_consistency_target(model, xt, t, dt, cond)
    loss_sc = self_consistency_loss(model, xt, t, dt, cond, v_target)
    return {"fm": loss_fm, "sc": loss_sc}


def energy_distance(x, y, max_points: int = 2048) -> float:
    """Energy distance 2 E|x-y| - E|x-x'| - E|y-y'| between two samples."""
    x = np.asarray(x, dtype=np.float64)[:max_points]
    y = np.asarray(y, dtype=np.float64)[:max_points]

    def mean_pair(a, b):
        d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
        return d.mean()

    return float(2 * mean_pair(x, y) - mean_pair(x, x) - mean_pair(y, y))

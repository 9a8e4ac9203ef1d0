"""Stage-two latent refinement diffusion.

A conditional epsilon-prediction DDPM over the frozen SinoVAE latent space.
The degraded sinogram's latent (posterior mean) is channel-concatenated with
the noisy latent at the network input; reverse sampling follows the standard
update z_{t-1} = (z_t - (1-a_t)/sqrt(1-abar_t) * eps_hat)/sqrt(a_t) + sigma_t*e
with no noise added on the final step.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .grid import (AdamState, GridError, Tensor, adam_step, cat, conv2d,
                   dense, group_norm, silu)
from .sinovae import DivergenceError, LatentCode


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise coefficients, computed and stored in float64."""

    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    sigma: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise GridError("beta must be a nonempty 1D array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise GridError("every beta_t must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", 1.0 - beta)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - beta))
        object.__setattr__(self, "sigma", np.sqrt(beta))

    @property
    def T(self) -> int:
        return self.beta.size


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta ramp; sigma_t = sqrt(beta_t)."""
    if T < 1:
        raise GridError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise GridError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return DiffusionSchedule(beta=beta)


def _check_t(t: int, schedule: DiffusionSchedule) -> int:
    t = int(t)
    if not 1 <= t <= schedule.T:
        raise GridError(f"step index {t} outside [1, {schedule.T}]")
    return t


def forward_noise(z0: np.ndarray, t, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Closed-form marginal: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.

    t may be a scalar or a per-sample integer array matching z0's batch axis.
    """
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if eps.shape != z0.shape:
        raise GridError(f"eps shape {eps.shape} != z0 shape {z0.shape}")
    if np.isscalar(t) or np.ndim(t) == 0:
        abar = schedule.alpha_bar[_check_t(t, schedule) - 1]
        return (np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps).astype(z0.dtype)
    t = np.asarray(t, dtype=int)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise GridError(f"step indices outside [1, {schedule.T}]")
    abar = schedule.alpha_bar[t - 1].reshape((-1,) + (1,) * (z0.ndim - 1))
    return (np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps).astype(z0.dtype)


def denoise_step(z_t: np.ndarray, t: int, eps_hat: np.ndarray,
                 schedule: DiffusionSchedule, noise: np.ndarray | None = None) -> np.ndarray:
    """One reverse step; noise is forced to zero at t = 1."""
    t = _check_t(t, schedule)
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    a = schedule.alpha[t - 1]
    abar = schedule.alpha_bar[t - 1]
    mean = (z_t - (1.0 - a) / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(a)
    if t > 1 and noise is not None:
        mean = mean + schedule.sigma[t - 1] * np.asarray(noise, dtype=np.float64)
    return mean


class Denoiser:
    """Small conditional conv net predicting the injected noise."""

    def __init__(self, latent_channels: int = 4, cond_channels: int = 4,
                 hidden: int = 48, time_dim: int = 32, seed: int = 0):
        self.latent_channels = latent_channels
        self.cond_channels = cond_channels
        self.hidden = hidden
        self.time_dim = time_dim
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        rng = np.random.default_rng(np.random.SeedSequence([0x18D, int(seed)]))
        self._conv(rng, "c0", hidden, latent_channels + cond_channels, 3)
        self._conv(rng, "c1", hidden, hidden, 3)
        self._conv(rng, "c2", hidden, hidden, 3)
        self._conv(rng, "out", latent_channels, hidden, 3, gain=0.2)
        self._dense(rng, "t0", time_dim, hidden)
        self._dense(rng, "t1", hidden, hidden)
        for i in (0, 1, 2):
            self.params[f"n{i}.g"] = Tensor(np.ones(hidden, dtype=np.float32), requires_grad=True)
            self.params[f"n{i}.b"] = Tensor(np.zeros(hidden, dtype=np.float32), requires_grad=True)

    def _conv(self, rng, name, cout, cin, k, gain=2.0):
        std = math.sqrt(gain / (cin * k * k))
        self.params[name + ".w"] = Tensor(rng.normal(0.0, std, (cout, cin, k, k)).astype(np.float32),
                                          requires_grad=True)
        self.params[name + ".b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def _dense(self, rng, name, cin, cout):
        std = math.sqrt(1.0 / cin)
        self.params[name + ".w"] = Tensor(rng.normal(0.0, std, (cin, cout)).astype(np.float32),
                                          requires_grad=True)
        self.params[name + ".b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def time_embedding(self, t: np.ndarray) -> np.ndarray:
        """Sinusoidal features of the integer step index, (B, time_dim)."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        half = self.time_dim // 2
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
        arg = t[:, None] * freqs[None, :]
        return np.concatenate([np.sin(arg), np.cos(arg)], axis=1).astype(np.float32)

    def predict_t(self, z_t: Tensor, t: np.ndarray, cond: Tensor) -> Tensor:
        if z_t.shape != cond.shape and z_t.shape[0] != cond.shape[0]:
            raise GridError(f"z_t shape {z_t.shape} incompatible with cond {cond.shape}")
        emb = Tensor(self.time_embedding(t))
        temb = dense(silu(dense(emb, self.params["t0.w"], self.params["t0.b"])),
                     self.params["t1.w"], self.params["t1.b"])
        temb = temb.reshape(-1, self.hidden, 1, 1)
        h = cat([z_t, cond], axis=1)
        h = conv2d(h, self.params["c0.w"], stride=1, pad=1) + self.params["c0.b"].reshape(1, -1, 1, 1)
        h = silu(group_norm(h + temb, 4, self.params["n0.g"], self.params["n0.b"]))
        h = conv2d(h, self.params["c1.w"], stride=1, pad=1) + self.params["c1.b"].reshape(1, -1, 1, 1)
        h = silu(group_norm(h + temb, 4, self.params["n1.g"], self.params["n1.b"]))
        h = conv2d(h, self.params["c2.w"], stride=1, pad=1) + self.params["c2.b"].reshape(1, -1, 1, 1)
        h = silu(group_norm(h, 4, self.params["n2.g"], self.params["n2.b"]))
        out = conv2d(h, self.params["out.w"], stride=1, pad=1) + self.params["out.b"].reshape(1, -1, 1, 1)
        return out

    def predict(self, z_t: np.ndarray, t, cond: np.ndarray) -> np.ndarray:
        t = np.full(z_t.shape[0], t, dtype=int) if np.ndim(t) == 0 else np.asarray(t, dtype=int)
        return self.predict_t(Tensor(np.asarray(z_t, dtype=np.float32)), t,
                              Tensor(np.asarray(cond, dtype=np.float32))).data


def _cond_array(cond) -> np.ndarray:
    if isinstance(cond, LatentCode):
        return cond.mu.data
    if isinstance(cond, Tensor):
        return cond.data
    return np.asarray(cond, dtype=np.float32)


def predict_noise(model: Denoiser, z_t: np.ndarray, t, cond) -> np.ndarray:
    """Conditional noise prediction; cond may be a LatentCode (its mean is used)."""
    return model.predict(z_t, t, _cond_array(cond))


def diffusion_loss(model, z0: np.ndarray, cond, schedule: DiffusionSchedule,
                   seed: int = 0) -> float:
    """Monte-Carlo estimate of the noise-matching objective on one batch."""
    z0 = np.asarray(z0, dtype=np.float32)
    cond_arr = _cond_array(cond)
    rng = np.random.default_rng(np.random.SeedSequence([0xD1FF, int(seed)]))
    t = rng.integers(1, schedule.T + 1, size=z0.shape[0])
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    z_t = forward_noise(z0, t, eps, schedule)
    if isinstance(model, Denoiser):
        pred = model.predict(z_t, t, cond_arr)
    else:
        pred = np.asarray(model(z_t, t, cond_arr))
    return float(np.mean((pred.astype(np.float64) - eps.astype(np.float64)) ** 2))


def sample(model, cond, schedule: DiffusionSchedule, seed: int = 0
           ) -> np.ndarray:
    """Reverse diffusion from seeded Gaussian noise, conditioned throughout."""
    cond_arr = _cond_array(cond)
    rng = np.random.default_rng(np.random.SeedSequence([0x5A11, int(seed)]))
    z = rng.standard_normal(cond_arr.shape).astype(np.float64)
    for t in range(schedule.T, 0, -1):
        if isinstance(model, Denoiser):
            eps_hat = model.predict(z.astype(np.float32), t, cond_arr)
        else:
            eps_hat = np.asarray(model(z.astype(np.float32), t, cond_arr))
        noise = rng.standard_normal(z.shape) if t > 1 else None
        z = denoise_step(z, t, eps_hat, schedule, noise)
        if not np.all(np.isfinite(z)):
            raise DivergenceError(f"non-finite latent at reverse step t={t}")
    return z.astype(np.float32)


@dataclass
class LrdTrainConfig:
    # 1e-4 is the published full-scale rate; desk-scale runs override it
    learning_rate: float = 1e-4
    epochs: int = 30
    batch_size: int = 16
    seed: int = 0


def train_lrd(model: Denoiser, z0_set: np.ndarray, cond_set: np.ndarray,
              schedule: DiffusionSchedule, config: LrdTrainConfig):
    """Adam on the noise-matching loss over (clean, degraded) latent pairs.

    z0_set/cond_set are (N, C, h, w) arrays from the frozen encoder (already
    scaled). Returns (model, trace) with per-epoch mean loss rows.
    """
    z0_set = np.asarray(z0_set, dtype=np.float32)
    cond_set = np.asarray(cond_set, dtype=np.float32)
    if z0_set.shape != cond_set.shape or z0_set.ndim != 4 or len(z0_set) == 0:
        raise GridError(f"latent sets must be matching nonempty (N, C, h, w); "
                        f"got {z0_set.shape} and {cond_set.shape}")
    n = len(z0_set)
    opt = AdamState(learning_rate=config.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([0x78D2, int(config.seed)]))
    trace: list[dict] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            z0 = z0_set[idx]
            t = rng.integers(1, schedule.T + 1, size=len(idx))
            eps = rng.standard_normal(z0.shape).astype(np.float32)
            z_t = forward_noise(z0, t, eps, schedule)
            pred = model.predict_t(Tensor(z_t), t, Tensor(cond_set[idx]))
            diff = pred - Tensor(eps)
            loss = (diff * diff).mean()
            val = loss.item()
            if not math.isfinite(val):
                raise DivergenceError(f"non-finite diffusion loss at epoch {epoch}", trace)
            model.zero_grad()
            loss.backward()
            adam_step(model.params, {k: p.grad for k, p in model.params.items()
                                     if p.grad is not None}, opt)
            total += val
            batches += 1
        trace.append({"epoch": epoch, "loss": total / batches})
    return model, trace


# ---------------------------------------------------------------------------
# persistence (SFWT parameters + JSON sidecar carrying the schedule)

def save_denoiser(path, model: Denoiser, schedule: DiffusionSchedule,
                  latent_scale: float, geometry: tuple[int, int],
                  partition: tuple[int, int], beta_range: tuple[float, float]) -> None:
    import json
    from .grid import save_params
    save_params(path, model.params)
    sidecar = {
        "kind": "lrd",
        "latent_channels": model.latent_channels,
        "cond_channels": model.cond_channels,
        "hidden": model.hidden,
        "time_dim": model.time_dim,
        "latent_scale": float(latent_scale),
        "schedule": {"T": schedule.T, "beta_start": beta_range[0], "beta_end": beta_range[1]},
        "geometry": {"n_views": geometry[0], "n_bins": geometry[1]},
        "partition": list(partition),
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2)


def load_denoiser(path):
    """Returns (model, schedule, metadata dict)."""
    import json
    import os
    from .grid import CheckpointError, load_params_into
    sidecar_path = str(path) + ".json"
    if not os.path.exists(sidecar_path):
        raise CheckpointError(f"{path}: missing metadata sidecar {sidecar_path}")
    with open(sidecar_path) as fh:
        meta = json.load(fh)
    if meta.get("kind") != "lrd":
        raise CheckpointError(f"{path}: sidecar kind {meta.get('kind')!r} is not 'lrd'")
    model = Denoiser(latent_channels=meta["latent_channels"],
                     cond_channels=meta["cond_channels"],
                     hidden=meta["hidden"], time_dim=meta["time_dim"])
    load_params_into(path, model.params)
    sched = meta["schedule"]
    schedule = make_schedule(sched["T"], sched["beta_start"], sched["beta_end"])
    return model, schedule, meta

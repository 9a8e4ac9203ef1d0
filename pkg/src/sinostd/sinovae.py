"""Stage-one perceptual compressor for sinograms.

A convolutional VAE with an 8x spatially compressed latent split into a
full-frequency group and a high-frequency group. The global decoder rebuilds
the sinogram from the whole latent; the high-frequency decoder predicts the
Sobel magnitude map of the clean sinogram from the high-frequency group,
modulated (feature-wise scale/shift) by the full-frequency group. A patch
discriminator drives an optional non-saturating adversarial term.

The perceptual term is a multi-scale Sobel-gradient L1 distance (three dyadic
scales) rather than a pretrained-network metric; see README.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .grid import (AdamState, GridError, Tensor, adam_step, avg_pool2d,
                   conv2d, dense, group_norm, leaky_relu, silu, softplus,
                   upsample2x)
from .physics import (sino_loss_t, sobel, sobel_t, stratified_known_views,
                      visibility_weight_grid)
from .projection import Geometry, Sinogram


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the trace so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


@dataclass
class LatentCode:
    """Partitioned latent: channels [0, c_full) are full-frequency, the rest
    high-frequency. sigma is stored strictly positive (exp of half log-variance)."""

    mu: Tensor
    sigma: Tensor
    z: Tensor
    partition: tuple[int, int]

    def full(self, t: Tensor | None = None) -> Tensor:
        t = self.z if t is None else t
        return t.narrow(1, 0, self.partition[0])

    def high(self, t: Tensor | None = None) -> Tensor:
        t = self.z if t is None else t
        return t.narrow(1, self.partition[0], self.partition[1])


@dataclass
class VaeWeights:
    perceptual: float = 0.5
    kl: float = 1e-4
    adversarial: float = 0.05
    edge: float = 1.0
    sino: float = 0.1
    mass: float = 1.0
    visibility: float = 1.0


@dataclass
class VaeLossReport:
    rec: float
    per: float
    kl: float
    adv: float
    edge: float
    sino_physics: float
    weights: VaeWeights
    total: float


@dataclass
class VaeTrainConfig:
    # 1e-6 is the published full-scale rate; desk-scale runs override it
    learning_rate: float = 1e-6
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    weights: VaeWeights = field(default_factory=VaeWeights)
    known_fraction: float = 0.25


def reparameterize(mu: Tensor, sigma: Tensor, eps) -> Tensor:
    """z = mu + sigma * eps, elementwise."""
    if mu.shape != sigma.shape:
        raise GridError(f"mu shape {mu.shape} != sigma shape {sigma.shape}")
    eps_t = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=mu.data.dtype))
    if eps_t.shape != mu.shape:
        raise GridError(f"eps shape {eps_t.shape} != mu shape {mu.shape}")
    return mu + sigma * eps_t


def kl_loss(mu: Tensor, sigma: Tensor) -> Tensor:
    """0.5 * mean(mu^2 + sigma^2 - 1 - ln sigma^2), mean-reduced per element."""
    var = sigma * sigma
    return (mu * mu + var - 1.0 - var.log()).mean() * 0.5


def _kl_from_logvar(mu: Tensor, logvar: Tensor) -> Tensor:
    return (mu * mu + logvar.exp() - 1.0 - logvar).mean() * 0.5


def perceptual_edge_distance(a: Tensor, b: Tensor, scales: int = 3) -> Tensor:
    """Mean L1 distance between Sobel magnitude maps at dyadic scales."""
    total = None
    for s in range(scales):
        if s > 0:
            a = avg_pool2d(a)
            b = avg_pool2d(b)
        term = (sobel_t(a) - sobel_t(b)).abs().mean()
        total = term if total is None else total + term
    return total * (1.0 / scales)


def _perceptual_from_targets(a: Tensor, targets: list[Tensor]) -> Tensor:
    """Same distance against precomputed per-scale Sobel maps of the target."""
    total = None
    for s, target in enumerate(targets):
        if s > 0:
            a = avg_pool2d(a)
        term = (sobel_t(a) - target).abs().mean()
        total = term if total is None else total + term
    return total * (1.0 / len(targets))


class SinoVae:
    """Encoder + dual decoders + patch discriminator over one fixed grid size."""

    DOWN_STAGES = 3

    def __init__(self, n_views: int, n_bins: int, latent_channels: int = 4,
                 high_channels: int = 1, base_channels: int = 8, seed: int = 0):
        if n_views % (1 << self.DOWN_STAGES) or n_bins % (1 << self.DOWN_STAGES):
            raise GridError(f"grid {n_views}x{n_bins} must be divisible by "
                            f"{1 << self.DOWN_STAGES}")
        if not 0 < high_channels < latent_channels:
            raise GridError("need 0 < high_channels < latent_channels")
        self.n_views = n_views
        self.n_bins = n_bins
        self.latent_channels = latent_channels
        self.partition = (latent_channels - high_channels, high_channels)
        self.base = base_channels
        self.data_scale = 1.0
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._groups = 4
        self._build(np.random.default_rng(np.random.SeedSequence([0x5AE, int(seed)])))

    # -- construction --------------------------------------------------------

    def _conv(self, rng, name, cout, cin, k, gain=2.0):
        std = math.sqrt(gain / (cin * k * k))
        self.params[name + ".w"] = Tensor(
            rng.normal(0.0, std, (cout, cin, k, k)).astype(np.float32), requires_grad=True)
        self.params[name + ".b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def _norm(self, name, channels):
        self.params[name + ".g"] = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.params[name + ".b"] = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)

    def _dense(self, rng, name, cin, cout):
        std = math.sqrt(2.0 / cin)
        self.params[name + ".w"] = Tensor(
            rng.normal(0.0, std, (cin, cout)).astype(np.float32), requires_grad=True)
        self.params[name + ".b"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def _build(self, rng):
        b, c = self.base, self.latent_channels
        enc = [(b, 1), (2 * b, b), (4 * b, 2 * b)]
        for i, (cout, cin) in enumerate(enc):
            self._conv(rng, f"enc.c{i}", cout, cin, 3)
            self._norm(f"enc.n{i}", cout)
        self._conv(rng, "enc.c3", 4 * b, 4 * b, 3)
        self._norm("enc.n3", 4 * b)
        self._conv(rng, "enc.head", 2 * c, 4 * b, 1, gain=1.0)

        dec = [(4 * b, c), (4 * b, 4 * b), (2 * b, 4 * b), (b, 2 * b)]
        for i, (cout, cin) in enumerate(dec):
            self._conv(rng, f"dec.c{i}", cout, cin, 3)
            self._norm(f"dec.n{i}", cout)
        self._conv(rng, "dec.out", 1, b, 3, gain=1.0)

        hb = max(2, b)
        self._hf_blocks = [(2 * hb, self.partition[1]), (2 * hb, 2 * hb),
                           (2 * hb, 2 * hb), (hb, 2 * hb)]
        for i, (cout, cin) in enumerate(self._hf_blocks):
            self._conv(rng, f"hf.c{i}", cout, cin, 3)
            self._norm(f"hf.n{i}", cout)
        self._conv(rng, "hf.out", 1, hb, 3, gain=1.0)
        film_out = 2 * sum(cout for cout, _ in self._hf_blocks)
        self._dense(rng, "film.fc0", self.partition[0], 32)
        self._dense(rng, "film.fc1", 32, film_out)

        self._conv(rng, "disc.c0", b, 1, 3)
        self._conv(rng, "disc.c1", 2 * b, b, 3)
        self._conv(rng, "disc.c2", 1, 2 * b, 3, gain=1.0)

    # -- parameter groups ------------------------------------------------------

    def generator_params(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, v) for k, v in self.params.items() if not k.startswith("disc."))

    def discriminator_params(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, v) for k, v in self.params.items() if k.startswith("disc."))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward pieces ---------------------------------------------------------

    def _conv_block(self, x, conv_name, stride, norm_name=None, act=silu, pad=1):
        out = conv2d(x, self.params[conv_name + ".w"], stride=stride, pad=pad)
        out = out + self.params[conv_name + ".b"].reshape(1, -1, 1, 1)
        if norm_name is not None:
            out = group_norm(out, min(self._groups, out.shape[1]),
                             self.params[norm_name + ".g"], self.params[norm_name + ".b"])
        return act(out) if act is not None else out

    def _check_input(self, x: Tensor):
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.n_views or x.shape[3] != self.n_bins:
            raise GridError(f"expected input (B, 1, {self.n_views}, {self.n_bins}), "
                            f"got {x.shape}")

    def encode_t(self, x: Tensor, eps: np.ndarray) -> LatentCode:
        self._check_input(x)
        h = self._conv_block(x, "enc.c0", 2, "enc.n0")
        h = self._conv_block(h, "enc.c1", 2, "enc.n1")
        h = self._conv_block(h, "enc.c2", 2, "enc.n2")
        h = self._conv_block(h, "enc.c3", 1, "enc.n3")
        stats = conv2d(h, self.params["enc.head.w"], stride=1, pad=0)
        stats = stats + self.params["enc.head.b"].reshape(1, -1, 1, 1)
        c = self.latent_channels
        mu = stats.narrow(1, 0, c)
        logvar = stats.narrow(1, c, c).clip(-20.0, 10.0)
        sigma = (logvar * 0.5).exp()
        z = reparameterize(mu, sigma, eps)
        code = LatentCode(mu=mu, sigma=sigma, z=z, partition=self.partition)
        code._logvar = logvar  # kept for the numerically tidy KL form
        return code

    def decode_global_t(self, z: Tensor) -> Tensor:
        h = self._conv_block(z, "dec.c0", 1, "dec.n0")
        h = self._conv_block(upsample2x(h), "dec.c1", 1, "dec.n1")
        h = self._conv_block(upsample2x(h), "dec.c2", 1, "dec.n2")
        h = self._conv_block(upsample2x(h), "dec.c3", 1, "dec.n3")
        out = conv2d(h, self.params["dec.out.w"], stride=1, pad=1)
        return out + self.params["dec.out.b"].reshape(1, -1, 1, 1)

    def _film_coeffs(self, z_full: Tensor) -> list[tuple[Tensor, Tensor]]:
        pooled = z_full.mean(axis=(2, 3))
        h = silu(dense(pooled, self.params["film.fc0.w"], self.params["film.fc0.b"]))
        coeffs = dense(h, self.params["film.fc1.w"], self.params["film.fc1.b"])
        out = []
        offset = 0
        for cout, _ in self._hf_blocks:
            gamma = coeffs.narrow(1, offset, cout).reshape(-1, cout, 1, 1)
            beta = coeffs.narrow(1, offset + cout, cout).reshape(-1, cout, 1, 1)
            out.append((gamma, beta))
            offset += 2 * cout
        return out

    def decode_high_freq_t(self, code: LatentCode) -> Tensor:
        films = self._film_coeffs(code.full())
        h = code.high()
        for i in range(len(self._hf_blocks)):
            if i > 0:
                h = upsample2x(h)
            h = conv2d(h, self.params[f"hf.c{i}.w"], stride=1, pad=1)
            h = h + self.params[f"hf.c{i}.b"].reshape(1, -1, 1, 1)
            gamma, beta = films[i]
            h = h * (gamma + 1.0) + beta
            h = group_norm(h, min(self._groups, h.shape[1]),
                           self.params[f"hf.n{i}.g"], self.params[f"hf.n{i}.b"])
            h = silu(h)
        out = conv2d(h, self.params["hf.out.w"], stride=1, pad=1)
        return out + self.params["hf.out.b"].reshape(1, -1, 1, 1)

    def discriminate_t(self, x: Tensor) -> Tensor:
        h = leaky_relu(conv2d(x, self.params["disc.c0.w"], stride=2, pad=1)
                       + self.params["disc.c0.b"].reshape(1, -1, 1, 1))
        h = leaky_relu(conv2d(h, self.params["disc.c1.w"], stride=2, pad=1)
                       + self.params["disc.c1.b"].reshape(1, -1, 1, 1))
        out = conv2d(h, self.params["disc.c2.w"], stride=1, pad=1)
        return out + self.params["disc.c2.b"].reshape(1, -1, 1, 1)

    # -- public array/sinogram interface ----------------------------------------

    def _to_batch(self, x) -> np.ndarray:
        values = x.values if isinstance(x, Sinogram) else np.asarray(x, dtype=np.float32)
        if values.ndim == 2:
            values = values[None]
        if values.ndim == 3:
            values = values[:, None]
        return values.astype(np.float32) / self.data_scale

    def encode(self, x, rng=None, eps: np.ndarray | None = None) -> LatentCode:
        batch = self._to_batch(x)
        b = batch.shape[0]
        lat_shape = (b, self.latent_channels, self.n_views // 8, self.n_bins // 8)
        if eps is None:
            rng = rng or np.random.default_rng(0)
            eps = rng.standard_normal(lat_shape).astype(np.float32)
        return self.encode_t(Tensor(batch), eps)

    def decode_global(self, code: LatentCode) -> Sinogram:
        out = self.decode_global_t(code.z).data[0, 0] * self.data_scale
        return Sinogram(Geometry(self.n_views, self.n_bins), out.astype(np.float32))

    def decode_high_freq(self, code: LatentCode) -> np.ndarray:
        return (self.decode_high_freq_t(code).data[0, 0] * self.data_scale).astype(np.float32)

    def discriminate(self, x) -> np.ndarray:
        return self.discriminate_t(Tensor(self._to_batch(x))).data


def vae_loss(model: SinoVae, clean: Tensor, recon: Tensor, hf_out: Tensor,
             code: LatentCode, weights: VaeWeights,
             sobel_target: Tensor | None = None,
             per_targets: list[Tensor] | None = None,
             penalty_grid: np.ndarray | None = None,
             n_nonknown: int = 0,
             mass_floor: float = 0.0) -> tuple[Tensor, VaeLossReport]:
    """Composite objective; returns (total tensor, float report)."""
    diff = recon - clean
    rec = (diff * diff).mean()
    if per_targets is not None:
        per = _perceptual_from_targets(recon, per_targets)
    else:
        per = perceptual_edge_distance(recon, clean)
    if hasattr(code, "_logvar"):
        kl = _kl_from_logvar(code.mu, code._logvar)
    else:
        kl = kl_loss(code.mu, code.sigma)
    if sobel_target is None:
        sobel_target = sobel_t(clean).detach()
    ediff = hf_out - sobel_target
    edge = (ediff * ediff).mean()
    if weights.adversarial > 0.0:
        adv = softplus(-model.discriminate_t(recon)).mean()
    else:
        adv = Tensor(np.zeros((), dtype=recon.data.dtype))
    if weights.sino > 0.0 and penalty_grid is not None:
        grids = recon.reshape(recon.shape[0], recon.shape[2], recon.shape[3])
        sino = sino_loss_t(grids, penalty_grid, n_nonknown,
                           (weights.mass, weights.visibility), mass_floor=mass_floor)
    else:
        sino = Tensor(np.zeros((), dtype=recon.data.dtype))
    total = (rec + per * weights.perceptual + kl * weights.kl + adv * weights.adversarial
             + edge * weights.edge + sino * weights.sino)
    report = VaeLossReport(rec=rec.item(), per=per.item(), kl=kl.item(), adv=adv.item(),
                           edge=edge.item(), sino_physics=sino.item(), weights=weights,
                           total=total.item())
    return total, report


def discriminator_loss(model: SinoVae, real: Tensor, fake: Tensor) -> Tensor:
    """Logistic real/fake loss on patch scores (fake must be detached)."""
    return softplus(-model.discriminate_t(real)).mean() + softplus(model.discriminate_t(fake)).mean()


def train_vae(model: SinoVae, dataset: np.ndarray, config: VaeTrainConfig):
    """Adam training on clean sinograms; deterministic per config.seed.

    dataset is (N, n_views, n_bins) of raw (unscaled) clean sinograms. Returns
    (model, trace) where trace rows carry per-epoch mean loss components.
    """
    dataset = np.asarray(dataset, dtype=np.float32)
    if dataset.ndim != 3 or dataset.shape[0] == 0:
        raise GridError(f"dataset must be (N, views, bins) and nonempty, got {dataset.shape}")
    n, n_views, n_bins = dataset.shape
    if (n_views, n_bins) != (model.n_views, model.n_bins):
        raise GridError(f"dataset grid {n_views}x{n_bins} != model grid "
                        f"{model.n_views}x{model.n_bins}")
    model.data_scale = float(max(np.abs(dataset).max(), 1e-12))
    scaled = dataset / model.data_scale

    weights = config.weights
    known = stratified_known_views(n_views, config.known_fraction)
    grids = None
    n_nonknown = n_views - len(known)
    if weights.sino > 0.0 and weights.visibility > 0.0 and n_nonknown > 0:
        geometry = Geometry(n_views, n_bins)
        grids = np.zeros_like(dataset, dtype=bool)
        for i in range(n):
            grid, _ = visibility_weight_grid(Sinogram(geometry, dataset[i]), known)
            grids[i] = grid

    # per-sample Sobel targets (full-res edge target plus the dyadic pyramid)
    pyramid: list[np.ndarray] = []
    level = scaled
    for s in range(3):
        if s > 0:
            h, w = level.shape[1:]
            level = level.reshape(n, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
        pyramid.append(np.stack([sobel(level[i]) for i in range(n)]).astype(np.float32))

    gen_params = model.generator_params()
    disc_params = model.discriminator_params()
    gen_opt = AdamState(learning_rate=config.learning_rate)
    disc_opt = AdamState(learning_rate=config.learning_rate)
    rng = np.random.default_rng(np.random.SeedSequence([0x7AE1, int(config.seed)]))
    lat_shape = (model.latent_channels, n_views // 8, n_bins // 8)

    trace: list[dict] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = {k: 0.0 for k in ("rec", "per", "kl", "adv", "edge", "sino", "total")}
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = Tensor(scaled[idx][:, None])
            eps = rng.standard_normal((len(idx),) + lat_shape).astype(np.float32)
            code = model.encode_t(xb, eps)
            recon = model.decode_global_t(code.z)
            hf_out = model.decode_high_freq_t(code)
            pg = grids[idx] if grids is not None else None
            per_targets = [Tensor(level[idx][:, None]) for level in pyramid]
            floor = 0.05 * float(scaled[idx].sum(axis=-1).mean())
            total, report = vae_loss(model, xb, recon, hf_out, code, weights,
                                     sobel_target=per_targets[0],
                                     per_targets=per_targets,
                                     penalty_grid=pg, n_nonknown=n_nonknown,
                                     mass_floor=floor)
            if not math.isfinite(report.total):
                raise DivergenceError(f"non-finite VAE loss at epoch {epoch}", trace)
            model.zero_grad()
            total.backward()
            adam_step(gen_params, {k: p.grad for k, p in gen_params.items()
                                   if p.grad is not None}, gen_opt)
            if weights.adversarial > 0.0:
                model.zero_grad()
                d_loss = discriminator_loss(model, xb, recon.detach())
                if not math.isfinite(d_loss.item()):
                    raise DivergenceError(f"non-finite discriminator loss at epoch {epoch}", trace)
                d_loss.backward()
                adam_step(disc_params, {k: p.grad for k, p in disc_params.items()
                                        if p.grad is not None}, disc_opt)
            for key, val in (("rec", report.rec), ("per", report.per), ("kl", report.kl),
                             ("adv", report.adv), ("edge", report.edge),
                             ("sino", report.sino_physics), ("total", report.total)):
                sums[key] += val
            batches += 1
        trace.append({"epoch": epoch, **{k: v / batches for k, v in sums.items()}})
    return model, trace


# ---------------------------------------------------------------------------
# persistence (SFWT parameters + JSON sidecar with model metadata)

def save_vae(path, model: SinoVae) -> None:
    import json
    from .grid import save_params
    save_params(path, model.params)
    sidecar = {
        "kind": "sinovae",
        "n_views": model.n_views,
        "n_bins": model.n_bins,
        "latent_channels": model.latent_channels,
        "high_channels": model.partition[1],
        "base_channels": model.base,
        "data_scale": model.data_scale,
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2)


def load_vae(path) -> SinoVae:
    import json
    import os
    from .grid import CheckpointError, load_params_into
    sidecar_path = str(path) + ".json"
    if not os.path.exists(sidecar_path):
        raise CheckpointError(f"{path}: missing metadata sidecar {sidecar_path}")
    with open(sidecar_path) as fh:
        meta = json.load(fh)
    if meta.get("kind") != "sinovae":
        raise CheckpointError(f"{path}: sidecar kind {meta.get('kind')!r} is not 'sinovae'")
    model = SinoVae(meta["n_views"], meta["n_bins"],
                    latent_channels=meta["latent_channels"],
                    high_channels=meta["high_channels"],
                    base_channels=meta["base_channels"])
    model.data_scale = float(meta["data_scale"])
    load_params_into(path, model.params)
    return model

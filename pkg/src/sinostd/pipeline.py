"""Run configuration and the operations behind the CLI subcommands."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dataset as ds
from . import fileio, metrics
from .degradation import DegradationSpec
from .lrd import (Denoiser, LrdTrainConfig, load_denoiser, make_schedule,
                  sample, save_denoiser, train_lrd)
from .projection import Geometry, Sinogram, fbp
from .sinovae import (SinoVae, VaeTrainConfig, VaeWeights, load_vae, save_vae,
                      train_vae)


class ConfigError(ValueError):
    pass


@dataclass
class GeometryConfig:
    n_views: int = 128
    n_bins: int = 128


@dataclass
class VaeConfig:
    # desk-scale rate; the published full-scale rate is 1e-6
    learning_rate: float = 2e-3
    epochs: int = 30
    batch_size: int = 16
    latent_channels: int = 4
    high_channels: int = 1
    base_channels: int = 8
    known_fraction: float = 0.25
    weights: VaeWeights = field(default_factory=VaeWeights)


@dataclass
class LrdConfig:
    # desk-scale rate; the published full-scale rate is 1e-4
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 16
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hidden: int = 48
    time_dim: int = 32


@dataclass
class MixingConfig:
    k_min: int = 1
    k_max: int = 3


@dataclass
class RunConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    vae: VaeConfig = field(default_factory=VaeConfig)
    lrd: LrdConfig = field(default_factory=LrdConfig)
    mixing: MixingConfig = field(default_factory=MixingConfig)
    seed: int = 0

    def validate(self) -> None:
        g = self.geometry
        if g.n_views < 8 or g.n_bins < 8:
            raise ConfigError("geometry must be at least 8x8")
        if g.n_views % 8 or g.n_bins % 8:
            raise ConfigError("geometry extents must be divisible by 8 (3 encoder stages)")
        if not (0 < self.vae.learning_rate <= 1 and 0 < self.lrd.learning_rate <= 1):
            raise ConfigError("learning rates must lie in (0, 1]")
        if self.vae.epochs < 0 or self.lrd.epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.vae.batch_size < 1 or self.lrd.batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not 1 <= self.mixing.k_min <= self.mixing.k_max <= 9:
            raise ConfigError("mixing needs 1 <= k_min <= k_max <= 9")
        if not (0 < self.lrd.beta_start <= self.lrd.beta_end < 1):
            raise ConfigError("beta range must satisfy 0 < start <= end < 1")
        if self.lrd.T < 1:
            raise ConfigError("diffusion needs T >= 1")
        if not 0 < self.vae.known_fraction <= 1:
            raise ConfigError("known_fraction must lie in (0, 1]")


def default_config(size: int = 128) -> RunConfig:
    cfg = RunConfig()
    cfg.geometry.n_views = size
    cfg.geometry.n_bins = size
    return cfg


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        json.dump(asdict(cfg), fh, indent=2)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    try:
        weights = VaeWeights(**doc.get("vae", {}).pop("weights", {}))
        cfg = RunConfig(
            geometry=GeometryConfig(**doc.get("geometry", {})),
            vae=VaeConfig(weights=weights, **doc.get("vae", {})),
            lrd=LrdConfig(**doc.get("lrd", {})),
            mixing=MixingConfig(**doc.get("mixing", {})),
            seed=int(doc.get("seed", 0)),
        )
    except TypeError as exc:
        raise ConfigError(f"unknown config field: {exc}") from exc
    cfg.validate()
    return cfg


def geometry_of(cfg: RunConfig) -> Geometry:
    return Geometry(cfg.geometry.n_views, cfg.geometry.n_bins)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_dataset(cfg: RunConfig, n_samples: int, out_dir: str, log=None) -> ds.DatasetManifest:
    cfg.validate()
    manifest = ds.generate_dataset(out_dir, n_samples, geometry_of(cfg),
                                   base_seed=cfg.seed, k_min=cfg.mixing.k_min,
                                   k_max=cfg.mixing.k_max, log=log)
    ds.validate_manifest(manifest)
    return manifest


def write_trace_csv(path, trace: list[dict]) -> None:
    if not trace:
        with open(path, "w") as fh:
            fh.write("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(trace[0].keys()))
        writer.writeheader()
        writer.writerows(trace)


def cmd_train_vae(cfg: RunConfig, manifest_dir: str, out_checkpoint: str, log=None):
    cfg.validate()
    manifest = ds.load_manifest(manifest_dir)
    ds.validate_manifest(manifest)
    clean = ds.load_arrays(manifest, "clean")
    model = SinoVae(manifest.geometry.n_views, manifest.geometry.n_bins,
                    latent_channels=cfg.vae.latent_channels,
                    high_channels=cfg.vae.high_channels,
                    base_channels=cfg.vae.base_channels, seed=cfg.seed)
    train_cfg = VaeTrainConfig(learning_rate=cfg.vae.learning_rate, epochs=cfg.vae.epochs,
                               batch_size=cfg.vae.batch_size, seed=cfg.seed,
                               weights=cfg.vae.weights,
                               known_fraction=cfg.vae.known_fraction)
    model, trace = train_vae(model, clean, train_cfg)
    save_vae(out_checkpoint, model)
    write_trace_csv(str(out_checkpoint) + ".trace.csv", trace)
    if log:
        log(f"saved VAE checkpoint to {out_checkpoint}")
    return model, trace


def encode_latents(model: SinoVae, arrays: np.ndarray, batch: int = 32) -> np.ndarray:
    """Posterior means of a stack of sinogram grids, in model input scale."""
    out = []
    for start in range(0, len(arrays), batch):
        chunk = arrays[start:start + batch].astype(np.float32) / model.data_scale
        code = model.encode_t(_const_tensor(chunk[:, None]), np.zeros(
            (len(chunk), model.latent_channels, model.n_views // 8, model.n_bins // 8),
            dtype=np.float32))
        out.append(code.mu.data)
    return np.concatenate(out, axis=0)


def _const_tensor(arr):
    from .grid import Tensor
    return Tensor(arr)


def cmd_train_lrd(cfg: RunConfig, manifest_dir: str, vae_checkpoint: str,
                  out_checkpoint: str, log=None):
    cfg.validate()
    if not os.path.exists(vae_checkpoint):
        raise ds.DataError(f"VAE checkpoint {vae_checkpoint} not found; train it first")
    model = load_vae(vae_checkpoint)
    manifest = ds.load_manifest(manifest_dir)
    ds.validate_manifest(manifest)
    if (manifest.geometry.n_views, manifest.geometry.n_bins) != (model.n_views, model.n_bins):
        raise ds.DataError(f"manifest geometry {manifest.geometry.n_views}x"
                           f"{manifest.geometry.n_bins} != VAE grid "
                           f"{model.n_views}x{model.n_bins}")
    clean_lat = encode_latents(model, ds.load_arrays(manifest, "clean"))
    degr_lat = encode_latents(model, ds.load_arrays(manifest, "degraded"))
    latent_scale = float(max(np.std(clean_lat), 1e-12))
    z0 = clean_lat / latent_scale
    cond = degr_lat / latent_scale
    schedule = make_schedule(cfg.lrd.T, cfg.lrd.beta_start, cfg.lrd.beta_end)
    denoiser = Denoiser(latent_channels=model.latent_channels,
                        cond_channels=model.latent_channels,
                        hidden=cfg.lrd.hidden, time_dim=cfg.lrd.time_dim, seed=cfg.seed)
    train_cfg = LrdTrainConfig(learning_rate=cfg.lrd.learning_rate, epochs=cfg.lrd.epochs,
                               batch_size=cfg.lrd.batch_size, seed=cfg.seed)
    denoiser, trace = train_lrd(denoiser, z0, cond, schedule, train_cfg)
    save_denoiser(out_checkpoint, denoiser, schedule, latent_scale,
                  (model.n_views, model.n_bins), model.partition,
                  (cfg.lrd.beta_start, cfg.lrd.beta_end))
    write_trace_csv(str(out_checkpoint) + ".trace.csv", trace)
    if log:
        log(f"saved LRD checkpoint to {out_checkpoint}")
    return denoiser, trace


def standardize_sinogram(vae: SinoVae, denoiser: Denoiser, schedule, latent_scale: float,
                         degraded: Sinogram, seed: int = 0) -> Sinogram:
    """encode degraded -> conditional reverse diffusion -> global decode."""
    code = vae.encode(degraded.values, eps=np.zeros(
        (1, vae.latent_channels, vae.n_views // 8, vae.n_bins // 8), dtype=np.float32))
    cond = code.mu.data / latent_scale
    refined = sample(denoiser, cond, schedule, seed=seed) * latent_scale
    out = vae.decode_global_t(_const_tensor(refined)).data[0, 0] * vae.data_scale
    return Sinogram(degraded.geometry, out.astype(np.float32))


def cmd_standardize(vae_checkpoint: str, lrd_checkpoint: str, in_path: str, out_path: str,
                    seed: int = 0) -> Sinogram:
    vae = load_vae(vae_checkpoint)
    denoiser, schedule, meta = load_denoiser(lrd_checkpoint)
    degraded = fileio.read_sinogram(in_path)
    geo = meta["geometry"]
    if (geo["n_views"], geo["n_bins"]) != (vae.n_views, vae.n_bins):
        raise ds.DataError(f"LRD checkpoint geometry {geo['n_views']}x{geo['n_bins']} != "
                           f"VAE grid {vae.n_views}x{vae.n_bins}")
    if (degraded.geometry.n_views, degraded.geometry.n_bins) != (vae.n_views, vae.n_bins):
        raise ds.DataError(f"input geometry {degraded.geometry.n_views}x"
                           f"{degraded.geometry.n_bins} != model grid "
                           f"{vae.n_views}x{vae.n_bins}")
    if list(meta["partition"]) != list(vae.partition):
        raise ds.DataError(f"latent partition mismatch: {meta['partition']} vs {vae.partition}")
    out = standardize_sinogram(vae, denoiser, schedule, meta["latent_scale"], degraded, seed)
    fileio.write_sinogram(out_path, out)
    return out


def cmd_recon(in_path: str, out_path: str, pgm_path: str | None = None,
              hann: bool = False):
    sino = fileio.read_sinogram(in_path)
    image = fbp(sino, hann=hann)
    fileio.write_image(out_path, image)
    if pgm_path:
        fileio.write_pgm(pgm_path, image)
    return image


# ---------------------------------------------------------------------------
# evaluation

def _pair_files(ref_dir: str, test_dir: str):
    def stems(d):
        out = {}
        for name in sorted(os.listdir(d)):
            if name.endswith(".sgrm"):
                out.setdefault(name.split(".")[0], name)
        return out

    ref = stems(ref_dir)
    test = stems(test_dir)
    shared = sorted(set(ref) & set(test))
    unpaired = sorted(set(ref) ^ set(test))
    return [(s, os.path.join(ref_dir, ref[s]), os.path.join(test_dir, test[s]))
            for s in shared], unpaired


def evaluate_pair(ref: Sinogram, test: Sinogram) -> dict:
    row = {}
    proj = metrics.metric_report(test.values, ref.values, domain="projection")
    row.update(psnr_proj=proj.psnr, ssim_proj=proj.ssim, nrmse_proj=proj.nrmse)
    ref_img = fbp(ref)
    test_img = fbp(test)
    img = metrics.metric_report(test_img.values, ref_img.values, domain="image")
    row.update(psnr_image=img.psnr, ssim_image=img.ssim, nrmse_image=img.nrmse)
    return row


def cmd_eval(ref_dir: str, test_dir: str, out_prefix: str, log=None) -> dict:
    pairs, unpaired = _pair_files(ref_dir, test_dir)
    if log:
        for stem in unpaired:
            log(f"unpaired sample skipped: {stem}")
    rows = []
    for stem, ref_path, test_path in pairs:
        ref = fileio.read_sinogram(ref_path)
        test = fileio.read_sinogram(test_path)
        row = {"sample": stem, **evaluate_pair(ref, test)}
        rows.append(row)
    keys = [k for k in rows[0] if k != "sample"] if rows else []
    aggregate = {}
    for key in keys:
        vals = np.array([r[key] for r in rows], dtype=np.float64)
        aggregate[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    report = {"n_pairs": len(rows), "unpaired": unpaired, "per_sample": rows,
              "aggregate": aggregate}
    with open(out_prefix + ".json", "w") as fh:
        json.dump(report, fh, indent=2)
    with open(out_prefix + ".csv", "w", newline="") as fh:
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
            mean_row = {"sample": "mean", **{k: aggregate[k]["mean"] for k in keys}}
            std_row = {"sample": "std", **{k: aggregate[k]["std"] for k in keys}}
            writer.writerows([mean_row, std_row])
    return report


# ---------------------------------------------------------------------------
# selfcheck: quick oracle and invariant sweep

def run_selfcheck(log=print) -> bool:
    from .degradation import low_dose
    from .lrd import denoise_step, forward_noise
    from .physics import cross_view_mass_loss, visibility_loss, stratified_known_views
    from .projection import disk_phantom, forward_project, back_project, random_ellipse_phantom
    from .grid import Tensor, conv2d, finite_diff_check
    from .sinovae import kl_loss

    checks: list[tuple[str, bool]] = []

    def check(name, ok):
        checks.append((name, bool(ok)))
        log(f"[{'PASS' if ok else 'FAIL'}] {name}")

    geometry = Geometry(64, 64)
    disk = disk_phantom(64, radius=20.0)
    sino = forward_project(disk, geometry)
    s = geometry.bin_centers
    chord = 2.0 * np.sqrt(np.maximum(400.0 - s ** 2, 0.0))
    sel = np.abs(s) < 0.9 * 20.0
    check("projector disk chord within 2%",
          float(np.max(np.abs(sino.values[0][sel] - chord[sel]) / chord[sel])) < 0.02)
    mass = sino.values.sum(axis=1)
    check("per-view mass within 1%", float((mass.max() - mass.min()) / mass.mean()) < 0.01)

    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, 64)).astype(np.float32)
    y = rng.normal(size=(64, 64)).astype(np.float32)
    from .projection import Image as PImage
    px = forward_project(PImage(x), geometry)
    bpy = back_project(Sinogram(geometry, y))
    lhs = float(np.vdot(px.values.astype(np.float64), y.astype(np.float64)))
    rhs = float(np.vdot(x.astype(np.float64), bpy.values.astype(np.float64)))
    check("adjoint identity within 1e-4", abs(lhs - rhs) / abs(lhs) < 1e-4)

    phantom = random_ellipse_phantom(64, seed=3)
    ideal = forward_project(phantom, geometry)
    check("mass loss < 1e-3 on ideal sinogram", cross_view_mass_loss(ideal) < 1e-3)
    known = stratified_known_views(64)
    check("visibility loss < 1e-6 on ideal sinogram", visibility_loss(ideal, known) < 1e-6)

    ld = low_dose(Sinogram(geometry, np.zeros((64, 64), dtype=np.float32)), 1e6, seed=1)
    check("low dose ln(I0/N) mean near 0", abs(float(ld.values.mean())) < 0.01)

    schedule = make_schedule(1, 0.3, 0.3)
    z0 = rng.normal(size=(1, 4, 8, 8)).astype(np.float32)
    eps = rng.normal(size=z0.shape).astype(np.float32)
    z1 = forward_noise(z0, 1, eps, schedule)
    z0r = denoise_step(z1, 1, eps, schedule)
    check("T=1 exact recovery to 1e-6", float(np.abs(z0r - z0).max()) < 1e-6)
    long_schedule = make_schedule(1000)
    check("alpha_bar(T=1000) < 1e-4", float(long_schedule.alpha_bar[-1]) < 1e-4)

    from .grid import Tensor as T
    check("KL(0,1) == 0", kl_loss(T(np.zeros(8)), T(np.ones(8))).item() == 0.0)
    check("KL(1,1) == 0.5/elt", abs(kl_loss(T(np.ones(8)), T(np.ones(8))).item() - 0.5) < 1e-7)

    rep = finite_diff_check(lambda a, k: conv2d(a, k, stride=1, pad=1),
                            [rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3))])
    check("conv2d gradient check < 1e-4", rep.passed)

    return all(ok for _, ok in checks)

"""Training dataset generation, manifests, and validation.

A dataset directory holds one clean/degraded SGRM pair plus a JSON sidecar per
sample, and a manifest listing them. Per-sample seeds are split from the base
seed by sample index, so generation is order-independent, resumable, and
byte-reproducible.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .degradation import DegradationSpec, mix, random_spec
from .fileio import FileFormatError, read_sinogram, write_sinogram
from .projection import Geometry, random_ellipse_phantom

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


class DataError(ValueError):
    pass


@dataclass
class SampleEntry:
    index: int
    clean: str
    degraded: str
    sidecar: str
    seed: int


@dataclass
class DatasetManifest:
    root: str
    geometry: Geometry
    base_seed: int
    k_min: int
    k_max: int
    samples: list[SampleEntry]

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)


def sample_seed(base_seed: int, index: int) -> int:
    """Deterministic per-sample child seed."""
    ss = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFFFFFFFFFF, int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _atomic_write(path: str, writer) -> None:
    tmp = path + ".tmp"
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _sample_complete(root: str, entry: SampleEntry) -> bool:
    try:
        read_sinogram(os.path.join(root, entry.clean))
        read_sinogram(os.path.join(root, entry.degraded))
        with open(os.path.join(root, entry.sidecar)) as fh:
            json.load(fh)
        return True
    except (OSError, FileFormatError, json.JSONDecodeError):
        return False


def generate_dataset(out_dir: str, n_samples: int, geometry: Geometry, base_seed: int = 0,
                     k_min: int = 1, k_max: int = 3, phantom_side: int | None = None,
                     log=None) -> DatasetManifest:
    """Generate phantoms, project, degrade per random spec, and write the
    manifest. Existing complete samples are skipped (resumable)."""
    if n_samples < 0:
        raise DataError("n_samples must be >= 0")
    os.makedirs(out_dir, exist_ok=True)
    side = phantom_side or geometry.n_bins
    entries: list[SampleEntry] = []
    for i in range(n_samples):
        stem = f"s{i:05d}"
        entry = SampleEntry(index=i, clean=f"{stem}.clean.sgrm",
                            degraded=f"{stem}.degraded.sgrm",
                            sidecar=f"{stem}.json", seed=sample_seed(base_seed, i))
        entries.append(entry)
        if _sample_complete(out_dir, entry):
            continue
        phantom = random_ellipse_phantom(side, seed=entry.seed)
        spec = random_spec(entry.seed, k_min, k_max,
                           n_views_hint=geometry.n_views, n_bins_hint=geometry.n_bins)
        pair = mix(phantom, geometry, spec)
        _atomic_write(os.path.join(out_dir, entry.clean),
                      lambda p: write_sinogram(p, pair.clean))
        _atomic_write(os.path.join(out_dir, entry.degraded),
                      lambda p: write_sinogram(p, pair.degraded))
        sidecar = {"index": i, "seed": entry.seed, "phantom": {"kind": "random_ellipse",
                                                               "side": side},
                   "spec": spec.to_json()}
        _atomic_write(os.path.join(out_dir, entry.sidecar),
                      lambda p: open(p, "w").write(json.dumps(sidecar, indent=2)))
        if log:
            log(f"sample {i + 1}/{n_samples}")
    manifest = DatasetManifest(root=out_dir, geometry=geometry, base_seed=base_seed,
                               k_min=k_min, k_max=k_max, samples=entries)
    _atomic_write(os.path.join(out_dir, MANIFEST_NAME),
                  lambda p: open(p, "w").write(json.dumps(_manifest_doc(manifest), indent=2)))
    return manifest


def _manifest_doc(manifest: DatasetManifest) -> dict:
    return {
        "format_version": MANIFEST_VERSION,
        "n_samples": manifest.n_samples,
        "geometry": {"n_views": manifest.geometry.n_views, "n_bins": manifest.geometry.n_bins,
                     "detector_spacing": manifest.geometry.detector_spacing},
        "base_seed": manifest.base_seed,
        "mixing": {"k_min": manifest.k_min, "k_max": manifest.k_max},
        "samples": [{"index": e.index, "clean": e.clean, "degraded": e.degraded,
                     "sidecar": e.sidecar, "seed": e.seed} for e in manifest.samples],
    }


def load_manifest(root: str) -> DatasetManifest:
    path = os.path.join(root, MANIFEST_NAME)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    if doc.get("format_version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {doc.get('format_version')}")
    geo = doc["geometry"]
    geometry = Geometry(geo["n_views"], geo["n_bins"],
                        detector_spacing=geo.get("detector_spacing", 1.0))
    samples = [SampleEntry(index=s["index"], clean=s["clean"], degraded=s["degraded"],
                           sidecar=s["sidecar"], seed=s["seed"]) for s in doc["samples"]]
    return DatasetManifest(root=root, geometry=geometry, base_seed=doc["base_seed"],
                           k_min=doc["mixing"]["k_min"], k_max=doc["mixing"]["k_max"],
                           samples=samples)


def validate_manifest(manifest: DatasetManifest) -> None:
    """Every listed file must exist and parse; seeds must be unique."""
    seeds = set()
    for entry in manifest.samples:
        if entry.seed in seeds:
            raise DataError(f"duplicate sample seed {entry.seed} at index {entry.index}")
        seeds.add(entry.seed)
        for name in (entry.clean, entry.degraded):
            path = manifest.path(name)
            try:
                sino = read_sinogram(path)
            except (OSError, FileFormatError) as exc:
                raise DataError(f"sample {entry.index}: {exc}") from exc
            if not sino.geometry.same_grid(manifest.geometry):
                raise DataError(f"sample {entry.index}: {name} geometry does not match manifest")
        try:
            with open(manifest.path(entry.sidecar)) as fh:
                doc = json.load(fh)
            DegradationSpec.from_json(doc["spec"])
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise DataError(f"sample {entry.index}: bad sidecar: {exc}") from exc


def load_arrays(manifest: DatasetManifest, which: str = "clean") -> np.ndarray:
    """Stack all clean or degraded sinograms into one (N, views, bins) array."""
    if which not in ("clean", "degraded"):
        raise DataError(f"unknown dataset component {which!r}")
    out = np.empty((manifest.n_samples, manifest.geometry.n_views, manifest.geometry.n_bins),
                   dtype=np.float32)
    for i, entry in enumerate(manifest.samples):
        out[i] = read_sinogram(manifest.path(getattr(entry, which))).values
    return out

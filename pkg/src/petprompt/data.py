"""Synthetic activity phantoms, Poisson count thinning and on-disk volume formats.

Real list-mode subsampling followed by OSEM reconstruction is replaced by
independent voxelwise Poisson draws on a ground-truth activity map. A volume
at count fraction ``delta`` is ``k / (delta * c_full)`` with
``k ~ Poisson(delta * c_full * lambda)``, so it is unbiased with variance
``lambda / (delta * c_full)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import FormatError

ROLES = ("ground_truth", "full_count", "low_count", "denoised")
SPLITS = ("train", "val", "test")
DELTA_RANGE = (0.13, 0.22)

VOLUME_MAGIC = b"PVOL"
VOLUME_VERSION = 1
DTYPE_F32LE = 0
# magic, version, dtype code, reserved
_HEADER = struct.Struct("<4sIII")
_DIMS = struct.Struct("<III")


def check_delta(delta: float) -> float:
    delta = float(delta)
    if not np.isfinite(delta) or not 0.0 < delta <= 1.0:
        raise ValueError(f"count level delta must lie in (0, 1], got {delta!r}")
    return delta


@dataclass
class Volume3D:
    """An H x W x D activity volume plus its provenance.

    ``voxels`` is always stored as float32 so that file round trips are exact.
    """

    voxels: np.ndarray
    role: str
    study_id: str = ""
    realization: int = 0
    delta: float | None = None
    seed: int | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"voxels must be 3D, got shape {self.voxels.shape}")
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.realization < 0:
            raise ValueError("realization must be non-negative")
        if self.role == "low_count":
            if self.delta is None:
                raise ValueError("low_count volumes need a count level")
            self.delta = check_delta(self.delta)
        elif self.delta is not None:
            raise ValueError(f"delta is only recorded for low_count volumes, not {self.role}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("voxels must be finite")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)

    def sidecar(self) -> dict[str, Any]:
        d = {
            "study_id": self.study_id,
            "realization": self.realization,
            "role": self.role,
            "delta": self.delta,
            "seed": self.seed,
        }
        if self.meta:
            d["meta"] = self.meta
        return d

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.voxels.shape == other.voxels.shape
            and self.voxels.tobytes() == other.voxels.tobytes()
            and self.sidecar() == other.sidecar()
        )


# --------------------------------------------------------------------------
# Phantoms


@dataclass
class PhantomConfig:
    """Shape and intensity knobs for :func:`generate_phantom`.

    Intensities are in arbitrary SUVR-like units; the volume is clipped to
    ``[0, intensity_max]``.
    """

    background: float = 1.0
    semi_axes: tuple[float, float, float] = (0.42, 0.38, 0.42)
    axis_jitter: float = 0.04
    n_blobs: int = 6
    hot_fraction: float = 0.7
    hot_amplitude: tuple[float, float] = (0.8, 2.5)
    cold_amplitude: tuple[float, float] = (0.3, 0.7)
    blob_sigma: tuple[float, float] = (0.05, 0.14)
    intensity_max: float = 4.0


def generate_phantom(seed: int, dims=(32, 32, 16), config: PhantomConfig | None = None) -> Volume3D:
    """Brain-like ellipsoid with smooth hot/cold Gaussian blobs inside it."""
    cfg = config or PhantomConfig()
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise ValueError(f"phantom dims must be three values each >= 8, got {dims}")
    if cfg.n_blobs < 0:
        raise ValueError("n_blobs must be non-negative")
    rng = np.random.default_rng(seed)

    # normalized coordinates in [-0.5, 0.5] along each axis
    axes = [(np.arange(n) + 0.5) / n - 0.5 for n in dims]
    x, y, z = np.meshgrid(*axes, indexing="ij")

    center = rng.uniform(-0.02, 0.02, size=3)
    semi = np.asarray(cfg.semi_axes) * (1.0 + rng.uniform(-cfg.axis_jitter, cfg.axis_jitter, size=3))
    r2 = ((x - center[0]) / semi[0]) ** 2 + ((y - center[1]) / semi[1]) ** 2 + ((z - center[2]) / semi[2]) ** 2
    support = r2 <= 1.0

    act = np.full(dims, cfg.background, dtype=np.float64)
    for _ in range(cfg.n_blobs):
        # blob centres stay well inside the support
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        radius = 0.7 * rng.uniform() ** (1.0 / 3.0)
        c = center + semi * direction * radius
        sigma = rng.uniform(*cfg.blob_sigma)
        if rng.uniform() < cfg.hot_fraction:
            amp = rng.uniform(*cfg.hot_amplitude)
        else:
            amp = -rng.uniform(*cfg.cold_amplitude) * cfg.background
        d2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
        act += amp * np.exp(-0.5 * d2 / sigma**2)

    act = np.clip(act, 0.0, cfg.intensity_max) * support
    return Volume3D(act, role="ground_truth", seed=int(seed))


def simulate_counts(truth: Volume3D, delta: float, c_full: float, seed: int) -> Volume3D:
    """Poisson-thin a ground-truth map to count fraction ``delta``.

    ``delta == 1`` gives the full-count surrogate.
    """
    if truth.role != "ground_truth":
        raise ValueError(f"expected a ground_truth volume, got role {truth.role!r}")
    delta = check_delta(delta)
    c_full = float(c_full)
    if not c_full > 0:
        raise ValueError(f"c_full must be positive, got {c_full}")
    scale = delta * c_full
    rng = np.random.default_rng(seed)
    lam = truth.voxels.astype(np.float64)
    counts = rng.poisson(scale * lam)
    full = delta == 1.0
    return Volume3D(
        counts / scale,
        role="full_count" if full else "low_count",
        study_id=truth.study_id,
        delta=None if full else delta,
        seed=int(seed),
    )


# --------------------------------------------------------------------------
# Volume files


def save_volume(v: Volume3D, path) -> None:
    """Write ``<path>`` (binary volume) and ``<path stem>.json`` (metadata)."""
    path = Path(path)
    h, w, d = v.dims
    with open(path, "wb") as f:
        f.write(_HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, DTYPE_F32LE, 0))
        f.write(_DIMS.pack(h, w, d))
        f.write(v.voxels.astype("<f4").ravel(order="F").tobytes())
    with open(sidecar_path(path), "w") as f:
        json.dump(v.sidecar(), f, indent=1, sort_keys=True)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def read_volume_array(path) -> np.ndarray:
    """Parse the binary volume file and return its (H, W, D) float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    magic, version, dtype, _ = _HEADER.unpack_from(raw, 0)
    if magic != VOLUME_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != VOLUME_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if dtype != DTYPE_F32LE:
        raise FormatError(f"{path}: unsupported dtype code {dtype}", offset=8)
    if len(raw) < _HEADER.size + _DIMS.size:
        raise FormatError(f"{path}: truncated dims", offset=len(raw))
    dims = _DIMS.unpack_from(raw, _HEADER.size)
    if min(dims) == 0:
        raise FormatError(f"{path}: zero dimension in {dims}", offset=_HEADER.size)
    start = _HEADER.size + _DIMS.size
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    if len(raw) - start != expected:
        raise FormatError(
            f"{path}: payload has {len(raw) - start} bytes, dims {dims} need {expected}",
            offset=start,
        )
    arr = np.frombuffer(raw, dtype="<f4", offset=start)
    return arr.reshape(dims, order="F").astype(np.float32)


def load_volume(path) -> Volume3D:
    path = Path(path)
    voxels = read_volume_array(path)
    side = sidecar_path(path)
    if side.exists():
        try:
            meta = json.loads(side.read_text())
        except json.JSONDecodeError as e:
            raise FormatError(f"{side}: invalid JSON sidecar: {e}", offset=e.pos) from e
    else:
        meta = {"role": "ground_truth"}
    return Volume3D(
        voxels,
        role=meta.get("role", "ground_truth"),
        study_id=meta.get("study_id", ""),
        realization=meta.get("realization", 0),
        delta=meta.get("delta"),
        seed=meta.get("seed"),
        meta=meta.get("meta", {}),
    )


# --------------------------------------------------------------------------
# Datasets


@dataclass
class DatasetConfig:
    n_train: int = 10
    n_val: int = 2
    n_test: int = 4
    train_realizations: int = 8
    val_realizations: int = 8
    test_realizations: int = 8
    dims: tuple[int, int, int] = (32, 32, 16)
    c_full: float = 200.0
    delta_range: tuple[float, float] = DELTA_RANGE
    seed: int = 0
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def realizations(self, split: str) -> int:
        return getattr(self, f"{split}_realizations")

    def studies(self, split: str) -> int:
        return getattr(self, f"n_{split}")


@dataclass
class Realization:
    delta: float | None
    path: str
    seed: int


@dataclass
class StudyEntry:
    study_id: str
    split: str
    ground_truth_path: str
    full_count_path: str
    realizations: list[Realization]


@dataclass
class DatasetManifest:
    studies: list[StudyEntry]
    config: dict[str, Any]
    root: Path = Path(".")

    def split(self, name: str) -> list[StudyEntry]:
        return [s for s in self.studies if s.split == name]

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def to_dict(self) -> dict[str, Any]:
        return {"config": self.config, "studies": [asdict(s) for s in self.studies]}

    def check_disjoint(self) -> None:
        seen: dict[str, str] = {}
        for s in self.studies:
            if s.study_id in seen and seen[s.study_id] != s.split:
                raise ValueError(f"study {s.study_id} appears in splits {seen[s.study_id]} and {s.split}")
            seen[s.study_id] = s.split


def derive_seed(master: int, *path: int) -> int:
    """Deterministic 32-bit child seed for an integer path below ``master``."""
    return int(np.random.SeedSequence([int(master), *map(int, path)]).generate_state(1)[0])


def _config_echo(config: DatasetConfig) -> dict[str, Any]:
    # JSON-normal form (tuples -> lists) so it compares equal after reloading
    return json.loads(json.dumps(asdict(config)))


def build_dataset(config: DatasetConfig, out_dir) -> DatasetManifest:
    """Synthesize phantoms and their full/low-count volumes under ``out_dir``.

    Study ids are unique across splits, so splits are subject-independent by
    construction. Every random draw is keyed by (master seed, study, ...).
    """
    for split in SPLITS:
        if config.studies(split) < 1:
            raise ValueError(f"split {split!r} needs at least one study")
        if config.realizations(split) < 1:
            raise ValueError(f"split {split!r} needs at least one realization")
    lo, hi = config.delta_range
    check_delta(lo)
    check_delta(hi)
    if lo > hi:
        raise ValueError(f"empty delta range {config.delta_range}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    studies = []
    index = 0
    for split in SPLITS:
        for _ in range(config.studies(split)):
            sid = f"s{index:03d}"
            sdir = out / "studies" / sid
            sdir.mkdir(parents=True, exist_ok=True)

            truth = generate_phantom(derive_seed(config.seed, index, 0), config.dims, config.phantom)
            truth.study_id = sid
            save_volume(truth, sdir / "ground_truth.pvol")
            full = simulate_counts(truth, 1.0, config.c_full, derive_seed(config.seed, index, 1))
            save_volume(full, sdir / "full_count.pvol")

            k = config.realizations(split)
            deltas = np.random.default_rng(derive_seed(config.seed, index, 2)).uniform(lo, hi, size=k)
            reals = []
            for r, delta in enumerate(deltas):
                seed = derive_seed(config.seed, index, 3, r)
                low = simulate_counts(truth, float(delta), config.c_full, seed)
                low.realization = r
                name = f"low_count_r{r:03d}.pvol"
                save_volume(low, sdir / name)
                reals.append(Realization(float(delta), f"studies/{sid}/{name}", seed))
            studies.append(
                StudyEntry(
                    sid,
                    split,
                    f"studies/{sid}/ground_truth.pvol",
                    f"studies/{sid}/full_count.pvol",
                    reals,
                )
            )
            index += 1

    manifest = DatasetManifest(studies, _config_echo(config), root=out)
    manifest.check_disjoint()
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest.to_dict(), f, indent=1, sort_keys=True)
    return manifest


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Read ``manifest.json`` (or a directory holding it) and validate it."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    studies = []
    for s in doc["studies"]:
        reals = [
            Realization(None if r.get("delta") is None else float(r["delta"]), r["path"], int(r["seed"]))
            for r in s["realizations"]
        ]
        if s["split"] not in SPLITS:
            raise ValueError(f"study {s['study_id']}: unknown split {s['split']!r}")
        studies.append(StudyEntry(s["study_id"], s["split"], s["ground_truth_path"], s["full_count_path"], reals))
    manifest = DatasetManifest(studies, doc.get("config", {}), root=path.parent)
    manifest.check_disjoint()
    if check_files:
        for s in studies:
            for rel in [s.ground_truth_path, s.full_count_path, *(r.path for r in s.realizations)]:
                if not manifest.resolve(rel).exists():
                    raise FileNotFoundError(f"manifest entry {rel} is missing under {manifest.root}")
    return manifest

"""L1 training, binary checkpoints and inference-time denoising."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, Volume3D, check_delta, read_volume_array
from .errors import FormatError, NumericalError, ShapeError
from .model import DELTA_MODES, ModelConfig, PromptUNet, parameter_group

log = logging.getLogger(__name__)

CKPT_MAGIC = b"PCKP"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    patch_dims: tuple[int, int, int] | None = None
    seed: int = 0
    val_every: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.betas = tuple(self.betas)
        if self.patch_dims is not None:
            self.patch_dims = tuple(self.patch_dims)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["patch_dims"] = None if self.patch_dims is None else list(self.patch_dims)
        return d


def l1_loss(pred, target):
    """Mean absolute voxel difference, for tensors or volumes."""
    if isinstance(pred, Volume3D) or isinstance(target, Volume3D):
        p = np.asarray(getattr(pred, "voxels", pred), dtype=np.float64)
        t = np.asarray(getattr(target, "voxels", target), dtype=np.float64)
        if p.shape != t.shape:
            raise ShapeError(f"shape mismatch: {p.shape} vs {t.shape}")
        return float(np.abs(p - t).mean())
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


# --------------------------------------------------------------------------
# Checkpoints


@dataclass
class ModelCheckpoint:
    model_config: ModelConfig
    arrays: "OrderedDict[str, np.ndarray]"
    train_config: dict[str, Any] = field(default_factory=dict)
    epoch: int = 0
    val_mae: float | None = None

    @classmethod
    def from_model(cls, model: PromptUNet, **kw) -> "ModelCheckpoint":
        arrays = OrderedDict((k, v.detach().cpu().numpy().copy()) for k, v in model.state_dict().items())
        return cls(model.config, arrays, **kw)

    def header(self) -> dict[str, Any]:
        return {
            "format_version": CKPT_VERSION,
            "model": self.model_config.to_dict(),
            "train": self.train_config,
            "optimizer": "adam",
            "epoch": self.epoch,
            "val_mae": self.val_mae,
        }

    def build_model(self) -> PromptUNet:
        model = PromptUNet(self.model_config)
        expected = model.state_dict()
        missing = [k for k in expected if k not in self.arrays]
        unexpected = [k for k in self.arrays if k not in expected]
        if missing or unexpected:
            groups = lambda names: sorted({parameter_group(n) for n in names})
            raise FormatError(
                f"checkpoint does not match a {self.model_config.mode!r} model with {self.model_config.levels} levels: "
                f"missing groups {groups(missing)}, unexpected groups {groups(unexpected)}"
            )
        for k, t in expected.items():
            if tuple(self.arrays[k].shape) != tuple(t.shape):
                raise FormatError(f"array {k} has shape {self.arrays[k].shape}, model expects {tuple(t.shape)}")
        dtype = {a.dtype for a in self.arrays.values()}
        if dtype == {np.dtype("float64")}:
            model = model.double()
        model.load_state_dict(OrderedDict((k, torch.from_numpy(np.array(v))) for k, v in self.arrays.items()))
        model.eval()
        return model

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode()
        out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(head)), head, struct.pack("<I", len(self.arrays))]
        for name, arr in self.arrays.items():
            arr = np.asarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                raise TypeError(f"cannot serialize {name} with dtype {arr.dtype}")
            code = _DTYPE_CODES[arr.dtype]
            encoded = name.encode()
            out.append(struct.pack("<HBB", len(encoded), code, arr.ndim))
            out.append(encoded)
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr).astype(_DTYPES[code]).tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelCheckpoint":
        pos = 0

        def take(n: int, what: str) -> bytes:
            nonlocal pos
            if pos + n > len(raw):
                raise FormatError(f"truncated checkpoint while reading {what}", offset=pos)
            chunk = raw[pos : pos + n]
            pos += n
            return chunk

        if take(4, "magic") != CKPT_MAGIC:
            raise FormatError("not a checkpoint (bad magic)", offset=0)
        version, head_len = struct.unpack("<II", take(8, "header size"))
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        try:
            head = json.loads(take(head_len, "header"))
        except json.JSONDecodeError as e:
            raise FormatError(f"corrupt checkpoint header: {e}", offset=12) from e
        if head.get("format_version") != CKPT_VERSION:
            raise FormatError(f"header format version {head.get('format_version')} != {CKPT_VERSION}", offset=12)
        (count,) = struct.unpack("<I", take(4, "array count"))
        arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        for _ in range(count):
            name_len, code, ndim = struct.unpack("<HBB", take(4, "array record"))
            name = take(name_len, "array name").decode()
            if code not in _DTYPES:
                raise FormatError(f"array {name}: unknown dtype code {code}", offset=pos)
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} shape"))
            dtype = _DTYPES[code]
            n = int(np.prod(shape, dtype=np.int64))
            payload = take(n * dtype.itemsize, f"{name} payload")
            arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        if pos != len(raw):
            raise FormatError(f"{len(raw) - pos} trailing bytes after the last array", offset=pos)
        try:
            mcfg = ModelConfig.from_dict(head["model"])
        except (TypeError, ValueError, KeyError) as e:
            raise FormatError(f"invalid model config in header: {e}") from e
        ckpt = cls(mcfg, arrays, head.get("train", {}), head.get("epoch", 0), head.get("val_mae"))
        ckpt.build_model()  # rejects header/body inconsistencies
        return ckpt

    def sha256(self) -> str:
        # arrays are treated as immutable once wrapped in a checkpoint
        if getattr(self, "_sha256", None) is None:
            self._sha256 = hashlib.sha256(self.to_bytes()).hexdigest()
        return self._sha256


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> ModelCheckpoint:
    return ModelCheckpoint.from_bytes(Path(path).read_bytes())


def identity_checkpoint(config: ModelConfig | None = None) -> ModelCheckpoint:
    """A debug checkpoint whose model returns its input unchanged (untrained, zero head)."""
    config = config or ModelConfig(mode="none")
    torch.manual_seed(0)
    model = PromptUNet(config)
    return ModelCheckpoint.from_model(model)


# --------------------------------------------------------------------------
# Data


@dataclass
class Triples:
    """Stacked (low_count, full_count, delta) training examples."""

    low: torch.Tensor
    full: torch.Tensor
    delta: torch.Tensor

    def __len__(self) -> int:
        return self.low.shape[0]


def load_triples(manifest: DatasetManifest, split: str) -> Triples:
    studies = manifest.split(split)
    if not studies:
        raise ValueError(f"manifest has no {split!r} studies")
    lows, fulls, deltas = [], [], []
    for s in studies:
        full = read_volume_array(manifest.resolve(s.full_count_path))
        if not s.realizations:
            raise ValueError(f"study {s.study_id} has no low-count realizations")
        for r in s.realizations:
            lows.append(read_volume_array(manifest.resolve(r.path)))
            fulls.append(full)
            deltas.append(np.nan if r.delta is None else r.delta)
    return Triples(
        torch.from_numpy(np.stack(lows))[:, None],
        torch.from_numpy(np.stack(fulls))[:, None],
        torch.tensor(deltas, dtype=torch.float32),
    )


def random_patch(rng: np.random.Generator, shape, patch, align: int):
    """Start offsets of a random crop aligned to ``align`` voxels."""
    starts = []
    for n, p in zip(shape, patch):
        if p > n:
            raise ValueError(f"patch {patch} larger than volume {tuple(shape)}")
        starts.append(int(rng.integers(0, (n - p) // align + 1)) * align)
    return starts


# --------------------------------------------------------------------------
# Training


def first_nonfinite_group(model) -> str | None:
    for name, p in model.named_parameters():
        if not torch.all(torch.isfinite(p)):
            return f"{parameter_group(name)} (parameter {name})"
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
            return f"{parameter_group(name)} (gradient of {name})"
    return None


@torch.no_grad()
def evaluate_mae(model, data: Triples, batch_size: int = 4) -> float:
    model.eval()
    total = 0.0
    for i in range(0, len(data), batch_size):
        sl = slice(i, i + batch_size)
        delta = data.delta[sl] if model.needs_delta else None
        pred = model(data.low[sl], delta)
        total += (pred - data.full[sl]).abs().mean(dim=(1, 2, 3, 4)).sum().item()
    return total / len(data)


@dataclass
class TrainResult:
    model: PromptUNet
    best: ModelCheckpoint
    last: ModelCheckpoint
    history: list[dict[str, Any]]
    initial_loss: float


def train(manifest: DatasetManifest, tcfg: TrainConfig, mcfg: ModelConfig, out=None) -> TrainResult:
    """Adam on the mean L1 loss; keeps the checkpoint with the lowest validation MAE.

    With ``out`` set, writes ``best.ckpt``, ``last.ckpt`` and ``train_log.jsonl``.
    """
    train_set = load_triples(manifest, "train")
    val_set = load_triples(manifest, "val")
    if mcfg.mode in DELTA_MODES:
        for name, ds in (("train", train_set), ("val", val_set)):
            if torch.isnan(ds.delta).any():
                raise ValueError(f"mode {mcfg.mode!r} needs a count level for every {name} realization")
            for d in ds.delta.tolist():
                check_delta(d)

    torch.manual_seed(tcfg.seed)
    model = PromptUNet(mcfg)
    opt = torch.optim.Adam(model.parameters(), lr=tcfg.lr, betas=tcfg.betas, weight_decay=tcfg.weight_decay)
    rng = np.random.default_rng(tcfg.seed)
    align = 2**mcfg.levels
    spatial = tuple(train_set.low.shape[2:])
    patch = tcfg.patch_dims or spatial
    if any(p % align for p in patch):
        raise ShapeError(f"patch dims {patch} must be divisible by {align}")

    out = Path(out) if out is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "w")

    history: list[dict[str, Any]] = []
    best = None
    best_mae = float("inf")
    initial_loss = evaluate_mae(model, train_set, tcfg.batch_size)
    try:
        for epoch in range(tcfg.epochs):
            model.train()
            order = rng.permutation(len(train_set))
            losses = []
            for i in range(0, len(order), tcfg.batch_size):
                idx = torch.from_numpy(order[i : i + tcfg.batch_size])
                low, full = train_set.low[idx], train_set.full[idx]
                if patch != spatial:
                    s = random_patch(rng, spatial, patch, align)
                    crop = tuple(slice(a, a + p) for a, p in zip(s, patch))
                    low, full = low[(..., *crop)], full[(..., *crop)]
                delta = train_set.delta[idx] if model.needs_delta else None
                loss = l1_loss(model(low, delta), full)
                if not torch.isfinite(loss):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch}; first non-finite group: "
                        f"{first_nonfinite_group(model) or 'none (inputs or activations)'}"
                    )
                opt.zero_grad()
                loss.backward()
                bad = first_nonfinite_group(model)
                if bad:
                    raise NumericalError(f"non-finite values at epoch {epoch} in {bad}")
                try:
                    opt.step()
                except RuntimeError as e:
                    # an update too large for the parameter dtype
                    name = next(n for n, p in model.named_parameters() if p.grad is not None)
                    raise NumericalError(
                        f"optimizer step overflowed at epoch {epoch} in {parameter_group(name)} (parameter {name}): {e}"
                    ) from e
                losses.append(loss.item())

            record = {"epoch": epoch, "train_loss": float(np.mean(losses))}
            if (epoch + 1) % tcfg.val_every == 0 or epoch == tcfg.epochs - 1:
                val_mae = evaluate_mae(model, val_set, tcfg.batch_size)
                record["val_mae"] = val_mae
                if val_mae < best_mae:
                    best_mae = val_mae
                    best = ModelCheckpoint.from_model(model, train_config=tcfg.to_dict(), epoch=epoch, val_mae=val_mae)
            history.append(record)
            log.info("epoch %d train_loss %.6f val_mae %s", epoch, record["train_loss"], record.get("val_mae"))
            if log_file:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()

    model.eval()
    last = ModelCheckpoint.from_model(
        model, train_config=tcfg.to_dict(), epoch=tcfg.epochs - 1, val_mae=history[-1].get("val_mae")
    )
    if out is not None:
        save_checkpoint(best, out / "best.ckpt")
        save_checkpoint(last, out / "last.ckpt")
    return TrainResult(model, best, last, history, initial_loss)


# --------------------------------------------------------------------------
# Inference


def pad_to_multiple(x: torch.Tensor, multiple: int):
    """Replicate-pad the trailing edge of each spatial axis; returns (padded, original dims)."""
    dims = tuple(x.shape[2:])
    extra = [(-n) % multiple for n in dims]
    if not any(extra):
        return x, dims
    # F.pad lists the last axis first
    pad = []
    for e in reversed(extra):
        pad += [0, e]
    return F.pad(x, pad, mode="replicate"), dims


@torch.no_grad()
def denoise_array(model: PromptUNet, voxels: np.ndarray, delta=None, clamp: bool = False) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(np.asarray(voxels)).to(dtype)[None, None]
    x, dims = pad_to_multiple(x, 2**model.config.levels)
    if model.needs_delta:
        if delta is None:
            raise ValueError(f"mode {model.config.mode!r} needs a count level")
        delta = torch.tensor([check_delta(delta)], dtype=dtype)
    else:
        delta = None
    y = model.eval()(x, delta)
    if clamp:
        y = y.clamp_min(0)
    h, w, d = dims
    return y[0, 0, :h, :w, :d].numpy().astype(np.float32)


def denoise(
    ckpt: ModelCheckpoint, x: Volume3D, delta=None, model: PromptUNet | None = None, clamp: bool = False
) -> Volume3D:
    """Denoise one volume; ``delta`` defaults to the volume's own count level.

    ``clamp`` zeroes negative output voxels (off by default).
    """
    model = model or ckpt.build_model()
    if delta is None:
        delta = x.delta
    if model.needs_delta and delta is None:
        raise ValueError(f"mode {ckpt.model_config.mode!r} needs a count level")
    if not model.needs_delta:
        delta = None
    out = denoise_array(model, x.voxels, delta, clamp)
    return Volume3D(
        out,
        role="denoised",
        study_id=x.study_id,
        realization=x.realization,
        seed=x.seed,
        meta={"ckpt_sha256": ckpt.sha256(), "mode": ckpt.model_config.mode, "delta": delta},
    )

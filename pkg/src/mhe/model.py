"""Toy encoder-decoder height regressor with a scale-deformable block.

Three strided-conv encoder stages, the adaptive-scale block on the coarsest
features, a nearest-upsample decoder, and a 1x1 softplus head so predicted
heights are nonnegative. The scale-deformable block starts as a standard
convolution (rates 1, offsets 0), so a freshly initialised model is
behaviourally a plain conv net.

Checkpoints are a JSON header (spec fingerprint, seed, tensor table)
followed by concatenated HMT1 blocks.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from os import PathLike

import numpy as np

from . import hmt
from .errors import DataError, DivergenceError, ShapeError
from .losses import LossConfig, sample_pairs, loss_total
from .sdc import SdcParams, SdcPredictor, init_predictor, sdc_forward
from .seeding import spawn_rng
from . import tensor as T
from .tensor import Graph, Tensor

CHECKPOINT_MAGIC = b"HMCK"


@dataclass(frozen=True)
class ModelSpec:
    in_channels: int = 3
    channels: tuple[int, ...] = (8, 16, 32)
    downsamples: int = 2
    k: int = 3
    use_sdc: bool = True

    def __post_init__(self):
        if len(self.channels) != self.downsamples + 1:
            raise ShapeError("need downsamples+1 channel counts")
        if self.k % 2 == 0:
            raise ShapeError("kernel size must be odd")

    @property
    def stride_total(self) -> int:
        return 2 ** self.downsamples

    def fingerprint(self) -> int:
        canon = json.dumps(
            {"in": self.in_channels, "ch": list(self.channels),
             "down": self.downsamples, "k": self.k, "sdc": self.use_sdc},
            sort_keys=True)
        return int.from_bytes(hashlib.blake2b(canon.encode(), digest_size=8).digest(),
                              "little")


class HeightRegressor:
    """Pixel-wise height predictor; parameters live in an ordered name map."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self._head: SdcPredictor | None = None

    @classmethod
    def build(cls, spec: ModelSpec, seed: int) -> "HeightRegressor":
        m = cls(spec)
        m.init_random(seed)
        return m

    # parameter plumbing -------------------------------------------------

    def _he(self, rng, shape) -> np.ndarray:
        fan_in = int(np.prod(shape[1:]))
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(T.default_dtype())

    def init_random(self, seed: int) -> None:
        """He-style random init; the deformable branches start the mid block
        as a standard convolution regardless of the seed."""
        rng = spawn_rng(seed, "init")
        spec = self.spec
        dt = T.default_dtype()
        p: dict[str, Tensor] = {}
        c_prev = spec.in_channels
        for i, c in enumerate(spec.channels):
            p[f"enc{i}.w"] = Tensor(self._he(rng, (c, c_prev, spec.k, spec.k)), requires_grad=True)
            p[f"enc{i}.b"] = Tensor(np.zeros(c, dtype=dt), requires_grad=True)
            c_prev = c
        p["mid.w"] = Tensor(self._he(rng, (c_prev, c_prev, spec.k, spec.k)), requires_grad=True)
        head = init_predictor(c_prev, spec.k) if spec.use_sdc else None
        if head is not None:
            p["mid.off_w"], p["mid.off_b"] = head.off_w, head.off_b
            p["mid.dil_w"], p["mid.dil_b"] = head.dil_w, head.dil_b
        for i in range(spec.downsamples - 1, -1, -1):
            c = spec.channels[i]
            p[f"dec{i}.w"] = Tensor(self._he(rng, (c, c_prev, spec.k, spec.k)), requires_grad=True)
            p[f"dec{i}.b"] = Tensor(np.zeros(c, dtype=dt), requires_grad=True)
            c_prev = c
        p["head.w"] = Tensor(self._he(rng, (1, c_prev, 1, 1)), requires_grad=True)
        p["head.b"] = Tensor(np.zeros(1, dtype=dt), requires_grad=True)
        self.params = p
        self._head = head

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        if not self.params:
            self.init_random(0)
        missing = set(self.params) - set(tensors)
        extra = set(tensors) - set(self.params)
        if missing or extra:
            raise DataError(f"checkpoint tensor names mismatch: missing={sorted(missing)}, "
                            f"unexpected={sorted(extra)}")
        for name, t in self.params.items():
            arr = np.asarray(tensors[name], dtype=T.default_dtype())
            if arr.shape != t.data.shape:
                raise DataError(f"tensor {name}: shape {arr.shape} != {t.data.shape}")
            t.data = np.ascontiguousarray(arr)

    # forward ------------------------------------------------------------

    def forward(self, x: Tensor) -> Tensor:
        if not self.params:
            raise ShapeError("model has no initialised weights")
        spec = self.spec
        n, c, h, w = x.dims
        if c != spec.in_channels:
            raise ShapeError(f"input channels {c} != {spec.in_channels}")
        if h % spec.stride_total or w % spec.stride_total:
            raise ShapeError(f"extents {h}x{w} not divisible by {spec.stride_total}")
        p = self.params
        pad = spec.k // 2
        out = x
        for i in range(len(spec.channels)):
            stride = 1 if i == 0 else 2
            out = T.relu(T.conv2d(out, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=stride, pad=pad))
        if spec.use_sdc:
            sp = SdcParams(weight=p["mid.w"],
                           offsets=T.conv2d(out, p["mid.off_w"], p["mid.off_b"]),
                           dil_raw=T.conv2d(out, p["mid.dil_w"], p["mid.dil_b"]))
            out = T.relu(sdc_forward(out, sp))
        else:
            out = T.relu(T.conv2d(out, p["mid.w"], pad=pad))
        for i in range(spec.downsamples - 1, -1, -1):
            out = T.upsample_nearest(out, 2)
            out = T.relu(T.conv2d(out, p[f"dec{i}.w"], p[f"dec{i}.b"], pad=pad))
        out = T.conv2d(out, p["head.w"], p["head.b"])
        return T.softplus(out)

    def predict(self, img: np.ndarray) -> np.ndarray:
        """Inference on a raw (3,H,W) or (N,3,H,W) raster, no tape."""
        arr = np.asarray(img, dtype=T.default_dtype())
        squeeze = arr.ndim == 3
        if squeeze:
            arr = arr[None]
        out = self.forward(Tensor(arr)).data
        return out[0] if squeeze else out


# ----------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    spec: ModelSpec
    seed: int
    tensors: dict[str, np.ndarray]

    def fingerprint(self) -> int:
        return self.spec.fingerprint()


def checkpoint_of(model: HeightRegressor, seed: int) -> Checkpoint:
    return Checkpoint(spec=model.spec, seed=seed, tensors=model.state_arrays())


def save_checkpoint(path: str | PathLike, ckpt: Checkpoint) -> None:
    blobs: list[bytes] = []
    table = []
    offset = 0
    for name in ckpt.tensors:
        blob = hmt.dumps(ckpt.tensors[name])
        table.append({"name": name, "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    spec = ckpt.spec
    header = json.dumps({
        "fingerprint": spec.fingerprint(),
        "seed": ckpt.seed,
        "spec": {"in_channels": spec.in_channels, "channels": list(spec.channels),
                 "downsamples": spec.downsamples, "k": spec.k, "use_sdc": spec.use_sdc},
        "tensors": table,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | PathLike) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise DataError(f"bad checkpoint magic {magic!r} in {path}")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode())
            payload = fh.read()
    except FileNotFoundError as e:
        raise DataError(f"missing checkpoint: {path}") from e
    s = header["spec"]
    spec = ModelSpec(in_channels=s["in_channels"], channels=tuple(s["channels"]),
                     downsamples=s["downsamples"], k=s["k"], use_sdc=s["use_sdc"])
    if header["fingerprint"] != spec.fingerprint():
        raise DataError("checkpoint fingerprint does not match its own spec")
    tensors = {}
    for entry in header["tensors"]:
        blob = payload[entry["offset"]:entry["offset"] + entry["length"]]
        tensors[entry["name"]] = hmt.loads(blob)
    return Checkpoint(spec=spec, seed=header["seed"], tensors=tensors)


def init_from(model: HeightRegressor, ckpt: Checkpoint | None, mode: str,
              seed: int = 0) -> HeightRegressor:
    """Initialise a model either from a checkpoint ("full", fingerprint must
    match) or from scratch ("random", He-style with the given seed)."""
    if mode == "full":
        if ckpt is None:
            raise DataError("init_from full requires a checkpoint")
        if ckpt.fingerprint() != model.spec.fingerprint():
            raise DataError("checkpoint fingerprint does not match model spec")
        model.load_state(ckpt.tensors)
    elif mode == "random":
        model.init_random(seed)
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return model


# ----------------------------------------------------------------------
# optimisation


class SGD:
    """Momentum SGD with optional global gradient-norm clipping; update
    order follows parameter insertion order."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9,
                 clip_norm: float | None = 10.0):
        if lr <= 0:
            raise ValueError("lr must be > 0")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self) -> None:
        scale = 1.0
        if self.clip_norm is not None:
            sq = 0.0
            for t in self.params.values():
                if t.grad is not None:
                    sq += float(np.sum(np.square(t.grad, dtype=np.float64)))
            norm = np.sqrt(sq)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += g if scale == 1.0 else (g * scale).astype(g.dtype)
            t.data = t.data - self.lr * v


def calibrate_head_bias(model: HeightRegressor, mean_height: float) -> None:
    """Bias the prediction head so a fresh model starts at the data's mean
    height instead of softplus(0); tames early gradient spikes from the
    long-tailed height distribution."""
    from .tensor import softplus_inverse

    model.params["head.b"].data[:] = softplus_inverse(max(float(mean_height), 1e-3))


@dataclass
class TrainConfig:
    epochs: int = 15
    lr: float = 1e-3
    momentum: float = 0.9
    batch: int = 8
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    hflip: bool = False
    clip_norm: float | None = 10.0


def _resolve_pairs(data, split: str) -> list[tuple[np.ndarray, np.ndarray]]:
    if hasattr(data, "split_pairs"):
        entries = data.split_pairs(split)
        return [(hmt.load(i), hmt.load(h)) for i, h in entries]
    return list(data)


def train(model: HeightRegressor, data, cfg: TrainConfig,
          split: str = "train") -> tuple[Checkpoint, list[float]]:
    """Deterministic training loop; returns the final checkpoint and the
    per-epoch mean loss curve. Aborts on non-finite loss."""
    pairs = _resolve_pairs(data, split)
    if not pairs:
        raise ValueError("train: empty training set")
    imgs = np.stack([np.asarray(i, dtype=T.default_dtype()) for i, _ in pairs])
    hgts = np.stack([np.asarray(h, dtype=T.default_dtype()) for _, h in pairs])
    opt = SGD(model.params, lr=cfg.lr, momentum=cfg.momentum,
              clip_norm=cfg.clip_norm)
    curve: list[float] = []
    n = len(pairs)
    for epoch in range(cfg.epochs):
        order = spawn_rng(cfg.seed, "shuffle", epoch).permutation(n)
        epoch_loss = 0.0
        n_steps = 0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            xb = imgs[idx]
            yb = hgts[idx]
            if cfg.hflip:
                flips = spawn_rng(cfg.seed, "hflip", epoch, start).random(len(idx)) < 0.5
                xb = xb.copy()
                yb = yb.copy()
                xb[flips] = xb[flips, :, :, ::-1]
                yb[flips] = yb[flips, :, :, ::-1]
            pairs_rank = None
            if cfg.loss.variant == "rank":
                rng_pairs = spawn_rng(cfg.seed, "pairs", epoch, start)
                pairs_rank = sample_pairs(yb, cfg.loss.rank_pairs,
                                          cfg.loss.rank_threshold, rng_pairs)
            with Graph() as g:
                pred = model.forward(Tensor(xb))
                loss = loss_total(pred, Tensor(yb), cfg.loss, pairs_rank)
            val = float(loss.data)
            if not np.isfinite(val):
                raise DivergenceError(f"loss became {val} at epoch {epoch}")
            g.backward(loss)
            opt.step()
            epoch_loss += val
            n_steps += 1
        curve.append(epoch_loss / n_steps)
    return checkpoint_of(model, cfg.seed), curve

"""Minimal trainable-function toolkit on numpy.

Hand-written forward/backward passes for the fixed architectures used here:
dense layers, MLPs with optional batch normalization, a shared point-set
encoder (per-point MLP + max pooling), the Adam optimizer, a linear
learning-rate schedule, a central finite-difference gradient checker, and
binary checkpoint I/O. Parameters live in flat dicts keyed by dotted names;
training runs in float32, the gradient checker re-runs in float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, TrainingError

CHECKPOINT_MAGIC = b"L3DCKPT1"
CHECKPOINT_VERSION = 1
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class MlpSpec:
    """Stack of linear layers with per-layer activation and batch-norm flags."""

    in_width: int
    widths: tuple[int, ...]
    activations: tuple[str, ...]
    batch_norms: tuple[bool, ...] = ()

    def __post_init__(self):
        if len(self.widths) < 1:
            raise ValueError("MlpSpec needs at least one layer")
        if any(w <= 0 for w in self.widths) or self.in_width <= 0:
            raise ValueError("widths must be positive")
        if len(self.activations) != len(self.widths):
            raise ValueError("one activation per layer required")
        if any(a not in ("relu", "identity") for a in self.activations):
            raise ValueError("activations must be 'relu' or 'identity'")
        if self.batch_norms and len(self.batch_norms) != len(self.widths):
            raise ValueError("one batch-norm flag per layer required")

    def layer_dims(self) -> list[tuple[int, int]]:
        ins = [self.in_width, *self.widths[:-1]]
        return list(zip(ins, self.widths))

    def bn_flags(self) -> tuple[bool, ...]:
        return self.batch_norms or (False,) * len(self.widths)


def plain_mlp(in_width: int, widths: tuple[int, ...], final_activation: str = "identity") -> MlpSpec:
    acts = ("relu",) * (len(widths) - 1) + (final_activation,)
    return MlpSpec(in_width, tuple(widths), acts)


def kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def mlp_init(spec: MlpSpec, rng: np.random.Generator, prefix: str = "", dtype=np.float32) -> Params:
    params: Params = {}
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims()):
        params[f"{prefix}l{i}.W"] = kaiming_uniform(rng, fan_in, fan_out, dtype)
        params[f"{prefix}l{i}.b"] = np.zeros(fan_out, dtype=dtype)
        if spec.bn_flags()[i]:
            params[f"{prefix}bn{i}.gamma"] = np.ones(fan_out, dtype=dtype)
            params[f"{prefix}bn{i}.beta"] = np.zeros(fan_out, dtype=dtype)
            params[f"{prefix}bn{i}.rmean"] = np.zeros(fan_out, dtype=dtype)
            params[f"{prefix}bn{i}.rvar"] = np.ones(fan_out, dtype=dtype)
    return params


def bn_running_stat_names(spec: MlpSpec, prefix: str = "") -> set[str]:
    names = set()
    for i, flag in enumerate(spec.bn_flags()):
        if flag:
            names.add(f"{prefix}bn{i}.rmean")
            names.add(f"{prefix}bn{i}.rvar")
    return names


def _bn_forward(x, gamma, beta, rmean, rvar, train: bool, update_running: bool):
    eps = x.dtype.type(BN_EPS)
    if train:
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        if update_running:
            n = x.shape[0]
            unbiased = var * (n / (n - 1)) if n > 1 else var
            rmean *= 1 - BN_MOMENTUM
            rmean += BN_MOMENTUM * mean
            rvar *= 1 - BN_MOMENTUM
            rvar += BN_MOMENTUM * unbiased
    else:
        mean, var = rmean, rvar
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    out = gamma * x_hat + beta
    cache = (x_hat, inv_std, gamma, train)
    return out, cache


def _bn_backward(dout, cache):
    x_hat, inv_std, gamma, train = cache
    dgamma = (dout * x_hat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dx_hat = dout * gamma
    if not train:  # running stats are constants in eval mode
        return dx_hat * inv_std, dgamma, dbeta
    n = x_hat.shape[0]
    dx = (inv_std / n) * (n * dx_hat - dx_hat.sum(axis=0) - x_hat * (dx_hat * x_hat).sum(axis=0))
    return dx, dgamma, dbeta


def mlp_forward(
    spec: MlpSpec,
    params: Params,
    x: np.ndarray,
    prefix: str = "",
    train: bool = False,
    update_running: bool | None = None,
):
    """Returns (output, cache). In train mode batch-norm layers use batch
    statistics and (unless `update_running` is False) update running stats
    in place."""
    if x.ndim != 2 or x.shape[1] != spec.in_width:
        raise ValueError(f"input width {x.shape} does not match spec in_width {spec.in_width}")
    if update_running is None:
        update_running = train
    h = x
    layer_caches = []
    for i, act in enumerate(spec.activations):
        W, b = params[f"{prefix}l{i}.W"], params[f"{prefix}l{i}.b"]
        if h.shape[1] != W.shape[0]:
            raise ValueError(f"layer {i}: width {h.shape[1]} does not match {W.shape[0]}")
        z = h @ W + b
        bn_cache = None
        if spec.bn_flags()[i]:
            z, bn_cache = _bn_forward(
                z,
                params[f"{prefix}bn{i}.gamma"],
                params[f"{prefix}bn{i}.beta"],
                params[f"{prefix}bn{i}.rmean"],
                params[f"{prefix}bn{i}.rvar"],
                train,
                update_running,
            )
        if act == "relu":
            mask = z > 0
            out = z * mask
        else:
            mask = None
            out = z
        layer_caches.append((h, mask, bn_cache))
        h = out
    return h, layer_caches


def mlp_backward(spec: MlpSpec, params: Params, cache, dout: np.ndarray, prefix: str = ""):
    """Returns (dx, grads) matching a prior `mlp_forward` call."""
    grads: Params = {}
    dh = dout
    for i in reversed(range(len(spec.activations))):
        h_in, mask, bn_cache = cache[i]
        dz = dh * mask if mask is not None else dh
        if bn_cache is not None:
            dz, dgamma, dbeta = _bn_backward(dz, bn_cache)
            grads[f"{prefix}bn{i}.gamma"] = dgamma
            grads[f"{prefix}bn{i}.beta"] = dbeta
        W = params[f"{prefix}l{i}.W"]
        grads[f"{prefix}l{i}.W"] = h_in.T @ dz
        grads[f"{prefix}l{i}.b"] = dz.sum(axis=0)
        dh = dz @ W.T
    return dh, grads


@dataclass(frozen=True)
class PointEncoderSpec:
    """Shared per-point MLP (all-ReLU) followed by max pooling over points."""

    in_channels: int
    widths: tuple[int, ...] = (64, 128, 256)

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def mlp(self) -> MlpSpec:
        return MlpSpec(self.in_channels, self.widths, ("relu",) * len(self.widths))


def point_encoder_init(spec: PointEncoderSpec, rng: np.random.Generator, prefix: str = "", dtype=np.float32) -> Params:
    return mlp_init(spec.mlp(), rng, prefix, dtype)


def point_encoder_forward_segments(spec: PointEncoderSpec, params: Params, points: np.ndarray, starts: np.ndarray, prefix: str = ""):
    """Encode contiguous point segments in one pass.

    `points` is the row-wise concatenation of all segments, `starts` the
    first row of each. Returns (S x F features, cache).
    """
    if points.shape[0] == 0 or len(starts) == 0:
        raise ValueError("point encoder requires at least one point per segment")
    h, mlp_cache = mlp_forward(spec.mlp(), params, points, prefix)
    feats = np.maximum.reduceat(h, starts, axis=0)
    return feats, (mlp_cache, h, starts, points.shape[0])


def point_encoder_backward_segments(spec: PointEncoderSpec, params: Params, cache, dfeats: np.ndarray, prefix: str = "") -> Params:
    mlp_cache, h, starts, n_rows = cache
    dh = np.zeros_like(h)
    bounds = list(starts) + [n_rows]
    cols = np.arange(h.shape[1])
    for s in range(len(starts)):
        seg = h[bounds[s] : bounds[s + 1]]
        argmax = seg.argmax(axis=0)  # first max: matches reduceat's value, fixed tie-break
        dh[bounds[s] + argmax, cols] += dfeats[s]
    _, grads = mlp_backward(spec.mlp(), params, mlp_cache, dh, prefix)
    return grads


def point_encoder_forward(spec: PointEncoderSpec, params: Params, points: np.ndarray, prefix: str = "") -> np.ndarray:
    """Single point set -> (F,) feature; order- and duplicate-invariant."""
    pts = np.asarray(points)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError("point set must be a nonempty N x C array")
    feats, _ = point_encoder_forward_segments(spec, params, pts, np.array([0]), prefix)
    return feats[0]


@dataclass
class AdamState:
    base_lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(state: AdamState, params: Params, grads: Params, lr: float | None = None) -> None:
    """One Adam update with bias correction; params and state update in place."""
    lr = state.base_lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in sorted(grads):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)


def linear_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    """base_lr * (1 - epoch / total_epochs)."""
    if total_epochs <= 0:
        raise ValueError("total_epochs must be positive")
    if not 0 <= epoch <= total_epochs:
        raise ValueError("epoch must be in [0, total_epochs]")
    return base_lr * (1.0 - epoch / total_epochs)


def grad_check(fn, params: Params, h: float = 1e-5) -> float:
    """Worst relative error between analytic gradients and central differences.

    `fn(params) -> (loss, grads)`. Everything is evaluated in float64; the
    error for each coordinate is |analytic - fd| / max(1, |analytic|, |fd|),
    so near-zero gradients are compared absolutely.

    Coordinates where the one-sided differences disagree sit on (or within h
    of) a relu/hinge kink, where central differences are invalid; those are
    excluded, as only smooth points can arbitrate correctness. A genuinely
    wrong analytic gradient at a smooth point gives matching one-sided
    differences that disagree with it, and is reported.
    """
    params64 = {k: v.astype(np.float64) for k, v in params.items()}
    loss, grads = fn(params64)
    if not np.isfinite(loss):
        raise TrainingError("non-finite loss in gradient check")

    worst = 0.0
    for name, g in grads.items():
        p = params64[name]
        flat_g = np.asarray(g, dtype=np.float64).reshape(-1)
        for i in range(p.size):
            orig = p.flat[i]
            p.flat[i] = orig + h
            up, _ = fn(params64)
            p.flat[i] = orig - h
            down, _ = fn(params64)
            p.flat[i] = orig
            fd = (up - down) / (2 * h)
            if not np.isfinite(fd):
                raise TrainingError("non-finite finite difference in gradient check")
            err = abs(flat_g[i] - fd) / max(1.0, abs(flat_g[i]), abs(fd))
            if err > 1e-7:
                fwd = (up - loss) / h
                bwd = (loss - down) / h
                if abs(fwd - bwd) / max(1.0, abs(fwd), abs(bwd)) > 1e-3:
                    continue  # kink inside the difference window
            worst = max(worst, err)
    return worst


@dataclass
class AdamSnapshot:
    step: int
    base_lr: float
    beta1: float
    beta2: float
    eps: float
    m: Params
    v: Params

    @staticmethod
    def of(state: AdamState) -> "AdamSnapshot":
        return AdamSnapshot(state.step, state.base_lr, state.beta1, state.beta2, state.eps, dict(state.m), dict(state.v))

    def restore(self) -> AdamState:
        return AdamState(self.base_lr, self.beta1, self.beta2, self.eps, self.step, dict(self.m), dict(self.v))


@dataclass
class Checkpoint:
    fingerprint: str
    params: Params
    optimizer: AdamSnapshot | None = None
    version: int = CHECKPOINT_VERSION


def _write_blobs(fh, blobs: Params) -> None:
    fh.write(struct.pack("<I", len(blobs)))
    for name in sorted(blobs):
        arr = np.asarray(blobs[name], dtype="<f4")  # asarray keeps 0-d shapes
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw, self.off, self.path = raw, 0, path

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated file")
        vals = struct.unpack_from(fmt, self.raw, self.off)
        self.off += size
        return vals

    def take_bytes(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated file")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out


def _read_blobs(reader: _Reader) -> Params:
    (count,) = reader.take("<I")
    blobs: Params = {}
    for _ in range(count):
        (name_len,) = reader.take("<H")
        name = reader.take_bytes(name_len).decode("utf-8")
        (ndim,) = reader.take("<B")
        shape = reader.take(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = reader.take_bytes(size * 4)
        blobs[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return blobs


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        raw = ckpt.fingerprint.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        opt = ckpt.optimizer
        fh.write(struct.pack("<B", 1 if opt else 0))
        if opt:
            fh.write(struct.pack("<Q", opt.step))
            fh.write(struct.pack("<4d", opt.base_lr, opt.beta1, opt.beta2, opt.eps))
        _write_blobs(fh, ckpt.params)
        if opt:
            moments = {f"m/{k}": v for k, v in opt.m.items()}
            moments.update({f"v/{k}": v for k, v in opt.v.items()})
            _write_blobs(fh, moments)


def load_checkpoint(path: str | Path, expect_fingerprint: str | None = None) -> Checkpoint:
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.take_bytes(8) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = reader.take("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} (expected {CHECKPOINT_VERSION})")
    (fp_len,) = reader.take("<H")
    fingerprint = reader.take_bytes(fp_len).decode("utf-8")
    if expect_fingerprint is not None and fingerprint != expect_fingerprint:
        raise CheckpointError(
            f"{path}: config fingerprint mismatch\n  file:     {fingerprint}\n  expected: {expect_fingerprint}"
        )
    (has_opt,) = reader.take("<B")
    optimizer = None
    opt_header = None
    if has_opt:
        (step,) = reader.take("<Q")
        base_lr, beta1, beta2, eps = reader.take("<4d")
        opt_header = (step, base_lr, beta1, beta2, eps)
    params = _read_blobs(reader)
    if has_opt:
        moments = _read_blobs(reader)
        m = {k[2:]: v for k, v in moments.items() if k.startswith("m/")}
        v = {k[2:]: v for k, v in moments.items() if k.startswith("v/")}
        step, base_lr, beta1, beta2, eps = opt_header
        optimizer = AdamSnapshot(step, base_lr, beta1, beta2, eps, m, v)
    if reader.off != len(reader.raw):
        raise CheckpointError(f"{path}: trailing bytes")
    return Checkpoint(fingerprint, params, optimizer, version)

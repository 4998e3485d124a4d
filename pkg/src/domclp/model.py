"""MLP encoder + projection head with hand-written backprop, AdamW and cosine schedule."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

CHECKPOINT_VERSION = 1
NORM_EPS = 1e-12


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    encoder_layers: list = field(default_factory=lambda: [3, 64, 64, 32])
    projection_layers: list = field(default_factory=lambda: [32, 16])
    activation: str = "relu"
    normalize_projection: bool = True
    seed: int = 0

    def validate(self):
        enc, proj = list(self.encoder_layers), list(self.projection_layers)
        if len(enc) < 2 or len(proj) < 2:
            raise ValueError("encoder_layers and projection_layers need at least two sizes")
        if any(int(v) < 1 for v in enc + proj):
            raise ValueError("all layer sizes must be >= 1")
        if enc[-1] != proj[0]:
            raise ValueError("projection_layers[0] must equal encoder_layers[-1]")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def d_in(self):
        return int(self.encoder_layers[0])

    @property
    def d_proj(self):
        return int(self.projection_layers[-1])


@dataclass
class ModelParams:
    """Weights stored as ``(fan_in, fan_out)`` so a layer is ``X @ W + b``."""

    enc_W: list
    enc_b: list
    proj_W: list
    proj_b: list

    def arrays(self):
        return [*self.enc_W, *self.enc_b, *self.proj_W, *self.proj_b]

    def copy(self):
        return ModelParams(*[[a.copy() for a in grp] for grp in (self.enc_W, self.enc_b, self.proj_W, self.proj_b)])

    def zeros_like(self):
        return ModelParams(*[[np.zeros_like(a) for a in grp] for grp in (self.enc_W, self.enc_b, self.proj_W, self.proj_b)])

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vec):
        off = 0
        for a in self.arrays():
            a[...] = vec[off:off + a.size].reshape(a.shape)
            off += a.size

    def __add__(self, other):
        return ModelParams(*[[a + b for a, b in zip(g1, g2)] for g1, g2 in zip(self._groups(), other._groups())])

    def _groups(self):
        return (self.enc_W, self.enc_b, self.proj_W, self.proj_b)


@dataclass
class Cache:
    enc_in: list
    enc_pre: list
    proj_in: list
    proj_pre: list
    U: np.ndarray
    norms: np.ndarray
    valid: np.ndarray
    activation: str
    normalized: bool


@dataclass
class OptimState:
    m: ModelParams
    v: ModelParams
    step: int = 0
    base_lr: float = 3e-4
    weight_decay: float = 1e-4
    total_epochs: int = 1


def _act(x, kind):
    return np.maximum(x, 0.0) if kind == "relu" else np.tanh(x)


def _act_grad(pre, kind):
    if kind == "relu":
        return (pre > 0).astype(np.float64)
    t = np.tanh(pre)
    return 1.0 - t * t


def init_model(config: ModelConfig) -> ModelParams:
    """He-uniform (relu) or Xavier-uniform (tanh) weights, zero biases."""
    config.validate()
    rng = np.random.default_rng(config.seed)

    def layers(sizes):
        Ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            if config.activation == "relu":
                bound = math.sqrt(6.0 / fan_in)
            else:
                bound = math.sqrt(6.0 / (fan_in + fan_out))
            Ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return Ws, bs

    enc_W, enc_b = layers([int(v) for v in config.encoder_layers])
    proj_W, proj_b = layers([int(v) for v in config.projection_layers])
    return ModelParams(enc_W, enc_b, proj_W, proj_b)


def forward(params: ModelParams, X, config: ModelConfig):
    """Returns ``(H, Z, cache)``.

    Every encoder layer is followed by the activation; the projection head
    applies it between layers only. Rows whose pre-normalization norm is at
    most 1e-12 come back as zero vectors and are flagged in ``cache.valid``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.enc_W[0].shape[0]:
        raise ValueError(f"expected inputs with {params.enc_W[0].shape[0]} columns, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input")
    kind = config.activation
    enc_in, enc_pre = [], []
    a = X
    for W, b in zip(params.enc_W, params.enc_b):
        enc_in.append(a)
        pre = a @ W + b
        enc_pre.append(pre)
        a = _act(pre, kind)
    H = a
    proj_in, proj_pre = [], []
    last = len(params.proj_W) - 1
    for j, (W, b) in enumerate(zip(params.proj_W, params.proj_b)):
        proj_in.append(a)
        pre = a @ W + b
        proj_pre.append(pre)
        a = pre if j == last else _act(pre, kind)
    U = a
    norms = np.linalg.norm(U, axis=1)
    valid = norms > NORM_EPS
    if config.normalize_projection:
        Z = np.zeros_like(U)
        Z[valid] = U[valid] / norms[valid, None]
    else:
        Z = U
    cache = Cache(enc_in, enc_pre, proj_in, proj_pre, U, norms, valid, kind, config.normalize_projection)
    return H, Z, cache


def backward(params: ModelParams, cache: Cache, dL_dZ, dL_dH=None) -> ModelParams:
    dZ = np.asarray(dL_dZ, dtype=np.float64)
    if dZ.shape != cache.U.shape:
        raise ValueError(f"dL_dZ shape {dZ.shape} does not match projections {cache.U.shape}")
    if cache.normalized:
        dU = np.zeros_like(dZ)
        v = cache.valid
        z = cache.U[v] / cache.norms[v, None]
        g = dZ[v]
        dU[v] = (g - z * np.sum(z * g, axis=1, keepdims=True)) / cache.norms[v, None]
    else:
        dU = dZ
    kind = cache.activation
    grads = params.zeros_like()
    delta = dU
    for j in range(len(params.proj_W) - 1, -1, -1):
        if j != len(params.proj_W) - 1:
            delta = delta * _act_grad(cache.proj_pre[j], kind)
        grads.proj_W[j] = cache.proj_in[j].T @ delta
        grads.proj_b[j] = delta.sum(axis=0)
        delta = delta @ params.proj_W[j].T
    if dL_dH is not None:
        dH = np.asarray(dL_dH, dtype=np.float64)
        if dH.shape != delta.shape:
            raise ValueError(f"dL_dH shape {dH.shape} does not match representations {delta.shape}")
        delta = delta + dH
    for j in range(len(params.enc_W) - 1, -1, -1):
        delta = delta * _act_grad(cache.enc_pre[j], kind)
        grads.enc_W[j] = cache.enc_in[j].T @ delta
        grads.enc_b[j] = delta.sum(axis=0)
        if j:
            delta = delta @ params.enc_W[j].T
    return grads


def init_optim(params: ModelParams, base_lr=3e-4, weight_decay=1e-4, total_epochs=1) -> OptimState:
    return OptimState(params.zeros_like(), params.zeros_like(), 0, base_lr, weight_decay, total_epochs)


def cosine_multiplier(epoch, total_epochs):
    return 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def adam_step(params: ModelParams, grads: ModelParams, opt: OptimState, epoch: int,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One AdamW update in place; returns ``(params, opt)``."""
    opt.step += 1
    lr = opt.base_lr * cosine_multiplier(epoch, opt.total_epochs)
    c1 = 1.0 - beta1 ** opt.step
    c2 = 1.0 - beta2 ** opt.step
    for p, g, m, v in zip(params.arrays(), grads.arrays(), opt.m.arrays(), opt.v.arrays()):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * ((m / c1) / (np.sqrt(v / c2) + eps) + opt.weight_decay * p)
    return params, opt


def _pack(p: ModelParams):
    return {k: [a.tolist() for a in getattr(p, k)] for k in ("enc_W", "enc_b", "proj_W", "proj_b")}


def _unpack(d):
    return ModelParams(*[[np.asarray(a, dtype=np.float64) for a in d[k]] for k in ("enc_W", "enc_b", "proj_W", "proj_b")])


def _arch(config: ModelConfig):
    # the init seed does not constrain a trained checkpoint
    return ([int(v) for v in config.encoder_layers], [int(v) for v in config.projection_layers],
            config.activation, bool(config.normalize_projection))


def _check_shapes(params: ModelParams, config: ModelConfig):
    ref = init_model(config)
    for a, b in zip(params.arrays(), ref.arrays()):
        if a.shape != b.shape:
            raise CheckpointError(f"parameter shape {a.shape} does not match model config {b.shape}")
    if len(params.arrays()) != len(ref.arrays()):
        raise CheckpointError("parameter count does not match model config")


def save_checkpoint(path, config: ModelConfig, params: ModelParams, opt: OptimState, epoch: int, extra=None):
    """JSON dump; Python float repr makes the round trip bit exact."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(config),
        "params": _pack(params),
        "optim": {
            "m": _pack(opt.m),
            "v": _pack(opt.v),
            "step": opt.step,
            "base_lr": opt.base_lr,
            "weight_decay": opt.weight_decay,
            "total_epochs": opt.total_epochs,
        },
        "epoch": int(epoch),
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path, expect_config: ModelConfig | None = None):
    """Returns ``(config, params, opt, epoch, extra)``."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version') if isinstance(doc, dict) else None!r}")
    try:
        config = ModelConfig(**doc["model_config"])
        params = _unpack(doc["params"])
        o = doc["optim"]
        opt = OptimState(_unpack(o["m"]), _unpack(o["v"]), o["step"], o["base_lr"], o["weight_decay"], o["total_epochs"])
        epoch = int(doc["epoch"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if expect_config is not None and _arch(expect_config) != _arch(config):
        raise CheckpointError(f"{path}: checkpoint model config does not match the requested one")
    _check_shapes(params, config)
    return config, params, opt, epoch, doc.get("extra", {})

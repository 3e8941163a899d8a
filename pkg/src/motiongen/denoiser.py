"""Trainable inner model: a small MLP with hand-written reverse-mode
gradients, decoupled-weight-decay Adam, min-max data normalization, and a
binary checkpoint format.

The MLP uses a Gaussian-error-linear activation (smooth everywhere, which
keeps gradients through the trajectory decode well behaved) and a zero
initialized final layer so a fresh model emits all-zero outputs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import (
    CheckpointCorruptError,
    CheckpointDimensionError,
    CheckpointVersionError,
    ContractError,
    TrainingError,
)

CHECKPOINT_MAGIC = b"MPDCKPT1"
CHECKPOINT_VERSION = 1

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


# ---------------------------------------------------------------------------
# Normalization


@dataclass
class NormStats:
    """Per-dimension offsets/scales mapping training data into [-1, 1]."""

    action_offset: np.ndarray
    action_scale: np.ndarray
    obs_offset: np.ndarray
    obs_scale: np.ndarray

    def __post_init__(self) -> None:
        for name in ("action_offset", "action_scale", "obs_offset", "obs_scale"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.action_scale <= 0.0) or np.any(self.obs_scale <= 0.0):
            raise ContractError("normalization scales must be positive")

    def normalize_actions(self, values: np.ndarray) -> np.ndarray:
        return (values - self.action_offset) / self.action_scale

    def denormalize_actions(self, values: np.ndarray) -> np.ndarray:
        return values * self.action_scale + self.action_offset

    def normalize_action_velocity(self, values: np.ndarray) -> np.ndarray:
        return values / self.action_scale

    def denormalize_action_velocity(self, values: np.ndarray) -> np.ndarray:
        return values * self.action_scale

    def normalize_obs(self, values: np.ndarray) -> np.ndarray:
        return (values - self.obs_offset) / self.obs_scale


def minmax_stats(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Offset/scale so data maps to [-1, 1]; constant dimensions get scale 1."""
    data = np.asarray(data, dtype=float)
    lo = data.min(axis=0)
    hi = data.max(axis=0)
    offset = 0.5 * (hi + lo)
    scale = 0.5 * (hi - lo)
    scale[scale <= 0.0] = 1.0
    return offset, scale


def identity_stats(action_dim: int, obs_dim: int) -> NormStats:
    return NormStats(
        action_offset=np.zeros(action_dim),
        action_scale=np.ones(action_dim),
        obs_offset=np.zeros(obs_dim),
        obs_scale=np.ones(obs_dim),
    )


# ---------------------------------------------------------------------------
# MLP parameters and forward/backward


@dataclass
class DenoiserParams:
    """Weights and biases of the inner MLP plus data normalization stats."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    norm: NormStats

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def tensors(self) -> list[np.ndarray]:
        """Flat parameter list in a stable order (per layer: weight, bias)."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            norm=NormStats(
                self.norm.action_offset.copy(),
                self.norm.action_scale.copy(),
                self.norm.obs_offset.copy(),
                self.norm.obs_scale.copy(),
            ),
        )


def param_count(layer_dims: list[int]) -> int:
    return sum(
        d_in * d_out + d_out for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:])
    )


def init_params(
    rng: np.random.Generator,
    input_dim: int,
    hidden: tuple[int, ...],
    output_dim: int,
    norm: NormStats,
) -> DenoiserParams:
    """Fan-in scaled Gaussian init; the final layer starts at exactly zero."""
    dims = [input_dim, *hidden, output_dim]
    weights, biases = [], []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        if i == len(dims) - 2:
            weights.append(np.zeros((d_in, d_out)))
        else:
            weights.append(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_out)))
        biases.append(np.zeros(d_out))
    return DenoiserParams(weights=weights, biases=biases, norm=norm)


def mlp_forward(params: DenoiserParams, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Batched forward pass. Returns output and the cache for `mlp_backward`."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != params.input_dim:
        raise ContractError(
            f"input has dimension {x.shape[1]}, expected {params.input_dim}"
        )
    cache = []
    h = x
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        cache.append((h, z))
        h = gelu(z) if i < n_layers - 1 else z
    if squeeze:
        return h[0], cache
    return h, cache


def mlp_backward(
    params: DenoiserParams, cache: list, upstream: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Reverse-mode pass. Returns (dWs, dbs, dX) for a batched upstream.

    Parameter gradients are summed over the batch in index order, so the
    reduction is deterministic.
    """
    upstream = np.asarray(upstream, dtype=float)
    if upstream.ndim == 1:
        upstream = upstream[None, :]
    n_layers = len(params.weights)
    d_ws: list[np.ndarray] = [None] * n_layers
    d_bs: list[np.ndarray] = [None] * n_layers
    grad = upstream
    for i in range(n_layers - 1, -1, -1):
        h_in, z = cache[i]
        if i < n_layers - 1:
            grad = grad * gelu_grad(z)
        d_ws[i] = h_in.T @ grad
        d_bs[i] = grad.sum(axis=0)
        grad = grad @ params.weights[i].T
    return d_ws, d_bs, grad


def forward_with_gradients(params: DenoiserParams, x: np.ndarray):
    """Forward pass plus a closure that maps upstream sensitivities to
    (parameter gradients, input gradient)."""
    y, cache = mlp_forward(params, x)

    def backward(upstream: np.ndarray):
        d_ws, d_bs, d_x = mlp_backward(params, cache, upstream)
        grads = []
        for dw, db in zip(d_ws, d_bs):
            grads.append(dw)
            grads.append(db)
        if np.asarray(x).ndim == 1:
            d_x = d_x[0]
        return grads, d_x

    return y, backward


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class OptimizerState:
    """Moment accumulators and hyperparameters for decoupled weight decay."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def init_optimizer(
    tensors: list[np.ndarray],
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-6,
) -> OptimizerState:
    return OptimizerState(
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        weight_decay=weight_decay,
        step=0,
        m=[np.zeros_like(t) for t in tensors],
        v=[np.zeros_like(t) for t in tensors],
    )


def adamw_step(
    opt: OptimizerState, tensors: list[np.ndarray], grads: list[np.ndarray]
) -> None:
    """One in-place update: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)."""
    if len(tensors) != len(opt.m) or len(grads) != len(tensors):
        raise ContractError("optimizer state does not match the parameter list")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient in optimizer step")
    opt.step += 1
    bc1 = 1.0 - opt.beta1**opt.step
    bc2 = 1.0 - opt.beta2**opt.step
    for p, g, m, v in zip(tensors, grads, opt.m, opt.v):
        if p.shape != g.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + opt.eps) + opt.weight_decay * p
        p -= opt.lr * update


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout: magic "MPDCKPT1", uint64 little-endian header length, UTF-8 JSON
# header, then raw little-endian float64 tensor data in index order.


@dataclass
class CheckpointBundle:
    params: DenoiserParams
    prodmp_config: dict
    noise_config: dict
    variant: str
    extra: dict
    opt: OptimizerState | None = None


def _norm_to_json(norm: NormStats) -> dict:
    return {
        "action_offset": norm.action_offset.tolist(),
        "action_scale": norm.action_scale.tolist(),
        "obs_offset": norm.obs_offset.tolist(),
        "obs_scale": norm.obs_scale.tolist(),
    }


def save_checkpoint(
    path: str | Path,
    params: DenoiserParams,
    prodmp_config: dict,
    noise_config: dict,
    variant: str,
    extra: dict | None = None,
    opt: OptimizerState | None = None,
) -> None:
    tensors: list[tuple[str, np.ndarray]] = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        tensors.append((f"layer{i}.weight", w))
        tensors.append((f"layer{i}.bias", b))
    opt_header = None
    if opt is not None:
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            tensors.append((f"opt.m.{i}", m))
            tensors.append((f"opt.v.{i}", v))
        opt_header = {
            "lr": opt.lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "weight_decay": opt.weight_decay,
            "step": opt.step,
        }

    index = []
    offset = 0
    blobs = []
    for name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(data)
        offset += len(data)

    header = {
        "version": CHECKPOINT_VERSION,
        "variant": variant,
        "arch": {"layer_dims": params.layer_dims},
        "prodmp": prodmp_config,
        "noise": noise_config,
        "norm": _norm_to_json(params.norm),
        "tensors": index,
        "optimizer": opt_header,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(
    path: str | Path,
    expected_dof: int | None = None,
    expected_obs_dim: int | None = None,
) -> CheckpointBundle:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8:
        raise CheckpointCorruptError(f"checkpoint {path} is truncated")
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path} does not start with {CHECKPOINT_MAGIC!r}")
    (header_len,) = struct.unpack_from("<Q", raw, len(CHECKPOINT_MAGIC))
    header_start = len(CHECKPOINT_MAGIC) + 8
    if len(raw) < header_start + header_len:
        raise CheckpointCorruptError(f"checkpoint {path} header is truncated")
    try:
        header = json.loads(raw[header_start : header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"checkpoint {path} header is not valid JSON") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {header.get('version')} != {CHECKPOINT_VERSION}"
        )

    data = raw[header_start + header_len :]
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(data):
            raise CheckpointCorruptError(
                f"checkpoint {path} tensor data truncated at {entry['name']}"
            )
        arrays[entry["name"]] = (
            np.frombuffer(data[start:end], dtype="<f8").astype(float).reshape(shape)
        )

    layer_dims = header["arch"]["layer_dims"]
    n_layers = len(layer_dims) - 1
    weights, biases = [], []
    for i in range(n_layers):
        try:
            w = arrays[f"layer{i}.weight"]
            b = arrays[f"layer{i}.bias"]
        except KeyError as exc:
            raise CheckpointCorruptError(f"checkpoint {path} missing tensor {exc}") from exc
        if w.shape != (layer_dims[i], layer_dims[i + 1]) or b.shape != (layer_dims[i + 1],):
            raise CheckpointDimensionError(
                f"tensor shapes for layer {i} disagree with the declared architecture"
            )
        weights.append(w)
        biases.append(b)

    norm = NormStats(**{k: np.asarray(v) for k, v in header["norm"].items()})
    params = DenoiserParams(weights=weights, biases=biases, norm=norm)

    if expected_dof is not None and header["prodmp"].get("dof") != expected_dof:
        raise CheckpointDimensionError(
            f"checkpoint dof {header['prodmp'].get('dof')} != runtime dof {expected_dof}"
        )
    if expected_obs_dim is not None and norm.obs_offset.shape[0] != expected_obs_dim:
        raise CheckpointDimensionError(
            f"checkpoint obs_dim {norm.obs_offset.shape[0]} != runtime {expected_obs_dim}"
        )

    opt = None
    if header.get("optimizer") is not None:
        oh = header["optimizer"]
        opt = OptimizerState(
            lr=oh["lr"],
            beta1=oh["beta1"],
            beta2=oh["beta2"],
            eps=oh["eps"],
            weight_decay=oh["weight_decay"],
            step=oh["step"],
            m=[arrays[f"opt.m.{i}"] for i in range(2 * n_layers)],
            v=[arrays[f"opt.v.{i}"] for i in range(2 * n_layers)],
        )
        for m, v, t in zip(opt.m, opt.v, params.tensors()):
            if m.shape != t.shape or v.shape != t.shape:
                raise CheckpointDimensionError("optimizer moments disagree with parameters")

    return CheckpointBundle(
        params=params,
        prodmp_config=header["prodmp"],
        noise_config=header["noise"],
        variant=header["variant"],
        extra=header.get("extra", {}),
        opt=opt,
    )

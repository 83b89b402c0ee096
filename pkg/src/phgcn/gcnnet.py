"""PH-GCN model: blended graph convolution, appearance stream, fusion, per-part heads.

Everything is written for an optional leading batch axis: part features are
``(..., N, d0)`` and adjacencies ``(..., N, N)``. Backprop is hand-derived.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import SplitMix64

HIDDEN = 256
NUM_LAYERS = 2
PHGM_MAGIC = b"PHGM"
PHGM_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class ModelParams:
    theta: list[np.ndarray]
    proj: np.ndarray  # d0 x width
    W: np.ndarray  # N x width x C, one head per part
    b: np.ndarray  # N x C
    eps: float = 0.75
    beta: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"eps must lie strictly inside (0, 1), got {self.eps}")
        if self.beta < 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")

    @property
    def num_parts(self) -> int:
        return self.W.shape[0]

    @property
    def num_classes(self) -> int:
        return self.W.shape[2]

    @property
    def in_dim(self) -> int:
        return self.proj.shape[0]

    @property
    def dtype(self):
        return self.proj.dtype

    @property
    def classifiers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.W[i], self.b[i]) for i in range(self.num_parts)]

    def tensors(self) -> dict[str, np.ndarray]:
        """Named tensors in canonical (checkpoint) order."""
        out = {f"theta{t}": th for t, th in enumerate(self.theta)}
        out.update(proj=self.proj, W=self.W, b=self.b)
        return out

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "ModelParams":
        theta = [tensors[f"theta{t}"] for t in range(len(self.theta))]
        return replace(self, theta=theta, proj=tensors["proj"], W=tensors["W"], b=tensors["b"])

    def astype(self, dtype) -> "ModelParams":
        return self.with_tensors({k: v.astype(dtype) for k, v in self.tensors().items()})

    def copy(self) -> "ModelParams":
        return self.with_tensors({k: v.copy() for k, v in self.tensors().items()})


def param_group(name: str) -> str:
    """Learning-rate group of a tensor: the GCN weights or everything else."""
    return "gcn" if name.startswith("theta") else "head"


def init_params(d0: int, num_classes: int, seed: int, num_parts: int = 10,
                hidden: int = HIDDEN, num_layers: int = NUM_LAYERS,
                eps: float = 0.75, beta: float = 0.3, dtype=np.float32) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    Draw order: theta0 .. theta{T-1}, proj, W (row-major), all from one stream.
    """
    if d0 < 1 or num_classes < 1:
        raise ValueError("d0 and num_classes must be >= 1")
    rng = SplitMix64(seed)

    def draw(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        u = rng.uniform(int(np.prod(shape)))
        return ((2.0 * u - 1.0) * bound).reshape(shape).astype(dtype)

    dims = [d0] + [hidden] * num_layers
    theta = [draw((dims[t], dims[t + 1]), dims[t]) for t in range(num_layers)]
    proj = draw((d0, hidden), d0)
    W = draw((num_parts, hidden, num_classes), hidden)
    b = np.zeros((num_parts, num_classes), dtype=dtype)
    return ModelParams(theta, proj, W, b, eps=eps, beta=beta)


# --- forward pieces ---------------------------------------------------------


def relu(x):
    return np.maximum(x, 0)


def blend(H, A_norm, eps):
    """eps * A H + (1 - eps) * H."""
    return eps * (A_norm @ H) + (1 - eps) * H


def gcn_layer(H, A_norm, theta, eps, activate=True):
    if H.shape[-1] != theta.shape[0] or A_norm.shape[-1] != H.shape[-2]:
        raise ValueError(f"shape mismatch: H {H.shape}, A {A_norm.shape}, theta {theta.shape}")
    pre = blend(H, A_norm, eps) @ theta
    return pre, (relu(pre) if activate else pre)


def appearance_project(X, proj):
    if X.shape[-1] != proj.shape[0]:
        raise ValueError(f"shape mismatch: X {X.shape}, proj {proj.shape}")
    return relu(X @ proj)


def fuse(H_final, F, beta):
    if H_final.shape != F.shape:
        raise ValueError(f"shape mismatch: {H_final.shape} vs {F.shape}")
    return H_final + beta * F


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def part_loss(logits, label):
    """Per-part cross-entropy and their mean; ``label`` may be batched."""
    C = logits.shape[-1]
    label = np.asarray(label)
    if np.any(label < 0) or np.any(label >= C):
        raise ValueError(f"label out of range for {C} classes")
    logp = log_softmax(logits)
    per_part = -np.take_along_axis(logp, label.reshape(label.shape + (1, 1)), axis=-1)[..., 0]
    return per_part, per_part.mean(axis=-1)


@dataclass
class ForwardTrace:
    H: list[np.ndarray]  # H^(0) .. H^(T)
    mixed: list[np.ndarray]  # blended inputs per layer
    pre: list[np.ndarray]  # pre-activations per layer
    F_pre: np.ndarray
    F: np.ndarray
    Z: np.ndarray
    logits: np.ndarray
    label: np.ndarray
    per_part: np.ndarray
    sample_loss: np.ndarray
    loss: np.floating  # kept in the compute dtype
    use_gcn: bool = True
    extra: dict = field(default_factory=dict)


def forward(x, A_norm, params: ModelParams, label=0, use_gcn: bool = True) -> ForwardTrace:
    """Full pipeline. With ``use_gcn=False`` the structure stream is dropped and z = f."""
    x = np.asarray(getattr(x, "vectors", x), dtype=params.dtype)
    A_norm = np.asarray(A_norm, dtype=params.dtype)
    if x.shape[-2] != params.num_parts:
        raise ValueError(f"model has {params.num_parts} part heads, input has {x.shape[-2]} parts")
    H, mixed, pre = [x], [], []
    if use_gcn:
        for theta in params.theta:
            m = blend(H[-1], A_norm, params.eps)
            p = m @ theta
            mixed.append(m)
            pre.append(p)
            H.append(relu(p))
    F_pre = x @ params.proj
    F = relu(F_pre)
    Z = fuse(H[-1], F, params.beta) if use_gcn else F
    logits = np.einsum("...ni,nic->...nc", Z, params.W) + params.b
    label = np.asarray(label)
    per_part, sample_loss = part_loss(logits, label)
    return ForwardTrace(H, mixed, pre, F_pre, F, Z, logits, label, per_part,
                        sample_loss, sample_loss.mean(), use_gcn)


def embed_parts(x, A_norm, params: ModelParams, use_gcn: bool = True):
    """Fused part features Z only (no classifier heads)."""
    x = np.asarray(x, dtype=params.dtype)
    A_norm = np.asarray(A_norm, dtype=params.dtype)
    F = appearance_project(x, params.proj)
    if not use_gcn:
        return F
    H = x
    for theta in params.theta:
        H = gcn_layer(H, A_norm, theta, params.eps)[1]
    return fuse(H, F, params.beta)


# --- backward ---------------------------------------------------------------


def _flat(a):
    return a.reshape(-1, a.shape[-1])


def fuse_backward(dZ, beta):
    return dZ, beta * dZ


def backward(trace: ForwardTrace, A_norm, params: ModelParams, x=None) -> dict[str, np.ndarray]:
    """Gradient of ``trace.loss`` (mean over batch and parts) w.r.t. every tensor.

    The adjacency is a constant; ReLU'(0) = 0.
    """
    A_norm = np.asarray(A_norm, dtype=params.dtype)
    x = trace.H[0] if x is None else np.asarray(getattr(x, "vectors", x), dtype=params.dtype)
    if trace.logits.shape[-2:] != (params.num_parts, params.num_classes):
        raise ValueError("trace does not match params")
    N = params.num_parts
    batch = int(np.prod(trace.logits.shape[:-2], dtype=np.int64))

    probs = np.exp(log_softmax(trace.logits))
    onehot = np.eye(params.num_classes, dtype=probs.dtype)[trace.label][..., None, :]
    g = (probs - onehot) / (N * batch)

    grads = {}
    width = trace.Z.shape[-1]
    dW = np.einsum("bni,bnc->nic", trace.Z.reshape(-1, N, width), g.reshape(-1, N, params.num_classes))
    db = g.reshape(-1, N, params.num_classes).sum(axis=0)
    dZ = np.einsum("...nc,nic->...ni", g, params.W)

    if trace.use_gcn:
        dH, dF = fuse_backward(dZ, params.beta)
    else:
        dH, dF = None, dZ
    dF_pre = dF * (trace.F_pre > 0)
    dproj = _flat(x).T @ _flat(dF_pre)

    dtheta = [np.zeros_like(t) for t in params.theta]
    if trace.use_gcn:
        At = np.swapaxes(A_norm, -1, -2)
        for t in reversed(range(len(params.theta))):
            dP = dH * (trace.pre[t] > 0)
            dtheta[t] = _flat(trace.mixed[t]).T @ _flat(dP)
            if t:
                dM = dP @ params.theta[t].T
                dH = params.eps * (At @ dM) + (1 - params.eps) * dM

    for t, d in enumerate(dtheta):
        grads[f"theta{t}"] = d
    grads.update(proj=dproj, W=dW, b=db)
    return grads


def loss_and_grads(x, A_norm, params, label, use_gcn=True):
    trace = forward(x, A_norm, params, label, use_gcn)
    return trace, backward(trace, A_norm, params, x)


# --- PHGM checkpoint --------------------------------------------------------


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_checkpoint(params: ModelParams, path, meta: dict | None = None) -> None:
    """PHGM: magic | version u32 | T u32 | d_0..d_T u32 | width u32 | N u32 | C u32,
    then theta0..theta{T-1}, proj, W, b as little-endian float32, row-major."""
    T = len(params.theta)
    dims = [params.theta[0].shape[0]] + [th.shape[1] for th in params.theta]
    header = struct.pack(f"<4sII{T + 1}IIII", PHGM_MAGIC, PHGM_VERSION, T, *dims,
                         params.proj.shape[1], params.num_parts, params.num_classes)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in params.tensors().values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    side = {"eps": float(params.eps), "beta": float(params.beta)}
    side.update(meta or {})
    sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def read_checkpoint(path) -> tuple[ModelParams, dict]:
    data = Path(path).read_bytes()
    if data[:4] != PHGM_MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r} at byte offset 0")
    if len(data) < 12:
        raise CheckpointError("truncated PHGM header")
    version, T = struct.unpack_from("<II", data, 4)
    if version != PHGM_VERSION:
        raise CheckpointError(f"unsupported PHGM version {version} at byte offset 4")
    head = struct.calcsize(f"<{T + 1}IIII")
    if len(data) < 12 + head:
        raise CheckpointError("truncated PHGM header")
    fields = struct.unpack_from(f"<{T + 1}IIII", data, 12)
    dims, (width, N, C) = fields[:T + 1], fields[T + 1:]
    shapes = [(dims[t], dims[t + 1]) for t in range(T)] + [(dims[0], width), (N, dims[-1], C), (N, C)]
    offset = 12 + head
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        if len(data) < offset + 4 * count:
            raise CheckpointError(f"truncated PHGM payload at byte offset {offset}")
        arrays.append(np.frombuffer(data, dtype="<f4", count=count, offset=offset)
                      .astype(np.float32).reshape(shape))
        offset += 4 * count
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes at byte offset {offset}")
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    params = ModelParams(arrays[:T], arrays[T], arrays[T + 1], arrays[T + 2],
                         eps=meta.get("eps", 0.75), beta=meta.get("beta", 0.3))
    return params, meta

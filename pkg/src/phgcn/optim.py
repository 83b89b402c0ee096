"""SGD with layered learning rates and a step decay; finite-difference gradient checker."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import gcnnet
from .dataset import Dataset, PartitionSpec, pool_parts
from .gcnnet import ModelParams, init_params, param_group
from .partgraph import build_topology, normalized_adjacency
from .rng import STREAM_INIT, STREAM_SHUFFLE, SplitMix64, derive_seed

log = logging.getLogger(__name__)

VARIANTS = ("phgcn", "pgcn", "nogcn")


class DivergenceError(FloatingPointError):
    """A non-finite loss or gradient; ``tensor`` names the offender."""

    def __init__(self, message: str, tensor: str | None = None):
        super().__init__(message)
        self.tensor = tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr_gcn: float = 0.01
    lr_head: float = 1.0
    decay_epoch: int = 40
    decay_factor: float = 0.1
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        # lr = 0 is allowed: it freezes the group exactly
        if self.lr_gcn < 0 or self.lr_head < 0:
            raise ValueError("learning rates must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.decay_factor < 0:
            raise ValueError("decay_factor must be >= 0")


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    lr: list[dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"loss": self.loss, "accuracy": self.accuracy, "lr": self.lr}


def lr_schedule(epoch: int, cfg: TrainConfig) -> dict[str, float]:
    scale = 1.0 if epoch < cfg.decay_epoch else cfg.decay_factor
    return {"gcn": cfg.lr_gcn * scale, "head": cfg.lr_head * scale}


def sgd_step(params: ModelParams, grads: dict, rates: dict, velocity: dict | None = None,
             momentum: float = 0.0) -> ModelParams:
    """v <- momentum * v + g; theta <- theta - lr * v. ``velocity`` is updated in place."""
    updated = {}
    for name, value in params.tensors().items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            bad = np.argwhere(~np.isfinite(g))[0]
            raise DivergenceError(f"non-finite gradient in tensor {name!r} at index {tuple(bad)}", name)
        if velocity is not None and momentum:
            v = momentum * velocity.get(name, 0) + g
            velocity[name] = v
        else:
            v = g
        lr = rates[param_group(name)]
        updated[name] = value if lr == 0 else (value - lr * v).astype(value.dtype)
    return params.with_tensors(updated)


def majority_vote(logits: np.ndarray) -> np.ndarray:
    """Per-sample identity chosen by most part heads (ties go to the smaller class)."""
    votes = logits.argmax(axis=-1)
    C = logits.shape[-1]
    counts = np.apply_along_axis(np.bincount, -1, votes, minlength=C)
    return counts.argmax(axis=-1)


def variant_setup(spec: PartitionSpec, variant: str) -> tuple[PartitionSpec, bool]:
    """Partition spec and GCN flag for an ablation variant."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "pgcn":
        return PartitionSpec((spec.levels[-1],)), True
    return spec, variant == "phgcn"


def prepare_inputs(features: np.ndarray, spec: PartitionSpec, delta=None, dtype=np.float32):
    """Pool maps into parts and build per-image normalized adjacencies."""
    topo = build_topology(spec)
    X = pool_parts(features, spec)
    A = normalized_adjacency(X, topo, delta)
    return X.astype(dtype), A.astype(dtype)


def train(dataset: Dataset, spec: PartitionSpec = PartitionSpec(), cfg: TrainConfig = TrainConfig(),
          eps: float = 0.75, beta: float = 0.3, delta=None, variant: str = "phgcn",
          hidden: int = gcnnet.HIDDEN):
    """Mini-batch SGD over the train split.

    Init and shuffling seeds are derived from ``cfg.seed``. Returns
    (params, history, classes) where ``classes[k]`` is the identity label of
    class index k.
    """
    train_idx = list(dataset.split.get("train", []))
    if not train_idx:
        raise ValueError("train split is empty")
    feats, labels = dataset.subset("train")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("training needs at least two identities")
    y = np.searchsorted(classes, labels)

    spec, use_gcn = variant_setup(spec, variant)
    X, A = prepare_inputs(feats, spec, delta)
    params = init_params(X.shape[-1], len(classes), derive_seed(cfg.seed, STREAM_INIT),
                         num_parts=spec.num_parts,
                         hidden=hidden, eps=eps, beta=1.0 if variant == "nogcn" else beta)

    n = len(y)
    batch = min(cfg.batch_size, n)
    rng = SplitMix64(derive_seed(cfg.seed, STREAM_SHUFFLE))
    velocity: dict = {}
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        rates = lr_schedule(epoch, cfg)
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            trace, grads = gcnnet.loss_and_grads(X[idx], A[idx], params, y[idx], use_gcn)
            if not np.isfinite(trace.loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}", "loss")
            loss_sum += float(trace.sample_loss.astype(np.float64).sum())
            correct += int((majority_vote(trace.logits) == y[idx]).sum())
            params = sgd_step(params, grads, rates, velocity, cfg.momentum)
        history.loss.append(loss_sum / n)
        history.accuracy.append(correct / n)
        history.lr.append(rates)
        log.debug("epoch %d loss %.5f acc %.3f", epoch, history.loss[-1], history.accuracy[-1])
    return params, history, classes


def training_fit(params: ModelParams, dataset: Dataset, spec: PartitionSpec, variant="phgcn",
                 delta=None, classes=None) -> tuple[float, float]:
    """(mean loss, majority-vote accuracy) of ``params`` on the train split."""
    feats, labels = dataset.subset("train")
    classes = np.unique(labels) if classes is None else np.asarray(classes)
    y = np.searchsorted(classes, labels)
    spec, use_gcn = variant_setup(spec, variant)
    X, A = prepare_inputs(feats, spec, delta, params.dtype)
    trace = gcnnet.forward(X, A, params, y, use_gcn)
    return trace.loss, float((majority_vote(trace.logits) == y).mean())


# --- gradient check ---------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_tensor: str
    worst_index: tuple
    per_tensor: dict[str, float]
    coords_checked: int
    warnings: list[str]

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= 1e-4

    def to_dict(self) -> dict:
        return {
            "max_rel_err": self.max_rel_err,
            "worst_tensor": self.worst_tensor,
            "worst_index": list(self.worst_index),
            "per_tensor": self.per_tensor,
            "coords_checked": self.coords_checked,
            "warnings": self.warnings,
        }


def _activation_masks(trace) -> list[np.ndarray]:
    return [p > 0 for p in trace.pre] + [trace.F_pre > 0]


def grad_check(params: ModelParams, instance, step: float = 1e-5, max_coords: int = 256,
               seed: int = 0, use_gcn: bool = True, backward=None,
               probe_dtype=np.longdouble) -> GradCheckReport:
    """Central differences against the analytic float64 backward pass.

    ``instance`` is ``(x, A_norm, label)``. Tensors with at most ``max_coords``
    entries are checked in full; larger ones on a seeded random subset.
    Coordinates whose float64 estimate disagrees by more than 1e-5 are
    re-probed in ``probe_dtype`` (extended precision by default) so the
    oracle's own roundoff stays far below the tolerance. When
    a probe pair changes any ReLU activation pattern the coordinate straddles
    a kink; the step is shrunk tenfold until the pattern holds (down to 1e-9).
    """
    backward = backward or gcnnet.backward
    params = params.astype(np.float64)
    x, A, label = instance
    x = np.asarray(x, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    warnings = []
    if step < 1e-10:
        warnings.append(f"step {step:g} is below 1e-10: finite differences underflow to roundoff")

    trace = gcnnet.forward(x, A, params, label, use_gcn)
    analytic = backward(trace, A, params, x)

    probes = {}

    def prober(dtype):
        if dtype not in probes:
            q = params.astype(dtype)
            xp, Ap = x.astype(dtype), A.astype(dtype)
            masks = _activation_masks(gcnnet.forward(xp, Ap, q, label, use_gcn))
            probes[dtype] = (q, xp, Ap, masks)
        return probes[dtype]

    def probe_pair(dtype, name, k, h):
        q, xp, Ap, base_masks = prober(dtype)
        flat = q.tensors()[name].reshape(-1)
        orig = flat[k]
        flat[k] = orig + h
        up = gcnnet.forward(xp, Ap, q, label, use_gcn)
        flat[k] = orig - h
        down = gcnnet.forward(xp, Ap, q, label, use_gcn)
        flat[k] = orig
        smooth = all(np.array_equal(m, b) for t in (up, down)
                     for m, b in zip(_activation_masks(t), base_masks))
        return up.loss, down.loss, smooth

    def numeric_grad(dtype, name, k):
        h = step
        up, down, smooth = probe_pair(dtype, name, k, h)
        while not smooth and h > 1e-9:
            h /= 10
            up, down, smooth = probe_pair(dtype, name, k, h)
        if not (np.isfinite(up) and np.isfinite(down)):
            raise DivergenceError(f"non-finite loss while probing {name}[{k}]", name)
        return float((up - down) / (2 * h)), h, smooth

    def rel_err(a, n):
        return abs(a - n) / max(1e-8, abs(a) + abs(n))

    rng = SplitMix64(seed)
    worst = (0.0, "", ())
    per_tensor = {}
    checked = kinks = 0
    for name, value in params.tensors().items():
        size = value.size
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = np.unique(rng.integers(size, max_coords))
        tensor_worst = 0.0
        for k in coords:
            a = float(analytic[name].reshape(-1)[k])
            # float64 probes first; extended precision only where roundoff could matter
            numeric, h, smooth = numeric_grad(np.float64, name, k)
            if rel_err(a, numeric) > 1e-5 and probe_dtype is not np.float64:
                numeric, h, smooth = numeric_grad(probe_dtype, name, k)
            if h != step:
                kinks += 1
            if not smooth:
                warnings.append(f"{name}[{k}] sits on a ReLU kink; skipped")
                continue
            err = rel_err(a, numeric)
            tensor_worst = max(tensor_worst, err)
            if err > worst[0] or not worst[1]:
                worst = (err, name, np.unravel_index(k, value.shape))
        per_tensor[name] = tensor_worst
        checked += len(coords)
    if kinks:
        warnings.append(f"{kinks} coordinate(s) needed a smaller step to avoid a ReLU kink")
    return GradCheckReport(float(worst[0]), worst[1], tuple(int(i) for i in worst[2]),
                           per_tensor, checked, warnings)


def random_instance(seed: int, spec: PartitionSpec = PartitionSpec(), d0: int = 16,
                    num_classes: int = 4, hidden: int = gcnnet.HIDDEN, eps=0.75, beta=0.3):
    """Random float64 (params, (x, A_norm, label)) for gradient checking."""
    rng = SplitMix64(seed)
    x = rng.normal(spec.num_parts * d0).reshape(spec.num_parts, d0)
    label = int(rng.integers(num_classes, 1)[0])
    A = normalized_adjacency(x, build_topology(spec))
    params = init_params(d0, num_classes, derive_seed(seed, STREAM_INIT), num_parts=spec.num_parts,
                         hidden=hidden, eps=eps, beta=beta, dtype=np.float64)
    # nonzero biases so the bias gradient path is exercised
    params.b[:] = 0.1 * rng.normal(params.b.size).reshape(params.b.shape)
    return params, (x, A, label)

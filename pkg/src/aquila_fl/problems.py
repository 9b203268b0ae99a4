"""Desk-scale objectives and data for the federated round loop.

Three problem families, all with exact full-batch local gradients:

  quadratic  per-device f_m(t) = 0.5 * (t - c_m)' diag(a_m) (t - c_m); the
             average Hessian gives certified smoothness and curvature
             constants and a closed-form minimum.
  logistic   multinomial (softmax) regression with L2 regularization on
             synthetic Gaussian class clusters.
  mlp        one-hidden-layer tanh network with softmax cross-entropy and
             L2 regularization on the same kind of synthetic data.

Labeled datasets are split across devices either IID or by the label-skew
scheme where each device holds at most `classes_per_device` distinct labels
with balanced label counts. Heterogeneous-capacity runs mask each device to
the leading r-fraction block of every weight matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInput
from .numerics import Vector

# ---------------------------------------------------------------------------
# datasets and partitioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # (n, F) float64
    labels: np.ndarray    # (n,) int64

    @property
    def n(self) -> int:
        return int(self.labels.size)


@dataclass(frozen=True)
class PartitionSpec:
    mode: str  # "iid" or "noniid"
    classes_per_device: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("iid", "noniid"):
            raise ConfigError(f"unknown partition mode {self.mode!r}")
        if self.mode == "noniid" and self.classes_per_device < 1:
            raise ConfigError("classes_per_device must be >= 1")


@dataclass(frozen=True)
class HeteroSpec:
    """Per-device width ratios; device m keeps the leading blocks of each layer."""

    ratios: tuple[float, ...]

    def __post_init__(self):
        for r in self.ratios:
            if not 0.0 < r <= 1.0:
                raise ConfigError(f"hetero ratio must be in (0, 1], got {r}")

    def ratio_for(self, device_id: int) -> float:
        return self.ratios[device_id % len(self.ratios)]


def make_blobs(n: int, n_features: int, n_classes: int, seed: int,
               separation: float = 4.0) -> LabeledDataset:
    """Balanced Gaussian class clusters; n is rounded down to a multiple of C."""
    if n < n_classes:
        raise ConfigError(f"need at least one sample per class, got n={n}, C={n_classes}")
    per_class = n // n_classes
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, separation / 2.0, size=(n_classes, n_features))
    xs, ys = [], []
    for c in range(n_classes):
        xs.append(means[c] + rng.normal(0.0, 1.0, size=(per_class, n_features)))
        ys.append(np.full(per_class, c, dtype=np.int64))
    return LabeledDataset(np.concatenate(xs), np.concatenate(ys))


def partition(dataset: LabeledDataset, spec: PartitionSpec, n_devices: int) -> list[np.ndarray]:
    """Split sample indices across devices, deterministically under the seed.

    IID: one seeded shuffle, then near-equal contiguous blocks. Non-IID:
    within-label shuffle, each label cut into equal chunks, chunks dealt
    round-robin so device i receives chunks i, i + M, ... and therefore at
    most classes_per_device distinct labels.
    """
    rng = np.random.default_rng(spec.seed)
    n = dataset.n
    if n_devices < 1:
        raise ConfigError("need at least one device")
    if spec.mode == "iid":
        order = rng.permutation(n)
        return [np.sort(chunk) for chunk in np.array_split(order, n_devices)]

    classes = np.unique(dataset.labels)
    n_classes = classes.size
    n_shards = n_devices * spec.classes_per_device
    if n_shards % n_classes != 0:
        raise ConfigError(
            f"noniid split needs devices * classes_per_device divisible by the "
            f"class count ({n_devices} * {spec.classes_per_device} vs C={n_classes})")
    shards_per_class = n_shards // n_classes
    shards: list[np.ndarray] = []
    for c in classes:
        idx = np.where(dataset.labels == c)[0]
        if idx.size < shards_per_class:
            raise ConfigError(f"class {c} has {idx.size} samples, needs {shards_per_class}")
        idx = rng.permutation(idx)
        shards.extend(np.array_split(idx, shards_per_class))
    return [np.sort(np.concatenate(shards[i::n_devices])) for i in range(n_devices)]


def dataset_rows(dataset: LabeledDataset, shards: list[np.ndarray]):
    """Yield (features, label, device_id) rows for the optional dataset dump."""
    owner = np.empty(dataset.n, dtype=np.int64)
    for device_id, idx in enumerate(shards):
        owner[idx] = device_id
    for i in range(dataset.n):
        yield dataset.features[i], int(dataset.labels[i]), int(owner[i])


# ---------------------------------------------------------------------------
# problems
# ---------------------------------------------------------------------------


def _softmax_loss_grad(w: np.ndarray, xt: np.ndarray, y: np.ndarray, reg: float,
                       want_grad: bool):
    """Shared softmax cross-entropy for the logistic head (loss, grad or None)."""
    logits = xt @ w.T
    logits -= logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(logits).sum(axis=1))
    n = y.size
    loss = float((logz - logits[np.arange(n), y]).mean() + 0.5 * reg * float((w * w).sum()))
    if not want_grad:
        return loss, None
    p = np.exp(logits - logz[:, None])
    p[np.arange(n), y] -= 1.0
    grad = p.T @ xt / n + reg * w
    return loss, grad


def _augment(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)


class QuadraticProblem:
    """Per-device diagonal quadratics with certified (mu, L) and closed-form f*."""

    kind = "quadratic"

    def __init__(self, hessians: np.ndarray, centers: np.ndarray, theta0: Vector):
        self.hessians = np.asarray(hessians, dtype=np.float64)   # (M, d) diag entries
        self.centers = np.asarray(centers, dtype=np.float64)     # (M, d)
        if self.hessians.shape != self.centers.shape:
            raise ConfigError("hessians and centers must have matching shapes")
        if np.any(self.hessians <= 0.0):
            raise ConfigError("quadratic needs strictly positive curvature")
        self.n_devices, self.dim = self.hessians.shape
        self.theta0 = np.asarray(theta0, dtype=np.float64)
        self.layer_blocks = [(0, (self.dim,))]
        avg = self.hessians.mean(axis=0)
        # average objective is 0.5 (t - t*)' diag(avg) (t - t*) + f*
        self.theta_star = (self.hessians * self.centers).mean(axis=0) / avg
        self.f_star = self.global_loss_closed_form(self.theta_star)

    def initial_theta(self) -> Vector:
        return self.theta0.copy()

    def local_loss(self, m: int, theta: Vector) -> float:
        diff = theta - self.centers[m]
        return 0.5 * float(np.sum(self.hessians[m] * diff * diff))

    def local_gradient(self, m: int, theta: Vector) -> Vector:
        return self.hessians[m] * (theta - self.centers[m])

    def global_loss_closed_form(self, theta: Vector) -> float:
        return float(np.mean([self.local_loss(m, theta) for m in range(self.n_devices)]))

    def smoothness_constants(self) -> tuple[float, float | None]:
        avg = self.hessians.mean(axis=0)
        return float(avg.max()), float(avg.min())


class LogisticProblem:
    """Softmax regression on a labeled dataset; theta is the flattened C x (F+1) matrix."""

    kind = "logistic"

    def __init__(self, dataset: LabeledDataset, shards: list[np.ndarray],
                 n_classes: int, reg: float, theta0: Vector):
        self.dataset = dataset
        self.shards = shards
        self.n_devices = len(shards)
        self.n_classes = n_classes
        self.n_features = dataset.features.shape[1]
        self.reg = float(reg)
        self.w_shape = (n_classes, self.n_features + 1)
        self.dim = self.w_shape[0] * self.w_shape[1]
        self.layer_blocks = [(0, self.w_shape)]
        self.theta0 = np.asarray(theta0, dtype=np.float64)
        self.f_star = None
        self._xt = [_augment(dataset.features[idx]) for idx in shards]
        self._y = [dataset.labels[idx] for idx in shards]

    def initial_theta(self) -> Vector:
        return self.theta0.copy()

    def local_loss(self, m: int, theta: Vector) -> float:
        loss, _ = _softmax_loss_grad(theta.reshape(self.w_shape), self._xt[m], self._y[m],
                                     self.reg, want_grad=False)
        return loss

    def local_gradient(self, m: int, theta: Vector) -> Vector:
        _, grad = _softmax_loss_grad(theta.reshape(self.w_shape), self._xt[m], self._y[m],
                                     self.reg, want_grad=True)
        return grad.reshape(-1)

    def smoothness_constants(self) -> tuple[float, float | None]:
        return estimate_smoothness(self), None


class MlpProblem:
    """One-hidden-layer tanh classifier; theta packs W1 (H x F+1) then W2 (C x H+1)."""

    kind = "mlp"

    def __init__(self, dataset: LabeledDataset, shards: list[np.ndarray],
                 n_classes: int, hidden: int, reg: float, theta0: Vector):
        self.dataset = dataset
        self.shards = shards
        self.n_devices = len(shards)
        self.n_classes = n_classes
        self.n_features = dataset.features.shape[1]
        self.hidden = hidden
        self.reg = float(reg)
        self.w1_shape = (hidden, self.n_features + 1)
        self.w2_shape = (n_classes, hidden + 1)
        w1_size = self.w1_shape[0] * self.w1_shape[1]
        self.dim = w1_size + self.w2_shape[0] * self.w2_shape[1]
        self.layer_blocks = [(0, self.w1_shape), (w1_size, self.w2_shape)]
        self.theta0 = np.asarray(theta0, dtype=np.float64)
        self.f_star = None
        self._xt = [_augment(dataset.features[idx]) for idx in shards]
        self._y = [dataset.labels[idx] for idx in shards]

    def initial_theta(self) -> Vector:
        return self.theta0.copy()

    def _unpack(self, theta: Vector):
        w1_size = self.w1_shape[0] * self.w1_shape[1]
        return theta[:w1_size].reshape(self.w1_shape), theta[w1_size:].reshape(self.w2_shape)

    def _loss_grad(self, m: int, theta: Vector, want_grad: bool):
        w1, w2 = self._unpack(theta)
        xt, y = self._xt[m], self._y[m]
        n = y.size
        a1 = np.tanh(xt @ w1.T)
        a1t = _augment(a1)
        logits = a1t @ w2.T
        logits -= logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(logits).sum(axis=1))
        loss = float((logz - logits[np.arange(n), y]).mean()
                     + 0.5 * self.reg * float(theta @ theta))
        if not want_grad:
            return loss, None
        p = np.exp(logits - logz[:, None])
        p[np.arange(n), y] -= 1.0
        p /= n
        g2 = p @ w2[:, :self.hidden]          # back through the output layer
        dz1 = g2 * (1.0 - a1 * a1)            # tanh derivative
        gw1 = dz1.T @ xt + self.reg * w1
        gw2 = p.T @ a1t + self.reg * w2
        return loss, np.concatenate([gw1.reshape(-1), gw2.reshape(-1)])

    def local_loss(self, m: int, theta: Vector) -> float:
        return self._loss_grad(m, theta, want_grad=False)[0]

    def local_gradient(self, m: int, theta: Vector) -> Vector:
        return self._loss_grad(m, theta, want_grad=True)[1]

    def smoothness_constants(self) -> tuple[float, float | None]:
        return estimate_smoothness(self), None


Problem = QuadraticProblem | LogisticProblem | MlpProblem


# ---------------------------------------------------------------------------
# module-level operation surface
# ---------------------------------------------------------------------------


def local_gradient(p: Problem, m: int, theta: Vector, mask: np.ndarray | None = None) -> Vector:
    """Full-batch local gradient; masked coordinates are invisible to the device."""
    if mask is None:
        return p.local_gradient(m, theta)
    view = np.where(mask, theta, 0.0)
    g = p.local_gradient(m, view)
    g[~mask] = 0.0
    return g


def local_loss(p: Problem, m: int, theta: Vector, mask: np.ndarray | None = None) -> float:
    if mask is None:
        return p.local_loss(m, theta)
    return p.local_loss(m, np.where(mask, theta, 0.0))


def global_loss(p: Problem, theta: Vector,
                masks: list[np.ndarray] | None = None) -> float:
    """Average of the device losses (the federated objective)."""
    if masks is None:
        vals = [p.local_loss(m, theta) for m in range(p.n_devices)]
    else:
        vals = [local_loss(p, m, theta, masks[m]) for m in range(p.n_devices)]
    return math.fsum(vals) / p.n_devices


def global_gradient(p: Problem, theta: Vector,
                    masks: list[np.ndarray] | None = None) -> Vector:
    acc = np.zeros(p.dim)
    for m in range(p.n_devices):
        acc += local_gradient(p, m, theta, None if masks is None else masks[m])
    return acc / p.n_devices


def smoothness_constants(p: Problem) -> tuple[float, float | None]:
    """(L, mu): certified from eigenvalues for quadratics, estimated elsewhere."""
    return p.smoothness_constants()


def estimate_smoothness(p: Problem, iters: int = 30, fd_eps: float = 1e-5) -> float:
    """Mean of per-device Hessian-norm estimates at theta0 (power iteration).

    Hessian-vector products come from central differences of the local
    gradient, so this works for any problem that exposes gradients.
    """
    theta = p.initial_theta()
    rng = np.random.default_rng(0)
    estimates = []
    for m in range(p.n_devices):
        u = rng.normal(size=p.dim)
        u /= np.linalg.norm(u)
        lam = 0.0
        for _ in range(iters):
            hu = (p.local_gradient(m, theta + fd_eps * u)
                  - p.local_gradient(m, theta - fd_eps * u)) / (2.0 * fd_eps)
            lam = float(np.linalg.norm(hu))
            if lam == 0.0:
                break
            u = hu / lam
        estimates.append(lam)
    return float(np.mean(estimates))


def reference_descent(p: Problem, alpha: float, steps: int) -> tuple[Vector, float]:
    """Plain full-gradient descent from theta0; returns (theta, final loss).

    Used to pin an operational minimum for problems without a closed form.
    """
    theta = p.initial_theta()
    for _ in range(steps):
        theta = theta - alpha * global_gradient(p, theta)
    return theta, global_loss(p, theta)


def hetero_mask(p: Problem, ratio: float) -> np.ndarray:
    """Boolean mask keeping the leading floor(r*w) x floor(r*h) block per layer."""
    if not 0.0 < ratio <= 1.0:
        raise DegenerateInput(f"ratio must be in (0, 1], got {ratio}")
    mask = np.zeros(p.dim, dtype=bool)
    for offset, shape in p.layer_blocks:
        block = np.zeros(shape, dtype=bool)
        if len(shape) == 1:
            block[: int(math.floor(ratio * shape[0]))] = True
        else:
            w, h = shape
            block[: int(math.floor(ratio * w)), : int(math.floor(ratio * h))] = True
        size = block.size
        mask[offset: offset + size] = block.reshape(-1)
    return mask


# ---------------------------------------------------------------------------
# factories
# ---------------------------------------------------------------------------


def make_quadratic(dim: int, cond: float, n_devices: int, seed: int,
                   scale_lo: float = 0.5, scale_hi: float = 1.5,
                   center_spread: float = 1.0) -> QuadraticProblem:
    """Diagonal quadratics with device curvatures spread over [scale_lo, scale_hi].

    The spectrum of the average Hessian spans roughly [mean_scale,
    mean_scale * cond]. Heterogeneous device scales make the low-curvature
    devices natural skip candidates.
    """
    if dim < 1 or n_devices < 1 or cond < 1.0:
        raise ConfigError(f"bad quadratic spec: dim={dim}, devices={n_devices}, cond={cond}")
    rng = np.random.default_rng(seed)
    base = np.linspace(1.0, cond, dim)
    scales = np.geomspace(scale_lo, scale_hi, n_devices)[:, None]
    hessians = base[None, :] * scales
    centers = rng.normal(0.0, center_spread, size=(n_devices, dim))
    theta0 = rng.normal(0.0, center_spread, size=dim)
    return QuadraticProblem(hessians, centers, theta0)


def make_logistic(n_features: int, n_classes: int, n_samples: int, n_devices: int,
                  part: PartitionSpec, reg: float, seed: int) -> LogisticProblem:
    data = make_blobs(n_samples, n_features, n_classes, seed)
    shards = partition(data, part, n_devices)
    rng = np.random.default_rng(seed + 1)
    theta0 = rng.normal(0.0, 0.01, size=n_classes * (n_features + 1))
    return LogisticProblem(data, shards, n_classes, reg, theta0)


def make_mlp(n_features: int, n_classes: int, n_samples: int, hidden: int,
             n_devices: int, part: PartitionSpec, reg: float, seed: int) -> MlpProblem:
    data = make_blobs(n_samples, n_features, n_classes, seed)
    shards = partition(data, part, n_devices)
    rng = np.random.default_rng(seed + 1)
    w1 = rng.normal(0.0, 1.0 / math.sqrt(n_features + 1), size=hidden * (n_features + 1))
    w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden + 1), size=n_classes * (hidden + 1))
    return MlpProblem(data, shards, n_classes, hidden, reg, np.concatenate([w1, w2]))

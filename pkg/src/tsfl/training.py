"""Local SGD on synthetic tasks with analytically known optima.

Two task families are provided. Quadratic tasks are the verification
workhorse: local optima, the global optimum, smoothness, and the non-IID
distances are all exact. Logistic tasks produce the accuracy-style separation
between aggregation strategies; their optima are obtained by long full-batch
descent and cached.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import ClientProfile, ensure_finite


@dataclass
class GradientSample:
    """A stochastic gradient together with its full-batch counterpart."""

    stochastic: np.ndarray
    full_batch: np.ndarray
    batch_indices: np.ndarray


def _random_spd(dimension: int, eig_range: tuple[float, float], rng) -> np.ndarray:
    """Random symmetric positive-definite matrix with eigenvalues in eig_range."""
    lo, hi = eig_range
    eigs = rng.uniform(lo, hi, size=dimension)
    if dimension == 1:
        return np.array([[eigs[0]]])
    q, _ = np.linalg.qr(rng.normal(size=(dimension, dimension)))
    return (q * eigs) @ q.T


class QuadraticTask:
    """Per-client quadratics ``F_i(w) = mean_s 0.5 (w - c_i - z_s)' A_i (w - c_i - z_s)``.

    The per-sample offsets ``z_s`` are centered, so the full-batch gradient is
    exactly ``A_i (w - c_i)`` and the local optimum is ``c_i``. Mini-batch
    gradients carry the batch-mean offset, which gives a controllable noise
    level with an exact expectation identity.
    """

    kind = "quadratic"

    def __init__(self, curvatures, centers, offsets):
        self.curvatures = [np.asarray(a, dtype=float) for a in curvatures]
        self.centers = [np.asarray(c, dtype=float) for c in centers]
        self.offsets = [np.asarray(z, dtype=float) for z in offsets]
        if not (len(self.curvatures) == len(self.centers) == len(self.offsets)):
            raise ValueError("per-client pieces must have equal length")
        for a in self.curvatures:
            eigs = np.linalg.eigvalsh(a)
            if np.any(eigs <= 0):
                raise ValueError("curvature matrices must be positive definite")

    @classmethod
    def generate(
        cls,
        n_clients: int,
        dimension: int,
        data_sizes,
        rng,
        noniid_spread: float = 0.0,
        sample_noise: float = 0.5,
        curvature_range: tuple[float, float] = (0.5, 1.0),
        shared_curvature: bool = False,
    ) -> "QuadraticTask":
        data_sizes = np.asarray(data_sizes, dtype=int)
        if len(data_sizes) != n_clients:
            raise ValueError("one data size per client required")
        shared = _random_spd(dimension, curvature_range, rng)
        curvatures, centers, offsets = [], [], []
        for i in range(n_clients):
            curvatures.append(shared.copy() if shared_curvature else _random_spd(dimension, curvature_range, rng))
            if noniid_spread > 0.0:
                direction = rng.normal(size=dimension)
                direction /= np.linalg.norm(direction)
                centers.append(noniid_spread * direction)
            else:
                centers.append(np.zeros(dimension))
            z = sample_noise * rng.normal(size=(data_sizes[i], dimension))
            z -= z.mean(axis=0)  # centered so the full batch is exact
            offsets.append(z)
        return cls(curvatures, centers, offsets)

    @property
    def n_clients(self) -> int:
        return len(self.centers)

    @property
    def dimension(self) -> int:
        return self.centers[0].shape[0]

    def data_size(self, client: int) -> int:
        return self.offsets[client].shape[0]

    @cached_property
    def smoothness(self) -> float:
        return max(float(np.linalg.eigvalsh(a).max()) for a in self.curvatures)

    @cached_property
    def w_star(self) -> np.ndarray:
        total = sum(self.curvatures)
        rhs = sum(a @ c for a, c in zip(self.curvatures, self.centers))
        return np.linalg.solve(total, rhs)

    def local_optimum(self, client: int) -> np.ndarray:
        return self.centers[client].copy()

    @cached_property
    def gamma_noniid(self) -> np.ndarray:
        return np.array(
            [float(np.sum((self.w_star - c) ** 2)) for c in self.centers]
        )

    @cached_property
    def f_star(self) -> float:
        return self.global_loss(self.w_star)

    def local_loss(self, client: int, w: np.ndarray) -> float:
        a = self.curvatures[client]
        diffs = w - self.centers[client] - self.offsets[client]
        return float(0.5 * np.einsum("sd,de,se->", diffs, a, diffs) / diffs.shape[0])

    def local_grad(self, client: int, w: np.ndarray) -> np.ndarray:
        return self.curvatures[client] @ (w - self.centers[client])

    def sample_grad(self, client: int, w: np.ndarray, indices: np.ndarray) -> np.ndarray:
        mean_offset = self.offsets[client][indices].mean(axis=0)
        return self.curvatures[client] @ (w - self.centers[client] - mean_offset)

    def global_loss(self, w: np.ndarray) -> float:
        return float(np.mean([self.local_loss(i, w) for i in range(self.n_clients)]))

    def global_grad(self, w: np.ndarray) -> np.ndarray:
        grads = [self.local_grad(i, w) for i in range(self.n_clients)]
        return np.mean(grads, axis=0)


class LogisticTask:
    """Binary L2-regularized logistic regression on client-specific clusters.

    Client data are two Gaussian clusters at ``+/- separation * b`` shifted by
    a per-client offset whose magnitude controls the non-IID degree. The model
    carries an intercept, so the parameter dimension is feature_dim + 1.
    """

    kind = "logistic"

    def __init__(self, features, labels, l2_reg: float = 0.05):
        self.features = [np.asarray(x, dtype=float) for x in features]
        self.labels = [np.asarray(y, dtype=float) for y in labels]
        self.l2_reg = float(l2_reg)
        if l2_reg <= 0:
            raise ValueError("l2_reg must be positive so optima are unique")
        feature_dim = self.features[0].shape[1]
        self._design = [
            np.hstack([x, np.ones((x.shape[0], 1))]) for x in self.features
        ]
        self._dim = feature_dim + 1

    @classmethod
    def generate(
        cls,
        n_clients: int,
        dimension: int,
        data_sizes,
        rng,
        noniid_spread: float = 0.0,
        separation: float = 1.5,
        sample_noise: float = 1.0,
        l2_reg: float = 0.05,
    ) -> "LogisticTask":
        # ``dimension`` is the model dimension; feature space is one less.
        feature_dim = dimension - 1
        if feature_dim < 1:
            raise ValueError("logistic tasks need model dimension >= 2")
        data_sizes = np.asarray(data_sizes, dtype=int)
        base = rng.normal(size=feature_dim)
        base /= np.linalg.norm(base)
        features, labels = [], []
        for i in range(n_clients):
            n = int(data_sizes[i])
            y = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
            shift = np.zeros(feature_dim)
            if noniid_spread > 0.0:
                shift = rng.normal(size=feature_dim)
                shift *= noniid_spread / np.linalg.norm(shift)
            x = y[:, None] * separation * base + shift + sample_noise * rng.normal(size=(n, feature_dim))
            features.append(x)
            labels.append(y)
        return cls(features, labels, l2_reg=l2_reg)

    @property
    def n_clients(self) -> int:
        return len(self.labels)

    @property
    def dimension(self) -> int:
        return self._dim

    def data_size(self, client: int) -> int:
        return self.labels[client].shape[0]

    def _margins(self, client: int, w: np.ndarray, indices=None) -> tuple[np.ndarray, np.ndarray]:
        x = self._design[client]
        y = self.labels[client]
        if indices is not None:
            x = x[indices]
            y = y[indices]
        return y, y * (x @ w)

    def local_loss(self, client: int, w: np.ndarray) -> float:
        _, m = self._margins(client, w)
        return float(np.mean(np.logaddexp(0.0, -m)) + 0.5 * self.l2_reg * np.dot(w, w))

    def _grad_on(self, client: int, w: np.ndarray, indices=None) -> np.ndarray:
        x = self._design[client]
        y = self.labels[client]
        if indices is not None:
            x = x[indices]
            y = y[indices]
        m = y * (x @ w)
        coef = -y / (1.0 + np.exp(m))
        return x.T @ coef / x.shape[0] + self.l2_reg * w

    def local_grad(self, client: int, w: np.ndarray) -> np.ndarray:
        return self._grad_on(client, w)

    def sample_grad(self, client: int, w: np.ndarray, indices: np.ndarray) -> np.ndarray:
        return self._grad_on(client, w, indices)

    def global_loss(self, w: np.ndarray) -> float:
        return float(np.mean([self.local_loss(i, w) for i in range(self.n_clients)]))

    def global_grad(self, w: np.ndarray) -> np.ndarray:
        return np.mean([self.local_grad(i, w) for i in range(self.n_clients)], axis=0)

    def _descend(self, grad_fn, start: np.ndarray, tol: float = 1e-12, max_iter: int = 200_000) -> np.ndarray:
        # Full-batch descent with a step safely below 1/L for these losses.
        step = 1.0 / (0.25 * self._design_norm + self.l2_reg)
        w = start.copy()
        for _ in range(max_iter):
            g = grad_fn(w)
            w = w - step * g
            if np.dot(g, g) < tol**2:
                break
        return w

    @cached_property
    def _design_norm(self) -> float:
        return max(
            float(np.linalg.eigvalsh(x.T @ x / x.shape[0]).max()) for x in self._design
        )

    @cached_property
    def smoothness(self) -> float:
        # Exact upper bound: sigmoid curvature is at most 1/4.
        return 0.25 * self._design_norm + self.l2_reg

    @cached_property
    def w_star(self) -> np.ndarray:
        return self._descend(self.global_grad, np.zeros(self.dimension))

    def local_optimum(self, client: int) -> np.ndarray:
        return self._descend(lambda w: self.local_grad(client, w), np.zeros(self.dimension))

    @cached_property
    def gamma_noniid(self) -> np.ndarray:
        star = self.w_star
        return np.array(
            [float(np.sum((star - self.local_optimum(i)) ** 2)) for i in range(self.n_clients)]
        )

    @cached_property
    def f_star(self) -> float:
        return self.global_loss(self.w_star)


def stochastic_gradient(task, client: int, w: np.ndarray, batch_size: int, rng) -> GradientSample:
    """Draw one mini-batch gradient along with the full-batch gradient.

    The batch is sampled uniformly without replacement. Raises on a dimension
    mismatch between the model and the task.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (task.dimension,):
        raise ValueError(
            f"model dimension {w.shape} does not match task dimension ({task.dimension},)"
        )
    n = task.data_size(client)
    if batch_size > n:
        raise ValueError("batch_size exceeds the client's data size")
    indices = rng.choice(n, size=batch_size, replace=False)
    return GradientSample(
        stochastic=task.sample_grad(client, w, indices),
        full_batch=task.local_grad(client, w),
        batch_indices=indices,
    )


def local_train(
    task,
    client: int,
    w_start: np.ndarray,
    tau: int,
    eta: float,
    rng=None,
    batch_size: int | None = None,
    prox_center: np.ndarray | None = None,
    mu: float = 0.0,
) -> np.ndarray:
    """Run exactly ``tau`` SGD steps from ``w_start`` and return the result.

    ``batch_size=None`` uses full-batch gradients. A non-zero ``mu`` with a
    ``prox_center`` adds the proximal pull mu*(w - center) to every step.
    tau=0 returns the start point unchanged.
    """
    if tau < 0:
        raise ValueError("tau must be non-negative")
    w = ensure_finite(w_start, "local_train start").copy()
    if w.shape != (task.dimension,):
        raise ValueError("model dimension does not match the task")
    use_prox = mu > 0.0 and prox_center is not None
    for _ in range(tau):
        if batch_size is None:
            g = task.local_grad(client, w)
        else:
            g = stochastic_gradient(task, client, w, batch_size, rng).stochastic
        if use_prox:
            g = g + mu * (w - prox_center)
        w -= eta * g
    return ensure_finite(w, "local_train result")


@dataclass
class EstimatedConstants:
    """Empirical stand-ins for the analysis constants, with exact parts where available."""

    L_hat: float
    G_hat: float
    sigma_hat: np.ndarray
    gamma_hat: np.ndarray
    source: dict


def estimate_constants(task, clients: list[ClientProfile], probe_count: int, rng) -> EstimatedConstants:
    """Probe the task to estimate the smoothness, gradient, and noise bounds.

    The gradient bound is the largest stochastic-gradient norm seen across
    probe points; the per-client noise bound is the largest observed deviation
    from the full-batch gradient. Smoothness and optimum distances are exact
    for quadratic tasks and probed or descended-to otherwise.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    d = task.dimension
    probes = [rng.normal(size=d) for _ in range(probe_count)]
    g_max = 0.0
    sigma_hat = np.zeros(task.n_clients)
    for w in probes:
        for i in range(task.n_clients):
            sample = stochastic_gradient(task, i, w, clients[i].batch_size, rng)
            g_max = max(g_max, float(np.linalg.norm(sample.stochastic)))
            deviation = float(np.linalg.norm(sample.stochastic - sample.full_batch))
            sigma_hat[i] = max(sigma_hat[i], deviation)
    source = {"G": "probed", "sigma": "probed"}

    if task.kind == "quadratic":
        l_hat = task.smoothness
        gamma_hat = task.gamma_noniid.copy()
        source["L"] = "exact"
        source["Gamma"] = "exact"
    else:
        l_hat = 0.0
        for w, v in zip(probes, probes[1:] + probes[:1]):
            gap = float(np.linalg.norm(w - v))
            if gap < 1e-12:
                continue
            for i in range(task.n_clients):
                ratio = float(np.linalg.norm(task.local_grad(i, w) - task.local_grad(i, v))) / gap
                l_hat = max(l_hat, ratio)
        gamma_hat = task.gamma_noniid.copy()
        source["L"] = "probed"
        source["Gamma"] = "descended"
    return EstimatedConstants(
        L_hat=float(l_hat), G_hat=float(g_max), sigma_hat=sigma_hat, gamma_hat=gamma_hat, source=source
    )

"""Desk-scale federated learning tasks with exact gradients and measurable constants.

Two regularised convex problems on synthetic Gaussian data:

* ``linear``: ridge regression, ``f(theta; x, y) = (x^T theta - y)^2 / 2``
* ``logistic``: multinomial logistic regression over ``n_classes`` classes

Both add ``reg / 2 ||theta||^2`` to every sample loss, so the global loss is
``reg``-strongly convex and smooth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax

__all__ = ["FederatedTask", "TaskConstants", "make_synthetic_task"]

SKEW_CLASSES = 4


@dataclass(frozen=True)
class TaskConstants:
    smoothness: float
    strong_convexity: float
    chi1: float
    chi2: float


class FederatedTask:
    """Per-device datasets plus loss and gradient oracles.

    Parameters are flat real vectors; for the logistic task they are the
    row-major ``(n_features, n_classes)`` weight matrix.
    """

    def __init__(self, kind, X, y, X_test, y_test, reg, n_classes=0):
        if kind not in ("linear", "logistic"):
            raise ValueError(f"unknown task kind {kind!r}")
        if any(len(x) == 0 for x in X):
            raise ValueError("every device needs at least one sample")
        self.kind = kind
        self.X = X
        self.y = y
        self.X_test = X_test
        self.y_test = y_test
        self.reg = float(reg)
        self.n_classes = n_classes
        counts = np.array([len(x) for x in X], dtype=float)
        self.weights = counts / counts.sum()
        self.n_features = X[0].shape[1]
        self._opt = None

    @property
    def n_devices(self) -> int:
        return len(self.X)

    @property
    def dim(self) -> int:
        return self.n_features * (self.n_classes if self.kind == "logistic" else 1)

    # -- per-sample pieces --------------------------------------------------

    def _sample_terms(self, theta, X, y):
        """Per-sample data losses and the residual used by the gradients."""
        if self.kind == "linear":
            resid = X @ theta - y
            return 0.5 * resid ** 2, resid
        W = theta.reshape(self.n_features, self.n_classes)
        logits = X @ W
        logp = log_softmax(logits, axis=1)
        rows = np.arange(len(y))
        resid = np.exp(logp)
        resid[rows, y] -= 1.0
        return -logp[rows, y], resid

    def _grad_from_resid(self, X, resid):
        if self.kind == "linear":
            return X.T @ resid / len(X)
        return (X.T @ resid).ravel() / len(X)

    # -- device and global oracles -----------------------------------------

    def device_loss(self, m: int, theta) -> float:
        losses, _ = self._sample_terms(theta, self.X[m], self.y[m])
        return float(np.mean(losses) + 0.5 * self.reg * theta @ theta)

    def device_grad(self, m: int, theta, batch=None) -> np.ndarray:
        X, y = self.X[m], self.y[m]
        if batch is not None:
            X, y = X[batch], y[batch]
        _, resid = self._sample_terms(theta, X, y)
        return self._grad_from_resid(X, resid) + self.reg * theta

    def sample_grads(self, m: int, theta) -> np.ndarray:
        """Every per-sample gradient of device ``m``, shape ``(Q_m, D)``."""
        X, y = self.X[m], self.y[m]
        _, resid = self._sample_terms(theta, X, y)
        if self.kind == "linear":
            per = X * resid[:, None]
        else:
            per = (X[:, :, None] * resid[:, None, :]).reshape(len(X), -1)
        return per + self.reg * theta

    def loss(self, theta) -> float:
        return float(sum(q * self.device_loss(m, theta) for m, q in enumerate(self.weights)))

    def grad(self, theta) -> np.ndarray:
        return sum(q * self.device_grad(m, theta) for m, q in enumerate(self.weights))

    def accuracy(self, theta) -> float:
        """Test accuracy for classification; ``nan`` for regression."""
        if self.kind == "linear":
            return float("nan")
        W = theta.reshape(self.n_features, self.n_classes)
        return float(np.mean(np.argmax(self.X_test @ W, axis=1) == self.y_test))

    def test_loss(self, theta) -> float:
        losses, _ = self._sample_terms(theta, self.X_test, self.y_test)
        return float(np.mean(losses) + 0.5 * self.reg * theta @ theta)

    # -- optimum and constants ---------------------------------------------

    def _gram(self):
        return sum(q * (X.T @ X) / len(X) for q, X in zip(self.weights, self.X))

    def optimum(self):
        """``(theta_star, F_star)``, cached."""
        if self._opt is None:
            if self.kind == "linear":
                rhs = sum(q * X.T @ y / len(X) for q, X, y in zip(self.weights, self.X, self.y))
                theta = np.linalg.solve(self._gram() + self.reg * np.eye(self.dim), rhs)
            else:
                res = minimize(lambda t: (self.loss(t), self.grad(t)), np.zeros(self.dim),
                               jac=True, method="L-BFGS-B",
                               options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 5000})
                theta = res.x
            self._opt = (theta, self.loss(theta))
        return self._opt

    def curvature(self):
        """``(omega, mu)``: Lipschitz constant of the gradient and strong convexity.

        Exact for the linear task.  For the logistic task the softmax
        Hessian is bounded by ``1/2`` in the logit space, giving
        ``omega = lambda_max(Gram) / 2 + reg`` and ``mu = reg``.
        """
        eig = np.linalg.eigvalsh(self._gram())
        if self.kind == "linear":
            return float(eig[-1] + self.reg), float(eig[0] + self.reg)
        return float(0.5 * eig[-1] + self.reg), self.reg

    def gradient_bound_constants(self, seed=0, n_points: int = 40, level: str = "device"):
        """Fit ``max ||g||^2 <= chi1 + chi2 ||grad F||^2`` over probe points.

        ``level="device"`` bounds the full-batch device gradients that are
        actually transmitted; ``level="sample"`` bounds every per-sample
        gradient.  Probe points lie on the ray from ``0`` through
        ``theta_star`` (the region a run started at zero visits) plus random
        directions at matching radii.  ``chi2`` is the least-squares slope
        and ``chi1`` the smallest offset that makes the envelope hold at
        every probe.
        """
        if level not in ("device", "sample"):
            raise ValueError(f"unknown level {level!r}")
        theta_star, _ = self.optimum()
        rng = np.random.default_rng(seed)
        radius = max(np.linalg.norm(theta_star), 1.0)
        probes = [theta_star * a for a in np.linspace(0.0, 1.5, n_points // 2)]
        for _ in range(n_points - len(probes)):
            d = rng.standard_normal(self.dim)
            probes.append(theta_star + rng.uniform(0, 1.5) * radius * d / np.linalg.norm(d))
        xs, ys = [], []
        for theta in probes:
            xs.append(float(np.sum(self.grad(theta) ** 2)))
            if level == "device":
                worst = max(float(np.sum(self.device_grad(m, theta) ** 2)) for m in range(self.n_devices))
            else:
                worst = max(float(np.max(np.sum(self.sample_grads(m, theta) ** 2, axis=1)))
                            for m in range(self.n_devices))
            ys.append(worst)
        xs, ys = np.array(xs), np.array(ys)
        slope = float(np.polyfit(xs, ys, 1)[0]) if np.ptp(xs) > 0 else 0.0
        chi2 = max(slope, 0.0)
        chi1 = max(float(np.max(ys - chi2 * xs)), 0.0)
        return chi1, chi2

    def constants(self, seed=0, level: str = "device") -> TaskConstants:
        omega, mu = self.curvature()
        chi1, chi2 = self.gradient_bound_constants(seed, level=level)
        return TaskConstants(smoothness=omega, strong_convexity=mu, chi1=chi1, chi2=chi2)


def make_synthetic_task(seed, kind: str = "logistic", n_devices: int = 20,
                        samples_per_device=300, n_features: int = 20, n_classes: int = 10,
                        heterogeneity: str = "iid", reg: float = 1e-2, test_samples: int = 2000,
                        noise_std: float = 0.5, class_sep: float = 3.0) -> FederatedTask:
    """Draw per-device Gaussian-feature datasets.

    ``samples_per_device`` is an integer or one count per device.  In
    ``label-skew`` mode (logistic only) each device draws its samples from
    4 classes picked at random.
    """
    if heterogeneity not in ("iid", "label-skew"):
        raise ValueError(f"unknown heterogeneity mode {heterogeneity!r}")
    if kind == "linear" and heterogeneity != "iid":
        raise ValueError("label-skew needs class labels; use kind='logistic'")
    counts = np.broadcast_to(np.asarray(samples_per_device, dtype=int), (n_devices,))
    if np.any(counts < 1):
        raise ValueError("every device needs at least one sample")
    if n_features < 1:
        raise ValueError("need at least one feature")
    rng = np.random.default_rng(seed)
    if kind == "linear":
        theta_true = rng.standard_normal(n_features)

        def draw(n, _rng):
            X = _rng.standard_normal((n, n_features))
            return X, X @ theta_true + noise_std * _rng.standard_normal(n)

        X, y = zip(*(draw(int(n), rng) for n in counts))
        X_test, y_test = draw(test_samples, rng)
        return FederatedTask("linear", list(X), list(y), X_test, y_test, reg)

    if n_classes < SKEW_CLASSES and heterogeneity == "label-skew":
        raise ValueError(f"label-skew picks {SKEW_CLASSES} classes; need n_classes >= {SKEW_CLASSES}")
    means = class_sep * rng.standard_normal((n_classes, n_features)) / np.sqrt(n_features)

    def draw(n, classes, _rng):
        labels = _rng.choice(classes, size=n)
        X = means[labels] + _rng.standard_normal((n, n_features))
        return X, labels

    X, y = [], []
    for n in counts:
        classes = (np.arange(n_classes) if heterogeneity == "iid"
                   else rng.choice(n_classes, size=SKEW_CLASSES, replace=False))
        Xm, ym = draw(int(n), classes, rng)
        X.append(Xm)
        y.append(ym)
    X_test, y_test = draw(test_samples, np.arange(n_classes), rng)
    return FederatedTask("logistic", X, y, X_test, y_test, reg, n_classes=n_classes)

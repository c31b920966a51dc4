"""Split models: per-client representation maps with exact manual derivatives,
server-side fusion models, and an analytically tractable quadratic testbed.

Everything is 64-bit and pure numpy; gradients are hand-derived and checked
against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ModelShapeError(ValueError):
    pass


class LabelUnavailable(RuntimeError):
    pass


def sigmoid(z):
    # numerically stable on both tails
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# representation maps h_k: client parameters x_k -> per-sample rows of H_k
# ---------------------------------------------------------------------------


class SigmoidLayer:
    """v -> sigmoid(W v) applied per sample; x_k is W flattened (C order)."""

    def __init__(self, features: np.ndarray, out_dim: int):
        self.features = np.asarray(features, dtype=np.float64)  # N x in_dim
        self.in_dim = self.features.shape[1]
        self.out_dim = out_dim
        self.param_dim = out_dim * self.in_dim

    def _weights(self, x_k: np.ndarray) -> np.ndarray:
        if x_k.shape != (self.param_dim,):
            raise ModelShapeError(f"expected x_k of length {self.param_dim}, got {x_k.shape}")
        return x_k.reshape(self.out_dim, self.in_dim)

    def forward(self, x_k: np.ndarray, rows: np.ndarray) -> np.ndarray:
        W = self._weights(x_k)
        return sigmoid(self.features[rows] @ W.T)

    def vjp(self, x_k: np.ndarray, upstream: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """Chain an upstream |B| x E matrix through the layer, returning d/dx_k."""
        W = self._weights(x_k)
        X = self.features[rows]
        if upstream.shape != (X.shape[0], self.out_dim):
            raise ModelShapeError(f"upstream shape {upstream.shape} misaligned with batch")
        s = sigmoid(X @ W.T)
        return ((upstream * s * (1.0 - s)).T @ X).reshape(-1)


class LinearPerSample:
    """Per-sample linear maps: row n of H_k is B_kn @ x_k (quadratic testbed)."""

    def __init__(self, mats: np.ndarray):
        self.mats = np.asarray(mats, dtype=np.float64)  # N x E x d_k
        self.out_dim = self.mats.shape[1]
        self.param_dim = self.mats.shape[2]

    def forward(self, x_k: np.ndarray, rows: np.ndarray) -> np.ndarray:
        if x_k.shape != (self.param_dim,):
            raise ModelShapeError(f"expected x_k of length {self.param_dim}, got {x_k.shape}")
        return self.mats[rows] @ x_k

    def vjp(self, x_k: np.ndarray, upstream: np.ndarray, rows: np.ndarray) -> np.ndarray:
        sub = self.mats[rows]
        if upstream.shape != (sub.shape[0], self.out_dim):
            raise ModelShapeError(f"upstream shape {upstream.shape} misaligned with batch")
        return np.einsum("nij,ni->j", sub, upstream)

    def map_derivative_bound(self) -> float:
        """Operator norm of the stacked Jacobian d(stack_n B_kn x)/dx."""
        gram = np.einsum("nij,nik->jk", self.mats, self.mats)
        return float(np.sqrt(max(np.linalg.eigvalsh(gram)[-1], 0.0)))

    def sample_derivative_bound(self) -> float:
        """Largest per-sample operator norm max_n ||B_kn||."""
        return float(max(np.linalg.norm(self.mats[n], 2) for n in range(self.mats.shape[0])))


# ---------------------------------------------------------------------------
# fusion models Phi: (x_0, client representations) -> scalar batch loss
# ---------------------------------------------------------------------------


class SumLinearSoftmaxCE:
    """logits = W2 @ (sum_k v_k); mean softmax cross-entropy; x_0 is W2 flat."""

    def __init__(self, labels: np.ndarray, n_classes: int, rep_dim: int):
        self.labels = None if labels is None else np.asarray(labels)
        self.n_classes = n_classes
        self.rep_dim = rep_dim
        self.param_dim = n_classes * rep_dim

    def _weights(self, x_0):
        if x_0.shape != (self.param_dim,):
            raise ModelShapeError(f"expected x_0 of length {self.param_dim}, got {x_0.shape}")
        return x_0.reshape(self.n_classes, self.rep_dim)

    def _logits(self, x_0, reps):
        return sum(reps) @ self._weights(x_0).T

    def loss(self, x_0, reps, rows):
        if self.labels is None:
            raise LabelUnavailable("fusion loss needs labels")
        Z = self._logits(x_0, reps)
        y = self.labels[rows]
        zmax = Z.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(Z - zmax).sum(axis=1))
        return float(np.mean(lse - Z[np.arange(len(y)), y]))

    def partials(self, x_0, reps, rows):
        """Returns (dloss/dx_0, dloss/dv) with dloss/dv shared by every client."""
        if self.labels is None:
            raise LabelUnavailable("fusion partials need labels")
        W2 = self._weights(x_0)
        S = sum(reps)
        Z = S @ W2.T
        y = self.labels[rows]
        zmax = Z.max(axis=1, keepdims=True)
        P = np.exp(Z - zmax)
        P /= P.sum(axis=1, keepdims=True)
        P[np.arange(len(y)), y] -= 1.0
        P /= len(y)
        g0 = (P.T @ S).reshape(-1)
        gv = P @ W2  # same for each v_k since they enter through the sum
        return g0, [gv for _ in reps]

    def predict(self, x_0, reps):
        return np.argmax(self._logits(x_0, reps), axis=1)


class QuadraticLS:
    """phi_n = ||x_0 + sum_k v_kn - y_n||^2 / 2, batch-averaged."""

    def __init__(self, targets: np.ndarray):
        self.targets = np.asarray(targets, dtype=np.float64)  # N x p
        self.rep_dim = self.targets.shape[1]
        self.param_dim = self.rep_dim

    def _residual(self, x_0, reps, rows):
        if x_0.shape != (self.param_dim,):
            raise ModelShapeError(f"expected x_0 of length {self.param_dim}, got {x_0.shape}")
        return x_0 + sum(reps) - self.targets[rows]

    def loss(self, x_0, reps, rows):
        R = self._residual(x_0, reps, rows)
        return float(np.sum(R * R) / (2 * R.shape[0]))

    def partials(self, x_0, reps, rows):
        R = self._residual(x_0, reps, rows)
        gv = R / R.shape[0]
        return gv.sum(axis=0), [gv for _ in reps]


# ---------------------------------------------------------------------------
# the assembled split model
# ---------------------------------------------------------------------------


@dataclass
class SplitModel:
    """K client maps plus a fusion model; parameter blocks x_0 .. x_K."""

    fusion: object
    maps: list  # one representation map per client
    n_samples: int

    @property
    def n_clients(self) -> int:
        return len(self.maps)

    def block_dims(self) -> list[int]:
        return [self.fusion.param_dim] + [m.param_dim for m in self.maps]

    def init_state(self, rng: np.random.Generator) -> list[np.ndarray]:
        """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] per block, seeded."""
        blocks = []
        fan0 = getattr(self.fusion, "rep_dim", self.fusion.param_dim)
        bound = 1.0 / np.sqrt(max(fan0, 1))
        blocks.append(rng.uniform(-bound, bound, size=self.fusion.param_dim))
        for m in self.maps:
            fan = getattr(m, "in_dim", m.param_dim)
            bound = 1.0 / np.sqrt(max(fan, 1))
            blocks.append(rng.uniform(-bound, bound, size=m.param_dim))
        return blocks

    def representations(self, blocks, rows):
        return [m.forward(blocks[k + 1], rows) for k, m in enumerate(self.maps)]

    def loss(self, blocks, rows):
        return self.fusion.loss(blocks[0], self.representations(blocks, rows), rows)

    def gradient(self, blocks, rows):
        """Exact gradient of the batch loss at `blocks` (no surrogates)."""
        reps = self.representations(blocks, rows)
        g0, gvs = self.fusion.partials(blocks[0], reps, rows)
        grads = [g0]
        for k, m in enumerate(self.maps):
            grads.append(m.vjp(blocks[k + 1], gvs[k], rows))
        return grads

    def flat(self, blocks) -> np.ndarray:
        return np.concatenate([b.ravel() for b in blocks])


def grad_norm_sq(grads) -> float:
    return float(sum(np.sum(g * g) for g in grads))


# ---------------------------------------------------------------------------
# quadratic testbed constants
# ---------------------------------------------------------------------------


def quadratic_hessian(model: SplitModel) -> np.ndarray:
    """Hessian of f for the QuadraticLS testbed: (1/N) sum_n A_n^T A_n."""
    if not isinstance(model.fusion, QuadraticLS):
        raise ModelShapeError("hessian only defined for the quadratic testbed")
    p = model.fusion.rep_dim
    dims = model.block_dims()
    D = sum(dims)
    N = model.n_samples
    hess = np.zeros((D, D))
    for n in range(N):
        A = np.zeros((p, D))
        A[:, :p] = np.eye(p)
        off = p
        for m in model.maps:
            A[:, off:off + m.param_dim] = m.mats[n]
            off += m.param_dim
        hess += A.T @ A
    return hess / N


def quadratic_constants(model: SplitModel) -> dict:
    """Smoothness L, derivative bound H, and PL constant mu of the testbed.

    L is the largest Hessian eigenvalue of the induced least-squares problem
    and mu its smallest nonzero eigenvalue.  H bounds the derivative of every
    block map: for the client maps that is the operator norm of the stacked
    Jacobian of x_k -> (B_k1 x_k, ..., B_kN x_k) -- the constant the recursive
    distortion bound actually needs (a per-sample bound is too small by up to
    a factor sqrt(N): with B_kn = I for all n the stacked map stretches by
    sqrt(N) while every per-sample norm is 1) -- and for the uncompressed
    server block it is 1, hence the clamp.  The looser per-sample maximum is
    reported separately as a diagnostic.
    """
    hess = quadratic_hessian(model)
    evals = np.linalg.eigvalsh(hess)
    L = float(evals[-1])
    tol = max(evals[-1], 1.0) * 1e-12
    positive = evals[evals > tol]
    mu = float(positive[0]) if positive.size else 0.0
    h_maps = [m.map_derivative_bound() for m in model.maps]
    h_samples = [m.sample_derivative_bound() for m in model.maps]
    return {
        "L": L,
        "H": max(1.0, max(h_maps)),
        "mu": mu,
        "H_per_map": h_maps,
        "H_per_sample": max(h_samples),
        "K": model.n_clients,
    }


def quadratic_fstar(model: SplitModel) -> float:
    """Closed-form least-squares optimum of the full objective."""
    p = model.fusion.rep_dim
    N = model.n_samples
    D = sum(model.block_dims())
    A = np.zeros((N * p, D))
    for n in range(N):
        A[n * p:(n + 1) * p, :p] = np.eye(p)
        off = p
        for m in model.maps:
            A[n * p:(n + 1) * p, off:off + m.param_dim] = m.mats[n]
            off += m.param_dim
    b = model.fusion.targets.reshape(-1)
    z, *_ = np.linalg.lstsq(A, b, rcond=None)
    r = A @ z - b
    return float(r @ r / (2 * N))

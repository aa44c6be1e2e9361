"""SGD and SAM over trainable probe parameters, plus the geometric
stability probe for the expected inner product between the population
gradient and the perturbed mini-batch gradient."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.05
    learning_rate: float = 1e-3
    batch_size: int = 20
    steps: int = 400
    seed: int = 0

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class StepRecord:
    step: int
    loss: float
    grad_norm: float
    pop_grad_norm: float | None = None
    inner_product: float | None = None
    rho: float = 0.0
    failed: bool = False


def records_to_csv(records: list[StepRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "grad_norm", "pop_grad_norm", "inner_product", "rho"])
        for r in records:
            w.writerow([r.step, repr(r.loss), repr(r.grad_norm),
                        "" if r.pop_grad_norm is None else repr(r.pop_grad_norm),
                        "" if r.inner_product is None else repr(r.inner_product),
                        repr(r.rho)])


# ---------------------------------------------------------------------------
# problems
# ---------------------------------------------------------------------------

class LogisticProbeProblem:
    """Binary cross-entropy of a linear head over fixed features.

    Mini-batch gradients run through the autodiff engine (the same path a
    generic differentiable program would take); per-sample gradients and
    the dense Hessian also have closed forms used by the exact-mode
    diagnostics and cross-checked against the engine in tests.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.n_samples, self.feature_dim = self.features.shape
        self.dim = self.feature_dim + 1  # weight + bias

    def init_params(self) -> np.ndarray:
        return np.zeros(self.dim)

    def _graph(self, views, data):
        F, y = data
        z = ad.add(ad.matmul(F, ad.reshape(views["w"], (self.feature_dim, 1))),
                   views["b"])
        return ad.bce_with_logits(z, y.reshape(-1, 1))

    def _pv(self, w: np.ndarray) -> ad.ParamVector:
        pv = ad.ParamVector({"w": w[:-1], "b": np.asarray(w[-1])})
        return pv

    def loss_and_grad(self, w: np.ndarray, indices=None) -> tuple[float, np.ndarray]:
        idx = slice(None) if indices is None else np.asarray(indices)
        data = (self.features[idx], self.labels[idx])
        return ad.loss_and_gradient(self._graph, self._pv(w), data)

    def hvp(self, w: np.ndarray, v: np.ndarray, indices=None) -> np.ndarray:
        idx = slice(None) if indices is None else np.asarray(indices)
        data = (self.features[idx], self.labels[idx])
        return ad.hvp(self._graph, self._pv(w), data, v)

    # closed forms (exact-mode diagnostics)

    def _sigmoid(self, w: np.ndarray) -> np.ndarray:
        z = self.features @ w[:-1] + w[-1]
        return 0.5 * (1.0 + np.tanh(0.5 * z))

    def per_sample_grads(self, w: np.ndarray) -> np.ndarray:
        resid = (self._sigmoid(w) - self.labels)[:, None]
        aug = np.concatenate([self.features, np.ones((self.n_samples, 1))], axis=1)
        return resid * aug

    def dense_hessian(self, w: np.ndarray) -> np.ndarray:
        p = self._sigmoid(w)
        s = p * (1.0 - p)
        aug = np.concatenate([self.features, np.ones((self.n_samples, 1))], axis=1)
        return (aug * s[:, None]).T @ aug / self.n_samples

    def logits(self, w: np.ndarray, features=None) -> np.ndarray:
        F = self.features if features is None else np.asarray(features)
        return F @ w[:-1] + w[-1]


class QuadraticProblem:
    """Per-sample losses 0.5 (w - a_i)^T A (w - a_i) with known spectrum.

    Mean loss and gradient over a batch reduce to the batch-mean offset and
    the per-sample quadratic forms a_i^T A a_i, both precomputed, so a step
    costs O(P^2) regardless of batch size.
    """

    def __init__(self, A: np.ndarray, offsets: np.ndarray):
        self.A = np.asarray(A, dtype=np.float64)
        self.offsets = np.asarray(offsets, dtype=np.float64)  # (M, P)
        self.n_samples, self.dim = self.offsets.shape
        self._Aa = self.offsets @ self.A.T                    # (M, P)
        self._quad = np.einsum("mi,mi->m", self.offsets, self._Aa)

    def init_params(self) -> np.ndarray:
        return np.zeros(self.dim)

    def loss_and_grad(self, w, indices=None):
        idx = slice(None) if indices is None else np.asarray(indices)
        Aa_mean = self._Aa[idx].mean(axis=0)
        quad_mean = self._quad[idx].mean()
        Aw = self.A @ w
        loss = 0.5 * (w @ Aw - 2.0 * (w @ Aa_mean) + quad_mean)
        grad = Aw - Aa_mean
        return float(loss), grad

    def per_sample_grads(self, w):
        return self.A @ w - self._Aa

    def dense_hessian(self, w):
        return self.A.copy()

    def hvp(self, w, v, indices=None):
        return self.A @ v


# ---------------------------------------------------------------------------
# steps and runs
# ---------------------------------------------------------------------------

def sgd_step(problem, w: np.ndarray, batch_idx, lr: float) -> tuple[np.ndarray, StepRecord]:
    loss, g = problem.loss_and_grad(w, batch_idx)
    rec = StepRecord(step=-1, loss=loss, grad_norm=float(np.linalg.norm(g)), rho=0.0)
    if not (np.isfinite(loss) and np.all(np.isfinite(g))):
        rec.failed = True
        return w, rec
    return w - lr * g, rec


def sam_step(problem, w: np.ndarray, batch_idx, lr: float,
             rho: float) -> tuple[np.ndarray, StepRecord]:
    """Two-pass SAM: normalized ascent to w + eps, descent with the
    perturbed gradient of the same batch.  Zero batch gradient means zero
    perturbation, so the step degenerates to SGD."""
    loss, g = problem.loss_and_grad(w, batch_idx)
    gn = float(np.linalg.norm(g))
    rec = StepRecord(step=-1, loss=loss, grad_norm=gn, rho=rho)
    if not (np.isfinite(loss) and np.all(np.isfinite(g))):
        rec.failed = True
        return w, rec
    eps = (rho / gn) * g if gn > 0 else np.zeros_like(g)
    try:
        _, g_tilde = problem.loss_and_grad(w + eps, batch_idx)
    except ad.NonFiniteError:
        rec.failed = True
        return w, rec
    if not np.all(np.isfinite(g_tilde)):
        rec.failed = True
        return w, rec
    return w - lr * g_tilde, rec


class BatchSampler:
    """Seeded without-replacement sampling, re-permuted every epoch."""

    def __init__(self, n_samples: int, batch_size: int, seed: int):
        self.n = n_samples
        self.bs = min(batch_size, n_samples)
        self.rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
        self._perm = np.empty(0, dtype=np.intp)
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        if self._pos + self.bs > self._perm.size:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        out = self._perm[self._pos:self._pos + self.bs]
        self._pos += self.bs
        return out


@dataclass
class RunResult:
    weights: np.ndarray
    records: list[StepRecord]
    failed: bool = False


def run(problem, config: SamConfig, w0: np.ndarray | None = None,
        record_population: bool = False,
        step_callback=None) -> RunResult:
    """Deterministic training run; rho = 0 reproduces SGD bit-exactly."""
    w = problem.init_params() if w0 is None else np.asarray(w0, dtype=np.float64).copy()
    sampler = BatchSampler(problem.n_samples, config.batch_size, config.seed)
    records: list[StepRecord] = []
    for t in range(config.steps):
        batch = sampler.next_batch()
        w_new, rec = sam_step(problem, w, batch, config.learning_rate, config.rho)
        rec.step = t
        if record_population and not rec.failed:
            _, pop_g = problem.loss_and_grad(w)
            rec.pop_grad_norm = float(np.linalg.norm(pop_g))
            g_tilde = (w - w_new) / config.learning_rate
            rec.inner_product = float(pop_g @ g_tilde)
        records.append(rec)
        if rec.failed:
            return RunResult(w, records, failed=True)
        w = w_new
        if step_callback is not None:
            step_callback(t, w, rec)
    return RunResult(w, records)


def stability_probe(problem, w: np.ndarray, rho: float, n_batches: int,
                    batch_size: int, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo estimate of E[<population grad, perturbed batch grad>].

    The population gradient is computed once on the full dataset; batches
    are resampled uniformly with replacement across trials.  Returns the
    mean inner product and its standard error.
    """
    if n_batches < 2:
        raise ValueError("n_batches must be >= 2")
    if hasattr(problem, "labels"):
        labels = np.asarray(problem.labels)
        if np.unique(labels).size < 2:
            raise ValueError("degenerate dataset: single class")
    _, pop_g = problem.loss_and_grad(w)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    vals = np.empty(n_batches)
    for i in range(n_batches):
        idx = rng.choice(problem.n_samples, size=min(batch_size, problem.n_samples),
                         replace=False)
        _, g = problem.loss_and_grad(w, idx)
        gn = np.linalg.norm(g)
        eps = (rho / gn) * g if gn > 0 else np.zeros_like(g)
        _, g_tilde = problem.loss_and_grad(w + eps, idx)
        vals[i] = pop_g @ g_tilde
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_batches))

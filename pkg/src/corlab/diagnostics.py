"""Measurement theory: GSNR, Hessian spectrum/trace, stability bounds,
the tripartite factorization of the critical radius, GSNR phase detection,
and loss-landscape sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

GSNR_INF = float("inf")
COLLAPSE_ZONE_THRESHOLD = 0.05


# ---------------------------------------------------------------------------
# report types
# ---------------------------------------------------------------------------

@dataclass
class SpectralEstimate:
    """Spectral and statistical quantities at one optimization step."""

    lambda_max: float
    trace_h: float
    trace_cov: float
    grad_norm_sq: float
    step: int = 0

    @property
    def kappa_s(self) -> float:
        return self.trace_h / self.lambda_max if self.lambda_max > 0 else float("nan")

    @property
    def trace_xi(self) -> float:
        return self.trace_cov + self.grad_norm_sq - self.trace_h

    @property
    def gsnr(self) -> float:
        if self.trace_cov == 0.0:
            return 0.0 if self.grad_norm_sq == 0.0 else GSNR_INF
        return self.grad_norm_sq / self.trace_cov

    @property
    def cor_bound(self) -> float:
        return float(np.sqrt(self.grad_norm_sq)) / self.lambda_max

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(kappa_s=self.kappa_s, trace_xi=self.trace_xi,
                 gsnr=self.gsnr, cor_bound=self.cor_bound)
        return d


@dataclass
class CorReport:
    """Per-step stability bounds and their trajectory minimum."""

    steps: list[int]
    bounds: list[float]
    rho_critical: float
    argmin_step: int
    collapsed_zone: bool
    excluded_steps: list[int] = field(default_factory=list)


@dataclass
class GsnrTrace:
    steps: list[int]
    values: list[float]
    phase_boundaries: tuple[int | None, int | None] = (None, None)
    bottleneck_step: int | None = None
    bottleneck_gsnr: float | None = None


@dataclass
class DecompositionReport:
    geometric: float
    misspecification: float
    statistical: float
    lhs: float
    rhs: float
    rel_gap: float

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

def gsnr(per_sample_grads: np.ndarray, batch_size: int = 1) -> float:
    """Global gradient signal-to-noise ratio from per-sample gradients.

    Signal is the squared norm of the mean gradient; noise is the trace of
    the per-sample population covariance divided by the batch size, i.e.
    the covariance of a with-replacement mini-batch gradient.
    """
    G = np.asarray(per_sample_grads, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] < 2:
        raise ValueError("need an (M, P) matrix with M >= 2")
    gbar = G.mean(axis=0)
    signal = float(gbar @ gbar)
    noise = float(((G - gbar) ** 2).sum(axis=1).mean()) / batch_size
    if noise == 0.0:
        return 0.0 if signal == 0.0 else GSNR_INF
    return signal / noise


def trace_cov(per_sample_grads: np.ndarray, batch_size: int = 1) -> float:
    G = np.asarray(per_sample_grads, dtype=np.float64)
    gbar = G.mean(axis=0)
    return float(((G - gbar) ** 2).sum(axis=1).mean()) / batch_size


def lambda_max(hvp_oracle, dim: int, iters: int = 200, tol: float = 1e-8,
               seed: int = 0, shift: float | None = None) -> float:
    """Top eigenvalue of a symmetric operator via shifted power iteration.

    The operator is shifted by sigma*I (sigma defaults to the magnitude of
    a trace estimate) so that possibly indefinite spectra still converge
    to the algebraically largest eigenvalue.  Convergence is declared when
    the eigen-residual ||H v - lam v|| falls below tol * max(1, |lam|);
    for symmetric operators the eigenvalue error is bounded by that
    residual.  Raises with the last Rayleigh quotient and residual on
    non-convergence.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if shift is None:
        shift = abs(hessian_trace(hvp_oracle, dim, probes=10, seed=seed + 1)[0])
    rng = np.random.default_rng(seed)
    v = rng.normal(size=dim)
    v /= np.linalg.norm(v)
    lam_s = 0.0
    for _ in range(iters):
        hv = hvp_oracle(v)
        hv_s = hv + shift * v
        lam_s = float(v @ hv_s)
        resid = float(np.linalg.norm(hv_s - lam_s * v))
        if resid <= tol * max(1.0, abs(lam_s)):
            return lam_s - shift
        nrm = np.linalg.norm(hv_s)
        if nrm == 0.0:
            return -shift
        v = hv_s / nrm
    raise RuntimeError(
        f"power iteration did not converge in {iters} iters; "
        f"last Rayleigh quotient {lam_s - shift:.6e}, residual {resid:.3e}"
    )


def hessian_trace(hvp_oracle, dim: int, probes: int = 100, seed: int = 0,
                  dense_threshold: int = 64) -> tuple[float, float]:
    """Hutchinson trace estimate with +-1 probes; exact dense fallback.

    Returns (estimate, standard_error); standard error is 0 in dense mode.
    """
    if dim <= dense_threshold:
        tr = 0.0
        for i in range(dim):
            e = np.zeros(dim)
            e[i] = 1.0
            tr += float(hvp_oracle(e)[i])
        return tr, 0.0
    rng = np.random.default_rng(seed)
    vals = np.empty(probes)
    for i in range(probes):
        z = rng.integers(0, 2, size=dim) * 2.0 - 1.0
        vals[i] = float(z @ hvp_oracle(z))
    se = float(vals.std(ddof=1) / np.sqrt(probes)) if probes > 1 else 0.0
    return float(vals.mean()), se


def misspecification_trace(trace_cov: float, grad_norm_sq: float,
                           trace_h: float, tol: float = 1e-9) -> float:
    """Residual trace from the rearranged Hessian-covariance identity.

    Asserts the well-posedness guarantee 1 + TrXi/TrH >= 0 (up to `tol`)
    whenever TrH > 0; a violation signals inconsistent inputs.
    """
    trace_xi = trace_cov + grad_norm_sq - trace_h
    if trace_h > 0 and 1.0 + trace_xi / trace_h < -tol:
        raise ValueError(
            f"well-posedness violated: 1 + TrXi/TrH = {1 + trace_xi / trace_h:.3e}"
        )
    return trace_xi


def statistical_term(s: float) -> float:
    """f(s) = sqrt(s / (1 + s)), strictly increasing on [0, inf)."""
    if s < 0:
        raise ValueError("GSNR must be nonnegative")
    if np.isinf(s):
        return 1.0
    return float(np.sqrt(s / (1.0 + s)))


def verify_decomposition(spec: SpectralEstimate,
                         rel_floor: float = 1e-12) -> DecompositionReport:
    """Check the tripartite factorization of the per-step stability bound.

    LHS is ||grad|| / lambda_max computed directly; RHS is the product
    geometric * misspecification * statistical assembled from traces.
    """
    trace_xi = misspecification_trace(spec.trace_cov, spec.grad_norm_sq, spec.trace_h)
    geometric = spec.kappa_s / np.sqrt(spec.trace_h)
    radicand = 1.0 + trace_xi / spec.trace_h
    if radicand < 0:
        radicand = 0.0  # within well-posedness tolerance
    misspec = float(np.sqrt(radicand))
    stat = statistical_term(spec.gsnr)
    rhs = float(geometric * misspec * stat)
    lhs = spec.cor_bound
    rel_gap = abs(lhs - rhs) / max(lhs, rel_floor)
    return DecompositionReport(float(geometric), misspec, stat, lhs, rhs, float(rel_gap))


def cor_trajectory(steps, grad_norms, lambda_maxes,
                   collapse_threshold: float = COLLAPSE_ZONE_THRESHOLD) -> CorReport:
    """Per-step stability bounds ||grad_t|| / lambda_max_t and their minimum.

    Steps with lambda_max <= 0 are excluded (locally indefinite landscape);
    argmin takes the first occurrence on ties.
    """
    kept_steps, bounds, excluded = [], [], []
    for t, gn, lam in zip(steps, grad_norms, lambda_maxes):
        if lam <= 0:
            excluded.append(int(t))
            continue
        kept_steps.append(int(t))
        bounds.append(float(gn) / float(lam))
    if not bounds:
        raise ValueError("no step with positive lambda_max")
    i = int(np.argmin(bounds))
    rho_crit = bounds[i]
    return CorReport(kept_steps, bounds, rho_crit, kept_steps[i],
                     rho_crit < collapse_threshold, excluded)


# ---------------------------------------------------------------------------
# GSNR phase detection
# ---------------------------------------------------------------------------

def phase_detect(values, cor_bounds=None, smooth_window: int = 5,
                 rise_slope: float = 0.05, rise_run: int = 3,
                 decay_run: int = 5, floor: float = 1e-12) -> GsnrTrace:
    """Segment a GSNR trajectory into plateau / rise / decay phases.

    The log-trace is smoothed with a moving average; the rise phase starts
    at the first step whose smoothed slope exceeds `rise_slope` for
    `rise_run` consecutive steps, the decay phase at the first later step
    whose slope is negative for `decay_run` consecutive steps.  When no
    rise is detected the whole run is the pre-optimization phase (the
    collapse case).
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size < 10:
        raise ValueError("need at least 10 steps")
    logv = np.log(np.maximum(v, floor))
    kernel = np.ones(smooth_window) / smooth_window
    smoothed = np.convolve(logv, kernel, mode="same")
    slope = np.diff(smoothed)

    rise_start = None
    run = 0
    for i, s in enumerate(slope):
        run = run + 1 if s > rise_slope else 0
        if run >= rise_run:
            rise_start = i - rise_run + 2  # first step of the sustained rise
            break

    decay_start = None
    if rise_start is not None:
        run = 0
        for i in range(rise_start, slope.size):
            run = run + 1 if slope[i] < 0 else 0
            if run >= decay_run:
                decay_start = i - decay_run + 2
                break

    # bottleneck: argmin of the stability bound (or of the GSNR itself when
    # no bounds are supplied), restricted to the pre-optimization phase
    crit = v if cor_bounds is None else np.asarray(cor_bounds, dtype=np.float64)
    if crit.size != v.size:
        raise ValueError("cor_bounds must align with the GSNR trace")
    steps = list(range(v.size))
    end = v.size if rise_start is None else max(rise_start, 1)
    t_star = int(np.argmin(crit[:end]))
    return GsnrTrace(steps, [float(x) for x in v],
                     (rise_start, decay_start), t_star, float(v[t_star]))


# ---------------------------------------------------------------------------
# loss-landscape sampling
# ---------------------------------------------------------------------------

def landscape_sample(loss_fn, params_flat: np.ndarray, block_slices,
                     grid_half_width: float = 1.0, resolution: int = 21,
                     seed: int = 0) -> dict:
    """Losses on a grid spanned by two random orthonormal directions.

    Directions are rescaled per parameter block to the block's current norm
    (filter-normalization analogue).  The center cell is the unperturbed
    loss exactly.  Non-finite cells are flagged, not fatal.
    """
    if resolution < 3 or resolution % 2 == 0:
        raise ValueError("resolution must be odd and >= 3")
    w0 = np.asarray(params_flat, dtype=np.float64)
    rng = np.random.default_rng(seed)
    d1 = rng.normal(size=w0.size)
    d2 = rng.normal(size=w0.size)
    d1 /= np.linalg.norm(d1)
    d2 -= (d2 @ d1) * d1
    d2 /= np.linalg.norm(d2)
    for d in (d1, d2):
        for sl in block_slices:
            bn = np.linalg.norm(w0[sl])
            dn = np.linalg.norm(d[sl])
            if bn > 0 and dn > 0:
                d[sl] *= bn / dn
    ticks = np.linspace(-grid_half_width, grid_half_width, resolution)
    grid = np.empty((resolution, resolution))
    flagged = []
    for i, a in enumerate(ticks):
        for j, b in enumerate(ticks):
            if a == 0.0 and b == 0.0:
                grid[i, j] = loss_fn(w0)
                continue
            try:
                grid[i, j] = loss_fn(w0 + a * d1 + b * d2)
            except ArithmeticError:
                grid[i, j] = np.nan
                flagged.append((i, j))
            if not np.isfinite(grid[i, j]):
                flagged.append((i, j))
    return {"ticks": ticks, "grid": grid, "non_finite_cells": flagged,
            "directions": (d1, d2)}


def landscape_to_csv(result: dict, path) -> None:
    ticks, grid = result["ticks"], result["grid"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x,y,loss\n")
        for i, a in enumerate(ticks):
            for j, b in enumerate(ticks):
                fh.write(f"{float(a)!r},{float(b)!r},{float(grid[i, j])!r}\n")


def snapshot_json(spec: SpectralEstimate, report: DecompositionReport) -> str:
    payload = {
        "step": spec.step,
        "gsnr": spec.gsnr,
        "lambda_max": spec.lambda_max,
        "trace_h": spec.trace_h,
        "kappa_s": spec.kappa_s,
        "trace_cov": spec.trace_cov,
        "grad_norm_sq": spec.grad_norm_sq,
        "trace_xi": spec.trace_xi,
        "cor_bound": spec.cor_bound,
        "decomposition": {
            "geometric": report.geometric,
            "misspec": report.misspecification,
            "statistical": report.statistical,
            "lhs": report.lhs,
            "rhs": report.rhs,
            "rel_gap": report.rel_gap,
        },
    }
    return json.dumps(payload)

"""Experiment orchestration: feature pipelines, training runs with
diagnostics, rho sweeps with collapse bisection, AUC metrics, verification
campaigns, and report emission."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import diagnostics as dg
from . import model as md
from . import optim as op
from . import regions as rg
from . import tasks as tk

SCHEMA_VERSION = 1
COLLAPSE_AUC_THRESHOLD = 0.55
HEAD_MODES = ("plain-probe", "corit")
LOSS_MODES = ("bce", "quadratic")
STANDARDIZE_MODES = ("none", "center", "whiten")
STEP_CSV_HEADER = ["step", "loss", "train_auc_window", "grad_norm", "gsnr"]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def compute_auc(scores, labels) -> float:
    """Mann-Whitney rank AUC with average-rank tie handling."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape:
        raise ValueError("scores and labels must be aligned 1-d arrays")
    pos = y == 1
    n1 = int(pos.sum())
    n0 = s.size - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("both classes must be present")
    order = np.argsort(s, kind="mergesort")
    sv = s[order]
    ranks = np.empty(s.size)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def relative_auc(raw: float, perturbed: float) -> float:
    """Relative AUC variation (perturbed - raw) / raw."""
    if raw == 0:
        raise ValueError("raw AUC must be nonzero")
    return (perturbed - raw) / raw


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    """Complete description of one training experiment.

    `standardize` fits the feature transform on the train split only.
    `loss` selects the probe objective: plain binary cross-entropy, or its
    exact second-order expansion around the zero probe (same gradients and
    per-sample gradient statistics at initialization, curvature constant
    along the trajectory).  With the quadratic loss, `lr_relative` scales
    the learning rate by the inverse top curvature so step sizes are
    expressed in units of the stability limit.
    """

    task: tk.TaskSpec = field(default_factory=tk.TaskSpec)
    encoder: md.EncoderConfig = field(default_factory=md.EncoderConfig)
    head: str = "plain-probe"
    optimizer: op.SamConfig = field(default_factory=op.SamConfig)
    counterpart: tk.CounterpartOp = field(default_factory=tk.CounterpartOp)
    cadence: int = 40
    alpha: float = 0.75
    l_mid: int = 4
    loss: str = "bce"
    standardize: str = "center"
    lr_relative: float | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.head not in HEAD_MODES:
            raise ValueError(f"head must be one of {HEAD_MODES}")
        if self.loss not in LOSS_MODES:
            raise ValueError(f"loss must be one of {LOSS_MODES}")
        if self.standardize not in STANDARDIZE_MODES:
            raise ValueError(f"standardize must be one of {STANDARDIZE_MODES}")
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")
        if self.lr_relative is not None and self.loss != "quadratic":
            raise ValueError("lr_relative requires the quadratic loss")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        task = dict(d.pop("task"))
        task["artifact_channels"] = tuple(task["artifact_channels"])
        enc = dict(d.pop("encoder"))
        enc["bias_channels"] = tuple(enc["bias_channels"])
        cp = dict(d.pop("counterpart"))
        cp["target_channels"] = tuple(cp["target_channels"])
        return cls(task=tk.TaskSpec(**task), encoder=md.EncoderConfig(**enc),
                   optimizer=op.SamConfig(**d.pop("optimizer")),
                   counterpart=tk.CounterpartOp(**cp), **d)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# feature pipeline
# ---------------------------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    transform: np.ndarray | None  # None = identity after centering

    def apply(self, F: np.ndarray) -> np.ndarray:
        G = F - self.mean
        return G if self.transform is None else G @ self.transform


def fit_standardizer(F: np.ndarray, mode: str, ridge: float = 1e-6) -> Standardizer:
    if mode == "none":
        return Standardizer(np.zeros(F.shape[1]), None)
    mu = F.mean(axis=0)
    if mode == "center":
        return Standardizer(mu, None)
    C = np.cov(F - mu, rowvar=False) + ridge * np.eye(F.shape[1])
    evals, evecs = np.linalg.eigh(C)
    return Standardizer(mu, evecs @ np.diag(evals ** -0.5) @ evecs.T)


@dataclass
class FeatureSet:
    train: np.ndarray
    test: np.ndarray
    train_labels: np.ndarray
    test_labels: np.ndarray


def build_features(config: RunConfig) -> FeatureSet:
    """Encode both splits under the configured head and standardization."""
    enc = md.FrozenEncoder(config.encoder)
    ds_tr = tk.generate(config.task, "train")
    ds_te = tk.generate(config.task, "test")

    def head_features(tokens: np.ndarray) -> np.ndarray:
        if config.head == "plain-probe":
            return md.plain_feature(enc.encode_plain(tokens))
        side = int(round(np.sqrt(config.task.n_tokens)))
        trace = enc.encode_corit(tokens, config.counterpart.apply(tokens),
                                 rg.grid_partition(side), config.alpha)
        return md.hri_fuse(trace.orig_states, config.l_mid)

    F_tr = head_features(ds_tr.tokens)
    F_te = head_features(ds_te.tokens)
    std = fit_standardizer(F_tr, config.standardize)
    return FeatureSet(std.apply(F_tr), std.apply(F_te),
                      ds_tr.labels.astype(np.float64),
                      ds_te.labels.astype(np.float64))


def quadratic_surrogate(features: np.ndarray, labels: np.ndarray) -> op.QuadraticProblem:
    """Second-order expansion of the cross-entropy probe at zero weights.

    The shared curvature is the Gauss-Newton matrix at the zero probe and
    the per-sample offsets are chosen so that per-sample gradients agree
    exactly with the cross-entropy probe at initialization.
    """
    n = len(labels)
    aug = np.concatenate([features, np.ones((n, 1))], axis=1)
    A = 0.25 * aug.T @ aug / n
    g0 = (0.5 - labels)[:, None] * aug          # per-sample grads at w = 0
    offsets = -np.linalg.solve(A, g0.T).T
    return op.QuadraticProblem(A, offsets)


def _make_problem(config: RunConfig, feats: FeatureSet):
    if config.loss == "bce":
        return op.LogisticProbeProblem(feats.train, feats.train_labels)
    return quadratic_surrogate(feats.train, feats.train_labels)


def _logits(problem, w: np.ndarray, features: np.ndarray) -> np.ndarray:
    # both problems order parameters as [weights..., bias]
    return features @ w[:-1] + w[-1]


def _effective_lr(config: RunConfig, problem) -> float:
    if config.lr_relative is None:
        return config.optimizer.learning_rate
    lam = float(np.linalg.eigvalsh(problem.dense_hessian(problem.init_params())).max())
    if lam <= 0:
        raise ValueError("non-positive top curvature; cannot scale step size")
    return config.lr_relative / lam


# ---------------------------------------------------------------------------
# training runs
# ---------------------------------------------------------------------------

@dataclass
class StepMetrics:
    step: int
    loss: float
    train_auc_window: float
    grad_norm: float
    gsnr: float


@dataclass
class TrainResult:
    config: RunConfig
    weights: np.ndarray
    steps: list[StepMetrics]
    estimates: list[dg.SpectralEstimate]
    cor_report: dg.CorReport
    gsnr_trace: dg.GsnrTrace
    train_auc: float
    test_auc: float
    train_auc_window: float
    failed: bool
    failed_step: int | None = None

    @property
    def collapsed(self) -> bool:
        return self.train_auc_window < COLLAPSE_AUC_THRESHOLD

    def summary(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "train_auc": self.train_auc,
            "test_auc": self.test_auc,
            "train_auc_window": self.train_auc_window,
            "collapsed": self.collapsed,
            "failed": self.failed,
            "failed_step": self.failed_step,
            "theoretical_cor": self.cor_report.rho_critical,
            "cor_argmin_step": self.cor_report.argmin_step,
            "collapse_zone": self.cor_report.collapsed_zone,
            "phase_boundaries": list(self.gsnr_trace.phase_boundaries),
            "bottleneck_step": self.gsnr_trace.bottleneck_step,
            "bottleneck_gsnr": self.gsnr_trace.bottleneck_gsnr,
        }


def _spectral_estimate(problem, w: np.ndarray, step: int) -> dg.SpectralEstimate:
    # probe Hessians have closed dense forms, so the spectrum is exact here;
    # the iterative estimators are exercised against these in the test suite
    G = problem.per_sample_grads(w)
    gbar = G.mean(axis=0)
    H = problem.dense_hessian(w)
    return dg.SpectralEstimate(lambda_max=float(np.linalg.eigvalsh(H).max()),
                               trace_h=float(np.trace(H)),
                               trace_cov=dg.trace_cov(G),
                               grad_norm_sq=float(gbar @ gbar), step=step)


def run_train(config: RunConfig, feats: FeatureSet | None = None,
              out_dir: str | None = None) -> TrainResult:
    """Deterministic training run with per-step metrics and periodic
    spectral diagnostics.

    The per-step AUC window is the running mean of the full-train-set AUC
    over the trailing tenth of the step budget; the final window value is
    the collapse statistic.  A non-finite update marks the run failed and
    keeps the last valid weights.
    """
    feats = build_features(config) if feats is None else feats
    problem = _make_problem(config, feats)
    ocfg = config.optimizer
    lr = _effective_lr(config, problem)
    n = problem.n_samples
    full_batch = ocfg.batch_size >= n
    sampler = None if full_batch else op.BatchSampler(n, ocfg.batch_size, ocfg.seed)

    window = max(1, ocfg.steps // 10)
    auc_hist: list[float] = []
    steps_out: list[StepMetrics] = []
    estimates: list[dg.SpectralEstimate] = []
    w = problem.init_params()
    failed = False
    failed_step = None

    for t in range(ocfg.steps):
        if t % config.cadence == 0:
            estimates.append(_spectral_estimate(problem, w, t))
        auc_hist.append(compute_auc(_logits(problem, w, feats.train),
                                    feats.train_labels))
        if len(auc_hist) > window:
            auc_hist.pop(0)
        batch = None if full_batch else sampler.next_batch()
        w_new, rec = op.sam_step(problem, w, batch, lr, ocfg.rho)
        G = problem.per_sample_grads(w)
        steps_out.append(StepMetrics(t, rec.loss,
                                     float(np.mean(auc_hist)),
                                     rec.grad_norm, dg.gsnr(G)))
        if rec.failed:
            failed = True
            failed_step = t
            break
        w = w_new

    if not estimates:
        estimates.append(_spectral_estimate(problem, w, 0))
    cor_report = dg.cor_trajectory([e.step for e in estimates],
                                   [np.sqrt(e.grad_norm_sq) for e in estimates],
                                   [e.lambda_max for e in estimates])
    gsnr_vals = [e.gsnr for e in estimates]
    bounds = [e.cor_bound for e in estimates]
    if len(gsnr_vals) >= 10:
        trace = dg.phase_detect(gsnr_vals, bounds)
        remap = lambda i: None if i is None else estimates[i].step
        trace = dg.GsnrTrace([e.step for e in estimates], trace.values,
                             (remap(trace.phase_boundaries[0]),
                              remap(trace.phase_boundaries[1])),
                             remap(trace.bottleneck_step), trace.bottleneck_gsnr)
    else:
        i = int(np.argmin(bounds))
        trace = dg.GsnrTrace([e.step for e in estimates], gsnr_vals,
                             (None, None), estimates[i].step, gsnr_vals[i])

    train_auc = compute_auc(_logits(problem, w, feats.train), feats.train_labels)
    test_auc = compute_auc(_logits(problem, w, feats.test), feats.test_labels)
    result = TrainResult(config, w, steps_out, estimates, cor_report, trace,
                         train_auc, test_auc,
                         float(np.mean(auc_hist)) if auc_hist else 0.5,
                         failed, failed_step)
    if out_dir is not None:
        emit_run(result, out_dir)
    return result


def emit_run(result: TrainResult, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "steps.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(",".join(STEP_CSV_HEADER) + "\n")
        for m in result.steps:
            fh.write(f"{m.step},{m.loss!r},{m.train_auc_window!r},"
                     f"{m.grad_norm!r},{m.gsnr!r}\n")
    with open(os.path.join(out_dir, "diagnostics.json"), "w",
              encoding="utf-8", newline="\n") as fh:
        payload = {"schema_version": SCHEMA_VERSION,
                   "estimates": [e.to_dict() for e in result.estimates]}
        fh.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "summary.json"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# rho sweeps and collapse bisection
# ---------------------------------------------------------------------------

@dataclass
class SweepEntry:
    rho: float
    train_auc: float
    test_auc: float
    collapsed: bool


@dataclass
class SweepResult:
    entries: list[SweepEntry]
    empirical_cor: float
    theoretical_cor: float
    all_collapsed: bool = False
    none_collapsed: bool = False
    monotone: bool = True


def _collapse_stat(problem, feats: FeatureSet, ocfg: op.SamConfig, lr: float,
                   rho: float) -> tuple[float, float, float]:
    """Window AUC, final train AUC, final test AUC of one probe run."""
    n = problem.n_samples
    full_batch = ocfg.batch_size >= n
    sampler = None if full_batch else op.BatchSampler(n, ocfg.batch_size, ocfg.seed)
    window = max(1, ocfg.steps // 10)
    start = ocfg.steps - window
    vals = []
    w = problem.init_params()
    for t in range(ocfg.steps):
        if t >= start:
            vals.append(compute_auc(_logits(problem, w, feats.train),
                                    feats.train_labels))
        batch = None if full_batch else sampler.next_batch()
        w, rec = op.sam_step(problem, w, batch, lr, rho)
        if rec.failed:
            return 0.5, 0.5, 0.5
    return (float(np.mean(vals)),
            compute_auc(_logits(problem, w, feats.train), feats.train_labels),
            compute_auc(_logits(problem, w, feats.test), feats.test_labels))


def sweep_rho(config: RunConfig, rho_list, seeds=(0, 1, 2),
              resolution: float = 1e-3) -> SweepResult:
    """Collapse sweep over ascending rho values with boundary bisection.

    Each rho is labeled collapsed by majority vote over per-seed runs
    (window AUC below the collapse threshold); the empirical critical
    radius is bisected between the boundary pair.  Degenerate sweeps
    (everything or nothing collapsed) report the range edge with a flag.
    """
    rhos = [float(r) for r in rho_list]
    if len(rhos) < 3 or any(b <= a for a, b in zip(rhos, rhos[1:])):
        raise ValueError("need >= 3 strictly ascending rho values")

    cache = {}
    for s in seeds:
        cfg_s = replace(config, task=replace(config.task, seed=config.task.seed + s))
        feats = build_features(cfg_s)
        problem = _make_problem(cfg_s, feats)
        cache[s] = (feats, problem, _effective_lr(cfg_s, problem))

    def probe(rho: float) -> tuple[bool, float, float]:
        wins, trs, tes = [], [], []
        for s in seeds:
            feats, problem, lr = cache[s]
            win, tr, te = _collapse_stat(problem, feats, config.optimizer, lr, rho)
            wins.append(win)
            trs.append(tr)
            tes.append(te)
        votes = sum(w < COLLAPSE_AUC_THRESHOLD for w in wins)
        return 2 * votes > len(seeds), float(np.mean(trs)), float(np.mean(tes))

    entries = []
    for r in rhos:
        coll, tr, te = probe(r)
        entries.append(SweepEntry(r, tr, te, coll))

    flags = [e.collapsed for e in entries]
    monotone = all(not (flags[i] and not flags[j])
                   for i in range(len(flags)) for j in range(i + 1, len(flags)))
    theoretical = run_train(replace(config, optimizer=replace(config.optimizer, rho=0.0)),
                            feats=cache[seeds[0]][0]).cor_report.rho_critical

    if all(flags):
        return SweepResult(entries, rhos[0], theoretical,
                           all_collapsed=True, monotone=monotone)
    if not any(flags):
        return SweepResult(entries, rhos[-1], theoretical,
                           none_collapsed=True, monotone=monotone)
    hi_i = flags.index(True)
    lo = 0.0 if hi_i == 0 else rhos[hi_i - 1]
    hi = rhos[hi_i]
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if probe(mid)[0]:
            hi = mid
        else:
            lo = mid
    return SweepResult(entries, 0.5 * (lo + hi), theoretical, monotone=monotone)


# ---------------------------------------------------------------------------
# verification campaigns
# ---------------------------------------------------------------------------

@dataclass
class CampaignReport:
    n_instances: int
    n_passed: int
    max_rel_gap: float
    min_wellposed: float
    failures: list[dict] = field(default_factory=list)
    elapsed_s: float = 0.0

    @property
    def passed(self) -> bool:
        return self.n_passed == self.n_instances


def verify_theorem_campaign(n_instances: int = 100, seed: int = 0,
                            rel_tol: float = 1e-6) -> CampaignReport:
    """Exact-mode factorization check on random softmax-regression instances.

    Every spectral quantity is computed densely (eigendecomposition, full
    per-sample gradients), so the identity must hold to numerical rounding.
    """
    from . import softmaxreg as sr

    if n_instances < 1:
        raise ValueError("n_instances must be >= 1")
    t0 = time.time()
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    passed = 0
    max_gap = 0.0
    min_wp = float("inf")
    failures = []
    for i in range(n_instances):
        inst = sr.SoftmaxRegression.random(
            rng, n_samples=int(rng.integers(4, 40)),
            n_classes=int(rng.integers(2, 6)),
            n_features=int(rng.integers(2, 11)))
        if inst.dim > 50:
            raise AssertionError("instance exceeds the intended size budget")
        H = inst.dense_hessian()
        G = inst.per_sample_grads()
        gbar = G.mean(axis=0)
        est = dg.SpectralEstimate(
            lambda_max=float(np.linalg.eigvalsh(H).max()),
            trace_h=float(np.trace(H)),
            trace_cov=dg.trace_cov(G),
            grad_norm_sq=float(gbar @ gbar), step=i)
        wp = 1.0 + est.trace_xi / est.trace_h if est.trace_h > 0 else float("inf")
        min_wp = min(min_wp, wp)
        report = dg.verify_decomposition(est)
        max_gap = max(max_gap, report.rel_gap)
        if report.rel_gap < rel_tol and wp >= -1e-9:
            passed += 1
        else:
            failures.append({"instance": i, "estimate": est.to_dict(),
                             "decomposition": report.to_dict()})
    return CampaignReport(n_instances, passed, max_gap, min_wp, failures,
                          time.time() - t0)


@dataclass
class ComparisonReport:
    plain_cor: float
    corit_cor: float
    plain_collapse_zone: bool
    corit_collapse_zone: bool
    plain_empirical: float | None = None
    corit_empirical: float | None = None

    @property
    def lifted(self) -> bool:
        return self.corit_cor > self.plain_cor


def corit_vs_baseline(config: RunConfig, empirical_rhos=None,
                      seeds=(0, 1, 2)) -> ComparisonReport:
    """Head comparison on one task: identical encoder and optimizer, only
    the head mode differs.  Reports the trajectory-minimum stability bound
    per head; optionally also the empirical collapse boundary."""
    out = {}
    for head in HEAD_MODES:
        cfg = replace(config, head=head,
                      optimizer=replace(config.optimizer, rho=0.0))
        res = run_train(cfg)
        out[head] = res.cor_report
    emp = {"plain-probe": None, "corit": None}
    if empirical_rhos is not None:
        for head in HEAD_MODES:
            cfg = replace(config, head=head)
            emp[head] = sweep_rho(cfg, empirical_rhos, seeds=seeds).empirical_cor
    return ComparisonReport(out["plain-probe"].rho_critical,
                            out["corit"].rho_critical,
                            out["plain-probe"].collapsed_zone,
                            out["corit"].collapsed_zone,
                            emp["plain-probe"], emp["corit"])

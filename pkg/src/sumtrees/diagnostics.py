"""Residual checks and convergence traces."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats as sps
from scipy.special import ndtr, ndtri

from .ensemble import PosteriorEnsemble

# Royston's polynomial coefficients (AS R94)
_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.5440, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def _poly(coef, x: float) -> float:
    out = 0.0
    for c in reversed(coef):
        out = out * x + c
    return out


def shapiro_wilk_coefficients(n: int) -> np.ndarray:
    """Weights a_1..a_{n//2} applied to (x_(n+1-i) - x_(i))."""
    n2 = n // 2
    if n == 3:
        return np.array([math.sqrt(0.5)])
    m = ndtri((np.arange(1, n2 + 1) - 0.375) / (n + 0.25))
    summ2 = 2.0 * float(m @ m)
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a = np.empty(n2)
    a[0] = _poly(_C1, rsn) - m[0] / ssumm2
    if n > 5:
        first = 2
        a[1] = -m[1] / ssumm2 + _poly(_C2, rsn)
        fac = math.sqrt((summ2 - 2 * m[0] ** 2 - 2 * m[1] ** 2) / (1 - 2 * a[0] ** 2 - 2 * a[1] ** 2))
    else:
        first = 1
        fac = math.sqrt((summ2 - 2 * m[0] ** 2) / (1 - 2 * a[0] ** 2))
    a[first:] = -m[first:] / fac
    return a


def shapiro_wilk(x) -> tuple[float, float]:
    """Shapiro-Wilk W and its p-value via Royston's normalising approximation."""
    x = np.sort(np.asarray(x, dtype=float))
    n = len(x)
    if not 3 <= n <= 5000:
        raise ValueError("Shapiro-Wilk needs 3 <= n <= 5000")
    if x[-1] - x[0] <= 0:
        raise ValueError("residuals are constant")
    a = shapiro_wilk_coefficients(n)
    n2 = n // 2
    num = float(a @ (x[::-1][:n2] - x[:n2]))
    ssq = float(((x - x.mean()) ** 2).sum())
    w = min(num * num / ssq, 1.0)
    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.asin(math.sqrt(0.75)))
        return w, min(max(p, 0.0), 1.0)
    y = math.log1p(-w) if w < 1 else -math.inf
    if n <= 11:
        gamma = _poly(_G, n)
        if y >= gamma:
            return w, 0.0
        y = -math.log(gamma - y)
        mu = _poly(_C3, n)
        sigma = math.exp(_poly(_C4, n))
    else:
        xx = math.log(n)
        mu = _poly(_C5, xx)
        sigma = math.exp(_poly(_C6, xx))
    return w, float(ndtr(-(y - mu) / sigma))


def zero_mean_t_test(x) -> float:
    """Two-sided one-sample t-test p-value against mean zero."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 2:
        raise ValueError("need at least 2 residuals")
    sd = float(x.std(ddof=1))
    if sd == 0:
        raise ValueError("residuals have zero spread")
    t = float(x.mean()) / (sd / math.sqrt(n))
    return float(min(1.0, 2.0 * sps.t.sf(abs(t), n - 1)))


@dataclass
class ConvergenceTrace:
    """Per-iteration series for each chain (burn-in included)."""

    sigma_sq: list[np.ndarray]
    acceptance: list[np.ndarray]
    mean_leaves: list[np.ndarray]
    mean_depth: list[np.ndarray]
    burn_in: int

    SERIES = ("sigma_sq", "acceptance", "mean_leaves", "mean_depth")

    @property
    def chains(self) -> int:
        return len(self.sigma_sq)

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "iteration", "burn_in", *self.SERIES])
            for c in range(self.chains):
                cols = [getattr(self, s)[c] for s in self.SERIES]
                for it in range(len(cols[0])):
                    w.writerow([c, it, int(it < self.burn_in), *(repr(float(col[it])) for col in cols)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "ConvergenceTrace":
        rows: dict[int, list[list[float]]] = {}
        burn = 0
        with Path(path).open(newline="") as fh:
            for rec in csv.DictReader(fh):
                c = int(rec["chain"])
                rows.setdefault(c, []).append([float(rec[s]) for s in cls.SERIES])
                burn += int(rec["burn_in"]) if c == 0 else 0
        arrays = {s: [np.array([r[k] for r in rows[c]]) for c in sorted(rows)] for k, s in enumerate(cls.SERIES)}
        return cls(burn_in=burn, **arrays)


def convergence_trace(ensemble: PosteriorEnsemble) -> ConvergenceTrace:
    if not ensemble.traces:
        raise ValueError("no diagnostics were recorded for this model")
    tr = ensemble.traces
    return ConvergenceTrace([t.sigma_sq for t in tr], [t.acceptance for t in tr],
                            [t.mean_leaves for t in tr], [t.mean_depth for t in tr], tr[0].burn_in)


def residuals_vs_fitted(ensemble: PosteriorEnsemble) -> tuple[np.ndarray, np.ndarray]:
    """In-sample (fitted, residual) pairs; classification uses fitted probabilities."""
    frame = ensemble.frame
    g = ensemble.draws(frame.matrix)
    fitted = ndtr(g).mean(axis=0) if frame.is_classification else g.mean(axis=0)
    return fitted, frame.response - fitted


def model_summary(ensemble: PosteriorEnsemble, threads: int = 1) -> str:
    """Plain-text block with data size, timing, noise estimates, fit and residual tests."""
    from .inference import confusion_matrix, error_summary, predict

    frame, h = ensemble.frame, ensemble.hyper
    task = "classification" if frame.is_classification else "regression"
    lines = [
        f"sumtrees model for {task}",
        "",
        f"training data n = {frame.n} and p = {frame.p}",
        f"built in {ensemble.train_seconds:.1f} secs on {threads} threads, {h.num_trees} trees, "
        f"{h.burn_in} burn-in and {h.post_burn_in} post. samples",
        "",
    ]
    res = predict(ensemble, frame.matrix, threads=threads)
    if frame.is_classification:
        cm = confusion_matrix(frame.response, res.labels)
        lines += ["confusion matrix (rows = truth 0/1, columns = predicted 0/1):",
                  f" {cm[0, 0]} {cm[0, 1]}", f" {cm[1, 0]} {cm[1, 1]}",
                  f"misclassification = {(cm[0, 1] + cm[1, 0]) / frame.n:.4g}"]
        return "\n".join(lines) + "\n"
    st = error_summary(frame.response, res.point)
    resid = frame.response - res.point
    lines += [
        f"sigsq est for y beforehand: {ensemble.priors.sigsq_hat:.3g}",
        f"avg sigsq estimate after burn-in: {float(np.mean(ensemble.sigma_sq)):.3g}",
        "",
        "in-sample statistics:",
        f" L1 = {st['L1']:.2f}",
        f" L2 = {st['L2']:.2f}",
        f" rmse = {st['rmse']:.2f}",
        f" Pseudo-Rsq = {st['pseudo_r2']:.4g}",
    ]
    try:
        sw = f"{shapiro_wilk(resid[:5000])[1]:.5f}"
    except ValueError as exc:
        sw = f"n/a ({exc})"
    try:
        tt = f"{zero_mean_t_test(resid):.5f}"
    except ValueError as exc:
        tt = f"n/a ({exc})"
    lines += [f"p-val for shapiro-wilk test of normality of residuals: {sw}",
              f"p-val for zero-mean noise: {tt}"]
    return "\n".join(lines) + "\n"

"""Reference estimators for comparison: server-only least squares,
complete-case least squares, and mean imputation."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .data import VerticalDataset, make_dataset
from .engine import FitConfig, fit
from .errors import InsufficientCompleteCases


class BaselineKind(Enum):
    SINGLE = "single"
    COMPLETE_CASE = "cc"
    MEAN_IMPUTE = "impute"


@dataclass(frozen=True)
class OlsFit:
    beta: np.ndarray
    std_errors: np.ndarray
    sigma2_mle: float
    r2: float
    adj_r2: float
    n_used: int


def ols(x: np.ndarray, y: np.ndarray) -> OlsFit:
    """Plain least squares with classical (unbiased-variance) standard errors."""
    n, p = x.shape
    gram = x.T @ x
    beta = np.linalg.solve(gram, x.T @ y)
    resid = y - x @ beta
    rss = float(resid @ resid)
    dof = max(n - p, 1)
    sigma2_unbiased = rss / dof
    cov = sigma2_unbiased * np.linalg.inv(gram)
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - rss / tss if tss > 0 else 0.0
    adj = 1.0 - (1.0 - r2) * (n - 1) / max(n - p - 1, 1)
    return OlsFit(beta=beta, std_errors=np.sqrt(np.diag(cov)),
                  sigma2_mle=rss / n, r2=r2, adj_r2=adj, n_used=n)


@dataclass(frozen=True)
class BaselineResult:
    kind: BaselineKind
    beta: np.ndarray            # length p; NaN outside the method's support
    std_errors: np.ndarray      # aligned with beta; NaN outside support
    support: np.ndarray         # bool, which coefficients the method estimates
    r2: float
    adj_r2: float
    n_used: int
    mse: Optional[float]


def _fit_pooled(x: np.ndarray, y: np.ndarray, layout, engine: str) -> OlsFit:
    """Least squares on a fully observed pooled design, optionally routed
    through the federated gradient machinery (no missingness, so the
    iteration reduces to distributed gradient descent)."""
    direct = ols(x, y)
    if engine == "direct":
        return direct
    blocks = [x[:, layout.block_slice(k)] for k in layout.clients()]
    mask = np.zeros((x.shape[0], layout.num_clients), dtype=bool)
    data = make_dataset(layout, blocks, y, mask)
    cfg = FitConfig(engine="federated" if engine == "federated" else "oracle",
                    max_iters=5000, tol=1e-14, byte_accounting=False)
    res = fit(data, cfg)
    return OlsFit(beta=res.theta.beta, std_errors=direct.std_errors,
                  sigma2_mle=res.theta.sigma2, r2=direct.r2,
                  adj_r2=direct.adj_r2, n_used=x.shape[0])


def run_baseline(kind: BaselineKind, data: VerticalDataset,
                 test: Optional[VerticalDataset] = None,
                 engine: str = "direct") -> BaselineResult:
    """Fit one baseline on `data`; report held-out MSE when `test` is given.

    `engine` picks how the pooled least-squares subproblem is solved:
    'direct' (normal equations), 'oracle', or 'federated' (through the
    round-based machinery, which reduces to distributed gradient descent
    because the constructed subproblem has no missing blocks).
    """
    layout, mask = data.layout, data.mask
    p = layout.total_dim
    y = data.y

    if kind is BaselineKind.SINGLE:
        p1 = layout.dim(1)
        rows = mask.observed_rows(1)
        if rows.size < p1 + 2:
            raise InsufficientCompleteCases(
                f"server client has {rows.size} observed rows; need {p1 + 2}")
        fit_ols = ols(data.view(1).x[rows], y[rows])
        beta = np.full(p, np.nan)
        se = np.full(p, np.nan)
        support = np.zeros(p, dtype=bool)
        beta[:p1] = fit_ols.beta
        se[:p1] = fit_ols.std_errors
        support[:p1] = True
    elif kind is BaselineKind.COMPLETE_CASE:
        rows = mask.complete_rows()
        if rows.size < p + 2:
            raise InsufficientCompleteCases(
                f"{rows.size} fully observed rows; need at least {p + 2}")
        x_cc = np.concatenate([data.view(k).x[rows] for k in layout.clients()],
                              axis=1)
        fit_ols = _fit_pooled(x_cc, y[rows], layout, engine)
        beta, se = fit_ols.beta, fit_ols.std_errors
        support = np.ones(p, dtype=bool)
    elif kind is BaselineKind.MEAN_IMPUTE:
        filled = []
        for k in layout.clients():
            view = data.view(k)
            obs = mask.observed_rows(k)
            col_means = view.x[obs].mean(axis=0)
            block = np.tile(col_means, (data.n, 1))
            block[obs] = view.x[obs]
            filled.append(block)
        x_imp = np.concatenate(filled, axis=1)
        fit_ols = _fit_pooled(x_imp, y, layout, engine)
        beta, se = fit_ols.beta, fit_ols.std_errors
        support = np.ones(p, dtype=bool)
    else:
        raise ValueError(f"unknown baseline {kind}")

    mse = None
    if test is not None:
        x_test = np.concatenate([test.view(k).x for k in test.layout.clients()],
                                axis=1)
        used = np.where(support, beta, 0.0)
        resid = test.y - x_test @ used
        mse = float(np.mean(resid ** 2))
    return BaselineResult(kind=kind, beta=beta, std_errors=se, support=support,
                          r2=fit_ols.r2, adj_r2=fit_ols.adj_r2,
                          n_used=fit_ols.n_used, mse=mse)

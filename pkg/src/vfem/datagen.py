"""Seeded synthetic data: Gaussian client blocks, linear response, and
block-level missingness (completely-at-random, or response-dependent as a
robustness stressor)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .data import BlockLayout, ModelParameters, VerticalDataset, make_dataset
from .errors import ConfigError, MaskRetryExhausted

MECHANISMS = ("mcar", "mar-y")

# client sizes and per-client missing proportions of the motivating
# five-institution setting
SMES_LIKE_DIMS = (12, 3, 6, 9, 5)
SMES_LIKE_RATES = (0.5365, 0.8761, 0.9305, 0.0091, 0.9328)


@dataclass
class GenConfig:
    n: int
    layout: BlockLayout
    rho: Union[float, Sequence[float]] = 0.0
    mechanism: str = "mcar"
    beta: Union[str, Sequence[float]] = "alternating"
    mu: Optional[Sequence[np.ndarray]] = None
    sigma: Union[str, tuple, Sequence[np.ndarray]] = "identity"
    sigma2: float = 1.0
    seed: int = 0
    min_complete: int = 2      # observed rows required per client
    max_retries: int = 100

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("n must be positive")
        if self.sigma2 <= 0:
            raise ConfigError("noise variance must be positive")
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"mechanism must be one of {MECHANISMS}")
        rates = self.rates()
        if any(not (0.0 <= r < 1.0) for r in rates):
            raise ConfigError("missing rates must lie in [0, 1)")

    def rates(self) -> tuple[float, ...]:
        if np.isscalar(self.rho):
            return tuple(float(self.rho) for _ in self.layout.clients())
        rho = tuple(float(r) for r in self.rho)
        if len(rho) != self.layout.num_clients:
            raise ConfigError("need one missing rate per client")
        return rho

    def beta_star(self) -> np.ndarray:
        p = self.layout.total_dim
        if isinstance(self.beta, str):
            if self.beta != "alternating":
                raise ConfigError(f"unknown coefficient spec {self.beta!r}")
            return np.array([1.0 if j % 2 == 0 else -1.0 for j in range(p)])
        arr = np.asarray(self.beta, dtype=float)
        if arr.shape != (p,):
            raise ConfigError("coefficient vector has the wrong length")
        return arr

    def mu_blocks(self) -> list[np.ndarray]:
        if self.mu is None:
            return [np.zeros(self.layout.dim(k)) for k in self.layout.clients()]
        blocks = [np.asarray(m, dtype=float) for m in self.mu]
        if [b.shape[0] for b in blocks] != list(self.layout.client_dims):
            raise ConfigError("client mean dimensions do not match the layout")
        return blocks

    def sigma_blocks(self) -> list[np.ndarray]:
        dims = self.layout.client_dims
        if isinstance(self.sigma, str):
            if self.sigma != "identity":
                raise ConfigError(f"unknown covariance spec {self.sigma!r}")
            return [np.eye(d) for d in dims]
        if (isinstance(self.sigma, tuple) and len(self.sigma) == 2
                and self.sigma[0] == "equicorrelated"):
            rho_x = float(self.sigma[1])
            if not (-0.5 < rho_x < 1.0):
                raise ConfigError("equicorrelation parameter out of range")
            return [(1 - rho_x) * np.eye(d) + rho_x * np.ones((d, d)) for d in dims]
        blocks = [np.asarray(s, dtype=float) for s in self.sigma]
        if [b.shape[0] for b in blocks] != list(dims):
            raise ConfigError("client covariance dimensions do not match the layout")
        return blocks


@dataclass(frozen=True)
class GroundTruth:
    params: ModelParameters
    latent_blocks: tuple[np.ndarray, ...]   # pre-masking covariates (diagnostics)
    empirical_rates: tuple[float, ...]
    mechanism: str
    seed: int


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def _mar_intercept(z: np.ndarray, target: float) -> float:
    """Bisect the logistic intercept so the mean masking probability hits
    the requested marginal rate on the realized sample."""
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _sigmoid(mid + z).mean() < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _draw_mask(rng: np.random.Generator, cfg: GenConfig,
               y: np.ndarray) -> np.ndarray:
    n, K = cfg.n, cfg.layout.num_clients
    rates = cfg.rates()
    mask = np.zeros((n, K), dtype=bool)
    if cfg.mechanism == "mcar":
        draws = rng.random((n, K))
        for j, r in enumerate(rates):
            mask[:, j] = draws[:, j] < r
        return mask
    z = (y - y.mean()) / max(y.std(), 1e-12)
    draws = rng.random((n, K))
    for j, r in enumerate(rates):
        if r == 0.0:
            continue
        prob = _sigmoid(_mar_intercept(z, r) + z)
        mask[:, j] = draws[:, j] < prob
    return mask


def generate(cfg: GenConfig) -> tuple[VerticalDataset, GroundTruth]:
    """Draw one dataset under the generative model; bit-reproducible per seed."""
    rng = np.random.default_rng(cfg.seed)
    layout = cfg.layout
    mu = cfg.mu_blocks()
    sig = cfg.sigma_blocks()
    beta = cfg.beta_star()

    blocks = []
    for k in layout.clients():
        d = layout.dim(k)
        chol = np.linalg.cholesky(sig[k - 1] + 1e-12 * np.eye(d))
        blocks.append(mu[k - 1] + rng.standard_normal((cfg.n, d)) @ chol.T)
    noise = rng.standard_normal(cfg.n) * math.sqrt(cfg.sigma2)
    y = sum(blocks[k - 1] @ beta[layout.block_slice(k)]
            for k in layout.clients()) + noise

    mask = None
    for _ in range(cfg.max_retries):
        candidate = _draw_mask(rng, cfg, y)
        counts = (~candidate).sum(axis=0)
        if counts.min() >= cfg.min_complete:
            mask = candidate
            break
    if mask is None:
        raise MaskRetryExhausted(
            f"no mask with >= {cfg.min_complete} observed rows per client "
            f"after {cfg.max_retries} draws")

    dataset = make_dataset(layout, blocks, y, mask)
    truth = GroundTruth(
        params=ModelParameters(beta=beta, mu=tuple(mu),
                               sigma_blocks=tuple(sig), sigma2=cfg.sigma2),
        latent_blocks=tuple(b.copy() for b in blocks),
        empirical_rates=tuple(float(mask[:, j].mean())
                              for j in range(layout.num_clients)),
        mechanism=cfg.mechanism,
        seed=cfg.seed,
    )
    return dataset, truth


def smes_like_config(n: int = 100_000, seed: int = 0, **overrides) -> GenConfig:
    """Preset mirroring the motivating multi-institution missing rates."""
    kwargs = dict(n=n, layout=BlockLayout(SMES_LIKE_DIMS),
                  rho=SMES_LIKE_RATES, seed=seed)
    kwargs.update(overrides)
    return GenConfig(**kwargs)

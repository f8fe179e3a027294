"""Standard errors for the converged fit.

Pipeline: approximate the cross-product statistics of the pseudo-complete
design by averaged Gaussian sketches (clients only ever ship m x p_k
projections), assemble the conditional expectation of the complete-data
information matrix from those statistics, estimate the EM map's rate matrix
by forward differences, and combine them into the asymptotic covariance

    V = I_oc^{-1} (I - Gamma)^{-1},

whose beta block yields Wald standard errors, z scores, and p-values.

I_oc is stored per sample (the full-data information divided by n), so the
standard error of a coefficient is sqrt(V_jj / n). Two sketching choices are
exposed: clients may share one sketch matrix per replicate (derived from a
broadcast seed; cross-client blocks are then unbiased) or draw private ones
(cross-client blocks shrink toward zero), and within-client blocks may be
computed exactly instead of sketched ("hybrid", the default) since they never
leave their owner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats as spstats

from .centralized import em_map, estep
from .data import BlockLayout, ModelParameters, VerticalDataset, repair_psd
from .errors import ConfigError, NotAFixedPoint, SingularSystem

_EIG_FLOOR = 1e-10


# -- parameter vectorization -------------------------------------------------

class ThetaVectorizer:
    """Flatten parameters to a d-vector and back.

    Covariance blocks are parameterized by their lower triangles (one
    coordinate per distinct entry); perturbing an off-diagonal coordinate
    moves the two mirrored entries together. Duplicate coordinates would
    make the rate-matrix system singular.
    """

    def __init__(self, layout: BlockLayout, scope: str = "full",
                 beta_names: Optional[list[str]] = None):
        if scope not in ("beta", "full"):
            raise ConfigError("scope must be 'beta' or 'full'")
        self.layout = layout
        self.scope = scope
        p = layout.total_dim
        if beta_names is None:
            beta_names = [f"x{k}_{j + 1}" for k in layout.clients()
                          for j in range(layout.dim(k))]
        if len(beta_names) != p:
            raise ConfigError("need one name per coefficient")
        self.beta_names = list(beta_names)
        self.beta_slice = slice(0, p)
        names = [f"beta[{nm}]" for nm in beta_names]
        if scope == "full":
            self.mu_slices, self.vech_slices = {}, {}
            self._tril = {}
            off = p
            for k in layout.clients():
                pk = layout.dim(k)
                self.mu_slices[k] = slice(off, off + pk)
                names += [f"mu{k}[{j + 1}]" for j in range(pk)]
                off += pk
            for k in layout.clients():
                pk = layout.dim(k)
                rows, cols = np.tril_indices(pk)
                self._tril[k] = (rows, cols)
                self.vech_slices[k] = slice(off, off + rows.size)
                names += [f"cov{k}[{a + 1},{b + 1}]" for a, b in zip(rows, cols)]
                off += rows.size
            self.sigma2_index = off
            names.append("sigma2")
            self.dim = off + 1
        else:
            self.dim = p
        self.names = names

    def to_vector(self, theta: ModelParameters) -> np.ndarray:
        if self.scope == "beta":
            return theta.beta.copy()
        parts = [theta.beta] + [theta.mu[k - 1] for k in self.layout.clients()]
        for k in self.layout.clients():
            rows, cols = self._tril[k]
            parts.append(theta.sigma_blocks[k - 1][rows, cols])
        parts.append(np.array([theta.sigma2]))
        return np.concatenate(parts)

    def from_vector(self, vec: np.ndarray,
                    template: ModelParameters) -> ModelParameters:
        if self.scope == "beta":
            return template.replace(beta=np.asarray(vec, dtype=float))
        vec = np.asarray(vec, dtype=float)
        beta = vec[self.beta_slice]
        mu = tuple(vec[self.mu_slices[k]] for k in self.layout.clients())
        blocks = []
        for k in self.layout.clients():
            pk = self.layout.dim(k)
            rows, cols = self._tril[k]
            s = np.zeros((pk, pk))
            s[rows, cols] = vec[self.vech_slices[k]]
            s = s + np.tril(s, -1).T
            blocks.append(s)
        return ModelParameters(beta=beta, mu=mu, sigma_blocks=tuple(blocks),
                               sigma2=float(vec[self.sigma2_index]))


# -- sketched statistics -----------------------------------------------------

@dataclass
class SketchConfig:
    """Sketch sizing and mode.

    `m` defaults to K * ceil(log n). The replicate count targets
    L*m >= 8 K^2 n log(n) / delta, capped at `lm_cap` for desk scale.
    """

    m: Optional[int] = None
    replicates: Optional[int] = None
    delta: float = 100.0
    lm_cap: int = 4096
    seed: int = 0
    shared: bool = True              # one sketch per replicate via seed broadcast
    exact_within_block: bool = True  # hybrid: local products computed exactly

    def __post_init__(self):
        if self.m is not None and self.m < 1:
            raise ConfigError("sketch dimension must be >= 1")
        if self.replicates is not None and self.replicates < 1:
            raise ConfigError("replicate count must be >= 1")

    def resolve(self, n: int, num_clients: int) -> tuple[int, int]:
        m = self.m if self.m is not None else num_clients * math.ceil(math.log(n))
        m = max(1, int(m))
        if self.replicates is not None:
            return m, int(self.replicates)
        target = 8.0 * num_clients ** 2 * n * math.log(n) / self.delta
        lm = min(target, float(self.lm_cap))
        return m, max(1, math.ceil(lm / m))


@dataclass
class SketchedStatistics:
    """Cross-product summaries of the pseudo-complete design.

    xx ~ X~'X~, centered_xx ~ Xc'Xc with Xc = X~ - 1 mu', xe ~ X~'e,
    xsum ~ X~'1, centered_xsum ~ Xc'1.
    """

    xx: np.ndarray
    centered_xx: np.ndarray
    xe: np.ndarray
    xsum: np.ndarray
    centered_xsum: np.ndarray
    sketch_dim: int
    replicates: int
    shared: bool
    exact_within_block: bool
    exact: bool = False


def exact_statistics(pseudo_blocks: list[np.ndarray], residuals: np.ndarray,
                     mu_blocks: list[np.ndarray]) -> SketchedStatistics:
    """The same statistics computed directly (oracle / no-sketch path)."""
    x = np.concatenate(pseudo_blocks, axis=1)
    mu = np.concatenate(mu_blocks)
    xc = x - mu
    return SketchedStatistics(
        xx=x.T @ x, centered_xx=xc.T @ xc, xe=x.T @ residuals,
        xsum=x.sum(axis=0), centered_xsum=xc.sum(axis=0),
        sketch_dim=0, replicates=0, shared=True, exact_within_block=True,
        exact=True)


def sketch_statistics(pseudo_blocks: list[np.ndarray], residuals: np.ndarray,
                      mu_blocks: list[np.ndarray], layout: BlockLayout,
                      cfg: SketchConfig) -> SketchedStatistics:
    """Replicate-averaged Gaussian sketches of the design cross-products.

    Per replicate each client projects its pseudo-complete block (and its
    centered version) to m rows and ships the projections; the residual
    product uses a separate server-side sketch of e.
    """
    n = pseudo_blocks[0].shape[0]
    K = layout.num_clients
    p = layout.total_dim
    m, L = cfg.resolve(n, K)
    root = np.random.SeedSequence(cfg.seed)
    scale = 1.0 / math.sqrt(m)
    e = np.asarray(residuals, dtype=float)

    xx = np.zeros((p, p))
    cxx = np.zeros((p, p))
    xe = np.zeros(p)
    xsum = np.zeros(p)
    cxsum = np.zeros(p)
    ones = np.ones(m)

    for child in root.spawn(L):
        if cfg.shared:
            rng = np.random.default_rng(child)
            g_a = rng.standard_normal((m, n))
            g_b = rng.standard_normal((m, n))
            g_0 = rng.standard_normal((m, n))
            proj_a = [scale * (g_a @ blk) for blk in pseudo_blocks]
            proj_b = [scale * (g_b @ (blk - mu))
                      for blk, mu in zip(pseudo_blocks, mu_blocks)]
        else:
            subs = child.spawn(K + 1)
            proj_a, proj_b = [], []
            for blk, mu, sub in zip(pseudo_blocks, mu_blocks, subs[:K]):
                rng_k = np.random.default_rng(sub)
                proj_a.append(scale * (rng_k.standard_normal((m, n)) @ blk))
                proj_b.append(scale * (rng_k.standard_normal((m, n)) @ (blk - mu)))
            g_0 = np.random.default_rng(subs[K]).standard_normal((m, n))
        sa = np.concatenate(proj_a, axis=1)
        sb = np.concatenate(proj_b, axis=1)
        xx += sa.T @ sa
        cxx += sb.T @ sb
        xe += sa.T @ (scale * (g_0 @ e))
        xsum += sa.T @ ones
        cxsum += sb.T @ ones

    xx = 0.5 * (xx + xx.T) / L
    cxx = 0.5 * (cxx + cxx.T) / L
    xe /= L
    xsum /= L
    cxsum /= L

    if cfg.exact_within_block:
        for k in layout.clients():
            sl = layout.block_slice(k)
            blk = pseudo_blocks[k - 1]
            xx[sl, sl] = blk.T @ blk
            centered = blk - mu_blocks[k - 1]
            cxx[sl, sl] = centered.T @ centered
            xsum[sl] = blk.sum(axis=0)
            cxsum[sl] = centered.sum(axis=0)

    return SketchedStatistics(xx=xx, centered_xx=cxx, xe=xe, xsum=xsum,
                              centered_xsum=cxsum, sketch_dim=m, replicates=L,
                              shared=cfg.shared,
                              exact_within_block=cfg.exact_within_block)


# -- information matrix ------------------------------------------------------

def _sym_basis(pk: int, a: int, b: int) -> np.ndarray:
    basis = np.zeros((pk, pk))
    basis[a, b] = 1.0
    basis[b, a] = 1.0
    return basis


def assemble_information(stats: SketchedStatistics, theta: ModelParameters,
                         corrections: np.ndarray, resid_sumsq: float, n: int,
                         vectorizer: ThetaVectorizer) -> tuple[np.ndarray, bool]:
    """Per-sample information matrix at `theta` from summary statistics.

    The coefficient block is (X~'X~ + sum of embedded conditional
    covariances) / (n sigma2); the remaining Gaussian blocks follow from
    differentiating the expected complete-data objective twice (validated
    against finite differences in the test suite). Indefinite results from
    sketch noise are clamped, with the repair flagged.
    """
    layout = vectorizer.layout
    beta, sigma2 = theta.beta, theta.sigma2
    c_mat = corrections
    beta_block = (stats.xx + c_mat) / (n * sigma2)

    if vectorizer.scope == "beta":
        info = 0.5 * (beta_block + beta_block.T)
    else:
        d = vectorizer.dim
        info = np.zeros((d, d))
        bsl = vectorizer.beta_slice
        info[bsl, bsl] = beta_block
        s2 = vectorizer.sigma2_index
        cross = (stats.xe - c_mat @ beta) / (n * sigma2 ** 2)
        info[bsl, s2] = cross
        info[s2, bsl] = cross
        expected_rss = resid_sumsq + float(beta @ c_mat @ beta)
        info[s2, s2] = -0.5 / sigma2 ** 2 + expected_rss / (n * sigma2 ** 3)

        for k in layout.clients():
            pk = layout.dim(k)
            sig = theta.sigma_blocks[k - 1]
            sig_inv = np.linalg.inv(sig)
            musl = vectorizer.mu_slices[k]
            info[musl, musl] = sig_inv

            bsl_k = layout.block_slice(k)
            t_k = stats.centered_xsum[bsl_k]
            s_hat = stats.centered_xx[bsl_k, bsl_k] + c_mat[bsl_k, bsl_k]
            w = sig_inv @ s_hat

            rows, cols = vectorizer._tril[k]
            vsl = vectorizer.vech_slices[k]
            projected = [sig_inv @ _sym_basis(pk, a, b)
                         for a, b in zip(rows, cols)]
            for j, p_ab in enumerate(projected):
                info[musl, vsl.start + j] = (p_ab @ sig_inv @ t_k) / n
                info[vsl.start + j, musl] = info[musl, vsl.start + j]
            for j1, p_ab in enumerate(projected):
                pw = p_ab @ w
                for j2 in range(j1, len(projected)):
                    p_cd = projected[j2]
                    val = -0.5 * np.trace(p_cd @ p_ab)
                    val += 0.5 * (np.trace(p_cd @ pw) + np.trace(p_ab @ p_cd @ w)) / n
                    info[vsl.start + j1, vsl.start + j2] = val
                    info[vsl.start + j2, vsl.start + j1] = val
        info = 0.5 * (info + info.T)

    vals, vecs = np.linalg.eigh(info)
    repaired = bool(vals.min() < _EIG_FLOOR)
    if repaired:
        vals = np.maximum(vals, _EIG_FLOOR)
        info = (vecs * vals) @ vecs.T
    return info, repaired


# -- EM-map rate matrix ------------------------------------------------------

def sem_jacobian(theta_hat: ModelParameters, data: VerticalDataset,
                 vectorizer: ThetaVectorizer, base_step: float = 1e-4,
                 fixed_point_tol: float = 1e-6) -> np.ndarray:
    """Forward-difference Jacobian of the EM map at its fixed point.

    Entry (i, j) is (F_j(theta + h_i e_i) - F_j(theta)) / h_i with the
    per-coordinate step h_i = base_step * (1 + |theta_i|). The map uses the
    closed-form maximization; in 'beta' scope the nuisance parameters stay
    pinned at their estimates.
    """
    if base_step <= 0:
        raise ConfigError("step must be positive")
    nuisance_free = vectorizer.scope == "beta"
    v0 = vectorizer.to_vector(theta_hat)
    f0_params = em_map(theta_hat, data, nuisance_free=nuisance_free)
    f0 = vectorizer.to_vector(f0_params)
    drift = np.abs(f0 - v0).max() if v0.size else 0.0
    if drift > fixed_point_tol:
        raise NotAFixedPoint(
            f"EM map moves the point by {drift:.3e} (> {fixed_point_tol:g}); "
            f"tighten the fit tolerance before requesting standard errors")

    d = vectorizer.dim
    gamma = np.zeros((d, d))
    for i in range(d):
        h_i = base_step * (1.0 + abs(float(v0[i])))
        pert = v0.copy()
        pert[i] += h_i
        theta_i = vectorizer.from_vector(pert, theta_hat)
        f_i = vectorizer.to_vector(em_map(theta_i, data,
                                          nuisance_free=nuisance_free))
        gamma[i, :] = (f_i - f0) / h_i
    return gamma


# -- covariance and report ---------------------------------------------------

@dataclass
class InferenceReport:
    names: list[str]
    estimates: np.ndarray
    std_errors: np.ndarray
    z_scores: np.ndarray
    p_values: np.ndarray
    significant: np.ndarray          # bool, 5% two-sided
    cov_beta: np.ndarray             # asymptotic covariance of sqrt(n) beta_hat
    n: int
    gamma_spectral_radius: float
    ioc_repaired: bool
    v_repaired: bool
    scope: str
    stats_mode: str
    sketch_dim: int = 0
    sketch_replicates: int = 0
    sketch_shared: bool = True
    sketch_exact_within: bool = True

    def rows(self) -> list[tuple]:
        return [(nm, float(b), float(se), float(z), float(p), "*" if s else "")
                for nm, b, se, z, p, s in zip(
                    self.names, self.estimates, self.std_errors,
                    self.z_scores, self.p_values, self.significant)]

    def to_csv_text(self) -> str:
        lines = ["name,estimate,std_error,z,p_value,significant"]
        for nm, b, se, z, p, star in self.rows():
            lines.append(f"{nm},{b!r},{se!r},{z!r},{p!r},{star}")
        return "\n".join(lines) + "\n"

    def to_pretty_text(self) -> str:
        width = max(len(nm) for nm in self.names)
        head = (f"{'coefficient':<{width}}  {'estimate':>12}  {'std.err':>12}  "
                f"{'z':>9}  {'p':>10}")
        out = [head, "-" * len(head)]
        for nm, b, se, z, p, star in self.rows():
            out.append(f"{nm:<{width}}  {b:>12.6f}  {se:>12.6f}  "
                       f"{z:>9.3f}  {p:>10.3e} {star}")
        out.append("-" * len(head))
        out.append(f"rate-matrix spectral radius: {self.gamma_spectral_radius:.6f}")
        out.append(f"information repaired: {self.ioc_repaired}; "
                   f"covariance repaired: {self.v_repaired}")
        return "\n".join(out) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "names": self.names,
            "estimates": self.estimates.tolist(),
            "std_errors": self.std_errors.tolist(),
            "z_scores": self.z_scores.tolist(),
            "p_values": self.p_values.tolist(),
            "significant": [bool(s) for s in self.significant],
            "cov_beta": self.cov_beta.tolist(),
            "n": self.n,
            "gamma_spectral_radius": self.gamma_spectral_radius,
            "ioc_repaired": self.ioc_repaired,
            "v_repaired": self.v_repaired,
            "scope": self.scope,
            "stats_mode": self.stats_mode,
            "sketch_dim": self.sketch_dim,
            "sketch_replicates": self.sketch_replicates,
            "sketch_shared": self.sketch_shared,
            "sketch_exact_within": self.sketch_exact_within,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "InferenceReport":
        return cls(
            names=list(obj["names"]),
            estimates=np.asarray(obj["estimates"], dtype=float),
            std_errors=np.asarray(obj["std_errors"], dtype=float),
            z_scores=np.asarray(obj["z_scores"], dtype=float),
            p_values=np.asarray(obj["p_values"], dtype=float),
            significant=np.asarray(obj["significant"], dtype=bool),
            cov_beta=np.asarray(obj["cov_beta"], dtype=float),
            n=int(obj["n"]),
            gamma_spectral_radius=float(obj["gamma_spectral_radius"]),
            ioc_repaired=bool(obj["ioc_repaired"]),
            v_repaired=bool(obj["v_repaired"]),
            scope=str(obj["scope"]),
            stats_mode=str(obj["stats_mode"]),
            sketch_dim=int(obj["sketch_dim"]),
            sketch_replicates=int(obj["sketch_replicates"]),
            sketch_shared=bool(obj["sketch_shared"]),
            sketch_exact_within=bool(obj["sketch_exact_within"]),
        )


def asymptotic_covariance(info: np.ndarray, gamma: np.ndarray,
                          theta: ModelParameters, n: int,
                          vectorizer: ThetaVectorizer,
                          ioc_repaired: bool = False,
                          stats_mode: str = "exact",
                          sketch_meta: Optional[dict] = None) -> InferenceReport:
    """V = info^{-1} (I - Gamma)^{-1}; Wald table for the coefficients."""
    d = info.shape[0]
    eigvals = np.linalg.eigvals(gamma)
    rho = float(np.abs(eigvals).max()) if d else 0.0
    system = (np.eye(d) - gamma) @ info
    cond = np.linalg.cond(system)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularSystem(
            f"(I - Gamma) info has condition number {cond:.3e}; "
            f"rate-matrix spectral radius {rho:.4f}")
    v = np.linalg.inv(system)

    bsl = vectorizer.beta_slice
    v_beta = v[bsl, bsl]
    v_beta = 0.5 * (v_beta + v_beta.T)
    vals = np.linalg.eigvalsh(v_beta)
    floor = max(_EIG_FLOOR * max(1.0, float(np.abs(vals).max())), 1e-300)
    v_repaired = bool(vals.min() < 0.0)
    if v_repaired:
        v_beta = repair_psd(v_beta, floor=floor)

    se = np.sqrt(np.diag(v_beta) / n)
    if not np.all(np.isfinite(se)) or np.any(se <= 0):
        raise SingularSystem("covariance produced non-positive standard errors")
    est = theta.beta
    z = est / se
    p_vals = 2.0 * spstats.norm.sf(np.abs(z))
    meta = sketch_meta or {}
    return InferenceReport(
        names=vectorizer.beta_names, estimates=est.copy(), std_errors=se,
        z_scores=z, p_values=p_vals, significant=p_vals < 0.05,
        cov_beta=v_beta, n=n, gamma_spectral_radius=rho,
        ioc_repaired=ioc_repaired, v_repaired=v_repaired,
        scope=vectorizer.scope, stats_mode=stats_mode,
        sketch_dim=meta.get("sketch_dim", 0),
        sketch_replicates=meta.get("replicates", 0),
        sketch_shared=meta.get("shared", True),
        sketch_exact_within=meta.get("exact_within_block", True),
    )


@dataclass
class InferenceConfig:
    scope: str = "beta"              # 'beta' pins the nuisance parameters
    stats_mode: str = "sketch"       # 'sketch' or 'exact'
    sketch: SketchConfig = field(default_factory=SketchConfig)
    fd_step: float = 1e-4
    fixed_point_tol: float = 1e-6
    beta_names: Optional[list[str]] = None

    def __post_init__(self):
        if self.scope not in ("beta", "full"):
            raise ConfigError("scope must be 'beta' or 'full'")
        if self.stats_mode not in ("sketch", "exact"):
            raise ConfigError("stats_mode must be 'sketch' or 'exact'")


def run_inference(theta: ModelParameters, data: VerticalDataset,
                  cfg: Optional[InferenceConfig] = None) -> InferenceReport:
    """Full pipeline from a converged parameter estimate to a Wald table."""
    cfg = cfg or InferenceConfig()
    layout = data.layout
    vec = ThetaVectorizer(layout, scope=cfg.scope, beta_names=cfg.beta_names)
    cache = estep(theta, data)
    blocks = [cache.x_tilde[:, layout.block_slice(k)] for k in layout.clients()]
    mu_blocks = [theta.mu[k - 1] for k in layout.clients()]
    if cfg.stats_mode == "exact":
        stats = exact_statistics(blocks, cache.e, mu_blocks)
    else:
        stats = sketch_statistics(blocks, cache.e, mu_blocks, layout, cfg.sketch)
    resid_sumsq = float(cache.e @ cache.e)
    info, repaired = assemble_information(stats, theta, cache.corrections,
                                          resid_sumsq, data.n, vec)
    gamma = sem_jacobian(theta, data, vec, base_step=cfg.fd_step,
                         fixed_point_tol=cfg.fixed_point_tol)
    meta = {"sketch_dim": stats.sketch_dim, "replicates": stats.replicates,
            "shared": stats.shared, "exact_within_block": stats.exact_within_block}
    return asymptotic_covariance(info, gamma, theta, data.n, vec,
                                 ioc_repaired=repaired,
                                 stats_mode=cfg.stats_mode, sketch_meta=meta)

"""Standard errors and confidence intervals for the fitted model.

``beta`` uses the plug-in covariance ``sigma2 (X' Sigma^{-1} X)^{-1}``.
``theta`` has no closed-form covariance here; its standard errors come from
refitting on non-overlapping spatial blocks.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .errors import SingularDesign, StqmleError, TooFewBlocks
from .likelihood import COND_LIMIT, gls_system
from .model import DependenceParams, ModelParams, PanelData, SpatialWeights
from .sparse_band import SymSparseMatrix

log = logging.getLogger(__name__)

MIN_BLOCKS = 4
MIN_BLOCK_CELLS = 100
MAX_FAILED_FRACTION = 0.2


def beta_covariance(data: PanelData, theta_hat: DependenceParams, sigma2_hat, w: SpatialWeights):
    """Plug-in covariance ``sigma2_hat (X' Sigma^{-1}(theta_hat) X)^{-1}`` of ``beta_hat``."""
    XtX, _ = gls_system(data, theta_hat, w)
    cond = np.linalg.cond(XtX)
    if not cond <= COND_LIMIT:
        raise SingularDesign(f"X' Sigma^-1 X is ill-conditioned (cond={cond:.3g})", cond)
    cov = float(sigma2_hat) * np.linalg.inv(XtX)
    return 0.5 * (cov + cov.T)


def critical_value(alpha):
    """Two-sided standard normal critical value ``z_{1 - alpha/2}``."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if alpha == 1.0:
        return 0.0
    return NormalDist().inv_cdf(1.0 - alpha / 2.0)


@dataclass
class SubsamplingResult:
    se: np.ndarray
    block_count: int
    block_cells: float
    block_thetas: np.ndarray
    failed_blocks: list = field(default_factory=list)

    def to_dict(self):
        return {
            "se": self.se.tolist(),
            "block_count": self.block_count,
            "block_cells": self.block_cells,
            "block_thetas": self.block_thetas.tolist(),
            "failed_blocks": self.failed_blocks,
        }


@dataclass
class InferenceReport:
    beta_hat: np.ndarray
    beta_se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    alpha: float
    theta_hat: DependenceParams
    sigma2_hat: float
    theta_se: np.ndarray | None = None
    beta_cov: np.ndarray | None = None
    methods: dict = field(default_factory=dict)
    caveats: list = field(default_factory=list)
    subsampling: SubsamplingResult | None = None

    def to_dict(self):
        out = {
            "beta_hat": self.beta_hat.tolist(),
            "beta_se": self.beta_se.tolist(),
            "ci_lower": self.ci_lower.tolist(),
            "ci_upper": self.ci_upper.tolist(),
            "ci_level": 1.0 - self.alpha,
            "theta_hat": self.theta_hat.to_dict(),
            "theta_se": None if self.theta_se is None else dict(zip(("lambda", "gamma", "rho"), self.theta_se.tolist())),
            "sigma2_hat": self.sigma2_hat,
            "beta_cov": None if self.beta_cov is None else self.beta_cov.tolist(),
            "methods": self.methods,
            "caveats": self.caveats,
        }
        if self.subsampling is not None:
            out["subsampling"] = self.subsampling.to_dict()
        return out

    def coefficient_rows(self):
        """Flat rows ``(name, estimate, se, ci_lower, ci_upper)`` for a CSV table."""
        rows = []
        for j, b in enumerate(self.beta_hat):
            rows.append((f"beta{j}", b, self.beta_se[j], self.ci_lower[j], self.ci_upper[j]))
        z = critical_value(self.alpha)
        for j, name in enumerate(("lambda", "gamma", "rho")):
            est = self.theta_hat.as_array()[j]
            if self.theta_se is None:
                rows.append((name, est, math.nan, math.nan, math.nan))
            else:
                se = self.theta_se[j]
                rows.append((name, est, se, est - z * se, est + z * se))
        rows.append(("sigma2", self.sigma2_hat, math.nan, math.nan, math.nan))
        return rows

    def coefficients_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["parameter", "estimate", "se", "ci_lower", "ci_upper"])
        for name, *vals in self.coefficient_rows():
            writer.writerow([name] + [repr(float(v)) for v in vals])
        return buf.getvalue()


def confidence_intervals(beta_hat, beta_cov, alpha=0.05, theta_hat=None, sigma2_hat=math.nan, **extra) -> InferenceReport:
    """Wald intervals ``beta_hat +- z_{1-alpha/2} se`` with normal critical values."""
    beta_hat = np.asarray(beta_hat, dtype=np.float64)
    se = np.sqrt(np.diag(np.asarray(beta_cov, dtype=np.float64)))
    z = critical_value(alpha)
    return InferenceReport(
        beta_hat=beta_hat,
        beta_se=se,
        ci_lower=beta_hat - z * se,
        ci_upper=beta_hat + z * se,
        alpha=float(alpha),
        theta_hat=theta_hat if theta_hat is not None else DependenceParams.zero(),
        sigma2_hat=float(sigma2_hat),
        beta_cov=np.asarray(beta_cov, dtype=np.float64),
        methods={"beta_se": "plug-in", "critical_value": "normal"},
        **extra,
    )


def infer(data: PanelData, params: ModelParams, w: SpatialWeights, alpha=0.05) -> InferenceReport:
    """Plug-in report for a fitted ``params``."""
    cov = beta_covariance(data, params.theta, params.sigma2, w)
    return confidence_intervals(params.beta, cov, alpha, params.theta, params.sigma2)


def spatial_blocks(coords, block_side):
    """Group cells into non-overlapping square blocks of ``block_side`` coordinate units.

    Returns a list of index arrays (original cell order), ordered by block row
    then block column.
    """
    coords = np.asarray(coords, dtype=np.float64)
    origin = coords.min(axis=0)
    cell = np.floor((coords - origin) / block_side + 1e-9).astype(np.int64)
    keys = cell[:, 0] * (int(cell[:, 1].max()) + 1) + cell[:, 1]
    order = np.argsort(keys, kind="stable")
    uniq, starts = np.unique(keys[order], return_index=True)
    return [np.sort(part) for part in np.split(order, starts[1:])]


def default_block_side(N):
    return math.ceil(math.sqrt(N) / 3.0)


def _fit_block(payload):
    from .optimizer import fit

    data, w, cfg = payload
    try:
        params, diag = fit(data, w, cfg)
    except StqmleError as exc:
        return exc
    return params.theta.as_array(), diag.converged


def theta_subsampling_se(
    data: PanelData,
    w: SpatialWeights,
    cfg=None,
    block_side=None,
    min_cells=MIN_BLOCK_CELLS,
    min_blocks=MIN_BLOCKS,
    executor=None,
) -> SubsamplingResult:
    """Block-subsampling standard errors of ``theta_hat``.

    Each block is refitted with ``W`` restricted to its cells. The spread of
    the block estimates is rescaled by ``sqrt(n_block / N)``.
    """
    if w.coords is None:
        raise TooFewBlocks("weights carry no coordinates, so spatial blocks cannot be formed")
    if w.source is None:
        raise TooFewBlocks("weights were built without the original sparse matrix")
    side = default_block_side(w.N) if block_side is None else block_side
    blocks = [b for b in spatial_blocks(w.coords, side) if b.size >= min_cells]
    if len(blocks) < min_blocks:
        raise TooFewBlocks(f"only {len(blocks)} blocks with at least {min_cells} cells (need {min_blocks})")
    csr = w.source.csr
    payloads = []
    for cells in blocks:
        sub = SymSparseMatrix(csr[cells][:, cells])
        wb = SpatialWeights.from_sparse(sub, coords=w.coords[cells])
        payloads.append((data.subset(cells), wb, cfg))
    mapper = executor.map if executor is not None else map
    thetas, failed = [], []
    for i, out in enumerate(mapper(_fit_block, payloads)):
        if isinstance(out, Exception):
            failed.append({"block": i, "error": f"{type(out).__name__}: {out}"})
        else:
            thetas.append(out[0])
    if len(failed) >= MAX_FAILED_FRACTION * len(blocks):
        raise StqmleError(f"{len(failed)} of {len(blocks)} block fits failed")
    if failed:
        warnings.warn(f"{len(failed)} block fits failed and were excluded", RuntimeWarning, stacklevel=2)
    thetas = np.asarray(thetas)
    n_block = float(np.mean([b.size for b in blocks]))
    se = math.sqrt(n_block / w.N) * np.std(thetas, axis=0, ddof=1)
    return SubsamplingResult(se, len(thetas), n_block, thetas, failed)


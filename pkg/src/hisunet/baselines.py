"""Persistence and per-pixel linear regression forecasters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LAST_DAY_TARGET_CHANNELS, Sample

RIDGE = 1e-8


class Persistence:
    """Tomorrow equals the most recent day."""

    kind = "persistence"

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        return x[:, list(LAST_DAY_TARGET_CHANNELS)].copy(), None


def persistence_predict(sample: Sample) -> np.ndarray:
    return Persistence().predict(sample.input)[0]


@dataclass
class LinRegCoeffs:
    coef: np.ndarray  # (H, W, n_inputs, 3)
    fitted: np.ndarray  # (H, W) bool
    ridged: np.ndarray  # (H, W) bool, ridge fallback used


def linreg_fit_arrays(X: np.ndarray, Y: np.ndarray, M: np.ndarray | None = None,
                      min_samples: int | None = None) -> LinRegCoeffs:
    """Independent least-squares fit per pixel and per output.

    ``X`` is ``(N, K, H, W)``, ``Y`` is ``(N, 3, H, W)``, ``M`` is ``(N, H, W)``
    validity. Pixels with fewer than ``min_samples`` (default ``K``) valid
    samples stay unfit. Rank-deficient normal equations get a ridge of 1e-8.
    """
    N, K, H, W = X.shape
    if M is None:
        M = np.ones((N, H, W), dtype=bool)
    min_samples = K if min_samples is None else min_samples
    Xp = X.reshape(N, K, H * W).astype(np.float64)
    Yp = Y.reshape(N, Y.shape[1], H * W).astype(np.float64)
    Mp = M.reshape(N, H * W).astype(np.float64)

    Xm = Xp * Mp[:, None]
    gram = np.einsum("nkp,nlp->pkl", Xm, Xp)
    rhs = np.einsum("nkp,njp->pkj", Xm, Yp)
    count = Mp.sum(axis=0)
    fitted = count >= min_samples

    rank = np.linalg.matrix_rank(gram, hermitian=True)
    ridged = fitted & (rank < K)
    gram = gram + np.where(ridged | ~fitted, RIDGE, 0.0)[:, None, None] * np.eye(K)
    # unfit pixels: solve a harmless identity system, zeroed below
    gram[~fitted] = np.eye(K)
    coef = np.linalg.solve(gram, rhs)
    coef[~fitted] = 0.0
    return LinRegCoeffs(coef.reshape(H, W, K, -1), fitted.reshape(H, W), ridged.reshape(H, W))


def linreg_fit(samples: list[Sample]) -> LinRegCoeffs:
    X = np.concatenate([s.input for s in samples])
    Y = np.concatenate([s.target for s in samples])
    M = np.stack([s.mask for s in samples])
    return linreg_fit_arrays(X, Y, M)


def linreg_predict(coeffs: LinRegCoeffs, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``sum_k a_k(i, j) x_k(i, j)``; unfit pixels are NaN and flagged invalid."""
    pred = np.einsum("bkhw,hwkj->bjhw", x.astype(np.float64), coeffs.coef)
    pred[:, :, ~coeffs.fitted] = np.nan
    return pred, coeffs.fitted


class LinearRegression:
    kind = "linreg"

    def __init__(self, coeffs: LinRegCoeffs | None = None):
        self.coeffs = coeffs

    def fit(self, samples: list[Sample]) -> "LinearRegression":
        self.coeffs = linreg_fit(samples)
        return self

    def predict(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        if self.coeffs is None:
            raise RuntimeError("LinearRegression.predict before fit")
        return linreg_predict(self.coeffs, x)

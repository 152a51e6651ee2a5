"""Realism and diversity metrics over occupancy grids and feature sets.

Feature extraction networks are out of scope: the distributional metrics
(Vendi, MMD, KID, FID) operate on externally supplied N x D feature matrices.
"""

from __future__ import annotations

import struct

import numpy as np


# --- semantic-space metrics -------------------------------------------------

def miou(a, b, classes):
    """Per-class IoU and their mean; classes absent from both grids are
    excluded from the mean."""
    la = a.labels if hasattr(a, "labels") else np.asarray(a)
    lb = b.labels if hasattr(b, "labels") else np.asarray(b)
    if la.shape != lb.shape:
        raise ValueError("grids must share dimensions")
    per_class = {}
    present = []
    for c in classes:
        in_a = la == c
        in_b = lb == c
        union = int(np.logical_or(in_a, in_b).sum())
        if union == 0:
            per_class[c] = None
            continue
        inter = int(np.logical_and(in_a, in_b).sum())
        per_class[c] = inter / union
        present.append(inter / union)
    mean = float(np.mean(present)) if present else 0.0
    return per_class, mean


def pairwise_diversity(rollouts, classes):
    """Complement of the mean pairwise mIoU over all unordered rollout pairs,
    per timestep, plus the time mean.

    ``rollouts`` is a list of N frame sequences of equal length.
    """
    n = len(rollouts)
    if n < 2:
        raise ValueError("diversity needs at least two rollouts")
    steps = len(rollouts[0])
    d_t = []
    for t in range(steps):
        vals = []
        for i in range(n):
            for j in range(i + 1, n):
                _, m = miou(rollouts[i][t], rollouts[j][t], classes)
                vals.append(m)
        d_t.append(1.0 - float(np.mean(vals)))
    return d_t, float(np.mean(d_t))


# --- feature-space metrics --------------------------------------------------

def vendi(features: np.ndarray) -> float:
    """Exponential of the von Neumann entropy of the trace-normalized cosine
    kernel Q_ij = (1 + x_i . x_j) / 2 over l2-normalized rows."""
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or len(x) < 1:
        raise ValueError("features must be a nonempty N x D matrix")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero feature vector")
    xn = x / norms[:, None]
    q = (1.0 + xn @ xn.T) / 2.0
    q_hat = q / np.trace(q)
    lam = np.linalg.eigvalsh(q_hat)
    lam = np.clip(lam, 0.0, None)  # clamp eigensolver noise in [-1e-10, 0]
    nz = lam[lam > 0]
    entropy = -float((nz * np.log(nz)).sum())
    return float(np.exp(entropy))


def gaussian_kernel(x: np.ndarray, y: np.ndarray, sigma: float) -> np.ndarray:
    d2 = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-d2 / (2.0 * sigma ** 2))


def polynomial_kernel(x: np.ndarray, y: np.ndarray, degree: int = 3,
                      coef: float = 1.0) -> np.ndarray:
    D = x.shape[1]
    return (x @ y.T / D + coef) ** degree


def mmd(x: np.ndarray, y: np.ndarray, kernel: str = "gaussian",
        sigma: float = 1.0, degree: int = 3, coef: float = 1.0) -> float:
    """Unbiased squared-MMD U-statistic: off-diagonal within-set means plus
    the full cross-set mean."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ValueError("each set needs at least two samples")
    if kernel == "gaussian":
        kxx = gaussian_kernel(x, x, sigma)
        kyy = gaussian_kernel(y, y, sigma)
        kxy = gaussian_kernel(x, y, sigma)
    elif kernel == "polynomial":
        kxx = polynomial_kernel(x, x, degree, coef)
        kyy = polynomial_kernel(y, y, degree, coef)
        kxy = polynomial_kernel(x, y, degree, coef)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    sum_xy = kxy.mean()
    return float(sum_xx + sum_yy - 2.0 * sum_xy)


def kid(x: np.ndarray, y: np.ndarray) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel (x.y/D + 1)^3."""
    return mmd(x, y, kernel="polynomial", degree=3, coef=1.0)


def fid(x: np.ndarray, y: np.ndarray, eig_floor: float = 1e-10):
    """Frechet distance between Gaussian fits of two feature sets.

    tr((Sx Sy)^{1/2}) is computed through the symmetric product
    Sx^{1/2} Sy Sx^{1/2}. Returns (value, flagged) where flagged marks a
    singular covariance handled with the eigenvalue floor.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 2 or len(y) < 2:
        raise ValueError("each set needs at least two samples")
    mu_x, mu_y = x.mean(axis=0), y.mean(axis=0)
    cx = np.cov(x, rowvar=False)
    cy = np.cov(y, rowvar=False)
    cx = np.atleast_2d(cx)
    cy = np.atleast_2d(cy)

    flagged = False

    def psd_sqrt(c):
        nonlocal flagged
        w, v = np.linalg.eigh(c)
        if np.any(w < eig_floor):
            flagged = True
            w = np.maximum(w, eig_floor)
        return (v * np.sqrt(w)) @ v.T

    sx_half = psd_sqrt(cx)
    inner = sx_half @ cy @ sx_half
    w = np.linalg.eigvalsh(inner)
    w = np.clip(w, 0.0, None)
    tr_sqrt = float(np.sqrt(w).sum())
    value = float(((mu_x - mu_y) ** 2).sum() + np.trace(cx) + np.trace(cy) - 2.0 * tr_sqrt)
    return max(value, 0.0), flagged


# --- feature file container -------------------------------------------------

def write_features(x: np.ndarray, path) -> None:
    x = np.asarray(x, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(b"FEATSET1")
        fh.write(struct.pack("<II", x.shape[0], x.shape[1]))
        fh.write(np.ascontiguousarray(x).tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != b"FEATSET1":
        raise ValueError("not a feature file")
    n, d = struct.unpack_from("<II", data, 8)
    payload = np.frombuffer(data[16:], dtype="<f4")
    if payload.size != n * d:
        raise ValueError("truncated feature payload")
    return payload.reshape(n, d).astype(float)

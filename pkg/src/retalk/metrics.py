"""Visual-quality metrics: Frechet distance on embeddings, edge-width
sharpness (cumulative probability of blur detection), and PSNR."""

from __future__ import annotations

import numpy as np

from .errors import TooFewSamples

JNB_BETA = 3.6
JNB_PROB = 0.63
BLOCK = 64


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, negatives clipped."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid_from_embeddings(emb_a: np.ndarray, emb_b: np.ndarray) -> float:
    """||mu_a-mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross term uses Tr sqrt(sqrt(S_a) S_b sqrt(S_a)), which equals
    Tr sqrt(S_a S_b) for PSD inputs but stays real-symmetric throughout.
    """
    emb_a = np.asarray(emb_a, dtype=np.float64)
    emb_b = np.asarray(emb_b, dtype=np.float64)
    if emb_a.ndim != 2 or emb_b.ndim != 2:
        raise TooFewSamples("embeddings must be 2-D (n_samples, dim)")
    if len(emb_a) < 2 or len(emb_b) < 2:
        raise TooFewSamples(
            f"need >= 2 samples per set for a covariance, got {len(emb_a)} and {len(emb_b)}")
    mu_a, mu_b = emb_a.mean(axis=0), emb_b.mean(axis=0)
    cov_a = np.cov(emb_a, rowvar=False)
    cov_b = np.cov(emb_b, rowvar=False)
    cov_a = np.atleast_2d(cov_a)
    cov_b = np.atleast_2d(cov_b)
    root_a = _sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.clip(np.linalg.eigvalsh((inner + inner.T) / 2.0), 0.0, None)
    tr_sqrt = float(np.sqrt(vals).sum())
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


def fid(set_a: np.ndarray, set_b: np.ndarray, features) -> float:
    """Frechet distance between two uint8 image sets on provider embeddings."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise TooFewSamples("each image set needs at least 2 samples")
    return fid_from_embeddings(features.embed_frames(np.asarray(set_a)),
                               features.embed_frames(np.asarray(set_b)))


def _to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img @ np.array([0.299, 0.587, 0.114])
    if img.max() <= 1.0 + 1e-9:
        img = img * 255.0
    return img


def _edge_width(row: np.ndarray, col: int) -> int:
    """Marziliano edge width: span of the monotonic run through the pixel."""
    n = len(row)
    slope = row[min(col + 1, n - 1)] - row[max(col - 1, 0)]
    if slope == 0:
        return 0
    left = col
    while left > 0 and (row[left] - row[left - 1]) * slope > 0:
        left -= 1
    right = col
    while right < n - 1 and (row[right + 1] - row[right]) * slope > 0:
        right += 1
    return right - left


def cpbd(image: np.ndarray) -> float:
    """Share of edges sharper than the just-noticeable-blur model predicts.

    Per 64x64 block: vertical-edge pixels from a horizontal Sobel response,
    per-pixel widths along the row, blur probability
    1 - exp(-(w / w_jnb)^3.6) with w_jnb = 5 for block contrast <= 50 else 3,
    and the final score is the fraction of edges with probability <= 0.63.
    Images without any detected edge score 0.
    """
    gray = _to_gray(image)
    h, w = gray.shape
    gx = np.zeros_like(gray)
    gx[:, 1:-1] = gray[:, 2:] - gray[:, :-2]
    mag = np.abs(gx) / 2.0
    thr = max(2.0 * mag.mean(), 1e-6)
    edges = mag > thr
    if not edges.any():
        return 0.0
    probs = []
    for by in range(0, h, BLOCK):
        for bx in range(0, w, BLOCK):
            block = gray[by : by + BLOCK, bx : bx + BLOCK]
            eblock = edges[by : by + BLOCK, bx : bx + BLOCK]
            ys, xs = np.nonzero(eblock)
            if len(ys) < 0.002 * block.size:
                continue
            contrast = float(block.max() - block.min())
            w_jnb = 5.0 if contrast <= 50.0 else 3.0
            for y, x in zip(ys, xs):
                width = _edge_width(gray[by + y], bx + x)
                probs.append(1.0 - np.exp(-((width / w_jnb) ** JNB_BETA)))
    if not probs:
        return 0.0
    probs = np.asarray(probs)
    return float((probs <= JNB_PROB).mean())


def psnr(a: np.ndarray, b: np.ndarray, peak: float | None = None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if peak is None:
        peak = 255.0 if a.max() > 1.5 or b.max() > 1.5 else 1.0
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))

"""Pure numpy implementations of the hot kernels.

Each function has an exact counterpart in ``_ckernels.pyx``. Signatures and
output conventions must stay identical between the two.
"""
import math

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


def layernorm_forward(x, gamma, beta, eps):
    """Normalize the rows of a 2-D array. Returns (y, xhat, rstd)."""
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    y = xhat * gamma + beta
    return y, xhat, rstd[:, 0]


def layernorm_backward(gy, xhat, rstd, gamma):
    """Returns (gx, ggamma, gbeta) for a row-wise layer norm."""
    ggamma = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    gxhat = gy * gamma
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = (gxhat - m1 - xhat * m2) * rstd[:, None]
    return gx, ggamma, gbeta


def gelu_forward(x):
    inner = GELU_C * (x + GELU_K * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_backward(x, gy):
    inner = GELU_C * (x + GELU_K * x * x * x)
    t = np.tanh(inner)
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
    return gy * d


def debiased_ce(scores, logp, targets, valid, admit):
    """Summed in-batch debiased cross-entropy and its gradient.

    scores:  (B, P, C) user-state x candidate scores
    logp:    (C,) log popularity of each candidate
    targets: (B, P) candidate column of the true next item
    valid:   (B, P) nonzero where the position carries a prediction
    admit:   (B, C) nonzero where the candidate is an admissible negative

    Returns (loss_sum, n_valid, grad) where grad is d loss_sum / d scores.
    """
    B, P, C = scores.shape
    logits = scores - logp[None, None, :]
    tmask = np.zeros((B, P, C), dtype=bool)
    bi, pi = np.meshgrid(np.arange(B), np.arange(P), indexing="ij")
    tmask[bi, pi, targets] = True
    allowed = tmask | (admit[:, None, :] != 0)
    masked = np.where(allowed, logits, -np.inf)
    top = masked.max(axis=2, keepdims=True)
    ex = np.where(allowed, np.exp(masked - top), 0.0)
    denom = ex.sum(axis=2, keepdims=True)
    lse = np.log(denom[..., 0]) + top[..., 0]
    target_logit = np.take_along_axis(logits, targets[..., None], axis=2)[..., 0]
    vmask = valid != 0
    per = np.where(vmask, lse - target_logit, 0.0)
    grad = ex / denom
    grad = grad - tmask
    grad = np.where(vmask[..., None], grad, 0.0)
    return float(per.sum()), int(vmask.sum()), grad


def rank_targets(scores, targets):
    """1-based rank of each row's target column; ties go to the smaller column."""
    rows = np.arange(scores.shape[0])
    t = scores[rows, targets][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    better = (scores > t) | ((scores == t) & (cols < targets[:, None]))
    return better.sum(axis=1).astype(np.int64) + 1

"""Contrastive, hard-negative and local (token-patch) losses.

All functions accept arbitrary leading batch axes, so the same code scores
a single item or a whole batch.  Similarities enter the losses in log form
(``cos / tau``) and are normalized with max-subtracted softmaxes; the plain
exponentiated forms are exposed for inspection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, logsumexp, where

NORM_MODES = ("minmax", "minmax_sparse", "softmax")
LOG_EPS = 1e-12
DEGENERATE_SPAN = 1e-12
MASKED = -1e30
SCALE_MIN, SCALE_MAX = 1.0, 100.0


class BatchTooSmall(ValueError):
    pass


class AllInvalid(ValueError):
    pass


class NoValidTokens(ValueError):
    pass


class DegenerateP(ArithmeticError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lambda_g: float = 0.5
    lambda_l: float = 0.2
    gamma: float = 2.0
    beta: float = 0.02
    norm_mode: str = "minmax"
    temperature_init: float = 0.07

    def __post_init__(self):
        if self.lambda_g < 0 or self.lambda_l < 0:
            raise ValueError("loss weights must be non-negative")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0 <= self.beta < 1:
            raise ValueError("beta must lie in [0, 1)")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}")
        if self.temperature_init <= 0:
            raise ValueError("temperature_init must be positive")


class Temperature:
    """Learnable ``log(1/tau)``; the effective scale is clamped to [1, 100]."""

    def __init__(self, tau: float = 0.07, dtype=np.float32, log_inv_tau: Tensor | None = None):
        if log_inv_tau is None:
            log_inv_tau = Tensor(np.array([np.log(1.0 / tau)], dtype=dtype), requires_grad=True, name="log_inv_tau")
        self.log_inv_tau = log_inv_tau

    def scale(self) -> Tensor:
        return self.log_inv_tau.exp().clip(SCALE_MIN, SCALE_MAX)

    @property
    def inv_tau(self) -> float:
        return float(np.clip(np.exp(self.log_inv_tau.data[0]), SCALE_MIN, SCALE_MAX))


def _scale(temperature):
    if isinstance(temperature, Temperature):
        return temperature.scale()
    if isinstance(temperature, Tensor):
        return temperature
    return float(temperature)


def _full_mask(valid, n_candidates):
    valid = np.asarray(valid, dtype=bool)
    if valid.shape[-1] == n_candidates - 1:
        valid = np.concatenate([np.ones(valid.shape[:-1] + (1,), dtype=bool), valid], axis=-1)
    if valid.shape[-1] != n_candidates:
        raise ValueError(f"validity mask of width {valid.shape[-1]} for {n_candidates} candidates")
    return valid


def masked_softmax(logits: Tensor, valid) -> Tensor:
    return where(valid, logits, MASKED).softmax(-1)


# --------------------------------------------------------------------------
# global path


def cosine_logits(v: Tensor, t: Tensor, temperature) -> Tensor:
    return (v * t).sum(-1) * _scale(temperature)


def global_similarity(v: Tensor, t: Tensor, temperature) -> Tensor:
    """``exp(cos(v, t) / tau)`` for unit-normalized ``v`` and ``t``."""
    return cosine_logits(v, t, temperature).exp()


def clip_loss(v: Tensor, t: Tensor, temperature) -> Tensor:
    """Symmetric InfoNCE over the ``B x B`` image/caption grid."""
    if v.shape[0] < 2:
        raise BatchTooSmall(f"contrastive loss needs B >= 2, got {v.shape[0]}")
    logits = (v @ t.T) * _scale(temperature)
    diag = (np.arange(v.shape[0]), np.arange(v.shape[0]))
    i2t = -(logits - logsumexp(logits, axis=1, keepdims=True))[diag].mean()
    t2i = -(logits - logsumexp(logits, axis=0, keepdims=True))[diag].mean()
    return (i2t + t2i) * 0.5


def hn_distribution_global(v: Tensor, t_candidates: Tensor, valid, temperature) -> Tensor:
    """Probability over ``[original, hn_1..hn_K]`` of one image, invalid slots at zero.

    ``v`` is (..., d), ``t_candidates`` (..., 1+K, d); ``valid`` flags either the
    K negatives or all 1+K slots.
    """
    valid = _full_mask(valid, t_candidates.shape[-2])
    if not np.all(valid[..., 1:].any(-1)):
        raise AllInvalid("an item has no valid hard negative")
    v = v.reshape(v.shape[:-1] + (1, v.shape[-1]))
    return masked_softmax(cosine_logits(v, t_candidates, temperature), valid)


# --------------------------------------------------------------------------
# local path


def attention_weights(s: Tensor, mode: str = "minmax") -> Tensor:
    """Normalize each row of a token-by-patch similarity map."""
    n_patches = s.shape[-1]
    if mode == "softmax":
        return s.softmax(-1)
    if mode not in NORM_MODES:
        raise ValueError(f"unknown attention normalization {mode!r}")
    lo = s.min(-1, keepdims=True)
    span = s.max(-1, keepdims=True) - lo
    flat = span.data < DEGENERATE_SPAN
    a = where(flat, 1.0 / n_patches, (s - lo).div(where(flat, 1.0, span)))
    if mode == "minmax_sparse":
        a = where(a.data < 1.0 / n_patches, 0.0, a)
    return a


def textual_aligned_patches(V: Tensor, T: Tensor, pad_mask, mode: str = "minmax") -> Tensor:
    """Attention-weighted mean of patches for every token, padded rows zeroed.

    ``V`` is (..., P, d) and ``T`` (..., W, d) with matching or broadcastable
    leading axes.
    """
    s = T @ V.T
    a = attention_weights(s, mode)
    vhat = (a @ V) / a.sum(-1, keepdims=True)
    keep = np.asarray(pad_mask, dtype=bool)[..., None]
    return where(keep, vhat, 0.0)


def local_token_logits(V: Tensor, T: Tensor, pad_mask, temperature, mode: str = "minmax") -> Tensor:
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if not np.all(pad_mask.any(-1)):
        raise NoValidTokens("a caption has no unpadded token")
    vhat = textual_aligned_patches(V, T, pad_mask, mode).l2_normalize(-1)
    return cosine_logits(vhat, T, temperature)


def local_similarity(V: Tensor, T: Tensor, pad_mask, temperature, mode: str = "minmax") -> Tensor:
    """Sum over real tokens of ``exp(cos(vhat_w, t_w) / tau)``."""
    logits = local_token_logits(V, T, pad_mask, temperature, mode)
    return where(pad_mask, logits.exp(), 0.0).sum(-1)


def log_local_similarity(V: Tensor, T: Tensor, pad_mask, temperature, mode: str = "minmax") -> Tensor:
    logits = local_token_logits(V, T, pad_mask, temperature, mode)
    return logsumexp(where(pad_mask, logits, MASKED), axis=-1)


def local_similarity_per_token(V, T, pad_mask, temperature, mode="minmax") -> np.ndarray:
    """Length-normalized diagnostic ``S_l / W_valid`` (not used by any loss)."""
    total = local_similarity(V, T, pad_mask, temperature, mode).data
    return total / np.asarray(pad_mask, dtype=bool).sum(-1)


def hn_distribution_local(V: Tensor, T_candidates: Tensor, pad_mask, valid, temperature, mode="minmax") -> Tensor:
    """Local counterpart of :func:`hn_distribution_global`.

    ``V`` is (..., P, d); ``T_candidates`` (..., 1+K, W, d); ``pad_mask`` (..., 1+K, W).
    """
    valid = _full_mask(valid, T_candidates.shape[-3])
    if not np.all(valid[..., 1:].any(-1)):
        raise AllInvalid("an item has no valid hard negative")
    V = V.reshape(V.shape[:-2] + (1,) + V.shape[-2:])
    logits = log_local_similarity(V, T_candidates, pad_mask, temperature, mode)
    return masked_softmax(logits, valid)


# --------------------------------------------------------------------------
# selective calibrated regularization


def smoothed_labels(valid, beta: float) -> np.ndarray:
    """``(1 - beta) * onehot(0) + beta / n_valid`` on valid slots, zero elsewhere."""
    valid = np.asarray(valid, dtype=bool)
    n_valid = valid.sum(-1, keepdims=True)
    y = np.zeros(valid.shape)
    y[..., 0] = 1.0 - beta
    y = y + beta / n_valid
    return np.where(valid, y, 0.0)


def scr_hn_loss(p: Tensor, valid=None, gamma: float = 2.0, beta: float = 0.02) -> Tensor:
    """Focal-weighted cross entropy against smoothed labels, per item.

    ``sum_k (1 - p_k)^gamma * -y_k * log p_k``; with gamma = beta = 0 this is
    ``-log p_0``.  The focal factor is differentiated through.
    """
    valid = np.ones(p.shape, dtype=bool) if valid is None else _full_mask(valid, p.shape[-1])
    pv = p.data[valid]
    if not np.all(np.isfinite(pv)) or np.any(pv < 0):
        raise DegenerateP("candidate probabilities must be finite and non-negative")
    y = smoothed_labels(valid, beta).astype(p.dtype)
    terms = -(p.log(eps=LOG_EPS) * y)
    if gamma != 0:
        terms = terms * (1.0 - p) ** gamma
    return terms.sum(-1)


# --------------------------------------------------------------------------
# total objective


@dataclass
class EncodedBatch:
    """Encoder outputs for B images, each with 1+K candidate captions.

    ``T`` is (B, 1+K, W, d), ``t`` (B, 1+K, d), ``pad_mask`` (B, 1+K, W) and
    ``valid`` (B, K) flags the usable hard negatives.
    """

    V: Tensor
    v: Tensor
    T: Tensor
    t: Tensor
    pad_mask: np.ndarray
    valid: np.ndarray


@dataclass
class LossBreakdown:
    l_clip: Tensor
    l_neg_g: Tensor
    l_neg_l: Tensor
    l_total: Tensor
    lambda_g: float
    lambda_l: float
    hn_items: int = 0
    extra: dict = field(default_factory=dict)

    def values(self) -> dict:
        return {
            "l_clip": float(self.l_clip.item()),
            "l_neg_g": float(self.l_neg_g.item()),
            "l_neg_l": float(self.l_neg_l.item()),
            "l_total": float(self.l_total.item()),
        }


def total_loss(batch: EncodedBatch, config: LossConfig, temperature) -> LossBreakdown:
    """``L_clip + lambda_g * L_neg_g + lambda_l * L_neg_l``.

    Hard-negative terms average over items with at least one valid negative;
    other items contribute to the contrastive term only.
    """
    scale = _scale(temperature)
    l_clip = clip_loss(batch.v, batch.t[:, 0], scale)
    zero = Tensor(np.zeros((), dtype=l_clip.dtype))
    l_neg_g = l_neg_l = zero
    valid = np.asarray(batch.valid, dtype=bool)
    items = np.flatnonzero(valid.any(-1)) if valid.size else np.array([], dtype=int)
    has_hn = batch.t.shape[1] > 1 and items.size > 0

    def pick(x):
        return x if items.size == batch.v.shape[0] else x[items]

    if has_hn and config.lambda_g > 0:
        p = hn_distribution_global(pick(batch.v), pick(batch.t), valid[items], scale)
        l_neg_g = scr_hn_loss(p, valid[items], config.gamma, config.beta).mean()
    if has_hn and config.lambda_l > 0:
        p = hn_distribution_local(
            pick(batch.V), pick(batch.T), batch.pad_mask[items], valid[items], scale, config.norm_mode
        )
        l_neg_l = scr_hn_loss(p, valid[items], config.gamma, config.beta).mean()
    l_total = l_clip
    if config.lambda_g > 0:
        l_total = l_total + l_neg_g * config.lambda_g
    if config.lambda_l > 0:
        l_total = l_total + l_neg_l * config.lambda_l
    return LossBreakdown(l_clip, l_neg_g, l_neg_l, l_total, config.lambda_g, config.lambda_l, int(items.size if has_hn else 0))

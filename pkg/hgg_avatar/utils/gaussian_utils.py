"""Activation mapping between unconstrained trainable parameters and Gaussians.

Trainable layout per Gaussian (14 channels)::

    [center(3), opacity-logit(1), log-scale(3), quaternion(4), color-logit(3)]

The first 11 channels are the `raw` vector consumed by pack_gaussian; the last
11 channels are the feature vector f that the graph embeds.
"""
import numpy as np
from scipy.special import expit, logit

from hgg_avatar.utils.consts import N_RAW_CHANNELS, N_TRAINABLE_CHANNELS
from hgg_avatar.utils.errors import NonFiniteInput
from hgg_avatar.utils.types import GaussianCloud, GaussianPrimitive

_PROB_EPS = 1e-12

CENTER = slice(0, 3)
OPACITY = slice(3, 4)
LOG_SCALE = slice(4, 7)
QUATERNION = slice(7, 11)
COLOR = slice(11, 14)
FEATURES = slice(3, 14)


def _normalize_quaternions(quats: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(quats, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NonFiniteInput("quaternion has zero norm")
    return quats / norms


def pack_gaussian(raw, color_logits=None) -> GaussianPrimitive:
    """Map an 11-channel unconstrained vector (plus optional color logits) to a valid Gaussian."""
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    if raw.shape[0] != N_RAW_CHANNELS:
        raise ValueError(f"raw vector must have {N_RAW_CHANNELS} entries, got {raw.shape[0]}")
    color_logits = np.zeros(3) if color_logits is None else np.asarray(color_logits, dtype=np.float64).reshape(3)
    if not (np.all(np.isfinite(raw)) and np.all(np.isfinite(color_logits))):
        raise NonFiniteInput(f"raw Gaussian parameters contain NaN/inf: {raw}")
    return GaussianPrimitive(
        center=raw[CENTER],
        opacity=float(expit(raw[3])),
        scale=np.exp(raw[LOG_SCALE]),
        rotation=_normalize_quaternions(raw[QUATERNION]),
        color=expit(color_logits),
    )


def unpack_gaussian(g: GaussianPrimitive):
    """Inverse of pack_gaussian. Returns (raw, color_logits)."""
    raw = np.concatenate([
        g.center,
        [logit(np.clip(g.opacity, _PROB_EPS, 1 - _PROB_EPS))],
        np.log(g.scale),
        g.rotation,
    ])
    return raw, logit(np.clip(g.color, _PROB_EPS, 1 - _PROB_EPS))


def cloud_to_params(cloud: GaussianCloud) -> np.ndarray:
    """Vectorized unpack: (M, 14) trainable parameters."""
    params = np.empty((len(cloud), N_TRAINABLE_CHANNELS))
    params[:, CENTER] = cloud.centers
    params[:, 3] = logit(np.clip(cloud.opacities, _PROB_EPS, 1 - _PROB_EPS))
    params[:, LOG_SCALE] = np.log(cloud.scales)
    params[:, QUATERNION] = cloud.rotations
    params[:, COLOR] = logit(np.clip(cloud.colors, _PROB_EPS, 1 - _PROB_EPS))
    return params


def params_to_cloud(params: np.ndarray) -> GaussianCloud:
    """Vectorized pack of (M, 14) trainable parameters."""
    params = np.asarray(params, dtype=np.float64).reshape(-1, N_TRAINABLE_CHANNELS)
    if not np.all(np.isfinite(params)):
        raise NonFiniteInput("Gaussian parameters contain NaN/inf")
    return GaussianCloud(
        centers=params[:, CENTER],
        opacities=expit(params[:, 3]),
        scales=np.exp(params[:, LOG_SCALE]),
        rotations=_normalize_quaternions(params[:, QUATERNION]),
        colors=expit(params[:, COLOR]),
    )


def check_primitive(g: GaussianPrimitive) -> list:
    """Return the list of GaussianPrimitive invariants that g violates."""
    problems = []
    if not 0.0 <= g.opacity <= 1.0:
        problems.append(f"opacity {g.opacity} outside [0, 1]")
    if np.any(g.scale <= 0):
        problems.append(f"scale {g.scale} has non-positive components")
    if abs(np.linalg.norm(g.rotation) - 1.0) > 1e-6:
        problems.append(f"rotation {g.rotation} is not unit length")
    if np.any(g.color < 0) or np.any(g.color > 1):
        problems.append(f"color {g.color} outside [0, 1]")
    return problems

"""Front-to-back compositing with a hand-written backward pass.

Only opacity and color receive gradients; footprint weights (which carry the
geometry) are treated as constants.
"""
import numpy as np
import torch

from hgg_avatar.utils.consts import TRANSMITTANCE_EPS
from hgg_avatar.utils.gaussian_utils import COLOR, OPACITY, params_to_cloud
from hgg_avatar.utils.splat_utils import footprint_weights, project_cloud
from hgg_avatar.utils.types import Camera


class CompositeFunction(torch.autograd.Function):
    """(opacity (P,), colors (P, 3), weights (P, K)) -> (rgb (K, 3), alpha (K,)) for depth-sorted splats."""

    @staticmethod
    def forward(ctx, opacity, colors, weights):
        alphas = opacity[:, None] * weights
        trans = torch.ones_like(alphas)
        if alphas.shape[0] > 1:
            trans[1:] = torch.cumprod(1.0 - alphas[:-1], dim=0)
        included = trans >= TRANSMITTANCE_EPS
        contrib = torch.where(included, alphas * trans, torch.zeros_like(alphas))
        ctx.save_for_backward(colors, weights, alphas, trans, included)
        return contrib.T @ colors, contrib.sum(dim=0)

    @staticmethod
    def backward(ctx, grad_rgb, grad_alpha):
        colors, weights, alphas, trans, included = ctx.saved_tensors
        masked = torch.where(included, alphas, torch.zeros_like(alphas))
        contrib = masked * trans

        # per-pixel projection of each splat's color onto the rgb gradient
        shade = colors @ grad_rgb.T + grad_alpha[None, :]
        # behind[i] accumulates what splats behind i add, seen through i
        behind = torch.zeros_like(alphas)
        acc = torch.zeros_like(alphas[0])
        for i in range(alphas.shape[0] - 1, -1, -1):
            behind[i] = acc
            acc = shade[i] * masked[i] + (1.0 - masked[i]) * acc

        grad_alphas = torch.where(included, trans * (shade - behind), torch.zeros_like(alphas))
        grad_opacity = (grad_alphas * weights).sum(dim=1)
        grad_colors = contrib @ grad_rgb
        return grad_opacity, grad_colors, None


def composite(opacity: torch.Tensor, colors: torch.Tensor, weights: torch.Tensor):
    return CompositeFunction.apply(opacity, colors, weights)


def render_differentiable(params: torch.Tensor, camera: Camera, geometry=None):
    """Render (M, 14) trainable Gaussian parameters; returns (rgb (H, W, 3), alpha (H, W)) tensors.

    Gradients flow to the opacity and color channels only. geometry, when
    given, is a GaussianCloud holding the centers, scales and rotations to
    project (for example the reposed cloud); otherwise they come from params.
    """
    cloud = geometry if geometry is not None else params_to_cloud(params.detach().double().numpy())
    batch = project_cloud(cloud, camera)
    h, w = camera.height, camera.width
    if len(batch) == 0:
        return (torch.zeros((h, w, 3), dtype=params.dtype),
                torch.zeros((h, w), dtype=params.dtype))

    weights = torch.as_tensor(footprint_weights(batch, w, h), dtype=params.dtype)
    source = torch.as_tensor(np.array(batch.source), dtype=torch.long)
    opacity = torch.sigmoid(params[source, OPACITY.start])
    colors = torch.sigmoid(params[source, COLOR])
    rgb, alpha = composite(opacity, colors, weights)
    return rgb.reshape(h, w, 3), alpha.reshape(h, w)

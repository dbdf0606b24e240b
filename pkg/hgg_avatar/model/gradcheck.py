"""Central finite-difference checks of every backward pass the model relies on.

Each registered target builds a small deterministic scalar function of one
flat parameter vector together with a default value for that vector.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.func import functional_call

from hgg_avatar.model.compositing import composite, render_differentiable
from hgg_avatar.model.graph_blocks import GraphBlock, GraphBlockParams, SegmentAttention, refine_parameters
from hgg_avatar.model.training import image_loss
from hgg_avatar.utils.config_utils import GraphConfig
from hgg_avatar.utils.consts import N_FEATURE_CHANNELS, N_TRAINABLE_CHANNELS
from hgg_avatar.utils.errors import NonFiniteGradient
from hgg_avatar.utils.types import Camera

logger = logging.getLogger(__name__)

_DIM = 8

TargetFn = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class GradTarget:
    name: str
    build: Callable[[torch.dtype, int], Tuple[TargetFn, torch.Tensor]]
    description: str = ""


_REGISTRY: Dict[str, GradTarget] = {}


def register_backward(name: str, description: str = ""):
    def wrap(build):
        _REGISTRY[name] = GradTarget(name=name, build=build, description=description)
        return build
    return wrap


def registered_targets() -> list:
    return list(_REGISTRY)


def build_target(name: str, dtype=torch.float64, seed: int = 0) -> Tuple[TargetFn, torch.Tensor]:
    if name not in _REGISTRY:
        raise KeyError(f"no backward registered under {name!r}, known: {registered_targets()}")
    return _REGISTRY[name].build(dtype, seed)


class _ForwardModule(nn.Module):
    def __init__(self, inner: nn.Module, forward: Callable):
        super().__init__()
        self.inner = inner
        self._forward = forward

    def forward(self, *args):
        return self._forward(self.inner, *args)


def _module_target(inner: nn.Module, forward: Callable, dtype, args=()) -> Tuple[TargetFn, torch.Tensor]:
    """Expose every parameter of inner as one flat vector."""
    module = _ForwardModule(inner, forward).to(dtype)
    named = list(module.named_parameters())
    sizes = [p.numel() for _, p in named]

    def fn(flat):
        chunks = torch.split(flat, sizes)
        state = {name: chunk.reshape(p.shape) for (name, p), chunk in zip(named, chunks)}
        return functional_call(module, state, args)

    flat0 = torch.cat([p.detach().reshape(-1) for _, p in named])
    return fn, flat0


def _randn(gen, *shape, dtype):
    return torch.randn(*shape, generator=gen, dtype=torch.float64).to(dtype)


@register_backward("embedder", "11 -> D affine feature embedder")
def _embedder(dtype, seed):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    x, r = _randn(gen, 5, N_FEATURE_CHANNELS, dtype=dtype), _randn(gen, 5, _DIM, dtype=dtype)
    return _module_target(nn.Linear(N_FEATURE_CHANNELS, _DIM), lambda m: (m(x) * r).sum(), dtype)


@register_backward("decoder", "D -> 11 affine feature decoder")
def _decoder(dtype, seed):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    x, r = _randn(gen, 5, _DIM, dtype=dtype), _randn(gen, 5, N_FEATURE_CHANNELS, dtype=dtype)
    return _module_target(nn.Linear(_DIM, N_FEATURE_CHANNELS), lambda m: (m(x) * r).sum(), dtype)


@register_backward("attention", "segment attention, all projections and the softmax")
def _attention(dtype, seed):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    q, kv = _randn(gen, 2, _DIM, dtype=dtype), _randn(gen, 7, _DIM, dtype=dtype)
    r = _randn(gen, 2, _DIM, dtype=dtype)
    members = torch.arange(7)
    segments = torch.tensor([0, 0, 0, 1, 1, 1, 1])
    return _module_target(SegmentAttention(_DIM), lambda m: (m(q, kv, kv, members, segments) * r).sum(), dtype)


@register_backward("singleton_attention", "attention over a single key")
def _singleton_attention(dtype, seed):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    q, kv, r = (_randn(gen, 1, _DIM, dtype=dtype) for _ in range(3))
    zero = torch.zeros(1, dtype=torch.long)
    return _module_target(SegmentAttention(_DIM), lambda m: (m(q, kv, kv, zero, zero) * r).sum(), dtype)


@register_backward("ffn", "D -> 4D -> D feed-forward network")
def _ffn(dtype, seed):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    x, r = _randn(gen, 4, _DIM, dtype=dtype), _randn(gen, 4, _DIM, dtype=dtype)
    return _module_target(GraphBlock(_DIM).ffn, lambda m: (m(x) * r).sum(), dtype)


@register_backward("norm", "layer normalization gain and bias")
def _norm(dtype, seed):
    gen = torch.Generator().manual_seed(seed)
    x, r = _randn(gen, 4, _DIM, dtype=dtype), _randn(gen, 4, _DIM, dtype=dtype)
    norm = nn.LayerNorm(_DIM)
    with torch.no_grad():
        norm.weight.copy_(1.0 + 0.1 * _randn(gen, _DIM, dtype=torch.float64).float())
        norm.bias.copy_(0.1 * _randn(gen, _DIM, dtype=torch.float64).float())
    return _module_target(norm, lambda m: (m(x) * r).sum(), dtype)


@register_backward("graph_block", "pre-norm residual block with empty-group skip")
def _graph_block(dtype, seed):
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    q, tokens = _randn(gen, 3, _DIM, dtype=dtype), _randn(gen, 6, _DIM, dtype=dtype)
    r = _randn(gen, 3, _DIM, dtype=dtype)
    members = torch.arange(6)
    segments = torch.tensor([0, 0, 0, 0, 2, 2])
    active = torch.tensor([True, False, True])
    return _module_target(
        GraphBlock(_DIM), lambda m: (m(q, tokens, tokens, members, segments, active=active) * r).sum(), dtype)


@register_backward("refine", "embed, attend to the vertex query, decode, residual")
def _refine(dtype, seed):
    gen = torch.Generator().manual_seed(seed)
    params = GraphBlockParams(3, GraphConfig(token_dim=_DIM, n_layers=0, seed=seed), dtype=torch.float64)
    with torch.no_grad():
        for layer in (params.decoder, params.center_head):
            layer.weight.copy_(0.1 * _randn(gen, *layer.weight.shape, dtype=torch.float64))
            layer.bias.copy_(0.1 * _randn(gen, *layer.bias.shape, dtype=torch.float64))
    raw = _randn(gen, 5, N_TRAINABLE_CHANNELS, dtype=dtype)
    r = _randn(gen, 5, N_TRAINABLE_CHANNELS, dtype=dtype)
    evg = torch.tensor([0, 2, 2, 1, 0])
    return _module_target(params, lambda m: (refine_parameters(raw, evg, m.queries, m) * r).sum(), dtype)


@register_backward("composite", "front-to-back compositing w.r.t. opacity and color")
def _composite(dtype, seed):
    gen = torch.Generator().manual_seed(seed)
    n_splats, n_pixels = 6, 20
    weights = torch.rand(n_splats, n_pixels, generator=gen, dtype=torch.float64).to(dtype)
    r_rgb = _randn(gen, n_pixels, 3, dtype=dtype)
    r_alpha = _randn(gen, n_pixels, dtype=dtype)

    def fn(flat):
        # opacity kept at or below 0.5 so transmittance never reaches the early-out
        opacity = 0.5 * torch.sigmoid(flat[:n_splats])
        colors = torch.sigmoid(flat[n_splats:].reshape(n_splats, 3))
        rgb, alpha = composite(opacity, colors, weights)
        return (rgb * r_rgb).sum() + (alpha * r_alpha).sum()

    return fn, _randn(gen, n_splats * 4, dtype=dtype)


def _render_scene(dtype):
    camera = Camera.look_at(np.array([0.0, 0.0, 3.0]), np.zeros(3), np.array([0.0, 1.0, 0.0]), 16.0, 16, 16)
    params = torch.zeros((2, N_TRAINABLE_CHANNELS), dtype=dtype)
    params[0, :3] = torch.tensor([0.0, 0.0, 0.0])
    params[1, :3] = torch.tensor([0.3, -0.2, -0.5])
    params[:, 3] = torch.tensor([0.5, 1.0])
    params[:, 4:7] = float(np.log(0.3))
    params[:, 7] = 1.0
    params[:, 11:14] = torch.tensor([[0.4, -0.3, 0.8], [-0.6, 0.2, 0.1]])
    return camera, params


@register_backward("render_loss", "opacity and color of one Gaussian through render and loss")
def _render_loss(dtype, seed):
    camera, base = _render_scene(dtype)
    target_rgb = torch.full((16, 16, 3), 0.2, dtype=dtype)
    target_alpha = torch.full((16, 16), 0.5, dtype=dtype)

    def fn(flat):
        params = torch.cat([
            torch.cat([base[0, :3], flat[:1], base[0, 4:11], flat[1:4]])[None, :],
            base[1:],
        ])
        rgb, alpha = render_differentiable(params, camera)
        return image_loss(rgb, alpha, target_rgb, target_alpha)

    return fn, torch.cat([base[0, 3:4], base[0, 11:14]])


def numeric_gradient(fn: TargetFn, params: torch.Tensor, eps: float) -> torch.Tensor:
    """(f(p + eps e_i) - f(p - eps e_i)) / 2 eps for every coordinate i."""
    grad = torch.zeros_like(params)
    with torch.no_grad():
        for i in range(params.numel()):
            shifted = params.clone()
            shifted[i] += eps
            f_plus = fn(shifted)
            shifted[i] -= 2 * eps
            f_minus = fn(shifted)
            grad[i] = (f_plus - f_minus) / (2 * eps)
    return grad


def grad_check(target: Union[str, TargetFn], params: Optional[torch.Tensor] = None, eps: float = 1e-5,
               dtype=torch.float64, seed: int = 0) -> float:
    """Max |analytic - numeric| / max(max |numeric|, 1e-8) for a registered or ad-hoc target."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    name = target if isinstance(target, str) else getattr(target, "__name__", "target")
    if isinstance(target, str):
        fn, default = build_target(target, dtype=dtype, seed=seed)
        params = default if params is None else params
    else:
        fn = target
        if params is None:
            raise ValueError("params are required for an unregistered target")

    params = params.detach().clone().reshape(-1).requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(params), params, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(params)
    numeric = numeric_gradient(fn, params.detach(), eps)

    if not (torch.isfinite(analytic).all() and torch.isfinite(numeric).all()):
        raise NonFiniteGradient(f"non-finite gradient in {name}")
    scale = max(float(numeric.abs().max()), 1e-8)
    rel = float((analytic.detach() - numeric).abs().max()) / scale
    logger.debug(f"grad_check {name}: {params.numel()} entries, rel err {rel:.3e}")
    return rel


def check_all(dtype=torch.float64, eps: float = 1e-5, seed: int = 0) -> Dict[str, float]:
    results = {}
    for name in registered_targets():
        results[name] = grad_check(name, eps=eps, dtype=dtype, seed=seed)
        logger.info(f"grad_check {name}: {results[name]:.3e}")
    return results

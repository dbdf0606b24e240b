"""Learnable vertex queries, stacked intra/inter-node attention blocks and refinement.

Attention is computed over ragged key sets with a segment softmax: every key
row carries the id of the query (segment) it belongs to, so the cost is linear
in the number of edges instead of quadratic in the number of tokens.
"""
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
from torch import nn

from hgg_avatar.utils.config_utils import GraphConfig
from hgg_avatar.utils.consts import N_FEATURE_CHANNELS, N_TRAINABLE_CHANNELS
from hgg_avatar.utils.errors import DimensionMismatch, EmptySet
from hgg_avatar.utils.gaussian_utils import FEATURES, cloud_to_params, params_to_cloud
from hgg_avatar.utils.graph_utils import HumanGaussianGraph, SegmentIndex
from hgg_avatar.utils.types import GaussianCloud, GaussianFrame, as_cloud


def segment_softmax(scores: torch.Tensor, segment_ids: torch.Tensor, n_segments: int) -> torch.Tensor:
    """Softmax of (E, H) scores over the rows sharing a segment id."""
    heads = scores.shape[1]
    index = segment_ids[:, None].expand(-1, heads)
    peak = torch.full((n_segments, heads), -torch.inf, dtype=scores.dtype)
    peak = peak.scatter_reduce(0, index, scores.detach(), reduce="amax", include_self=True)
    expd = torch.exp(scores - peak[segment_ids])
    denom = torch.zeros((n_segments, heads), dtype=scores.dtype).index_add_(0, segment_ids, expd)
    return expd / denom[segment_ids]


class SegmentAttention(nn.Module):
    """Bias-free h_Q / h_K / h_V projections with scaled dot-product attention per segment."""

    def __init__(self, dim: int, n_heads: int = 1, share_value_projection: bool = False):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"n_heads={n_heads} does not divide dim={dim}")
        self.dim = dim
        self.n_heads = n_heads
        self.h_q = nn.Linear(dim, dim, bias=False)
        self.h_k = nn.Linear(dim, dim, bias=False)
        self.h_v = None if share_value_projection else nn.Linear(dim, dim, bias=False)

    def project_values(self, x: torch.Tensor) -> torch.Tensor:
        return self.h_k(x) if self.h_v is None else self.h_v(x)

    def forward(self, queries, keys, values, member_ids, segment_ids, return_weights: bool = False):
        """queries (S, D); keys/values (X, D) source rows; member_ids picks the
        source row of every edge and segment_ids its query."""
        n_segments = queries.shape[0]
        head_dim = self.dim // self.n_heads
        q = self.h_q(queries).view(n_segments, self.n_heads, head_dim)
        k = self.h_k(keys)[member_ids].view(-1, self.n_heads, head_dim)
        v = self.project_values(values)[member_ids].view(-1, self.n_heads, head_dim)

        scores = (q[segment_ids] * k).sum(-1) / math.sqrt(head_dim)
        weights = segment_softmax(scores, segment_ids, n_segments)
        out = torch.zeros((n_segments, self.n_heads, head_dim), dtype=v.dtype)
        out = out.index_add(0, segment_ids, weights[..., None] * v).reshape(n_segments, self.dim)
        if return_weights:
            return out, weights
        return out


class GraphBlock(nn.Module):
    """Pre-norm residual attention followed by a pre-norm residual FFN (D -> 4D -> D)."""

    def __init__(self, dim: int, n_heads: int = 1, share_value_projection: bool = False):
        super().__init__()
        self.norm_attn = nn.LayerNorm(dim)
        self.attn = SegmentAttention(dim, n_heads, share_value_projection)
        self.out_proj = nn.Linear(dim, dim, bias=False)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.GELU(),
            nn.Linear(4 * dim, dim),
        )

    def zero_residual_(self):
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.ffn[2].weight)
        nn.init.zeros_(self.ffn[2].bias)

    def forward(self, q, keys, values, member_ids, segment_ids, active: Optional[torch.Tensor] = None):
        out = q + self.out_proj(self.attn(self.norm_attn(q), keys, values, member_ids, segment_ids))
        out = out + self.ffn(self.norm_ffn(out))
        if active is not None:
            out = torch.where(active[:, None], out, q)
        return out


class GraphBlockParams(nn.Module):
    """Every learnable piece of the graph operations.

    queries holds one D-wide token per template vertex. intra_blocks[l] and
    inter_blocks[l] are the two sub-operations of block l. The embedder maps
    the 11 feature channels of a Gaussian to a token; decoder and center_head
    map a refined token back to feature and center deltas and start at zero.
    The toy fitter poses geometry from detached parameters and only
    differentiates color and opacity, so center_head receives no gradient there.
    """

    def __init__(self, n_vertices: int, config: Optional[GraphConfig] = None, dtype=torch.float64):
        super().__init__()
        config = config or GraphConfig()
        self.config = config
        dim = config.token_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.queries = nn.Parameter(torch.randn(n_vertices, dim) * config.query_init_std)
            self.embedder = nn.Linear(N_FEATURE_CHANNELS, dim)
            self.intra_blocks = nn.ModuleList(
                GraphBlock(dim, config.n_heads, config.share_value_projection) for _ in range(config.n_layers))
            self.inter_blocks = nn.ModuleList(
                GraphBlock(dim, config.n_heads, config.share_value_projection) for _ in range(config.n_layers))
            self.refine_norm = nn.LayerNorm(dim)
            self.refine_attn = SegmentAttention(dim, config.n_heads, config.share_value_projection)
            self.decoder = nn.Linear(dim, N_FEATURE_CHANNELS)
            self.center_head = nn.Linear(dim, 3)
        self.zero_decoder_()
        if config.zero_init_residual:
            self.zero_residual_()
        self.to(dtype)

    @property
    def n_vertices(self) -> int:
        return self.queries.shape[0]

    @property
    def token_dim(self) -> int:
        return self.queries.shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.intra_blocks)

    @property
    def dtype(self) -> torch.dtype:
        return self.queries.dtype

    def zero_decoder_(self):
        for layer in (self.decoder, self.center_head):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def zero_residual_(self):
        for block in list(self.intra_blocks) + list(self.inter_blocks):
            block.zero_residual_()


@dataclass
class QueryState:
    values: torch.Tensor
    layer: int = 0


@dataclass(frozen=True)
class GraphIndex:
    """Edge lists of a HumanGaussianGraph as torch index tensors."""

    group_members: torch.Tensor
    group_segments: torch.Tensor
    group_active: torch.Tensor
    evv_members: torch.Tensor
    evv_segments: torch.Tensor

    @classmethod
    def from_graph(cls, graph: HumanGaussianGraph) -> "GraphIndex":
        evv_members, evv_segments = _segment_tensors(graph.evv)
        return cls(
            group_members=torch.as_tensor(graph.group_token_ids(), dtype=torch.long),
            group_segments=torch.as_tensor(graph.groups.segment_ids(), dtype=torch.long),
            group_active=torch.as_tensor(graph.groups.sizes() > 0),
            evv_members=evv_members,
            evv_segments=evv_segments,
        )


def _segment_tensors(index: SegmentIndex):
    return (torch.as_tensor(np.array(index.values), dtype=torch.long),
            torch.as_tensor(index.segment_ids(), dtype=torch.long))


def _as_index(graph) -> GraphIndex:
    return graph if isinstance(graph, GraphIndex) else GraphIndex.from_graph(graph)


def attention(query, keys, values, projections: SegmentAttention) -> torch.Tensor:
    """softmax((h_Q q)(h_K K)^T / sqrt(d)) (h_V V) for one query row; returns 1 x D."""
    query = torch.as_tensor(query).reshape(1, -1)
    if keys.shape[0] == 0:
        raise EmptySet("attention over an empty key set")
    if keys.shape[0] != values.shape[0]:
        raise DimensionMismatch(f"{keys.shape[0]} keys but {values.shape[0]} values")
    members = torch.arange(keys.shape[0])
    return projections(query, keys, values, members, torch.zeros_like(members))


def gaussian_features(frames) -> np.ndarray:
    """(T*M, 11) feature channels of every Gaussian, frame-major."""
    if isinstance(frames, HumanGaussianGraph):
        frames = frames.frames
    return np.concatenate([cloud_to_params(as_cloud(f))[:, FEATURES] for f in frames])


def embed_gaussian_tokens(frames, params: GraphBlockParams) -> torch.Tensor:
    """Embed every Gaussian of every frame: (T*M) x D tokens, row t*M + m."""
    if isinstance(frames, torch.Tensor):
        features = frames
    else:
        features = torch.as_tensor(gaussian_features(frames), dtype=params.dtype)
    return params.embedder(features)


def intra_node_update(state: QueryState, graph, tokens: torch.Tensor, params: GraphBlockParams,
                      layer: int) -> QueryState:
    """Each vertex query attends to the Gaussians attached to it across all frames.

    Vertices without attached Gaussians keep their query.
    """
    index = _as_index(graph)
    block = params.intra_blocks[layer]
    values = block(state.values, tokens, tokens, index.group_members, index.group_segments,
                   active=index.group_active)
    return QueryState(values=values, layer=layer + 1)


def inter_node_update(state: QueryState, evv, params: GraphBlockParams, layer: int) -> QueryState:
    """Each vertex query attends to its face-hop neighbors, all reading the same snapshot."""
    if isinstance(evv, SegmentIndex):
        members, segments = _segment_tensors(evv)
    else:
        index = _as_index(evv)
        members, segments = index.evv_members, index.evv_segments
    block = params.inter_blocks[layer]
    snapshot = block.norm_attn(state.values)
    values = block(state.values, snapshot, snapshot, members, segments)
    return QueryState(values=values, layer=layer + 1)


def run_blocks(graph, params: GraphBlockParams, tokens: Optional[torch.Tensor] = None,
               frames=None) -> QueryState:
    """Start from the learnable queries and apply L rounds of intra then inter updates."""
    index = _as_index(graph)
    if tokens is None:
        tokens = embed_gaussian_tokens(frames if frames is not None else graph, params)
    state = QueryState(values=params.queries, layer=0)
    for layer in range(params.n_layers):
        if params.config.use_intra:
            state = intra_node_update(state, index, tokens, params, layer)
        if params.config.use_inter:
            state = inter_node_update(state, index, params, layer)
        state = QueryState(values=state.values, layer=layer + 1)
    return state


def refine_parameters(params_t0: torch.Tensor, evg_t0: torch.Tensor, queries: torch.Tensor,
                      params: GraphBlockParams) -> torch.Tensor:
    """Differentiable refinement of (M, 14) trainable Gaussian parameters.

    Each Gaussian's embedded token attends to the lone query of the vertex it
    is attached to, so the read is h_V of that query and every Gaussian on a
    vertex receives the same delta. With config.token_residual the token is
    added to the read before decoding, giving per-Gaussian deltas.
    """
    evg_t0 = torch.as_tensor(np.array(evg_t0), dtype=torch.long).reshape(-1)
    if params_t0.shape[0] != evg_t0.shape[0]:
        raise DimensionMismatch(f"{params_t0.shape[0]} Gaussians but {evg_t0.shape[0]} assignments")
    if params_t0.shape[1] != N_TRAINABLE_CHANNELS:
        raise DimensionMismatch(f"expected {N_TRAINABLE_CHANNELS} channels, got {params_t0.shape[1]}")
    if evg_t0.numel() and int(evg_t0.max()) >= queries.shape[0]:
        raise DimensionMismatch(f"assignment to vertex {int(evg_t0.max())} but only {queries.shape[0]} queries")

    features = params_t0[:, FEATURES]
    tokens = params.embedder(features)
    kv = params.refine_norm(queries)
    segments = torch.arange(params_t0.shape[0])
    refined = params.refine_attn(tokens, kv, kv, evg_t0, segments)
    if params.config.token_residual:
        refined = tokens + refined
    centers = params_t0[:, :3] + params.center_head(refined)
    return torch.cat([centers, features + params.decoder(refined)], dim=1)


def refine_gaussians(frame_t0: Union[GaussianFrame, GaussianCloud], evg_t0, queries: QueryState,
                     params: GraphBlockParams) -> GaussianCloud:
    """Refine the frame-t0 Gaussians against the vertex queries into G^smpl."""
    cloud = as_cloud(frame_t0)
    if queries.values.shape[0] != params.n_vertices:
        raise DimensionMismatch(f"{queries.values.shape[0]} queries for {params.n_vertices} vertices")
    with torch.no_grad():
        raw = torch.as_tensor(cloud_to_params(cloud), dtype=params.dtype)
        refined = refine_parameters(raw, evg_t0, queries.values, params)
    return params_to_cloud(refined.double().numpy())


def refine_frames(graph: HumanGaussianGraph, params: GraphBlockParams, t0: int = 0) -> GaussianCloud:
    """run_blocks followed by refine_gaussians on frame position t0."""
    with torch.no_grad():
        state = run_blocks(graph, params)
    return refine_gaussians(graph.frames[t0], graph.evg[t0], state, params)


def count_tokens(graph: HumanGaussianGraph) -> dict:
    return {
        "gaussian_tokens": graph.n_frames * graph.n_gaussians,
        "vertex_tokens": graph.n_vertices,
        "intra_edges": graph.n_frames * graph.n_gaussians,
        "inter_edges": int(graph.evv.values.shape[0]),
    }

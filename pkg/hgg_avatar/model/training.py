import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from hgg_avatar.model.compositing import render_differentiable
from hgg_avatar.model.graph_blocks import (
    GraphBlockParams,
    GraphIndex,
    gaussian_features,
    refine_parameters,
    run_blocks,
)
from hgg_avatar.utils.config_utils import FitConfig, LossConfig
from hgg_avatar.utils.consts import PSNR_CAP_DB
from hgg_avatar.utils.errors import DimensionMismatch, Diverged
from hgg_avatar.utils.gaussian_utils import cloud_to_params, params_to_cloud
from hgg_avatar.utils.graph_utils import HumanGaussianGraph, build_graph
from hgg_avatar.utils.lbs_utils import bind_gaussians, lbs_pose_vertices, repose_gaussians
from hgg_avatar.utils.splat_utils import RenderedImage, render
from hgg_avatar.utils.synth_utils import SyntheticScene

logger = logging.getLogger(__name__)

_PERCEPTUAL_PLUGINS: Dict[str, Callable] = {}


def register_perceptual_loss(name: str, fn: Callable) -> None:
    """Register fn(rgb, gt_rgb) -> scalar tensor, used when LossConfig.perceptual == name and alpha1 > 0."""
    _PERCEPTUAL_PLUGINS[name] = fn


def unregister_perceptual_loss(name: str) -> None:
    _PERCEPTUAL_PLUGINS.pop(name, None)


def image_loss(rgb: torch.Tensor, alpha: torch.Tensor, gt_rgb: torch.Tensor, gt_alpha: torch.Tensor,
               cfg: Optional[LossConfig] = None) -> torch.Tensor:
    """MSE(rgb) + alpha1 * perceptual(rgb) + alpha2 * MSE(alpha)."""
    cfg = cfg or LossConfig()
    if rgb.shape != gt_rgb.shape or alpha.shape != gt_alpha.shape:
        raise DimensionMismatch(f"rendered {tuple(rgb.shape)}/{tuple(alpha.shape)} vs "
                                f"target {tuple(gt_rgb.shape)}/{tuple(gt_alpha.shape)}")
    total = torch.mean((rgb - gt_rgb) ** 2) + cfg.alpha2 * torch.mean((alpha - gt_alpha) ** 2)
    if cfg.alpha1 > 0 and cfg.perceptual is not None:
        plugin = _PERCEPTUAL_PLUGINS.get(cfg.perceptual)
        if plugin is None:
            logger.warning(f"perceptual loss plugin {cfg.perceptual!r} is not registered, term skipped")
        else:
            total = total + cfg.alpha1 * plugin(rgb, gt_rgb)
    return total


def loss(rendered: RenderedImage, gt: RenderedImage, cfg: Optional[LossConfig] = None) -> float:
    value = image_loss(
        torch.as_tensor(np.array(rendered.rgb)), torch.as_tensor(np.array(rendered.alpha)),
        torch.as_tensor(np.array(gt.rgb)), torch.as_tensor(np.array(gt.alpha)),
        cfg,
    )
    return float(value)


def psnr(img: RenderedImage, gt: RenderedImage) -> float:
    """10 log10(1 / MSE) over rgb, capped at 100 dB."""
    if img.rgb.shape != gt.rgb.shape:
        raise DimensionMismatch(f"image {img.rgb.shape} vs target {gt.rgb.shape}")
    mse = float(np.mean((np.asarray(img.rgb) - np.asarray(gt.rgb)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def clip_gradients(parameters, max_norm: float) -> float:
    """Clip the global gradient norm in place; returns the norm before clipping."""
    return float(torch.nn.utils.clip_grad_norm_(list(parameters), max_norm))


@dataclass
class MetricRow:
    step: int
    loss: float
    psnr_heldout: Optional[float] = None


@dataclass
class MetricTrace:
    rows: List[MetricRow] = field(default_factory=list)

    def append(self, step: int, loss_value: float, psnr_value: Optional[float] = None) -> None:
        self.rows.append(MetricRow(step=step, loss=loss_value, psnr_heldout=psnr_value))

    @property
    def initial_loss(self) -> float:
        return self.rows[0].loss

    @property
    def final_loss(self) -> float:
        return self.rows[-1].loss

    @property
    def final_psnr(self) -> Optional[float]:
        for row in reversed(self.rows):
            if row.psnr_heldout is not None:
                return row.psnr_heldout
        return None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "loss", "psnr_heldout"])
            for row in self.rows:
                psnr_text = "" if row.psnr_heldout is None else f"{row.psnr_heldout:.17g}"
                writer.writerow([row.step, f"{row.loss:.17g}", psnr_text])


def read_metrics_csv(path) -> MetricTrace:
    trace = MetricTrace()
    with open(path, newline="") as f:
        for record in csv.DictReader(f):
            value = record["psnr_heldout"]
            trace.append(int(record["step"]), float(record["loss"]), float(value) if value else None)
    return trace


class ToyFitter:
    """Owns the graph, the trainable parameters and the cached targets of one fitting run."""

    def __init__(self, scene: SyntheticScene, cfg: FitConfig, graph: Optional[HumanGaussianGraph] = None,
                 num_thread: int = 1):
        if scene.n_frames < 1:
            raise DimensionMismatch("scene has no frames")
        if not 0 <= cfg.t0 < scene.n_frames:
            raise DimensionMismatch(f"t0={cfg.t0} outside the {scene.n_frames} frames of the scene")
        self.scene = scene
        self.cfg = cfg
        self.dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
        self.graph = graph or build_graph(scene.frames, scene.poses, scene.template, cfg.d0, num_thread=num_thread)
        self.params = GraphBlockParams(scene.template.n_vertices, cfg.graph_config(), dtype=self.dtype)

        self.index = GraphIndex.from_graph(self.graph)
        self.features = torch.as_tensor(gaussian_features(self.graph), dtype=self.dtype)
        source = scene.frames[cfg.t0].gaussians
        self.raw_t0 = torch.as_tensor(cloud_to_params(source), dtype=self.dtype)
        self.evg_t0 = self.graph.evg[cfg.t0]
        template = scene.template
        self.binding = bind_gaussians(source, lbs_pose_vertices(template, scene.poses[cfg.t0]), template,
                                      source_pose=scene.poses[cfg.t0])
        self.train_cameras = scene.training_cameras
        self.gt = [
            [(torch.as_tensor(np.array(img.rgb), dtype=self.dtype), torch.as_tensor(np.array(img.alpha), dtype=self.dtype))
             for img in row]
            for row in scene.gt_images
        ]

    def refined_parameters(self) -> torch.Tensor:
        if not self.cfg.refine:
            return self.raw_t0
        tokens = self.params.embedder(self.features)
        state = run_blocks(self.index, self.params, tokens=tokens)
        return refine_parameters(self.raw_t0, self.evg_t0, state.values, self.params)

    def posed_geometry(self, smpl: torch.Tensor, t: int):
        # geometry is fixed per step; gradients flow through color and opacity only
        cloud = params_to_cloud(smpl.detach().double().numpy())
        return repose_gaussians(cloud, self.binding, self.scene.template, self.scene.poses[t])

    def training_loss(self, smpl: torch.Tensor, frames: Sequence[int]) -> torch.Tensor:
        terms = []
        for t in frames:
            geometry = self.posed_geometry(smpl, t)
            for c in self.train_cameras:
                rgb, alpha = render_differentiable(smpl, self.scene.cameras[c], geometry=geometry)
                gt_rgb, gt_alpha = self.gt[t][c]
                terms.append(image_loss(rgb, alpha, gt_rgb, gt_alpha, self.cfg.loss))
        return torch.stack(terms).mean()

    def heldout_psnr(self, smpl: torch.Tensor) -> Optional[float]:
        c = self.scene.heldout_camera
        if c is None:
            return None
        scores = []
        for t in range(self.scene.n_frames):
            image = render(self.posed_geometry(smpl, t), self.scene.cameras[c])
            scores.append(psnr(image, self.scene.gt_images[t][c]))
        return float(np.mean(scores))

    def fit(self) -> Tuple[GraphBlockParams, MetricTrace]:
        cfg = self.cfg
        trace = MetricTrace()
        n_frames = self.scene.n_frames
        all_frames = list(range(n_frames))

        with torch.no_grad():
            smpl = self.refined_parameters()
            trace.append(0, float(self.training_loss(smpl, all_frames)), self.heldout_psnr(smpl))
        logger.info(f"step 0/{cfg.steps} loss={trace.initial_loss:.6g} psnr_heldout={trace.rows[0].psnr_heldout}")
        if cfg.steps == 0:
            return self.params, trace

        optimizer = torch.optim.Adam(self.params.parameters(), lr=cfg.learning_rate)
        rng = np.random.default_rng(cfg.seed)
        for step in range(1, cfg.steps + 1):
            if n_frames <= cfg.frames_per_step:
                frames = all_frames
            else:
                frames = sorted(rng.choice(n_frames, size=cfg.frames_per_step, replace=False).tolist())

            optimizer.zero_grad()
            smpl = self.refined_parameters()
            value = self.training_loss(smpl, frames)
            if not torch.isfinite(value):
                raise Diverged(f"loss became {float(value)} at step {step}")
            if value.requires_grad:
                value.backward()
                clip_gradients(self.params.parameters(), cfg.grad_clip)
                optimizer.step()

            psnr_value = None
            if step % cfg.eval_every == 0 or step == cfg.steps:
                with torch.no_grad():
                    psnr_value = self.heldout_psnr(self.refined_parameters())
            trace.append(step, float(value), psnr_value)
            logger.info(f"step {step}/{cfg.steps} loss={float(value):.6g}"
                        + (f" psnr_heldout={psnr_value:.4f}" if psnr_value is not None else ""))
        return self.params, trace


def fit_toy(scene: SyntheticScene, cfg: Optional[FitConfig] = None, num_thread: int = 1):
    """Train GraphBlockParams on the training views of a synthetic scene.

    Returns (params, trace). The Gaussian source is frozen; only the graph
    parameters are optimized.
    """
    return ToyFitter(scene, cfg or FitConfig(), num_thread=num_thread).fit()

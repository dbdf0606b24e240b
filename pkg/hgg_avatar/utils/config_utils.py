import logging
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from hgg_avatar.utils.consts import (
    DEFAULT_D0,
    DEFAULT_FRAMES_PER_STEP,
    DEFAULT_GRAD_CLIP,
    DEFAULT_LAYERS,
    DEFAULT_LR,
    DEFAULT_TOKEN_DIM,
    QUERY_INIT_STD,
    TOY_LEARNING_RATE,
)
from hgg_avatar.utils.errors import ConfigError

logger = logging.getLogger(__name__)


class GraphConfig(BaseModel):
    d0: int = Field(default=DEFAULT_D0, ge=0, description='face-hop radius of the vertex-vertex edges')
    n_layers: int = Field(default=DEFAULT_LAYERS, ge=0, description='number of stacked intra/inter blocks')
    token_dim: int = Field(default=DEFAULT_TOKEN_DIM, ge=1, description='token width D')
    n_heads: int = Field(default=1, ge=1, description='attention heads, must divide token_dim')
    share_value_projection: bool = Field(default=False, description='reuse the key projection for values')
    use_intra: bool = Field(default=True, description='run the intra-node (vertex to Gaussian) operation')
    use_inter: bool = Field(default=True, description='run the inter-node (vertex to vertex) operation')
    query_init_std: float = Field(default=QUERY_INIT_STD, ge=0.0, description='std of the initial queries')
    zero_init_residual: bool = Field(default=False, description='zero the output projections and FFN output layers')
    token_residual: bool = Field(default=False, description='add the Gaussian token to the vertex read before decoding')
    seed: int = Field(default=0, description='seed of the parameter initialization')

    @field_validator("n_heads")
    @classmethod
    def _heads_divide_width(cls, v, info):
        token_dim = info.data.get("token_dim")
        if token_dim is not None and token_dim % v:
            raise ValueError(f"n_heads={v} does not divide token_dim={token_dim}")
        return v


class LossConfig(BaseModel):
    alpha1: float = Field(default=0.0, ge=0.0, description='weight of the perceptual plugin term')
    alpha2: float = Field(default=1.0, ge=0.0, description='weight of the alpha-channel MSE')
    perceptual: Optional[str] = Field(default=None, description='name of a registered perceptual loss plugin')


class FitConfig(BaseModel):
    learning_rate: float = Field(default=DEFAULT_LR, gt=0.0, description='Adam step size')
    grad_clip: float = Field(default=DEFAULT_GRAD_CLIP, gt=0.0, description='global gradient-norm clip')
    steps: int = Field(default=300, ge=0, description='optimizer steps')
    frames_per_step: int = Field(default=DEFAULT_FRAMES_PER_STEP, ge=1, description='poses sampled per step')
    seed: int = Field(default=7, description='seed of parameters and frame sampling')
    L: int = Field(default=DEFAULT_LAYERS, ge=0, description='number of stacked blocks')
    D: int = Field(default=DEFAULT_TOKEN_DIM, ge=1, description='token width')
    d0: int = Field(default=DEFAULT_D0, ge=0, description='face-hop radius')
    n_heads: int = Field(default=1, ge=1, description='attention heads')
    share_value_projection: bool = Field(default=False, description='reuse the key projection for values')
    token_residual: bool = Field(default=False, description='per-Gaussian refinement: decode token plus vertex read')
    use_intra: bool = Field(default=True, description='ablation switch for the intra-node operation')
    use_inter: bool = Field(default=True, description='ablation switch for the inter-node operation')
    refine: bool = Field(default=True, description='False binds the frame-t0 Gaussians directly (baseline)')
    eval_every: int = Field(default=50, ge=1, description='steps between held-out evaluations')
    t0: int = Field(default=0, ge=0, description='reference frame position')
    dtype: Literal["float32", "float64"] = Field(default="float64", description='parameter precision')
    loss: LossConfig = Field(default_factory=LossConfig)

    @classmethod
    def toy_preset(cls, **overrides) -> "FitConfig":
        """Settings for the standard synthetic scene."""
        values = {"learning_rate": TOY_LEARNING_RATE, "steps": 300, "seed": 7, "frames_per_step": 4}
        values.update(overrides)
        return cls(**values)

    def graph_config(self) -> GraphConfig:
        return GraphConfig(
            d0=self.d0,
            n_layers=self.L,
            token_dim=self.D,
            n_heads=self.n_heads,
            share_value_projection=self.share_value_projection,
            token_residual=self.token_residual,
            use_intra=self.use_intra,
            use_inter=self.use_inter,
            seed=self.seed,
        )


class SceneConfig(BaseModel):
    subdivisions: int = Field(default=2, ge=0, le=4, description='icosphere subdivision level of the body')
    n_joints: int = Field(default=4, ge=1, description='joints in the body chain')
    frames: int = Field(default=8, ge=1, description='frames T')
    gaussians: int = Field(default=512, ge=1, description='Gaussians per frame M')
    n_cameras: int = Field(default=4, ge=1, description='cameras, the last one (back view) held out')
    image_size: int = Field(default=24, ge=1, description='square image side in pixels')
    color_noise: float = Field(default=0.05, ge=0.0, description='per-frame color noise std')
    opacity_noise: float = Field(default=0.03, ge=0.0, description='per-frame opacity noise std')
    reference_fade: float = Field(default=0.8, ge=0.0, lt=1.0, description='opacity fade of back-facing Gaussians in the reference frame')
    seed: int = Field(default=7, description='scene seed')


class RunConfig(BaseModel):
    """Flat key = value run file: every scene, graph and fit key plus paths."""

    model_config = ConfigDict(extra="forbid")

    # scene
    subdivisions: Optional[int] = None
    n_joints: Optional[int] = None
    frames: Optional[int] = None
    gaussians: Optional[int] = None
    n_cameras: Optional[int] = None
    image_size: Optional[int] = None
    color_noise: Optional[float] = None
    opacity_noise: Optional[float] = None
    reference_fade: Optional[float] = None
    # graph / fit
    d0: Optional[int] = None
    L: Optional[int] = None
    D: Optional[int] = None
    n_heads: Optional[int] = None
    share_value_projection: Optional[bool] = None
    token_residual: Optional[bool] = None
    use_intra: Optional[bool] = None
    use_inter: Optional[bool] = None
    refine: Optional[bool] = None
    learning_rate: Optional[float] = None
    grad_clip: Optional[float] = None
    steps: Optional[int] = None
    frames_per_step: Optional[int] = None
    eval_every: Optional[int] = None
    t0: Optional[int] = None
    dtype: Optional[Literal["float32", "float64"]] = None
    alpha1: Optional[float] = None
    alpha2: Optional[float] = None
    seed: Optional[int] = None
    # bench
    bench_gaussians: Optional[int] = None
    bench_vertices: Optional[int] = None
    bench_frames: Optional[List[int]] = None
    bench_reps: Optional[int] = None
    # animate / render / gradcheck
    novel_poses: Optional[int] = None
    camera: Optional[int] = None
    eps: Optional[float] = None
    # paths and runtime
    scene: Optional[Path] = None
    graph: Optional[Path] = None
    params: Optional[Path] = None
    out_dir: Optional[Path] = None
    metrics: Optional[Path] = None
    threads: Optional[int] = None

    @field_validator("bench_frames", mode="before")
    @classmethod
    def _split_list(cls, v):
        if isinstance(v, str):
            return [int(x) for x in v.replace(",", " ").split()]
        return v

    def merged(self, overrides: dict) -> "RunConfig":
        """Flag values that are not None win over file values."""
        data = self.model_dump(exclude_none=True)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return build_run_config(data)

    def _pick(self, model) -> dict:
        values = self.model_dump(exclude_none=True)
        return {k: v for k, v in values.items() if k in model.model_fields}

    def scene_config(self) -> SceneConfig:
        return SceneConfig(**self._pick(SceneConfig))

    def fit_config(self) -> FitConfig:
        loss = LossConfig(**{k: v for k, v in self.model_dump(exclude_none=True).items() if k in ("alpha1", "alpha2")})
        return FitConfig(loss=loss, **self._pick(FitConfig))


def build_run_config(values: dict) -> RunConfig:
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def parse_run_config(text: str) -> RunConfig:
    """Parse `key = value` lines; `#` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return build_run_config(values)


def load_run_config(path) -> RunConfig:
    logger.info(f"loading run config: {path}")
    return parse_run_config(Path(path).read_text())

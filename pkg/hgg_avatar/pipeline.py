import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence, Tuple

import torch
from pydantic import ValidationError

from hgg_avatar.model.graph_blocks import count_tokens, refine_frames
from hgg_avatar.model.gradcheck import check_all
from hgg_avatar.model.training import ToyFitter
from hgg_avatar.utils.bench_utils import bench_intra, write_bench_csv
from hgg_avatar.utils.config_utils import FitConfig, RunConfig, SceneConfig, build_run_config, load_run_config
from hgg_avatar.utils.consts import DEFAULT_D0, EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE
from hgg_avatar.utils.container_utils import load_graph, load_params, load_scene, save_graph, save_params, save_scene
from hgg_avatar.utils.errors import ConfigError, DimensionMismatch, Diverged, HggError
from hgg_avatar.utils.graph_utils import HumanGaussianGraph, build_graph
from hgg_avatar.utils.image_utils import save_png, save_raw_f32, save_sequence
from hgg_avatar.utils.lbs_utils import GaussianBinding, bind_gaussians, lbs_pose_vertices, repose_gaussians
from hgg_avatar.utils.ply_utils import export_ply
from hgg_avatar.utils.splat_utils import render
from hgg_avatar.utils.synth_utils import SyntheticScene, make_body, make_pose_sequence, make_scene
from hgg_avatar.utils.types import Camera, GaussianCloud, Pose

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = {"float64": 1e-6, "float32": 1e-3}


def _existing_dir(path) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {path}")
    return path


class HumanGaussianPipeline:
    """
    synthesize scenes, build graphs, fit, animate and render avatars
    """

    def __init__(self, num_thread=1):
        self.num_thread = max(1, int(num_thread))
        logger.info(f"pipeline uses num_thread={self.num_thread}")

    def synth(self, out_dir, scene_cfg: Optional[SceneConfig] = None) -> Path:
        """Write scene.hggf plus ground-truth PNGs (gt/frame_TTT_cam_C.png) into an existing directory."""
        scene_cfg = scene_cfg or SceneConfig()
        out_dir = _existing_dir(out_dir)

        template = make_body(scene_cfg.subdivisions, scene_cfg.n_joints)
        scene = make_scene(
            template,
            frames=scene_cfg.frames,
            gaussians=scene_cfg.gaussians,
            n_cameras=scene_cfg.n_cameras,
            seed=scene_cfg.seed,
            image_size=scene_cfg.image_size,
            color_noise=scene_cfg.color_noise,
            opacity_noise=scene_cfg.opacity_noise,
            reference_fade=scene_cfg.reference_fade,
            num_thread=self.num_thread,
        )
        path = out_dir / "scene.hggf"
        save_scene(scene, path)

        gt_dir = out_dir / "gt"
        gt_dir.mkdir(exist_ok=True)
        for t, row in enumerate(scene.gt_images):
            for c, image in enumerate(row):
                save_png(image, gt_dir / f"frame_{t:03d}_cam_{c}.png")
        return path

    def build(self, scene_path, d0: int, out_path) -> HumanGaussianGraph:
        scene = load_scene(scene_path)
        graph = build_graph(scene.frames, scene.poses, scene.template, d0, num_thread=self.num_thread)
        tokens = count_tokens(graph)
        logger.info(f"partitions: {tokens['gaussian_tokens']} (M*T), vertex tokens: {tokens['vertex_tokens']}, "
                     f"inter edges: {tokens['inter_edges']}")
        save_graph(graph, out_path)
        return graph

    def fit(self, scene_path, fit_cfg: FitConfig, params_path, metrics_path=None, graph_path=None):
        scene = load_scene(scene_path)
        graph = None
        if graph_path is not None:
            graph = load_graph(graph_path)
            if graph.d0 != fit_cfg.d0:
                raise DimensionMismatch(f"graph was built with d0={graph.d0}, config asks for d0={fit_cfg.d0}")
        fitter = ToyFitter(scene, fit_cfg, graph=graph, num_thread=self.num_thread)
        params, trace = fitter.fit()
        save_params(params, params_path, t0=fit_cfg.t0, refine=fit_cfg.refine)
        if metrics_path is not None:
            trace.to_csv(metrics_path)
        logger.info(f"fit finished: loss {trace.initial_loss:.6g} -> {trace.final_loss:.6g}, "
                    f"held-out psnr {trace.final_psnr}")
        return params, trace

    def refined_avatar(self, params_path, scene: SyntheticScene) -> Tuple[GaussianCloud, GaussianBinding]:
        """G^smpl of a trained parameter file and its binding to the reference-frame pose."""
        params, t0, refine = load_params(params_path)
        template = scene.template
        if params.n_vertices != template.n_vertices:
            raise DimensionMismatch(f"parameters cover {params.n_vertices} vertices, "
                                    f"scene template has {template.n_vertices}")
        if not 0 <= t0 < scene.n_frames:
            raise DimensionMismatch(f"reference frame {t0} outside the {scene.n_frames} frames of the scene")
        if refine:
            graph = build_graph(scene.frames, scene.poses, template, params.config.d0, num_thread=self.num_thread)
            avatar = refine_frames(graph, params, t0)
        else:
            avatar = scene.frames[t0].gaussians
        source = scene.poses[t0]
        binding = bind_gaussians(avatar, lbs_pose_vertices(template, source), template, source_pose=source)
        return avatar, binding

    def animate(self, params_path, scene_path, out_dir, poses: Optional[Sequence[Pose]] = None,
                camera: Optional[Camera] = None, n_poses: int = 8, ply: bool = False) -> list:
        """Repose G^smpl to every target pose and render it; returns the PNG paths."""
        out_dir = _existing_dir(out_dir)
        scene = load_scene(scene_path)
        template = scene.template
        avatar, binding = self.refined_avatar(params_path, scene)
        if poses is None:
            poses = make_pose_sequence(template, n_poses, seed=scene.seed + 1)
        for pose in poses:
            if pose.n_joints != template.n_joints:
                raise DimensionMismatch(f"pose has {pose.n_joints} joints, template has {template.n_joints}")
        if camera is None:
            heldout = scene.heldout_camera
            camera = scene.cameras[heldout if heldout is not None else 0]

        images = [render(repose_gaussians(avatar, binding, template, pose), camera) for pose in poses]
        if ply:
            export_ply(avatar, out_dir / "avatar.ply")
        return save_sequence(images, out_dir, prefix="pose")

    def render(self, scene_path, out_dir, params_path=None, raw: bool = False) -> int:
        """Render every (frame, camera) of a scene: the frame Gaussians, or G^smpl reposed when params are given."""
        out_dir = _existing_dir(out_dir)
        scene = load_scene(scene_path)
        clouds = [f.gaussians for f in scene.frames]
        if params_path is not None:
            avatar, binding = self.refined_avatar(params_path, scene)
            clouds = [repose_gaussians(avatar, binding, scene.template, pose) for pose in scene.poses]

        count = 0
        for t, cloud in enumerate(clouds):
            for c, camera in enumerate(scene.cameras):
                image = render(cloud, camera)
                save_png(image, out_dir / f"frame_{t:03d}_cam_{c}.png")
                if raw:
                    save_raw_f32(image, out_dir / f"frame_{t:03d}_cam_{c}.f32")
                count += 1
        logger.info(f"rendered {count} images to {out_dir}")
        return count

    def bench(self, n_gaussians: int, n_vertices: int, dim: int, frame_counts: Sequence[int], reps: int = 5,
              out_path=None) -> list:
        rows = bench_intra(n_gaussians, n_vertices, dim, frame_counts, reps=reps)
        if out_path is not None:
            write_bench_csv(rows, out_path)
        return rows

    def gradcheck(self, dtype: str = "float64", eps: Optional[float] = None) -> dict:
        eps = eps if eps is not None else (1e-5 if dtype == "float64" else 1e-2)
        return check_all(dtype=torch.float64 if dtype == "float64" else torch.float32, eps=eps)


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _required(cfg: RunConfig, key: str):
    value = getattr(cfg, key)
    if value is None:
        raise ConfigError(f"'{key}' must be given on the command line or in the config file")
    return value


def _cmd_synth(pipeline, cfg, args):
    path = pipeline.synth(_required(cfg, "out_dir"), cfg.scene_config())
    print(path)


def _cmd_build(pipeline, cfg, args):
    d0 = cfg.d0 if cfg.d0 is not None else DEFAULT_D0
    pipeline.build(_required(cfg, "scene"), d0, _required(cfg, "graph"))


def _cmd_fit(pipeline, cfg, args):
    pipeline.fit(_required(cfg, "scene"), cfg.fit_config(), _required(cfg, "params"),
                 metrics_path=cfg.metrics, graph_path=cfg.graph)


def _cmd_animate(pipeline, cfg, args):
    scene_path = _required(cfg, "scene")
    camera = None
    if cfg.camera is not None:
        cameras = load_scene(scene_path).cameras
        if not 0 <= cfg.camera < len(cameras):
            raise ConfigError(f"camera {cfg.camera} outside the {len(cameras)} cameras of the scene")
        camera = cameras[cfg.camera]
    paths = pipeline.animate(_required(cfg, "params"), scene_path, _required(cfg, "out_dir"), camera=camera,
                             n_poses=cfg.novel_poses or 8, ply=args.ply)
    print(f"{len(paths)} frames")


def _cmd_render(pipeline, cfg, args):
    pipeline.render(_required(cfg, "scene"), _required(cfg, "out_dir"), params_path=cfg.params, raw=args.raw)


def _cmd_bench(pipeline, cfg, args):
    rows = pipeline.bench(
        n_gaussians=cfg.bench_gaussians or 4096,
        n_vertices=cfg.bench_vertices or 642,
        dim=cfg.D or 64,
        frame_counts=cfg.bench_frames or [2, 4, 8, 16],
        reps=cfg.bench_reps or 5,
        out_path=cfg.metrics,
    )
    for row in rows:
        print(f"{row.T}\t{row.hgg_ms:.3f}\t{row.naive_ms:.3f}\t{row.tokens}")


def _cmd_gradcheck(pipeline, cfg, args):
    dtype = cfg.dtype or "float64"
    results = pipeline.gradcheck(dtype, cfg.eps)
    tolerance = GRADCHECK_TOLERANCE[dtype]
    failed = [name for name, rel in results.items() if rel >= tolerance]
    for name, rel in results.items():
        print(f"{name}\t{rel:.3e}\t{'FAIL' if name in failed else 'ok'}")
    if failed:
        print(f"gradient check failed for {failed} (tolerance {tolerance:g})", file=sys.stderr)
        return EXIT_DATA


_COMMANDS = {
    "synth": _cmd_synth,
    "build": _cmd_build,
    "fit": _cmd_fit,
    "animate": _cmd_animate,
    "render": _cmd_render,
    "bench": _cmd_bench,
    "gradcheck": _cmd_gradcheck,
}


def _add_scene_flags(parser):
    parser.add_argument("--frames", type=int, help="frames T")
    parser.add_argument("--gaussians", type=int, help="Gaussians per frame M")
    parser.add_argument("--n-cameras", dest="n_cameras", type=int, help="cameras, the last one held out")
    parser.add_argument("--image-size", dest="image_size", type=int, help="square image side in pixels")
    parser.add_argument("--subdivisions", type=int, help="icosphere subdivision level of the body")
    parser.add_argument("--n-joints", dest="n_joints", type=int, help="joints in the body chain")
    parser.add_argument("--color-noise", dest="color_noise", type=float, help="per-frame color noise std")
    parser.add_argument("--opacity-noise", dest="opacity_noise", type=float, help="per-frame opacity noise std")
    parser.add_argument("--reference-fade", dest="reference_fade", type=float,
                        help="opacity fade of back-facing Gaussians in the reference frame")


def _add_fit_flags(parser):
    parser.add_argument("--steps", type=int, help="optimizer steps")
    parser.add_argument("--L", dest="L", type=int, help="number of stacked blocks")
    parser.add_argument("--D", dest="D", type=int, help="token width")
    parser.add_argument("--n-heads", dest="n_heads", type=int, help="attention heads")
    parser.add_argument("--learning-rate", dest="learning_rate", type=float, help="Adam step size")
    parser.add_argument("--grad-clip", dest="grad_clip", type=float, help="global gradient-norm clip")
    parser.add_argument("--frames-per-step", dest="frames_per_step", type=int, help="poses sampled per step")
    parser.add_argument("--eval-every", dest="eval_every", type=int, help="steps between held-out evaluations")
    parser.add_argument("--t0", type=int, help="reference frame position")
    parser.add_argument("--dtype", choices=["float32", "float64"], help="parameter precision")
    parser.add_argument("--no-refine", dest="refine", action="store_const", const=False,
                        help="bind the reference-frame Gaussians directly (baseline)")
    parser.add_argument("--no-intra", dest="use_intra", action="store_const", const=False,
                        help="skip the intra-node operation")
    parser.add_argument("--token-residual", dest="token_residual", action="store_const", const=True,
                        help="decode the Gaussian token plus its vertex read (per-Gaussian deltas)")
    parser.add_argument("--no-inter", dest="use_inter", action="store_const", const=False,
                        help="skip the inter-node operation")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="hgg-avatar", description="Human Gaussian Graph avatar pipeline")
    parser.add_argument("--config", type=Path, default=None, help="key = value run file; flags win over it")
    parser.add_argument("--threads", type=int, default=None, help="worker threads; 1 makes runs bit-reproducible")
    parser.add_argument("--log-level", dest="log_level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    synth = sub.add_parser("synth", help="generate a synthetic scene with ground-truth renders")
    synth.add_argument("--out-dir", dest="out_dir", type=Path, help="existing output directory")
    synth.add_argument("--seed", type=int, help="scene seed")
    _add_scene_flags(synth)

    build = sub.add_parser("build", help="construct the Human Gaussian Graph of a scene")
    build.add_argument("--scene", type=Path, help="scene container")
    build.add_argument("--d0", type=int, help="face-hop radius")
    build.add_argument("--graph", type=Path, help="output graph container")

    fit = sub.add_parser("fit", help="train the graph parameters on a scene")
    fit.add_argument("--scene", type=Path, help="scene container")
    fit.add_argument("--graph", type=Path, help="prebuilt graph container")
    fit.add_argument("--params", type=Path, help="output parameter container")
    fit.add_argument("--metrics", type=Path, help="output metrics CSV")
    fit.add_argument("--d0", type=int, help="face-hop radius")
    fit.add_argument("--seed", type=int, help="seed of parameters and frame sampling")
    _add_fit_flags(fit)

    animate = sub.add_parser("animate", help="render the refined avatar in novel poses")
    animate.add_argument("--params", type=Path, help="trained parameter container")
    animate.add_argument("--scene", type=Path, help="scene container")
    animate.add_argument("--out-dir", dest="out_dir", type=Path, help="output directory for PNGs")
    animate.add_argument("--novel-poses", dest="novel_poses", type=int, help="number of novel poses")
    animate.add_argument("--camera", type=int, help="camera index, default the held-out camera")
    animate.add_argument("--ply", action="store_true", help="also export the refined avatar as PLY")

    render_cmd = sub.add_parser("render", help="render every frame and camera of a scene")
    render_cmd.add_argument("--scene", type=Path, help="scene container")
    render_cmd.add_argument("--params", type=Path, help="render the refined avatar of these parameters")
    render_cmd.add_argument("--out-dir", dest="out_dir", type=Path, help="output directory")
    render_cmd.add_argument("--raw", action="store_true", help="also write planar float32 RGBA dumps")

    bench = sub.add_parser("bench", help="time intra-node attention against all-pairs attention")
    bench.add_argument("--bench-gaussians", dest="bench_gaussians", type=int, help="Gaussians per frame M")
    bench.add_argument("--bench-vertices", dest="bench_vertices", type=int, help="template vertices N")
    bench.add_argument("--D", dest="D", type=int, help="token width")
    bench.add_argument("--bench-frames", dest="bench_frames", type=str, help="frame counts, e.g. 2,4,8,16")
    bench.add_argument("--bench-reps", dest="bench_reps", type=int, help="repetitions per size, default 5")
    bench.add_argument("--metrics", type=Path, help="output CSV")

    gradcheck = sub.add_parser("gradcheck", help="finite-difference check of every registered backward pass")
    gradcheck.add_argument("--dtype", choices=["float32", "float64"], help="precision of the check")
    gradcheck.add_argument("--eps", type=float, help="central-difference step")
    return parser


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config is not None else build_run_config({})
    overrides = {key: getattr(args, key) for key in RunConfig.model_fields if hasattr(args, key)}
    return cfg.merged(overrides)


def _configure_runtime(threads: int) -> None:
    torch.set_num_threads(threads)
    if threads == 1:
        torch.use_deterministic_algorithms(True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = _run_config(args)
        threads = args.threads if args.threads is not None else (cfg.threads or 1)
        if threads < 1:
            raise ConfigError(f"--threads must be positive, got {threads}")
        _configure_runtime(threads)
        pipeline = HumanGaussianPipeline(num_thread=threads)
        code = _COMMANDS[args.command](pipeline, cfg, args)
    except (ConfigError, ValidationError) as e:
        print(f"hgg-avatar: configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Diverged as e:
        print(f"hgg-avatar: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (HggError, OSError, ValueError, KeyError) as e:
        print(f"hgg-avatar: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())

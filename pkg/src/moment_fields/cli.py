"""Command-line front end: ``moment-fields <subcommand> [flags]``."""

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import imageio, nerf, splat
from ._backend import THREADS_ENV, set_threads
from .evaluation import NBV_POLICIES, correlation_over_views, nbv_loop, variance_error_maps
from .experiments import make_views, nbv_views
from .metrics import CorrelationReport, UndefinedCorrelationError, psnr, ssim
from .scenegen import (camera_orbit, desk_scene, generate_scene, load_scene_json,
                       save_scene_json, scene_to_splats, scene_to_voxels)
from .train import (RENDERERS, SAMPLERS, TrainConfig, Trainer, evaluate_views, initial_model,
                    make_renderer)

SUBCOMMANDS = ("genscene", "render", "train", "correlate", "nbv")
EVAL_HEADER = ["scene_id", "seed", "policy", "round", "tau_p", "tau_s", "tau_k", "psnr",
               "ssim", "ms"]
TRAIN_HEADER = ["iteration", "loss", "psnr", "ssim", "ms"]


@dataclass
class RunConfig:
    command: str
    scene: str = None
    out: str = "out"
    seed: int = 0
    renderer: str = "splat"
    width: int = 64
    height: int = 64
    j_max: int = 2
    threads: int = None
    timing: bool = False
    semantic: bool = False
    n_spheres: int = 6
    n_views: int = 12
    view: int = 0
    repeats: int = 3
    checkpoint: str = None
    iterations: int = 1000
    rays_per_iter: int = 1024
    initial_rays: int = 200
    sampler: str = "uniform"
    grid: int = 8
    floor: int = 1
    n_bins: int = 64
    eval_every: int = 100
    semantic_weight: float = 0.0
    score_channels: str = "color"
    lr: dict = field(default_factory=dict)
    policy: str = "variance-color"
    rounds: int = 3
    iters_per_round: int = 300
    total_iters: int = 1000
    initial_views: int = 5

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def train_config(self):
        return TrainConfig(iterations=self.iterations, rays_per_iter=self.rays_per_iter,
                           initial_rays=self.initial_rays, lr=self.lr or None, seed=self.seed,
                           sampler=self.sampler, grid=self.grid, floor=self.floor,
                           score_channels=self.score_channels,
                           semantic_weight=self.semantic_weight, n_bins=self.n_bins,
                           eval_every=self.eval_every)


def _positive(kind):
    def conv(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value
    conv.__name__ = kind.__name__
    return conv


def _lr_item(text):
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    return name, _positive(float)(value)


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="moment-fields", formatter_class=fmt,
        description="Render, train and evaluate radiance fields with per-pixel moments.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}",
                                required=True)

    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--out", default="out", help="output directory")
    g.add_argument("--seed", type=int, default=0, help="random seed")
    g.add_argument("--threads", type=_positive(int), default=None,
                   help=f"worker thread cap (also via {THREADS_ENV})")

    scene = argparse.ArgumentParser(add_help=False)
    g = scene.add_argument_group("scene and camera")
    g.add_argument("--scene", default=None, help="scene JSON file (default: the desk scene)")
    g.add_argument("--renderer", choices=RENDERERS, default="splat", help="renderer")
    g.add_argument("--width", type=_positive(int), default=64, help="image width")
    g.add_argument("--height", type=_positive(int), default=64, help="image height")
    g.add_argument("--j-max", type=_positive(int), default=2, help="highest moment order")
    g.add_argument("--n-views", type=_positive(int), default=12, help="cameras on the orbit")
    g.add_argument("--n-bins", type=_positive(int), default=64, help="samples per NeRF ray")
    g.add_argument("--semantic", action="store_true", help="render semantic channels too")
    g.add_argument("--timing", action="store_true", help="fill the wall-clock ms columns")
    g.add_argument("--checkpoint", default=None, help="trained model to load")

    train = argparse.ArgumentParser(add_help=False)
    g = train.add_argument_group("training")
    g.add_argument("--iterations", type=int, default=1000, help="training iterations")
    g.add_argument("--rays-per-iter", type=_positive(int), default=1024,
                   help="rays per iteration")
    g.add_argument("--initial-rays", type=_positive(int), default=200,
                   help="rays per image in the warm-up pass")
    g.add_argument("--sampler", choices=SAMPLERS, default="uniform", help="ray sampler")
    g.add_argument("--grid", type=_positive(int), default=8, help="sampling grid cells per side")
    g.add_argument("--floor", type=int, default=1, help="minimum rays per grid cell")
    g.add_argument("--eval-every", type=_positive(int), default=100,
                   help="held-out evaluation interval")
    g.add_argument("--semantic-weight", type=float, default=0.0,
                   help="weight of the semantic loss term")
    g.add_argument("--score-channels", choices=("color", "all"), default="color",
                   help="channels used for variance scores")
    g.add_argument("--lr", type=_lr_item, action="append", default=[], metavar="NAME=VALUE",
                   help="learning-rate override for one parameter group (repeatable)")

    p = sub.add_parser("genscene", parents=[common], formatter_class=fmt,
                       help="write a random scene description")
    p.add_argument("--n-spheres", type=_positive(int), default=6, help="number of spheres")

    p = sub.add_parser("render", parents=[common, scene], formatter_class=fmt,
                       help="render mean and variance images")
    p.add_argument("--view", type=int, default=0, help="orbit camera index")
    p.add_argument("--repeats", type=_positive(int), default=3,
                   help="timed repetitions per phase")

    sub.add_parser("train", parents=[common, scene, train], formatter_class=fmt,
                   help="train a model on the even orbit views")
    sub.add_parser("correlate", parents=[common, scene, train], formatter_class=fmt,
                   help="correlate variance with error on held-out views")

    p = sub.add_parser("nbv", parents=[common, scene, train], formatter_class=fmt,
                       help="next-best-view selection rounds")
    p.add_argument("--policy", choices=NBV_POLICIES, default="variance-color",
                   help="view selection policy")
    p.add_argument("--rounds", type=int, default=3, help="views to add")
    p.add_argument("--iters-per-round", type=_positive(int), default=300,
                   help="iterations between selections")
    p.add_argument("--total-iters", type=_positive(int), default=1000,
                   help="iterations before the final evaluation")
    p.add_argument("--initial-views", type=_positive(int), default=5,
                   help="adjacent views in the initial training set")
    return parser


def parse_cli(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    if getattr(ns, "semantic_weight", 0.0) < 0:
        parser.error("--semantic-weight must be >= 0")
    if getattr(ns, "semantic_weight", 0.0) > 0 and not ns.semantic:
        parser.error("--semantic-weight needs --semantic (the model has no semantic channels)")
    values = {k.replace("-", "_"): v for k, v in vars(ns).items()}
    values["lr"] = dict(values.get("lr") or [])
    known = {f.name for f in fields(RunConfig)}
    return RunConfig(**{k: v for k, v in values.items() if k in known})


# --- helpers -----------------------------------------------------------------------------

def _load_scene(cfg):
    if cfg.scene is None:
        return desk_scene(), "desk"
    return load_scene_json(cfg.scene), os.path.splitext(os.path.basename(cfg.scene))[0]


def _load_model(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == nerf.CHECKPOINT_MAGIC:
        return "nerf", nerf.load_field(path)
    if magic == splat.CHECKPOINT_MAGIC:
        return "splat", splat.load_scene(path)
    raise ValueError(f"{path}: unrecognised checkpoint")


def _save_model(model, path):
    if isinstance(model, nerf.VoxelField):
        nerf.save_field(model, path)
    else:
        splat.save_scene(model, path)


def _checkpoint_name(renderer):
    return "model.mfvx" if renderer == "nerf" else "model.mfgs"


def _background(cfg, scene):
    return scene.background(cfg.semantic)


def _renderer(cfg, scene):
    return make_renderer(cfg.renderer, cfg.n_bins, _background(cfg, scene))


def _orbit(cfg):
    return camera_orbit(cfg.n_views, width=cfg.width, height=cfg.height)


def _trained_model(cfg, scene, train_views):
    """Load ``--checkpoint`` or train from scratch on ``train_views``."""
    if cfg.checkpoint:
        kind, model = _load_model(cfg.checkpoint)
        if kind != cfg.renderer:
            raise ValueError(f"{cfg.checkpoint}: {kind} checkpoint but --renderer {cfg.renderer}")
        if isinstance(model, splat.SplatScene):
            model.background[:] = np.resize(_background(cfg, scene), model.n_channels)
        return model, []
    model = initial_model(cfg.renderer, cfg.seed, 8 if cfg.semantic else 0,
                          _background(cfg, scene))
    trainer = Trainer(model, _renderer(cfg, scene), train_views, cfg.train_config())
    return model, trainer.run(cfg.iterations, cfg.timing)


def _out(cfg, name):
    return os.path.join(cfg.out, name)


def _ms(cfg, seconds):
    return seconds * 1e3 if cfg.timing else None


def _write_timings(cfg, phases):
    imageio.write_csv(_out(cfg, "timings.csv"), ["phase", "ms"],
                      [[k, float(v * 1e3)] for k, v in phases])


def _summed_var(group):
    return group.variance.sum(-1) if group.j_max >= 2 else None


def _write_group(cfg, prefix, mean, var):
    imageio.write_pfm(_out(cfg, f"{prefix}_mean.pfm"), mean)
    preview = mean if mean.ndim == 3 else mean / max(float(mean.max()), 1e-12)
    imageio.write_ppm(_out(cfg, f"{prefix}_mean.ppm"), preview)
    if var is not None:
        imageio.write_pfm(_out(cfg, f"{prefix}_var.pfm"), var)
        imageio.write_ppm(_out(cfg, f"{prefix}_var.ppm"), imageio.tone_map_variance(var))


# --- subcommands ----------------------------------------------------------------------------

def cmd_genscene(cfg):
    save_scene_json(generate_scene(cfg.seed, cfg.n_spheres), _out(cfg, "scene.json"))
    return 0


def cmd_render(cfg):
    scene, _ = _load_scene(cfg)
    cams = _orbit(cfg)
    if not 0 <= cfg.view < len(cams):
        raise ValueError(f"--view must be in [0, {len(cams)})")
    cam = cams[cfg.view]
    if cfg.checkpoint:
        model, _ = _trained_model(cfg, scene, [])
    elif cfg.renderer == "splat":
        model = scene_to_splats(scene, semantic=cfg.semantic)
    else:
        model = scene_to_voxels(scene, semantic=cfg.semantic)
    rend = _renderer(cfg, scene)
    rend.render(model, cam, cfg.j_max)          # warm-up (kernel compilation)
    phases = []
    for label, order in (("mean_only", 1), ("mean_variance", cfg.j_max)):
        times = []
        for _ in range(cfg.repeats):
            t0 = time.perf_counter()
            result = rend.render(model, cam, order)
            times.append(time.perf_counter() - t0)
        phases.append((label, float(np.median(times))))
    _write_timings(cfg, phases)
    for label, sec in phases:
        print(f"{label}: {sec * 1e3:.2f} ms")
    if cfg.j_max >= 2:
        print(f"overhead ratio: {phases[1][1] / phases[0][1]:.3f}")
    _write_group(cfg, "color", result.color.mean, _summed_var(result.color))
    _write_group(cfg, "depth", result.depth.mean[..., 0], _summed_var(result.depth))
    if cfg.semantic:
        _write_group(cfg, "semantic", np.linalg.norm(result.semantic.mean, axis=-1),
                     _summed_var(result.semantic))
    return 0


def cmd_train(cfg):
    scene, _ = _load_scene(cfg)
    views = make_views(scene, _orbit(cfg))
    train_views, heldout = views[0::2], views[1::2]
    model = initial_model(cfg.renderer, cfg.seed, 8 if cfg.semantic else 0,
                          _background(cfg, scene))
    rend = _renderer(cfg, scene)
    trainer = Trainer(model, rend, train_views, cfg.train_config(), heldout)
    log = trainer.run(cfg.iterations, cfg.timing)
    _save_model(model, _out(cfg, _checkpoint_name(cfg.renderer)))
    imageio.write_csv(_out(cfg, "train_log.csv"), TRAIN_HEADER,
                      [[r.iteration, r.loss, r.psnr, r.ssim, r.ms] for r in log])
    p, s = evaluate_views(model, rend, heldout)
    print(f"held-out PSNR {p:.3f} dB, SSIM {s:.4f}")
    return 0


def cmd_correlate(cfg):
    scene, scene_id = _load_scene(cfg)
    views = make_views(scene, _orbit(cfg))
    train_views, heldout = views[0::2], views[1::2]
    t0 = time.perf_counter()
    model, _ = _trained_model(cfg, scene, train_views)
    rend = _renderer(cfg, scene)
    groups = ["color", "depth"] + (["semantic"] if cfg.semantic_weight > 0 else [])
    rows = []
    for group in groups:
        maps = variance_error_maps(model, rend, heldout, group)
        for v, m in zip(heldout, maps):
            imageio.write_pfm(_out(cfg, f"{group}_var_{m.view_id:02d}.pfm"), m.variance)
            imageio.write_pfm(_out(cfg, f"{group}_err_{m.view_id:02d}.pfm"), m.error)
            imageio.write_ppm(_out(cfg, f"{group}_var_{m.view_id:02d}.ppm"),
                              imageio.tone_map_variance(m.variance))
            imageio.write_ppm(_out(cfg, f"{group}_err_{m.view_id:02d}.ppm"),
                              imageio.tone_map_variance(m.error))
        try:
            rep = correlation_over_views(maps)
        except UndefinedCorrelationError:
            rep = CorrelationReport(float("nan"), float("nan"), float("nan"), 0)
        p, s = _quality(maps, heldout, group)
        rows.append([scene_id, cfg.seed, f"{group}-var", 0, rep.pearson, rep.spearman,
                     rep.kendall, p, s, _ms(cfg, time.perf_counter() - t0)])
        print(f"{group}: tau_p={rep.pearson:.4f} tau_s={rep.spearman:.4f} "
              f"tau_k={rep.kendall:.4f} (n={rep.n})")
    imageio.write_csv(_out(cfg, "correlation.csv"), EVAL_HEADER, rows)
    return 0


def _quality(maps, views, group):
    if group != "color":
        return None, None
    imgs = [np.clip(m.mean, 0.0, 1.0) for m in maps]
    return (float(np.mean([psnr(i, v.color) for i, v in zip(imgs, views)])),
            float(np.mean([ssim(i, v.color) for i, v in zip(imgs, views)])))


def cmd_nbv(cfg):
    scene, scene_id = _load_scene(cfg)
    initial, candidates, heldout = nbv_views(scene, cfg.width)
    if cfg.initial_views != len(initial):
        pool = initial + candidates
        initial, candidates = pool[:cfg.initial_views], pool[cfg.initial_views:]
    model = initial_model(cfg.renderer, cfg.seed, 8 if cfg.semantic else 0,
                          _background(cfg, scene))
    rend = _renderer(cfg, scene)
    state = nbv_loop(model, rend, initial, candidates, heldout, cfg.train_config(),
                     cfg.rounds, cfg.iters_per_round, cfg.total_iters, cfg.policy)
    rows = [[scene_id, cfg.seed, cfg.policy, r.round, None, None, None, r.psnr, r.ssim,
             _ms(cfg, r.seconds)] for r in state.rounds]
    imageio.write_csv(_out(cfg, "nbv.csv"), EVAL_HEADER, rows)
    print(f"selected views: {state.history}; final PSNR {state.rounds[-1].psnr:.3f} dB")
    return 0


COMMANDS = {"genscene": cmd_genscene, "render": cmd_render, "train": cmd_train,
            "correlate": cmd_correlate, "nbv": cmd_nbv}


def run_subcommand(cfg):
    try:
        set_threads(cfg.threads)
        os.makedirs(cfg.out, exist_ok=True)
        return COMMANDS[cfg.command](cfg)
    except OSError as exc:
        where = exc.filename or cfg.out
        print(f"moment-fields {cfg.command}: error: {where}: {exc.strerror or exc}",
              file=sys.stderr)
        return 1
    except (ValueError, RuntimeError) as exc:
        print(f"moment-fields {cfg.command}: error: {exc}", file=sys.stderr)
        return 1


def main(argv=None):
    return run_subcommand(parse_cli(argv))


if __name__ == "__main__":
    sys.exit(main())

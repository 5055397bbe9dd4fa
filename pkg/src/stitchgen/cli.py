"""Pipeline subcommands over one declarative config file.

Artifacts live under the configured workdir by convention: dataset/ for the
rendered world, ckpt/ for model checkpoints (tensor table + JSON sidecar),
reports/ for CSV/JSON outputs. Every subcommand is deterministic given its
config; rerunning with unchanged inputs reproduces outputs byte for byte,
and the train subcommands resume from their checkpoint when the requested
schedule extends a finished one.

Exit codes: 0 success, 2 config error, 3 missing or unreadable
prerequisite, 4 numeric failure.
"""

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .alignment import (GENERATOR_ADAPTED, AlignConfig, adapter_trainables,
                        align_run)
from .checkpoint import (CheckpointError, read_sidecar, read_tensors,
                         sidecar_path, write_sidecar, write_tensors)
from .config import RunConfig
from .errors import ConfigError, MissingArtifactError, NumericError, TrainingError
from .evaluation import RobustnessConfig, robustness_experiment, scan_study
from .networks import (AETrainConfig, Critic, CriticTrainConfig, F3DTrainConfig,
                       Feedforward3D, FlowGenerator, GenTrainConfig, VideoAE,
                       train_autoencoder, train_critic, train_feedforward3d,
                       train_generator)
from .nn import freeze
from .stitching import (StitchFinetuneConfig, assemble, finetune_stitched,
                        scan_layers)
from .worldgen import Dataset, emit_dataset, load_dataset

CKPT_FORMAT = 1

# which subcommand produces each checkpoint, for prerequisite errors
_PRODUCERS = {
    "vae": "train-vae",
    "f3d": "train-3d",
    "critic": "train-critic",
    "gen": "train-gen",
    "stitch_fit": "scan",
    "stitched": "stitch-finetune",
    "align": "align",
}


class Workdir:
    """Conventional artifact layout under one root directory."""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def dataset(self) -> Path:
        return self.root / "dataset" / "world.bin"

    def ckpt(self, name: str) -> Path:
        return self.root / "ckpt" / f"{name}.bin"

    def report(self, name: str) -> Path:
        return self.root / "reports" / name

    def ensure(self) -> None:
        for sub in ("dataset", "ckpt", "reports"):
            try:
                (self.root / sub).mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise ConfigError(f"cannot create workdir {self.root / sub}: {exc}")


# ---------------------------------------------------------------------------
# checkpoint plumbing

def _write_loss_csv(path, losses, counter: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([counter, "loss"])
        writer.writerows([i, repr(float(x))] for i, x in enumerate(losses))


def _read_loss_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [float(r[1]) for r in rows[1:]]


def _dataset_meta(cfg: RunConfig) -> dict:
    w = cfg.world
    return {"n_scenes": w.n_scenes, "n_views": w.n_views, "H": w.H, "W": w.W,
            "n_classes": w.n_classes, "seed": w.seed}


def _save_trained(path, kind: str, params: dict, train_cfg, cfg: RunConfig,
                  train_state: dict, extras: dict | None = None,
                  meta_extra: dict | None = None) -> None:
    table = {f"param.{name}": p.data for name, p in params.items()}
    for name, arr in (extras or {}).items():
        table[f"extra.{name}"] = np.asarray(arr, dtype=np.float64)
    table.update(train_state["opt"])
    write_tensors(path, table)
    meta = {
        "kind": kind,
        "format": CKPT_FORMAT,
        "config": dataclasses.asdict(train_cfg),
        "dataset": _dataset_meta(cfg),
        "done": train_state["done"],
        "rng": train_state["rng"],
    }
    meta.update(meta_extra or {})
    write_sidecar(sidecar_path(path), meta)


def _load_params(params: dict, table: dict, path) -> None:
    for name, p in params.items():
        key = f"param.{name}"
        if key not in table:
            raise CheckpointError(f"checkpoint {path} lacks tensor {key}")
        if table[key].shape != p.data.shape:
            raise CheckpointError(
                f"checkpoint {path} tensor {key} has shape {table[key].shape}, "
                f"expected {p.data.shape}")
        p.data[:] = table[key]


def _require_ckpt(wd: Workdir, name: str) -> Path:
    path = wd.ckpt(name)
    if not path.exists():
        raise MissingArtifactError(
            f"missing checkpoint {path}; run {_PRODUCERS[name]} first")
    return path


def _plan_training(path, loss_csv, train_cfg, counter_field: str):
    """Decide between skip (None, True), resume (state, False), fresh (None, False)."""
    if not path.exists():
        return None, False
    meta = read_sidecar(sidecar_path(path))
    requested = dataclasses.asdict(train_cfg)
    stored = dict(meta.get("config", {}))
    done = int(meta.get("done", -1))
    requested.pop(counter_field), stored.pop(counter_field, None)
    if stored != requested or meta.get("format") != CKPT_FORMAT:
        return None, False  # different run; retrain from scratch
    target = getattr(train_cfg, counter_field)
    if done == target:
        return None, True
    if done < target:
        table = read_tensors(path)
        resume = {
            "params": {k[len("param."):]: v for k, v in table.items()
                       if k.startswith("param.")},
            "opt": {k: v for k, v in table.items() if k.startswith("opt.")},
            "rng": meta["rng"],
            "done": done,
            "losses": _read_loss_csv(loss_csv),
        }
        return resume, False
    return None, False  # shorter schedule requested; rebuild exactly


# ---------------------------------------------------------------------------
# loaders

def _load_dataset(cfg: RunConfig, wd: Workdir) -> Dataset:
    path = wd.dataset
    if not path.exists():
        raise MissingArtifactError(f"missing dataset {path}; run gen-data first")
    ds = load_dataset(path)
    w = cfg.world
    actual = (len(ds.records), ds.V, ds.H, ds.W, ds.n_classes)
    wanted = (w.n_scenes, w.n_views, w.H, w.W, w.n_classes)
    if actual != wanted:
        raise ConfigError(
            f"dataset {path} has (scenes, views, H, W, classes)={actual} but the "
            f"config asks {wanted}; rerun gen-data")
    return ds


def _load_vae(cfg: RunConfig, wd: Workdir) -> VideoAE:
    path = _require_ckpt(wd, "vae")
    meta, table = read_sidecar(sidecar_path(path)), read_tensors(path)
    tc = AETrainConfig(**meta["config"])
    if tc.latent_channels != cfg.models.latent_channels:
        raise ConfigError(
            f"checkpoint {path} has latent_channels={tc.latent_channels} but the "
            f"config asks {cfg.models.latent_channels}; rerun train-vae")
    ds_meta = meta["dataset"]
    model = VideoAE(ds_meta["H"], ds_meta["W"], tc, np.random.default_rng(tc.seed))
    _load_params(model.params, table, path)
    freeze(model.params)
    model.mu = table["extra.mu"]
    model.sigma = table["extra.sigma"]
    return model


def _load_f3d(cfg: RunConfig, wd: Workdir) -> Feedforward3D:
    path = _require_ckpt(wd, "f3d")
    meta, table = read_sidecar(sidecar_path(path)), read_tensors(path)
    tc = F3DTrainConfig(**meta["config"])
    if tc.layers != cfg.models.f_layers:
        raise ConfigError(
            f"checkpoint {path} has layers={tc.layers} but the config asks "
            f"{cfg.models.f_layers}; rerun train-3d")
    ds_meta = meta["dataset"]
    model = Feedforward3D(ds_meta["H"], ds_meta["W"], ds_meta["n_views"], tc,
                          np.random.default_rng(tc.seed))
    _load_params(model.params, table, path)
    freeze(model.params)
    return model


def _load_critic(cfg: RunConfig, wd: Workdir) -> Critic:
    path = _require_ckpt(wd, "critic")
    meta, table = read_sidecar(sidecar_path(path)), read_tensors(path)
    tc = CriticTrainConfig(**meta["config"])
    ds_meta = meta["dataset"]
    model = Critic(ds_meta["H"], ds_meta["W"], ds_meta["n_classes"], tc,
                   np.random.default_rng(tc.seed))
    _load_params(model.params, table, path)
    freeze(model.params)
    return model


def _load_gen(cfg: RunConfig, wd: Workdir) -> FlowGenerator:
    path = _require_ckpt(wd, "gen")
    meta, table = read_sidecar(sidecar_path(path)), read_tensors(path)
    tc = GenTrainConfig(**meta["config"])
    model = FlowGenerator(tuple(meta["latent_shape"]), meta["dataset"]["n_classes"],
                          tc, np.random.default_rng(tc.seed))
    _load_params(model.params, table, path)
    freeze(model.params)
    return model


def _layer_set(cfg: RunConfig, minimum: int = 1) -> tuple:
    ls = cfg.stitch.layer_set or tuple(range(1, cfg.models.f_layers))
    bad = [k for k in ls if not 1 <= k < cfg.models.f_layers]
    if bad:
        raise ConfigError(
            f"stitch.layer_set: layers {bad} outside 1..{cfg.models.f_layers - 1}")
    if len(ls) < minimum:
        raise ConfigError(
            f"stitch.layer_set: need at least {minimum} layers, got {len(ls)}")
    return ls


def _load_stitch_fit(wd: Workdir):
    path = _require_ckpt(wd, "stitch_fit")
    meta, table = read_sidecar(sidecar_path(path)), read_tensors(path)
    return table["stitch.S"], int(meta["k_star"])


def _load_stitched(cfg: RunConfig, wd: Workdir, ae: VideoAE, f3d: Feedforward3D):
    path = _require_ckpt(wd, "stitched")
    meta, table = read_sidecar(sidecar_path(path)), read_tensors(path)
    s = np.vstack([table["param.stitch.w"], table["param.stitch.b"][None, :]])
    model = assemble(ae, s, f3d, int(meta["k_star"]),
                     adapter_rank=int(meta["adapter_rank"]),
                     adapter_alpha=float(meta["adapter_alpha"]),
                     seed=cfg.world.seed)
    _load_params(model.trainable_params(), table, path)
    return model


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(cfg: RunConfig, wd: Workdir) -> int:
    w = cfg.world
    ds = emit_dataset(wd.dataset, w.n_scenes, w.n_views, w.H, w.W, w.seed,
                      w.n_classes)
    print(f"gen-data: wrote {len(ds.records)} scenes to {wd.dataset}")
    return 0


def _train_command(cfg, wd, *, name, counter, train_cfg, run, extras_of=None,
                   meta_extra_of=None, report=None):
    """Shared train-subcommand shape: plan, train or resume, save, report."""
    path = wd.ckpt(name)
    loss_csv = wd.report(report or f"{name}_loss.csv")
    resume, up_to_date = _plan_training(path, loss_csv, train_cfg, counter)
    if up_to_date:
        print(f"{_PRODUCERS[name]}: {path} is up to date "
              f"({getattr(train_cfg, counter)} {counter})")
        return 0
    model, losses = run(train_cfg, resume)
    _save_trained(path, name, model.params, train_cfg, cfg, model.train_state,
                  extras=extras_of(model) if extras_of else None,
                  meta_extra=meta_extra_of(model) if meta_extra_of else None)
    _write_loss_csv(loss_csv, losses, counter.rstrip("s"))
    resumed = f" (resumed at {resume['done']})" if resume else ""
    print(f"{_PRODUCERS[name]}: {len(losses)} {counter} done{resumed}, "
          f"final loss {losses[-1]:.6f}, wrote {path}")
    return 0


def cmd_train_vae(cfg: RunConfig, wd: Workdir) -> int:
    ds = _load_dataset(cfg, wd)
    tc = AETrainConfig(latent_channels=cfg.models.latent_channels,
                       epochs=cfg.models.vae_epochs, seed=cfg.world.seed)
    return _train_command(
        cfg, wd, name="vae", counter="epochs", train_cfg=tc,
        run=lambda c, r: train_autoencoder(ds, c, resume=r),
        extras_of=lambda m: {"mu": m.mu, "sigma": m.sigma})


def cmd_train_3d(cfg: RunConfig, wd: Workdir) -> int:
    ds = _load_dataset(cfg, wd)
    tc = F3DTrainConfig(layers=cfg.models.f_layers, epochs=cfg.models.f3d_epochs,
                        seed=cfg.world.seed)
    return _train_command(
        cfg, wd, name="f3d", counter="epochs", train_cfg=tc,
        run=lambda c, r: train_feedforward3d(ds, c, resume=r))


def cmd_train_critic(cfg: RunConfig, wd: Workdir) -> int:
    ds = _load_dataset(cfg, wd)
    tc = CriticTrainConfig(width=cfg.models.critic_width,
                           epochs=cfg.models.critic_epochs, seed=cfg.world.seed)

    def run(c, r):
        critic, losses, accuracy = train_critic(ds, c, resume=r)
        critic.holdout_accuracy = accuracy
        return critic, losses

    return _train_command(
        cfg, wd, name="critic", counter="epochs", train_cfg=tc, run=run,
        meta_extra_of=lambda m: {"holdout_accuracy": m.holdout_accuracy})


def cmd_train_gen(cfg: RunConfig, wd: Workdir) -> int:
    ds = _load_dataset(cfg, wd)
    ae = _load_vae(cfg, wd)
    tc = GenTrainConfig(steps=cfg.models.gen_steps, seed=cfg.world.seed)
    return _train_command(
        cfg, wd, name="gen", counter="steps", train_cfg=tc,
        run=lambda c, r: train_generator(ds, ae, c, resume=r),
        meta_extra_of=lambda m: {"latent_shape": list(m.latent_shape)})


def cmd_scan(cfg: RunConfig, wd: Workdir) -> int:
    ds = _load_dataset(cfg, wd)
    ae, f3d = _load_vae(cfg, wd), _load_f3d(cfg, wd)
    fit = scan_layers(ae, f3d, ds, layer_set=_layer_set(cfg),
                      ridge_scale=cfg.stitch.ridge_scale)
    with open(wd.report("scan.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "lsq_mse"])
        writer.writerows([k, repr(float(v))]
                         for k, v in sorted(fit.per_layer_mse.items()))
    write_tensors(wd.ckpt("stitch_fit"), {"stitch.S": fit.S})
    write_sidecar(sidecar_path(wd.ckpt("stitch_fit")), {
        "kind": "stitch_fit", "format": CKPT_FORMAT,
        "k_star": fit.k_star, "ridge": fit.ridge,
        "per_layer_mse": {str(k): float(v) for k, v in fit.per_layer_mse.items()},
        "dataset": _dataset_meta(cfg),
    })
    print(f"scan: selected layer k*={fit.k_star} "
          f"(lsq_mse {fit.per_layer_mse[fit.k_star]:.6g}), wrote "
          f"{wd.report('scan.csv')}")
    return 0


def cmd_stitch_finetune(cfg: RunConfig, wd: Workdir) -> int:
    ds = _load_dataset(cfg, wd)
    ae, f3d = _load_vae(cfg, wd), _load_f3d(cfg, wd)
    s, k_star = _load_stitch_fit(wd)
    model = assemble(ae, s, f3d, k_star, adapter_rank=cfg.stitch.adapter_rank,
                     adapter_alpha=cfg.stitch.adapter_alpha, seed=cfg.world.seed)
    ftc = StitchFinetuneConfig(epochs=cfg.stitch.epochs, batch=cfg.stitch.batch,
                               lr=cfg.stitch.lr, clip=cfg.stitch.clip,
                               seed=cfg.world.seed)
    losses = finetune_stitched(model, ds, ftc)
    table = {f"param.{k}": p.data for k, p in model.trainable_params().items()}
    write_tensors(wd.ckpt("stitched"), table)
    write_sidecar(sidecar_path(wd.ckpt("stitched")), {
        "kind": "stitched", "format": CKPT_FORMAT, "k_star": k_star,
        "adapter_rank": cfg.stitch.adapter_rank,
        "adapter_alpha": cfg.stitch.adapter_alpha,
        "config": dataclasses.asdict(ftc), "dataset": _dataset_meta(cfg),
    })
    _write_loss_csv(wd.report("stitch_finetune_loss.csv"), losses, "epoch")
    final = f", final loss {losses[-1]:.6f}" if losses else ""
    print(f"stitch-finetune: {len(losses)} epochs on layer {k_star}{final}, "
          f"wrote {wd.ckpt('stitched')}")
    return 0


def cmd_align(cfg: RunConfig, wd: Workdir) -> int:
    ds = _load_dataset(cfg, wd)
    ae, f3d = _load_vae(cfg, wd), _load_f3d(cfg, wd)
    critic, gen = _load_critic(cfg, wd), _load_gen(cfg, wd)
    stitched = _load_stitched(cfg, wd, ae, f3d)
    a = cfg.align
    acfg = AlignConfig(T1=a.T1, T2=a.T2, K=a.K, steps=a.steps, batch=a.batch,
                       lr=a.lr, clip=a.clip, adapter_rank=a.adapter_rank,
                       adapter_alpha=a.adapter_alpha, w_mv=a.w_mv, w_3d=a.w_3d,
                       w_cons=a.w_cons, seed=cfg.world.seed)
    if a.w_mv == a.w_3d == a.w_cons == 0.0:
        print("align: reward weights are all zero; this run degenerates to "
              "plain flow-matching finetuning")
    adapters, rows = align_run(gen, ds, ae, stitched, critic, acfg,
                               log_path=wd.report("align_log.csv"))
    table = {f"param.{k}": p.data
             for k, p in adapter_trainables(adapters).items()}
    write_tensors(wd.ckpt("align"), table)
    write_sidecar(sidecar_path(wd.ckpt("align")), {
        "kind": "align", "format": CKPT_FORMAT,
        "adapted": list(GENERATOR_ADAPTED),
        "config": dataclasses.asdict(acfg), "dataset": _dataset_meta(cfg),
    })
    if rows:
        print(f"align: {len(rows)} steps, total reward {rows[0].total:.6f} -> "
              f"{rows[-1].total:.6f}, wrote {wd.ckpt('align')}")
    else:
        print(f"align: 0 steps, wrote {wd.ckpt('align')}")
    return 0


def cmd_eval_robustness(cfg: RunConfig, wd: Workdir) -> int:
    ds = _load_dataset(cfg, wd)
    ae, f3d = _load_vae(cfg, wd), _load_f3d(cfg, wd)
    stitched = _load_stitched(cfg, wd, ae, f3d)
    rcfg = RobustnessConfig(alphas=cfg.eval.alphas, trials=cfg.eval.trials,
                            seed=cfg.world.seed)
    _, summary = robustness_experiment(stitched, ae, f3d, ds, rcfg,
                                       csv_path=wd.report("robustness.csv"),
                                       json_path=wd.report("robustness.json"))
    verdict = summary["stitched_beats_sequential_at_largest_alpha"]
    print(f"eval-robustness: stitched beats sequential at alpha="
          f"{cfg.eval.alphas[-1]}: {verdict}, wrote {wd.report('robustness.csv')}")
    return 0


def cmd_eval_scan(cfg: RunConfig, wd: Workdir) -> int:
    ds = _load_dataset(cfg, wd)
    ae, f3d = _load_vae(cfg, wd), _load_f3d(cfg, wd)
    ftc = StitchFinetuneConfig(epochs=cfg.stitch.epochs, batch=cfg.stitch.batch,
                               lr=cfg.stitch.lr, clip=cfg.stitch.clip,
                               seed=cfg.world.seed)
    _, summary = scan_study(ae, f3d, ds, layer_set=_layer_set(cfg, minimum=3),
                            finetune_cfg=ftc,
                            adapter_rank=cfg.stitch.adapter_rank,
                            adapter_alpha=cfg.stitch.adapter_alpha,
                            csv_path=wd.report("scan_study.csv"),
                            json_path=wd.report("scan_study.json"))
    print(f"eval-scan: spearman(lsq_mse, acc)={summary['spearman_mse_acc']:.3f}, "
          f"selected layer {summary['selected_layer']}, layers by accuracy "
          f"{summary['layers_by_acc']}, wrote {wd.report('scan_study.csv')}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-vae": cmd_train_vae,
    "train-3d": cmd_train_3d,
    "train-critic": cmd_train_critic,
    "train-gen": cmd_train_gen,
    "scan": cmd_scan,
    "stitch-finetune": cmd_stitch_finetune,
    "align": cmd_align,
    "eval-robustness": cmd_eval_robustness,
    "eval-scan": cmd_eval_scan,
}

_HELP = {
    "gen-data": "render the synthetic multi-view dataset",
    "train-vae": "train the frame autoencoder",
    "train-3d": "train the multi-view 3D reconstruction net",
    "train-critic": "train the frozen prompt-class critic",
    "train-gen": "train the latent flow-matching generator",
    "scan": "closed-form stitch fit over candidate layers; selects k*",
    "stitch-finetune": "assemble the stitched model and finetune adapters",
    "align": "reward-finetune the generator through the stitched decoder",
    "eval-robustness": "latent-noise robustness: stitched vs sequential path",
    "eval-scan": "per-layer stitch quality study with full finetunes",
}


def _config_help() -> str:
    lines = ["config keys and defaults (JSON sections; override with "
             "--set section.key=value):"]
    for section, payload in cfgmod.to_dict(RunConfig()).items():
        for key, value in payload.items():
            lines.append(f"  {section}.{key} = {json.dumps(value)}")
    return "\n".join(lines)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stitchgen",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command")
    for name, handler in _COMMANDS.items():
        p = sub.add_parser(name, help=_HELP[name], epilog=_config_help(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", default=None,
                       help="JSON run config; defaults apply when omitted")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
    return parser


def _resolve_config(args) -> RunConfig:
    if args.config is None:
        payload = {}
    else:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            payload = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    cfgmod.apply_overrides(payload, args.set)
    return cfgmod.from_dict(payload)


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 0
    try:
        cfg = _resolve_config(args)
        wd = Workdir(cfg.paths.workdir)
        wd.ensure()
        return _COMMANDS[args.command](cfg, wd)
    except ConfigError as exc:
        return _fail(2, exc)
    except (MissingArtifactError, CheckpointError) as exc:
        return _fail(3, exc)
    except (NumericError, FloatingPointError) as exc:
        return _fail(4, exc)
    except TrainingError as exc:
        return _fail(1, exc)
    except OSError as exc:
        return _fail(2, exc)


def _fail(code: int, exc: Exception) -> int:
    message = " ".join(str(exc).split())
    print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

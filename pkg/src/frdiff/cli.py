"""``frdiff`` command-line entry point.

Every command resolves a :class:`~frdiff.config.RunConfig` (defaults, then
``--config`` file, then ``FRDIFF_OUT``, then flags), writes it to
``<out_dir>/<run>/config.json`` and puts all outputs next to it, ending
with ``summary.json``. Exit codes: 0 success, 2 configuration error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as C
from .analysis import (
    CostModel,
    measure_temporal_change,
    record_block_outputs,
    spectral_comparison,
    speedup_model,
    verify_nfe_equivalence,
    write_feature_heatmaps,
)
from .autofr import AutoFRConfig, autofr_search
from .data import load_corpus
from .io import load_checkpoint, save_checkpoint, save_tensor, write_json, write_pgm, write_ppm
from .network import ScoreNetwork, build_toy_network, network_from_checkpoint
from .reuse import ConfigurationError, KeyframeSet, MixingSchedule, frdiff_sample, uniform_keyframes
from .sampling import SamplerConfig, sample
from .schedule import NoiseSchedule
from .tensor import ContractError
from .training import NumericalError, train_toy

log = logging.getLogger("frdiff")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

COMMANDS = ("train", "sample", "autofr", "analyze-similarity", "analyze-psd", "profile", "verify-equivalence")
SAMPLING = ("sample", "autofr", "analyze-similarity", "analyze-psd", "profile", "verify-equivalence")
ALL = COMMANDS


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _strs(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _opt_int(text: str) -> Optional[int]:
    return None if text.lower() in ("none", "null", "") else int(text)


# (flag, config path, type, help, commands). The default shown in --help is
# read from RunConfig so there is one source of truth.
FLAGS: list[tuple[str, str, object, str, Sequence[str]]] = [
    ("--arch", "model.arch", str, "network architecture: toy_unet or toy_dit", ALL),
    ("--width", "model.width", int, "channel / token width", ALL),
    ("--depth", "model.depth", int, "number of residual blocks", ALL),
    ("--model-seed", "model.seed", int, "weight initialisation seed", ALL),
    ("--T", "schedule.T", int, "diffusion horizon", ALL),
    ("--beta-start", "schedule.beta_start", float, "first beta of the linear schedule", ALL),
    ("--beta-end", "schedule.beta_end", float, "last beta of the linear schedule", ALL),
    ("--out-dir", "io.out_dir", str, "parent directory for run directories", ALL),
    ("--run-name", "io.run_name", str, "run directory name (default <command>-<config hash>)", ALL),
    ("--checkpoint", "io.checkpoint", str, "checkpoint directory to load (random weights if unset)", SAMPLING),
    ("--corpus", "train.corpus", str, "training corpus: shapes or gmm (also fixes the image shape)", ALL),
    ("--corpus-seed", "train.corpus_seed", int, "corpus generator seed", ("train",)),
    ("--steps", "train.steps", int, "optimizer steps", ("train",)),
    ("--lr", "train.lr", float, "Adam learning rate", ("train",)),
    ("--batch", "train.batch", int, "minibatch size", ("train",)),
    ("--cond-drop", "train.cond_drop", float, "label dropout probability (for guidance)", ("train",)),
    ("--steps", "sampler.N", int, "sampling iterations N", SAMPLING),
    ("--solver", "sampler.solver", str, "ddim or ddpm", ("sample",)),
    ("--guidance", "sampler.guidance_weight", float, "classifier-free guidance weight w", SAMPLING),
    ("--seed", "sampler.seed", int, "noise seed", SAMPLING),
    ("--label", "sampler.label", _opt_int, "class label (none = unconditional)", SAMPLING),
    ("--batch", "sampler.batch", int, "samples per run", ("sample", "analyze-psd", "profile", "verify-equivalence")),
    ("--fr-interval", "fr.interval", int, "keyframe interval M", ("sample", "profile")),
    ("--keyframes", "fr.keyframes", _ints, "explicit keyframes, comma separated (overrides M)", ("sample", "profile")),
    ("--mixing", "fr.mixing", argparse.BooleanOptionalAction, "blend reuse scores with the keyframe score",
     ("sample", "profile")),
    ("--tau", "fr.tau", float, "mixing temperature", ("sample", "autofr", "analyze-psd", "profile")),
    ("--bias", "fr.bias", float, "mixing bias", ("sample", "autofr", "analyze-psd", "profile")),
    ("--reuse-scope", "fr.reuse_scope", _strs, "block kinds that reuse features, comma separated", ("sample",)),
    ("--cost-lambda", "autofr.cost_lambda", float, "weight of the keyframe cost term", ("autofr",)),
    ("--lr", "autofr.lr", float, "Adam learning rate for gate logits", ("autofr",)),
    ("--iters", "autofr.iters", int, "search iterations", ("autofr",)),
    ("--batch", "autofr.batch", int, "noise seeds per search iteration", ("autofr",)),
    ("--init-logit", "autofr.init_logit", float, "initial gate logit", ("autofr",)),
    ("--seeds", "analysis.seeds", int, "trajectories averaged for the change metric", ("analyze-similarity",)),
    ("--dt", "analysis.dt", int, "iteration gap for the change metric", ("analyze-similarity",)),
    ("--heatmap-iterations", "analysis.heatmap_iterations", _ints, "iterations rendered as PGM heatmaps",
     ("analyze-similarity",)),
    ("--stride", "analysis.stride", int, "reduced-step stride (also the matched keyframe interval for PSD)",
     ("analyze-psd", "verify-equivalence")),
    ("--skippable", "analysis.skippable", float, "uniform skippable fraction s (overrides network counts)",
     ("profile",)),
    ("--latency-csv", "analysis.latency_csv", str, "latency table with columns block,cost,skippable", ("profile",)),
    ("--skip-zero-lambda", "analysis.skip_zero_lambda", argparse.BooleanOptionalAction,
     "count mixing steps with lambda 0 as free", ("profile",)),
]


def _dest(path: str) -> str:
    return "cfg__" + path.replace(".", "__")


def build_parser() -> argparse.ArgumentParser:
    defaults = C.RunConfig()
    parser = argparse.ArgumentParser(prog="frdiff", description="Feature-reuse diffusion sampling toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for cmd in COMMANDS:
        p = sub.add_parser(cmd, help=_HELP[cmd], description=_HELP[cmd])
        p.add_argument("--config", help="JSON config file (default: none)")
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit (default: off)")
        p.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads (default: 1)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress (default: off)")
        for flag, path, typ, text, cmds in FLAGS:
            if cmd not in cmds:
                continue
            default = defaults.get(path)
            shown = ",".join(map(str, default)) if isinstance(default, list) else default
            kw = {"dest": _dest(path), "default": None, "help": f"{text} (default: {shown})"}
            if typ is not argparse.BooleanOptionalAction:
                kw["metavar"] = path.split(".")[1].upper()
            if typ is argparse.BooleanOptionalAction:
                p.add_argument(flag, action=argparse.BooleanOptionalAction, **kw)
            else:
                p.add_argument(flag, type=typ, **kw)
    return parser


_HELP = {
    "train": "train a toy score network and write a checkpoint",
    "sample": "sample images, optionally with feature reuse and score mixing",
    "autofr": "search a keyframe set by gradient descent on gate logits",
    "analyze-similarity": "temporal change of every block output along sampling trajectories",
    "analyze-psd": "radially averaged power spectra of baseline, reduced-step, reuse and mixing samples",
    "profile": "analytic speedup of a keyframe schedule plus measured wall-clock",
    "verify-equivalence": "check whole-output reuse against a reduced-step solver",
}


def resolve_config(args: argparse.Namespace) -> C.RunConfig:
    cfg = C.load(args.config)
    for key, value in vars(args).items():
        if key.startswith("cfg__") and value is not None:
            cfg.set(key[5:].replace("__", "."), value)
    return cfg.validate()


# ---------------------------------------------------------------------------
# helpers shared by commands


def _schedule(cfg: C.RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return NoiseSchedule.linear(s.T, s.beta_start, s.beta_end)


def _image_shape(corpus: str) -> tuple[int, int, int]:
    return {"shapes": (1, 8, 8), "gmm": (2, 1, 1)}.get(corpus) or _bad(f"unknown corpus {corpus!r}")


def _bad(msg: str):
    raise C.ConfigError(msg)


def _network(cfg: C.RunConfig) -> ScoreNetwork:
    if cfg.io.checkpoint:
        try:
            params, meta = load_checkpoint(cfg.io.checkpoint)
        except (OSError, KeyError, ValueError) as exc:
            raise C.ConfigError(f"cannot load checkpoint {cfg.io.checkpoint}: {exc}") from None
        return network_from_checkpoint(params, meta)
    log.warning("no checkpoint given; using randomly initialised weights")
    m = cfg.model
    return build_toy_network(m.arch, m.width, m.depth, m.seed, _image_shape(cfg.train.corpus))


def _sampler(cfg: C.RunConfig, batch: Optional[int] = None) -> SamplerConfig:
    s = cfg.sampler
    return SamplerConfig(s.N, s.solver, s.guidance_weight, s.seed, s.label, batch or s.batch)


def _keyframes(cfg: C.RunConfig) -> KeyframeSet:
    try:
        if cfg.fr.keyframes is not None:
            return KeyframeSet(tuple(cfg.fr.keyframes), cfg.sampler.N)
        return uniform_keyframes(cfg.sampler.N, cfg.fr.interval)
    except ValueError as exc:
        raise C.ConfigError(f"bad keyframe schedule: {exc}") from None


def _mixing(cfg: C.RunConfig) -> Optional[MixingSchedule]:
    return MixingSchedule(cfg.sampler.N, cfg.fr.tau, cfg.fr.bias) if cfg.fr.mixing else None


def _write_images(out: Path, images: np.ndarray, prefix: str = "sample") -> int:
    written = 0
    for i, img in enumerate(images):
        if img.shape[-1] < 2:
            continue  # point-cloud corpora have no image form
        if img.shape[0] == 1:
            write_pgm(out / f"{prefix}_{i:03d}.pgm", img[0])
        elif img.shape[0] == 3:
            write_ppm(out / f"{prefix}_{i:03d}.ppm", img)
        else:
            continue
        written += 1
    return written


def run_dir(cfg: C.RunConfig, command: str) -> Path:
    name = cfg.io.run_name or f"{command}-{cfg.digest()}"
    out = Path(cfg.io.out_dir) / name
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps())
    return out


# ---------------------------------------------------------------------------
# commands; each returns the summary dict


def cmd_train(cfg: C.RunConfig, out: Path) -> dict:
    m, t = cfg.model, cfg.train
    data = load_corpus(t.corpus, seed=t.corpus_seed)
    net = build_toy_network(m.arch, m.width, m.depth, m.seed, data.image_shape)
    tic = time.perf_counter()
    net, losses = train_toy(net, data, _schedule(cfg), t.steps, t.lr, t.batch, m.seed, t.cond_drop,
                            loss_csv=out / "loss.csv")
    save_checkpoint(out / "checkpoint", net.param_arrays(), net.config)
    preview = sample(net, SamplerConfig(steps=cfg.sampler.N, seed=cfg.sampler.seed, batch=8), _schedule(cfg)).sample
    _write_images(out / "images", preview)
    return {"steps": t.steps, "first_loss": float(losses[0]) if t.steps else None,
            "final_loss": float(losses[-1]) if t.steps else None, "checkpoint": str(out / "checkpoint"),
            "wallclock_s": time.perf_counter() - tic}


def cmd_sample(cfg: C.RunConfig, out: Path) -> dict:
    net, sch = _network(cfg), _schedule(cfg)
    ks = _keyframes(cfg)
    traj = frdiff_sample(net, _sampler(cfg), ks, _mixing(cfg), sch, scope=cfg.fr.reuse_scope)
    save_tensor(out / "samples", traj.sample, name="samples")
    traj.write_ledger(out / "ledger.csv")
    n_img = _write_images(out / "images", traj.sample)
    return {"keyframes": ks.to_list(), "n_keyframes": len(ks), "network_evals": traj.network_evals,
            "ops": traj.ops, "images": n_img, "wallclock_s": traj.wallclock_s}


def cmd_autofr(cfg: C.RunConfig, out: Path) -> dict:
    net, sch = _network(cfg), _schedule(cfg)
    a, s = cfg.autofr, cfg.sampler
    acfg = AutoFRConfig(cost_lambda=a.cost_lambda, lr=a.lr, iterations=a.iters, batch=a.batch, steps=s.N,
                        seed=s.seed, init_logit=a.init_logit, tau=cfg.fr.tau, bias=cfg.fr.bias,
                        guidance_weight=s.guidance_weight, label=s.label)
    tic = time.perf_counter()
    result = autofr_search(net, sch, acfg, cache_dir=out)
    result.write(out)
    write_json(out / "keyframes.json", {"fr": {"keyframes": result.keyframes.to_list()}})
    return {"keyframes": result.keyframes.to_list(), "n_keyframes": len(result.keyframes),
            "final_mse": result.final_mse, "initial_loss": result.history[0]["loss"],
            "final_loss": result.history[-1]["loss"], "wallclock_s": time.perf_counter() - tic}


def cmd_analyze_similarity(cfg: C.RunConfig, out: Path) -> dict:
    net, sch, a, s = _network(cfg), _schedule(cfg), cfg.analysis, cfg.sampler
    report = measure_temporal_change(net, sch, s.N, a.seeds, a.dt, s.label, s.guidance_weight)
    report.write_csv(out / "similarity.csv")
    feats = record_block_outputs(net, SamplerConfig(steps=s.N, seed=s.seed, label=s.label,
                                                    guidance_weight=s.guidance_weight), sch)
    iters = [n for n in a.heatmap_iterations if 1 <= n <= s.N]
    maps = write_feature_heatmaps(feats, out / "heatmaps", iters)
    med = np.median(report.mean, axis=0)
    return {"layers": report.layers, "dt": report.dt, "median_change": med.tolist(),
            "argmax_iteration": int(np.argmax(med)) + 1, "heatmaps": len(maps)}


def cmd_analyze_psd(cfg: C.RunConfig, out: Path) -> dict:
    net, sch, s = _network(cfg), _schedule(cfg), cfg.sampler
    comp = spectral_comparison(net, sch, s.N, cfg.analysis.stride, s.batch, s.seed, (s.label,),
                               s.guidance_weight, MixingSchedule(s.N, cfg.fr.tau, cfg.fr.bias))
    for method, curve in comp.curves.items():
        curve.write_csv(out / f"psd_{method}.csv")
        save_tensor(out / f"samples_{method}", comp.samples[method], name=f"samples_{method}")
    return comp.summary()


def cmd_profile(cfg: C.RunConfig, out: Path) -> dict:
    a, N = cfg.analysis, cfg.sampler.N
    ks = _keyframes(cfg)
    kw = {"mixing": _mixing(cfg), "skip_zero_lambda": a.skip_zero_lambda}
    summary: dict = {"N": N, "keyframes": ks.to_list(), "n_keyframes": len(ks)}
    if a.skippable is not None:
        model, source = CostModel.uniform(a.skippable, N, keyframes=ks.members, **kw), "uniform"
    elif a.latency_csv:
        try:
            model, source = CostModel.from_csv(a.latency_csv, N, ks.members, **kw), "latency_csv"
        except (OSError, KeyError, ValueError) as exc:
            raise C.ConfigError(f"cannot read latency table {a.latency_csv}: {exc}") from None
    else:
        net, sch = _network(cfg), _schedule(cfg)
        model, source = CostModel.from_network(net, N, ks.members, **kw), "operation_counts"
        base = sample(net, _sampler(cfg), sch)
        fr = frdiff_sample(net, _sampler(cfg), ks, _mixing(cfg), sch)
        base.write_ledger(out / "ledger_baseline.csv")
        fr.write_ledger(out / "ledger_fr.csv")
        summary.update(wallclock_baseline_s=base.wallclock_s, wallclock_fr_s=fr.wallclock_s,
                       measured_speedup=base.wallclock_s / fr.wallclock_s, ops_speedup=base.ops / fr.ops)
    speedup = speedup_model(model)
    print(f"speedup {speedup:.3f}")
    summary.update(source=source, speedup=speedup, asymptote=model.full / model.nonskippable
                   if model.nonskippable > 0 else float("inf"))
    return summary


def cmd_verify_equivalence(cfg: C.RunConfig, out: Path) -> dict:
    net, sch = _network(cfg), _schedule(cfg)
    rep = verify_nfe_equivalence(net, sch, cfg.sampler.N, cfg.analysis.stride, _sampler(cfg))
    if not np.isfinite(rep.max_abs_dev):
        raise NumericalError(f"non-finite deviation {rep.max_abs_dev}")
    print(f"max_abs_dev {rep.max_abs_dev:.3e}")
    return {"max_abs_dev": rep.max_abs_dev, "N": rep.N, "stride": rep.stride,
            "reduced_steps": rep.reduced_steps, "uneven": rep.uneven}


HANDLERS: dict[str, Callable[[C.RunConfig, Path], dict]] = {
    "train": cmd_train,
    "sample": cmd_sample,
    "autofr": cmd_autofr,
    "analyze-similarity": cmd_analyze_similarity,
    "analyze-psd": cmd_analyze_psd,
    "profile": cmd_profile,
    "verify-equivalence": cmd_verify_equivalence,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(cfg.dumps())
            return EXIT_OK
        if args.threads < 1:
            raise C.ConfigError("--threads must be >= 1")
        with threadpool_limits(limits=args.threads), np.errstate(over="raise", invalid="raise"):
            out = run_dir(cfg, args.command)
            summary = HANDLERS[args.command](cfg, out)
        summary["command"] = args.command
        write_json(out / "summary.json", summary)
        print(f"wrote {out}")
        return EXIT_OK
    except (C.ConfigError, ConfigurationError, ContractError) as exc:
        print(f"frdiff: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"frdiff: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

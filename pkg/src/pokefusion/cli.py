"""Command-line entry point.

    pokefusion <command> [--config run.json] [--out DIR] [--seed N] [--section.key VALUE ...]

Commands: gen-data, train, sample, eval, ablate, sweep-alpha, sweep-inference.
Exit codes: 0 success, 1 validation / usage error, 2 an ``--assert`` check failed.
The output root defaults to ``$POKEFUSION_OUT`` (or ``./runs``) joined with the
command name. Every output directory receives ``config.json`` (resolved
config) and ``run.json`` (command, seed, code version, wall time).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import code_version
from .ablation import (METRICS, ORDER, VARIANTS, ExperimentConfig, ablation_checks, alpha_curve, evaluate,
                       pretrain_backbone, render_table, run_ablation, sweep_alpha, sweep_inference)
from .checkpoint import CheckpointError, file_digest
from .config import RunConfig, apply_overrides, flag_names, load
from .data import (all_attrs, caption, generate_dataset, parse_caption, read_dataset, style_separability,
                   tokenize, write_dataset)
from .diffusion import GuidanceConfig, sample, write_samples
from .metrics import StyleReference
from .model import FusionConfig
from .training import Checkpoint, adapt_from_backbone, build_model, fit

OUT_ENV = "POKEFUSION_OUT"
COMMANDS = ("gen-data", "train", "sample", "eval", "ablate", "sweep-alpha", "sweep-inference")
EXIT_OK, EXIT_INVALID, EXIT_ASSERT = 0, 1, 2

log = logging.getLogger("pokefusion")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for failed assertions here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pokefusion", description="Desk-scale text + style conditioned sprite diffusion.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    helps = {
        "gen-data": "render the synthetic sprite corpus (PNG + manifest.jsonl)",
        "train": "train a denoiser (optionally adapting a backbone checkpoint)",
        "sample": "generate sprites from a checkpoint",
        "eval": "score a checkpoint with the oracle metrics",
        "ablate": "run the four-variant ablation",
        "sweep-alpha": "inference-time fusion weight sweep",
        "sweep-inference": "sampling steps x guidance scale robustness sweep",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name], description=helps[name])
        sp.add_argument("--config", type=Path, help="JSON run config (schema version 1)")
        sp.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV}/{name} or runs/{name})")
        sp.add_argument("--seed", type=int, help="shorthand for the command's main seed key")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "ablate"):
            sp.add_argument("--backbone", type=Path, help="checkpoint whose weights form the frozen backbone")
        if name in ("sample", "eval", "sweep-alpha", "sweep-inference"):
            sp.add_argument("--checkpoint", type=Path, action="append",
                            help="checkpoint file (repeatable for sweep-alpha)")
        if name == "sweep-inference":
            sp.add_argument("--baseline", type=Path, help="checkpoint to compare stability against")
        if name in ("ablate", "sweep-alpha", "sweep-inference"):
            sp.add_argument("--assert", dest="assert_", action="store_true",
                            help="exit 2 if the expected ordering does not hold")
        grp = sp.add_argument_group("config keys (override the config file)")
        for key in flag_names():
            grp.add_argument(f"--{key}", dest=f"set:{key}", metavar="V")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load(args.config)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("set:") and v is not None}
    if args.seed is not None:
        key = {"gen-data": "data.seed", "train": "train.seed", "sample": "sample.seed",
               "eval": "eval.eval_seed", "ablate": "eval.seeds", "sweep-alpha": "eval.eval_seed",
               "sweep-inference": "eval.eval_seed"}[args.command]
        overrides[key] = json.dumps([args.seed]) if key == "eval.seeds" else str(args.seed)
    return apply_overrides(cfg, overrides)


def experiment_config(cfg: RunConfig) -> ExperimentConfig:
    e, t, s = cfg.eval, cfg.train, cfg.sample
    model = {k: v for k, v in cfg.model.to_dict().items() if k != "style_mode"}
    return ExperimentConfig(
        n_sprites=cfg.data.n, styles=cfg.data.styles, data_seed=cfg.data.seed, target_style=e.target_style,
        model=model, pretrain_steps=e.pretrain_steps, pretrain_lr=e.pretrain_lr, pretrain_seed=e.pretrain_seed,
        steps=t.steps, lr=t.lr, batch_size=t.batch_size, alpha=s.alpha, seeds=tuple(e.seeds),
        eval_samples=e.eval_samples, eval_steps=s.steps_used, omega=s.omega, sampler=s.sampler,
        eval_seed=e.eval_seed)


def load_data(cfg: RunConfig):
    if cfg.data.manifest:
        ds = read_dataset(Path(cfg.data.manifest), cfg.model.max_tokens)
    else:
        ds = generate_dataset(cfg.data.n, cfg.data.styles, cfg.data.seed, cfg.model.max_tokens)
    return ds, StyleReference.from_corpus(ds.features, ds.style_ids)


def _one_checkpoint(args) -> Checkpoint:
    if not args.checkpoint:
        raise ValueError(f"{args.command} needs --checkpoint PATH (a checkpoint.pkf written by `pokefusion train`)")
    if len(args.checkpoint) > 1:
        raise ValueError(f"{args.command} takes a single --checkpoint")
    return Checkpoint.load(args.checkpoint[0])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands; each returns (exit code, summary dict for run.json)


def cmd_gen_data(args, cfg: RunConfig, out: Path):
    ds = generate_dataset(cfg.data.n, cfg.data.styles, cfg.data.seed, cfg.model.max_tokens)
    manifest = write_dataset(ds, out)
    sep = style_separability(ds) if cfg.data.styles > 1 else None
    print(f"wrote {len(ds)} sprites to {manifest}")
    return EXIT_OK, {"seed": cfg.data.seed, "manifest": str(manifest), "style_separability": sep}


def cmd_train(args, cfg: RunConfig, out: Path):
    ds, _ = load_data(cfg)
    if args.backbone is not None:
        model = adapt_from_backbone(Checkpoint.load(args.backbone).state, cfg.model, cfg.train.seed)
    else:
        model = build_model(cfg.model, cfg.train.seed)
    res = fit(ds, cfg.train, model=model, out_dir=out, meta={"command": "train"})
    digest = file_digest(out / "checkpoint.pkf")
    print(f"held-out loss {res.heldout_initial:.4f} -> {res.heldout_final:.4f}; checkpoint sha256 {digest}")
    return EXIT_OK, {"seed": cfg.train.seed, "checkpoint_sha256": digest,
                     "heldout_initial": res.heldout_initial, "heldout_final": res.heldout_final}


def _captions(cfg: RunConfig) -> list[str]:
    if cfg.sample.captions:
        caps = [str(c) for c in cfg.sample.captions]
        for c in caps:
            parse_caption(c)  # validates
        return [caps[i % len(caps)] for i in range(cfg.sample.n)]
    combos = all_attrs()
    return [caption(combos[i % len(combos)]) for i in range(cfg.sample.n)]


def cmd_sample(args, cfg: RunConfig, out: Path):
    ck = _one_checkpoint(args)
    model = ck.build_model()
    caps = _captions(cfg)
    tokens = torch.from_numpy(np.stack([tokenize(c, model.cfg.max_tokens) for c in caps]))
    style = None
    if model.cfg.style_mode != "none":
        style = ck.inference_style.expand(len(caps), -1)
    g = GuidanceConfig(cfg.sample.omega, cfg.sample.sampler, cfg.sample.steps_used)
    _, images = sample(model, tokens, style, g, FusionConfig(alpha=cfg.sample.alpha), cfg.sample.seed)
    meta = {"checkpoint_sha256": file_digest(args.checkpoint[0]), "seed": cfg.sample.seed,
            "alpha": cfg.sample.alpha, "omega": cfg.sample.omega, "sampler": cfg.sample.sampler,
            "steps_used": cfg.sample.steps_used}
    paths = write_samples(images, out, meta)
    for p, c in zip(paths, caps):
        side = json.loads(p.with_suffix(".json").read_text())
        side["caption"] = c
        _write_json(p.with_suffix(".json"), side)
    print(f"wrote {len(paths)} samples to {out}")
    return EXIT_OK, {"seed": cfg.sample.seed, "n": len(paths)}


def cmd_eval(args, cfg: RunConfig, out: Path):
    ck = _one_checkpoint(args)
    _, ref = load_data(cfg)
    ecfg = experiment_config(cfg)
    rep = evaluate(ck, ref, ecfg, fingerprint={"checkpoint_sha256": file_digest(args.checkpoint[0])})
    _write_json(out / "report.json", rep.to_dict())
    for m in METRICS:
        print(f"{m:>20}: {getattr(rep, m):.4f}")
    return EXIT_OK, {"seed": cfg.eval.eval_seed, **{m: getattr(rep, m) for m in METRICS}}


def cmd_ablate(args, cfg: RunConfig, out: Path):
    ecfg = experiment_config(cfg)
    data = load_data(cfg)
    unknown = [v for v in cfg.eval.variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")
    if args.backbone is not None:
        backbone = Checkpoint.load(args.backbone).state
    else:
        backbone = pretrain_backbone(data[0], ecfg, out / "backbone.pkf")
    res = run_ablation(cfg.eval.variants, ecfg, out, backbone=backbone, data=data,
                       trainable_override=cfg.eval.trainable_override or None)
    print(render_table(res.table()), end="")
    summary = {"seeds": list(ecfg.seeds), "table": res.table(), "failed": {f"{k[0]}/{k[1]}": v
                                                                          for k, v in res.failed.items()}}
    code = EXIT_OK
    if args.assert_:
        if list(cfg.eval.variants) != list(ORDER):
            raise ValueError("--assert needs all four variants")
        checks = ablation_checks(res)
        summary["checks"] = checks
        for k, ok in checks.items():
            print(f"check {k}: {'PASS' if ok else 'FAIL'}")
        if res.failed or not all(checks.values()):
            code = EXIT_ASSERT
    _write_json(out / "summary.json", summary)
    return code, summary


def cmd_sweep_alpha(args, cfg: RunConfig, out: Path):
    if not args.checkpoint:
        raise ValueError("sweep-alpha needs at least one --checkpoint PATH")
    ckpts = [Checkpoint.load(p) for p in args.checkpoint]
    _, ref = load_data(cfg)
    rows = sweep_alpha(ckpts, cfg.eval.alphas, ref, experiment_config(cfg), out)
    curve = alpha_curve(rows)
    for c in curve:
        print(f"alpha {c['alpha']:.2f}  " + "  ".join(f"{m} {c[m]:.4f}" for m in METRICS))
    summary = {"curve": curve}
    code = EXIT_OK
    if args.assert_:
        by = {c["alpha"]: c for c in curve}
        if not {0.0, 0.5, 1.0} <= set(by):
            raise ValueError("--assert needs alphas 0, 0.5 and 1 in eval.alphas")
        checks = {"semantic_mid_over_one": by[0.5]["semantic_accuracy"] > by[1.0]["semantic_accuracy"],
                  "style_mid_over_zero": by[0.5]["style_consistency"] > by[0.0]["style_consistency"]}
        summary["checks"] = checks
        for k, ok in checks.items():
            print(f"check {k}: {'PASS' if ok else 'FAIL'}")
        code = EXIT_OK if all(checks.values()) else EXIT_ASSERT
    _write_json(out / "summary.json", summary)
    return code, summary


def cmd_sweep_inference(args, cfg: RunConfig, out: Path):
    ck = _one_checkpoint(args)
    _, ref = load_data(cfg)
    ecfg = experiment_config(cfg)
    main = sweep_inference(ck, cfg.eval.steps_grid, cfg.eval.omega_grid, ref, ecfg, out / "sweep.csv")
    summary = {"style_mean": main.style_mean, "style_var": main.style_var, "style_cv": main.style_cv,
               "flagged": main.flagged}
    print(f"style_consistency cv {main.style_cv:.4f} over {len(main.cells)} cells, {len(main.flagged)} flagged")
    if args.baseline is not None:
        base = sweep_inference(Checkpoint.load(args.baseline), cfg.eval.steps_grid, cfg.eval.omega_grid, ref,
                               ecfg, out / "baseline_sweep.csv")
        summary["baseline_style_cv"] = base.style_cv
        print(f"baseline cv {base.style_cv:.4f}")
    code = EXIT_OK
    if args.assert_:
        if args.baseline is None:
            raise ValueError("--assert needs --baseline PATH")
        ok = main.style_cv < summary["baseline_style_cv"]
        summary["checks"] = {"cv_below_baseline": ok}
        print(f"check cv_below_baseline: {'PASS' if ok else 'FAIL'}")
        code = EXIT_OK if ok else EXIT_ASSERT
    _write_json(out / "summary.json", summary)
    return code, summary


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "ablate": cmd_ablate, "sweep-alpha": cmd_sweep_alpha, "sweep-inference": cmd_sweep_inference}


def output_dir(args) -> Path:
    if args.out is not None:
        return args.out
    return Path(os.environ.get(OUT_ENV, "runs")) / args.command


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
    except UsageError as exc:
        print(f"pokefusion: error: {exc}", file=sys.stderr)
        parser.print_help(sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    t0 = time.time()
    try:
        cfg = resolve_config(args)
        out = output_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        cfg.write(out / "config.json")
        code, summary = HANDLERS[args.command](args, cfg, out)
    except (ValueError, CheckpointError, FileNotFoundError, KeyError) as exc:
        print(f"pokefusion {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    _write_json(out / "run.json", {
        "command": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "config": cfg.to_dict(),
        "seed": summary.get("seed", summary.get("seeds")),
        "code_version": code_version(),
        "torch": torch.__version__,
        "wall_time_s": round(time.time() - t0, 3),
        "exit_code": code,
    })
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

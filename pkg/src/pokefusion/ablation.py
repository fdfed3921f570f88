"""Ablation, fusion-weight sweep and inference-robustness sweep.

Every variant adapts the same text-only pretrained backbone with the same
data, seeds and step budget. The variants differ in one switch each:

* ``TEXT_ONLY``: style branch removed, decoder attention trained.
* ``STYLE_NO_FUSION``: the style token is appended to the text context of a
  single attention (no weighted fusion); attention and projection trained.
* ``FROZEN_CROSS_ATTN``: full dual branch, attention weights locked at their
  initial values, only the style projection (and null style) trained.
* ``POKEFUSION``: full dual branch with attention and projection trained.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import file_digest
from .data import SpriteDataset, all_attrs, caption, generate_dataset, style_separability, tokenize
from .diffusion import GuidanceConfig, sample
from .metrics import MetricReport, StyleReference, evaluate_images
from .model import DenoiserConfig, FusionConfig
from .training import Checkpoint, TrainConfig, adapt_from_backbone, build_model, fit

log = logging.getLogger(__name__)

VARIANTS: dict[str, dict] = {
    "TEXT_ONLY": {"style_mode": "none", "trainable": "attention"},
    "STYLE_NO_FUSION": {"style_mode": "concat", "trainable": "attention+style"},
    "FROZEN_CROSS_ATTN": {"style_mode": "fusion", "trainable": "style"},
    "POKEFUSION": {"style_mode": "fusion", "trainable": "attention+style"},
}
ORDER = ("TEXT_ONLY", "STYLE_NO_FUSION", "FROZEN_CROSS_ATTN", "POKEFUSION")
METRICS = ("semantic_accuracy", "image_consistency", "style_consistency")
DIRECTION = {"semantic_accuracy": "↑", "image_consistency": "↑", "style_consistency": "↑"}

REPORT_HEADER = """\
# variant switches (everything else held fixed):
#   TEXT_ONLY          style branch removed
#   STYLE_NO_FUSION    style token appended to the text context, single attention
#   FROZEN_CROSS_ATTN  dual branch, attention locked at init, style projection trained
#   POKEFUSION         dual branch, attention + style projection trained
# all metrics higher-is-better; x100 only in this rendering
"""


@dataclass
class ExperimentConfig:
    n_sprites: int = 1000
    styles: int = 2
    data_seed: int = 0
    target_style: int = 0
    model: dict = field(default_factory=dict)
    pretrain_steps: int = 6000
    pretrain_lr: float = 1e-3
    pretrain_seed: int = 0
    steps: int = 3000
    lr: float = 1e-4
    batch_size: int = 8
    alpha: float = 0.5
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_samples: int = 40
    eval_steps: int = 50
    omega: float = 3.0
    sampler: str = "ddim_deterministic"
    eval_seed: int = 1234

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown experiment keys {sorted(extra)}")
        d = dict(d)
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def denoiser_config(self, style_mode: str) -> DenoiserConfig:
        return DenoiserConfig(**dict(self.model, style_mode=style_mode))


# ---------------------------------------------------------------------------
# shared pieces


def prepare_data(cfg: ExperimentConfig) -> tuple[SpriteDataset, StyleReference]:
    ds = generate_dataset(cfg.n_sprites, cfg.styles, cfg.data_seed)
    if cfg.styles > 1:
        sep = style_separability(ds)
        if not sep > 0.1:
            raise RuntimeError(f"style domains are not separable enough ({sep:.3f})")
    return ds, StyleReference.from_corpus(ds.features, ds.style_ids)


def eval_prompts(cfg: ExperimentConfig):
    rng = np.random.default_rng(cfg.eval_seed)
    combos = all_attrs()
    idx = rng.permutation(len(combos))
    picks = [combos[idx[i % len(combos)]] for i in range(cfg.eval_samples)]
    tokens = torch.from_numpy(np.stack([tokenize(caption(a)) for a in picks]))
    return picks, tokens


def pretrain_backbone(ds: SpriteDataset, cfg: ExperimentConfig, cache: Path | None = None) -> dict[str, torch.Tensor]:
    """Text-only denoiser trained end to end: the frozen backbone every variant adapts."""
    if cache is not None and Path(cache).exists():
        return Checkpoint.load(cache).state
    tc = TrainConfig(steps=cfg.pretrain_steps, lr=cfg.pretrain_lr, batch_size=cfg.batch_size,
                     seed=cfg.pretrain_seed, trainable="all", p_drop_style=0.0, target_style=cfg.target_style)
    model = build_model(cfg.denoiser_config("none"), cfg.pretrain_seed)
    res = fit(ds, tc, model=model, meta={"role": "backbone"})
    if cache is not None:
        res.checkpoint.save(cache)
    return res.checkpoint.state


def train_variant(variant: str, backbone: dict[str, torch.Tensor], ds: SpriteDataset, seed: int,
                  cfg: ExperimentConfig, out_dir: Path | None = None,
                  trainable_override: str | None = None) -> Checkpoint:
    spec = VARIANTS[variant]
    mcfg = cfg.denoiser_config(spec["style_mode"])
    model = adapt_from_backbone(backbone, mcfg, seed)
    tc = TrainConfig(steps=cfg.steps, lr=cfg.lr, batch_size=cfg.batch_size, seed=seed, alpha_train=cfg.alpha,
                     trainable=trainable_override or spec["trainable"], target_style=cfg.target_style)
    res = fit(ds, tc, model=model, out_dir=out_dir, meta={"variant": variant, "seed": seed})
    return res.checkpoint


def generate(ckpt: Checkpoint, tokens: torch.Tensor, alpha: float, omega: float, steps: int, sampler: str,
             seed: int) -> np.ndarray:
    model = ckpt.build_model()
    style = None
    if model.cfg.style_mode != "none":
        if ckpt.inference_style is None:
            raise ValueError("checkpoint has no stored inference style embedding")
        style = ckpt.inference_style.to(next(model.parameters()).dtype).expand(tokens.shape[0], -1)
    _, images = sample(model, tokens, style, GuidanceConfig(omega, sampler, steps), FusionConfig(alpha=alpha), seed)
    return images


def evaluate(ckpt: Checkpoint, ref: StyleReference, cfg: ExperimentConfig, alpha: float | None = None,
             omega: float | None = None, steps: int | None = None, fingerprint: dict | None = None) -> MetricReport:
    picks, tokens = eval_prompts(cfg)
    alpha = cfg.alpha if alpha is None else alpha
    omega = cfg.omega if omega is None else omega
    steps = cfg.eval_steps if steps is None else steps
    images = generate(ckpt, tokens, alpha, omega, steps, cfg.sampler, cfg.eval_seed)
    fp = dict(fingerprint or {}, alpha=alpha, omega=omega, steps=steps, eval_seed=cfg.eval_seed)
    return evaluate_images(images, picks, cfg.target_style, ref, fp)


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationResult:
    rows: list[dict]  # one per (variant, seed)
    checkpoints: dict[tuple[str, int], Checkpoint]
    failed: dict[tuple[str, int], str]

    def median(self, variant: str, metric: str) -> float:
        vals = [r[metric] for r in self.rows if r["variant"] == variant]
        return float(np.median(vals)) if vals else float("nan")

    def table(self) -> list[dict]:
        out = []
        for v in ORDER:
            if not any(r["variant"] == v for r in self.rows):
                if any(k[0] == v for k in self.failed):
                    out.append({"variant": v, "status": "failed"})
                continue
            out.append({"variant": v, "status": "ok", **{m: self.median(v, m) for m in METRICS}})
        return out


def run_ablation(variants, cfg: ExperimentConfig, out_dir: Path | None = None,
                 backbone: dict[str, torch.Tensor] | None = None, data=None,
                 trainable_override: str | None = None) -> AblationResult:
    ds, ref = data or prepare_data(cfg)
    if backbone is None:
        backbone = pretrain_backbone(ds, cfg, None if out_dir is None else Path(out_dir) / "backbone.pkf")
    rows, ckpts, failed = [], {}, {}
    for seed in cfg.seeds:
        for v in variants:
            t0 = time.time()
            sub = None if out_dir is None else Path(out_dir) / f"{v}_seed{seed}"
            try:
                ck = train_variant(v, backbone, ds, seed, cfg, sub, trainable_override)
                rep = evaluate(ck, ref, cfg, fingerprint={"variant": v, "seed": seed})
            except Exception as exc:  # one failed row must not sink the run
                log.exception("variant %s seed %d failed", v, seed)
                failed[(v, seed)] = repr(exc)
                continue
            ckpts[(v, seed)] = ck
            row = {"variant": v, "seed": seed,
                   **{m: getattr(rep, m) for m in METRICS}}
            if sub is not None:
                row["checkpoint_sha256"] = file_digest(sub / "checkpoint.pkf")
            rows.append(row)
            log.info("%s seed %d: %s (%.0fs)", v, seed,
                     {m: round(row[m], 4) for m in METRICS}, time.time() - t0)
    res = AblationResult(rows, ckpts, failed)
    if out_dir is not None:
        write_ablation(res, Path(out_dir))
    return res


def render_table(table: list[dict]) -> str:
    head = f"{'Method Variant':<22}" + "".join(f"{m + ' ' + DIRECTION[m]:>22}" for m in METRICS)
    lines = [REPORT_HEADER.rstrip(), head, "-" * len(head)]
    for r in table:
        if r.get("status") == "failed":
            lines.append(f"{r['variant']:<22}" + f"{'failed':>22}" * len(METRICS))
        else:
            lines.append(f"{r['variant']:<22}" + "".join(f"{100 * r[m]:>22.1f}" for m in METRICS))
    return "\n".join(lines) + "\n"


def write_ablation(res: AblationResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "ablation_runs.csv", res.rows, ["variant", "seed", *METRICS, "checkpoint_sha256"])
    write_csv(out_dir / "ablation.csv", res.table(), ["variant", "status", *METRICS])
    (out_dir / "ablation.txt").write_text(render_table(res.table()))


def write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def ablation_checks(res: AblationResult) -> dict[str, bool]:
    """The orderings the ablation is expected to reproduce (median over seeds)."""
    sc = {v: res.median(v, "style_consistency") for v in ORDER}
    sem = {v: res.median(v, "semantic_accuracy") for v in ORDER}
    return {
        "style_order": sc["TEXT_ONLY"] < sc["STYLE_NO_FUSION"] < sc["FROZEN_CROSS_ATTN"] < sc["POKEFUSION"],
        "semantic_kept": sem["POKEFUSION"] >= sem["TEXT_ONLY"] - 0.05,
    }


# ---------------------------------------------------------------------------
# sweeps


def sweep_alpha(ckpts: list[Checkpoint], alphas, ref: StyleReference, cfg: ExperimentConfig,
                out_dir: Path | None = None) -> list[dict]:
    """Inference-time fusion-weight sweep; one row per (alpha, checkpoint)."""
    rows = []
    for i, ck in enumerate(ckpts):
        for a in alphas:
            rep = evaluate(ck, ref, cfg, alpha=float(a), fingerprint={"checkpoint": i})
            rows.append({"alpha": float(a), "checkpoint": i, **{m: getattr(rep, m) for m in METRICS}})
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_csv(Path(out_dir) / "alpha_sweep.csv", rows, ["alpha", "checkpoint", *METRICS])
        write_alpha_svg(Path(out_dir) / "alpha_sweep.svg", alpha_curve(rows))
    return rows


def alpha_curve(rows: list[dict]) -> list[dict]:
    """Median over checkpoints per alpha."""
    out = []
    for a in sorted({r["alpha"] for r in rows}):
        sel = [r for r in rows if r["alpha"] == a]
        out.append({"alpha": a, **{m: float(np.median([r[m] for r in sel])) for m in METRICS}})
    return out


def write_alpha_svg(path: Path, curve: list[dict]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed salt: element ids in the SVG are otherwise random per run
    matplotlib.rcParams["svg.hashsalt"] = "pokefusion"

    fig, ax = plt.subplots(figsize=(5, 3.2))
    xs = [c["alpha"] for c in curve]
    for m in METRICS:
        ax.plot(xs, [c[m] for c in curve], marker="o", label=m)
    ax.set_xlabel("alpha")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


@dataclass
class InferenceSweep:
    cells: list[dict]
    flagged: list[dict]
    style_mean: float
    style_var: float
    style_cv: float


def sweep_inference(ckpt: Checkpoint, steps_grid, omega_grid, ref: StyleReference, cfg: ExperimentConfig,
                    out_path: Path | None = None) -> InferenceSweep:
    cells = []
    for s in steps_grid:
        for w in omega_grid:
            rep = evaluate(ckpt, ref, cfg, omega=float(w), steps=int(s))
            cells.append({"steps": int(s), "omega": float(w), **{m: getattr(rep, m) for m in METRICS}})
    sc = np.array([c["style_consistency"] for c in cells])
    med = float(np.median(sc))
    flagged = [c for c in cells if c["style_consistency"] < 0.8 * med]
    mean = float(sc.mean())
    var = float(sc.var())
    cv = float(np.sqrt(var) / mean) if mean > 0 else float("inf")
    out = InferenceSweep(cells, flagged, mean, var, cv)
    if out_path is not None:
        write_csv(Path(out_path), [dict(c, flagged=c in flagged) for c in cells],
                  ["steps", "omega", *METRICS, "flagged"])
    return out

"""Selective-freeze training: only decoder cross-attention and the style
projection receive updates, everything else stays bitwise fixed."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_tensors, save_tensors, tensor_digest
from .data import SpriteDataset
from .diffusion import NoiseSchedule, forward_noise, latent_to_model, training_loss
from .model import Denoiser, DenoiserConfig, FusionConfig, NumericError

log = logging.getLogger(__name__)

TRAINABLE_SCOPES = ("attention+style", "attention", "style", "all", "none")
INFERENCE_STYLES = ("ema", "dataset_mean")
# where a training record's style feature comes from: the mean feature of its
# style domain, the feature of another random image of the same domain, or
# the record's own image (leaks per-image content such as hue into s)
STYLE_SOURCES = ("domain_mean", "reference", "self")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    steps: int = 3000
    p_drop_text: float = 0.1
    p_drop_style: float = 0.1
    alpha_train: float = 0.5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    ema_decay: float = 0.99
    inference_style: str = "ema"
    target_style: int = 0
    trainable: str = "attention+style"
    holdout: float = 0.1
    style_source: str = "domain_mean"

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        for p in (self.p_drop_text, self.p_drop_style):
            if not 0.0 <= p <= 1.0:
                raise ValueError("dropout probabilities must lie in [0, 1]")
        if self.trainable not in TRAINABLE_SCOPES:
            raise ValueError(f"trainable must be one of {TRAINABLE_SCOPES}")
        if self.inference_style not in INFERENCE_STYLES:
            raise ValueError(f"inference_style must be one of {INFERENCE_STYLES}")
        if self.style_source not in STYLE_SOURCES:
            raise ValueError(f"style_source must be one of {STYLE_SOURCES}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown train config keys {sorted(extra)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter partition


@dataclass
class ParamPartition:
    trainable: set[str]
    frozen: set[str]

    @classmethod
    def from_model(cls, model: Denoiser, scope: str = "attention+style") -> "ParamPartition":
        names = [n for n, _ in model.named_parameters()]
        if scope == "all":
            chosen = set(names)
        elif scope == "none":
            chosen = set()
        else:
            chosen = set()
            if "attention" in scope:
                chosen |= set(model.decoder_attention_names())
            if "style" in scope:
                chosen |= set(model.style_names())
        part = cls(chosen, set(names) - chosen)
        part.validate(model)
        return part

    def validate(self, model: Denoiser) -> None:
        names = {n for n, _ in model.named_parameters()}
        if self.trainable & self.frozen:
            raise ValueError("partition is not disjoint")
        if (self.trainable | self.frozen) != names:
            raise ValueError("partition does not cover every parameter")

    def apply(self, model: Denoiser) -> None:
        for n, p in model.named_parameters():
            p.requires_grad_(n in self.trainable)

    def count(self, model: Denoiser) -> tuple[int, int]:
        params = dict(model.named_parameters())
        tr = sum(params[n].numel() for n in self.trainable)
        return tr, sum(p.numel() for p in params.values())


def frozen_digest(model: Denoiser, partition: ParamPartition) -> dict[str, str]:
    params = dict(model.named_parameters())
    return {n: tensor_digest(params[n]) for n in sorted(partition.frozen)}


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    latents: torch.Tensor  # model range [-1, 1]
    tokens: torch.Tensor
    features: torch.Tensor
    style_ids: torch.Tensor
    sample_ids: torch.Tensor
    text_drop: torch.Tensor = None
    style_drop: torch.Tensor = None

    def __post_init__(self):
        b = self.latents.shape[0]
        if self.text_drop is None:
            self.text_drop = torch.zeros(b, dtype=torch.bool)
        if self.style_drop is None:
            self.style_drop = torch.zeros(b, dtype=torch.bool)

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch(self.latents.to(dtype), self.tokens, self.features.to(dtype), self.style_ids,
                     self.sample_ids, self.text_drop, self.style_drop)


def make_batch(ds: SpriteDataset, idx) -> Batch:
    idx = np.asarray(idx, dtype=np.int64)
    return Batch(
        latents=latent_to_model(torch.from_numpy(ds.latents[idx])),
        tokens=torch.from_numpy(ds.tokens[idx]),
        features=torch.from_numpy(ds.features[idx]),
        style_ids=torch.from_numpy(ds.style_ids[idx]),
        sample_ids=torch.from_numpy(idx),
    )


def domain_mean_features(ds: SpriteDataset) -> dict[int, np.ndarray]:
    return {int(sid): ds.features[ds.style_ids == sid].mean(axis=0).astype(ds.features.dtype)
            for sid in np.unique(ds.style_ids)}


def style_features(ds: SpriteDataset, idx, source: str, rng: np.random.Generator | None = None,
                   means: dict[int, np.ndarray] | None = None) -> np.ndarray:
    """Style feature rows for records ``idx`` under ``source`` (see STYLE_SOURCES)."""
    idx = np.asarray(idx, dtype=np.int64)
    sids = ds.style_ids[idx]
    if source == "self":
        return ds.features[idx]
    if source == "domain_mean":
        means = means or domain_mean_features(ds)
        return np.stack([means[int(s)] for s in sids])
    if source == "reference":
        out = np.empty((len(idx), ds.features.shape[1]), dtype=ds.features.dtype)
        for i, s in enumerate(sids):
            pool = np.flatnonzero(ds.style_ids == s)
            out[i] = ds.features[pool[rng.integers(0, len(pool))]]
        return out
    raise ValueError(f"unknown style source {source!r}")


def condition_dropout(batch: Batch, p_text: float, p_style: float, rng: np.random.Generator) -> Batch:
    """Independently null text (all-null tokens) and style per sample."""
    b = batch.latents.shape[0]
    text_drop = torch.from_numpy(rng.random(b) < p_text)
    style_drop = torch.from_numpy(rng.random(b) < p_style)
    tokens = torch.where(text_drop[:, None], torch.zeros_like(batch.tokens), batch.tokens)
    return Batch(batch.latents, tokens, batch.features, batch.style_ids, batch.sample_ids,
                 batch.text_drop | text_drop, batch.style_drop | style_drop)


# ---------------------------------------------------------------------------
# model construction


def build_model(cfg: DenoiserConfig, seed: int) -> Denoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Denoiser(cfg)


def adapt_from_backbone(backbone: dict[str, torch.Tensor], cfg: DenoiserConfig, seed: int) -> Denoiser:
    """Fresh model of ``cfg`` carrying the backbone weights.

    Style-branch key/value projections start as copies of the text branch;
    the style projection and null style start from a seeded random init.
    """
    model = build_model(cfg, seed)
    try:
        missing, unexpected = model.load_state_dict(backbone, strict=False)
    except RuntimeError as exc:  # shape mismatch
        raise ValueError(f"backbone does not match config: {exc}") from exc
    style_only = set(model.style_names()) | {n for n in model.state_dict() if "_style" in n}
    bad = [m for m in missing if m not in style_only]
    if bad or unexpected:
        raise ValueError(f"backbone does not match config: missing={bad} unexpected={list(unexpected)}")
    model.init_style_branch_from_text()
    return model


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    def __init__(self, model: Denoiser, config: TrainConfig, sched: NoiseSchedule | None = None,
                 partition: ParamPartition | None = None):
        self.model = model
        self.config = config
        self.sched = sched or NoiseSchedule(model.cfg.timesteps)
        self.partition = partition or ParamPartition.from_model(model, config.trainable)
        self.partition.apply(model)
        params = [p for n, p in model.named_parameters() if n in self.partition.trainable]
        self.optimizer = torch.optim.AdamW(params, lr=config.lr, betas=(config.beta1, config.beta2),
                                           weight_decay=config.weight_decay) if params else None
        self.rng = np.random.default_rng(config.seed)
        self.gen = torch.Generator().manual_seed(config.seed)
        self.fusion = FusionConfig(alpha=config.alpha_train)
        self.step = 0
        self.style_ema: dict[int, torch.Tensor] = {}
        self.ema_deltas: list[float] = []
        self._means: dict[int, dict[int, np.ndarray]] = {}

    def _style_rows(self, ds: SpriteDataset, idx, rng: np.random.Generator) -> torch.Tensor:
        key = id(ds)
        if key not in self._means:
            self._means[key] = domain_mean_features(ds)
        return torch.from_numpy(style_features(ds, idx, self.config.style_source, rng, self._means[key]))

    @property
    def uses_style(self) -> bool:
        return self.model.cfg.style_mode != "none"

    def loss_on(self, batch: Batch, t: torch.Tensor, eps: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        y_t = forward_noise(batch.latents, t, eps, self.sched)
        style = None
        proj = None
        if self.uses_style:
            proj = self.model.style_proj(batch.features)
            style = torch.where(batch.style_drop[:, None], self.model.null_style.expand_as(proj), proj)
        eps_hat = self.model(y_t, t, batch.tokens, style, self.fusion)
        return training_loss(eps, eps_hat), proj

    def train_step(self, batch: Batch) -> float:
        """One optimiser update on ``batch`` (dropout already applied or not, caller's choice)."""
        dtype = next(self.model.parameters()).dtype
        batch = batch.to(dtype)
        b = batch.latents.shape[0]
        t = torch.randint(0, self.sched.T, (b,), generator=self.gen)
        eps = torch.randn(batch.latents.shape, generator=self.gen, dtype=dtype)
        self.model.train()
        try:
            loss, proj = self.loss_on(batch, t, eps)
        except NumericError as exc:
            raise TrainingError(f"{exc} at step {self.step}; samples {batch.sample_ids.tolist()}") from exc
        value = float(loss.detach())
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {self.step}; "
                                f"samples {batch.sample_ids.tolist()}")
        if self.optimizer is not None:
            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            params = [p for g in self.optimizer.param_groups for p in g["params"]]
            if self.config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, self.config.grad_clip)
            self.optimizer.step()
        if proj is not None:
            self._update_ema(proj.detach(), batch.style_ids)
        self.step += 1
        return value

    def _update_ema(self, proj: torch.Tensor, style_ids: torch.Tensor) -> None:
        decay = self.config.ema_decay
        for sid in sorted(set(style_ids.tolist())):
            mean = proj[style_ids == sid].mean(dim=0).to(torch.float32)
            prev = self.style_ema.get(sid)
            if prev is None:
                self.style_ema[sid] = mean.clone()
            else:
                new = decay * prev + (1.0 - decay) * mean
                if sid == self.config.target_style:
                    self.ema_deltas.append(float((new - prev).norm()))
                self.style_ema[sid] = new

    def sample_batch(self, ds: SpriteDataset) -> Batch:
        idx = self.rng.integers(0, len(ds), size=self.config.batch_size)
        batch = make_batch(ds, idx)
        if self.uses_style and self.config.style_source != "self":
            batch.features = self._style_rows(ds, idx, self.rng)
        return condition_dropout(batch, self.config.p_drop_text, self.config.p_drop_style if self.uses_style else 0.0,
                                 self.rng)

    @torch.no_grad()
    def heldout_loss(self, ds: SpriteDataset, max_samples: int = 64, seed: int = 12345) -> float:
        """Conditional loss on a fixed draw of (t, eps) so successive calls are comparable."""
        n = min(len(ds), max_samples)
        dtype = next(self.model.parameters()).dtype
        batch = make_batch(ds, np.arange(n))
        if self.uses_style and self.config.style_source != "self":
            batch.features = self._style_rows(ds, np.arange(n), np.random.default_rng(seed))
        batch = batch.to(dtype)
        gen = torch.Generator().manual_seed(seed)
        t = torch.randint(0, self.sched.T, (n,), generator=gen)
        eps = torch.randn(batch.latents.shape, generator=gen, dtype=dtype)
        self.model.eval()
        loss, _ = self.loss_on(batch, t, eps)
        return float(loss)

    def inference_style(self, ds: SpriteDataset | None = None) -> torch.Tensor | None:
        if not self.uses_style:
            return None
        target = self.config.target_style
        if self.config.inference_style == "dataset_mean" and ds is not None:
            mask = ds.style_ids == target
            if mask.any():
                with torch.no_grad():
                    feats = torch.from_numpy(ds.features[mask]).to(next(self.model.parameters()).dtype)
                    return self.model.style_proj(feats).mean(dim=0).to(torch.float32)
        return self.style_ema.get(target)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: DenoiserConfig
    train_config: TrainConfig
    state: dict[str, torch.Tensor]
    trainable: list[str]
    optimizer_state: dict | None = None
    inference_style: torch.Tensor | None = None
    style_ema: dict[int, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    meta: dict = field(default_factory=dict)

    def build_model(self) -> Denoiser:
        model = Denoiser(self.model_config)
        model.load_state_dict(self.state)
        model.eval()
        return model

    def save(self, path: Path) -> None:
        tensors = {f"model/{k}": v for k, v in self.state.items()}
        if self.inference_style is not None:
            tensors["inference_style"] = self.inference_style
        for sid, v in sorted(self.style_ema.items()):
            tensors[f"style_ema/{sid}"] = v
        groups = None
        if self.optimizer_state is not None:
            for pid, st in sorted(self.optimizer_state["state"].items()):
                for key, val in sorted(st.items()):
                    tensors[f"optim/{pid}/{key}"] = torch.as_tensor(val)
            groups = self.optimizer_state["param_groups"]
        meta = {
            "model_config": self.model_config.to_dict(),
            "train_config": asdict(self.train_config),
            "trainable": sorted(self.trainable),
            "step": self.step,
            "optimizer_param_groups": groups,
            "meta": self.meta,
        }
        save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path: Path) -> "Checkpoint":
        tensors, meta = load_tensors(path)
        state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
        ema = {int(k.split("/")[1]): v for k, v in tensors.items() if k.startswith("style_ema/")}
        opt = None
        if meta.get("optimizer_param_groups") is not None:
            st: dict[int, dict] = {}
            for k, v in tensors.items():
                if k.startswith("optim/"):
                    _, pid, key = k.split("/")
                    st.setdefault(int(pid), {})[key] = v
            opt = {"state": st, "param_groups": meta["optimizer_param_groups"]}
        return cls(
            model_config=DenoiserConfig(**meta["model_config"]),
            train_config=TrainConfig.from_dict(meta["train_config"]),
            state=state,
            trainable=list(meta["trainable"]),
            optimizer_state=opt,
            inference_style=tensors.get("inference_style"),
            style_ema=ema,
            step=int(meta["step"]),
            meta=meta.get("meta", {}),
        )


def checkpoint_from(trainer: Trainer, ds: SpriteDataset | None = None, meta: dict | None = None) -> Checkpoint:
    state = {k: v.detach().clone() for k, v in trainer.model.state_dict().items()}
    opt = None
    if trainer.optimizer is not None:
        sd = trainer.optimizer.state_dict()
        opt = {"state": {int(k): {kk: (vv.clone() if torch.is_tensor(vv) else torch.tensor(vv))
                                  for kk, vv in v.items()} for k, v in sd["state"].items()},
               "param_groups": sd["param_groups"]}
    style = trainer.inference_style(ds)
    return Checkpoint(
        model_config=trainer.model.cfg,
        train_config=trainer.config,
        state=state,
        trainable=sorted(trainer.partition.trainable),
        optimizer_state=opt,
        inference_style=None if style is None else style.clone(),
        style_ema={k: v.clone() for k, v in trainer.style_ema.items()},
        step=trainer.step,
        meta=dict(meta or {}),
    )


# ---------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    checkpoint: Checkpoint
    losses: list[float]
    heldout_initial: float
    heldout_final: float


def fit(dataset: SpriteDataset, config: TrainConfig, model: Denoiser | None = None,
        model_config: DenoiserConfig | None = None, out_dir: Path | None = None,
        meta: dict | None = None) -> FitResult:
    """Train for ``config.steps`` updates; optionally write ``loss.csv`` and ``checkpoint.pkf``."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if model is None:
        model = build_model(model_config or DenoiserConfig(), config.seed)
    if len(dataset) > 1 and config.holdout > 0:
        train_ds, held_ds = dataset.split(config.holdout)
    else:
        train_ds, held_ds = dataset, dataset
    trainer = Trainer(model, config)
    n_tr, n_all = trainer.partition.count(model)
    log.info("trainable parameters: %d of %d (%.2f%%)", n_tr, n_all, 100.0 * n_tr / max(n_all, 1))

    initial = trainer.heldout_loss(held_ds)
    losses = []
    for _ in range(config.steps):
        losses.append(trainer.train_step(trainer.sample_batch(train_ds)))
    final = trainer.heldout_loss(held_ds)
    log.info("held-out loss %.4f -> %.4f over %d steps", initial, final, config.steps)

    info = dict(meta or {}, heldout_initial=initial, heldout_final=final)
    ckpt = checkpoint_from(trainer, train_ds, info)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "lr"])
            for i, v in enumerate(losses):
                w.writerow([i, repr(v), config.lr])
        ckpt.save(out_dir / "checkpoint.pkf")
    return FitResult(ckpt, losses, initial, final)

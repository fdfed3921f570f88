"""Denoiser with dual-branch (text + style) decoder cross-attention.

The network is a small 3-level conv/attention U-Net over a 4x16x16 latent.
Encoder attention layers see text only. Every decoder block carries a
:class:`FusionCrossAttention` layer which attends to the text tokens and to a
single style token in two parallel branches and mixes the results with a
convex weight ``alpha``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

LN_EPS = 1e-5

STYLE_MODES = ("fusion", "none", "concat")


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass
class DenoiserConfig:
    d: int = 64
    heads: int = 4
    decoder_blocks: int = 3
    latent_size: int = 16
    latent_channels: int = 4
    # conv width per resolution level, finest first
    channels: tuple[int, ...] = (16, 32, 64)
    max_tokens: int = 16
    vocab_size: int = 32
    style_dim: int = 32
    timesteps: int = 200
    # "fusion": dual branch + weighted fusion; "none": text branch only;
    # "concat": style token appended to the text context of one attention
    style_mode: str = "fusion"
    share_qo: bool = True
    # hidden width multiplier of the per-token feed-forward after each
    # cross-attention (0 disables it)
    ffn_mult: int = 2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        for name in ("d", "heads", "decoder_blocks", "latent_size", "latent_channels",
                     "max_tokens", "vocab_size", "style_dim", "timesteps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if len(self.channels) != self.decoder_blocks:
            raise ValueError("channels must list one width per decoder block")
        if self.latent_size % (2 ** (self.decoder_blocks - 1)):
            raise ValueError("latent_size must be divisible by 2**(decoder_blocks-1)")
        if self.style_mode not in STYLE_MODES:
            raise ValueError(f"style_mode must be one of {STYLE_MODES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


@dataclass
class FusionConfig:
    alpha: float = 0.5
    apply_to_all_decoder_blocks: bool = True
    shallow_only: bool = False

    def __post_init__(self):
        check_alpha(self.alpha)
        if self.apply_to_all_decoder_blocks == self.shallow_only:
            raise ValueError("exactly one of apply_to_all_decoder_blocks / shallow_only must be set")

    def block_active(self, index: int) -> bool:
        # shallow = first decoder block only
        return self.apply_to_all_decoder_blocks or index == 0


def check_alpha(alpha: float) -> None:
    if not (0.0 <= float(alpha) <= 1.0):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


# ---------------------------------------------------------------------------
# functional pieces


def style_project(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
                  ln_gain: torch.Tensor, ln_bias: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    """``LayerNorm(W x + b)`` with a learnable affine; works on (..., d_x)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"feature length {x.shape[-1]} != projection input {weight.shape[1]}")
    if not (weight.shape[0] == bias.shape[0] == ln_gain.shape[0] == ln_bias.shape[0]):
        raise ShapeError("projection parameter shapes disagree")
    if not torch.isfinite(x).all():
        raise ValueError("style feature contains non-finite values")
    z = x @ weight.T + bias
    mu = z.mean(dim=-1, keepdim=True)
    var = z.var(dim=-1, unbiased=False, keepdim=True)
    return ln_gain * ((z - mu) / torch.sqrt(var + eps)) + ln_bias


def attention_weights(q: torch.Tensor, k: torch.Tensor, heads: int) -> torch.Tensor:
    """Softmax(QK^T / sqrt(d_head)) per head: (B, heads, L, K)."""
    b, l, d = q.shape
    kk = k.shape[1]
    dh = d // heads
    qh = q.reshape(b, l, heads, dh).transpose(1, 2)
    kh = k.reshape(b, kk, heads, dh).transpose(1, 2)
    logits = qh @ kh.transpose(-1, -2) / math.sqrt(dh)
    if torch.isnan(logits).any():
        raise NumericError("NaN in attention logits")
    return logits.softmax(dim=-1)


def cross_attention(h: torch.Tensor, context: torch.Tensor, wq: torch.Tensor, wk: torch.Tensor,
                    wv: torch.Tensor, wo: torch.Tensor, heads: int) -> torch.Tensor:
    """Multi-head scaled dot-product cross-attention.

    ``h`` is (B, L, d) and ``context`` is (B, K, d); weights are (d, d) matrices
    applied as ``x @ W.T``. Returns (B, L, d) after the output projection.
    """
    if context.shape[1] == 0:
        raise ValueError("cross-attention context is empty")
    if h.shape[-1] != context.shape[-1] or h.shape[-1] % heads:
        raise ShapeError("hidden/context widths disagree or are not divisible by heads")
    q = h @ wq.T
    k = context @ wk.T
    v = context @ wv.T
    attn = attention_weights(q, k, heads)
    b, l, d = q.shape
    dh = d // heads
    vh = v.reshape(b, -1, heads, dh).transpose(1, 2)
    out = (attn @ vh).transpose(1, 2).reshape(b, l, d)
    return out @ wo.T


def fuse_attention(a_text: torch.Tensor, a_style: torch.Tensor, alpha: float) -> torch.Tensor:
    # written as (1-a)x + a*y so both endpoints reproduce one branch exactly
    check_alpha(alpha)
    if a_text.shape != a_style.shape:
        raise ShapeError(f"branch shapes differ: {tuple(a_text.shape)} vs {tuple(a_style.shape)}")
    return (1.0 - alpha) * a_text + alpha * a_style


def timestep_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype | None = None) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    return emb.to(dtype or torch.get_default_dtype())


# ---------------------------------------------------------------------------
# modules


class StyleProjection(nn.Module):
    def __init__(self, style_dim: int, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d, style_dim))
        self.bias = nn.Parameter(torch.zeros(d))
        self.ln_gain = nn.Parameter(torch.ones(d))
        self.ln_bias = nn.Parameter(torch.zeros(d))
        nn.init.normal_(self.weight, std=1.0 / math.sqrt(style_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return style_project(x, self.weight, self.bias, self.ln_gain, self.ln_bias)


def _linear_weight(d: int) -> nn.Parameter:
    w = nn.Parameter(torch.empty(d, d))
    nn.init.normal_(w, std=1.0 / math.sqrt(d))
    return w


class TextCrossAttention(nn.Module):
    """Pre-norm residual cross-attention over text tokens (encoder side)."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(d, eps=LN_EPS)
        self.wq, self.wk, self.wv, self.wo = (_linear_weight(d) for _ in range(4))

    def forward(self, h: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        x = self.norm(h)
        return h + cross_attention(x, text, self.wq, self.wk, self.wv, self.wo, self.heads)


class FusionCrossAttention(nn.Module):
    """Decoder cross-attention with a text branch and a style branch.

    The query and output projections are shared across branches unless
    ``share_qo`` is off; key/value projections are per branch.
    """

    def __init__(self, d: int, heads: int, style_mode: str = "fusion", share_qo: bool = True):
        super().__init__()
        self.heads = heads
        self.style_mode = style_mode
        self.share_qo = share_qo
        self.norm = nn.LayerNorm(d, eps=LN_EPS)
        self.wq = _linear_weight(d)
        self.wk_text = _linear_weight(d)
        self.wv_text = _linear_weight(d)
        self.wo = _linear_weight(d)
        if style_mode == "fusion":
            self.wk_style = _linear_weight(d)
            self.wv_style = _linear_weight(d)
            if not share_qo:
                self.wq_style = _linear_weight(d)
                self.wo_style = _linear_weight(d)

    def init_style_from_text(self) -> None:
        """Copy the text-branch projections into the style branch."""
        if self.style_mode != "fusion":
            return
        with torch.no_grad():
            self.wk_style.copy_(self.wk_text)
            self.wv_style.copy_(self.wv_text)
            if not self.share_qo:
                self.wq_style.copy_(self.wq)
                self.wo_style.copy_(self.wo)

    def text_branch(self, x: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
        return cross_attention(x, text, self.wq, self.wk_text, self.wv_text, self.wo, self.heads)

    def style_branch(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        wq = self.wq if self.share_qo else self.wq_style
        wo = self.wo if self.share_qo else self.wo_style
        return cross_attention(x, style[:, None, :], wq, self.wk_style, self.wv_style, wo, self.heads)

    def forward(self, h: torch.Tensor, text: torch.Tensor, style: torch.Tensor | None,
                alpha: float, active: bool = True) -> torch.Tensor:
        x = self.norm(h)
        if self.style_mode == "none" or not active or style is None:
            out = self.text_branch(x, text)
        elif self.style_mode == "concat":
            ctx = torch.cat([text, style[:, None, :]], dim=1)
            out = self.text_branch(x, ctx)
        else:
            out = fuse_attention(self.text_branch(x, text), self.style_branch(x, style), alpha)
        # fusion happens before the residual add
        return h + out


class FeedForward(nn.Module):
    """Pre-norm residual per-token MLP (backbone; lets a constant style
    shift interact with each position's content)."""

    def __init__(self, d: int, mult: int):
        super().__init__()
        self.norm = nn.LayerNorm(d, eps=LN_EPS)
        self.fc1 = nn.Linear(d, d * mult)
        self.fc2 = nn.Linear(d * mult, d)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return h + self.fc2(F.gelu(self.fc1(self.norm(h))))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class TokenMap(nn.Module):
    """1x1 projections between a conv feature map and d-wide tokens."""

    def __init__(self, c: int, d: int):
        super().__init__()
        self.proj_in = nn.Linear(c, d) if c != d else nn.Identity()
        self.proj_out = nn.Linear(d, c) if c != d else nn.Identity()

    def to_tokens(self, x: torch.Tensor) -> torch.Tensor:
        b, c, hh, ww = x.shape
        return self.proj_in(x.flatten(2).transpose(1, 2))

    def to_map(self, tok: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        b, c, hh, ww = like.shape
        return self.proj_out(tok).transpose(1, 2).reshape(b, c, hh, ww)


class DecoderBlock(nn.Module):
    def __init__(self, cin: int, cskip: int, cout: int, cfg: DenoiserConfig, temb: int,
                 up_channels: int | None):
        super().__init__()
        self.res = ResBlock(cin + cskip, cout, temb)
        self.tokens = TokenMap(cout, cfg.d)
        self.attn = FusionCrossAttention(cfg.d, cfg.heads, cfg.style_mode, cfg.share_qo)
        self.ffn = FeedForward(cfg.d, cfg.ffn_mult) if cfg.ffn_mult else nn.Identity()
        self.up = nn.Conv2d(cout, up_channels, 3, padding=1) if up_channels else None

    def forward(self, x, skip, temb, text, style, alpha, active):
        x = self.res(torch.cat([x, skip], dim=1), temb)
        if isinstance(self.tokens.proj_in, nn.Identity):
            tok = x.flatten(2).transpose(1, 2)
            tok = self.ffn(self.attn(tok, text, style, alpha, active))
            x = tok.transpose(1, 2).reshape(x.shape)
        else:
            tok = self.tokens.to_tokens(x)
            tok_new = self.ffn(self.attn(tok, text, style, alpha, active))
            # residual lives in conv space; the attention residual is mapped back
            x = x + self.tokens.to_map(tok_new - tok, x)
        if self.up is not None:
            x = self.up(F.interpolate(x, scale_factor=2, mode="nearest"))
        return x


class Denoiser(nn.Module):
    """Noise predictor eps_hat(y_t, t, text, style)."""

    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        cfg = cfg or DenoiserConfig()
        self.cfg = cfg
        d, ch = cfg.d, cfg.channels
        temb = d
        self.token_embed = nn.Embedding(cfg.vocab_size, d)
        self.pos_embed = nn.Parameter(torch.randn(cfg.max_tokens, d) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(d, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(cfg.latent_channels, ch[0], 3, padding=1)

        n = cfg.decoder_blocks
        self.enc = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        self.enc_tokens = nn.ModuleList()
        self.down = nn.ModuleList()
        for i in range(n):
            self.enc.append(ResBlock(ch[i], ch[i], temb))
            # no encoder attention at the finest level
            if i > 0:
                self.enc_tokens.append(TokenMap(ch[i], d))
                self.enc_attn.append(TextCrossAttention(d, cfg.heads))
            if i < n - 1:
                self.down.append(nn.Conv2d(ch[i], ch[i + 1], 3, stride=2, padding=1))
        self.mid = ResBlock(ch[-1], ch[-1], temb)

        self.decoder = nn.ModuleList()
        for j in range(n):
            level = n - 1 - j
            cin = ch[-1] if j == 0 else ch[level]
            cout = ch[level]
            up = ch[level - 1] if level > 0 else None
            self.decoder.append(DecoderBlock(cin, ch[level], cout, cfg, temb, up))
        self.norm_out = nn.GroupNorm(min(8, ch[0]), ch[0])
        self.conv_out = nn.Conv2d(ch[0], cfg.latent_channels, 3, padding=1)

        if cfg.style_mode != "none":
            self.style_proj = StyleProjection(cfg.style_dim, d)
            self.null_style = nn.Parameter(torch.randn(d) * 0.02)

    # -- conditioning -----------------------------------------------------

    def embed_text(self, token_ids: torch.Tensor) -> torch.Tensor:
        if token_ids.ndim != 2 or token_ids.shape[1] > self.cfg.max_tokens or token_ids.shape[1] < 1:
            raise ShapeError(f"token ids must be (B, 1..{self.cfg.max_tokens}), got {tuple(token_ids.shape)}")
        if (token_ids < 0).any() or (token_ids >= self.cfg.vocab_size).any():
            raise ValueError("token id outside the vocabulary")
        m = token_ids.shape[1]
        return self.token_embed(token_ids) + self.pos_embed[:m]

    def embed_style(self, features: torch.Tensor, drop: torch.Tensor | None = None) -> torch.Tensor:
        """Project raw style features; rows flagged in ``drop`` get the null style."""
        s = self.style_proj(features)
        if drop is not None:
            s = torch.where(drop[:, None], self.null_style.expand_as(s), s)
        return s

    def null_style_batch(self, batch: int) -> torch.Tensor:
        return self.null_style.expand(batch, -1)

    # -- forward ----------------------------------------------------------

    def forward(self, y_t: torch.Tensor, t: torch.Tensor, token_ids: torch.Tensor,
                style: torch.Tensor | None, fusion: FusionConfig | None = None) -> torch.Tensor:
        cfg = self.cfg
        fusion = fusion or FusionConfig()
        expect = (cfg.latent_channels, cfg.latent_size, cfg.latent_size)
        if y_t.ndim != 4 or tuple(y_t.shape[1:]) != expect:
            raise ShapeError(f"latent must be (B, {expect}), got {tuple(y_t.shape)}")
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and y_t.shape[0] != 1:
            t = t.expand(y_t.shape[0])
        if t.shape[0] != y_t.shape[0]:
            raise ShapeError("timestep batch does not match latent batch")
        if (t < 0).any() or (t >= cfg.timesteps).any():
            raise ValueError(f"timestep outside [0, {cfg.timesteps})")
        if token_ids.shape[0] != y_t.shape[0]:
            raise ShapeError("text batch does not match latent batch")
        if style is not None and cfg.style_mode != "none":
            if style.shape != (y_t.shape[0], cfg.d):
                raise ShapeError(f"style must be (B, {cfg.d}), got {tuple(style.shape)}")
        if cfg.style_mode == "none":
            style = None

        text = self.embed_text(token_ids)
        temb = self.time_mlp(timestep_embedding(t, cfg.d, y_t.dtype))

        x = self.conv_in(y_t)
        skips = []
        n = cfg.decoder_blocks
        for i in range(n):
            x = self.enc[i](x, temb)
            if i > 0:
                tm = self.enc_tokens[i - 1]
                tok = tm.to_tokens(x)
                x = x + tm.to_map(self.enc_attn[i - 1](tok, text) - tok, x)
            skips.append(x)
            if i < n - 1:
                x = self.down[i](x)
        x = self.mid(x, temb)
        for j, blk in enumerate(self.decoder):
            x = blk(x, skips[n - 1 - j], temb, text, style, fusion.alpha, fusion.block_active(j))
        return self.conv_out(F.silu(self.norm_out(x)))

    # -- parameter groups ---------------------------------------------------

    def decoder_attention_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith("decoder.") and ".attn." in n]

    def style_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith("style_proj.") or n == "null_style"]

    def init_style_branch_from_text(self) -> None:
        for blk in self.decoder:
            blk.attn.init_style_from_text()


def analytic_trainable_count(cfg: DenoiserConfig, include_attention: bool = True) -> int:
    """Closed-form size of the trainable set for a config."""
    d = cfg.d
    per_block = 0
    if include_attention:
        branch_mats = {"fusion": 2 * 2, "none": 2, "concat": 2}[cfg.style_mode]
        shared = 2 if (cfg.share_qo or cfg.style_mode != "fusion") else 4
        per_block = (shared + branch_mats) * d * d + 2 * d  # + layer norm
    style = 0
    if cfg.style_mode != "none":
        style = d * cfg.style_dim + 3 * d + d  # W, b, gain, bias, null style
    return cfg.decoder_blocks * per_block + style

"""A desk-scale text-conditioned pixel diffusion model with focused cross-attention.

The denoiser is a small U-Net whose only text pathway is cross-attention, so a
focus mask fully controls where each token can act. Sampling is deterministic
DDIM (optionally with seeded per-step noise) so that runs with and without a
mask can be compared pixel for pixel.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import TextEncoder
from .fca import (AttentionRecord, FocusMask, aggregate_attention, compute_focus_mask,
                  focused_attention, project_mask)
from .tokenizer import DEFAULT_TOKENIZER, ToyTokenizer

log = logging.getLogger(__name__)


@dataclass
class DenoiserConfig:
    image_size: int = 32
    channels: Tuple[int, ...] = (32, 64, 64)
    attn_resolutions: Tuple[int, ...] = (16, 8)
    mid_self_attn: bool = False
    heads: int = 4
    head_dim: int = 16
    text_dim: int = 64
    text_depth: int = 1
    text_heads: int = 4
    max_tokens: int = 32
    vocab_size: int = len(DEFAULT_TOKENIZER)
    train_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    beta_schedule: str = "linear"
    steps: int = 50
    guidance: float = 7.5
    eta: float = 0.0
    sampler: str = "ddim"

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.attn_resolutions = tuple(self.attn_resolutions)
        if self.steps < 1 or self.train_timesteps < self.steps:
            raise ValueError("need 1 <= steps <= train_timesteps")
        if self.guidance < 0:
            raise ValueError("guidance scale must be non-negative")
        levels = self.resolutions
        for r in self.attn_resolutions:
            if r not in levels:
                raise ValueError(f"attention resolution {r} is not a level of {levels}")
        if self.beta_schedule not in ("linear", "scaled_linear"):
            raise ValueError(f"unknown beta schedule {self.beta_schedule!r}")
        if self.sampler != "ddim":
            raise ValueError(f"unknown sampler {self.sampler!r}")

    @property
    def resolutions(self) -> Tuple[int, ...]:
        s = self.image_size
        out = []
        for i in range(len(self.channels)):
            if s % (2 ** i):
                raise ValueError("image size must halve cleanly at every level")
            out.append(s // 2 ** i)
        return tuple(out)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["attn_resolutions"] = list(self.attn_resolutions)
        return d


# -- network -------------------------------------------------------------

def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    """Pixel-to-pixel attention; never masked or recorded."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, x):
        B, C, H, W = x.shape
        h = self.norm(x).flatten(2).transpose(1, 2)
        out, _ = self.attn(h, h, h, need_weights=False)
        return x + out.transpose(1, 2).view(B, C, H, W)


class CrossAttention(nn.Module):
    """Image-to-text attention; the text enters the U-Net only here."""

    def __init__(self, name: str, channels: int, text_dim: int, heads: int, head_dim: int):
        super().__init__()
        self.name = name
        self.heads = heads
        self.head_dim = head_dim
        inner = heads * head_dim
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = nn.Linear(channels, inner, bias=False)
        self.to_k = nn.Linear(text_dim, inner, bias=False)
        self.to_v = nn.Linear(text_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, channels)

    def forward(self, x, ctx, mask=None, store=None):
        B, C, H, W = x.shape
        h = self.norm(x).flatten(2).transpose(1, 2)  # (B, HW, C)
        q = self.to_q(h).view(B, H * W, self.heads, self.head_dim).transpose(1, 2)
        k = self.to_k(ctx).view(B, -1, self.heads, self.head_dim).transpose(1, 2)
        v = self.to_v(ctx).view(B, -1, self.heads, self.head_dim).transpose(1, 2)
        m = None if mask is None else mask[:, None]
        out, weights = focused_attention(q, k, v, m, return_weights=True)
        if store is not None:
            store.append((self.name, weights.mean(dim=1), (H, W)))
        out = out.transpose(1, 2).reshape(B, H * W, -1)
        return x + self.to_out(out).transpose(1, 2).view(B, C, H, W)


class TinyUNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        ch = cfg.channels
        res = cfg.resolutions
        tdim = ch[0] * 4
        self.tdim = ch[0]
        self.time_mlp = nn.Sequential(nn.Linear(ch[0], tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(3, ch[0], 3, padding=1)

        def attn(tag, r, c):
            if r not in cfg.attn_resolutions:
                return None
            return CrossAttention(f"{tag}{r}", c, cfg.text_dim, cfg.heads, cfg.head_dim)

        self.down = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            self.down.append(ResBlock(prev, c, tdim))
            self.down_attn.append(attn("down", res[i], c) or nn.Identity())
            prev = c
        self.mid1 = ResBlock(prev, prev, tdim)
        self.mid_self = SelfAttention(prev, cfg.heads) if cfg.mid_self_attn else nn.Identity()
        self.mid_attn = attn("mid", res[-1], prev) or nn.Identity()
        self.mid2 = ResBlock(prev, prev, tdim)
        self.up = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        for i in reversed(range(len(ch))):
            self.up.append(ResBlock(prev + ch[i], ch[i], tdim))
            # the bottom level already has the mid attention
            a = attn("up", res[i], ch[i]) if i < len(ch) - 1 else None
            self.up_attn.append(a or nn.Identity())
            prev = ch[i]
        self.norm_out = nn.GroupNorm(8, ch[0])
        self.conv_out = nn.Conv2d(ch[0], 3, 3, padding=1)

    def attention_layers(self) -> List[CrossAttention]:
        return [m for m in self.modules() if isinstance(m, CrossAttention)]

    def forward(self, x, t, ctx, masks: Optional[Dict[int, torch.Tensor]] = None, store=None):
        temb = self.time_mlp(timestep_embedding(t, self.tdim))
        h = self.conv_in(x)

        def run_attn(layer, h):
            if isinstance(layer, CrossAttention):
                m = None if masks is None else masks[h.shape[-1]]
                return layer(h, ctx, m, store)
            return h

        skips = []
        n = len(self.down)
        for i, (block, a) in enumerate(zip(self.down, self.down_attn)):
            h = run_attn(a, block(h, temb))
            skips.append(h)
            if i < n - 1:
                h = F.avg_pool2d(h, 2)
        h = self.mid_self(self.mid1(h, temb))
        h = run_attn(self.mid_attn, h)
        h = self.mid2(h, temb)
        for j, (block, a) in enumerate(zip(self.up, self.up_attn)):
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
            h = run_attn(a, h)
            if j < n - 1:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
        return self.conv_out(F.silu(self.norm_out(h)))


class ToyDiffusion(nn.Module):
    """Text encoder + U-Net + noise schedule."""

    def __init__(self, cfg: DenoiserConfig = None, tokenizer: ToyTokenizer = DEFAULT_TOKENIZER):
        super().__init__()
        self.cfg = cfg or DenoiserConfig()
        self.tokenizer = tokenizer
        self.text = TextEncoder(self.cfg.vocab_size, self.cfg.text_dim, self.cfg.text_depth,
                                self.cfg.text_heads, self.cfg.max_tokens)
        self.unet = TinyUNet(self.cfg)
        c = self.cfg
        if c.beta_schedule == "scaled_linear":
            # linear in sqrt(beta), as in latent diffusion
            betas = torch.linspace(c.beta_start ** 0.5, c.beta_end ** 0.5, c.train_timesteps,
                                   dtype=torch.float64) ** 2
        else:
            betas = torch.linspace(c.beta_start, c.beta_end, c.train_timesteps, dtype=torch.float64)
        self.register_buffer("alphas_cumprod", torch.cumprod(1 - betas, 0).float(),
                             persistent=False)

    # adapter contract for DisCLIP
    @property
    def dim(self) -> int:
        return self.cfg.text_dim

    def encode_ids(self, token_ids):
        return self.text.encode_ids(token_ids)

    @torch.no_grad()
    def encode_text(self, text: str) -> torch.Tensor:
        tp = self.tokenizer.tokenize(text)
        return self.text.encode_ids(tp.tokens)[0]

    @property
    def largest_attn_hw(self) -> Tuple[int, int]:
        r = max(self.cfg.attn_resolutions)
        return (r, r)

    def save(self, directory, extra: dict = None) -> Path:
        return save_checkpoint(directory, "diffusion", self.cfg.to_dict(), self.state_dict(), extra)

    @classmethod
    def load(cls, directory) -> "ToyDiffusion":
        manifest, state = load_checkpoint(directory, "diffusion")
        model = cls(DenoiserConfig(**manifest["config"]))
        model.load_state_dict(state)
        model.eval()
        model.extra = manifest.get("extra", {})
        return model


# -- sampling ------------------------------------------------------------

@dataclass
class PromptBundle:
    """Encoded prompt (``y``: n x d) with its dependency matrix and row labels."""

    y: torch.Tensor
    D: Optional[np.ndarray] = None
    token_strings: Optional[List[str]] = None
    prompt: str = ""


@dataclass
class GenerationResult:
    image: np.ndarray  # (H, W, 3) uint8
    seed: int
    mode: str
    config: dict
    record: Optional[AttentionRecord] = None
    focus_mask: Optional[FocusMask] = None
    prompt: str = ""
    focused_record: Optional[AttentionRecord] = None


def denoise_step(model: ToyDiffusion, x_t: torch.Tensor, y: torch.Tensor, t: Union[int, torch.Tensor],
                 mask: Optional[FocusMask] = None):
    """One conditional noise estimate; returns ``(eps, [(layer, maps, hw), ...])``.

    With a mask, every cross-attention layer uses the mask max-pooled to its
    own resolution.
    """
    if y.dim() == 2:
        y = y[None].expand(x_t.shape[0], -1, -1)
    if mask is not None and mask.mask.shape[-1] != y.shape[1]:
        raise ValueError(f"mask covers {mask.mask.shape[-1]} tokens, encoding has {y.shape[1]}")
    if not torch.is_tensor(t):
        t = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
    masks = None
    if mask is not None:
        masks = {}
        for r in model.cfg.attn_resolutions:
            m = project_mask(mask, (r, r)).mask
            masks[r] = m if m.dim() == 3 else m[None].expand(x_t.shape[0], -1, -1)
    store = []
    eps = model.unet(x_t, t, y, masks, store)
    return eps, store


def _timesteps(cfg: DenoiserConfig, steps: int) -> List[int]:
    return [int(round(v)) for v in np.linspace(cfg.train_timesteps - 1, 0, steps)]


def _initial_noise(seed: int, shape, steps: int, eta: float):
    g = torch.Generator().manual_seed(int(seed))
    x_T = torch.randn(shape, generator=g)
    per_step = torch.randn((steps,) + tuple(shape), generator=g) if eta > 0 else None
    return x_T, per_step


def _sample_loop(model, x_T, y, y_null, ts, guidance, eta, step_noise, mask=None,
                 record: Optional[AttentionRecord] = None, stop_after: Optional[int] = None):
    acp = model.alphas_cumprod
    x = x_T
    B = x.shape[0]
    for i, t in enumerate(ts):
        if stop_after is not None and i >= stop_after:
            break
        tt = torch.full((B,), t, dtype=torch.long)
        eps_c, store = denoise_step(model, x, y, tt, mask)
        if record is not None:
            for name, maps, hw in store:
                record.add(name, t, maps, hw)
        if guidance == 1.0:
            eps = eps_c
        else:
            eps_u, _ = denoise_step(model, x, y_null, tt)
            eps = eps_u + guidance * (eps_c - eps_u)
        a_t = acp[t]
        a_prev = acp[ts[i + 1]] if i + 1 < len(ts) else torch.tensor(1.0)
        x0 = ((x - (1 - a_t).sqrt() * eps) / a_t.sqrt()).clamp(-1, 1)
        eps = (x - a_t.sqrt() * x0) / (1 - a_t).sqrt()
        sigma = eta * ((1 - a_prev) / (1 - a_t) * (1 - a_t / a_prev)).sqrt()
        x = a_prev.sqrt() * x0 + (1 - a_prev - sigma ** 2).clamp_min(0).sqrt() * eps
        if step_noise is not None and i + 1 < len(ts):
            x = x + sigma * step_noise[:, i]
    return x


def to_uint8(x: torch.Tensor) -> np.ndarray:
    return ((x.clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8).permute(0, 2, 3, 1).numpy()


def _slice_record(rec: Optional[AttentionRecord], j: int) -> Optional[AttentionRecord]:
    if rec is None:
        return None
    out = AttentionRecord()
    for e in rec.entries:
        out.add(e.layer, e.timestep, e.map[j], e.hw)
    return out


@torch.no_grad()
def generate(
    model: ToyDiffusion,
    prompts: Sequence[PromptBundle],
    seeds: Sequence[int],
    mode: str = "baseline",
    threshold: float = 0.5,
    early_stop_frac: float = 0.1,
    steps: Optional[int] = None,
    guidance: Optional[float] = None,
    record: bool = False,
    batch_size: int = 64,
) -> List[GenerationResult]:
    """Generate one image per ``(prompt, seed)`` pair.

    ``mode="fca"`` runs the two-pass procedure: a first pass with plain
    attention for the first ``ceil(early_stop_frac * steps)`` steps whose
    averaged maps define the focus mask, then a full second pass from the same
    starting noise with focused attention. In fca mode ``record`` holds the
    recording pass; ``record=True`` also keeps the focused pass's maps in
    ``focused_record``.
    """
    if mode not in ("baseline", "fca"):
        raise ValueError(f"unknown mode {mode!r}")
    if not 0 < early_stop_frac <= 1:
        raise ValueError("early_stop_frac must lie in (0, 1]")
    if len(prompts) != len(seeds):
        raise ValueError("need one seed per prompt")
    cfg = model.cfg
    steps = steps or cfg.steps
    guidance = cfg.guidance if guidance is None else guidance
    ts = _timesteps(cfg, steps)
    snapshot = dict(cfg.to_dict(), steps=steps, guidance=guidance, mode=mode,
                    threshold=threshold, early_stop_frac=early_stop_frac)
    y_null = model.encode_text("")
    S = cfg.image_size

    results: List[Optional[GenerationResult]] = [None] * len(prompts)
    by_n: Dict[int, List[int]] = {}
    for i, p in enumerate(prompts):
        if mode == "fca" and (p.D is None or p.D.shape != (p.y.shape[0],) * 2):
            raise ValueError(f"prompt {i}: fca mode needs a dependency matrix matching y")
        by_n.setdefault(p.y.shape[0], []).append(i)

    for idx_all in by_n.values():
        for b0 in range(0, len(idx_all), batch_size):
            idx = idx_all[b0:b0 + batch_size]
            y = torch.stack([prompts[i].y for i in idx])
            yn = y_null[None].expand(len(idx), -1, -1)
            noise = [_initial_noise(seeds[i], (3, S, S), steps, cfg.eta) for i in idx]
            x_T = torch.stack([a for a, _ in noise])
            step_noise = torch.stack([b for _, b in noise]) if cfg.eta > 0 else None
            rec = AttentionRecord() if (record or mode == "fca") else None
            fmask = focused = None
            if mode == "baseline":
                x0 = _sample_loop(model, x_T, y, yn, ts, guidance, cfg.eta, step_noise, record=rec)
            else:
                k = math.ceil(early_stop_frac * steps)
                _sample_loop(model, x_T, y, yn, ts, guidance, cfg.eta, step_noise,
                             record=rec, stop_after=k)
                A = aggregate_attention(rec)
                D = torch.stack([torch.as_tensor(prompts[i].D, dtype=torch.float32) for i in idx])
                fmask = compute_focus_mask(A, D, threshold)
                focused = AttentionRecord() if record else None
                x0 = _sample_loop(model, x_T.clone(), y, yn, ts, guidance, cfg.eta, step_noise,
                                  mask=fmask, record=focused)
            imgs = to_uint8(x0)
            for j, i in enumerate(idx):
                sub_rec = _slice_record(rec, j)
                sub_focused = _slice_record(focused, j)
                sub_mask = None
                if fmask is not None:
                    sub_mask = FocusMask(fmask.mask[j], fmask.hw, fmask.threshold_used)
                results[i] = GenerationResult(imgs[j], int(seeds[i]), mode, snapshot,
                                              sub_rec, sub_mask, prompts[i].prompt, sub_focused)
    return results


# -- training ------------------------------------------------------------

def _token_batch(tokenizer: ToyTokenizer, captions: Sequence[str]) -> torch.Tensor:
    seqs = [tokenizer.tokenize(c).tokens for c in captions]
    L = max(len(s) for s in seqs)
    out = torch.full((len(seqs), L), tokenizer.pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = torch.tensor(s)
    return out


def _box_grids(boxes, image_size: int, r: int) -> torch.Tensor:
    """(N, 2, r*r) bool: attention cells overlapping each object's box."""
    f = image_size // r
    lo = torch.arange(r) * f
    hi = lo + f
    b = torch.as_tensor(boxes, dtype=torch.long)  # (N, 2, 4) as y0, x0, y1, x1
    rows = (lo[None, None] < b[..., 2:3]) & (hi[None, None] > b[..., 0:1])
    cols = (lo[None, None] < b[..., 3:4]) & (hi[None, None] > b[..., 1:2])
    return (rows[..., :, None] & cols[..., None, :]).flatten(2)


def _noun_tokens(tokenizer: ToyTokenizer, sample) -> Tuple[int, int]:
    tp = tokenizer.tokenize(sample.caption)
    words = list(tp.words)
    i1 = words.index(sample.graph.obj1)
    i2 = len(words) - 1 - words[::-1].index(sample.graph.obj2)
    return tp.word_to_tokens[i1][0], tp.word_to_tokens[i2][0]


def grounding_loss(store, cells: Dict[int, torch.Tensor], nouns: torch.Tensor,
                   keep: torch.Tensor) -> torch.Tensor:
    """Mean over layers and objects of -log(noun attention mass inside its box).

    ``cells[r]`` is (B, 2, r*r), ``nouns`` (B, 2) token indices, ``keep`` (B,)
    marks the samples whose caption was not dropped.
    """
    terms = []
    ar = torch.arange(nouns.shape[0])
    for _, maps, (h, _) in store:
        for k in range(2):
            a = maps.float()[ar, :, nouns[:, k]]  # (B, P)
            inside = (a * cells[h][:, k]).sum(-1) / a.sum(-1).clamp_min(1e-8)
            terms.append(-torch.log(inside.clamp_min(1e-6))[keep])
    return torch.cat(terms).mean()


def train_toy_diffusion(
    dataset,
    cfg: DenoiserConfig = None,
    steps: int = 20000,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    cfg_dropout: float = 0.1,
    ema_decay: float = 0.999,
    log_every: int = 200,
    callback: Optional[Callable[[int, float, "ToyDiffusion"], None]] = None,
    amp: bool = False,
    text_encoder: Optional[nn.Module] = None,
    ground_weight: float = 0.0,
) -> ToyDiffusion:
    """Fit the noise-prediction objective on (image, caption) samples.

    Captions are replaced by the empty prompt with probability ``cfg_dropout``
    so the same network serves as the unconditional branch. The returned
    model carries the EMA weights and a ``history`` of (step, loss) pairs.
    ``amp`` runs forward passes under CPU bfloat16 autocast. A given
    ``text_encoder`` (for instance the text tower of a contrastive dual
    encoder) is copied in and kept frozen, the way a pretrained prompt
    encoder is used; otherwise the text encoder trains jointly. ``callback``
    gets ``(step, loss, ema_model)`` after every step.

    ``ground_weight`` > 0 adds :func:`grounding_loss`, which pulls each noun
    token's cross-attention into its object's box. Attribute tokens are left
    unsupervised. This gives the toy model the grounded object tokens that
    large pretrained models show without such help; samples need ``boxes``
    and a ``graph``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    torch.manual_seed(seed)
    model = ToyDiffusion(cfg)
    frozen_text = text_encoder is not None
    if frozen_text:
        model.text.load_state_dict(text_encoder.state_dict())
        model.text.requires_grad_(False)
    images = torch.from_numpy(np.stack([s.image for s in dataset])).permute(0, 3, 1, 2)
    images = images.float() / 127.5 - 1
    all_caps = [s.caption for s in dataset]
    # every template caption has the same token count; the null prompt is only [EOS]
    tokens = _token_batch(model.tokenizer, all_caps)
    if (tokens == model.tokenizer.pad_id).any():
        raise ValueError("captions must share one token length")
    if ground_weight > 0:
        nouns_all = torch.as_tensor([_noun_tokens(model.tokenizer, s) for s in dataset])
        boxes_all = [s.boxes for s in dataset]
        cells_all = {r: _box_grids(boxes_all, model.cfg.image_size, r) for r in model.cfg.attn_resolutions}
    null = torch.full((tokens.shape[1],), model.tokenizer.pad_id, dtype=torch.long)
    null[0] = model.tokenizer.eos_id

    ema = copy.deepcopy(model).eval()
    for p in ema.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW([p for p in model.parameters() if p.requires_grad], lr=lr,
                            weight_decay=0.0)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / 500) * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * s / steps))))
    g = torch.Generator().manual_seed(seed)
    acp = model.alphas_cumprod
    history = []
    t0 = time.time()
    running = None
    for step in range(steps):
        idx = torch.randint(0, len(dataset), (batch_size,), generator=g)
        x0 = images[idx]
        ids = tokens[idx].clone()
        drop = torch.rand(batch_size, generator=g) < cfg_dropout
        ids[drop] = null
        t = torch.randint(0, model.cfg.train_timesteps,
                          (batch_size,), generator=g)
        z = torch.randn(x0.shape, generator=g)
        a = acp[t][:, None, None, None]
        x_t = a.sqrt() * x0 + (1 - a).sqrt() * z
        # padded null rows: keep only the [EOS] row by encoding it on its own
        with torch.autocast("cpu", dtype=torch.bfloat16, enabled=amp):
            with torch.set_grad_enabled(not frozen_text):
                ctx = model.text(ids)
            if drop.any():
                ctx = ctx.clone()
                ctx[drop] = ctx[drop][:, :1].expand(-1, ctx.shape[1], -1)
            store = [] if ground_weight > 0 else None
            pred = model.unet(x_t, t, ctx, store=store)
        loss = F.mse_loss(pred.float(), z)
        if ground_weight > 0 and not drop.all():
            cells = {r: c[idx] for r, c in cells_all.items()}
            loss = loss + ground_weight * grounding_loss(store, cells, nouns_all[idx], ~drop)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.requires_grad], 1.0)
        opt.step()
        sched.step()
        with torch.no_grad():
            d = min(ema_decay, (1 + step) / (10 + step))
            for pe, pm in zip(ema.parameters(), model.parameters()):
                if pm.requires_grad:  # frozen weights would only pick up rounding
                    pe.mul_(d).add_(pm.detach(), alpha=1 - d)
        lv = loss.item()
        running = lv if running is None else 0.98 * running + 0.02 * lv
        history.append((step, lv))
        if callback is not None:
            callback(step, lv, ema)
        if log_every and (step % log_every == 0 or step == steps - 1):
            log.info("step %d loss %.4f (ema %.4f) %.1fs", step, lv, running, time.time() - t0)
    ema.history = history
    return ema

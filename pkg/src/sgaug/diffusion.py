"""Pixel-space denoising diffusion generator with graph-conditioned text context.

Training follows the standard noise-prediction objective: corrupt an image
to a random step of the forward process and regress the injected noise,
with the denoiser cross-attending to the (possibly adapter-enriched) text
embedding. Conditioning is dropped at random during training so sampling
can blend conditional and unconditional predictions (classifier-free
guidance).

All stochastic draws (timesteps, noise, dropout, sampling noise) come from
an explicit numpy generator, so training and sampling are bit-reproducible
per seed on one platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .captions import CaptionMapping, TokenSeq, build_caption, freeform_caption
from .conditioner import ConditionerConfig, SceneGraphConditioner, TextEncoder
from .graphs import SceneGraph, Vocab
from .masks import NEG_INF


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule and its cumulative products.

    The default end value is chosen so that the terminal signal fraction
    alpha_bar_T drops below 0.05 at T=200; the textbook 2e-2 endpoint only
    reaches that with many more steps.
    """

    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 3e-2

    def __post_init__(self):
        betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if not (0.0 < betas[0] and np.all(np.diff(betas) > 0) and betas[-1] < 1.0):
            raise ValueError("betas must be strictly increasing within (0, 1)")
        if not np.all(np.diff(alpha_bars) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if alpha_bars[-1] >= 0.05:
            raise ValueError(
                f"alpha_bar_T = {alpha_bars[-1]:.4f}; schedule leaves too much signal at T"
            )
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at step t, 1-indexed."""
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside [1, {self.T}]")
        return float(self.alpha_bars[t - 1])


def q_sample(x0, t: int, eps, sched: DiffusionSchedule):
    """Forward corruption: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def _group_norm(channels: int) -> nn.GroupNorm:
    groups = 1
    for g in (8, 4, 2):
        if channels % g == 0:
            groups = g
            break
    return nn.GroupNorm(groups, channels)


class ResBlock(nn.Module):
    def __init__(self, channels: int, time_dim: int):
        super().__init__()
        self.norm1 = _group_norm(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, channels)
        self.norm2 = _group_norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return x + h


class CrossAttentionBlock(nn.Module):
    """Single-head attention from feature-map pixels to context tokens."""

    def __init__(self, channels: int, ctx_dim: int):
        super().__init__()
        self.norm = _group_norm(channels)
        self.q = nn.Conv2d(channels, channels, 1)
        self.k = nn.Linear(ctx_dim, channels)
        self.v = nn.Linear(ctx_dim, channels)
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, x, ctx, ctx_mask=None):
        b, c, h, w = x.shape
        q = self.q(self.norm(x)).reshape(b, c, h * w).permute(0, 2, 1)
        k = self.k(ctx)
        v = self.v(ctx)
        scores = q @ k.transpose(1, 2) / math.sqrt(c)
        if ctx_mask is not None:
            scores = scores + ctx_mask[:, None, :]
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).permute(0, 2, 1).reshape(b, c, h, w)
        return x + self.out(out)


class Denoiser(nn.Module):
    """Small conv stack with one cross-attention block at 1/4 resolution."""

    def __init__(self, T: int = 200, base: int = 32, ctx_dim: int = 64, in_ch: int = 3):
        super().__init__()
        time_dim = base * 2
        self.time_table = nn.Embedding(T + 1, time_dim)
        c1, c2, c3 = base, base * 2, base * 3
        self.conv_in = nn.Conv2d(in_ch, c1, 3, padding=1)
        self.res1 = ResBlock(c1, time_dim)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.res2 = ResBlock(c2, time_dim)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.res3 = ResBlock(c3, time_dim)
        self.attn = CrossAttentionBlock(c3, ctx_dim)
        self.res4 = ResBlock(c3, time_dim)
        self.up2 = nn.Conv2d(c3, c2, 3, padding=1)
        self.res5 = ResBlock(c2, time_dim)
        self.up1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.res6 = ResBlock(c1, time_dim)
        self.norm_out = _group_norm(c1)
        self.conv_out = nn.Conv2d(c1, in_ch, 3, padding=1)

    def forward(self, x, t, ctx, ctx_mask=None):
        temb = self.time_table(t)
        h1 = self.res1(self.conv_in(x), temb)
        h2 = self.res2(self.down1(h1), temb)
        h3 = self.res3(self.down2(h2), temb)
        h3 = self.attn(h3, ctx, ctx_mask)
        h3 = self.res4(h3, temb)
        u2 = self.up2(torch.nn.functional.interpolate(h3, scale_factor=2, mode="nearest"))
        u2 = self.res5(u2 + h2, temb)
        u1 = self.up1(torch.nn.functional.interpolate(u2, scale_factor=2, mode="nearest"))
        u1 = self.res6(u1 + h1, temb)
        return self.conv_out(torch.nn.functional.silu(self.norm_out(u1)))


@dataclass
class SampleRequest:
    count: int
    graphs: Sequence[SceneGraph]
    image_size: tuple[int, int] = (64, 64)
    steps: int = 50
    guidance_scale: float = 2.0
    seed: int = 0
    batch_size: int = 8
    caption_seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not self.graphs:
            raise ValueError("at least one scene graph required")


class DiffusionModel:
    """Schedule + text encoder + adapter + denoiser, trained and sampled together."""

    def __init__(
        self,
        vocab: Vocab,
        cfg: ConditionerConfig,
        sched: Optional[DiffusionSchedule] = None,
        dim: int = 64,
        base_channels: int = 32,
        p_drop: float = 0.1,
        seed: int = 0,
        extra_tokens: Sequence[str] = (),
    ):
        self.vocab = vocab
        self.cfg = cfg
        self.sched = sched or DiffusionSchedule()
        self.dim = dim
        self.p_drop = p_drop
        torch.manual_seed(seed)
        tokens = caption_token_inventory(vocab) + list(extra_tokens)
        self.text_encoder = TextEncoder(tokens, dim=dim)
        self.conditioner = SceneGraphConditioner(vocab, dim=dim)
        self.denoiser = Denoiser(T=self.sched.T, base=base_channels, ctx_dim=dim)
        self.null_ctx = nn.Parameter(torch.randn(1, dim) * 0.02)

    # -- conditioning ------------------------------------------------------

    def parameters(self):
        yield from self.text_encoder.parameters()
        yield from self.conditioner.parameters()
        yield from self.denoiser.parameters()
        yield self.null_ctx

    def to_dtype(self, dtype: torch.dtype) -> "DiffusionModel":
        """Cast every module (gradient checks run at float64)."""
        self.text_encoder.to(dtype)
        self.conditioner.to(dtype)
        self.denoiser.to(dtype)
        self.null_ctx.data = self.null_ctx.data.to(dtype)
        return self

    def make_caption(self, g: SceneGraph, caption_seed: int = 0):
        """Caption (+ mapping when the config uses one) for a graph."""
        if self.cfg.uses_freeform_captions:
            return freeform_caption(g, self.vocab, caption_seed), None
        mapping = build_caption(g, self.vocab)
        return mapping.caption, mapping

    def conditioned_embedding(self, g: SceneGraph, caption: TokenSeq,
                              mapping: Optional[CaptionMapping]) -> torch.Tensor:
        w = self.text_encoder.encode(caption)
        return self.conditioner.condition(w, g, self.cfg, mapping)

    # -- training ----------------------------------------------------------

    def ldm_loss(self, x0, g: SceneGraph, mapping_or_caption=None,
                 rng: Optional[np.random.Generator] = None,
                 denoise_fn=None) -> torch.Tensor:
        """Noise-prediction loss for one record.

        Samples a uniform step and Gaussian noise from ``rng``, corrupts the
        image, and returns the mean squared error between the noise and the
        denoiser's prediction under the conditioned embedding. With
        probability ``p_drop`` the embedding is replaced by the learned
        null context. ``denoise_fn`` substitutes the denoiser (test hook).
        """
        rng = rng if rng is not None else np.random.default_rng()
        dtype = next(self.denoiser.parameters()).dtype
        x0_t = torch.as_tensor(np.asarray(x0), dtype=dtype)
        t = int(rng.integers(1, self.sched.T + 1))
        eps = torch.as_tensor(
            rng.standard_normal(tuple(x0_t.shape)), dtype=x0_t.dtype
        )
        if isinstance(mapping_or_caption, CaptionMapping):
            caption, mapping = mapping_or_caption.caption, mapping_or_caption
        elif isinstance(mapping_or_caption, TokenSeq):
            caption, mapping = mapping_or_caption, None
        else:
            caption, mapping = self.make_caption(g)
        if rng.random() < self.p_drop:
            ctx = self.null_ctx.to(x0_t.dtype)
        else:
            ctx = self.conditioned_embedding(g, caption, mapping).to(x0_t.dtype)
        x_t = q_sample(x0_t, t, eps, self.sched)
        fn = denoise_fn or self.denoiser
        eps_hat = fn(x_t[None], torch.tensor([t]), ctx[None])
        return torch.mean((eps - eps_hat[0]) ** 2)

    def batch_loss(self, images, graphs, mappings_or_captions, rng) -> torch.Tensor:
        """Batched objective: one denoiser pass, per-sample conditioning."""
        dtype = next(self.denoiser.parameters()).dtype
        n = len(images)
        ts = rng.integers(1, self.sched.T + 1, size=n)
        ctxs = []
        for g, mc in zip(graphs, mappings_or_captions):
            if isinstance(mc, CaptionMapping):
                caption, mapping = mc.caption, mc
            elif isinstance(mc, TokenSeq):
                caption, mapping = mc, None
            else:
                caption, mapping = self.make_caption(g)
            if rng.random() < self.p_drop:
                ctxs.append(self.null_ctx.to(dtype))
            else:
                ctxs.append(self.conditioned_embedding(g, caption, mapping).to(dtype))
        max_n = max(c.shape[0] for c in ctxs)
        ctx = torch.zeros(n, max_n, self.dim, dtype=dtype)
        ctx_mask = torch.full((n, max_n), NEG_INF, dtype=dtype)
        for i, c in enumerate(ctxs):
            ctx[i, : c.shape[0]] = c
            ctx_mask[i, : c.shape[0]] = 0.0
        x0 = torch.as_tensor(np.stack([np.asarray(im) for im in images]), dtype=dtype)
        eps = torch.as_tensor(rng.standard_normal(tuple(x0.shape)), dtype=dtype)
        ab = torch.as_tensor(self.sched.alpha_bars[ts - 1], dtype=dtype)[:, None, None, None]
        x_t = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
        eps_hat = self.denoiser(x_t, torch.as_tensor(ts, dtype=torch.long), ctx, ctx_mask)
        return torch.mean((eps - eps_hat) ** 2)

    def fit(self, images, graphs, mappings_or_captions, steps: int = 2000,
            batch_size: int = 8, lr: float = 2e-3, seed: int = 0,
            log_every: int = 50) -> list[tuple[int, float]]:
        """Adam training over record triplets; returns (step, loss) history."""
        rng = np.random.default_rng(seed)
        opt = torch.optim.Adam(self.parameters(), lr=lr)
        history = []
        n = len(images)
        if n == 0:
            raise ValueError("empty training set")
        for step in range(steps):
            idx = rng.integers(0, n, size=min(batch_size, n))
            loss = self.batch_loss(
                [images[i] for i in idx],
                [graphs[i] for i in idx],
                [mappings_or_captions[i] for i in idx],
                rng,
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step % log_every == 0 or step == steps - 1:
                history.append((step, float(loss.detach())))
        return history

    # -- sampling ----------------------------------------------------------

    def sample(self, req: SampleRequest) -> np.ndarray:
        """Ancestral sampling with classifier-free guidance.

        Steps are strided uniformly down from T. Prediction blends the
        unconditional and conditional noise estimates with the guidance
        scale; at scale 0 the conditional pass is skipped entirely, making
        the output independent of the graphs. Deterministic per seed.
        Returns uint8 images, shape (count, H, W, 3).
        """
        if req.steps > self.sched.T:
            raise ValueError("steps cannot exceed the training schedule length")
        rng = np.random.default_rng(req.seed)
        dtype = next(self.denoiser.parameters()).dtype
        w, h = req.image_size
        graphs = [req.graphs[i % len(req.graphs)] for i in range(req.count)]
        ts = np.unique(np.round(np.linspace(self.sched.T, 1, req.steps)).astype(int))[::-1]
        out = np.empty((req.count, h, w, 3), dtype=np.uint8)
        with torch.no_grad():
            for start in range(0, req.count, req.batch_size):
                batch_graphs = graphs[start : start + req.batch_size]
                b = len(batch_graphs)
                ctxs = []
                for g in batch_graphs:
                    caption, mapping = self.make_caption(g, req.caption_seed)
                    ctxs.append(self.conditioned_embedding(g, caption, mapping).to(dtype))
                max_n = max(c.shape[0] for c in ctxs)
                ctx = torch.zeros(b, max_n, self.dim, dtype=dtype)
                ctx_mask = torch.full((b, max_n), NEG_INF, dtype=dtype)
                for i, c in enumerate(ctxs):
                    ctx[i, : c.shape[0]] = c
                    ctx_mask[i, : c.shape[0]] = 0.0
                null = self.null_ctx.to(dtype).expand(b, 1, self.dim)
                x = torch.as_tensor(rng.standard_normal((b, 3, h, w)), dtype=dtype)
                for si, t_now in enumerate(ts):
                    t_next = int(ts[si + 1]) if si + 1 < len(ts) else 0
                    t_batch = torch.full((b,), int(t_now), dtype=torch.long)
                    eps_u = self.denoiser(x, t_batch, null)
                    if req.guidance_scale == 0.0:
                        eps_hat = eps_u
                    else:
                        eps_c = self.denoiser(x, t_batch, ctx, ctx_mask)
                        eps_hat = eps_u + req.guidance_scale * (eps_c - eps_u)
                    ab_now = self.sched.alpha_bar(int(t_now))
                    x0_hat = (x - math.sqrt(1 - ab_now) * eps_hat) / math.sqrt(ab_now)
                    x0_hat = torch.clamp(x0_hat, -1.0, 1.0)
                    if t_next == 0:
                        x = x0_hat
                    else:
                        ab_next = self.sched.alpha_bar(t_next)
                        var = (1 - ab_next) / (1 - ab_now) * (1 - ab_now / ab_next)
                        var = max(var, 0.0)
                        dir_coef = math.sqrt(max(1 - ab_next - var, 0.0))
                        z = torch.as_tensor(rng.standard_normal((b, 3, h, w)), dtype=dtype)
                        x = math.sqrt(ab_next) * x0_hat + dir_coef * eps_hat + math.sqrt(var) * z
                x_img = torch.clamp(x, -1.0, 1.0)
                arr = ((x_img.permute(0, 2, 3, 1).numpy() + 1.0) / 2.0 * 255.0).round()
                out[start : start + b] = arr.astype(np.uint8)
        return out

    # -- persistence -------------------------------------------------------

    def _modules(self):
        return {
            "text_encoder": self.text_encoder,
            "conditioner": self.conditioner,
            "denoiser": self.denoiser,
        }

    def save(self, path) -> None:
        arrays = {"null_ctx": self.null_ctx.detach().numpy()}
        for prefix, module in self._modules().items():
            for name, param in module.state_dict().items():
                arrays[f"{prefix}.{name}"] = param.detach().numpy()
        meta = {
            "config_id": self.cfg.config_id,
            "dim": self.dim,
            "p_drop": self.p_drop,
            "schedule": {"T": self.sched.T, "beta_start": self.sched.beta_start,
                         "beta_end": self.sched.beta_end},
            "vocab": self.vocab.to_dict(),
            "vocab_hash": self.vocab.content_hash(),
            "text_tokens": self.text_encoder.tokens,
            "base_channels": self.denoiser.conv_in.out_channels,
        }
        ckpt.save_arrays(path, arrays, meta)

    @staticmethod
    def load(path) -> "DiffusionModel":
        arrays, meta = ckpt.load_arrays(path)
        vocab = Vocab.from_dict(meta["vocab"])
        sched = DiffusionSchedule(**meta["schedule"])
        model = DiffusionModel(
            vocab,
            ConditionerConfig(meta["config_id"]),
            sched=sched,
            dim=meta["dim"],
            base_channels=meta["base_channels"],
            p_drop=meta["p_drop"],
            extra_tokens=meta["text_tokens"],
        )
        with torch.no_grad():
            model.null_ctx.copy_(torch.as_tensor(arrays["null_ctx"]))
            for prefix, module in model._modules().items():
                state = {
                    name[len(prefix) + 1 :]: torch.as_tensor(arr)
                    for name, arr in arrays.items()
                    if name.startswith(prefix + ".")
                }
                module.load_state_dict(state)
        return model


def caption_token_inventory(vocab: Vocab) -> list[str]:
    """Every token the recipe and freeform captions can emit for a vocab."""
    words: set[str] = set()
    for name in (
        list(vocab.object_classes) + list(vocab.predicate_classes)
        + list(vocab.attribute_classes)
    ):
        words.update(name.lower().split())
    words.update(
        "a an picture of image showing scene with and while as well where the is".split()
    )
    return sorted(words)

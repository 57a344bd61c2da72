"""Variance-preserving corruption, the epsilon-prediction loss, samplers and a toy dataset."""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; ``trace`` holds the losses up to that step."""

    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule with ``alpha_t = sqrt(abar_t)`` and ``sigma_t = sqrt(1 - abar_t)``."""

    num_timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.num_timesteps < 1:
            raise ValueError("num_timesteps must be >= 1")
        betas = torch.linspace(self.beta_start, self.beta_end, self.num_timesteps, dtype=torch.float64)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bar", torch.cumprod(1.0 - betas, 0))

    @property
    def alpha(self) -> torch.Tensor:
        return self.alpha_bar.sqrt()

    @property
    def sigma(self) -> torch.Tensor:
        return (1.0 - self.alpha_bar).sqrt()

    def to_dict(self) -> dict:
        return {"num_timesteps": self.num_timesteps, "beta_start": self.beta_start, "beta_end": self.beta_end}


# -- data -----------------------------------------------------------------------


def blob_centers(num_classes: int = 8, image_size: int = 16, radius: float = 5.0) -> np.ndarray:
    """Integer ``(row, col)`` centre of each class's blob, evenly spaced on a circle."""
    mid = image_size / 2
    ang = 2 * np.pi * np.arange(num_classes) / num_classes
    return np.rint(np.stack([mid + radius * np.cos(ang), mid + radius * np.sin(ang)], 1)).astype(np.int64)


class BlobDataset:
    """Class-conditional Gaussian blobs on a 16x16 single-channel canvas.

    Labels are balanced (``i % num_classes`` before a seeded shuffle) and every
    image gets i.i.d. Gaussian pixel noise. Regenerating with the same
    ``(size, seed)`` gives byte-identical tensors.
    """

    def __init__(self, size: int, seed: int = 0, num_classes: int = 8, image_size: int = 16,
                 width: float = 1.5, noise_std: float = 0.05):
        if size < 1:
            raise ValueError("dataset size must be >= 1")
        self.size, self.seed = size, seed
        self.num_classes, self.image_size = num_classes, image_size
        self.width, self.noise_std = width, noise_std
        self.centers = blob_centers(num_classes, image_size)
        gen = torch.Generator().manual_seed(seed)
        labels = torch.arange(size) % num_classes
        self.labels = labels[torch.randperm(size, generator=gen)]
        clean = self.clean_images()[self.labels]
        noise = torch.randn(size, 1, image_size, image_size, generator=gen, dtype=torch.float64)
        self.images = (clean + noise_std * noise).to(torch.float32)

    def clean_images(self) -> torch.Tensor:
        """Noise-free template per class, ``[num_classes, 1, S, S]`` in float64."""
        idx = np.arange(self.image_size)
        rr, cc = np.meshgrid(idx, idx, indexing="ij")
        out = np.empty((self.num_classes, 1, self.image_size, self.image_size))
        for k, (r, c) in enumerate(self.centers):
            out[k, 0] = np.exp(-((rr - r) ** 2 + (cc - c) ** 2) / (2 * self.width**2))
        return torch.from_numpy(out)

    def __len__(self) -> int:
        return self.size

    def subset(self, indices: Sequence[int] | torch.Tensor) -> "BlobSubset":
        return BlobSubset(self.images[torch.as_tensor(indices)], self.labels[torch.as_tensor(indices)], self)

    def metadata(self) -> dict:
        return {"size": self.size, "seed": self.seed, "num_classes": self.num_classes,
                "image_size": self.image_size, "width": self.width, "noise_std": self.noise_std,
                "classes": list(range(self.num_classes))}


@dataclasses.dataclass
class BlobSubset:
    """A view with its own images/labels; quacks like :class:`BlobDataset` for training."""

    images: torch.Tensor
    labels: torch.Tensor
    parent: BlobDataset

    def __len__(self) -> int:
        return len(self.labels)


def blob_accuracy(images: torch.Tensor, labels: torch.Tensor, num_classes: int = 8, tolerance: int = 2) -> float:
    """Fraction of images whose brightest pixel is within Chebyshev distance ``tolerance`` of its class centre."""
    images = torch.as_tensor(images)
    if images.dim() != 4 or images.shape[1] != 1:
        raise ValueError(f"expected [B, 1, S, S] images, got {tuple(images.shape)}")
    if len(images) == 0:
        return 0.0
    size = images.shape[-1]
    flat = images.reshape(len(images), -1).argmax(1)
    rows, cols = flat // size, flat % size
    centers = torch.from_numpy(blob_centers(num_classes, size))[torch.as_tensor(labels).long()]
    dist = torch.maximum((rows - centers[:, 0]).abs(), (cols - centers[:, 1]).abs())
    return float((dist <= tolerance).double().mean())


# -- forward process and loss ----------------------------------------------------


def _per_sample(values: torch.Tensor, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return values[t].to(like.dtype).reshape(-1, *([1] * (like.dim() - 1)))


def corrupt(s: NoiseSchedule, z: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    """``z_t = alpha_t z + sigma_t eps`` with ``t`` an int or a ``[B]`` index tensor."""
    if z.shape != eps.shape:
        raise ValueError(f"corrupt: z {tuple(z.shape)} and eps {tuple(eps.shape)} differ")
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if int(t.min()) < 0 or int(t.max()) >= s.num_timesteps:
        raise ValueError(f"timestep out of range [0, {s.num_timesteps})")
    if t.numel() == 1:
        a, sg = s.alpha[t[0]].to(z.dtype), s.sigma[t[0]].to(z.dtype)
    else:
        if len(t) != z.shape[0]:
            raise ValueError(f"corrupt: {len(t)} timesteps for a batch of {z.shape[0]}")
        a, sg = _per_sample(s.alpha, t, z), _per_sample(s.sigma, t, z)
    return a * z + sg * eps


def drop_labels(c: torch.Tensor, p: float, num_classes: int, gen: torch.Generator) -> torch.Tensor:
    """Replace each label by the null class ``num_classes`` with probability ``p``."""
    keep = torch.rand(c.shape, generator=gen) >= p
    return torch.where(keep, c, torch.full_like(c, num_classes))


def dm_loss(model: nn.Module, s: NoiseSchedule, z: torch.Tensor, c: torch.Tensor,
            gen: torch.Generator, cfg_dropout: float | None = None,
            t: torch.Tensor | None = None, eps: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error between the noise and the model's prediction.

    ``t`` (uniform over steps) and ``eps`` (standard normal) are drawn from
    ``gen`` unless given.
    """
    if len(z) == 0:
        raise ValueError("dm_loss: empty batch")
    cfg = model.config
    p = cfg.cfg_dropout if cfg_dropout is None else cfg_dropout
    if t is None:
        t = torch.randint(0, s.num_timesteps, (len(z),), generator=gen)
    if eps is None:
        eps = torch.randn(z.shape, generator=gen, dtype=z.dtype)
    c = drop_labels(c, p, cfg.num_classes, gen) if p > 0 else c
    pred = model(corrupt(s, z, t, eps), t, c)
    return ((pred - eps) ** 2).mean()


@torch.no_grad()
def eval_loss(model: nn.Module, s: NoiseSchedule, data, seed: int = 1234, batch: int = 256,
              repeats: int = 1) -> float:
    """Label-conditional ``dm_loss`` averaged over ``data`` with fixed noise draws."""
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    for _ in range(repeats):
        for start in range(0, len(data), batch):
            z, c = data.images[start:start + batch], data.labels[start:start + batch]
            total += float(dm_loss(model, s, z, c, gen, cfg_dropout=0.0)) * len(z)
            count += len(z)
    return total / count


# -- training ---------------------------------------------------------------------


@dataclasses.dataclass
class TrainConfig:
    steps: int = 4000
    batch: int = 128
    lr: float = 1e-4
    warmup: int = 200
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    decay: str = "constant"  # or "cosine"
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_factor(step: int, warmup: int, total: int, decay: str) -> float:
    """Linear warmup then constant or cosine-to-zero decay."""
    if warmup and step < warmup:
        return (step + 1) / warmup
    if decay == "constant":
        return 1.0
    if decay == "cosine":
        span = max(total - warmup, 1)
        return 0.5 * (1 + math.cos(math.pi * min(step - warmup, span) / span))
    raise ValueError(f"unknown lr decay {decay!r}")


def make_optimizer(params, lr: float, weight_decay: float) -> torch.optim.Optimizer:
    return torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), weight_decay=weight_decay)


def train(model: nn.Module, s: NoiseSchedule, data, cfg: TrainConfig,
          params: Sequence[nn.Parameter] | None = None,
          callback: Callable[[int, float], None] | None = None) -> tuple[nn.Module, list[float]]:
    """Optimise ``model`` in place on the diffusion loss; returns ``(model, per-step losses)``.

    Minibatches are drawn with replacement from a generator seeded by
    ``cfg.seed``, so two runs with the same seed produce identical traces.
    ``params`` restricts which tensors are updated (default: all trainable).
    """
    if cfg.steps < 0:
        raise ValueError("steps must be >= 0")
    if cfg.steps == 0:
        return model, []
    params = [p for p in (params if params is not None else model.parameters()) if p.requires_grad]
    opt = make_optimizer(params, cfg.lr, cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda step: lr_factor(step, cfg.warmup, cfg.steps, cfg.decay))
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(data)
    losses: list[float] = []
    model.train()
    for step in range(cfg.steps):
        idx = torch.randint(0, n, (cfg.batch,), generator=gen)
        loss = dm_loss(model, s, data.images[idx], data.labels[idx], gen)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite loss at step {step}", losses + [value])
        losses.append(value)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.clip_norm:
            torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
        opt.step()
        sched.step()
        if callback is not None:
            callback(step, value)
        if step % 500 == 0:
            log.debug("step %d loss %.4f", step, value)
    model.eval()
    return model, losses


# -- sampling ---------------------------------------------------------------------


def guided_eps(model: nn.Module, z: torch.Tensor, t: torch.Tensor, c: torch.Tensor, cfg_scale: float) -> torch.Tensor:
    """Classifier-free guidance ``eps_null + s (eps_c - eps_null)``; ``s = 1`` skips the null pass."""
    if cfg_scale == 1.0:
        return model(z, t, c)
    null = torch.full_like(c, model.config.num_classes)
    both = model(torch.cat([z, z]), torch.cat([t, t]), torch.cat([c, null]))
    eps_c, eps_null = both.chunk(2)
    return eps_null + cfg_scale * (eps_c - eps_null)


def respaced_timesteps(num_timesteps: int, steps: int) -> list[int]:
    """``steps`` evenly spaced indices from ``T - 1`` down to 0."""
    if not 1 <= steps <= num_timesteps:
        raise ValueError(f"steps must lie in [1, {num_timesteps}], got {steps}")
    return sorted({int(round(x)) for x in np.linspace(0, num_timesteps - 1, steps)}, reverse=True)


@torch.no_grad()
def sample(model: nn.Module, s: NoiseSchedule, method: str = "ddim", steps: int = 50,
           cfg_scale: float = 1.5, classes: Sequence[int] | torch.Tensor = (0,), seed: int = 0,
           clip: float = 3.0, noise: torch.Tensor | None = None) -> torch.Tensor:
    """Draw one image per entry of ``classes`` with a DDPM or DDIM sampler.

    DDPM uses the posterior of the respaced chain; DDIM is the deterministic
    (eta = 0) update. The result is clipped to ``[-clip, clip]``.
    """
    method = method.lower()
    if method not in ("ddpm", "ddim"):
        raise ValueError(f"unknown sampler {method!r}")
    if cfg_scale < 0:
        raise ValueError("cfg_scale must be >= 0")
    cfg = model.config
    c = torch.as_tensor(classes, dtype=torch.long).reshape(-1)
    gen = torch.Generator().manual_seed(seed)
    shape = (len(c), cfg.channels, cfg.image_size, cfg.image_size)
    dtype = next(model.parameters()).dtype
    x = torch.randn(shape, generator=gen, dtype=dtype) if noise is None else noise.clone().to(dtype)
    abar = s.alpha_bar
    ts = respaced_timesteps(s.num_timesteps, steps)
    model.eval()
    for i, t in enumerate(ts):
        a_t = abar[t]
        a_prev = abar[ts[i + 1]] if i + 1 < len(ts) else torch.tensor(1.0, dtype=torch.float64)
        eps = guided_eps(model, x, torch.full((len(c),), t, dtype=torch.long), c, cfg_scale).to(torch.float64)
        xd = x.to(torch.float64)
        x0 = (xd - (1 - a_t).sqrt() * eps) / a_t.sqrt()
        if method == "ddim":
            xd = a_prev.sqrt() * x0 + (1 - a_prev).sqrt() * eps
        else:
            beta = 1 - a_t / a_prev
            mean = (a_prev.sqrt() * beta / (1 - a_t)) * x0 + ((1 - beta).sqrt() * (1 - a_prev) / (1 - a_t)) * xd
            xd = mean
            if i + 1 < len(ts):
                var = beta * (1 - a_prev) / (1 - a_t)
                xd = xd + var.sqrt() * torch.randn(shape, generator=gen, dtype=torch.float64)
        x = xd.to(dtype)
    return x.clamp(-clip, clip)

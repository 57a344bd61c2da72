"""Shared model fixtures-as-functions for the test modules."""

import torch


def randomize(model, scale=0.05, seed=0):
    """Give every parameter (including the zero-initialised modulation) a random value."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


def inputs(cfg, batch=2, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(batch, cfg.channels, cfg.image_size, cfg.image_size, generator=g, dtype=dtype)
    t = torch.randint(0, cfg.num_timesteps, (batch,), generator=g)
    c = torch.randint(0, cfg.num_classes + 1, (batch,), generator=g)
    return z, t, c


def run_blocks(model, z, t, c):
    x = model.embed(z)
    cond = model.conditioning(t, c)
    h = x
    for e in model.entries:
        h = e(h, cond)
    return x, h

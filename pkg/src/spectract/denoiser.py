"""Conditional latent noise predictor eta(Z_t, t, B) and its persistence."""

from __future__ import annotations

import json
import os

import numpy as np

from . import nn
from .arrayio import save_array, load_array

TIME_EMBED_DIM = 16


def time_embedding(t, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding; injective over the small step counts used here."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class LinResBlock(nn.Module):
    def __init__(self, width, rng):
        self.lin1 = nn.Linear(width, width, rng)
        self.lin2 = nn.Linear(width, width, rng, scale=0.1 / np.sqrt(width))

    def forward(self, x):
        h1, c1 = self.lin1.forward(x)
        h2, c2 = nn.silu(h1)
        h3, c3 = self.lin2.forward(h2)
        return x + h3, (c1, c2, c3)

    def backward(self, dout, cache):
        c1, c2, c3 = cache
        d = self.lin2.backward(dout, c3)
        d = nn.silu_backward(d, c2)
        d = self.lin1.backward(d, c1)
        return dout + d


class Denoiser(nn.Module):
    """Residual MLP on the concatenated (Z_t, B, timestep embedding)."""

    def __init__(self, latent_dim, rng, n_blocks=3, width=None):
        self.latent_dim = latent_dim
        self.width = width or latent_dim
        self.lin_in = nn.Linear(2 * latent_dim + TIME_EMBED_DIM, self.width, rng)
        self.blocks = [LinResBlock(self.width, rng) for _ in range(n_blocks)]
        self.lin_out = nn.Linear(self.width, latent_dim, rng)

    def forward(self, zt, t, cond):
        """Batched prediction; zt and cond are (N, latent_dim)."""
        temb = time_embedding(t)
        x = np.concatenate(
            [zt, cond, np.broadcast_to(temb, (zt.shape[0], temb.size))], axis=1)
        h, c0 = self.lin_in.forward(x)
        h, cs = nn.silu(h)
        caches = []
        for blk in self.blocks:
            h, c = blk.forward(h)
            caches.append(c)
        eps, co = self.lin_out.forward(h)
        return eps, (c0, cs, caches, co)

    def backward(self, dout, cache):
        """Returns (d zt, d cond); parameter grads accumulate in place."""
        c0, cs, caches, co = cache
        d = self.lin_out.backward(dout, co)
        for blk, c in zip(reversed(self.blocks), reversed(caches)):
            d = blk.backward(d, c)
        d = nn.silu_backward(d, cs)
        d = self.lin_in.backward(d, c0)
        ld = self.latent_dim
        return d[:, :ld], d[:, ld:2 * ld]

    def predict(self, zt, t, cond):
        """DenoiserInterface entry point for a single latent vector."""
        zt = np.atleast_2d(np.asarray(zt, dtype=float))
        cond = np.atleast_2d(np.asarray(cond, dtype=float))
        eps, _ = self.forward(zt, t, cond)
        return eps[0]

    def as_callable(self):
        return lambda z, t, b: self.predict(z, t, b)


def save_denoiser(path: str, den: Denoiser, cond_encoder=None, extra=None):
    """One f32 blob + JSON layout; optionally bundles the condition encoder."""
    parts = [("denoiser.", den.state_dict())]
    if cond_encoder is not None:
        parts.append(("cond_encoder.", cond_encoder.state_dict()))
    arrays, layout, offset = [], [], 0
    for prefix, sd in parts:
        for k in sorted(sd):
            a = sd[k]
            arrays.append(a.ravel())
            layout.append({"name": prefix + k, "shape": list(a.shape),
                           "offset": offset})
            offset += a.size
    save_array(path, np.concatenate(arrays), axes=["flat_params"],
               creator="spectract.denoiser")
    manifest = {
        "latent_dim": den.latent_dim,
        "width": den.width,
        "n_blocks": len(den.blocks),
        "layout": layout,
    }
    if extra:
        manifest.update(extra)
    base = path[:-4] if path.endswith(".f32") else path
    with open(base + ".manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def load_denoiser(path: str):
    """Returns (denoiser, cond_encoder state dict or None, manifest)."""
    base = path[:-4] if path.endswith(".f32") else path
    blob, _ = load_array(base + ".f32")
    with open(base + ".manifest.json") as f:
        manifest = json.load(f)
    den = Denoiser(manifest["latent_dim"], np.random.default_rng(0),
                   n_blocks=manifest["n_blocks"], width=manifest["width"])
    den_sd, cond_sd = {}, {}
    for item in manifest["layout"]:
        size = int(np.prod(item["shape"])) if item["shape"] else 1
        a = blob[item["offset"]:item["offset"] + size].reshape(item["shape"])
        if item["name"].startswith("denoiser."):
            den_sd[item["name"][len("denoiser."):]] = a
        else:
            cond_sd[item["name"][len("cond_encoder."):]] = a
    den.load_state_dict(den_sd)
    return den, (cond_sd or None), manifest

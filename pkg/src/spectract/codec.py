"""Compact prior encoder and modulated U-shaped decoder surrogates.

The encoder compresses a (GT, LQ) pair, or the LQ measurement alone, into a
latent vector of length 4C. The decoder maps (latent, LQ) back to a
high-quality image, with the latent injected at every level as per-channel
scale/shift modulation. Both run on hand-derived gradients (see nn.py).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import nn
from .arrayio import save_array, load_array
from .metrics import ssim, ssim_with_grad


def pixel_unshuffle(image: np.ndarray, r: int) -> np.ndarray:
    """Space-to-channel rearrangement; bijective, element multiset preserved."""
    image = np.asarray(image, dtype=float)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[None]
    out = nn.pixel_unshuffle_batch(image[None], r)[0]
    return out


def pixel_shuffle(image: np.ndarray, r: int) -> np.ndarray:
    """Inverse of pixel_unshuffle."""
    image = np.asarray(image, dtype=float)
    out = nn.pixel_shuffle_batch(image[None], r)[0]
    if out.shape[0] == 1:
        return out[0]
    return out


class ResBlock(nn.Module):
    def __init__(self, width, rng):
        self.conv1 = nn.Conv2d(width, width, rng)
        self.conv2 = nn.Conv2d(width, width, rng, scale=0.1 / np.sqrt(width * 9))

    def forward(self, x):
        h1, c1 = self.conv1.forward(x)
        h2, c2 = nn.silu(h1)
        h3, c3 = self.conv2.forward(h2)
        return x + h3, (c1, c2, c3)

    def backward(self, dout, cache):
        c1, c2, c3 = cache
        d = self.conv2.backward(dout, c3)
        d = nn.silu_backward(d, c2)
        d = self.conv1.backward(d, c1)
        return dout + d


class FilmResBlock(nn.Module):
    """Residual conv block whose hidden activation is FiLM-modulated by z."""

    def __init__(self, width, latent_dim, rng):
        self.conv1 = nn.Conv2d(width, width, rng)
        self.mod = nn.Linear(latent_dim, 2 * width, rng)
        self.conv2 = nn.Conv2d(width, width, rng, scale=0.1 / np.sqrt(width * 9))
        self.width = width

    def forward(self, x, z):
        h1, c1 = self.conv1.forward(x)
        gd, cm = self.mod.forward(z)
        gamma, delta = gd[:, :self.width], gd[:, self.width:]
        h2, cf = nn.film(h1, gamma, delta)
        h3, cs = nn.silu(h2)
        h4, c2 = self.conv2.forward(h3)
        return x + h4, (c1, cm, cf, cs, c2)

    def backward(self, dout, cache):
        c1, cm, cf, cs, c2 = cache
        d = self.conv2.backward(dout, c2)
        d = nn.silu_backward(d, cs)
        d, dgamma, ddelta = nn.film_backward(d, cf)
        dz = self.mod.backward(np.concatenate([dgamma, ddelta], axis=1), cm)
        dx = self.conv1.backward(d, c1)
        return dout + dx, dz


class Encoder(nn.Module):
    """PixelUnshuffle, stacked residual blocks, pooled linear head -> 4C."""

    def __init__(self, in_channels, C, r, rng, width=32, n_blocks=2):
        self.r = r
        self.latent_dim = 4 * C
        self.conv_in = nn.Conv2d(in_channels * r * r, width, rng)
        self.blocks = [ResBlock(width, rng) for _ in range(n_blocks)]
        self.head = nn.Linear(width, self.latent_dim, rng)

    def forward(self, x):
        u = nn.pixel_unshuffle_batch(x, self.r)
        h, c0 = self.conv_in.forward(u)
        h, cs = nn.silu(h)
        caches = []
        for blk in self.blocks:
            h, c = blk.forward(h)
            caches.append(c)
        pooled, cp = nn.global_mean_pool(h)
        z, ch = self.head.forward(pooled)
        return z, (c0, cs, caches, cp, ch)

    def backward(self, dz, cache):
        c0, cs, caches, cp, ch = cache
        d = self.head.backward(dz, ch)
        d = nn.global_mean_pool_backward(d, cp)
        for blk, c in zip(reversed(self.blocks), reversed(caches)):
            d = blk.backward(d, c)
        d = nn.silu_backward(d, cs)
        d = self.conv_in.backward(d, c0)
        return nn.pixel_shuffle_batch(d, self.r)


class Decoder(nn.Module):
    """4-level U-shaped stack with latent-driven FiLM at every level."""

    def __init__(self, in_channels, out_channels, C, rng,
                 widths=(8, 12, 16, 24), blocks_per_level=(1, 1, 1, 1)):
        if len(widths) != 4 or len(blocks_per_level) != 4:
            raise ValueError("decoder uses exactly 4 levels")
        self.widths = tuple(widths)
        self.latent_dim = 4 * C
        ld = self.latent_dim
        self.conv_in = nn.Conv2d(in_channels, widths[0], rng)
        self.down_blocks = [
            [FilmResBlock(widths[l], ld, rng) for _ in range(blocks_per_level[l])]
            for l in range(4)]
        self.down_proj = [nn.Conv2d(widths[l], widths[l + 1], rng)
                          for l in range(3)]
        self.up_proj = [nn.Conv2d(widths[l + 1], widths[l], rng)
                        for l in range(3)]
        self.up_blocks = [
            [FilmResBlock(widths[l], ld, rng) for _ in range(blocks_per_level[l])]
            for l in range(3)]
        self.conv_out = nn.Conv2d(widths[0], out_channels, rng)

    def forward(self, z, x):
        cache = {}
        h, cache["in"] = self.conv_in.forward(x)
        skips = []
        dcaches = []
        for l in range(4):
            bc = []
            for blk in self.down_blocks[l]:
                h, c = blk.forward(h, z)
                bc.append(c)
            dcaches.append(bc)
            if l < 3:
                skips.append(h)
                h, cp = nn.avgpool2(h)
                h, cj = self.down_proj[l].forward(h)
                bc.append(("pool", cp, cj))
        cache["down"] = dcaches
        ucaches = []
        for l in (2, 1, 0):
            h, cu = nn.upsample2(h)
            h, cj = self.up_proj[l].forward(h)
            h = h + skips[l]
            bc = [("up", cu, cj)]
            for blk in self.up_blocks[l]:
                h, c = blk.forward(h, z)
                bc.append(c)
            ucaches.append(bc)
        cache["up"] = ucaches
        y, cache["out"] = self.conv_out.forward(h)
        return y, cache

    def backward(self, dout, cache):
        dz_total = 0.0
        d = self.conv_out.backward(dout, cache["out"])
        dskips = [None, None, None]
        for l in (0, 1, 2):  # reverse of forward execution order (2, 1, 0)
            bc = cache["up"][2 - l]
            for blk, c in zip(reversed(self.up_blocks[l]), reversed(bc[1:])):
                d, dz = blk.backward(d, c)
                dz_total = dz_total + dz
            dskips[l] = d
            _, cu, cj = bc[0]
            d = self.up_proj[l].backward(d, cj)
            d = nn.upsample2_backward(d, cu)
        for l in (3, 2, 1, 0):
            bc = cache["down"][l]
            if l < 3:
                _, cp, cj = bc[-1]
                d = self.down_proj[l].backward(d, cj)
                d = nn.avgpool2_backward(d, cp)
                d = d + dskips[l]
                blocks_c = bc[:-1]
            else:
                blocks_c = bc
            for blk, c in zip(reversed(self.down_blocks[l]), reversed(blocks_c)):
                d, dz = blk.backward(d, c)
                dz_total = dz_total + dz
        dx = self.conv_in.backward(d, cache["in"])
        return dz_total, dx


@dataclass
class Codec:
    """Trained encoder/decoder pair plus its preprocessing constants."""

    encoder: Encoder
    decoder: Decoder
    C: int
    r: int
    weight: float       # scalar WeightMap: maps the data range near [0, 1]
    lam: float = 0.2    # SSIM-term weight in the pretraining loss
    in_channels_lq: int = 1
    out_channels: int = 1

    @classmethod
    def create(cls, C, r, rng, in_channels_lq=1, out_channels=1, weight=1.0,
               lam=0.2, enc_width=32, dec_widths=(8, 12, 16, 24)):
        enc = Encoder(out_channels + in_channels_lq, C, r, rng, width=enc_width)
        dec = Decoder(in_channels_lq, out_channels, C, rng, widths=dec_widths)
        return cls(encoder=enc, decoder=dec, C=C, r=r, weight=weight, lam=lam,
                   in_channels_lq=in_channels_lq, out_channels=out_channels)


def _as_batch(img):
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        return img[None, None]
    if img.ndim == 3:
        return img[None]
    return img


def encode_pair(p_gt, p_lq, w: float, params) -> np.ndarray:
    """Latent Z of length 4C from a weighted (GT, LQ) concatenation."""
    enc = params.encoder if isinstance(params, Codec) else params
    gt = _as_batch(p_gt) * w
    lq = _as_batch(p_lq) * w
    if gt.shape[2:] != lq.shape[2:]:
        raise ValueError("GT/LQ spatial shapes differ")
    z, _ = enc.forward(np.concatenate([gt, lq], axis=1))
    return z[0]


def encode_condition(p_lq, w: float, encoder: Encoder) -> np.ndarray:
    """Measurement-only latent B of length 4C."""
    lq = _as_batch(p_lq) * w
    z, _ = encoder.forward(lq)
    return z[0]


def decode(z, p_lq, params) -> np.ndarray:
    """High-quality output D(Z, P_LQ); same spatial shape as the LQ input."""
    codec = params if isinstance(params, Codec) else None
    dec = codec.decoder if codec else params
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[None]
    if z.shape[1] != dec.latent_dim:
        raise ValueError(
            f"latent length {z.shape[1]} != expected {dec.latent_dim}")
    lq = _as_batch(p_lq)
    if codec is not None:
        lq = lq * codec.weight
    y, _ = dec.forward(z, lq)
    out = y[0]
    if codec is not None:
        out = out / codec.weight
    if out.shape[0] == 1:
        out = out[0]
    return out


def loss_res(p_gt, p_hq, lam: float = 0.2, peak: float = 1.0) -> float:
    """L1 + lam * (1 - SSIM); zero for identical images."""
    p_gt = np.asarray(p_gt, dtype=float)
    p_hq = np.asarray(p_hq, dtype=float)
    if p_gt.shape != p_hq.shape:
        raise ValueError("shape mismatch")
    l1 = float(np.mean(np.abs(p_gt - p_hq)))
    if lam == 0.0:
        return l1
    return l1 + lam * (1.0 - _mean_ssim(p_gt, p_hq, peak))


def _iter_2d(a):
    if a.ndim == 2:
        yield a
    else:
        for sl in a.reshape(-1, a.shape[-2], a.shape[-1]):
            yield sl


def _mean_ssim(a, b, peak):
    vals = [ssim(x, y, peak=peak) for x, y in zip(_iter_2d(a), _iter_2d(b))]
    return float(np.mean(vals))


def loss_res_grad(p_gt, p_hq, lam: float = 0.2, peak: float = 1.0):
    """(loss, d loss / d p_hq) for training."""
    p_gt = np.asarray(p_gt, dtype=float)
    p_hq = np.asarray(p_hq, dtype=float)
    n = p_hq.size
    diff = p_hq - p_gt
    l1 = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / n
    if lam == 0.0:
        return l1, grad
    slices_hq = list(_iter_2d(p_hq))
    slices_gt = list(_iter_2d(p_gt))
    m = len(slices_hq)
    svals = []
    sgrad = np.zeros_like(p_hq).reshape(m, *p_hq.shape[-2:])
    for i, (hq, gt) in enumerate(zip(slices_hq, slices_gt)):
        sv, sg = ssim_with_grad(hq, gt, peak=peak)
        svals.append(sv)
        sgrad[i] = sg
    loss = l1 + lam * (1.0 - float(np.mean(svals)))
    grad = grad - (lam / m) * sgrad.reshape(p_hq.shape)
    return loss, grad


def save_codec(path: str, codec: Codec, extra=None) -> None:
    """Persist all parameters as one f32 blob plus a JSON layout manifest."""
    enc_sd = codec.encoder.state_dict()
    dec_sd = codec.decoder.state_dict()
    names, arrays, layout = [], [], []
    offset = 0
    for prefix, sd in (("encoder.", enc_sd), ("decoder.", dec_sd)):
        for k in sorted(sd):
            a = sd[k]
            names.append(prefix + k)
            arrays.append(a.ravel())
            layout.append({"name": prefix + k, "shape": list(a.shape),
                           "offset": offset})
            offset += a.size
    blob = np.concatenate(arrays) if arrays else np.zeros(0)
    save_array(path, blob, axes=["flat_params"], creator="spectract.codec")
    manifest = {
        "C": codec.C, "r": codec.r, "weight": codec.weight, "lam": codec.lam,
        "in_channels_lq": codec.in_channels_lq,
        "out_channels": codec.out_channels,
        "enc_width": codec.encoder.conv_in.w.value.shape[0],
        "dec_widths": list(codec.decoder.widths),
        "layout": layout,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.splitext(path)[0] + ".manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def load_codec(path: str) -> Codec:
    base = path[:-4] if path.endswith(".f32") else path
    blob, _ = load_array(base + ".f32")
    with open(base + ".manifest.json") as f:
        manifest = json.load(f)
    rng = np.random.default_rng(0)
    codec = Codec.create(
        C=manifest["C"], r=manifest["r"], rng=rng,
        in_channels_lq=manifest["in_channels_lq"],
        out_channels=manifest["out_channels"], weight=manifest["weight"],
        lam=manifest["lam"], enc_width=manifest["enc_width"],
        dec_widths=tuple(manifest["dec_widths"]))
    enc_sd, dec_sd = {}, {}
    for item in manifest["layout"]:
        size = int(np.prod(item["shape"])) if item["shape"] else 1
        a = blob[item["offset"]:item["offset"] + size].reshape(item["shape"])
        if item["name"].startswith("encoder."):
            enc_sd[item["name"][len("encoder."):]] = a
        else:
            dec_sd[item["name"][len("decoder."):]] = a
    codec.encoder.load_state_dict(enc_sd)
    codec.decoder.load_state_dict(dec_sd)
    return codec

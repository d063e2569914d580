"""Two-stage optimization: codec pretraining, conditional latent-diffusion
training, and joint fine-tuning through the sampling chain. Includes the
finite-difference gradient-check harness that gates every training run."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .codec import Codec, FilmResBlock, loss_res_grad
from .denoiser import Denoiser
from .diffusion import NoiseSchedule, reverse_step_coefficients
from .metrics import TrainingDivergence, ssim_with_grad


@dataclass
class TrainingConfig:
    stage: str = "pretrain"           # pretrain | diffusion | finetune
    learning_rate: float = 1e-3
    optimizer: str = "adam"           # adam | sgd
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    lam: float = 0.2                  # SSIM weight in the residual loss
    domain: str = "image"             # projection | image
    C: int = 16                       # latent length is 4*C
    r: int = 4                        # pixel-unshuffle factor
    enc_width: int = 32
    dec_widths: tuple = (8, 12, 16, 24)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class PairedDataset:
    """LQ/GT sample pairs in one domain plus the domain weight scalar."""

    lq: np.ndarray   # (N, C_lq, H, W)
    gt: np.ndarray   # (N, C_gt, H, W)
    weight: float = 1.0

    def __post_init__(self):
        self.lq = np.asarray(self.lq, dtype=float)
        self.gt = np.asarray(self.gt, dtype=float)
        if self.lq.ndim != 4 or self.gt.ndim != 4:
            raise ValueError("datasets are (N, C, H, W)")
        if self.lq.shape[0] != self.gt.shape[0] or self.lq.shape[0] == 0:
            raise ValueError("need a non-empty, aligned set of pairs")
        if self.lq.shape[2:] != self.gt.shape[2:]:
            raise ValueError("all pairs must share one spatial shape")

    def __len__(self):
        return self.lq.shape[0]

    @classmethod
    def from_pairs(cls, pairs):
        """Build from [(lq, gt), ...]; weight maps the GT 99th pct near 1."""
        lq = np.stack([_chw(p[0]) for p in pairs])
        gt = np.stack([_chw(p[1]) for p in pairs])
        p99 = np.percentile(np.abs(gt), 99)
        return cls(lq=lq, gt=gt, weight=1.0 / max(p99, 1e-12))


def _chw(a):
    a = np.asarray(a, dtype=float)
    return a[None] if a.ndim == 2 else a


@dataclass
class DiffusionModel:
    """Denoiser + condition encoder + the latent standardization it assumes."""

    denoiser: Denoiser
    cond_encoder: object
    schedule: NoiseSchedule
    latent_mu: np.ndarray
    latent_sd: np.ndarray


def _make_optimizer(params, config: TrainingConfig):
    if config.optimizer == "adam":
        return nn.Adam(params, lr=config.learning_rate)
    if config.optimizer == "sgd":
        class _SGD:
            def __init__(self, params, lr):
                self.params, self.lr = params, lr

            def step(self):
                for p in self.params:
                    p.value -= self.lr * p.grad
        return _SGD(params, config.learning_rate)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")


def _check_finite(loss, trajectory):
    if not np.isfinite(loss):
        raise TrainingDivergence("training loss became non-finite", trajectory)


def pretrain_codec(dataset: PairedDataset, config: TrainingConfig,
                   codec: Codec | None = None):
    """Joint encoder/decoder pretraining on the residual loss.

    Returns (codec, loss trajectory). Zero epochs returns the (possibly
    freshly initialized) codec unchanged.
    """
    rng = np.random.default_rng(config.seed)
    if codec is None:
        codec = Codec.create(
            C=config.C, r=config.r, rng=rng,
            in_channels_lq=dataset.lq.shape[1],
            out_channels=dataset.gt.shape[1],
            weight=dataset.weight, lam=config.lam,
            enc_width=config.enc_width, dec_widths=config.dec_widths)
    enc, dec = codec.encoder, codec.decoder
    opt = _make_optimizer(enc.params() + dec.params(), config)
    w = codec.weight
    n = len(dataset)
    traj = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            lq = dataset.lq[sel] * w
            gt = dataset.gt[sel] * w
            z, cenc = enc.forward(np.concatenate([gt, lq], axis=1))
            y, cdec = dec.forward(z, lq)
            loss, g = loss_res_grad(gt, y, lam=codec.lam)
            _check_finite(loss, traj)
            enc.zero_grad()
            dec.zero_grad()
            dz, _ = dec.backward(g, cdec)
            enc.backward(dz, cenc)
            opt.step()
            epoch_loss += loss * len(sel)
        traj.append(epoch_loss / n)
    return codec, traj


def encode_dataset(codec: Codec, dataset: PairedDataset,
                   batch: int = 32) -> np.ndarray:
    """Frozen-codec latents Z_0 for every pair."""
    zs = []
    for start in range(0, len(dataset), batch):
        lq = dataset.lq[start:start + batch] * codec.weight
        gt = dataset.gt[start:start + batch] * codec.weight
        z, _ = codec.encoder.forward(np.concatenate([gt, lq], axis=1))
        zs.append(z)
    return np.concatenate(zs, axis=0)


def train_diffusion(dataset: PairedDataset, codec: Codec,
                    schedule: NoiseSchedule, config: TrainingConfig,
                    model: DiffusionModel | None = None):
    """Train the conditional noise predictor on frozen-codec latents.

    The condition encoder lives with the denoiser (not the codec) so the
    codec stays untouched, and both are optimized together. Returns
    (DiffusionModel, loss trajectory).
    """
    rng = np.random.default_rng(config.seed)
    from .codec import Encoder

    z0_all = encode_dataset(codec, dataset)
    if model is None:
        latent_mu = z0_all.mean(axis=0)
        latent_sd = np.maximum(z0_all.std(axis=0), 1e-6)
        den = Denoiser(codec.encoder.latent_dim, rng)
        cond = Encoder(dataset.lq.shape[1], codec.C, codec.r, rng,
                       width=config.enc_width)
        model = DiffusionModel(denoiser=den, cond_encoder=cond,
                               schedule=schedule, latent_mu=latent_mu,
                               latent_sd=latent_sd)
    den, cond = model.denoiser, model.cond_encoder
    z0n_all = (z0_all - model.latent_mu) / model.latent_sd
    opt = _make_optimizer(den.params() + cond.params(), config)
    n = len(dataset)
    traj = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            lq = dataset.lq[sel] * codec.weight
            z0n = z0n_all[sel]
            t = int(rng.integers(1, schedule.T + 1))
            ab = schedule.alpha_bar[t - 1]
            eta = rng.standard_normal(z0n.shape)
            zt = np.sqrt(ab) * z0n + np.sqrt(1.0 - ab) * eta
            B, cB = cond.forward(lq)
            eps, cD = den.forward(zt, t, B)
            loss = float(np.mean(np.abs(eps - eta)))
            _check_finite(loss, traj)
            den.zero_grad()
            cond.zero_grad()
            g = np.sign(eps - eta) / eps.size
            _, dB = den.backward(g, cD)
            cond.backward(dB, cB)
            opt.step()
            epoch_loss += loss * len(sel)
        traj.append(epoch_loss / n)
    return model, traj


def _sample_chain_forward(den: Denoiser, B, schedule, rng):
    """Deterministic reverse chain on a batch; keeps caches for backprop."""
    z = rng.standard_normal((B.shape[0], den.latent_dim))
    steps = []
    for t in range(schedule.T, 0, -1):
        eps, cache = den.forward(z, t, B)
        cz, ce = reverse_step_coefficients(t, schedule)
        z = cz * z + ce * eps
        steps.append((t, cache, cz, ce))
    return z, steps


def _sample_chain_backward(den: Denoiser, dz0, steps):
    """VJP through the reverse chain; returns d condition, accumulates grads."""
    d = dz0
    dB_total = 0.0
    for t, cache, cz, ce in reversed(steps):
        dzt, dB = den.backward(ce * d, cache)
        dB_total = dB_total + dB
        d = cz * d + dzt
    return dB_total


def combined_loss(codec: Codec, model: DiffusionModel, dataset: PairedDataset,
                  seed: int = 0) -> float:
    """Deterministic L_res + L_diff evaluation used for the descent check."""
    rng = np.random.default_rng(seed)
    den, cond, schedule = model.denoiser, model.cond_encoder, model.schedule
    z0n = (encode_dataset(codec, dataset) - model.latent_mu) / model.latent_sd
    total = 0.0
    n = len(dataset)
    for start in range(0, n, 16):
        sel = slice(start, min(start + 16, n))
        lq = dataset.lq[sel] * codec.weight
        gt = dataset.gt[sel] * codec.weight
        B, _ = cond.forward(lq)
        # diffusion term averaged over every step with a frozen noise draw
        ldiff = 0.0
        for t in range(1, schedule.T + 1):
            ab = schedule.alpha_bar[t - 1]
            eta = rng.standard_normal(z0n[sel].shape)
            zt = np.sqrt(ab) * z0n[sel] + np.sqrt(1.0 - ab) * eta
            eps, _ = den.forward(zt, t, B)
            ldiff += float(np.mean(np.abs(eps - eta)))
        ldiff /= schedule.T
        z0_hat, _ = _sample_chain_forward(den, B, schedule, rng)
        y, _ = codec.decoder.forward(z0_hat * model.latent_sd + model.latent_mu, lq)
        lres, _ = loss_res_grad(gt, y, lam=codec.lam)
        total += (lres + ldiff) * lq.shape[0]
    return total / n


def joint_finetune(codec: Codec, model: DiffusionModel,
                   dataset: PairedDataset, config: TrainingConfig):
    """End-to-end fine-tune of decoder + denoiser + condition encoder.

    Sampled latents are fed to the decoder so decoding sees the same
    estimation errors it will face at inference. The pair encoder stays
    frozen (it only defines the latent target). Keeps the best-scoring
    parameters with learning-rate backoff, so the combined training-set
    loss never ends above its starting value. Returns (codec, model,
    trajectory).
    """
    rng = np.random.default_rng(config.seed)
    den, cond, schedule = model.denoiser, model.cond_encoder, model.schedule
    dec = codec.decoder
    params = dec.params() + den.params() + cond.params()
    opt = _make_optimizer(params, config)
    z0n_all = (encode_dataset(codec, dataset) - model.latent_mu) / model.latent_sd

    def snapshot():
        return [p.value.copy() for p in params]

    def restore(snap):
        for p, v in zip(params, snap):
            p.value = v.copy()

    best_loss = combined_loss(codec, model, dataset, seed=config.seed)
    best = snapshot()
    traj = [best_loss]
    n = len(dataset)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            sel = order[start:start + config.batch_size]
            lq = dataset.lq[sel] * codec.weight
            gt = dataset.gt[sel] * codec.weight
            z0n = z0n_all[sel]
            for p in params:
                p.grad[...] = 0.0
            B, cB = cond.forward(lq)
            dB_total = 0.0
            # diffusion branch
            t = int(rng.integers(1, schedule.T + 1))
            ab = schedule.alpha_bar[t - 1]
            eta = rng.standard_normal(z0n.shape)
            zt = np.sqrt(ab) * z0n + np.sqrt(1.0 - ab) * eta
            eps, cD = den.forward(zt, t, B)
            ldiff = float(np.mean(np.abs(eps - eta)))
            _, dB = den.backward(np.sign(eps - eta) / eps.size, cD)
            dB_total = dB_total + dB
            # residual branch through the sampling chain
            z0_hat, steps = _sample_chain_forward(den, B, schedule, rng)
            z0d = z0_hat * model.latent_sd + model.latent_mu
            y, cdec = dec.forward(z0d, lq)
            lres, g = loss_res_grad(gt, y, lam=codec.lam)
            _check_finite(lres + ldiff, traj)
            dz0d, _ = dec.backward(g, cdec)
            dB_total = dB_total + _sample_chain_backward(
                den, dz0d * model.latent_sd, steps)
            cond.backward(dB_total, cB)
            opt.step()
        cur = combined_loss(codec, model, dataset, seed=config.seed)
        traj.append(cur)
        if cur <= best_loss:
            best_loss = cur
            best = snapshot()
        else:
            restore(best)
            if isinstance(opt, nn.Adam):
                opt.lr *= 0.5
    restore(best)
    return codec, model, traj


# ---------------------------------------------------------------------------
# gradient-check harness

def _fd_max_rel_err(loss_fn, params, analytic, rng, n_probe=8, step=1e-5):
    maxrel = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.ravel()
        gflat = g.ravel()
        k = min(n_probe, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        for i in idx:
            h = step * max(1.0, abs(flat[i]))
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            if not np.isfinite(num) or not np.isfinite(gflat[i]):
                raise TrainingDivergence("non-finite gradient during check")
            denom = max(abs(num), abs(gflat[i]), 1e-8)
            maxrel = max(maxrel, abs(num - gflat[i]) / denom)
    return maxrel


def grad_check(component: str, seed: int = 0) -> float:
    """Compare analytic gradients to central finite differences.

    Probes a <=16x16 toy instance of the named component and returns the
    max relative error over sampled coordinates.
    """
    rng = np.random.default_rng(seed)
    if component == "linear":
        layer = nn.Linear(6, 4, rng)
        x = rng.standard_normal((3, 6))
        R = rng.standard_normal((3, 4))

        def loss():
            y, _ = layer.forward(x)
            return float(np.sum(y * R))

        layer.zero_grad()
        _, c = layer.forward(x)
        layer.backward(R, c)
        return _fd_max_rel_err(loss, layer.params(),
                               [p.grad for p in layer.params()], rng,
                               n_probe=24, step=1e-6)
    if component == "conv":
        layer = nn.Conv2d(3, 4, rng)
        x = rng.standard_normal((2, 3, 8, 8))
        R = rng.standard_normal((2, 4, 8, 8))

        def loss():
            y, _ = layer.forward(x)
            return float(np.sum(y * R))

        layer.zero_grad()
        _, c = layer.forward(x)
        layer.backward(R, c)
        return _fd_max_rel_err(loss, layer.params(),
                               [p.grad for p in layer.params()], rng)
    if component == "film":
        blk = FilmResBlock(4, 8, rng)
        x = rng.standard_normal((2, 4, 8, 8))
        z = rng.standard_normal((2, 8))
        R = rng.standard_normal((2, 4, 8, 8))

        def loss():
            y, _ = blk.forward(x, z)
            return float(np.sum(y * R))

        blk.zero_grad()
        _, c = blk.forward(x, z)
        blk.backward(R, c)
        return _fd_max_rel_err(loss, blk.params(),
                               [p.grad for p in blk.params()], rng)
    if component == "ssim":
        x = rng.standard_normal((16, 16))
        y = x + 0.1 * rng.standard_normal((16, 16))
        _, g = ssim_with_grad(x, y)

        def loss():
            from .metrics import ssim as _s
            return _s(x, y)

        maxrel = 0.0
        flat = x.ravel()
        for i in rng.choice(flat.size, size=12, replace=False):
            h = 1e-5
            orig = flat[i]
            flat[i] = orig + h
            fp = loss()
            flat[i] = orig - h
            fm = loss()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            maxrel = max(maxrel, abs(num - g.ravel()[i])
                         / max(abs(num), abs(g.ravel()[i]), 1e-8))
        return maxrel
    if component in ("decoder", "l1"):
        codec = Codec.create(C=4, r=4, rng=rng, dec_widths=(4, 6, 8, 10))
        dec = codec.decoder
        z = rng.standard_normal((1, 16))
        lq = rng.standard_normal((1, 1, 16, 16))
        gt = lq + 0.3 * rng.standard_normal((1, 1, 16, 16))
        lam = 0.0 if component == "l1" else 0.2

        def loss():
            y, _ = dec.forward(z, lq)
            # documented subgradient exclusion near the L1 kink
            d = y - gt
            d = np.where(np.abs(d) < 1e-6, 0.0, d)
            l1 = float(np.mean(np.abs(d)))
            if lam == 0.0:
                return l1
            from .metrics import ssim as _s
            return l1 + lam * (1.0 - _s(gt[0, 0], y[0, 0]))

        dec.zero_grad()
        y, c = dec.forward(z, lq)
        _, g = loss_res_grad(gt, y, lam=lam)
        dec.backward(g, c)
        return _fd_max_rel_err(loss, dec.params(),
                               [p.grad for p in dec.params()], rng, n_probe=3)
    if component == "encoder":
        from .codec import Encoder
        enc = Encoder(2, 4, 4, rng, width=8, n_blocks=1)
        x = rng.standard_normal((1, 2, 16, 16))
        R = rng.standard_normal((1, 16))

        def loss():
            zz, _ = enc.forward(x)
            return float(np.sum(zz * R))

        enc.zero_grad()
        _, c = enc.forward(x)
        enc.backward(R, c)
        return _fd_max_rel_err(loss, enc.params(),
                               [p.grad for p in enc.params()], rng, n_probe=4)
    if component == "denoiser":
        den = Denoiser(16, rng)
        zt = rng.standard_normal((2, 16))
        cond = rng.standard_normal((2, 16))
        R = rng.standard_normal((2, 16))

        def loss():
            e, _ = den.forward(zt, 2, cond)
            return float(np.sum(e * R))

        den.zero_grad()
        _, c = den.forward(zt, 2, cond)
        den.backward(R, c)
        return _fd_max_rel_err(loss, den.params(),
                               [p.grad for p in den.params()], rng, n_probe=4)
    raise ValueError(f"unknown component {component!r}")


GRAD_CHECK_COMPONENTS = ("linear", "conv", "film", "ssim", "encoder",
                         "decoder", "denoiser")

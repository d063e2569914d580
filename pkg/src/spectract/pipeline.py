"""Dual-domain reconstruction pipeline and its ablation variants.

Variants:
  I    image-domain restoration of the per-bin FBP only
  P    projection-domain restoration followed by FBP only
  IP   projection stage, FBP, then image stage (no fused channel)
  FSP  full pipeline with the fused full-spectrum channel in both domains
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .codec import Codec, Encoder, decode, encode_condition, load_codec, save_codec
from .denoiser import load_denoiser, save_denoiser
from .diffusion import NoiseSchedule, make_schedule, sample_latent
from .geometry import (FanBeamGeometry, ImageGrid, TOY_GEOMETRY, TOY_GRID,
                       fbp_reconstruct)
from .metrics import MetricReport, psnr, ssim, IDENTICAL
from .phantoms import make_phantom
from .spectral import (AttenuationTable, EnergyBinSet, EnergySpectrum,
                       PHOTON_FLUX_PRESETS, SinogramStack, fuse_full_spectrum,
                       noisy_stack, polychromatic_sinogram)
from .training import (DiffusionModel, PairedDataset, TrainingConfig,
                       joint_finetune, pretrain_codec, train_diffusion)

VARIANTS = ("I", "P", "IP", "FSP")


@dataclass
class SliceSample:
    """One simulated slice: density maps, clean and noisy measurements, GT."""

    material_maps: dict
    clean: SinogramStack
    noisy: SinogramStack
    gt_images: np.ndarray     # (bins, H, W) FBP of the noiseless projections
    seed: int = 0


@dataclass
class ImageStack:
    """Per-bin reconstructions plus the intermediates the pipeline produced."""

    x0: np.ndarray                       # (bins, H, W) final output
    x_fbp: np.ndarray                    # (bins, H, W) plain FBP of noisy data
    x_fused: np.ndarray | None = None    # (H, W) FBP of the fused projection
    y_restored: np.ndarray | None = None  # (bins, views, dets) after stage 1

    @property
    def n_bins(self) -> int:
        return self.x0.shape[0]


@dataclass
class PipelineBundle:
    """Everything needed to run one variant of the reconstruction."""

    variant: str
    geom: FanBeamGeometry
    grid: ImageGrid
    proj_codec: Codec | None = None
    proj_model: DiffusionModel | None = None
    img_codec: Codec | None = None
    img_model: DiffusionModel | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")


def proj_condition_channels(variant: str) -> int:
    """Projection-stage conditioning width; 0 means the stage is skipped."""
    if variant == "I":
        return 0
    return 2 if variant == "FSP" else 1


def image_condition_channels(variant: str) -> int:
    """Image-stage conditioning width; 0 means the stage is skipped."""
    return {"I": 1, "P": 0, "IP": 2, "FSP": 3}[variant]


def simulate_slice(seed: int, geom: FanBeamGeometry = TOY_GEOMETRY,
                   grid: ImageGrid = TOY_GRID,
                   photons: float = PHOTON_FLUX_PRESETS[0],
                   bins: EnergyBinSet | None = None,
                   spectrum: EnergySpectrum | None = None,
                   table: AttenuationTable | None = None) -> SliceSample:
    """Random phantom, clean polychromatic sinograms, one Poisson realization."""
    bins = bins or EnergyBinSet.bundled6()
    spectrum = spectrum or EnergySpectrum.bundled()
    table = table or AttenuationTable.bundled()
    maps = make_phantom(grid, seed)
    clean = polychromatic_sinogram(maps, spectrum, bins, geom, grid, table,
                                   photons)
    noisy = noisy_stack(clean, seed + 900001)
    gt = np.stack([fbp_reconstruct(clean.y[b], geom, grid)
                   for b in range(clean.n_bins)])
    return SliceSample(material_maps=maps, clean=clean, noisy=noisy,
                       gt_images=gt, seed=seed)


def _restore(lq_channels: np.ndarray, codec: Codec, model: DiffusionModel,
             seed: int) -> np.ndarray:
    """Condition, sample a latent through the reverse chain, decode."""
    B = encode_condition(lq_channels, codec.weight, model.cond_encoder)
    zn = sample_latent(model.denoiser.as_callable(), B, model.schedule, seed)
    z = zn * model.latent_sd + model.latent_mu
    return decode(z, lq_channels, codec)


def projection_stage(noisy: SinogramStack, bundle: PipelineBundle,
                     seed: int, y_fused: np.ndarray | None = None) -> np.ndarray:
    """Per-bin projection restoration; returns (bins, views, dets)."""
    nch = proj_condition_channels(bundle.variant)
    if nch == 0:
        raise ValueError("variant I has no projection stage")
    if bundle.proj_codec is None or bundle.proj_model is None:
        raise ValueError("bundle is missing its projection stage "
                         "(proj_codec/proj_model)")
    out = np.empty_like(noisy.y)
    # one seed for every bin: bins are processed independently, so permuting
    # the bin order permutes the outputs identically
    for b in range(noisy.n_bins):
        chans = [noisy.y[b]]
        if nch == 2:
            if y_fused is None:
                raise ValueError("fused projection required for this variant")
            chans.append(y_fused)
        out[b] = _restore(np.stack(chans), bundle.proj_codec,
                          bundle.proj_model, seed)
    return out


def build_image_condition(variant: str, x_fbp_bin: np.ndarray,
                          x_fused: np.ndarray | None,
                          x_stage1_bin: np.ndarray | None) -> np.ndarray:
    """Stack the image-stage conditioning channels in their pinned order:
    noisy FBP, fused FBP, stage-1 FBP."""
    chans = [x_fbp_bin]
    if variant == "FSP":
        chans.append(x_fused)
    if variant in ("IP", "FSP"):
        chans.append(x_stage1_bin)
    if any(c is None for c in chans):
        raise ValueError(f"missing conditioning channel for variant {variant}")
    return np.stack(chans)


def reconstruct_full(noisy: SinogramStack, bundle: PipelineBundle,
                     seed: int) -> ImageStack:
    """Run the variant end to end on one noisy measurement stack."""
    geom, grid, variant = bundle.geom, bundle.grid, bundle.variant
    x_fbp = np.stack([fbp_reconstruct(noisy.y[b], geom, grid)
                      for b in range(noisy.n_bins)])
    y_fused = x_fused = None
    if variant == "FSP":
        y_fused = fuse_full_spectrum(noisy.y)
        x_fused = fbp_reconstruct(y_fused, geom, grid)
    y_restored = x_stage1 = None
    if variant != "I":
        y_restored = projection_stage(noisy, bundle, seed, y_fused=y_fused)
        x_stage1 = np.stack([fbp_reconstruct(y_restored[b], geom, grid)
                             for b in range(noisy.n_bins)])
    if variant == "P":
        x0 = x_stage1
    else:
        if bundle.img_codec is None or bundle.img_model is None:
            raise ValueError("bundle is missing its image stage "
                             "(img_codec/img_model)")
        x0 = np.empty_like(x_fbp)
        for b in range(noisy.n_bins):
            cond = build_image_condition(
                variant, x_fbp[b], x_fused,
                None if x_stage1 is None else x_stage1[b])
            x0[b] = _restore(cond, bundle.img_codec, bundle.img_model,
                             seed + 104729)
    return ImageStack(x0=x0, x_fbp=x_fbp, x_fused=x_fused,
                      y_restored=y_restored)


# ---------------------------------------------------------------------------
# training data assembly and bundle training

def build_projection_dataset(slices, variant: str) -> PairedDataset:
    """(noisy [, fused]) -> clean projection pairs over every slice and bin."""
    nch = proj_condition_channels(variant)
    if nch == 0:
        raise ValueError("variant I has no projection stage")
    pairs = []
    for s in slices:
        fused = fuse_full_spectrum(s.noisy.y) if nch == 2 else None
        for b in range(s.noisy.n_bins):
            chans = [s.noisy.y[b]] + ([fused] if nch == 2 else [])
            pairs.append((np.stack(chans), s.clean.y[b][None]))
    return PairedDataset.from_pairs(pairs)


def build_image_dataset(slices, variant: str, bundle: PipelineBundle,
                        seed: int) -> PairedDataset:
    """Conditioning channels -> GT image pairs; runs stage 1 where needed."""
    if image_condition_channels(variant) == 0:
        raise ValueError("variant P has no image stage")
    geom, grid = bundle.geom, bundle.grid
    pairs = []
    for i, s in enumerate(slices):
        y_fused = x_fused = None
        if variant == "FSP":
            y_fused = fuse_full_spectrum(s.noisy.y)
            x_fused = fbp_reconstruct(y_fused, geom, grid)
        x_stage1 = None
        if variant != "I":
            y_r = projection_stage(s.noisy, bundle, seed + 6007 * i,
                                   y_fused=y_fused)
            x_stage1 = np.stack([fbp_reconstruct(y_r[b], geom, grid)
                                 for b in range(s.noisy.n_bins)])
        for b in range(s.noisy.n_bins):
            x_fbp = fbp_reconstruct(s.noisy.y[b], geom, grid)
            cond = build_image_condition(
                variant, x_fbp, x_fused,
                None if x_stage1 is None else x_stage1[b])
            pairs.append((cond, s.gt_images[b][None]))
    return PairedDataset.from_pairs(pairs)


@dataclass
class PipelineTrainConfig:
    """Per-stage training knobs with toy-scale defaults."""

    seed: int = 0
    C: int = 16
    r: int = 4
    enc_width: int = 32
    dec_widths: tuple = (8, 12, 16, 24)
    pretrain_epochs: int = 40
    diffusion_epochs: int = 120
    finetune_epochs: int = 4
    pretrain_lr: float = 2e-3
    diffusion_lr: float = 2e-3
    finetune_lr: float = 2e-4
    batch_size: int = 8
    schedule_T: int = 4


def _train_domain(dataset: PairedDataset, cfg: PipelineTrainConfig,
                  schedule: NoiseSchedule, seed: int, domain: str):
    codec, _ = pretrain_codec(dataset, TrainingConfig(
        stage="pretrain", epochs=cfg.pretrain_epochs, seed=seed,
        learning_rate=cfg.pretrain_lr, batch_size=cfg.batch_size, C=cfg.C,
        r=cfg.r, enc_width=cfg.enc_width, dec_widths=cfg.dec_widths,
        domain=domain))
    model, _ = train_diffusion(dataset, codec, schedule, TrainingConfig(
        stage="diffusion", epochs=cfg.diffusion_epochs, seed=seed + 1,
        learning_rate=cfg.diffusion_lr, batch_size=cfg.batch_size, C=cfg.C,
        r=cfg.r, enc_width=cfg.enc_width, domain=domain))
    if cfg.finetune_epochs > 0:
        codec, model, _ = joint_finetune(codec, model, dataset, TrainingConfig(
            stage="finetune", epochs=cfg.finetune_epochs, seed=seed + 2,
            learning_rate=cfg.finetune_lr, batch_size=cfg.batch_size,
            domain=domain))
    return codec, model


def train_pipeline(train_slices, variant: str,
                   cfg: PipelineTrainConfig | None = None,
                   geom: FanBeamGeometry = TOY_GEOMETRY,
                   grid: ImageGrid = TOY_GRID,
                   schedule: NoiseSchedule | None = None) -> PipelineBundle:
    """Train every stage the variant needs, in dependency order."""
    cfg = cfg or PipelineTrainConfig()
    schedule = schedule or make_schedule(T=cfg.schedule_T)
    bundle = PipelineBundle(variant=variant, geom=geom, grid=grid)
    if proj_condition_channels(variant):
        ds_p = build_projection_dataset(train_slices, variant)
        bundle.proj_codec, bundle.proj_model = _train_domain(
            ds_p, cfg, schedule, cfg.seed, "projection")
    if image_condition_channels(variant):
        ds_i = build_image_dataset(train_slices, variant, bundle,
                                   seed=cfg.seed + 77)
        bundle.img_codec, bundle.img_model = _train_domain(
            ds_i, cfg, schedule, cfg.seed + 1000, "image")
    return bundle


# ---------------------------------------------------------------------------
# evaluation

def evaluate_images(x0: np.ndarray, gt: np.ndarray, label: str = "",
                    peak: float | None = None) -> MetricReport:
    """Per-bin PSNR/SSIM of a reconstruction stack against ground truth."""
    report = MetricReport(label=label)
    pk = peak if peak is not None else max(float(np.max(gt)), 1e-12)
    for b in range(x0.shape[0]):
        report.add(psnr(x0[b], gt[b], peak=pk), ssim(x0[b], gt[b], peak=pk))
    return report


def ablate(variant: str, bundle: PipelineBundle, test_slices,
           seed: int = 0) -> MetricReport:
    """Run one variant over held-out slices; one report row per slice-bin."""
    if bundle.variant != variant:
        raise ValueError(
            f"bundle was trained for {bundle.variant!r}, not {variant!r}")
    report = MetricReport(label=variant)
    for i, s in enumerate(test_slices):
        rec = reconstruct_full(s.noisy, bundle, seed=seed + 15013 * i)
        part = evaluate_images(rec.x0, s.gt_images)
        for p, v in zip(part.psnr_db, part.ssim):
            report.add(p, v)
    return report


def sweep_T(train_slices, test_slices, t_values, variant: str = "FSP",
            cfg: PipelineTrainConfig | None = None,
            geom: FanBeamGeometry = TOY_GEOMETRY,
            grid: ImageGrid = TOY_GRID, seed: int = 0) -> dict:
    """Retrain the diffusion stage for each step count and evaluate.

    Codecs are pretrained once and shared across all step counts, and every
    step count gets a constant-beta schedule with the same terminal
    alpha_bar as the default schedule, so the sweep isolates the effect of
    T. (Reusing one beta range across step counts would leave T=1 barely
    noised and make long reverse chains amplify prediction error without
    bound.) Returns {T: report summary}.
    """
    cfg = replace(cfg or PipelineTrainConfig(), finetune_epochs=0)
    ab_T = float(np.prod(1.0 - make_schedule(T=cfg.schedule_T).beta))
    base = train_pipeline(train_slices, variant, cfg, geom=geom, grid=grid)
    ds_p = (build_projection_dataset(train_slices, variant)
            if base.proj_codec is not None else None)
    ds_i = (build_image_dataset(train_slices, variant, base, seed=cfg.seed + 77)
            if base.img_codec is not None else None)
    results = {}
    for T in t_values:
        sched = NoiseSchedule(np.full(int(T), 1.0 - ab_T ** (1.0 / int(T))))
        b = PipelineBundle(variant=variant, geom=geom, grid=grid,
                           proj_codec=base.proj_codec,
                           img_codec=base.img_codec)
        dcfg = TrainingConfig(stage="diffusion", epochs=cfg.diffusion_epochs,
                              seed=cfg.seed + 1, learning_rate=cfg.diffusion_lr,
                              batch_size=cfg.batch_size, C=cfg.C, r=cfg.r,
                              enc_width=cfg.enc_width)
        if ds_p is not None:
            b.proj_model, _ = train_diffusion(ds_p, base.proj_codec, sched, dcfg)
        if ds_i is not None:
            b.img_model, _ = train_diffusion(ds_i, base.img_codec, sched, dcfg)
        rep = ablate(variant, b, test_slices, seed=seed)
        results[int(T)] = rep.summary()
    return results


# ---------------------------------------------------------------------------
# persistence

def _save_domain(out_dir: str, name: str, codec: Codec, model: DiffusionModel):
    save_codec(os.path.join(out_dir, f"{name}_codec.f32"), codec)
    cond = model.cond_encoder
    save_denoiser(
        os.path.join(out_dir, f"{name}_denoiser.f32"), model.denoiser,
        cond_encoder=cond,
        extra={
            "schedule_beta": model.schedule.beta.tolist(),
            "latent_mu": model.latent_mu.tolist(),
            "latent_sd": model.latent_sd.tolist(),
            "cond_encoder_args": {
                "in_channels": cond.conv_in.w.value.shape[1] // (cond.r ** 2),
                "C": cond.latent_dim // 4,
                "r": cond.r,
                "width": cond.conv_in.w.value.shape[0],
                "n_blocks": len(cond.blocks),
            },
        })


def _load_domain(out_dir: str, name: str):
    codec = load_codec(os.path.join(out_dir, f"{name}_codec.f32"))
    den, cond_sd, manifest = load_denoiser(
        os.path.join(out_dir, f"{name}_denoiser.f32"))
    args = manifest["cond_encoder_args"]
    cond = Encoder(args["in_channels"], args["C"], args["r"],
                   np.random.default_rng(0), width=args["width"],
                   n_blocks=args["n_blocks"])
    cond.load_state_dict(cond_sd)
    model = DiffusionModel(
        denoiser=den, cond_encoder=cond,
        schedule=NoiseSchedule(np.asarray(manifest["schedule_beta"])),
        latent_mu=np.asarray(manifest["latent_mu"]),
        latent_sd=np.asarray(manifest["latent_sd"]))
    return codec, model


def save_bundle(out_dir: str, bundle: PipelineBundle) -> None:
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "variant": bundle.variant,
        "geometry": json.loads(bundle.geom.to_json()),
        "grid": json.loads(bundle.grid.to_json()),
        "stages": [],
    }
    if bundle.proj_codec is not None:
        _save_domain(out_dir, "projection", bundle.proj_codec,
                     bundle.proj_model)
        meta["stages"].append("projection")
    if bundle.img_codec is not None:
        _save_domain(out_dir, "image", bundle.img_codec, bundle.img_model)
        meta["stages"].append("image")
    with open(os.path.join(out_dir, "bundle.json"), "w") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")


def load_bundle(out_dir: str) -> PipelineBundle:
    with open(os.path.join(out_dir, "bundle.json")) as f:
        meta = json.load(f)
    bundle = PipelineBundle(
        variant=meta["variant"],
        geom=FanBeamGeometry.from_json(json.dumps(meta["geometry"])),
        grid=ImageGrid.from_json(json.dumps(meta["grid"])))
    if "projection" in meta["stages"]:
        bundle.proj_codec, bundle.proj_model = _load_domain(out_dir,
                                                            "projection")
    if "image" in meta["stages"]:
        bundle.img_codec, bundle.img_model = _load_domain(out_dir, "image")
    return bundle

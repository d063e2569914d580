"""Command-line front end.

Every command that produces artifacts writes a manifest.json recording the
argv, seeds and git state, so any run can be reproduced with `rerun`.
Exit codes: 0 ok, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .arrayio import load_array, read_manifest, save_array, write_manifest
from .diffusion import make_schedule
from .geometry import (FanBeamGeometry, ImageGrid, FULL_SCALE_GEOMETRY,
                       TOY_GEOMETRY, TOY_GRID, fbp_reconstruct, set_thread_cap)
from .metrics import IDENTICAL, MetricReport, psnr, ssim, tv_reconstruct
from .pipeline import (PipelineBundle, PipelineTrainConfig, SliceSample,
                       VARIANTS, ablate, build_image_dataset,
                       build_projection_dataset, image_condition_channels,
                       load_bundle, proj_condition_channels, reconstruct_full,
                       save_bundle, simulate_slice, sweep_T, train_pipeline)
from .render import plot_lines, render_image, render_residual
from .spectral import PHOTON_FLUX_PRESETS, SinogramStack, fuse_full_spectrum
from .training import (TrainingConfig, grad_check, joint_finetune,
                       pretrain_codec, train_diffusion, GRAD_CHECK_COMPONENTS)


class UsageError(ValueError):
    pass


def _geometry(name: str):
    if name == "toy":
        return TOY_GEOMETRY, TOY_GRID
    if name == "full":
        return FULL_SCALE_GEOMETRY, ImageGrid(n_rows=512, n_cols=512,
                                              pixel_size_mm=0.75)
    raise UsageError(f"unknown geometry preset {name!r}")


# ---------------------------------------------------------------------------
# dataset directory layout

def save_dataset(out_dir: str, slices, geom, grid, meta: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    meta = dict(meta)
    meta["n_slices"] = len(slices)
    meta["geometry"] = json.loads(geom.to_json())
    meta["grid"] = json.loads(grid.to_json())
    with open(os.path.join(out_dir, "dataset.json"), "w") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")
    for i, s in enumerate(slices):
        d = os.path.join(out_dir, f"slice_{i:03d}")
        os.makedirs(d, exist_ok=True)
        save_array(os.path.join(d, "clean_y.f32"), s.clean.y,
                   axes=["bin", "view", "detector"], seed=s.seed)
        save_array(os.path.join(d, "noisy_y.f32"), s.noisy.y,
                   axes=["bin", "view", "detector"], seed=s.seed)
        save_array(os.path.join(d, "flat_counts.f32"), s.clean.flat_counts,
                   axes=["bin"])
        save_array(os.path.join(d, "gt_images.f32"), s.gt_images,
                   axes=["bin", "row", "col"], units="1/cm")


def load_dataset(data_dir: str):
    with open(os.path.join(data_dir, "dataset.json")) as f:
        meta = json.load(f)
    geom = FanBeamGeometry.from_json(json.dumps(meta["geometry"]))
    grid = ImageGrid.from_json(json.dumps(meta["grid"]))
    slices = []
    for i in range(meta["n_slices"]):
        d = os.path.join(data_dir, f"slice_{i:03d}")
        clean_y, _ = load_array(os.path.join(d, "clean_y.f32"))
        noisy_y, _ = load_array(os.path.join(d, "noisy_y.f32"))
        flat, _ = load_array(os.path.join(d, "flat_counts.f32"))
        gt, _ = load_array(os.path.join(d, "gt_images.f32"))
        slices.append(SliceSample(
            material_maps={},
            clean=SinogramStack(y=clean_y, flat_counts=flat),
            noisy=SinogramStack(y=noisy_y, flat_counts=flat),
            gt_images=gt, seed=i))
    return slices, geom, grid, meta


def _cfg_from_args(args) -> PipelineTrainConfig:
    return PipelineTrainConfig(
        seed=args.seed, C=args.latent_c, enc_width=args.enc_width,
        pretrain_epochs=args.pretrain_epochs,
        diffusion_epochs=args.diffusion_epochs,
        finetune_epochs=args.finetune_epochs,
        batch_size=args.batch_size, schedule_T=args.steps)


def _add_train_opts(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--latent-c", type=int, default=16)
    p.add_argument("--enc-width", type=int, default=32)
    p.add_argument("--pretrain-epochs", type=int, default=40)
    p.add_argument("--diffusion-epochs", type=int, default=120)
    p.add_argument("--finetune-epochs", type=int, default=4)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--steps", type=int, default=4,
                   help="diffusion step count T")


def _refresh_bundle_meta(workdir: str, variant: str, geom, grid):
    stages = []
    for name in ("projection", "image"):
        if all(os.path.exists(os.path.join(workdir, f"{name}_{part}.f32"))
               for part in ("codec", "denoiser")):
            stages.append(name)
    meta = {"variant": variant, "geometry": json.loads(geom.to_json()),
            "grid": json.loads(grid.to_json()), "stages": stages}
    with open(os.path.join(workdir, "bundle.json"), "w") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")


def _domain_dataset(args, slices, workdir, geom, grid):
    """Training pairs for one domain; the image domain may need stage 1."""
    if args.domain == "projection":
        if proj_condition_channels(args.variant) == 0:
            raise UsageError("variant I has no projection stage")
        return build_projection_dataset(slices, args.variant)
    if image_condition_channels(args.variant) == 0:
        raise UsageError("variant P has no image stage")
    bundle = PipelineBundle(variant=args.variant, geom=geom, grid=grid)
    if args.variant in ("IP", "FSP"):
        full = load_bundle(workdir)  # projection stage must exist already
        if full.proj_codec is None:
            raise UsageError("train the projection stage first")
        bundle.proj_codec = full.proj_codec
        bundle.proj_model = full.proj_model
    return build_image_dataset(slices, args.variant, bundle, seed=args.seed)


# ---------------------------------------------------------------------------
# subcommand implementations

def cmd_simulate(args):
    geom, grid = _geometry(args.geometry)
    slices = [simulate_slice(args.seed + i, geom, grid, photons=args.photons)
              for i in range(args.n_slices)]
    save_dataset(args.out, slices, geom, grid,
                 {"seed": args.seed, "photons": args.photons,
                  "geometry_preset": args.geometry})
    write_manifest(args.out, args._argv, seeds={"base": args.seed})
    print(f"wrote {args.n_slices} slices to {args.out}")
    return 0


def cmd_pretrain_codec(args):
    slices, geom, grid, _ = load_dataset(args.data)
    os.makedirs(args.workdir, exist_ok=True)
    ds = _domain_dataset(args, slices, args.workdir, geom, grid)
    cfg = TrainingConfig(stage="pretrain", epochs=args.pretrain_epochs,
                         seed=args.seed, batch_size=args.batch_size,
                         C=args.latent_c, enc_width=args.enc_width,
                         learning_rate=2e-3, domain=args.domain)
    codec, traj = pretrain_codec(ds, cfg)
    from .codec import save_codec
    save_codec(os.path.join(args.workdir, f"{args.domain}_codec.f32"), codec)
    plot_lines(os.path.join(args.workdir, f"{args.domain}_pretrain_loss.png"),
               {"loss": traj}, title=f"{args.domain} codec pretraining")
    _refresh_bundle_meta(args.workdir, args.variant, geom, grid)
    write_manifest(args.workdir, args._argv, seeds={"train": args.seed})
    print(f"{args.domain} codec: final loss {traj[-1]:.6f}" if traj
          else f"{args.domain} codec: initialized (0 epochs)")
    return 0


def cmd_train_diffusion(args):
    slices, geom, grid, _ = load_dataset(args.data)
    from .codec import load_codec
    codec = load_codec(os.path.join(args.workdir, f"{args.domain}_codec.f32"))
    ds = _domain_dataset(args, slices, args.workdir, geom, grid)
    sched = make_schedule(T=args.steps)
    cfg = TrainingConfig(stage="diffusion", epochs=args.diffusion_epochs,
                         seed=args.seed + 1, batch_size=args.batch_size,
                         C=codec.C, enc_width=args.enc_width,
                         learning_rate=2e-3, domain=args.domain)
    model, traj = train_diffusion(ds, codec, sched, cfg)
    from .pipeline import _save_domain
    _save_domain(args.workdir, args.domain, codec, model)
    plot_lines(os.path.join(args.workdir, f"{args.domain}_diffusion_loss.png"),
               {"loss": traj}, title=f"{args.domain} diffusion training")
    _refresh_bundle_meta(args.workdir, args.variant, geom, grid)
    write_manifest(args.workdir, args._argv, seeds={"train": args.seed})
    print(f"{args.domain} diffusion: final loss {traj[-1]:.6f}")
    return 0


def cmd_finetune(args):
    slices, geom, grid, _ = load_dataset(args.data)
    from .pipeline import _load_domain, _save_domain
    codec, model = _load_domain(args.workdir, args.domain)
    ds = _domain_dataset(args, slices, args.workdir, geom, grid)
    cfg = TrainingConfig(stage="finetune", epochs=args.finetune_epochs,
                         seed=args.seed + 2, batch_size=args.batch_size,
                         learning_rate=2e-4, domain=args.domain)
    codec, model, traj = joint_finetune(codec, model, ds, cfg)
    from .codec import save_codec
    save_codec(os.path.join(args.workdir, f"{args.domain}_codec.f32"), codec)
    _save_domain(args.workdir, args.domain, codec, model)
    plot_lines(os.path.join(args.workdir, f"{args.domain}_finetune_loss.png"),
               {"combined": traj}, title=f"{args.domain} joint fine-tune")
    _refresh_bundle_meta(args.workdir, args.variant, geom, grid)
    write_manifest(args.workdir, args._argv, seeds={"train": args.seed})
    print(f"{args.domain} finetune: combined loss "
          f"{traj[0]:.6f} -> {traj[-1]:.6f}")
    return 0


def cmd_train(args):
    """Convenience: all stages for one variant in one call."""
    slices, geom, grid, _ = load_dataset(args.data)
    bundle = train_pipeline(slices, args.variant, _cfg_from_args(args),
                            geom=geom, grid=grid)
    save_bundle(args.workdir, bundle)
    write_manifest(args.workdir, args._argv, seeds={"train": args.seed})
    print(f"trained {args.variant} bundle -> {args.workdir}")
    return 0


def cmd_reconstruct(args):
    slices, _, _, _ = load_dataset(args.data)
    if not 0 <= args.slice < len(slices):
        raise UsageError(f"slice index {args.slice} out of range")
    bundle = load_bundle(args.workdir)
    rec = reconstruct_full(slices[args.slice].noisy, bundle, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_array(os.path.join(args.out, "x0.f32"), rec.x0,
               axes=["bin", "row", "col"], seed=args.seed)
    save_array(os.path.join(args.out, "x_fbp.f32"), rec.x_fbp,
               axes=["bin", "row", "col"])
    if rec.x_fused is not None:
        save_array(os.path.join(args.out, "x_fused.f32"), rec.x_fused,
                   axes=["row", "col"])
    if rec.y_restored is not None:
        save_array(os.path.join(args.out, "y_restored.f32"), rec.y_restored,
                   axes=["bin", "view", "detector"])
    write_manifest(args.out, args._argv, seeds={"sample": args.seed})
    print(f"reconstruction -> {args.out}")
    return 0


def cmd_fuse(args):
    y, meta = load_array(args.input)
    if y.ndim != 3:
        raise UsageError("expected a (bins, views, detectors) array")
    fused = fuse_full_spectrum(y)
    save_array(args.out, fused, axes=meta.get("axes", [None])[1:] or None)
    print(f"fused {y.shape[0]} bins -> {args.out}")
    return 0


def cmd_evaluate(args):
    recon, _ = load_array(args.recon)
    ref, _ = load_array(args.ref)
    if recon.shape != ref.shape:
        raise UsageError("reconstruction and reference shapes differ")
    if recon.ndim == 2:
        recon, ref = recon[None], ref[None]
    peak = args.peak if args.peak is not None else float(np.max(ref))
    report = MetricReport(label=args.label)
    for b in range(recon.shape[0]):
        report.add(psnr(recon[b], ref[b], peak=peak),
                   ssim(recon[b], ref[b], peak=peak))
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as f:
            if args.out.endswith(".csv"):
                f.write(report.to_csv())
            else:
                f.write(report.to_json() + "\n")
    print(json.dumps(report.summary()))
    return 0


def cmd_ablate(args):
    slices, geom, grid, _ = load_dataset(args.data)
    n_test = args.test_slices
    if n_test >= len(slices):
        raise UsageError("need at least one training slice")
    train, test = slices[:-n_test], slices[-n_test:]
    cfg = _cfg_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    results = {}
    for variant in args.variants:
        bundle = train_pipeline(train, variant, cfg, geom=geom, grid=grid)
        rep = ablate(variant, bundle, test, seed=args.seed + 31)
        results[variant] = rep.summary()
        with open(os.path.join(args.out, f"report_{variant}.json"), "w") as f:
            f.write(rep.to_json() + "\n")
    with open(os.path.join(args.out, "ablation_summary.json"), "w") as f:
        json.dump(results, f, indent=2)
        f.write("\n")
    write_manifest(args.out, args._argv, seeds={"train": args.seed})
    for v, s in results.items():
        print(f"{v:4s} psnr={s['psnr_mean']:.3f} ssim={s['ssim_mean']:.4f}")
    return 0


def cmd_sweep_t(args):
    slices, geom, grid, _ = load_dataset(args.data)
    n_test = args.test_slices
    if n_test >= len(slices):
        raise UsageError("need at least one training slice")
    results = sweep_T(slices[:-n_test], slices[-n_test:], args.t_values,
                      variant=args.variant, cfg=_cfg_from_args(args),
                      geom=geom, grid=grid, seed=args.seed + 31)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "sweep_t.json"), "w") as f:
        json.dump(results, f, indent=2)
        f.write("\n")
    plot_lines(os.path.join(args.out, "sweep_t.png"),
               {"psnr": [results[int(t)]["psnr_mean"] for t in args.t_values]},
               title="PSNR vs diffusion step count")
    write_manifest(args.out, args._argv, seeds={"train": args.seed})
    for t in args.t_values:
        print(f"T={t}: psnr={results[int(t)]['psnr_mean']:.3f}")
    return 0


def cmd_render(args):
    arr, _ = load_array(args.input)
    if arr.ndim == 3:
        arr = arr[args.index]
    elif args.index:
        raise UsageError("--index only applies to 3D arrays")
    if args.ref:
        ref, _ = load_array(args.ref)
        if ref.ndim == 3:
            ref = ref[args.index]
        lo, hi = args.window if args.window else (0.0, 0.2)
        render_residual(args.out, arr, ref, lo=lo, hi=hi)
    else:
        lo, hi = args.window if args.window else (None, None)
        render_image(args.out, arr, lo=lo, hi=hi)
    print(f"rendered {args.input} -> {args.out}")
    return 0


def cmd_grad_check(args):
    worst = 0.0
    for comp in (args.components or GRAD_CHECK_COMPONENTS):
        err = grad_check(comp, seed=args.seed)
        worst = max(worst, err)
        print(f"{comp:10s} max rel err {err:.3e}")
    return 0 if worst < 1e-4 else 1


def cmd_rerun(args):
    manifest = read_manifest(args.manifest)
    argv = manifest["command"]
    if not argv:
        raise UsageError("manifest records no command")
    print(f"rerunning: spectract {' '.join(argv)}")
    return main(argv)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="spectract",
        description="spectral CT simulation and dual-domain reconstruction")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a slice dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-slices", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--photons", type=float, default=PHOTON_FLUX_PRESETS[0])
    s.add_argument("--geometry", choices=["toy", "full"], default="toy")
    s.set_defaults(func=cmd_simulate)

    for name, fn in (("pretrain-codec", cmd_pretrain_codec),
                     ("train-diffusion", cmd_train_diffusion),
                     ("finetune", cmd_finetune)):
        s = sub.add_parser(name, help=f"{name.replace('-', ' ')} for one domain")
        s.add_argument("--data", required=True)
        s.add_argument("--workdir", required=True)
        s.add_argument("--variant", choices=VARIANTS, default="FSP")
        s.add_argument("--domain", choices=["projection", "image"],
                       required=True)
        _add_train_opts(s)
        s.set_defaults(func=fn)

    s = sub.add_parser("train", help="train all stages of one variant")
    s.add_argument("--data", required=True)
    s.add_argument("--workdir", required=True)
    s.add_argument("--variant", choices=VARIANTS, default="FSP")
    _add_train_opts(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("reconstruct", help="run a trained bundle on one slice")
    s.add_argument("--data", required=True)
    s.add_argument("--workdir", required=True)
    s.add_argument("--slice", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("fuse", help="full-spectrum fusion of a bin stack")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("evaluate", help="PSNR/SSIM report")
    s.add_argument("--recon", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--peak", type=float, default=None)
    s.add_argument("--label", default="")
    s.add_argument("--out", default="")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="train and score pipeline variants")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--variants", nargs="+", choices=VARIANTS,
                   default=list(VARIANTS))
    s.add_argument("--test-slices", type=int, default=2)
    _add_train_opts(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep-t", help="PSNR versus diffusion step count")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--variant", choices=VARIANTS, default="FSP")
    s.add_argument("--t-values", nargs="+", type=int, default=[1, 4, 32])
    s.add_argument("--test-slices", type=int, default=2)
    _add_train_opts(s)
    s.set_defaults(func=cmd_sweep_t)

    s = sub.add_parser("render", help="array to grayscale PNG")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--window", type=float, nargs=2, default=None)
    s.add_argument("--ref", default="",
                   help="render the residual against this reference")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("grad-check", help="finite-difference gradient audit")
    s.add_argument("--components", nargs="*", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("rerun", help="re-execute a recorded run")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_rerun)
    return p


def main(argv=None) -> int:
    set_thread_cap()
    parser = build_parser()
    eff = list(argv) if argv is not None else sys.argv[1:]
    args = parser.parse_args(eff)
    args._argv = eff
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``flowsr <command> ...``.

Exit codes: 0 success, 2 usage error, 3 input validation, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import io
from .errors import ConfigError, FlowSRError, NumericalError, ValidationError
from .evalkit import compute_metrics, export_report, extract_features, pca_fit, peak_frame, write_projections
from .losses import Variant
from .mrsim import AcquisitionConfig, SnrRecord, synthesize
from .nets import DiscriminatorSpec, GeneratorSpec, forward_generator, interpolate_weights, trilinear_upsample
from .patching import augment, extract_pairs, lr_tiles, plan_tiles, stitch
from .phantom import PhantomSpec, make_phantom
from .trainer import PatchDataset, TrainConfig, run_stability_suite, train_stage1, train_stage2, write_training_log
from .volume import VelocityVolume, decompose_regions

log = logging.getLogger("flowsr")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULT_CONFIGS = {
    "phantom": """\
# analytic straight-tube phantom
dims = 48 48 48          # required: nx ny nz (even)
tube_radius = 4.5        # required: mm
v_peak = 1.2             # required: m/s
nt = 8
spacing = 0.5            # mm
dt = 10                  # ms
tube_axis = Z
offset = 0 0             # mm, centreline shift in the transverse plane
# waveform = 0.3 0.6 1 0.7 ...   (one value per frame, max 1; default smooth pulse)
m_vessel = 100
m_background = 20
""",
    "acquisition": """\
# synthetic dual-venc acquisition
venc_low = 0.6
tsnr_high_range = 8 12
tsnr_low_range = 2 6
tsnr_highvenc = 15
magnitude_floor = 30
seed = 0
noise_free = false
""",
    "train": """\
# two-stage GAN training (toy scale)
epochs_stage1 = 20
epochs_stage2 = 20
batch_size = 8
lr = 1e-4
variant = wasserstein    # vanilla | relativistic | wasserstein
lambda_g = 1e-3
mu_g = 5e-7
mu_d = 5e-5
lambda_gp = 10
seed = 0
disc_only = false
gen_n_rrdb = 2
gen_width = 16
gen_n_hr_blocks = 1
disc_n_down_blocks = 2
disc_width = 16
disc_hidden = 32
""",
}


# ----------------------------------------------------------------------------
# config -> dataclasses


def _reader(path):
    return io.ConfigReader(io.read_config(path), str(path))


def phantom_spec_from(reader):
    dims = reader.get("dims", io.ints, required=True)
    if len(dims) != 3:
        raise ConfigError(f"{reader.source}: dims needs three values", line=reader.entries["dims"][1], key="dims")
    kw = {
        "dims": dims,
        "tube_radius": reader.get("tube_radius", float, required=True),
        "v_peak": reader.get("v_peak", float, required=True),
    }
    for key, conv in (("nt", int), ("spacing", float), ("dt", float), ("tube_axis", str),
                      ("offset", io.floats), ("waveform", io.floats), ("m_vessel", float),
                      ("m_background", float)):
        value = reader.get(key, conv)
        if value is not None:
            kw[key] = value
    reader.check_unknown()
    return PhantomSpec(**kw)


def acquisition_from(reader):
    kw = {}
    for key, conv in (("venc_low", float), ("tsnr_high_range", io.floats), ("tsnr_low_range", io.floats),
                      ("tsnr_highvenc", float), ("magnitude_floor", float), ("seed", int),
                      ("noise_free", io.boolean)):
        value = reader.get(key, conv)
        if value is not None:
            kw[key] = value
    reader.check_unknown()
    return AcquisitionConfig(**kw)


def train_config_from(reader):
    kw = {}
    for key, conv in (("epochs_stage1", int), ("epochs_stage2", int), ("batch_size", int), ("lr", float),
                      ("variant", Variant), ("lambda_g", float), ("mu_g", float), ("mu_d", float),
                      ("lambda_gp", float), ("seed", int), ("disc_only", io.boolean)):
        value = reader.get(key, conv)
        if value is not None:
            kw[key] = value
    gen = {k: reader.get(f"gen_{k}", int) for k in ("n_rrdb", "width", "n_hr_blocks", "growth", "branch_width")}
    disc = {k: reader.get(f"disc_{k}", int) for k in ("n_down_blocks", "width", "hidden")}
    reader.check_unknown()
    kw["generator"] = GeneratorSpec(**{k: v for k, v in gen.items() if v is not None})
    kw["discriminator"] = DiscriminatorSpec(**{k: v for k, v in disc.items() if v is not None})
    return TrainConfig(**kw)


def _config_items(reader):
    return {k: v for k, (v, _) in reader.entries.items()}


# ----------------------------------------------------------------------------
# commands


def cmd_default_config(args):
    sys.stdout.write(DEFAULT_CONFIGS[args.kind])


def cmd_phantom(args):
    reader = _reader(args.config)
    spec = phantom_spec_from(reader)
    v, m, mask = make_phantom(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_velocity(out / "hr.f4d", v)
    io.save_magnitude(out / "magnitude.f4d", m, spec.spacing)
    io.save_mask(out / "mask.f4d", mask, spec.spacing)
    io.write_manifest(out, "phantom", _config_items(reader), inputs={"config": args.config},
                      outputs={"velocity": "hr.f4d", "magnitude": "magnitude.f4d", "mask": "mask.f4d"},
                      argv=args.argv)


def write_snr_log(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["timestep", "stratum", "tsnr"])
        for r in records:
            w.writerow([r.timestep, r.stratum, repr(float(r.tsnr))])


def read_snr_log(path):
    with open(path, newline="") as f:
        return [SnrRecord(int(r["timestep"]), r["stratum"], float(r["tsnr"])) for r in csv.DictReader(f)]


def cmd_synth(args):
    v = io.load_velocity(args.hr)
    m = io.load_magnitude(args.magnitude)
    mask = io.load_mask(args.mask)
    reader = _reader(args.config) if args.config else io.ConfigReader({})
    cfg = acquisition_from(reader)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.noise_free:
        overrides["noise_free"] = True
    if overrides:
        cfg = AcquisitionConfig(**{**cfg.__dict__, **overrides})
    v_lr, records = synthesize(v, m, mask, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_velocity(out / "lr.f4d", v_lr)
    write_snr_log(out / "snr_log.csv", records)
    io.write_manifest(out, "synth", {**_config_items(reader), **{k: v for k, v in cfg.__dict__.items()}},
                      seeds={"acquisition": cfg.seed},
                      inputs={"hr": args.hr, "magnitude": args.magnitude, "mask": args.mask},
                      outputs={"lr": "lr.f4d", "snr_log": "snr_log.csv"}, argv=args.argv)


def cmd_patch(args):
    v_hr = io.load_velocity(args.hr)
    v_lr = io.load_velocity(args.lr)
    mask = io.load_mask(args.mask)
    rng = np.random.default_rng(args.seed)
    pairs = extract_pairs(v_hr, v_lr, mask, args.count, rng)
    if args.augment:
        pairs = [q for p in pairs for q in augment(p)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_patchset(out / "patches.f4d", pairs,
                      {"count": len(pairs), "seed": args.seed, "augment": int(args.augment), "source": Path(args.hr).name})
    io.write_manifest(out, "patch", {"count": args.count, "augment": args.augment}, seeds={"patch": args.seed},
                      inputs={"hr": args.hr, "lr": args.lr, "mask": args.mask},
                      outputs={"patches": "patches.f4d"}, argv=args.argv)


def _load_dataset(paths):
    pairs = []
    for p in paths:
        pairs.extend(io.read_patchset(p)[0])
    return PatchDataset.from_pairs(pairs)


def _train_cfg(args):
    cfg = train_config_from(_reader(args.config)) if args.config else TrainConfig()
    overrides = {}
    for key in ("epochs_stage1", "epochs_stage2", "seed", "batch_size"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "variant", None):
        overrides["variant"] = Variant(args.variant)
    if getattr(args, "lambda_g", None) is not None:
        overrides["lambda_g"] = args.lambda_g
    return TrainConfig(**{**cfg.__dict__, **overrides}) if overrides else cfg


def _cfg_items(cfg):
    items = {k: v for k, v in cfg.__dict__.items() if k not in ("generator", "discriminator", "dtype")}
    items.update({f"gen_{k}": v for k, v in cfg.generator.__dict__.items()})
    items.update({f"disc_{k}": v for k, v in cfg.discriminator.__dict__.items()})
    items["variant"] = cfg.variant.value
    return items


def cmd_train(args):
    from .plotting import plot_loss_panels, plot_training_curves

    cfg = _train_cfg(args)
    train = _load_dataset(args.train)
    val = _load_dataset(args.val) if args.val else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    theta_g, run = train_stage1(cfg, train, val, checkpoint_dir=out)
    if cfg.epochs_stage2 > 0:
        _, _, run = train_stage2(cfg, train, theta_g, val, checkpoint_dir=out, resume=run)
    write_training_log(out / "train_log.csv", run)
    label = "baseline" if cfg.effective_lambda_g == 0 else cfg.variant.value
    plot_training_curves({label: run}, out / "training_curves.png")
    if cfg.epochs_stage2 > 0:
        plot_loss_panels({label: run}, out / "loss_panels.png")
    io.write_manifest(out, "train", _cfg_items(cfg), seeds={"train": cfg.seed},
                      inputs={"train": " ".join(args.train), "val": " ".join(args.val or [])},
                      outputs={"log": "train_log.csv"}, argv=args.argv)


def cmd_stability(args):
    from .plotting import plot_loss_panels, plot_stability_summary, plot_training_curves

    cfg = _train_cfg(args)
    train = _load_dataset(args.train)
    val = _load_dataset(args.val)
    out = Path(args.out)
    variants = [Variant(v) for v in args.variants]
    rows, runs = run_stability_suite(cfg, train, val, variants, args.lambdas, out_dir=out)
    labelled = {("baseline" if lam == 0 else f"{v} {lam:g}"): r for (v, lam), r in runs.items()}
    plot_training_curves(labelled, out / "stability_mre.png", "Validation MRE per configuration")
    plot_loss_panels(labelled, out / "stability_losses.png")
    plot_stability_summary(rows, out / "stability_summary.png")
    io.write_manifest(out, "stability", {**_cfg_items(cfg), "variants": " ".join(args.variants),
                                         "lambdas": " ".join(map(str, args.lambdas))},
                      seeds={"train": cfg.seed}, outputs={"summary": "stability_summary.csv"}, argv=args.argv)


def _identity_predict(tiles):
    x = torch.as_tensor(np.stack(tiles), dtype=torch.float64).movedim(-1, 1)
    return trilinear_upsample(x).movedim(1, -1).numpy()


def infer_volume(v_lr, params=None, batch_size=8):
    """Tiled super-resolution of every frame; ``params=None`` uses trilinear upsampling."""
    plan = plan_tiles(v_lr.data.shape[1:4])
    frames = []
    for frame in v_lr.data:
        tiles = lr_tiles(plan, frame)
        preds = []
        for i in range(0, len(tiles), batch_size):
            chunk = tiles[i : i + batch_size]
            if params is None:
                preds.extend(_identity_predict(chunk))
            else:
                dtype = next(iter(params.values())).dtype
                with torch.no_grad():
                    y = forward_generator(params, torch.as_tensor(np.stack(chunk), dtype=dtype))
                preds.extend(y.double().numpy())
        frames.append(stitch(plan, preds))
    data = np.stack(frames)
    if not np.all(np.isfinite(data)):
        raise NumericalError("network produced non-finite velocities")
    return VelocityVolume(data, v_lr.spacing / 2.0, v_lr.dt)


def cmd_infer(args):
    v_lr = io.load_velocity(args.lr)
    params = None if args.identity else io.load_checkpoint(args.checkpoint)
    v_sr = infer_volume(v_lr, params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_velocity(out / "sr.f4d", v_sr)
    io.write_manifest(out, "infer", {"identity": args.identity},
                      inputs={"lr": args.lr, "checkpoint": args.checkpoint or ""},
                      outputs={"sr": "sr.f4d"}, argv=args.argv)


def _named(spec):
    if "=" in spec:
        name, path = spec.split("=", 1)
        return name, path
    return Path(spec).stem, spec


def cmd_eval(args):
    v_hr = io.load_velocity(args.hr)
    mask = io.load_mask(args.mask)
    labels = decompose_regions(mask)
    snr_log = read_snr_log(args.snr_log) if args.snr_log else None
    peak = args.peak_index if args.peak_index is not None else peak_frame(v_hr, mask)
    reports = []
    for spec in args.sr:
        name, path = _named(spec)
        v_sr = io.load_velocity(path)
        reports.append(compute_metrics(v_sr, v_hr, labels, snr_log, peak, model=name))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_report(reports, out / "metrics.csv")
    io.write_manifest(out, "eval", {"peak_index": peak},
                      inputs={"hr": args.hr, "mask": args.mask, "sr": " ".join(args.sr),
                              "snr_log": args.snr_log or ""},
                      outputs={"metrics": "metrics.csv"}, argv=args.argv)


def cmd_interp(args):
    psnr = io.load_checkpoint(args.psnr)
    gan = io.load_checkpoint(args.gan)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    for alpha in args.alphas:
        name = f"interp_alpha{alpha:g}.f4dw"
        io.save_checkpoint(out / name, interpolate_weights(psnr, gan, alpha))
        written[f"alpha{alpha:g}"] = name
    io.write_manifest(out, "interp", {"alphas": " ".join(f"{a:g}" for a in args.alphas)},
                      inputs={"psnr": args.psnr, "gan": args.gan}, outputs=written, argv=args.argv)


def cmd_pca(args):
    from .plotting import plot_pca

    pairs = []
    for p in args.patches:
        pairs.extend(io.read_patchset(p)[0])
    models = [_named(s) for s in args.checkpoint]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for tap in args.taps:
        samples, owners = [], []
        for name, path in models:
            params = io.load_checkpoint(path)
            feats = extract_features(params, pairs, tap, args.count, np.random.default_rng(args.seed))
            samples.extend(feats)
            owners.extend([name] * len(feats))
        # shared projection so networks are comparable in one space
        fit = pca_fit(samples)
        groups = {}
        for name, s, proj in zip(owners, samples, fit.projections):
            rows.append((name, tap, s.patch_id, proj[0], proj[1]))
            groups.setdefault(name, []).append(proj)
        plot_pca(groups, out / f"pca_{tap}.png", fit.fractions)
    write_projections(out / "pca.csv", rows)
    io.write_manifest(out, "pca", {"taps": " ".join(args.taps), "count": args.count}, seeds={"pca": args.seed},
                      inputs={"checkpoints": " ".join(args.checkpoint), "patches": " ".join(args.patches)},
                      outputs={"projections": "pca.csv"}, argv=args.argv)


def slice_image(v, frame, z, quantity, reference=None):
    data = v.data[frame, z]
    if quantity == "speed":
        return np.linalg.norm(data, axis=-1)
    if reference is None:
        raise ValidationError("error maps need --reference")
    return np.linalg.norm(data - reference.data[frame, z], axis=-1)


def cmd_export_slice(args):
    v = io.load_velocity(args.volume)
    ref = io.load_velocity(args.reference) if args.reference else None
    if ref is not None and ref.data.shape != v.data.shape:
        raise ValidationError("reference and volume shapes differ")
    nt, nz = v.data.shape[:2]
    if not 0 <= args.frame < nt or not 0 <= args.z < nz:
        raise ValidationError(f"frame/z out of range (nt={nt}, nz={nz})")
    img = slice_image(v, args.frame, args.z, args.quantity, ref)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.quantity}_t{args.frame}_z{args.z}"
    io.write_pgm(out / f"{stem}.pgm", img, vmin=0.0, vmax=args.vmax)
    if args.png:
        from .plotting import plot_slice

        plot_slice(img, out / f"{stem}.png", f"{args.quantity} (t={args.frame}, z={args.z})",
                   cmap="magma" if args.quantity == "error" else "viridis", label="m/s")
    io.write_manifest(out, "export-slice", {"frame": args.frame, "z": args.z, "quantity": args.quantity},
                      inputs={"volume": args.volume, "reference": args.reference or ""},
                      outputs={"graymap": f"{stem}.pgm"}, argv=args.argv)


# ----------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="flowsr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("default-config", help="print a documented default config")
    s.add_argument("kind", choices=sorted(DEFAULT_CONFIGS))
    s.set_defaults(func=cmd_default_config)

    s = sub.add_parser("phantom", help="generate an analytic tube phantom",
                       epilog=DEFAULT_CONFIGS["phantom"], formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("config")
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("synth", help="simulate a low-resolution dual-venc acquisition",
                       epilog=DEFAULT_CONFIGS["acquisition"], formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("--hr", required=True)
    s.add_argument("--magnitude", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--noise-free", action="store_true")
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("patch", help="extract HR/LR training patch pairs")
    s.add_argument("--hr", required=True)
    s.add_argument("--lr", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--count", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--augment", action="store_true", help="add the 9 quarter-turn rotations of every pair")
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_patch)

    def train_args(s):
        s.add_argument("--train", nargs="+", required=True)
        s.add_argument("--config")
        s.add_argument("--epochs-stage1", dest="epochs_stage1", type=int)
        s.add_argument("--epochs-stage2", dest="epochs_stage2", type=int)
        s.add_argument("--batch-size", dest="batch_size", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("-o", "--out", required=True)

    s = sub.add_parser("train", help="two-stage GAN training",
                       epilog=DEFAULT_CONFIGS["train"], formatter_class=argparse.RawDescriptionHelpFormatter)
    train_args(s)
    s.add_argument("--val", nargs="+")
    s.add_argument("--variant", choices=[v.value for v in Variant])
    s.add_argument("--lambda-g", dest="lambda_g", type=float)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("stability", help="adversarial variant x lambda_G sweep")
    train_args(s)
    s.add_argument("--val", nargs="+", required=True)
    s.add_argument("--variants", nargs="+", default=[v.value for v in Variant], choices=[v.value for v in Variant])
    s.add_argument("--lambdas", nargs="+", type=float, default=[1e-4, 1e-3, 1e-2])
    s.set_defaults(func=cmd_stability)

    s = sub.add_parser("infer", help="tiled super-resolution of a low-resolution volume")
    s.add_argument("--lr", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--identity", action="store_true", help="trilinear upsampling instead of a network")
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="stratified error metrics")
    s.add_argument("--hr", required=True)
    s.add_argument("--sr", nargs="+", required=True, help="PATH or NAME=PATH")
    s.add_argument("--mask", required=True)
    s.add_argument("--snr-log", dest="snr_log")
    s.add_argument("--peak-index", dest="peak_index", type=int)
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("interp", help="interpolate generator weights")
    s.add_argument("--psnr", required=True, help="generator trained on data loss only")
    s.add_argument("--gan", required=True, help="adversarially fine-tuned generator")
    s.add_argument("--alphas", nargs="+", type=float, default=[0.0, 0.25, 0.5, 0.75, 1.0])
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_interp)

    s = sub.add_parser("pca", help="PCA of generator feature activations")
    s.add_argument("--checkpoint", nargs="+", required=True, help="PATH or NAME=PATH")
    s.add_argument("--patches", nargs="+", required=True)
    s.add_argument("--taps", nargs="+", default=["middle", "end"], choices=["middle", "end"])
    s.add_argument("--count", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_pca)

    s = sub.add_parser("export-slice", help="write a z-slice of speed or error as a graymap")
    s.add_argument("--volume", required=True)
    s.add_argument("--reference")
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--z", type=int, required=True)
    s.add_argument("--quantity", choices=["speed", "error"], default="speed")
    s.add_argument("--vmax", type=float)
    s.add_argument("--png", action="store_true", help="also render a matplotlib figure")
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_export_slice)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    args.argv = ["flowsr"] + argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = io.default_threads()
    if threads:
        torch.set_num_threads(threads)
    try:
        args.func(args)
    except NumericalError as exc:
        print(f"flowsr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FlowSRError, OSError) as exc:
        print(f"flowsr: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

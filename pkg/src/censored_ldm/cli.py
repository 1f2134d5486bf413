"""censored-ldm command line.

Every command writes ``<command>.config.json`` into its output directory.
Passing that file back through ``--config`` reruns the command with the
same settings. Relative output directories are resolved against
``$CENSORED_LDM_OUT`` when it is set.

CSV outputs and their columns:
  loss.csv              iteration, lr, loss, recon, kl, valid   (VAE)
                        iteration, lr, loss, valid              (diffusion)
  branch_shares.csv     branch, share                           (censored VAE)
  scheduler_bins.csv    bin, gamma_lower, gamma_upper, weight   (diffusion)
  latency.csv           sample, seconds
  metrics.csv           channel, metric, value, feature_checkpoint
  sie_probability.csv   bin_lower, bin_upper, test_probability, predicted_probability, count
  spectrum_<name>.csv   wavenumber, density, count
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .artifacts import file_hash, load_denoiser, load_vae, save_denoiser, save_vae, specs_from_json
from .autodiff import DTYPE
from .grid import FieldBatch, dataset_fingerprint, generate_splits, load_fgrd, normalize, save_fgrd
from .metrics import radial_psd, report, sie_probability_curve
from .models import DenoiserConfig, VaeConfig, fit_latent_stats, normalize_latent
from .sampler import SamplerConfig, check_fingerprint, generate
from .training import OptimConfig, encode_mean, feature_encoder, reconstruct, train_diffusion, train_vae

log = logging.getLogger("censored_ldm")

OUT_ENV = "CENSORED_LDM_OUT"


class UsageError(Exception):
    pass


def _positive(kind):
    def parse(text):
        val = kind(text)
        if val <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return val
    return parse


def _crop(text):
    try:
        r, c, s = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"crop must be row,col,size, got {text!r}") from None
    return [r, c, s]


def out_dir(path) -> Path:
    p = Path(path)
    root = os.environ.get(OUT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


_PATHS = ("data", "vae", "model", "ref", "gen", "feature_vae", "inputs")


def write_config(out: Path, command: str, args: argparse.Namespace) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "config", "verbose")}
    for key in _PATHS:
        val = cfg.get(key)
        if isinstance(val, list):
            cfg[key] = [str(Path(v).resolve()) for v in val]
        elif val:
            cfg[key] = str(Path(val).resolve())
    cfg["out"] = str(out.resolve())
    cfg["command"] = command
    (out / f"{command}.config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


def _fmt(v):
    return "" if v is None else (repr(float(v)) if isinstance(v, float) else v)


def write_history(path: Path, hist, columns) -> None:
    write_rows(path, columns, ([_fmt(r.get(c)) for c in columns] for r in hist.rows))


def _load_splits(data_dir):
    d = Path(data_dir)
    return tuple(load_fgrd(d / f"{name}.fgrd") for name in ("train", "valid", "test"))


def _optim(args) -> OptimConfig:
    return OptimConfig(iterations=args.iterations, warmup=args.warmup, batch_size=args.batch_size,
                       lr_min=args.lr_min, lr_max=args.lr_max, eval_every=args.eval_every, n_eval=args.n_eval)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args):
    out = out_dir(args.out)
    splits = generate_splits(args.n, args.n_valid, args.n_test, args.size, args.seed, args.exponent)
    for name in ("train", "valid", "test"):
        save_fgrd(getattr(splits, name), out / f"{name}.fgrd")
    write_config(out, "gen-data", args)
    log.info("wrote %d/%d/%d samples to %s", args.n, args.n_valid, args.n_test, out)


def cmd_train_vae(args):
    out = out_dir(args.out)
    train, valid, _ = _load_splits(args.data)
    cfg = VaeConfig(in_channels=train.data.shape[1], latent_channels=args.latent_channels, base_width=args.base_width,
                    depth=args.depth, blocks=args.blocks, beta=args.beta, loss=args.loss)
    vae, hist = train_vae(normalize(train), normalize(valid), cfg, _optim(args), seed=args.seed)
    write_history(out / "loss.csv", hist, ["iteration", "lr", "loss", "recon", "kl", "valid"])
    if "branch_shares" in hist.extra:
        shares = hist.extra["branch_shares"]
        write_rows(out / "branch_shares.csv", ["branch", "share"], [(k, repr(v)) for k, v in shares.items()])
        log.info("censored branches: %s", ", ".join(f"{k}={v:.3f}" for k, v in shares.items()))
    save_vae(out / "vae.ckpt", vae, train.channels, train.mask, dataset_fingerprint(train),
             {"best_iteration": hist.best_iteration, "seed": args.seed})
    write_config(out, "train-vae", args)


def _train_denoiser(args, space: str):
    out = out_dir(args.out)
    train, valid, _ = _load_splits(args.data)
    fp = dataset_fingerprint(train)
    mask = torch.as_tensor(train.mask, dtype=DTYPE)
    vae = stats = vae_fp = None
    if space == "latent":
        vae, vcfg, _, vae_fp = load_vae(args.vae)
        check_fingerprint(fp, vcfg["dataset"], f"VAE {args.vae}")
        z_tr, z_va = encode_mean(vae, normalize(train)), encode_mean(vae, normalize(valid))
        lmask = vae.latent_mask(mask)
        stats = fit_latent_stats(z_tr, lmask)
        z_tr, z_va = normalize_latent(z_tr, stats, lmask), normalize_latent(z_va, stats, lmask)
        state_mask, channels = lmask, z_tr.shape[1]
    else:
        z_tr = torch.as_tensor(normalize(train).data, dtype=DTYPE)
        z_va = torch.as_tensor(normalize(valid).data, dtype=DTYPE)
        state_mask, channels = mask, z_tr.shape[1]
    cfg = DenoiserConfig(in_channels=channels, width=args.width, depth=args.depth, blocks=args.blocks,
                         time_embed_dim=args.time_embed_dim, space=space)
    model, sched, hist = train_diffusion(z_tr, z_va, state_mask, cfg, _optim(args), seed=args.seed,
                                         weighting=args.weighting)
    write_history(out / "loss.csv", hist, ["iteration", "lr", "loss", "valid"])
    edges = sched.edges
    write_rows(out / "scheduler_bins.csv", ["bin", "gamma_lower", "gamma_upper", "weight"],
               [(i, repr(float(edges[i])), repr(float(edges[i + 1])), repr(float(w)))
                for i, w in enumerate(sched.weights)])
    save_denoiser(out / "denoiser.ckpt", model, sched, train.channels, train.mask, fp, stats,
                  vae_path=str(Path(args.vae).resolve()) if vae is not None else None, vae_fingerprint=vae_fp,
                  extra={"weighting": args.weighting, "seed": args.seed, "best_iteration": hist.best_iteration})
    return out


def cmd_train_ldm(args):
    out = _train_denoiser(args, "latent")
    write_config(out, "train-ldm", args)


def cmd_train_diff(args):
    if args.space != "data":
        raise UsageError("train-diff trains in data space; use train-ldm for latent models")
    out = _train_denoiser(args, "data")
    write_config(out, "train-diff", args)


def cmd_sample(args):
    out = out_dir(args.out)
    model, _, stats, cfg, mask = load_denoiser(args.model)
    specs = specs_from_json(cfg["channels"])
    vae = None
    censored = False
    if cfg["denoiser"]["space"] == "latent":
        vae, vcfg, _, vae_fp = load_vae(args.vae or cfg["vae_path"])
        check_fingerprint(cfg["vae_fingerprint"], vae_fp, "VAE checkpoint")
        check_fingerprint(cfg["dataset"], vcfg["dataset"], "VAE")
        censored = vae.cfg.loss == "censored"
    mask_t = torch.as_tensor(mask, dtype=DTYPE)
    state_mask = vae.latent_mask(mask_t) if vae is not None else mask_t
    sconf = SamplerConfig(n_steps=args.steps, clip_denoiser=args.clip_denoiser, seed=args.seed)
    res = generate(lambda z, g: model(z, g, state_mask), sconf, args.n, specs, mask, vae=vae, latent_stats=stats,
                   censored=censored, clip_output=args.clip_output, chunk=args.chunk)
    save_fgrd(FieldBatch(res.batch.data.astype(np.float32), res.batch.mask, specs), out / "samples.fgrd")
    write_rows(out / "latency.csv", ["sample", "seconds"], ((i, repr(float(t))) for i, t in enumerate(res.latency)))
    write_config(out, "sample", args)
    log.info("%d samples, mean latency %.4f s", args.n, res.latency.mean())


def cmd_reconstruct(args):
    out = out_dir(args.out)
    vae, vcfg, _, _ = load_vae(args.vae)
    batch = load_fgrd(args.data)
    check_fingerprint(vcfg["dataset"], dataset_fingerprint(batch), f"data {args.data}")
    clip = True if args.clip_output else None
    rec = reconstruct(vae, batch, clip=clip)
    save_fgrd(FieldBatch(rec.data.astype(np.float32), rec.mask, rec.channels), out / "reconstruction.fgrd")
    write_config(out, "reconstruct", args)


def cmd_evaluate(args):
    out = out_dir(args.out)
    ref, other = load_fgrd(args.ref), load_fgrd(args.gen)
    if ref.channels != other.channels or not np.array_equal(ref.mask, other.mask):
        raise ValueError("reference and compared set differ in channel specs or mask")
    enc, tag = None, ""
    if args.feature_vae and not args.paired:
        fvae, fcfg, _, _ = load_vae(args.feature_vae)
        check_fingerprint(fcfg["dataset"], dataset_fingerprint(ref), "feature VAE")
        enc, tag = feature_encoder(fvae), file_hash(args.feature_vae)
    rep = report(args.paired, ref, other, feature_encoder=enc, feature_checkpoint=tag, threshold=args.threshold)
    rep.to_csv(out / "metrics.csv")
    if not args.paired:
        sie_probability_curve(ref, other, ref.mask, args.threshold).to_csv(out / "sie_probability.csv")
    write_config(out, "evaluate", args)
    for ch, name, val in rep.rows():
        if ch == "all":
            print(f"{name}\t{val:.6g}")


def cmd_spectrum(args):
    out = out_dir(args.out)
    for path in args.inputs:
        spec = radial_psd(load_fgrd(path), args.channel, tuple(args.crop) if args.crop else None)
        spec.to_csv(out / f"spectrum_{Path(path).stem}.csv")
    write_config(out, "spectrum", args)


# ---------------------------------------------------------------------------
# parser

def _add_optim(p, iterations=5000, warmup=250, lr_max=2e-4):
    p.add_argument("--iterations", type=_positive(int), default=iterations)
    p.add_argument("--warmup", type=int, default=warmup)
    p.add_argument("--batch-size", type=_positive(int), default=16)
    p.add_argument("--lr-min", type=float, default=1e-6)
    p.add_argument("--lr-max", type=float, default=lr_max)
    p.add_argument("--eval-every", type=_positive(int), default=250)
    p.add_argument("--n-eval", type=_positive(int), default=128)
    p.add_argument("--seed", type=int, default=0)


def _add_denoiser(p):
    p.add_argument("--data", help="directory with train/valid/test .fgrd")
    p.add_argument("--width", type=_positive(int), default=32)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--blocks", type=_positive(int), default=2)
    p.add_argument("--time-embed-dim", type=_positive(int), default=64)
    p.add_argument("--weighting", choices=("elbo", "sigmoid"), default="sigmoid")
    _add_optim(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="censored-ldm", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="resolved config JSON from an earlier run")
        p.add_argument("--out", default=".", help="output directory")
        p.set_defaults(func=func)
        return p

    p = command("gen-data", cmd_gen_data, "generate synthetic train/valid/test splits")
    p.add_argument("--n", type=_positive(int), default=2000, help="training samples")
    p.add_argument("--n-valid", type=_positive(int), default=200)
    p.add_argument("--n-test", type=_positive(int), default=500)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exponent", type=float, default=-3.0, help="power-law exponent of the random fields")

    p = command("train-vae", cmd_train_vae, "train the autoencoder")
    p.add_argument("--data", help="directory with train/valid/test .fgrd")
    p.add_argument("--loss", choices=("gaussian", "censored"), default="censored")
    p.add_argument("--beta", type=float, default=1e-3)
    p.add_argument("--latent-channels", type=_positive(int), default=8)
    p.add_argument("--base-width", type=_positive(int), default=32)
    p.add_argument("--depth", type=_positive(int), default=2)
    p.add_argument("--blocks", type=_positive(int), default=2)
    _add_optim(p)

    p = command("train-ldm", cmd_train_ldm, "train a latent diffusion model on VAE latents")
    p.add_argument("--vae", help="VAE checkpoint")
    _add_denoiser(p)

    p = command("train-diff", cmd_train_diff, "train a diffusion model directly in data space")
    p.add_argument("--space", choices=("data",), default="data")
    _add_denoiser(p)

    p = command("sample", cmd_sample, "generate samples from a trained diffusion model")
    p.add_argument("--model", help="denoiser checkpoint")
    p.add_argument("--vae", help="override the VAE path recorded in the checkpoint")
    p.add_argument("--n", type=_positive(int), default=500)
    p.add_argument("--steps", type=_positive(int), default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chunk", type=_positive(int), default=100)
    p.add_argument("--clip-denoiser", action="store_true", help="clip the denoiser output (data-space models)")
    p.add_argument("--clip-output", action="store_true", help="clip generated fields to channel bounds")

    p = command("reconstruct", cmd_reconstruct, "encode and decode a dataset")
    p.add_argument("--vae", help="VAE checkpoint")
    p.add_argument("--data", help=".fgrd file")
    p.add_argument("--clip-output", action="store_true")

    p = command("evaluate", cmd_evaluate, "compare a dataset against a reference")
    p.add_argument("--ref", help="reference .fgrd")
    p.add_argument("--gen", help="compared .fgrd")
    p.add_argument("--paired", action="store_true", help="one-to-one metrics (reconstructions)")
    p.add_argument("--feature-vae", help="beta=1 VAE checkpoint for FAED")
    p.add_argument("--threshold", type=float, default=0.01)

    p = command("spectrum", cmd_spectrum, "radially averaged power spectrum")
    p.add_argument("inputs", nargs="*", help=".fgrd files")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--crop", type=_crop, help="row,col,size")
    return parser


_REQUIRED = {
    "train-vae": ("data",), "train-ldm": ("data", "vae"), "train-diff": ("data",), "sample": ("model",),
    "reconstruct": ("vae", "data"), "evaluate": ("ref", "gen"), "spectrum": ("inputs",),
}


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        saved = json.loads(Path(args.config).read_text())
        if saved.get("command") != args.command:
            parser.error(f"{args.config} belongs to command {saved.get('command')!r}")
        # saved values become defaults; flags given explicitly still win
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k: v for k, v in saved.items() if k != "command"})
        args = parser.parse_args(argv)
    for name in _REQUIRED.get(args.command, ()):
        if not getattr(args, name):
            parser.error(f"{args.command}: --{name.replace('_', '-')} is required")
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as err:
        print(f"censored-ldm: error: {err}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError, KeyError) as err:
        print(f"censored-ldm: error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command line entry point: ``latentmotion <subcommand> ...``.

Exit codes: 0 success, 2 validation, 3 numeric failure, 4 I/O.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .archive import read_archive, write_archive
from .config import (
    RunConfig,
    apply_overrides,
    config_from_dict,
    default_seed,
    load_config,
)
from .dataio import (
    LatentDataset,
    SyntheticSpec,
    decode_sequence,
    generate_synthetic,
    get_decoder,
    load_dataset,
    save_dataset,
)
from .errors import ConfigError, FormatError, LatentMotionError, NumericError
from .metrics import eval_acd, eval_fid, eval_fvd
from .training import Trainer, generate, latest_checkpoint, load_generator
from .transfer import MotionBasis, apply_offset, compute_offset, fit_motion_basis

log = logging.getLogger("latentmotion")

RUN_MANIFEST = "run_manifest.json"
SAMPLES_VERSION = 1


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def write_manifest(out: Path, command: str, args: dict, config: dict, artifacts: dict, seed, started: str):
    """Writes ``run_manifest.json`` inside a directory output, or ``<file>.manifest.json`` beside a file."""
    target = out / RUN_MANIFEST if out.is_dir() else out.with_name(out.name + ".manifest.json")
    manifest = {
        "tool": "latentmotion",
        "version": __version__,
        "command": command,
        "args": args,
        "config": config,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "seed": seed,
        "started": started,
        "finished": _now(),
    }
    target.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return target


def save_samples(path, codes: np.ndarray, **meta):
    header = {"format_version": SAMPLES_VERSION, "count": codes.shape[0], "t": codes.shape[1],
              "layers": codes.shape[2], "dim": codes.shape[3]}
    header.update(meta)
    write_archive(path, header, {"codes": codes})


def load_samples(path) -> np.ndarray:
    path = Path(path)
    if path.is_dir():
        return load_dataset(path).frames[None]
    header, tensors = read_archive(path)
    if header.get("format_version") != SAMPLES_VERSION or "codes" not in tensors:
        raise FormatError(f"{path} is not a sample file")
    return tensors["codes"]


def load_code(path, layers: int, dim: int) -> np.ndarray:
    path = Path(path)
    try:
        code = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise FormatError(f"code file not found: {path}") from None
    except ValueError as exc:
        raise FormatError(f"unreadable code file {path}: {exc}") from None
    code = np.asarray(code, dtype=np.float64)
    if code.size == layers * dim and code.shape != (layers, dim):
        code = code.reshape(layers, dim)
    if code.shape != (layers, dim):
        raise ConfigError(f"w_new has shape {code.shape}, basis expects {(layers, dim)}")
    return code


# -- subcommands -----------------------------------------------------------

def cmd_synth(args) -> Path:
    started = _now()
    spec = SyntheticSpec(
        num_frames=args.frames, layers=args.layers, dim=args.dim, latent_dim_motion=args.motion_dim,
        num_sinusoids=args.sinusoids, noise_scale=args.noise, seed=default_seed(args.seed),
        fps=args.fps, motif_frames=args.motif_frames,
    )
    out = save_dataset(generate_synthetic(spec), args.out)
    write_manifest(out, "synth", vars(args), {"synthetic": vars(spec)}, {"dataset": out}, spec.seed, started)
    print(out)
    return out


def _resolve_config(args) -> RunConfig:
    run_dir = Path(args.run_dir)
    if args.config:
        data = json.loads(json.dumps(load_config(args.config).to_dict()))
    elif args.resume and (run_dir / RUN_MANIFEST).exists():
        data = json.loads((run_dir / RUN_MANIFEST).read_text())["config"]
    else:
        raise ConfigError("train needs --config (or --resume on a run directory with a manifest)")
    if args.dataset:
        data["dataset"] = args.dataset
    if args.seed is not None:
        data.setdefault("train", {})["seed"] = args.seed
    elif "seed" not in data.get("train", {}):
        data.setdefault("train", {})["seed"] = default_seed()
    return config_from_dict(apply_overrides(data, args.set))


def cmd_train(args) -> Path:
    started = _now()
    cfg = _resolve_config(args)
    if not cfg.dataset:
        raise ConfigError("dataset: no dataset path in config or --dataset")
    dataset = load_dataset(cfg.dataset)
    run_dir = Path(args.run_dir)
    trainer = Trainer(dataset, cfg.model, cfg.train, cfg.loss, run_dir=run_dir)
    if args.resume:
        if trainer.resume():
            if trainer.epoch >= cfg.train.epochs:
                print(f"run in {run_dir} already complete ({trainer.epoch}/{cfg.train.epochs} epochs); nothing to do")
                return run_dir
            print(f"resuming {run_dir} at epoch {trainer.epoch}, generator step {trainer.gen_step}")
        else:
            print(f"no checkpoint in {run_dir}; starting fresh")
    elif latest_checkpoint(run_dir) is not None:
        raise ConfigError(f"{run_dir} already holds checkpoints; pass --resume or choose another --run-dir")
    run_dir.mkdir(parents=True, exist_ok=True)
    # written up front so an interrupted run can be resumed without --config
    write_manifest(run_dir, "train", vars(args), cfg.to_dict(), {}, cfg.train.seed, started)
    report = trainer.train()
    last = latest_checkpoint(run_dir)
    write_manifest(run_dir, "train", vars(args), cfg.to_dict(),
                   {"report": run_dir / "report.jsonl", "raw": last / "raw.ckpt", "ema": last / "ema.ckpt"},
                   cfg.train.seed, started)
    print(f"trained {report.epochs_completed} epochs, {trainer.gen_step} generator steps -> {last}")
    return run_dir


def cmd_sample(args) -> Path:
    started = _now()
    seed = default_seed(args.seed)
    gen = load_generator(args.checkpoint, use_ema=not args.raw)
    codes = generate(gen, args.count, args.t, seed)
    out = Path(args.out)
    save_samples(out, codes, seed=seed, checkpoint=str(args.checkpoint), ema=not args.raw)
    write_manifest(out, "sample", vars(args), {"model": gen.cfg.to_dict()}, {"samples": out}, seed, started)
    print(f"{codes.shape[0]} x {codes.shape[1]} codes -> {out}")
    return out


def cmd_pca(args) -> Path:
    started = _now()
    dataset = load_dataset(args.dataset)
    seed = default_seed(args.seed)
    basis = fit_motion_basis(dataset, k=args.k, seed=seed)
    out = Path(args.out)
    basis.save(out)
    write_manifest(out, "pca", vars(args), {"k": args.k}, {"basis": out}, seed, started)
    print(f"basis k={basis.k} ({basis.layers}x{basis.dim}) -> {out}")
    return out


def cmd_transfer(args) -> Path:
    started = _now()
    basis = MotionBasis.load(args.basis)
    codes = load_samples(args.trajectory)
    if codes.shape[-2:] != (basis.layers, basis.dim):
        raise ConfigError(
            f"trajectory codes have shape {codes.shape[-2:]}, basis has {(basis.layers, basis.dim)}"
        )
    delta = compute_offset(basis, load_code(args.w_new, basis.layers, basis.dim))
    shifted = apply_offset(codes, delta)
    out = Path(args.out)
    save_samples(out, shifted, source=str(args.trajectory), basis=str(args.basis), w_new=str(args.w_new))
    write_manifest(out, "transfer", vars(args), {}, {"samples": out}, None, started)
    print(f"shifted {codes.shape[0]} trajectories by |delta|={np.linalg.norm(delta):.6g} -> {out}")
    return out


def cmd_eval(args):
    started = _now()
    seed = default_seed(args.seed)
    real = load_dataset(args.dataset)
    if args.checkpoint:
        fake = load_generator(args.checkpoint, use_ema=not args.raw)
    elif args.samples:
        fake = load_samples(args.samples)
    else:
        raise ConfigError("eval needs --checkpoint or --samples")
    kw = {"seed": seed}
    if args.metric == "fid":
        if args.n:
            kw["n_frames"] = args.n
        report = eval_fid(real, fake, args.extractor or "identity-flatten", **kw)
    elif args.metric == "fvd":
        if args.n:
            kw["n_videos"] = args.n
        report = eval_fvd(real, fake, args.extractor or "random-projection-32", clip_len=args.clip, **kw)
    else:
        if args.n:
            kw["n_samples"] = args.n
        report = eval_acd(fake, args.extractor or "identity-flatten", length=args.length, **kw)
    text = report.to_json()
    if args.out:
        out = Path(args.out)
        out.write_text(text + "\n")
        write_manifest(out, "eval", vars(args), {}, {"report": out}, seed, started)
    print(text)
    return report


def cmd_decode(args) -> Path:
    from PIL import Image

    started = _now()
    codes = load_samples(args.samples)
    if not 0 <= args.index < len(codes):
        raise ConfigError(f"--index {args.index} out of range for {len(codes)} sequences")
    adapter = get_decoder(args.adapter, resolution=args.resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for k, frame in enumerate(decode_sequence(adapter, codes[args.index])):
        Image.fromarray(frame).save(out / f"frame_{k:05d}.png")
        n += 1
    write_manifest(out, "decode", vars(args), {}, {"frames": out}, None, started)
    print(f"{n} frames -> {out}")
    return out


def cmd_inspect(args):
    path = Path(args.path)
    if path.is_dir():
        if (path / "manifest.json").exists():
            info = json.loads((path / "manifest.json").read_text())
        else:
            last = latest_checkpoint(path)
            info = {"run_dir": str(path), "latest_checkpoint": str(last) if last else None}
            if (path / RUN_MANIFEST).exists():
                info["manifest"] = json.loads((path / RUN_MANIFEST).read_text())
    else:
        header, tensors = read_archive(path)
        info = {"header": header, "tensors": {k: list(v.shape) for k, v in tensors.items()}}
    print(json.dumps(info, indent=2, sort_keys=True, default=str))
    return info


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentmotion", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic latent dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=2000)
    s.add_argument("--layers", type=int, default=18)
    s.add_argument("--dim", type=int, default=512)
    s.add_argument("--motion-dim", type=int, default=8)
    s.add_argument("--sinusoids", type=int, default=4)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--fps", type=float, default=25.0)
    s.add_argument("--motif-frames", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train the latent video GAN")
    s.add_argument("--config")
    s.add_argument("--dataset")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--resume", action="store_true")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config field")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample latent sequences from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--t", type=int, default=250)
    s.add_argument("--count", type=int, default=128)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--raw", action="store_true", help="use raw instead of EMA weights")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("pca", help="fit the motion basis of a dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--k", type=int, default=32)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pca)

    s = sub.add_parser("transfer", help="shift trajectories onto a new identity")
    s.add_argument("--trajectory", required=True, help="sample file or dataset directory")
    s.add_argument("--basis", required=True)
    s.add_argument("--w-new", required=True, help=".npy file with one (layers, dim) code")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("eval", help="FID / FVD / ACD report")
    s.add_argument("--metric", choices=("fid", "fvd", "acd"), required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--samples")
    s.add_argument("--raw", action="store_true")
    s.add_argument("--extractor")
    s.add_argument("--n", type=int)
    s.add_argument("--clip", type=int, default=25)
    s.add_argument("--length", type=int, default=400)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("decode", help="render one sequence through a decoder adapter")
    s.add_argument("--samples", required=True)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--adapter", default="null")
    s.add_argument("--resolution", type=int, default=256)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("inspect", help="print the header of any artifact")
    s.add_argument("path")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except LatentMotionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return FormatError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

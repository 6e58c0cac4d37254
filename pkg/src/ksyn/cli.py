"""Command-line interface: ``ksyn <subcommand> [options]``.

Every subcommand takes ``--config`` (YAML, optional; defaults to the desk
preset), ``--out`` (output directory, locked for the duration of the run)
and ``--set section.key=value`` overrides.  Each run writes
``manifest.json`` next to its outputs.  Failures print one JSON object to
stderr and exit non-zero.
"""
from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .codec import Codec, CodecConfig
from .config import ConfigError, ExperimentConfig, load_config
from .diffusion import DenoiserTrainResult, cosine_schedule
from .fusion import sample_fused_volumes
from .io import (DigestMismatchError, DirectoryLock, KSTError, LockError, export_png, file_digest,
                 load_checkpoint, png_name, read_kst, save_checkpoint, write_kst, write_manifest,
                 write_metric_csv)
from .kspace import CineVolume, Spectrum
from .masks import apply_mask, radial_mask, zero_filled_recon
from .metrics import evaluate_corpora
from .nn import EMA
from .phantom import corpus_hash, make_corpus
from .pipeline import (PER_SEED_HEADER, TABLE_HEADER, KSynModel, LatentCodec, build_codec, noise_volumes,
                       run_ablation, split_halves, synthesize, train_model)
from .unet import UNet, UNetConfig

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CLIError(RuntimeError):
    """Expected failure with a user-facing message."""


# ---------------------------------------------------------------- volume dirs

def save_volume_dir(out: Path, volumes: Sequence[np.ndarray], prefix: str, domain: str,
                    split: Optional[Sequence[str]] = None) -> list[Path]:
    paths = []
    for i, v in enumerate(volumes):
        paths.append(write_kst(out / f"{prefix}_{i:04d}.kst", np.asarray(v, dtype=np.complex128)))
    index = {"domain": domain, "files": [p.name for p in paths]}
    if split is not None:
        index["split"] = list(split)
    with open(out / "volumes.json", "w", encoding="utf-8") as f:
        json.dump(index, f, indent=2, sort_keys=True)
        f.write("\n")
    return paths


def load_volume_dir(d, part: Optional[str] = None) -> list[np.ndarray]:
    """Volumes of a directory written by :func:`save_volume_dir`, as uncentered k-space."""
    d = Path(d)
    idx_path = d / "volumes.json"
    if not idx_path.is_file():
        raise CLIError(f"{d} is not a volume directory (missing volumes.json)")
    index = json.loads(idx_path.read_text(encoding="utf-8"))
    files = index["files"]
    if part is not None and "split" in index:
        files = [f for f, s in zip(files, index["split"]) if s == part]
    out = []
    for name in files:
        p = d / name
        if not p.is_file():
            raise CLIError(f"missing volume file {p}")
        a = read_kst(p)
        if a.ndim != 3:
            raise CLIError(f"{p} holds shape {a.shape}, expected (H, W, T)")
        out.append(np.fft.fft2(a, axes=(0, 1)) if index["domain"] == "image" else a)
    if not out:
        raise CLIError(f"no volumes in {d}" + (f" with split {part!r}" if part else ""))
    return out


# ---------------------------------------------------------------- checkpoints

def _adam_tensors(opt) -> dict:
    out = {}
    if opt is None:
        return out
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        out[f"adam/m/{i:04d}"] = m
        out[f"adam/v/{i:04d}"] = v
    return out


def _model_tensors(model, ema) -> dict:
    t = {f"param/{k}": v for k, v in model.state_dict().items()}
    names = [k for k, _ in model.named_parameters()]
    for k, s in zip(names, ema.shadow):
        t[f"ema/{k}"] = s
    return t


def _params_from(tensors: dict) -> dict:
    return {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}


def save_codec(path, codec: LatentCodec, digest: str) -> Path:
    res = codec.train
    tensors = _model_tensors(codec.model, res.ema)
    tensors.update(_adam_tensors(res.optimizer))
    tensors["latent/mean"] = codec.mean
    tensors["latent/std"] = codec.std
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(codec.config).items()}
    meta = {"codec_config": cfg, "ema_steps": res.ema.step_count,
            "adam_steps": res.optimizer.step_count if res.optimizer else 0,
            "dtype": str(codec.model.dtype)}
    return save_checkpoint(path, "codec", tensors, meta, digest)


def load_codec(path, digest: Optional[str], allow_mismatch: bool) -> LatentCodec:
    manifest, t = load_checkpoint(path, digest, allow_mismatch, kind="codec")
    cfg = dict(manifest["meta"]["codec_config"])
    cfg["patch"] = tuple(cfg["patch"])
    model = Codec(CodecConfig(**cfg), dtype=np.dtype(manifest["meta"]["dtype"]))
    model.load_state_dict(_params_from(t))
    return LatentCodec(model, t["latent/mean"], t["latent/std"])


def save_denoiser(path, model: KSynModel, digest: str) -> Path:
    den = model.denoiser
    tensors = _model_tensors(den.model, den.ema)
    tensors.update(_adam_tensors(den.optimizer))
    tensors["schedule/alpha_bars"] = den.schedule.alpha_bars
    u = den.model.config
    meta = {"T": den.schedule.T, "in_channels": den.model.in_channels,
            "unet": {"widths": list(u.widths), "emb_dim": u.emb_dim, "groups": u.groups},
            "fusion": model.fusion, "seed": model.seed, "n_frames": model.n_frames,
            "targets": model.targets, "ema_steps": den.ema.step_count,
            "adam_steps": den.optimizer.step_count if den.optimizer else 0,
            "dtype": str(den.model.dtype)}
    return save_checkpoint(path, "denoiser", tensors, meta, digest)


def load_denoiser(path, digest, allow_mismatch):
    manifest, t = load_checkpoint(path, digest, allow_mismatch, kind="denoiser")
    meta = manifest["meta"]
    u = meta["unet"]
    unet = UNet(UNetConfig(tuple(u["widths"]), u["emb_dim"], u["groups"]), meta["in_channels"],
                dtype=np.dtype(meta["dtype"]))
    unet.load_state_dict(_params_from(t))
    schedule = cosine_schedule(meta["T"])
    if not np.array_equal(schedule.alpha_bars, t["schedule/alpha_bars"]):
        raise CLIError(f"{path}: stored noise schedule does not match T={meta['T']}")
    return unet, schedule, meta


# ---------------------------------------------------------------- subcommands

def _versions() -> dict:
    import scipy
    return {"ksyn": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


class Run:
    """Shared state of one subcommand invocation."""

    def __init__(self, args, cfg: ExperimentConfig):
        self.args, self.cfg = args, cfg
        self.out = Path(args.out or cfg["output_dir"])
        self.inputs: list[str] = []
        self.outputs: list[Path] = []
        self.extra: dict = {}
        self.t0 = time.perf_counter()

    def manifest(self) -> Path:
        rec = {
            "subcommand": self.args.command,
            "config_digest": self.cfg.digest,
            "seed": self.cfg.seed,
            "versions": _versions(),
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
            "inputs": self.inputs,
            "outputs": [{"file": p.name, "sha256": file_digest(p)} for p in self.outputs],
            "config": self.cfg.tree,
        }
        rec.update(self.extra)
        return write_manifest(self.out, rec)


def _input_dir(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise CLIError(f"input not found: {p}")
    return p


def cmd_phantom(run: Run):
    cfg = run.cfg
    c = cfg["corpus"]
    corpus = make_corpus(c["n"], cfg.phantom_spec(), cfg.seed, train_size=c["train_size"])
    run.outputs += save_volume_dir(run.out, [v.data for v in corpus.volumes], "phantom", "image", corpus.split)
    run.extra["corpus_hash"] = corpus_hash(corpus.volumes)


def cmd_fuse(run: Run):
    a, cfg = run.args, run.cfg
    src = _input_dir(a.corpus)
    run.inputs.append(str(src))
    vols = [CineVolume(np.fft.ifft2(k, axes=(0, 1))) for k in load_volume_dir(src, "train")]
    f = cfg["fusion"]
    fused = sample_fused_volumes(vols, a.n, f["scheme_mix"], seed=cfg.seed, group_size=f["group_size"],
                                 freq_weighting=f["freq_weighting"])
    run.outputs += save_volume_dir(run.out, [k for _, _, k in fused], "fused", "kspace")
    run.extra["fusion_specs"] = [
        {"volume": v, "scheme": s.scheme, "anchor": s.anchor, "partners": list(s.partners),
         "weights": s.weights if isinstance(s.weights, float) else list(s.weights)}
        for v, s, _ in fused]


def cmd_train_codec(run: Run):
    a, cfg = run.args, run.cfg
    src = _input_dir(a.corpus)
    run.inputs.append(str(src))
    codec = build_codec(load_volume_dir(src, "train"), cfg)
    p = save_codec(run.out / "codec.ckpt", codec, cfg.training_digest)
    run.outputs.append(p)
    run.extra["final_loss"] = codec.train.losses[-1] if codec.train.losses else None


def _model_from_disk(run: Run) -> tuple[LatentCodec, list]:
    a, cfg = run.args, run.cfg
    src = _input_dir(a.corpus)
    ck = _input_dir(a.codec)
    run.inputs += [str(src), str(ck)]
    codec = load_codec(ck, cfg.training_digest, a.allow_digest_mismatch)
    vols = [CineVolume(np.fft.ifft2(k, axes=(0, 1))) for k in load_volume_dir(src, "train")]
    return codec, vols


def cmd_train_diffusion(run: Run):
    a, cfg = run.args, run.cfg
    codec, vols = _model_from_disk(run)
    model = train_model(vols, cfg, a.fusion, cfg.seed, codec=codec)
    run.outputs.append(save_denoiser(run.out / "denoiser.ckpt", model, cfg.training_digest))
    run.extra["final_loss"] = model.denoiser.losses[-1] if model.denoiser.losses else None


def cmd_synthesize(run: Run):
    a, cfg = run.args, run.cfg
    ck = _input_dir(a.denoiser)
    unet, schedule, meta = load_denoiser(ck, cfg.training_digest, a.allow_digest_mismatch)
    codec, vols = _model_from_disk(run)
    run.inputs.append(str(ck))
    den = DenoiserTrainResult(unet, EMA(unet.parameters()), schedule)
    model = KSynModel(codec, den, vols, meta["fusion"], cfg, meta["seed"], meta["n_frames"], meta["targets"])
    n = cfg["synthesis"]["n"]
    synth = synthesize(model, n, cfg.seed, strength=cfg["synthesis"]["strength"])
    run.outputs += save_volume_dir(run.out, synth, "synth", "kspace")


def cmd_evaluate(run: Run):
    a, cfg = run.args, run.cfg
    real_dir = _input_dir(a.real)
    run.inputs.append(str(real_dir))
    real = load_volume_dir(real_dir, a.real_split)
    if a.halves:
        real, synth = split_halves(real, cfg.seed)
        label = "real-half-vs-real-half"
    elif a.noise:
        synth = noise_volumes(len(real), real, cfg.seed)
        label = "real-vs-noise"
    else:
        if not a.synth:
            raise CLIError("evaluate needs --synth DIR, --halves or --noise")
        sd = _input_dir(a.synth)
        run.inputs.append(str(sd))
        synth = load_volume_dir(sd)
        label = "real-vs-synth"
    reports = evaluate_corpora(real, synth, cfg.metric_config())
    for r in reports:
        r.config_digest = cfg.digest
    p = write_metric_csv(run.out / "metrics.csv", reports)
    run.outputs.append(p)
    run.extra["comparison"] = label


def cmd_mask(run: Run):
    a, cfg = run.args, run.cfg
    H, W = a.grid if a.grid else cfg["phantom"]["grid"][:2]
    m = radial_mask(H, W, a.R, seed=cfg.seed)
    run.outputs.append(write_kst(run.out / "mask.kst", m.mask.astype(np.float64)))
    run.outputs.append(export_png(m.mask.astype(np.float64), run.out / "mask.png"))
    run.extra["mask"] = {"R": m.R, "spokes": m.spoke_count, "fraction": m.fraction}
    if a.corpus:
        src = _input_dir(a.corpus)
        run.inputs.append(str(src))
        rows = []
        for i, k in enumerate(load_volume_dir(src)):
            if k.shape[:2] != (H, W):
                raise CLIError(f"mask grid {(H, W)} does not match corpus grid {k.shape[:2]}")
            for t in range(k.shape[2]):
                ref = np.fft.ifft2(k[:, :, t])
                zf = zero_filled_recon(apply_mask(Spectrum(k[:, :, t]), m), ref)
                rows.append([i, t, zf.psnr, zf.ssim, zf.mse])
        p = run.out / "zero_filled.csv"
        write_metric_csv(p, rows, header=("volume", "frame", "psnr", "ssim", "mse"))
        run.outputs.append(p)


def cmd_export_png(run: Run):
    a = run.args
    src = _input_dir(a.input)
    run.inputs.append(str(src))
    files = sorted(src.glob("*.kst")) if src.is_dir() else [src]
    for f in files:
        arr = read_kst(f)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        frames = range(arr.shape[2]) if a.frames is None else a.frames
        for t in frames:
            if not 0 <= t < arr.shape[2]:
                raise CLIError(f"{f.name}: frame {t} out of range (T={arr.shape[2]})")
            frame = arr[:, :, t]
            if a.domain == "kspace":
                img = np.fft.fftshift(frame if a.source == "kspace" else np.fft.fft2(frame))
                run.outputs.append(export_png(img, run.out / png_name(f.stem, t, "kspace"), log=True))
            else:
                img = np.fft.ifft2(frame) if a.source == "kspace" else frame
                run.outputs.append(export_png(img, run.out / png_name(f.stem, t, "image")))


def cmd_ablation(run: Run):
    cfg = run.cfg
    seeds = run.args.seeds or [cfg.seed]
    res = run_ablation(cfg, seeds)
    p1 = write_metric_csv(run.out / "ablation.csv", res.table(), header=TABLE_HEADER)
    rows = [[r[k] for k in PER_SEED_HEADER] for r in res.per_seed]
    p2 = write_metric_csv(run.out / "ablation_per_seed.csv", rows, header=PER_SEED_HEADER)
    run.outputs += [p1, p2]


COMMANDS = {
    "phantom": cmd_phantom,
    "fuse": cmd_fuse,
    "train-codec": cmd_train_codec,
    "train-diffusion": cmd_train_diffusion,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
    "mask": cmd_mask,
    "export-png": cmd_export_png,
    "ablation": cmd_ablation,
}


def _parse_set(items: Sequence[str]) -> dict:
    tree: dict = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = tree
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return tree


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ksyn", description="k-space synthesis toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file (default: desk preset)")
        p.add_argument("--out", help="output directory (default: config output_dir)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. codec.iterations=500")
        p.add_argument("--allow-digest-mismatch", action="store_true",
                       help="load checkpoints written under a different config")
        return p

    p = common(sub.add_parser("phantom", help="generate a phantom corpus"))
    p.add_argument("--n", type=int, help="number of volumes (corpus.n)")
    p.add_argument("--train-size", type=int, help="PCA-selected training subset size")

    p = common(sub.add_parser("fuse", help="write fused k-space volumes"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--n", type=int, default=10)

    p = common(sub.add_parser("train-codec", help="train the compression model"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--iterations", type=int)

    p = common(sub.add_parser("train-diffusion", help="train the latent denoiser"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--no-fusion", dest="fusion", action="store_false", help="train without fusion augmentation")

    p = common(sub.add_parser("synthesize", help="sample synthetic k-space volumes"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--codec", required=True)
    p.add_argument("--denoiser", required=True)
    p.add_argument("--n", type=int, help="number of volumes (synthesis.n)")
    p.add_argument("--strength", type=float, help="guidance strength in [0, 1]")

    p = common(sub.add_parser("evaluate", help="FD / KID / MMD^2 report"))
    p.add_argument("--real", required=True)
    p.add_argument("--real-split", choices=["train", "heldout"], default=None)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--synth")
    g.add_argument("--halves", action="store_true", help="compare two random halves of --real")
    g.add_argument("--noise", action="store_true", help="compare --real with matched noise")
    p.add_argument("--domain", choices=["kspace", "image"])

    p = common(sub.add_parser("mask", help="radial mask and zero-filled baseline"))
    p.add_argument("--R", type=float, required=True)
    p.add_argument("--grid", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--corpus", help="score zero-filled reconstructions of this corpus")

    p = common(sub.add_parser("export-png", help="export KST frames as 8-bit PNG"))
    p.add_argument("--input", required=True, help="KST file or directory")
    p.add_argument("--domain", choices=["kspace", "image"], default="image")
    p.add_argument("--source", choices=["kspace", "image"], default="kspace",
                   help="domain the stored arrays are in")
    p.add_argument("--frames", type=int, nargs="*")

    p = common(sub.add_parser("ablation", help="Real vs fusion-augmented ablation table"))
    p.add_argument("--seeds", type=int, nargs="*")
    return ap


def _overrides(args) -> dict:
    o = _parse_set(args.set)
    if args.seed is not None:
        o["seed"] = args.seed
    cmd = args.command
    if cmd == "phantom":
        if args.n is not None:
            o.setdefault("corpus", {})["n"] = args.n
        if args.train_size is not None:
            o.setdefault("corpus", {})["train_size"] = args.train_size
    if cmd == "train-codec" and args.iterations is not None:
        o.setdefault("codec", {})["iterations"] = args.iterations
    if cmd == "train-diffusion" and args.iterations is not None:
        o.setdefault("diffusion", {})["iterations"] = args.iterations
    if cmd == "synthesize":
        if args.n is not None:
            o.setdefault("synthesis", {})["n"] = args.n
        if args.strength is not None:
            o.setdefault("synthesis", {})["strength"] = args.strength
    if cmd == "evaluate" and args.domain:
        o.setdefault("metrics", {})["domain"] = args.domain
    return o


def _fail(command: str, exc: BaseException, code: int) -> int:
    diag = {"error": type(exc).__name__, "message": str(exc), "subcommand": command}
    print(json.dumps(diag, sort_keys=True), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as e:
        return _fail(args.command, e, EXIT_USAGE)
    run = Run(args, cfg)
    try:
        with DirectoryLock(run.out):
            COMMANDS[args.command](run)
            run.manifest()
    except (CLIError, KSTError, DigestMismatchError, LockError, ConfigError, ValueError,
            FileNotFoundError, FloatingPointError) as e:
        return _fail(args.command, e, EXIT_FAILURE)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

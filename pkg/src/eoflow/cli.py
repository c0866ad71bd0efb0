"""Command-line entry point: ``eoflow <command> [--config F] [--out DIR] [--seed N] ...``.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import datasets as ds
from . import pipelines as pl
from .config import CliConfig, load_config
from .errors import CheckpointError, ConfigError, DataFormatError, NumericalError
from .flow import affine_model, build_model, load_checkpoint, save_checkpoint
from .imaging import as_image, normalize, psnr, tile, write_pnm
from .metrics import entropy_spectrum, mpmi_matrix
from .training import TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# shared helpers

class Run:
    """Resolved configuration plus output directory for one command."""

    def __init__(self, command: str, cfg: CliConfig, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(cfg.to_ini())

    @property
    def provenance(self) -> str:
        return f"eoflow {self.command} config_sha256={self.cfg.digest()}"

    def write_csv(self, name, header, rows) -> Path:
        path = self.out / name
        with open(path, "w", newline="") as fh:
            fh.write(f"# {self.provenance}\n")
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_cell(v) for v in row])
        return path

    def rng(self, stream=0):
        return np.random.default_rng([self.cfg["eval"]["seed"], stream])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def load_data(cfg: CliConfig) -> ds.Dataset:
    d = cfg["data"]
    source = d["source"]
    if source == "ring2d":
        return ds.ring2d_dataset(d["n"], d["radius_mean"], d["radius_std"], d["seed"])
    if source == "gaussian":
        variances = cfg.float_list("data", "variances")
        if len(variances) != d["dim"]:
            raise ConfigError("[data] variances must list one value per dimension")
        return ds.gaussian_dataset(d["dim"], variances, d["n"], d["seed"])
    if source == "mixture":
        return ds.prototype_mixture(d["dim"], d["n"], d["seed"])
    if source == "idx":
        if not d["path"]:
            raise ConfigError("[data] path is required for source=idx")
        return ds.load_idx(d["path"], d["labels"] or None)
    if source == "file":
        if not d["path"]:
            raise ConfigError("[data] path is required for source=file")
        return ds.load_samples(d["path"])
    raise ConfigError(f"unknown [data] source {source!r}")


def _eval_rows(run: Run, data: ds.Dataset) -> np.ndarray:
    n = min(data.n, run.cfg["eval"]["samples"])
    return data.samples[:n]


def _noisy(run: Run, clean: np.ndarray) -> np.ndarray:
    path = run.cfg["data"]["noisy_path"]
    if path:
        noisy = ds.load_samples(path).samples[:len(clean)]
        if noisy.shape != clean.shape:
            raise DataFormatError("noisy data does not match the clean data shape")
        return noisy
    return ds.inflate(clean, run.cfg["eval"]["noise_sigma"], run.rng(1))


def _checkpoint(run: Run):
    path = run.cfg["eval"]["checkpoint"]
    if not path:
        raise ConfigError("[eval] checkpoint is required (use --checkpoint)")
    return load_checkpoint(path)


def _save_images(run: Run, prefix, rows, shape, per_image=None):
    if shape is None:
        return
    per_image = run.cfg["eval"]["per_image"] if per_image is None else per_image
    imgs = [as_image(r, shape) for r in rows[:run.cfg["eval"]["max_images"]]]
    if per_image:
        imgs = [normalize(i) for i in imgs]
    write_pnm(run.out / f"{prefix}.pgm" if len(shape) == 2 else run.out / f"{prefix}.ppm",
              tile(imgs, min(len(imgs), 8)), per_image=False)


# ---------------------------------------------------------------------------
# commands

def cmd_train(run: Run):
    cfg = run.cfg
    data = load_data(cfg)
    m, t = cfg["model"], cfg["train"]
    if m["kind"] == "flow":
        model = build_model(data.dim, m["blocks"], m["width"], m["depth"], m["clamp"], m["seed"],
                            m["rotation"])
    elif m["kind"] == "affine":
        model = affine_model(np.eye(data.dim))
    else:
        raise ConfigError(f"[model] kind must be flow or affine for training, got {m['kind']!r}")
    if t["mode"] == "total":
        weights = {"tc": t["lambda_tc"]}
    else:
        weights = {"core": t["lambda_core"], "detail": t["lambda_detail"], "cd": t["lambda_cd"]}
    tc = TrainConfig(batch_size=t["batch_size"], steps=t["steps"], lr=t["lr"], warmup=t["warmup"],
                     lr_decay=t["lr_decay"], weight_decay=t["weight_decay"], mode=t["mode"],
                     weights=weights, estimator=t["estimator"],
                     core_size=t["core_size"] or None, noise_sigma=t["noise_sigma"],
                     seed=t["seed"], log_every=t["log_every"],
                     checkpoint_every=t["checkpoint_every"], grad_clip=t["grad_clip"] or None)
    try:
        tc.validate(data.dim)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    model, log = train(model, data, tc, run.out, resume=t["resume"], provenance=run.provenance)
    last = log.records[-1] if len(log) else {}
    print(f"trained to step {model.meta['step']}: l_ml={last.get('l_ml', float('nan')):.6f} "
          f"l_tc={last.get('l_tc', float('nan')):.6f}")


def cmd_pca(run: Run):
    data = load_data(run.cfg)
    model = pl.pca_model(data.samples)
    save_checkpoint(model, run.out / "model.eofl")
    print(f"wrote PCA flow for D={model.dim} to {run.out / 'model.eofl'}")


def cmd_spectrum(run: Run):
    model = _checkpoint(run)
    e = run.cfg["eval"]
    x = _eval_rows(run, load_data(run.cfg))
    spectrum = entropy_spectrum(model, x, e["noise_sigma"], from_model=e["from_model"],
                            n=e["samples"], rng=run.rng(), full_constants=e["full_constants"])
    rows = [list(r) for r in spectrum.rows()]
    rows.append(["floor", "", spectrum.floor if spectrum.floor is not None else "", ""])
    run.write_csv("spectrum.csv", ["rank", "latent_index", "entropy", "std_err"], rows)
    print(f"{spectrum.above_floor()} of {spectrum.dim} dimensions above the noise floor")


def _core_sizes(run: Run, dim):
    sizes = run.cfg.int_list("eval", "core_sizes") or list(range(dim + 1))
    bad = [c for c in sizes if not 0 <= c <= dim]
    if bad:
        raise ConfigError(f"[eval] core_sizes outside 0..{dim}: {bad}")
    return sizes


def cmd_reconstruct(run: Run):
    model = _checkpoint(run)
    data = load_data(run.cfg)
    x = _eval_rows(run, data)
    mode = run.cfg["eval"]["detail_mode"]
    order = pl.latent_order(model, x)
    rows = []
    for c in _core_sizes(run, model.dim):
        rec = pl.reconstruct(model, x, c, order, mode, run.rng(c))
        rows.append([c, mode, float(np.mean((rec - x) ** 2)),
                     float(np.mean([psnr(a, b) for a, b in zip(x, rec)]))])
        np.save(run.out / f"reconstruction_C{c}.npy", rec)
        _save_images(run, f"reconstruction_C{c}", rec, data.image_shape)
    run.write_csv("reconstruct.csv", ["core_size", "mode", "mse", "psnr"], rows)


def cmd_rate_distortion(run: Run):
    model = _checkpoint(run)
    data = load_data(run.cfg)
    clean = _eval_rows(run, data)
    noisy = _noisy(run, clean)
    result = pl.rate_distortion(model, clean, noisy, _core_sizes(run, model.dim), rng=run.rng(2),
                                image_shape=data.image_shape)
    rows = [[p.core_size, p.mode, p.mse, p.psnr, p.ssim, int(result.bound_ok[p.core_size])]
            for p in result.points]
    run.write_csv("rate_distortion.csv", ["core_size", "mode", "mse", "psnr", "ssim", "bound_ok"],
                  rows)
    bad = [c for c, ok in result.bound_ok.items() if not ok]
    print("sample/zero MSE bound holds for all core sizes" if not bad
          else f"sample/zero MSE bound violated for core sizes {bad}")


def cmd_denoise(run: Run):
    model = _checkpoint(run)
    data = load_data(run.cfg)
    clean = _eval_rows(run, data)
    noisy = _noisy(run, clean)
    sigma = run.cfg["eval"]["noise_sigma"]
    out = pl.denoise(model, noisy, sigma)
    np.save(run.out / "denoised.npy", out)
    p_noisy = float(np.mean([psnr(a, b) for a, b in zip(clean, noisy)]))
    p_out = float(np.mean([psnr(a, b) for a, b in zip(clean, out)]))
    run.write_csv("denoise.csv", ["metric", "value"],
                  [["sigma", sigma], ["psnr_noisy", p_noisy], ["psnr_denoised", p_out]])
    _save_images(run, "noisy", noisy, data.image_shape)
    _save_images(run, "denoised", out, data.image_shape)
    print(f"PSNR noisy {p_noisy:.3f} dB -> denoised {p_out:.3f} dB")


def cmd_archetypes(run: Run):
    model = _checkpoint(run)
    data = load_data(run.cfg)
    x = _eval_rows(run, data)
    e = run.cfg["eval"]
    order = pl.latent_order(model, x)
    ranks = run.cfg.int_list("eval", "dims") or list(range(min(model.dim, e["k"] or 8)))
    if any(not 0 <= r < model.dim for r in ranks):
        raise ConfigError(f"[eval] dims must be ranks in 0..{model.dim - 1}")
    dims = order[ranks]
    arch = pl.archetypes(model, dims, e["magnitude"], x)
    rows = []
    for r, d, pos, neg, col in zip(ranks, dims, arch.positive, arch.negative, arch.mean_columns):
        rows.append([r, int(d), "positive", *pos])
        rows.append([r, int(d), "negative", *neg])
        rows.append([r, int(d), "mean_jacobian", *col])
    rows.append(["", "", "origin", *arch.origin])
    run.write_csv("archetypes.csv", ["rank", "latent_index", "kind"]
                  + [f"x{i}" for i in range(model.dim)], rows)
    shape = data.image_shape
    if shape is not None:
        for r, pos, neg, col, con in zip(ranks, arch.positive, arch.negative, arch.mean_columns,
                                         arch.contrast):
            for name, img in (("pos", pos), ("neg", neg), ("mean_jacobian", col),
                              ("contrast", con)):
                write_pnm(run.out / f"archetype_{r}_{name}.{'pgm' if len(shape) == 2 else 'ppm'}",
                          as_image(img, shape), per_image=name in ("mean_jacobian", "contrast")
                          or e["per_image"])


def cmd_mpmi(run: Run):
    model = _checkpoint(run)
    x = _eval_rows(run, load_data(run.cfg))
    k = run.cfg["eval"]["k"] or model.dim
    if not 1 <= k <= model.dim:
        raise ConfigError(f"[eval] k must lie in 1..{model.dim}")
    mat = mpmi_matrix(model, x, k)
    header = ["latent_index"] + [str(int(d)) for d in mat.dims]
    rows = [[int(d), *mat.values[i]] for i, d in enumerate(mat.dims)]
    run.write_csv("mpmi.csv", header, rows)
    off = mat.values[~np.eye(k, dtype=bool)] if k > 1 else np.zeros(1)
    print(f"max pairwise MMI {off.max():.6g}")


COMMANDS = {
    "train": cmd_train,
    "pca": cmd_pca,
    "spectrum": cmd_spectrum,
    "reconstruct": cmd_reconstruct,
    "rate-distortion": cmd_rate_distortion,
    "denoise": cmd_denoise,
    "archetypes": cmd_archetypes,
    "mpmi": cmd_mpmi,
}

# per-command convenience flags, each an alias of a config key
_FLAGS = {
    "--checkpoint": "eval.checkpoint",
    "--data": "data.path",
    "--sigma": "eval.noise_sigma",
    "--core-sizes": "eval.core_sizes",
    "--detail-mode": "eval.detail_mode",
    "--k": "eval.k",
    "--dims": "eval.dims",
    "--magnitude": "eval.magnitude",
    "--steps": "train.steps",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eoflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file with [model] [train] [data] [eval] sections")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, help="seed for model init, training and evaluation")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        for flag, key in _FLAGS.items():
            p.add_argument(flag, dest="alias_" + key.replace(".", "__"), metavar="VALUE",
                           help=f"alias for --set {key}=VALUE")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from --out checkpoint")
    return parser


def resolve(args) -> CliConfig:
    overrides = list(args.set)
    for key, value in vars(args).items():
        if key.startswith("alias_") and value is not None:
            overrides.append(f"{key[6:].replace('__', '.')}={value}")
    if args.seed is not None:
        overrides += [f"{s}.seed={args.seed}" for s in ("model", "train", "eval")]
    if getattr(args, "resume", False):
        overrides.append("train.resume=true")
    return load_config(args.config, overrides)


def _thread_limit():
    value = os.environ.get("EOFLOW_THREADS")
    if not value:
        return nullcontext()
    return threadpool_limits(limits=max(1, int(value)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        run = Run(args.command, cfg, Path(args.out))
        with _thread_limit():
            COMMANDS[args.command](run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

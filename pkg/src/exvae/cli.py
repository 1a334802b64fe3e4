"""Command line entry point: ``exvae {train,eval,sample,augment,parzen}``.

Options come from an optional ``key = value`` file (``--config``) and are
overridden by flags.  Every run needs a seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import augment, evaluate, model, sampler
from .config import AugConfig, TrainConfig, build, parse_kv, substream
from .data import dynamic_binarize, load_idx, split
from .errors import ConfigError, ExVAEError
from .numerics import io as ckpt_io
from .prior import MixtureView, fit_bandwidth, parzen_log_density
from .trainer import train


DEFAULT_DATA = Path(__file__).resolve().parents[2] / "data"
DEFAULT_IMAGES = DEFAULT_DATA / "mnist5k-images-idx3-ubyte.gz"
DEFAULT_LABELS = DEFAULT_DATA / "mnist5k-labels-idx1-ubyte.gz"



def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--images", help="IDX image file (gzip ok)")
    p.add_argument("--labels", help="IDX label file (gzip ok)")
    p.add_argument("--split", help="train,valid,test sizes, e.g. 4000,500,500")
    p.add_argument("--split-seed", type=int, help="seed of the train/valid/test permutation (default 0)")
    p.add_argument("--out", help="output directory or file")
    p.add_argument("--threads", type=int, help="cap BLAS threads (also EXVAE_THREADS)")


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--d-z", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--subsample-ratio", type=float)
    p.add_argument("--k-neighbors", type=int)
    p.add_argument("--anneal-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--prior", help="exemplar | gaussian (standard-gaussian accepted)")
    p.add_argument("--loo", choices=["true", "false"])
    p.add_argument("--knn-mode", choices=["within", "filter"])
    p.add_argument("--knn-query", choices=["mean", "z"])
    p.add_argument("--dtype", choices=["float32", "float64"])


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="exvae", description="Exemplar VAE toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an Exemplar VAE or the Gaussian-prior baseline")
    _add_common(p)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="IWAE bound, ELBO split, active dims, kNN error")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--iwae-samples", type=int)
    p.add_argument("--knn-k", type=int)
    p.add_argument("--limit", type=int, help="evaluate only the first N test rows")
    p.add_argument("--latents", help="write test-set encoder means as CSV")
    p.add_argument("--prior", help="exemplar | gaussian (default: read from the run's config.json)")

    p = sub.add_parser("sample", help="draw image grids from a trained model")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=["generate", "conditioned", "iterate", "interpolate"])
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--index", type=int, help="exemplar index (conditioned, iterate, interpolate start)")
    p.add_argument("--index-b", type=int, help="interpolation end exemplar")
    p.add_argument("--noise-seed", choices=["true", "false"], help="iterate from uniform noise")
    p.add_argument("--idx", help="also write the samples as an IDX image file")

    p = sub.add_parser("augment", help="classifier with generative augmentation, swept over lambda")
    _add_common(p)
    p.add_argument("--vae", help="trained VAE checkpoint")
    p.add_argument("--lams", help="comma-separated lambda grid (default 0.4,1.0)")
    p.add_argument("--seeds", help="comma-separated classifier seeds (default: --seed)")
    p.add_argument("--smoothing", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--union", choices=["true", "false"])

    p = sub.add_parser("parzen", help="pixel-space Parzen window baseline")
    _add_common(p)
    p.add_argument("--limit", type=int, help="score only the first N test rows")
    return ap


def _values(args: argparse.Namespace) -> dict:
    """File values overridden by explicitly given flags."""
    values = {}
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc.strerror}") from None
        values.update(parse_kv(text))
    for k, v in vars(args).items():
        if k in ("command", "verbose", "config") or v is None:
            continue
        values[k] = v
    if values.get("prior") == "standard-gaussian":
        values["prior"] = "gaussian"
    return values


def _threads(values: dict):
    n = values.pop("threads", None) or os.environ.get("EXVAE_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def load_splits(values: dict):
    images = values.pop("images", None) or DEFAULT_IMAGES
    labels = values.pop("labels", None) or DEFAULT_LABELS
    for path in (images, labels):
        if not Path(path).exists():
            raise FileNotFoundError(f"no such data file: {path}")
    ds = load_idx(images, labels)
    sizes = values.pop("split", None)
    sizes = tuple(int(s) for s in str(sizes).split(",")) if sizes else _default_split(len(ds))
    return split(ds, sizes, int(values.pop("split_seed", 0)))


def _default_split(n: int) -> tuple[int, int, int]:
    n_valid = n_test = n // 10
    return n - n_valid - n_test, n_valid, n_test


def _load_params(path) -> dict[str, np.ndarray]:
    if not path:
        raise ConfigError("checkpoint required")
    blocks = ckpt_io.load(path)
    names = model.param_shapes(*model.dims(blocks), blocks["enc.h1.W"].shape[1])
    return {k: np.asarray(blocks[k], dtype=np.float64) for k in names}


def _pop(values: dict, key: str, default=None, cast=None):
    v = values.pop(key, None)
    if v is None:
        return default
    return cast(v) if cast else v


def _require_seed(values: dict) -> int:
    if values.get("seed") is None:
        raise ConfigError("seed required")
    return int(values.pop("seed"))


def cmd_train(values: dict) -> int:
    out = values.pop("out", None) or "runs/train"
    train_set, valid_set, _ = load_splits(values)
    cfg, _ = build(TrainConfig, values)
    res = train(train_set, valid_set, cfg, out)
    final = res.log[-1]["valid_elbo"] if res.log else float("nan")
    print(f"final valid ELBO {final:.4f} (best {res.best_valid_elbo:.4f} at epoch {res.best_epoch})")
    return 0


def cmd_eval(values: dict) -> int:
    seed = _require_seed(values)
    ckpt = values.pop("checkpoint", None)
    S = _pop(values, "iwae_samples", 5000, int)
    k = _pop(values, "knn_k", 5, int)
    limit = _pop(values, "limit", None, int)
    latents = values.pop("latents", None)
    prior = values.pop("prior", None) or _run_prior(ckpt)
    out = values.pop("out", None)
    train_set, _, test_set = load_splits(values)
    if values:
        raise ConfigError(f"unknown config key: {sorted(values)[0]}")
    params = _load_params(ckpt)
    gaussian = prior == "gaussian"
    train_means = model.prior_encode_batched(params, train_set.images).astype(np.float64)
    view = None if gaussian else MixtureView(train_means, model.sigma2(params))
    x = test_set.images if limit is None else test_set.images[:limit]
    x = dynamic_binarize(x, substream(seed, "eval-binarize"))
    bound = evaluate.iwae_bound(x, params, view, S, substream(seed, "eval-iwae"))
    kl, nrec = evaluate.elbo_decompose(x, params, view, substream(seed, "eval-elbo"))
    test_means = model.prior_encode_batched(params, test_set.images).astype(np.float64)
    knn = {}
    for kk in sorted({1, k, 9}):
        knn[str(kk)] = evaluate.knn_classify(train_means, train_set.labels, test_means, test_set.labels, kk)
    report = evaluate.EvalReport([float(b) for b in np.atleast_1d(bound)], float(np.mean(bound)), kl, nrec,
                                 evaluate.active_dimensions(test_means), model.dims(params)[1], S, knn)
    text = report.to_json()
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    if latents:
        evaluate.export_latents_csv(latents, test_means, test_set.labels)
    print(f"IWAE({S}) {report.iwae_mean:.4f}  KL {kl:.4f}  -recon {nrec:.4f}  active {report.active_dims}/"
          f"{report.d_z}  kNN(k={k}) error {knn[str(k)]:.2f}%")
    return 0


def _run_prior(ckpt) -> str:
    cfg_path = Path(ckpt).parent / "config.json" if ckpt else None
    if cfg_path is not None and cfg_path.exists():
        return json.loads(cfg_path.read_text()).get("prior", "exemplar")
    return "exemplar"


def cmd_sample(values: dict) -> int:
    seed = _require_seed(values)
    params = _load_params(values.pop("checkpoint", None))
    mode = _pop(values, "mode", "generate")
    rows, cols = _pop(values, "rows", 8, int), _pop(values, "cols", 8, int)
    steps = _pop(values, "steps", rows * cols, int)
    index, index_b = _pop(values, "index", 0, int), _pop(values, "index_b", 1, int)
    noise = str(_pop(values, "noise_seed", "false")).lower() == "true"
    idx_path = values.pop("idx", None)
    out = values.pop("out", None) or "samples.pgm"
    train_set, _, _ = load_splits(values)
    if values:
        raise ConfigError(f"unknown config key: {sorted(values)[0]}")
    rng = substream(seed, "sample")
    pool = train_set.images
    if mode == "generate":
        batch = sampler.generate(params, pool, rows * cols, rng)
    elif mode == "conditioned":
        batch = sampler.conditioned(params, pool[index], rows * cols, rng)
    elif mode == "iterate":
        batch = sampler.iterate(params, None if noise else pool[index], steps, rng)
    else:
        batch = sampler.interpolate(params, pool[index], pool[index_b], steps)
    if len(batch.images) > rows * cols:
        raise ConfigError(f"{len(batch.images)} samples do not fit a {rows}x{cols} grid")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    sampler.write_pgm(out, batch.images, rows, cols, train_set.shape)
    if idx_path:
        sampler.write_images_idx(idx_path, batch.images, train_set.shape)
    print(f"wrote {len(batch.images)} {mode} samples to {out}")
    return 0


def cmd_augment(values: dict) -> int:
    vae_path = values.pop("vae", None)
    lams = [float(v) for v in str(values.pop("lams", "0.4,1.0")).split(",")]
    seed = _require_seed(values)
    seeds = [int(s) for s in str(values.pop("seeds", seed)).split(",")]
    out = Path(values.pop("out", None) or "runs/augment")
    train_set, valid_set, test_set = load_splits(values)
    vae = _load_params(vae_path) if any(l < 1 for l in lams) else None
    out.mkdir(parents=True, exist_ok=True)
    base, _ = build(AugConfig, dict(values, seed=seeds[0]))
    opt = {"optimizer": "adam with per-block gradient normalization", "schedule": "constant",
           **{k: v for k, v in dataclasses.asdict(base).items() if k not in ("seed", "lam")},
           "lams": lams, "seeds": seeds, "vae": vae_path}
    (out / "aug_config.json").write_text(json.dumps(opt, sort_keys=True, indent=1) + "\n")
    rows = []
    for lam in lams:
        errs = []
        for s in seeds:
            cfg, _ = build(AugConfig, dict(values, seed=s, lam=lam))
            res = augment.train_classifier(train_set, valid_set, vae, cfg, test=test_set,
                                           log_path=out / f"curve_lam{lam:g}_seed{s}.jsonl")
            errs.append(res.test_error)
        rows.append({"lam": lam, "hidden": f"2x{cfg.hidden}", "test_error_mean": float(np.mean(errs)),
                     "test_error_std": float(np.std(errs)), "seeds": seeds, "errors": errs})
    with open(out / "sweep.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    print("lambda\thidden\ttest error (%)")
    for r in rows:
        print(f"{r['lam']:g}\t{r['hidden']}\t{r['test_error_mean']:.2f} +- {r['test_error_std']:.2f}")
    return 0


def cmd_parzen(values: dict) -> int:
    _require_seed(values)
    limit = _pop(values, "limit", None, int)
    out = values.pop("out", None)
    train_set, valid_set, test_set = load_splits(values)
    if values:
        raise ConfigError(f"unknown config key: {sorted(values)[0]}")
    s2 = fit_bandwidth(train_set.images, valid_set.images)
    x = test_set.images if limit is None else test_set.images[:limit]
    score = float(np.mean(parzen_log_density(x, train_set.images, s2)))
    report = {"sigma2": s2, "sigma": float(np.sqrt(s2)), "test_log_density": score, "n_test": len(x)}
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    print(f"Parzen sigma {report['sigma']:.4f}: mean test log density {score:.4f}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sample": cmd_sample, "augment": cmd_augment,
            "parzen": cmd_parzen}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        values = _values(args)
        if values.get("seed") is None:
            raise ConfigError("seed required")
        with _threads(values):
            return COMMANDS[args.command](values)
    except (ExVAEError, ValueError, OSError) as exc:
        print(f"exvae {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""``shrinkdeconv`` command line.

Exit codes: 0 success, 2 I/O failure, 3 validation failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import admm
from .imgproc import (
    BOUNDARY_MODES,
    ImageFormatError,
    KernelError,
    add_gaussian_noise,
    blur,
    psnr,
    random_kernel_size,
    random_motion_kernel,
    read_image,
    read_kernel,
    ssim,
    synthetic_image,
    write_image,
    write_kernel,
)
from .modelio import ModelFormatError, load_model
from .train import TrainingDiverged
from .xsolver import SolverError

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3, 4
IMAGE_SUFFIXES = (".png", ".pfm", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg")
ABLATION_VARIANTS = ("cg", "fft", "fft+edgetaper")

log = logging.getLogger("shrinkdeconv")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        self.code = code
        super().__init__(message)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _validation(msg):
    return CliError(msg, EXIT_VALIDATION)


def _load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"no such image: {path}", EXIT_IO)
    try:
        img = read_image(path)
    except (OSError, ImageFormatError) as err:
        raise CliError(f"cannot read image {path}: {err}", EXIT_IO) from err
    if not np.all(np.isfinite(img)):
        raise _validation(f"{path}: image has non-finite values")
    return img


def _load_kernel(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"no such kernel file: {path}", EXIT_IO)
    try:
        return read_kernel(path)[0]
    except OSError as err:
        raise CliError(f"cannot read kernel {path}: {err}", EXIT_IO) from err


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise CliError(f"cannot create output directory {out}: {err}", EXIT_IO) from err
    return out


def _list_images(directory) -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise CliError(f"not a directory: {d}", EXIT_IO)
    found = {}
    for p in sorted(d.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file():
            if p.stem in found:
                raise _validation(f"{d}: two images named {p.stem!r}")
            found[p.stem] = p
    return found


def _map(fn, items, jobs: int):
    """Order-preserving map, optionally over worker processes."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _write_table(rows: list[dict], fmt: str, out: Path | None):
    if fmt == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
        text = buf.getvalue()
    if out is None:
        sys.stdout.write(text)
    else:
        try:
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(text)
        except OSError as err:
            raise CliError(f"cannot write report {out}: {err}", EXIT_IO) from err


# ---------------------------------------------------------------------------
# simulate


def simulate_observation(gt: np.ndarray, kernel: np.ndarray, sigma: float, noise_seed: int,
                         boundary: str) -> np.ndarray:
    return add_gaussian_noise(blur(gt, kernel, boundary), sigma, noise_seed)


def replay_sidecar(sidecar) -> np.ndarray:
    """Regenerate the blurry image described by a ``simulate`` sidecar."""
    sidecar = Path(sidecar)
    meta = json.loads(sidecar.read_text())
    gt = read_image(meta["image"])
    k = read_kernel(sidecar.parent / meta["kernel"])[0]
    return simulate_observation(gt, k, meta["sigma"], meta["noise_seed"], meta["boundary"])


def cmd_simulate(args) -> int:
    if args.sigma < 0 or not math.isfinite(args.sigma):
        raise _validation("--sigma must be a finite non-negative number")
    gt = _load_image(args.image)
    rng = np.random.default_rng(args.seed)
    if args.random_kernel:
        size = args.kernel_size if args.kernel_size else random_kernel_size(rng)
        if size % 2 == 0 or size < 3:
            raise _validation("--kernel-size must be odd and >= 3")
        k = random_motion_kernel(size, rng)
    else:
        k = _load_kernel(args.kernel)
    if k.shape[0] > gt.shape[0] or k.shape[1] > gt.shape[1]:
        raise _validation(f"kernel {k.shape} larger than image {gt.shape[:2]}")
    noise_seed = int(rng.integers(0, 2**31 - 1))
    y = simulate_observation(gt, k, args.sigma, noise_seed, args.boundary)
    out = _out_dir(args.out)
    stem = Path(args.image).stem
    blurry_path = out / f"{stem}.{args.format}"
    kernel_path = out / f"{stem}.kernel.txt"
    meta = {
        "image": str(Path(args.image).resolve()),
        "blurry": blurry_path.name,
        "kernel": kernel_path.name,
        "kernel_shape": list(k.shape),
        "sigma": args.sigma,
        "seed": args.seed,
        "noise_seed": noise_seed,
        "boundary": args.boundary,
    }
    try:
        write_image(blurry_path, y)
        write_kernel(kernel_path, k)
        (out / f"{stem}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as err:
        raise CliError(f"cannot write outputs: {err}", EXIT_IO) from err
    print(blurry_path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# deblur


def _sidecar_for(blurry: Path) -> Path | None:
    p = blurry.with_suffix(".json")
    return p if p.is_file() else None


def _resolve_kernel(blurry: Path, kernel_arg) -> np.ndarray:
    sidecar = _sidecar_for(blurry)
    side_k = None
    if sidecar is not None:
        try:
            meta = json.loads(sidecar.read_text())
            side_k = _load_kernel(sidecar.parent / meta["kernel"])
        except (KeyError, json.JSONDecodeError) as err:
            raise _validation(f"{sidecar}: malformed sidecar ({err})") from err
    if kernel_arg is None:
        if side_k is None:
            raise _validation("no kernel given and no sidecar found next to the blurry image")
        return side_k
    k = _load_kernel(kernel_arg)
    if side_k is not None and (k.shape != side_k.shape or not np.allclose(k, side_k, atol=1e-9)):
        raise _validation(f"kernel {kernel_arg} does not match sidecar {sidecar}")
    return k


def _build_model(args):
    if args.model:
        try:
            model = load_model(args.model)
        except OSError as err:
            raise CliError(f"cannot read model {args.model}: {err}", EXIT_IO) from err
        overrides = {}
        if args.solver:
            overrides["solver"] = args.solver
        if args.boundary:
            overrides["boundary"] = args.boundary
        if overrides:
            from dataclasses import replace
            model = admm.Model(replace(model.config, **overrides), model.stages)
        return model
    kw = {}
    if args.stages is not None:
        kw["stages"] = args.stages
    if args.lam is not None:
        kw["lam"] = args.lam
    return admm.analytic_model(args.prior or "hyperlap", solver=args.solver or "cg",
                               boundary=args.boundary or "replicate", edgetaper=not args.no_edgetaper,
                               noise_adaptive=args.noise_adaptive, **kw)


def cmd_deblur(args) -> int:
    blurry = Path(args.blurry)
    y = _load_image(blurry)
    k = _resolve_kernel(blurry, args.kernel)
    model = _build_model(args)
    x, stats = admm.deblur(y, k, model, return_stats=True)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        write_image(out, x)
    except (OSError, ImageFormatError) as err:
        raise CliError(f"cannot write {out}: {err}", EXIT_IO) from err
    cfg = model.config
    print(f"stages={stats.stages} solver={cfg.solver} cg_iterations={sum(stats.cg_iterations)} "
          f"per_stage={stats.cg_iterations} wall={stats.seconds:.3f}s", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _score_pair(pair):
    name, rpath, gpath = pair
    r, g = read_image(rpath), read_image(gpath)
    if r.shape != g.shape:
        return {"image": name, "error": f"shape {r.shape} vs {g.shape}"}
    return {"image": name, "psnr": psnr(r, g, 1.0), "ssim": ssim(r, g, 1.0)}


def cmd_evaluate(args) -> int:
    restored, gt = _list_images(args.restored_dir), _list_images(args.gt_dir)
    missing = sorted(set(gt) - set(restored))
    extra = sorted(set(restored) - set(gt))
    if missing or extra:
        for n in missing:
            print(f"missing restored image for {n}", file=sys.stderr)
        for n in extra:
            print(f"no ground truth for {n}", file=sys.stderr)
        return EXIT_VALIDATION
    if not gt:
        raise _validation("no images found")
    try:
        rows = _map(_score_pair, [(n, restored[n], gt[n]) for n in sorted(gt)], args.jobs)
    except (OSError, ImageFormatError) as err:
        raise CliError(f"cannot read images: {err}", EXIT_IO) from err
    bad = [r for r in rows if "error" in r]
    if bad:
        for r in bad:
            print(f"{r['image']}: {r['error']}", file=sys.stderr)
        return EXIT_VALIDATION
    rows.append({"image": "mean", "psnr": float(np.mean([r["psnr"] for r in rows])),
                 "ssim": float(np.mean([r["ssim"] for r in rows]))})
    _write_table(rows, args.report, Path(args.out) if args.out else None)
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate


def _variant_model(variant: str, prior: str, boundary: str):
    solver = "cg" if variant == "cg" else "fft"
    return admm.analytic_model(prior, solver=solver, boundary=boundary, edgetaper=variant == "fft+edgetaper")


def _ablate_one(job):
    name, gt, index, a = job
    rng = np.random.default_rng([a["seed"], index])
    k = random_motion_kernel(a["kernel_size"], rng)
    noise_seed = int(rng.integers(0, 2**31 - 1))
    y = simulate_observation(gt, k, a["sigma"], noise_seed, a["boundary"])
    row = {"image": name, "blurry_psnr": psnr(np.clip(y, 0, 1), gt, 1.0)}
    for v in a["variants"]:
        t0 = time.perf_counter()
        x = admm.deblur(y, k, _variant_model(v, a["prior"], a["boundary"]))
        row[f"{v}:psnr"] = psnr(x, gt, 1.0)
        row[f"{v}:ssim"] = ssim(x, gt, 1.0)
        row[f"{v}:seconds"] = time.perf_counter() - t0
    return row


def ablation_table(per_image: list[dict], variants) -> list[dict]:
    rows = [{"variant": "blurry", "psnr": float(np.mean([r["blurry_psnr"] for r in per_image])),
             "ssim": float("nan"), "seconds": 0.0}]
    for v in variants:
        rows.append({"variant": v,
                     "psnr": float(np.mean([r[f"{v}:psnr"] for r in per_image])),
                     "ssim": float(np.mean([r[f"{v}:ssim"] for r in per_image])),
                     "seconds": float(np.mean([r[f"{v}:seconds"] for r in per_image]))})
    return rows


def run_ablation(images: list[tuple[str, np.ndarray]], variants=ABLATION_VARIANTS, *, prior="hyperlap",
                 sigma=0.01, kernel_size=17, boundary="replicate", seed=0, jobs=1):
    """Degrade each image, restore it with every variant and collect metrics."""
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise ValueError(f"unknown variant {v!r}; choose from {ABLATION_VARIANTS}")
    a = {"variants": list(variants), "prior": prior, "sigma": sigma, "kernel_size": kernel_size,
         "boundary": boundary, "seed": seed}
    per_image = _map(_ablate_one, [(n, g, i, a) for i, (n, g) in enumerate(images)], jobs)
    return per_image, ablation_table(per_image, variants)


def cmd_ablate(args) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in ABLATION_VARIANTS]
    if bad or not variants:
        raise _validation(f"unknown variants {bad}; choose from {', '.join(ABLATION_VARIANTS)}")
    if args.kernel_size % 2 == 0 or args.kernel_size < 3:
        raise _validation("--kernel-size must be odd and >= 3")
    if args.testset and args.synthetic:
        raise _validation("give either a test set directory or --synthetic, not both")
    if args.testset:
        images = [(n, _load_image(p)) for n, p in _list_images(args.testset).items()]
    elif args.synthetic:
        images = [(f"synthetic_{i:03d}", synthetic_image(args.size, args.size, seed=args.seed + i))
                  for i in range(args.synthetic)]
    else:
        raise _validation("need a test set directory or --synthetic N")
    if not images:
        raise _validation("test set is empty")
    per_image, table = run_ablation(images, variants, prior=args.prior, sigma=args.sigma,
                                    kernel_size=args.kernel_size, boundary=args.boundary,
                                    seed=args.seed, jobs=args.jobs)
    _write_table(table, args.report, Path(args.out) if args.out else None)
    if args.per_image:
        _write_table(per_image, args.report, Path(args.per_image))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / fit-prox


def load_train_schema() -> dict:
    return json.loads(resources.files("shrinkdeconv").joinpath("schemas/train_config.schema.json").read_text())


def validate_train_config(config: dict) -> None:
    import jsonschema

    try:
        jsonschema.validate(config, load_train_schema())
    except jsonschema.ValidationError as err:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise _validation(f"invalid training config at {where}: {err.message}") from err


def cmd_train(args) -> int:
    from .train import run_from_config

    path = Path(args.config)
    try:
        config = json.loads(path.read_text())
    except OSError as err:
        raise CliError(f"cannot read config {path}: {err}", EXIT_IO) from err
    except json.JSONDecodeError as err:
        raise _validation(f"{path}: not valid JSON ({err})") from err
    validate_train_config(config)
    res = run_from_config(config, _out_dir(args.out))
    if res.losses:
        print(f"steps={len(res.losses)} first_loss={res.losses[0]:.6f} last_loss={res.losses[-1]:.6f} "
              f"wall={res.seconds:.1f}s", file=sys.stderr)
    return EXIT_OK


def parse_target(spec: str):
    """Scalar target function from ``identity``, ``soft:L``, ``hard:T``, ``hyperlap:L:P`` or ``nonmono``."""
    from .shrinkage import prox_hyper_laplacian, soft_threshold

    parts = spec.split(":")
    name, vals = parts[0], parts[1:]
    try:
        nums = [float(v) for v in vals]
    except ValueError:
        raise ValueError(f"malformed target {spec!r}") from None
    if name == "identity" and not nums:
        return lambda t: np.asarray(t, dtype=np.float64).copy()
    if name == "soft" and len(nums) == 1:
        return lambda t: soft_threshold(np.asarray(t, dtype=np.float64), nums[0])
    if name == "hard" and len(nums) == 1:
        return lambda t: np.where(np.abs(t) > nums[0], t, 0.0)
    if name == "hyperlap" and len(nums) == 2:
        return lambda t: prox_hyper_laplacian(np.asarray(t, dtype=np.float64), nums[0], nums[1])
    if name == "nonmono" and not nums:
        return nonmonotone_target
    raise ValueError(f"unknown target {spec!r}")


def nonmonotone_target(t):
    """``t (1 - 1.5 exp(-t^2 / 0.045))``: shrinks small inputs past zero, passes large ones."""
    t = np.asarray(t, dtype=np.float64)
    return t * (1.0 - 1.5 * np.exp(-(t**2) / (2 * 0.15**2)))


def cmd_fit_prox(args) -> int:
    from .shrinkage import fit_to_target

    try:
        target = parse_target(args.target)
    except ValueError as err:
        raise _validation(str(err)) from err
    lo, hi = args.interval
    if not lo < hi:
        raise _validation("--interval needs lo < hi")
    fit = fit_to_target(target, pieces=args.K, interval=(lo, hi), grid=args.grid)
    report = {"target": args.target, "K": args.K, "interval": [lo, hi], "grid": args.grid,
              "max_residual": fit.max_residual, "rms_residual": fit.rms_residual,
              "params": {k: v[0].tolist() for k, v in fit.shrinkage.params().items()}}
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as err:
            raise CliError(f"cannot write {args.out}: {err}", EXIT_IO) from err
    print(f"target={args.target} K={args.K} max_residual={fit.max_residual:.3e} "
          f"rms_residual={fit.rms_residual:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shrinkdeconv", description="Non-blind deconvolution with unrolled ADMM.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="blur and add noise to an image")
    s.add_argument("image")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--kernel", help="kernel text file")
    g.add_argument("--random-kernel", action="store_true", help="sample a random motion kernel")
    s.add_argument("--kernel-size", type=int, help="size of the random kernel (default: random in 13..35)")
    s.add_argument("--sigma", type=float, default=0.01, help="noise standard deviation (default 0.01)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--boundary", choices=BOUNDARY_MODES, default="replicate")
    s.add_argument("--format", choices=("pfm", "png"), default="pfm")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("deblur", help="restore a blurry image")
    d.add_argument("blurry")
    d.add_argument("kernel", nargs="?", help="kernel file (default: from the sidecar)")
    m = d.add_mutually_exclusive_group()
    m.add_argument("--model", help="trained model file")
    m.add_argument("--prior", choices=admm.ANALYTIC_PRIORS, help="analytic prior (default hyperlap)")
    d.add_argument("--solver", choices=("cg", "fft"))
    d.add_argument("--boundary", choices=BOUNDARY_MODES)
    d.add_argument("--no-edgetaper", action="store_true", help="skip edge tapering before FFT solves")
    d.add_argument("--noise-adaptive", action="store_true", help="weight the data term by a noise map")
    d.add_argument("--stages", type=int, help="stage count of the analytic model")
    d.add_argument("--lam", type=float, help="prior weight of the analytic model")
    d.add_argument("--out", required=True, help="output image (.pfm or .png)")
    d.set_defaults(func=cmd_deblur)

    e = sub.add_parser("evaluate", help="PSNR/SSIM of restored images against ground truth")
    e.add_argument("restored_dir")
    e.add_argument("gt_dir")
    e.add_argument("--report", choices=("csv", "json"), default="csv")
    e.add_argument("--out", help="report file (default stdout)")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="compare x-solver variants on a test set")
    a.add_argument("testset", nargs="?", help="directory of ground-truth images")
    a.add_argument("--synthetic", type=int, help="use N procedural images instead of a directory")
    a.add_argument("--size", type=int, default=96, help="side of procedural images")
    a.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    a.add_argument("--prior", choices=admm.ANALYTIC_PRIORS, default="hyperlap")
    a.add_argument("--sigma", type=float, default=0.01)
    a.add_argument("--kernel-size", type=int, default=17)
    a.add_argument("--boundary", choices=BOUNDARY_MODES, default="replicate")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--report", choices=("csv", "json"), default="csv")
    a.add_argument("--out", help="summary report file (default stdout)")
    a.add_argument("--per-image", help="also write per-image metrics here")
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("config")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fit-prox", help="fit a Maxout shrinkage to a scalar target")
    f.add_argument("--target", required=True, help="identity | soft:L | hard:T | hyperlap:L:P | nonmono")
    f.add_argument("--K", type=int, default=4, help="pieces per Maxout unit")
    f.add_argument("--interval", type=float, nargs=2, default=(-1.0, 1.0), metavar=("LO", "HI"))
    f.add_argument("--grid", type=int, default=1001)
    f.add_argument("--out", help="write the fit as JSON")
    f.set_defaults(func=cmd_fit_prox)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("shrinkdeconv: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except CliError as err:
        print(f"shrinkdeconv: error: {err}", file=sys.stderr)
        return err.code
    except (SolverError, TrainingDiverged, FloatingPointError) as err:
        print(f"shrinkdeconv: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (KernelError, ModelFormatError, ValueError) as err:
        print(f"shrinkdeconv: error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as err:
        print(f"shrinkdeconv: I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

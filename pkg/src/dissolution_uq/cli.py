"""Command-line entry point: ``dissolution-uq --mode {generate,infer,benchmark,diagnose}``."""

import argparse
import json
import logging
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import default_config, dump_config, load_config, loads_config
from .dns import constants_dict, emit_synthetic_uct, read_field_binary, solve_dissolution, write_field_binary, write_field_csv
from .errors import ConfigError, DissolutionUQError
from .imaging import extract_observations, label_voxels, normalize_stack, write_observations_csv, Region
from .pipeline import bma_field, porosity_bounds, run_pipeline, summarize_result, write_diagnostics
from .potentials import benchmark_operators, write_benchmark_csv

log = logging.getLogger("dissolution_uq")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _manifest(cfg, extra=None):
    doc = {
        "code_version": __version__,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "constants": constants_dict(cfg.model_constants()),
        "Da2_star": cfg.constants.Da2_star,
        "Dm_star": cfg.constants.Dm_star,
        "D_ref_m2_per_s": cfg.d_ref(),
        "config_toml": dump_config(cfg),
    }
    doc.update(extra or {})
    return doc


def cmd_generate(cfg, out):
    """Solve the direct model and write the noisy stack plus ground truth."""
    out.mkdir(parents=True, exist_ok=True)
    geom = cfg.make_geometry()
    t0 = time.perf_counter()
    eps, conc = solve_dissolution(geom, cfg.model_constants())
    image = emit_synthetic_uct(eps, cfg.imaging.noise, seed=cfg.seed)
    write_field_binary(out / "image.bin", image)
    write_field_binary(out / "eps_truth.bin", eps)
    write_field_binary(out / "conc_truth.bin", conc)
    write_field_csv(out / "image_csv", image)
    doc = _manifest(cfg, {"solve_seconds": time.perf_counter() - t0, "files": ["image.bin", "eps_truth.bin", "conc_truth.bin"]})
    (out / "manifest.json").write_text(json.dumps(doc, indent=2))
    log.info("wrote synthetic stack of shape %s to %s", image.values.shape, out)
    return doc


def _infer_one(cfg, image, eps_truth, out):
    out.mkdir(parents=True, exist_ok=True)
    im = cfg.imaging
    obs = extract_observations(image, im.n_obs, im.fractions, seed=cfg.seed, radius=(im.radius_space, im.radius_time))
    write_observations_csv(out / "observations.csv", obs)
    settings = cfg.inference_settings()
    result = run_pipeline(obs, settings, steps=tuple(cfg.steps), out_dir=out / "checkpoints")
    grid_points = image.points()
    truth = eps_truth.values if eps_truth is not None else None
    write_diagnostics(result, out, grid_points, image.values.shape, image.axes, image.times, truth)
    last = result.steps[max(result.steps)]
    bma = bma_field(last.layout, last.samples, grid_points, image.values.shape)
    labels = label_voxels(normalize_stack(image), (im.radius_space, im.radius_time))
    lo, hi = porosity_bounds(bma, labels[0] == Region.SOLID)
    doc = {"porosity_bounds": [lo, hi], "step_seconds": {str(k): r.seconds for k, r in result.steps.items()}}
    if 3 in result.steps:
        doc["Da2_interval"] = list(summarize_result(result).da2_interval())
    (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    (out / "manifest.json").write_text(json.dumps(_manifest(cfg, {"input_summary": doc}), indent=2))
    return doc


def _infer_worker(args):
    cfg, image_path, truth_path, out = args
    image = read_field_binary(image_path)
    truth = read_field_binary(truth_path) if truth_path is not None else None
    return _infer_one(cfg, image, truth, Path(out))


def cmd_infer(cfg, data_dir, out, chains=1):
    """Run the three-step inference on a generated stack."""
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.json"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest.json in {data_dir}")
    json.loads(manifest.read_text())
    image_path = data_dir / "image.bin"
    truth_path = data_dir / "eps_truth.bin"
    if not image_path.is_file():
        raise FileNotFoundError(f"no image.bin in {data_dir}")
    truth_path = truth_path if truth_path.is_file() else None
    if chains == 1:
        return _infer_worker((cfg, image_path, truth_path, out))
    jobs = []
    for k in range(chains):
        c = loads_config(dump_config(cfg))
        c.seed = cfg.seed + 1000 * k
        jobs.append((c, image_path, truth_path, out / f"chain{k}"))
    with ProcessPoolExecutor(max_workers=chains) as pool:
        return list(pool.map(_infer_worker, jobs))


def cmd_benchmark(cfg, out):
    out.mkdir(parents=True, exist_ok=True)
    rows = benchmark_operators(seed=cfg.seed)
    write_benchmark_csv(out / "benchmark.csv", rows)
    for r in rows:
        print(f"{r['form']:>20s} {r['grid']:>4s} {r['mean_ns'] / 1e3:10.1f} us  speedup {r['speedup']:.2f}")
    return rows


def cmd_diagnose(run_dir):
    """Print the stored posterior summary and final error-curve values of a run."""
    run_dir = Path(run_dir)
    post = run_dir / "posterior.json"
    if not post.is_file():
        raise FileNotFoundError(f"no posterior.json in {run_dir}")
    doc = json.loads(post.read_text())
    lo, hi = doc["Da2"]["interval"]
    print(f"Da2 mean {doc['Da2']['mean']:.4g}, 95% interval [{lo:.4g}, {hi:.4g}]")
    curves = run_dir / "bma_ce.csv"
    if curves.is_file():
        data = np.genfromtxt(curves, delimiter=",", names=True, dtype=None, encoding="utf-8")
        for name in dict.fromkeys(data["series"]):
            vals = data["value"][data["series"] == name]
            print(f"BMA-CE {name}: final {vals[-1]:.3e}")
    return doc


def build_parser():
    p = argparse.ArgumentParser(prog="dissolution-uq", description="Bayesian inversion of dissolution micro-CT stacks.")
    p.add_argument("--config", type=Path, help="TOML run configuration")
    p.add_argument("--mode", choices=("generate", "infer", "benchmark", "diagnose"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--input", type=Path, help="stack directory (infer) or run directory (diagnose)")
    p.add_argument("--steps", help="comma-separated prefix of 1,2,3")
    p.add_argument("--chains", type=int)
    p.add_argument("--fast", action="store_true", help="short chains: 60 samples, 50 leapfrog steps")
    p.add_argument("--dim", type=int, choices=(1, 2))
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _resolve(args):
    cfg = load_config(args.config) if args.config else default_config(dim=args.dim or 1)
    if args.mode:
        cfg.mode = args.mode
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = str(args.out)
    if args.steps:
        try:
            cfg.steps = [int(s) for s in args.steps.split(",")]
        except ValueError:
            raise ConfigError("--steps expects integers like 1,2,3") from None
    if args.chains is not None:
        cfg.chains = args.chains
    if args.fast:
        cfg.sampler.n_samples, cfg.sampler.n_leapfrog = 60, 50
    return cfg.validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out)
    created = not out.exists()
    try:
        if cfg.mode == "generate":
            cmd_generate(cfg, out)
        elif cfg.mode == "infer":
            if args.input is None:
                raise ConfigError("--mode infer needs --input pointing at a generated stack")
            try:
                doc = cmd_infer(cfg, args.input, out, cfg.chains)
            except BaseException:
                if created and out.exists() and cfg.chains == 1 and not any(out.glob("posterior.json")):
                    shutil.rmtree(out, ignore_errors=True)
                raise
            print(json.dumps(doc, indent=2))
        elif cfg.mode == "benchmark":
            cmd_benchmark(cfg, out)
        else:
            cmd_diagnose(args.input or out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DissolutionUQError, ArithmeticError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

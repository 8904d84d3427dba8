"""Command-line entry point: ``pnpcm <subcommand> --config run.toml``.

Exit codes: 0 success, 1 configuration error, 2 divergence (non-finite
iterate), 3 I/O failure. ``check-theorem`` exits 1 when the bound is
violated.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import os
import socket
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, engine, metrics, protocol
from .denoisers import DenoiserError, echo_handler, estimate_lipschitz, make_denoiser, serve
from .engine import RunConfig, Schedule
from .io import ConfigError, ExperimentConfig, load_config, load_image, load_tensor, save_png, save_tensor, schedule_values
from .linsolve import CgConfig, NonFiniteError
from .operators import (
    BlurOperator,
    DownsampleOperator,
    FourierSubsampleOperator,
    MaskOperator,
    gaussian_kernel_1d,
    random_line_mask,
    random_mask,
    synthesize_measurement,
    synthetic_coil_maps,
)
from .tensor import COMPLEX, REAL


EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".bmp", ".pgm", ".ppm", ".pnpt")


class Failure(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _stream_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), stream, index])))


def build_operator(cfg: ExperimentConfig, shape, dtype, seed: int, index: int = 0):
    task = cfg.task
    kind = task["operator"]
    rng = _stream_rng(seed, 1, index)
    if kind == "identity":
        return MaskOperator(np.ones(shape, dtype=bool), dtype=dtype)
    if kind == "mask":
        if "mask_file" in task:
            keep = load_tensor(cfg.resolve(task["mask_file"])) != 0
        else:
            keep = random_mask(shape[:2], task.get("keep_fraction", 0.3), rng)
        return MaskOperator(keep, input_shape=shape, dtype=dtype)
    if kind == "blur":
        kernel = gaussian_kernel_1d(task.get("kernel_size", 5), task.get("kernel_sigma", 10.0))
        return BlurOperator(shape, kernel, task.get("boundary", "circular"), dtype=dtype)
    if kind == "downsample":
        return DownsampleOperator(shape, task.get("factor", 4), task.get("method", "block_average"), dtype=dtype)
    if kind == "fourier_subsample":
        if dtype != COMPLEX or len(shape) != 2:
            raise ConfigError("[task].operator = fourier_subsample needs a complex (H, W) image")
        R = task.get("acceleration", 4)
        acs = task.get("acs_lines", 24 if R <= 4 else 12)
        if "sampling_file" in task:
            lines = load_tensor(cfg.resolve(task["sampling_file"])).real != 0
        else:
            lines = random_line_mask(shape[1], R, acs, rng)
        nc = task.get("n_coils", 0)
        maps = synthetic_coil_maps(shape, nc) if nc else None
        return FourierSubsampleOperator(shape, lines, maps, acs_lines=acs, acceleration=R)
    raise ConfigError(f"[task].operator: unknown kind {kind!r}")


def build_denoiser(cfg: ExperimentConfig):
    params = dict(cfg.denoiser)
    kind = params.pop("kind")
    if kind == "external":
        unknown = set(params) - {"command", "address", "timeout"}
    elif kind == "tv_prox":
        unknown = set(params) - {"strength_scale", "max_iters", "tol"}
    else:
        unknown = set(params) - {"strength_scale"}
    if unknown:
        raise ConfigError(f"[denoiser].{sorted(unknown)[0]} does not apply to kind {kind!r}")
    try:
        return make_denoiser(kind, **params)
    except ValueError as exc:
        raise ConfigError(f"[denoiser]: {exc}") from None


def build_schedule(cfg: ExperimentConfig) -> Schedule:
    N = cfg.schedule["n_steps"]
    t = schedule_values(cfg, "t", N + 1)
    rho = schedule_values(cfg, "rho", N)
    beta = schedule_values(cfg, "beta", N, default=np.zeros(N))
    noise = schedule_values(cfg, "noise", N, default=t[1:])
    try:
        return Schedule(N, t, rho, beta, noise)
    except ValueError as exc:
        raise ConfigError(f"[schedule]: {exc}") from None


def build_run_config(cfg: ExperimentConfig, op, seed: int) -> RunConfig:
    s = cfg.solver
    try:
        cg = CgConfig(s.get("cg_max_iters", 30), s.get("cg_rel_tol", 1e-8), s.get("cg_abs_tol", 1e-12))
        return RunConfig(
            operator=op,
            denoiser=build_denoiser(cfg),
            schedule=build_schedule(cfg),
            cg=cg,
            seed=seed,
            enable_noise_injection=s.get("noise_injection", True),
            enable_momentum=s.get("momentum", True),
            divergence_guard=s.get("divergence_guard", False),
            linear_solver=s.get("linear_solver", "cg"),
            history=cfg.output.get("record", "full"),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[solver]/[output]: {exc}") from None


def _image_dtype(x):
    return COMPLEX if np.iscomplexobj(x) else REAL


def prepare_problem(cfg: ExperimentConfig, seed: int, image_path=None, index: int = 0):
    """Load ground truth (if any), build the operator, and load or synthesize ``y``."""
    task = cfg.task
    layout = task.get("layout", "auto")
    path = image_path if image_path is not None else (cfg.resolve(task["image"]) if "image" in task else None)
    x_true = load_image(path, layout) if path is not None else None
    if "measurement" in task and image_path is None:
        y = load_tensor(cfg.resolve(task["measurement"]))
        if x_true is None:
            raise ConfigError("a loaded measurement still needs [task].image to fix the signal shape")
        op = build_operator(cfg, x_true.shape, _image_dtype(x_true), seed, index)
        if y.shape != op.output_shape:
            raise ConfigError(f"[task].measurement: shape {y.shape} does not match operator output {op.output_shape}")
        return x_true, op, y.astype(op.output_dtype)
    if x_true is None:
        raise ConfigError("missing required key [task].image (or [task].measurement)")
    op = build_operator(cfg, x_true.shape, _image_dtype(x_true), seed, index)
    y = synthesize_measurement(op, x_true, task.get("sigma_y", 0.0), _stream_rng(seed, 2, index))
    return x_true, op, y


def make_run_dir(cfg: ExperimentConfig, out, command: str) -> Path:
    base = Path(out) if out is not None else cfg.resolve(cfg.output.get("dir", "runs"))
    stamp = _dt.datetime.now().strftime("%Y%m%dT%H%M%S")
    base.mkdir(parents=True, exist_ok=True)
    for k in range(10000):
        d = base / (f"{command}-{stamp}" + (f"-{k}" if k else ""))
        try:
            d.mkdir()
            return d
        except FileExistsError:
            continue
    raise OSError(f"could not create a fresh run directory under {base}")


def _metadata(started: float):
    return {
        "version": __version__,
        "started_at": _dt.datetime.fromtimestamp(started).isoformat(timespec="seconds"),
        "wall_time_s": round(time.time() - started, 3),
    }


def _iteration_rows(state):
    return [
        {
            "n": r.n, "dz": r.dz, "dx": r.dx, "du": r.du, "delta": r.delta,
            "eta_norm": r.eta_norm, "objective": r.objective,
            "cg_iterations": r.cg_iterations, "cg_converged": r.cg_converged,
        }
        for r in state.history
    ]


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _say(args, *parts):
    if not args.quiet:
        print(*parts)


def _seed(cfg, args):
    return args.seed if args.seed is not None else cfg.task.get("seed", 0)


def cmd_reconstruct(args) -> int:
    started = time.time()
    cfg = load_config(args.config)
    seed = _seed(cfg, args)
    x_true, op, y = prepare_problem(cfg, seed)
    rc = build_run_config(cfg, op, seed)
    try:
        x, state = engine.run(rc, y)
    finally:
        rc.denoiser.close()
    run_dir = make_run_dir(cfg, args.out, "reconstruct")
    save_tensor(run_dir / "x.pnpt", x)
    if cfg.output.get("save_png", True):
        save_png(run_dir / "x.png", x)
    if cfg.output.get("save_iterates", False) and state.iterates:
        for it in state.iterates:
            save_tensor(run_dir / f"x_{it['n']:04d}.pnpt", it["x"])
    peak = cfg.task.get("peak")
    m = metrics.evaluate(x, x_true, peak) if x_true is not None else None
    record = {
        "command": "reconstruct",
        "config": cfg.to_dict(),
        "seed": seed,
        "nfe": state.denoiser_calls,
        "linear_solves": state.linear_solves,
        "iterations": _iteration_rows(state),
        "metrics": None if m is None else {"psnr_db": m.psnr_db, "ssim": m.ssim, "mse": m.mse},
        "metadata": _metadata(started),
    }
    _write_json(run_dir / "run_record.json", record)
    if m is not None:
        with open(run_dir / "metrics.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["image", "psnr_db", "ssim", "mse", "nfe"])
            w.writerow([cfg.task.get("image", ""), m.psnr_db, m.ssim, m.mse, state.denoiser_calls])
    _say(args, f"run directory: {run_dir}")
    if m is not None:
        _say(args, f"PSNR {m.psnr_db:.3f} dB  SSIM {m.ssim:.4f}  NFE {state.denoiser_calls}")
    return EXIT_OK


def _list_images(directory: Path):
    if not directory.is_dir():
        raise OSError(f"image directory {directory} does not exist")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise OSError(f"no images found in {directory}")
    return files


def _num_threads():
    raw = os.environ.get("PNP_CM_NUM_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"PNP_CM_NUM_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def cmd_ablate(args) -> int:
    started = time.time()
    cfg = load_config(args.config)
    seed = _seed(cfg, args)
    if "image_dir" in cfg.task:
        images = _list_images(cfg.resolve(cfg.task["image_dir"]))
    elif "image" in cfg.task:
        images = [cfg.resolve(cfg.task["image"])]
    else:
        raise ConfigError("missing required key [task].image_dir (or [task].image)")
    peak = cfg.task.get("peak")
    # fail fast on config errors before fanning out
    build_schedule(cfg)
    build_denoiser(cfg).close()

    def one(i_path):
        i, path = i_path
        x_true, op, y = prepare_problem(cfg, seed, image_path=path, index=i)
        rc = build_run_config(cfg, op, seed + i)
        try:
            rows = engine.ablation_grid(rc, y, x_true, peak)
        finally:
            rc.denoiser.close()
        return path, rows

    workers = min(_num_threads(), len(images))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, enumerate(images)))
    else:
        results = [one(item) for item in enumerate(images)]

    per_image = []
    for path, rows in results:
        for r in rows:
            per_image.append({
                "image": path.name, "noise_injection": r.noise_injection, "momentum": r.momentum,
                "psnr_db": r.psnr, "ssim": r.ssim, "nfe": r.nfe, "linear_solves": r.linear_solves,
            })
    table = []
    for noise, mom in engine.VARIANTS:
        sel = [r for r in per_image if r["noise_injection"] == noise and r["momentum"] == mom]
        table.append({
            "noise_injection": noise, "momentum": mom,
            "psnr_db": float(np.mean([r["psnr_db"] for r in sel])),
            "ssim": float(np.mean([r["ssim"] for r in sel])),
            "n_images": len(sel),
            "nfe": sel[0]["nfe"], "linear_solves": sel[0]["linear_solves"],
        })
    run_dir = make_run_dir(cfg, args.out, "ablate")
    _write_json(run_dir / "table.json", {"task": cfg.task["operator"], "rows": table})
    _write_json(run_dir / "results.json", {"rows": per_image})
    with open(run_dir / "results.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(per_image[0]))
        w.writeheader()
        w.writerows(per_image)
    _write_json(run_dir / "run_record.json", {
        "command": "ablate", "config": cfg.to_dict(), "seed": seed,
        "images": [p.name for p in images], "table": table, "metadata": _metadata(started),
    })
    _say(args, f"run directory: {run_dir}")
    _say(args, f"{'noise':>6} {'momentum':>9} {'PSNR':>8} {'SSIM':>7} {'NFE':>4}")
    for row in table:
        mark = lambda b: "yes" if b else "no"
        _say(args, f"{mark(row['noise_injection']):>6} {mark(row['momentum']):>9} "
                   f"{row['psnr_db']:8.3f} {row['ssim']:7.4f} {row['nfe']:>4}")
    return EXIT_OK


def cmd_check_theorem(args) -> int:
    started = time.time()
    cfg = load_config(args.config)
    seed = _seed(cfg, args)
    th = cfg.theorem
    mode = th.get("mode", "strict")
    if mode not in ("strict", "paired"):
        raise ConfigError(f"[theorem].mode must be 'strict' or 'paired', got {mode!r}")
    x_true, op, y = prepare_problem(cfg, seed)
    rc = build_run_config(cfg, op, seed)
    try:
        noisy = dataclasses.replace(rc, enable_noise_injection=True, record_clean_branch=True)
        clean = dataclasses.replace(rc, enable_noise_injection=False)
        _, st_noisy = engine.run(noisy, y)
        _, st_clean = engine.run(clean, y)
        l_hat = 0.0
        for t in sorted(set(rc.schedule.time_points[1:].tolist())):
            est = estimate_lipschitz(
                rc.denoiser, t, th.get("lipschitz_pairs", 200), th.get("perturbation_scale", 1e-2),
                _stream_rng(seed, 3), op.input_shape, op.dtype,
            )
            l_hat = max(l_hat, est.l_hat)
    finally:
        rc.denoiser.close()
    rep = engine.theorem1_check(st_noisy, st_clean, l_hat, th.get("inflation", 1.1), th.get("tolerance", 1e-12))
    ok = rep.strict_satisfied if mode == "strict" else rep.satisfied
    summary = {
        "mode": mode, "l_hat": l_hat, "lipschitz_used": rep.lipschitz,
        "paired": {"lhs": rep.lhs, "rhs": rep.rhs, "satisfied": rep.satisfied},
        "strict": {"lhs": rep.strict_lhs, "rhs": rep.rhs, "satisfied": rep.strict_satisfied,
                   "per_step_satisfied": rep.per_step_satisfied},
        "eta_sum": rep.eta_sum, "eta_sum_finite": rep.eta_sum_finite,
        "diminishing": rep.diminishing, "satisfied": bool(ok),
    }
    run_dir = make_run_dir(cfg, args.out, "check-theorem")
    _write_json(run_dir / "run_record.json", {
        "command": "check-theorem", "config": cfg.to_dict(), "seed": seed, "report": summary,
        "iterations_noisy": _iteration_rows(st_noisy), "iterations_clean": _iteration_rows(st_clean),
        "metadata": _metadata(started),
    })
    lhs = rep.strict_lhs if mode == "strict" else rep.lhs
    _say(args, f"mode: {mode}")
    _say(args, f"lhs = {lhs:.6g}")
    _say(args, f"rhs = {rep.rhs:.6g}  (L = {rep.lipschitz:.6g})")
    _say(args, f"sum ||eta_k|| = {rep.eta_sum:.6g} ({'finite' if rep.eta_sum_finite else 'not finite'})")
    _say(args, f"noise schedule: {'diminishing' if rep.diminishing else 'NOT diminishing'}")
    if mode == "strict":
        _say(args, f"paired-run lhs = {rep.lhs:.6g} ({'holds' if rep.satisfied else 'violated'}; informational)")
    _say(args, f"bound {'satisfied' if ok else 'VIOLATED'}")
    return EXIT_OK if ok else EXIT_CONFIG


def cmd_synthesize(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(cfg, args)
    if "measurement" in cfg.task:
        raise ConfigError("[task].measurement is an input; synthesize generates it from [task].image")
    x_true, op, y = prepare_problem(cfg, seed)
    run_dir = make_run_dir(cfg, args.out, "synthesize")
    save_tensor(run_dir / "y.pnpt", y)
    save_tensor(run_dir / "x_true.pnpt", x_true)
    if isinstance(op, MaskOperator):
        save_tensor(run_dir / "mask.pnpt", op.keep.astype(np.float64))
    if isinstance(op, FourierSubsampleOperator):
        save_tensor(run_dir / "sampling.pnpt", op.sample_mask.astype(np.float64))
    _say(args, f"run directory: {run_dir}")
    return EXIT_OK


def cmd_serve_echo(args) -> int:
    handler = echo_handler(args.offset)
    if args.listen is None:
        stdin, stdout = sys.stdin.buffer, sys.stdout.buffer

        def write(b):
            stdout.write(b)
            stdout.flush()

        serve(lambda n: protocol.read_exact(stdin, n), write, handler)
        return EXIT_OK
    if args.listen.startswith("unix:"):
        srv = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        srv.bind(args.listen[len("unix:"):])
    else:
        host, _, port = args.listen.rpartition(":")
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host or "127.0.0.1", int(port)))
    srv.listen()
    served = 0
    with srv:
        while args.max_connections is None or served < args.max_connections:
            conn, _ = srv.accept()
            with conn, conn.makefile("rb") as rf:
                serve(lambda n: protocol.read_exact(rf, n), conn.sendall, handler)
            served += 1
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pnpcm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="run configuration (TOML)")
        sp.add_argument("--seed", type=int, default=None, help="override [task].seed")
        sp.add_argument("--out", default=None, help="override [output].dir")
        sp.add_argument("--quiet", action="store_true")

    for name, fn, help_ in [
        ("reconstruct", cmd_reconstruct, "run the solver on one image or measurement"),
        ("ablate", cmd_ablate, "noise-injection x momentum grid over a directory of images"),
        ("check-theorem", cmd_check_theorem, "paired runs and the noise-injection residual bound"),
        ("synthesize", cmd_synthesize, "generate a measurement only"),
    ]:
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.set_defaults(func=fn)

    sp = sub.add_parser("denoise-serve-echo", help="echo test double for the external denoiser protocol")
    sp.add_argument("--listen", default=None, help="host:port or unix:/path (default: stdin/stdout)")
    sp.add_argument("--offset", type=float, default=0.0, help="add this constant to every entry")
    sp.add_argument("--max-connections", type=int, default=None)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_serve_echo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (engine.DivergenceError, NonFiniteError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, EOFError, protocol.ProtocolError, DenoiserError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # remaining ValueErrors come from validating config-derived inputs
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

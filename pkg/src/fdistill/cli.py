"""Command-line entry point.

Subcommands:
    train      run a distillation, writing metrics.csv, samples.csv, checkpoints
    gradcheck  run the analytic-vs-finite-difference gradient gate -> report.json
    variance   normalized weighting variance vs Gaussian mean gap -> variance.csv
    table      serialize the divergence catalog over a ratio grid -> catalog.csv
    weightmap  score-difference / weighting map on a 2-D grid -> map.csv
    modes      mode-coverage report for a checkpointed generator -> modes.json

All take --config <json> and --out <dir>; --seed/--divergence/--iters override
config keys. Exit codes: 0 success, 1 gate failure, 2 malformed config or
usage, 3 numerical abort.

FDISTILL_THREADS caps the BLAS worker pool (default: machine parallelism).
"""

import argparse
import json
import os
import sys
from pathlib import Path

__all__ = ["main"]

_KNOWN_SECTIONS = ("gradcheck", "variance", "table", "weightmap", "modes")


def _apply_thread_cap():
    raw = os.environ.get("FDISTILL_THREADS")
    if not raw:
        return
    try:
        n = max(1, int(raw))
    except ValueError:
        print(f"error: FDISTILL_THREADS={raw!r} is not an integer", file=sys.stderr)
        raise SystemExit(2)
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _fmt(value) -> str:
    """17 significant digits: lossless round-trip for 64-bit floats."""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _write_csv(path: Path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _load_config(path, overrides):
    from .distill import RunConfig
    from .errors import ConfigError

    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("<file>", f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}")
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    sections = {}
    base = {}
    for key, value in data.items():
        if key in _KNOWN_SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(key, "command section must be an object")
            sections[key] = value
        else:
            base[key] = value
    for key, value in overrides.items():
        if value is not None:
            base[key] = value
    return RunConfig.from_dict(base), sections


def _section(sections, name, defaults):
    from .errors import ConfigError

    given = sections.get(name, {})
    out = dict(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"{name}.{key}", "unknown config key")
        out[key] = value
    return out


def _save_state(path, cfg, state):
    from .checkpoint import save_checkpoint
    from .distill import state_payloads

    save_checkpoint(path, cfg.to_dict(), state.iteration, state_payloads(state))


def _cmd_train(cfg, sections, out_dir: Path) -> int:
    import numpy as np

    from . import rng as rngmod
    from .distill import train

    def checkpoint_callback(state, iteration):
        _save_state(out_dir / f"checkpoint_{iteration:07d}.fdst", cfg, state)

    state, metrics = train(cfg, checkpoint_callback=checkpoint_callback)

    header = [
        "iteration", "fdistill_loss", "gan_loss", "dsm_loss", "disc_loss",
        "mean_h", "var_h", "mean_ratio", "forward_kl", "forward_kl_se",
        "reverse_kl", "reverse_kl_se", "modes_covered", "min_mode_mass",
    ]
    _write_csv(out_dir / "metrics.csv", header,
               [[row[k] for k in header] for row in metrics])

    n_samples = 10000
    z = rngmod.stream(cfg.seed, cfg.total_iters, rngmod.METRICS, 99).standard_normal(
        (n_samples, state.generator.latent_dim)
    )
    samples = state.generator.forward(z)
    _write_csv(out_dir / "samples.csv",
               [f"x{i}" for i in range(samples.shape[1])],
               samples.tolist())

    _save_state(out_dir / "checkpoint_final.fdst", cfg, state)
    print(f"train: {state.iteration} iterations, outputs in {out_dir}")
    return 0


def _cmd_gradcheck(cfg, sections, out_dir: Path) -> int:
    from .divergence import KINDS
    from .oracle import gradcheck_cases, theorem1_grad_check

    params = _section(sections, "gradcheck", {
        "n": 100000, "fd_step": 1e-3, "sigmas": [0.0, 0.5, 2.0], "rel_tol": 0.05,
    })
    cases = []
    all_pass = True
    for teacher_name, (teacher, gen) in gradcheck_cases().items():
        for kind in KINDS:
            for sigma in params["sigmas"]:
                reports = theorem1_grad_check(
                    kind, teacher, gen, sigma, n=int(params["n"]), seed=cfg.seed,
                    fd_step=float(params["fd_step"]),
                )
                for rep in reports:
                    ok = rep.passes(rel_tol=float(params["rel_tol"]))
                    all_pass = all_pass and ok
                    cases.append({
                        "teacher": teacher_name,
                        "kind": rep.kind,
                        "sigma": rep.sigma,
                        "param_index": rep.param_index,
                        "grad_mc": rep.grad_mc,
                        "se_mc": rep.se_mc,
                        "grad_fd": rep.grad_fd,
                        "se_fd": rep.se_fd,
                        "rel_error": rep.rel_error,
                        "pass": ok,
                    })
    report = {"n": int(params["n"]), "fd_step": float(params["fd_step"]),
              "seed": cfg.seed, "all_pass": all_pass, "cases": cases}
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    n_fail = sum(1 for c in cases if not c["pass"])
    print(f"gradcheck: {len(cases) - n_fail}/{len(cases)} cases pass")
    return 0 if all_pass else 1


def _cmd_variance(cfg, sections, out_dir: Path) -> int:
    from .divergence import KINDS
    from .oracle import normalized_variance_curve

    params = _section(sections, "variance", {
        "n": 1000000, "gaps": [0.25, 0.5, 1.0, 1.5, 2.0], "kinds": list(KINDS),
    })
    rows = []
    for kind in params["kinds"]:
        estimates = normalized_variance_curve(
            kind, params["gaps"], n=int(params["n"]), seed=cfg.seed
        )
        for gap, est in zip(params["gaps"], estimates):
            rows.append([kind, float(gap), est.value, est.se])
    _write_csv(out_dir / "variance.csv", ["kind", "d", "estimate", "se"], rows)
    print(f"variance: {len(rows)} rows")
    return 0


def _cmd_table(cfg, sections, out_dir: Path) -> int:
    import numpy as np

    from .divergence import KINDS, catalog

    params = _section(sections, "table", {
        "r_min": 1e-2, "r_max": 1e2, "n_points": 200, "r_values": None,
    })
    if params["r_values"] is not None:
        grid = np.asarray(params["r_values"], dtype=float)
    else:
        grid = np.geomspace(float(params["r_min"]), float(params["r_max"]),
                            int(params["n_points"]))
    rows = []
    for kind in KINDS:
        spec = catalog(kind)
        for r in grid:
            rows.append([
                kind, float(r), float(spec.f(r)), float(spec.f_prime(r)),
                float(spec.f_second(r)), float(spec.h(r)),
            ])
    _write_csv(out_dir / "catalog.csv",
               ["kind", "r", "f", "f_prime", "f_second", "h"], rows)
    print(f"table: {len(rows)} rows")
    return 0


def _cmd_weightmap(cfg, sections, out_dir: Path) -> int:
    import numpy as np

    from .errors import ConfigError
    from .oracle import weight_score_map
    from .teacher import IsotropicGaussianMixture, make_teacher

    params = _section(sections, "weightmap", {
        "sigma": 0.5, "bound": 6.0, "resolution": 64, "student": None,
    })
    teacher = make_teacher(cfg.teacher)
    if teacher.dim != 2:
        raise ConfigError("teacher", "weightmap requires a 2-D teacher")
    if params["student"] is None:
        # moment-matched single Gaussian: the canonical collapsed student
        mean = teacher.weights @ teacher.means
        var = teacher.per_coord_std() ** 2
        student = IsotropicGaussianMixture(
            weights=np.array([1.0]), means=mean[None, :], variances=np.array([var])
        )
    else:
        student = make_teacher(params["student"])
    bound = float(params["bound"])
    res = int(params["resolution"])
    axis = np.linspace(-bound, bound, res)
    xs, ys = np.meshgrid(axis, axis, indexing="ij")
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    score_diff, h = weight_score_map(
        cfg.divergence, teacher, student, float(params["sigma"]), grid
    )
    rows = [
        [grid[i, 0], grid[i, 1], float(score_diff[i]), float(h[i])]
        for i in range(grid.shape[0])
    ]
    _write_csv(out_dir / "map.csv", ["x", "y", "score_diff", "h"], rows)
    print(f"weightmap: {len(rows)} cells")
    return 0


def _cmd_modes(cfg, sections, out_dir: Path, checkpoint_path) -> int:
    import numpy as np

    from . import rng as rngmod
    from .checkpoint import load_checkpoint
    from .distill import RunConfig, restore_state
    from .errors import ConfigError
    from .oracle import mode_coverage
    from .teacher import make_teacher

    if checkpoint_path is None:
        raise ConfigError("--checkpoint", "the modes command needs a checkpoint file")
    params = _section(sections, "modes", {"n_samples": 100000})
    config_echo, iteration, payloads = load_checkpoint(checkpoint_path)
    saved_cfg = RunConfig.from_dict(config_echo)
    state = restore_state(saved_cfg, iteration, payloads)
    teacher = make_teacher(saved_cfg.teacher)
    z = rngmod.stream(saved_cfg.seed, iteration, rngmod.METRICS, 7).standard_normal(
        (int(params["n_samples"]), state.generator.latent_dim)
    )
    samples = state.generator.forward(z)
    coverage = mode_coverage(
        samples, teacher, k=saved_cfg.coverage_k, threshold=saved_cfg.coverage_threshold
    )
    report = {
        "checkpoint": str(checkpoint_path),
        "iteration": iteration,
        "n_samples": int(params["n_samples"]),
        "modes_covered": coverage.n_covered,
        "n_modes": len(coverage.per_mode_mass),
        "per_mode_mass": [float(m) for m in coverage.per_mode_mass],
        "covered": [bool(c) for c in coverage.covered],
    }
    with open(out_dir / "modes.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    print(f"modes: {coverage.n_covered}/{len(coverage.per_mode_mass)} covered")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="fdistill",
        description="Distillation of analytic teachers under selectable f-divergences.",
    )
    sub = parser.add_subparsers(dest="command")
    for name in ("train", "gradcheck", "variance", "table", "weightmap", "modes"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--divergence", type=str, default=None)
        p.add_argument("--iters", type=int, default=None)
        if name == "modes":
            p.add_argument("--checkpoint", type=str, default=None)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = _build_parser()
    args, unknown = parser.parse_known_args(argv)
    if unknown or args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    from .errors import ConfigError, TrainingDiverged

    try:
        overrides = {
            "seed": args.seed,
            "divergence": args.divergence,
            "total_iters": args.iters,
        }
        cfg, sections = _load_config(args.config, overrides)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "train":
            return _cmd_train(cfg, sections, out_dir)
        if args.command == "gradcheck":
            return _cmd_gradcheck(cfg, sections, out_dir)
        if args.command == "variance":
            return _cmd_variance(cfg, sections, out_dir)
        if args.command == "table":
            return _cmd_table(cfg, sections, out_dir)
        if args.command == "weightmap":
            return _cmd_weightmap(cfg, sections, out_dir)
        if args.command == "modes":
            return _cmd_modes(cfg, sections, out_dir, args.checkpoint)
        parser.print_usage(sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        if exc.report is not None:
            print(f"step report: {exc.report}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``adaptno <subcommand> --config run.toml --out DIR``.

Exit status: 0 success, 1 configuration/usage/format error, 2 numerical failure.
Messages go to stderr; results go to files under ``--out``.  Outputs are
staged in a temporary directory and moved into place only on success.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, container
from .adaptloop import ExactKernels, IdentifierState, run_adaptive
from .arz import CONTROLLERS, generate_arz_dataset, run_arz
from .bench import bench_kernels, write_bench_csv
from .config import ExperimentConfig, from_dict, load_config
from .dataset import generate_dataset, load_dataset, save_dataset
from .errors import AdaptNOError, ConfigError, ContractError, FormatError, NumericalError
from .gainkernel import kernel_error, kernel_residual, solve_kernels
from .noperator import NeuralKernels, load_model, save_model, train
from .plant import simulate

logger = logging.getLogger("adaptno")

STATE_MAGIC = b"KST1"
SUBCOMMANDS = ("simulate", "arz", "gen-dataset", "train", "eval-kernel", "bench", "dataset-info")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _parse_value(text: str):
    """TOML-style scalar/array literal, falling back to a bare string."""
    import tomli

    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(cfg_dict: dict, sets: list[str]) -> dict:
    out = json.loads(json.dumps(cfg_dict))
    for item in sets or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not a section")
        node[parts[-1]] = _parse_value(value.strip())
    return out


def _config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required")
    cfg = load_config(args.config)
    if args.set:
        cfg = from_dict(apply_overrides(cfg.to_dict(), args.set))
    return cfg


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest(cfg: ExperimentConfig | None, args, stage: Path, extra=None) -> dict:
    import scipy

    outputs = {p.name: _sha256(p) for p in sorted(stage.iterdir()) if p.is_file()}
    return {
        "command": args.command,
        "argv": list(args.argv),
        "config_sha256": cfg.digest() if cfg else None,
        "seed": cfg.seed if cfg else None,
        "versions": {"adaptno": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "outputs": outputs,
        **(extra or {}),
    }


def _finish(stage: Path, out: Path, cfg, args, extra=None):
    manifest = _manifest(cfg, args, stage, extra)
    (stage / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if cfg is not None:
        (stage / "config.toml").write_text(cfg.dumps())
    out.mkdir(parents=True, exist_ok=True)
    for p in stage.iterdir():
        shutil.move(str(p), str(out / p.name))


def _save_state(path, arrays: dict, kind: str):
    container.write(path, STATE_MAGIC, {"kind": kind}, arrays)


# subcommands --------------------------------------------------------------------

def cmd_simulate(args, cfg, stage):
    p = cfg.plant_params()
    u0, m0 = cfg.initial_state()
    if args.kernel == "none":
        log = simulate(p, u0, m0, None, cfg.plant.T, cfg.plant.dt)
    else:
        tg = cfg.tri_grid()
        exact = ExactKernels(p.lam, p.mu, tg, cfg.kernel.tol, cfg.kernel.max_iter)
        if args.kernel == "exact":
            source, ref = exact, None
        else:
            if args.model is None:
                raise ConfigError("--kernel neural needs --model")
            model = load_model(args.model)
            source = NeuralKernels(model, tg, n_s=cfg.plant.n_points)
            ref = exact if args.gamma_check else None
        log = run_adaptive(p, u0, m0, cfg.initial_estimates(), None, source, cfg.plant.T,
                           cfg.plant.dt, cfg.adapt.recompute_every, reference_source=ref,
                           snapshot_every=cfg.adapt.snapshot_every)
        log.timings_to_csv(stage / "timings.csv")
        if log.snapshots:
            snaps = {f"{k}_{i}": v for i, s in enumerate(log.snapshots) for k, v in s.items()}
            _save_state(stage / "snapshots.kst", snaps, "estimate-snapshots")
    log.to_csv(stage / "trajectory.csv")
    _save_state(stage / "final_state.kst", log.final, "final-state")
    return {"final_norm": float(log.rows[-1][1] + log.rows[-1][2])}


def cmd_arz(args, cfg, stage):
    acfg = cfg.arz_adapt()
    if args.probes is not None:
        acfg = replace(acfg, probes=tuple(float(v) for v in args.probes.split(",") if v.strip()))
    model = load_model(args.model) if args.model else None
    log = run_arz(cfg.arz_params(), args.controller, acfg, model=model)
    log.to_csv(stage / "trajectory.csv")
    if log.timings:
        log.timings_to_csv(stage / "timings.csv")
    _save_state(stage / "final_state.kst", log.final, "arz-final-state")
    return {"final_norm": float(log.rows[-1][1] + log.rows[-1][2])}


def cmd_gen_dataset(args, cfg, stage):
    if args.arz:
        d = cfg.dataset
        _, summary = generate_arz_dataset(cfg.arz_params(), cfg.arz_adapt(), d.tau, d.n_traj,
                                          d.stride, cfg.seed, stage / "dataset.kds")
    else:
        _, summary = generate_dataset(cfg.sampling_ranges(), cfg.sim_setup(), stage / "dataset.kds")
    (stage / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return {"records": summary["records"]}


def cmd_train(args, cfg, stage):
    if args.dataset is None:
        raise ConfigError("train needs --dataset")
    data = load_dataset(args.dataset)

    def progress(epoch, hist):
        if epoch % 50 == 0 or epoch == cfg.operator.epochs - 1:
            logger.info("epoch %d train %.4e test %.4e", epoch, hist.train_loss[-1], hist.test_loss[-1])

    model, hist = train(data, cfg.train_config(), cfg.arch(), callback=progress)
    save_model(model, stage / "model.kno")
    with (stage / "loss.csv").open("w") as fh:
        fh.write("# schema: adaptno-loss/1\nepoch,train_loss,test_loss\n")
        for k, (a, b) in enumerate(zip(hist.train_loss, hist.test_loss)):
            fh.write(f"{k},{a!r},{b!r}\n")
    logger.info("test relative L2 %.4e", hist.test_rel_l2)
    return {"train_rel_l2": hist.train_rel_l2, "test_rel_l2": hist.test_rel_l2}


def cmd_eval_kernel(args, cfg, stage):
    """Kernels for the configured plant's true coefficients (the test point)."""
    p = cfg.plant_params()
    est = replace(cfg.initial_estimates(), c1h=p.c1, c2h=p.c2, c3h=p.c3, c4h=p.c4, rh=float(p.r))
    tg = cfg.tri_grid()
    k = solve_kernels(est, p.lam, p.mu, tg, cfg.kernel.tol, cfg.kernel.max_iter,
                      convention=cfg.kernel.convention)
    res = kernel_residual(k, est, p.lam, p.mu, convention=cfg.kernel.convention)
    arrays = {"x": tg.x, "xi": tg.xi, "Ku": k.Ku, "Km": k.Km}
    info = {"iterations": k.info["iterations"], "residual_u": res[0], "residual_m": res[1]}
    if args.model:
        nk = NeuralKernels(load_model(args.model), tg, n_s=cfg.plant.n_points)(est)
        arrays.update(Ku_neural=nk.Ku, Km_neural=nk.Km)
        info["kernel_error"] = kernel_error(k, nk)
    _save_state(stage / "kernels.kst", arrays, "kernels")
    (stage / "kernel_info.json").write_text(json.dumps(info, indent=2) + "\n")
    return info


def cmd_bench(args, cfg, stage):
    if args.model is None:
        raise ConfigError("bench needs --model")
    try:
        res = [float(v) for v in args.resolutions.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad --resolutions {args.resolutions!r}") from None
    if not res:
        raise ConfigError("--resolutions is empty")
    model = load_model(args.model)
    p = cfg.plant_params()
    est = replace(cfg.initial_estimates(), c1h=p.c1, c2h=p.c2, c3h=p.c3, c4h=p.c4, rh=float(p.r))
    rows = bench_kernels(model, est, res, p.lam, p.mu, cfg.kernel.tol, cfg.kernel.max_iter,
                         repeats=args.repeats)
    write_bench_csv(rows, stage / "bench.csv")
    for r in rows:
        logger.info("dx=%g solver %.3f ms, operator %.3f ms, speedup %.1fx, error %.4g",
                    r.dx_kernel, r.solver_ms, r.no_ms, r.speedup, r.error)
    return {}


def cmd_dataset_info(args):
    desc = container.read_descriptor(args.path)
    print(json.dumps(desc, indent=2, sort_keys=True))
    return 0


# parser and dispatch --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="adaptno", description="Adaptive backstepping with learned gain kernels.")
    ap.add_argument("--version", action="version", version=f"adaptno {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, out=True):
        p.add_argument("--config", help="experiment TOML file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--dump-config", metavar="PATH",
                       help="write the effective config to PATH and continue")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("simulate", help="plant run: open loop or adaptive closed loop")
    common(p)
    p.add_argument("--kernel", choices=("none", "exact", "neural"), default="exact")
    p.add_argument("--model", help="KNO1 model file for --kernel neural")
    p.add_argument("--gamma-check", action="store_true",
                   help="with --kernel neural, also solve exact kernels and log Gamma(t)")

    p = sub.add_parser("arz", help="ARZ traffic closed loop")
    common(p)
    p.add_argument("--controller", choices=CONTROLLERS, default="exact_adaptive")
    p.add_argument("--model", help="KNO1 model for neural_adaptive")
    p.add_argument("--probes", help="comma-separated road positions in metres")

    p = sub.add_parser("gen-dataset", help="harvest (estimates, kernels) pairs")
    common(p)
    p.add_argument("--arz", action="store_true", help="ARZ dataset over random relaxation times")

    p = sub.add_parser("train", help="train the operator network")
    common(p)
    p.add_argument("--dataset", help="KDS1 dataset file")

    p = sub.add_parser("eval-kernel", help="exact (and optionally learned) kernels at the test point")
    common(p)
    p.add_argument("--model", help="KNO1 model to compare against")

    p = sub.add_parser("bench", help="solver vs operator timing table")
    common(p)
    p.add_argument("--model", help="KNO1 model file")
    p.add_argument("--resolutions", default="0.05,0.01,0.005")
    p.add_argument("--repeats", type=int, default=11)

    p = sub.add_parser("dataset-info", help="print a container descriptor as JSON")
    p.add_argument("path")
    return ap


COMMANDS = {
    "simulate": cmd_simulate,
    "arz": cmd_arz,
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "eval-kernel": cmd_eval_kernel,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    ap = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = ap.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command is None:
        ap.print_usage(sys.stderr)
        print("adaptno: error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        if args.command == "dataset-info":
            return cmd_dataset_info(args)
        cfg = _config(args)
        if args.dump_config:
            Path(args.dump_config).write_text(cfg.dumps())
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryDirectory(dir=out.parent, prefix=f".{out.name}.") as tmp:
            stage = Path(tmp)
            extra = COMMANDS[args.command](args, cfg, stage)
            _finish(stage, out, cfg, args, {"result": extra})
        logger.info("wrote %s", out)
        return 0
    except (ConfigError, ContractError, FormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"adaptno: error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"adaptno: numerical failure: {exc}", file=sys.stderr)
        return 2
    except AdaptNOError as exc:
        print(f"adaptno: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

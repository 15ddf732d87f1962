"""Command-line entry point.

    tdv <command> [--config run.json] [--set key=value ...] [--out DIR] [--threads N]

Commands: train, denoise, reconstruct, sweep-T, eigenmode, landscape,
sensitivity, selftest.  Each run writes its artifacts and a manifest.json
(resolved config, config hash, seed, artifact hashes) into the output
directory.  Exit codes: 0 success, 1 usage error, 2 numerical failure.

Noise levels ``sigma`` in the config are on the 8-bit gray scale (25 means
25/255 on [0, 1] data).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .analysis import (LandscapeGrid, PSNR_INF, cg_initialization, landscape, psnr, tdv_eigenpair,
                       transfer_reconstruct)
from .data import synth_dataset
from .errors import NumericalError, TDVError, UsageError
from .flow import FlowConfig, rescale_wrap, run_flow
from .io import load_checkpoint, save_checkpoint, save_tensor, write_csv, write_pgm
from .training import LossSpec, TrainConfig, adjoint_recursion, optimality_residual, sensitivity_bound, train

log = logging.getLogger("tdv")

CONFIG_VERSION = 1
COMMANDS = ("train", "denoise", "reconstruct", "sweep-T", "eigenmode", "landscape", "sensitivity", "selftest")
PSNR_CSV_SENTINEL = 999.0

_num = {"type": "number"}
_int = {"type": "integer"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_path = {"type": ["string", "null"]}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "task": {"enum": ["denoise", "sr", "mri", "ct"]},
        "sigma": {"type": "number", "minimum": 0},
        "gamma": _posint,
        "lam": _pos,
        "S": _posint,
        "T": {"type": ["number", "null"], "minimum": 0},
        "m": _posint,
        "l": _posint,
        "nu": _pos,
        "seed": {"type": "integer", "minimum": 0},
        "count": _posint,
        "patch": {"type": "integer", "minimum": 4},
        "test_seed": {"type": "integer", "minimum": 0},
        "test_count": _posint,
        "test_patch": {"type": "integer", "minimum": 4},
        "steps": {"type": "integer", "minimum": 0},
        "lr": _pos,
        "lr_T": _pos,
        "T_init": {"type": "number", "minimum": 0},
        "batch_size": _posint,
        "loss": {"enum": ["squared_l2", "smooth_l1"]},
        "acceleration": _posint,
        "undersample": _posint,
        "n_angles": _posint,
        "iters": _posint,
        "n_T": {"type": "integer", "minimum": 2},
        "T_min": {"type": ["number", "null"], "minimum": 0},
        "T_max": {"type": ["number", "null"], "minimum": 0},
        "eig_steps": _posint,
        "eig_tol": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "grid_res": {"type": "integer", "minimum": 2},
        "pixel": {"type": ["integer", "null"], "minimum": 0},
        "subset_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "checkpoint": _path,
        "checkpoint2": _path,
        "source": _path,
    },
}

DEFAULTS = {
    "version": CONFIG_VERSION, "task": "denoise", "sigma": 25.5, "gamma": 2, "lam": 1.0, "S": 5, "T": None,
    "m": 8, "l": 1, "nu": 9.0, "seed": 0, "count": 16, "patch": 16, "test_seed": 100, "test_count": 10,
    "test_patch": 64, "steps": 500, "lr": 4e-4, "lr_T": 4e-4, "T_init": 0.1, "batch_size": 8,
    "loss": "squared_l2", "acceleration": 4, "undersample": 4, "n_angles": 32, "iters": 200, "n_T": 25,
    "T_min": None, "T_max": None, "eig_steps": 5000, "eig_tol": None, "grid_res": 33, "pixel": None,
    "subset_fraction": 0.25, "checkpoint": None, "checkpoint2": None, "source": None,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tdv", description="Total deep variation regularizer toolkit")
    p.add_argument("--version", action="version", version=f"tdv {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (VALUE parsed as JSON, else string)")
        s.add_argument("--seed", type=int)
        s.add_argument("--checkpoint")
        s.add_argument("--out", default=f"runs/{name}")
        s.add_argument("--threads", type=int, help="cap BLAS/FFT worker threads")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> dict:
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        try:
            cfg[k] = json.loads(v)
        except json.JSONDecodeError:
            cfg[k] = v
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.checkpoint is not None:
        cfg["checkpoint"] = args.checkpoint
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as e:
        path = ".".join(str(t) for t in e.absolute_path) or "<root>"
        raise UsageError(f"invalid config at {path}: {e.message}") from e
    return {**DEFAULTS, **cfg}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


class Run:
    """Output directory bookkeeping: every artifact is hashed into the manifest."""

    def __init__(self, command, cfg, out):
        self.command, self.cfg = command, cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts = {}
        self.summary = {}

    def path(self, name):
        return self.out / name

    def _record(self, name):
        self.artifacts[name] = hashlib.sha256(self.path(name).read_bytes()).hexdigest()

    def csv(self, name, header, rows):
        write_csv(self.path(name), header, rows)
        self._record(name)

    def tensor(self, name, x):
        save_tensor(self.path(name), x)
        self._record(name)

    def pgm(self, name, img):
        write_pgm(self.path(name), img)
        self._record(name)

    def finish(self):
        manifest = {"tool": "tdv", "version": __version__, "command": self.command,
                    "config": self.cfg, "config_hash": config_hash(self.cfg), "seed": self.cfg["seed"],
                    "summary": self.summary, "artifacts": dict(sorted(self.artifacts.items()))}
        self.path("manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest


def _psnr_fields(v):
    return (PSNR_CSV_SENTINEL, 1) if v == PSNR_INF else (v, 0)


def _need_checkpoint(cfg, key="checkpoint"):
    if not cfg[key]:
        raise UsageError(f"this command needs '{key}' (config key or --checkpoint)")
    try:
        return load_checkpoint(cfg[key])
    except FileNotFoundError as e:
        raise UsageError(f"checkpoint not found: {e.filename}") from e


def _stopping_time(cfg, T_ckpt):
    T = cfg["T"] if cfg["T"] is not None else T_ckpt
    if T is None:
        raise UsageError("no stopping time: set 'T' or use a checkpoint that stores one")
    return float(T)


def _test_set(cfg, task=None, patch=None):
    task = task or cfg["task"]
    level = cfg["sigma"] / 255.0 if task == "denoise" else (cfg["gamma"] if task == "sr" else cfg["sigma"] / 255.0)
    kw = {}
    if task == "mri":
        kw["acceleration"] = cfg["acceleration"]
    if task == "ct":
        kw.update(n_angles=cfg["n_angles"], undersample=cfg["undersample"])
    return synth_dataset(cfg["test_seed"], cfg["test_count"], patch or cfg["test_patch"], level, task,
                         cfg["source"], **kw)


# --------------------------------------------------------------------------
# commands


def cmd_train(run: Run):
    cfg = run.cfg
    if cfg["task"] != "denoise":
        raise UsageError("training is implemented for the denoising task")
    sigma = cfg["sigma"] / 255.0
    ds = synth_dataset(cfg["seed"], cfg["count"], cfg["patch"], sigma, "denoise", cfg["source"])
    tc = TrainConfig(lr=cfg["lr"], lr_T=cfg["lr_T"], batch_size=cfg["batch_size"], patch_size=cfg["patch"],
                     steps=cfg["steps"], seed=cfg["seed"], S=cfg["S"], loss=LossSpec(cfg["loss"]),
                     T_init=cfg["T_init"] if cfg["T"] is None else cfg["T"], m=cfg["m"], l=cfg["l"],
                     nu=cfg["nu"], lam=cfg["lam"], learn_T=cfg["T"] is None)
    res = train(ds, tc)
    run.csv("history.csv", ["step", "J", "T", "grad_norm"],
            [(h["step"], h["J"], h["T"], h["grad_norm"]) for h in res.history])
    ck = save_checkpoint(run.path("checkpoint"), res.theta, res.T, {"sigma_train": sigma, "S": cfg["S"]})
    run.artifacts["checkpoint/manifest.json"] = ck["sha256"]
    run.summary.update(T=res.T, initial_loss=res.initial_loss, final_loss=res.final_loss,
                       rng={"init": cfg["seed"], "data": cfg["seed"], "noise": cfg["seed"] + 0x9E3779B9,
                            "batches": cfg["seed"] + 1})


def cmd_denoise(run: Run):
    cfg = run.cfg
    theta, T_ck, man = _need_checkpoint(cfg)
    T = _stopping_time(cfg, T_ck)
    te = _test_set(cfg, "denoise")
    sigma = cfg["sigma"] / 255.0
    fc = FlowConfig(T, cfg["S"])
    sigma_train = man.get("sigma_train")
    if sigma_train and sigma > 0 and sigma != sigma_train:
        out = rescale_wrap(te.z, sigma, sigma_train, theta, fc)
    else:
        out = run_flow(te.x_init, te.z, theta, fc).final
    rows, pin, pout = [], [], []
    for i in range(len(te)):
        a, b = psnr(te.z[i], te.y[i]), psnr(out[i], te.y[i])
        pin.append(a)
        pout.append(b)
        rows.append((i, *_psnr_fields(a), *_psnr_fields(b)))
    run.csv("psnr.csv", ["index", "psnr_in", "psnr_in_inf", "psnr_out", "psnr_out_inf"], rows)
    run.tensor("denoised.tdvt", out)
    run.pgm("noisy_0.pgm", te.z[0])
    run.pgm("denoised_0.pgm", out[0])
    run.pgm("truth_0.pgm", te.y[0])
    run.summary.update(T=T, mean_psnr_in=float(np.mean(pin)), mean_psnr_out=float(np.mean(pout)))


def cmd_reconstruct(run: Run):
    cfg = run.cfg
    if cfg["task"] == "denoise":
        raise UsageError("reconstruct needs task sr, mri or ct")
    theta, _, _ = _need_checkpoint(cfg)
    te = _test_set(cfg)
    x0 = te.x_init if cfg["task"] != "mri" else cg_initialization(te.op, te.z)
    x = transfer_reconstruct(te.op, te.z, theta, cfg["lam"], x0, cfg["iters"])
    rows = [(i, psnr(x0[i], te.y[i]), psnr(x[i], te.y[i])) for i in range(len(te))]
    run.csv("psnr.csv", ["index", "psnr_init", "psnr_recon"], rows)
    run.tensor("recon.tdvt", x)
    run.pgm("init_0.pgm", x0[0])
    run.pgm("recon_0.pgm", x[0])
    run.summary.update(mean_psnr_init=float(np.mean([r[1] for r in rows])),
                       mean_psnr_recon=float(np.mean([r[2] for r in rows])))


def sweep_T(theta, ds, Ts, S, loss=LossSpec()):
    """Mean PSNR and optimality residual for each stopping time in Ts."""
    rows = []
    for T in Ts:
        traj = run_flow(ds.x_init, ds.z, theta, FlowConfig(float(T), S, ds.op))
        adj = adjoint_recursion(traj, theta, loss, ds.y)
        p = float(np.mean([psnr(traj.final[i], ds.y[i]) for i in range(len(ds))]))
        rows.append((float(T), p, optimality_residual(traj, adj)))
    return rows


def cmd_sweep_T(run: Run):
    cfg = run.cfg
    theta, T_ck, _ = _need_checkpoint(cfg)
    Tc = _stopping_time(cfg, T_ck)
    hi = cfg["T_max"] if cfg["T_max"] is not None else min(2 * Tc, 1.0)
    lo = cfg["T_min"] if cfg["T_min"] is not None else hi / cfg["n_T"]
    rows = sweep_T(theta, _test_set(cfg, "denoise"), np.linspace(lo, hi, cfg["n_T"]), cfg["S"])
    run.csv("sweep.csv", ["T", "PSNR", "optimality_residual"], rows)
    res = np.array([r[2] for r in rows])
    k = int(np.argmax([r[1] for r in rows]))
    run.summary.update(T_best=rows[k][0], sign_change=bool(np.any(np.diff(np.sign(res)) != 0)))


def cmd_eigenmode(run: Run):
    cfg = run.cfg
    theta, _, _ = _need_checkpoint(cfg)
    te = _test_set(cfg, "denoise")
    rows = []
    for i in range(len(te)):
        e = tdv_eigenpair(te.y[i:i + 1], theta, cfg["eig_steps"], tol=cfg["eig_tol"])
        rows.append((i, e.lambda_bar, e.residual, e.norm_violation, e.steps))
        run.tensor(f"eigen_{i:03d}.tdvt", e.x_bar)
        xb = e.x_bar[0, 0]
        span = xb.max() - xb.min()
        run.pgm(f"eigen_{i:03d}.pgm", (xb - xb.min()) / span if span > 0 else np.zeros_like(xb))
    run.csv("eigenpairs.csv", ["index", "lambda", "residual", "norm_violation", "steps"], rows)
    run.summary["max_residual"] = float(max(r[2] for r in rows))


def cmd_landscape(run: Run):
    cfg = run.cfg
    theta, _, _ = _need_checkpoint(cfg)
    te = _test_set(cfg, "denoise")
    x, n = te.y[0], te.z[0] - te.y[0]
    H, W = x.shape[-2:]
    i = cfg["pixel"] if cfg["pixel"] is not None else (H // 2) * W + W // 2
    g: LandscapeGrid = landscape(x, n, i, cfg["grid_res"], theta)
    run.csv("landscape.csv", ["xi1", "xi2", "r"], list(g.rows()))
    run.summary.update(pixel=list(g.index), min=float(g.values.min()), max=float(g.values.max()))


def cmd_sensitivity(run: Run):
    cfg = run.cfg
    theta, T1, _ = _need_checkpoint(cfg)
    theta2, T2, _ = _need_checkpoint(cfg, "checkpoint2")
    te = _test_set(cfg, "denoise")
    rows, ok = [], True
    for i in range(len(te)):
        a = run_flow(te.x_init[i:i + 1], te.z[i:i + 1], theta, FlowConfig(T1, cfg["S"]))
        b = run_flow(te.x_init[i:i + 1], te.z[i:i + 1], theta2, FlowConfig(T2, cfg["S"]))
        rep = sensitivity_bound(a, b, theta, theta2, T1, T2)
        for s in range(cfg["S"]):
            rows.append((i, s + 1, rep.lhs[s], rep.rhs[s], rep.lipschitz))
        ok &= bool(np.all(rep.lhs <= rep.rhs))
    run.csv("sensitivity.csv", ["image", "s", "lhs", "rhs", "lipschitz"], rows)
    run.summary["bound_holds"] = ok


def run_selftest():
    """Quick numerical self-checks; returns a list of (name, passed, value)."""
    from .analysis import _dot
    from .flow import B_apply, semi_implicit_step
    from .operators import BicubicDown, Identity, MriOp, RadonOp, cartesian_mask
    from .regularizer import init_params, tdv_energy, tdv_grad, tdv_hvp
    from .rng import CounterRNG

    rng = CounterRNG(2024)
    out = []
    ops = {"identity": Identity(), "bicubic": BicubicDown(2, (1, 8, 8)),
           "mri": MriOp(cartesian_mask(8, 8, 2)), "radon": RadonOp(8, n_angles=6)}
    for name, A in ops.items():
        x = rng.normal((2, 1, 8, 8))
        y = rng.normal(A.apply(x).shape)
        err = abs(_dot(A.apply(x), y) - _dot(x, A.adjoint(y))) / (np.linalg.norm(x) * np.linalg.norm(y))
        out.append((f"dot_{name}", err <= 1e-10, err))
    theta = init_params(7, 1, 4, 1)
    x = rng.normal((1, 1, 8, 8)) * 0.3
    v = rng.normal(x.shape)
    g = tdv_grad(x, theta)
    h = 1e-5
    fd = (tdv_energy(x + h * v, theta) - tdv_energy(x - h * v, theta)) / (2 * h)
    err = abs(fd - _dot(g, v)) / max(abs(fd), 1e-12)
    out.append(("grad_fd", err < 1e-6, err))
    u = rng.normal(x.shape)
    a, b = _dot(tdv_hvp(x, theta, v), u), _dot(v, tdv_hvp(x, theta, u))
    err = abs(a - b) / max(abs(a), 1e-12)
    out.append(("hvp_symmetry", err < 1e-10, err))
    A = ops["bicubic"]
    z = A.apply(rng.uniform((1, 1, 8, 8)))
    T, S = 0.5, 5
    xn = semi_implicit_step(x, T, S, theta, z, A, cg_iters=64, cg_tol=0.0)
    rhs = x + (T / S) * (A.adjoint(z) - tdv_grad(x, theta))
    err = np.linalg.norm(B_apply(xn, T, S, A) - rhs) / np.linalg.norm(rhs)
    out.append(("cg_semi_implicit", err < 1e-9, err))
    return out


def cmd_selftest(run: Run):
    results = run_selftest()
    run.csv("selftest.csv", ["check", "passed", "value"], [(n, int(ok), v) for n, ok, v in results])
    for n, ok, v in results:
        print(f"{'PASS' if ok else 'FAIL'} {n} {v:.3e}")
    run.summary["passed"] = all(ok for _, ok, _ in results)
    if not run.summary["passed"]:
        run.finish()
        raise NumericalError("selftest failed")


HANDLERS = {"train": cmd_train, "denoise": cmd_denoise, "reconstruct": cmd_reconstruct,
            "sweep-T": cmd_sweep_T, "eigenmode": cmd_eigenmode, "landscape": cmd_landscape,
            "sensitivity": cmd_sensitivity, "selftest": cmd_selftest}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        run = Run(args.command, cfg, args.out)
        with threadpool_limits(limits=args.threads):
            HANDLERS[args.command](run)
        run.finish()
        return 0
    except NumericalError as e:
        print(f"tdv: numerical failure: {e}", file=sys.stderr)
        return 2
    except (UsageError, TDVError, OSError) as e:
        print(f"tdv: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

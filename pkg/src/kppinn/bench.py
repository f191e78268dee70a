"""Experiment runner: configs, error metric, K^{-1} timing and report files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np
import yaml
from scipy.linalg import lapack

from . import __version__
from .kernel_core import Grid1D, MaternParams, TensorGrid, kernel_matrix
from .kernel_packet import _cholesky, build_factor, quadratic_form
from .losses import DenseCapError, LossKind
from .network import MLPConfig, apply_mlp
from .residuals import FACTORIES, make_problem
from .tensor_algebra import build_tensor_factor, tensor_quadratic_form
from .training import DEFAULT_ITERATIONS, TrainConfig, train

RESULT_COLUMNS = ("problem", "loss", "nu_or_order", "mode", "seed", "rel_l2", "theta_hat", "iters", "wall_s", "status")
TRACE_COLUMNS = ("iter", "loss", "theta_hat", "wall_s")


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


# --------------------------------------------------------------------------
# metric


def relative_l2_error(pred, truth) -> float:
    """``sqrt(sum |pred - truth|^2 / sum |truth|^2)``."""
    pred = np.ravel(np.asarray(pred, dtype=np.float64))
    truth = np.ravel(np.asarray(truth, dtype=np.float64))
    if pred.shape != truth.shape or truth.size == 0:
        raise ValueError(f"need equal nonzero lengths, got {pred.size} and {truth.size}")
    den = float(np.sum(truth * truth))
    if den == 0.0:
        raise ZeroDivisionError("truth has zero norm")
    return math.sqrt(float(np.sum((pred - truth) ** 2)) / den)


# --------------------------------------------------------------------------
# configs

_LOSS_KEYS = {"kind", "nu", "ell", "order", "boundary_weight", "dense_cap"}
_TRAIN_KEYS = {"n_iter", "lr", "beta1", "beta2", "eps", "log_every", "theta_init", "loss_floor", "patience", "wall_budget"}
_TOP_KEYS = {"problem", "mode", "seeds", "grid", "network", "loss", "losses", "train", "name"}


@dataclass(frozen=True)
class LossSpec:
    """A loss entry of a config; ``reason`` is set for unsupported variants."""

    kind: LossKind | None
    label: str
    nu_or_order: float
    reason: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    mode: str = "forward"
    seeds: tuple = (0, 1, 2)
    grid: dict = field(default_factory=dict)
    hidden: tuple | None = None
    losses: tuple = ()
    train: dict = field(default_factory=dict)
    name: str = ""
    raw: dict = field(default_factory=dict, repr=False)

    def train_config(self, loss: LossKind, seed: int, **overrides) -> TrainConfig:
        kw = {"n_iter": DEFAULT_ITERATIONS[self.problem], **self.train, **overrides}
        if kw.get("theta_init") is not None:
            kw["theta_init"] = tuple(kw["theta_init"])
        return TrainConfig(loss=loss, mode=self.mode, seed=seed, **kw)

    def network(self, seed=0) -> MLPConfig:
        return MLPConfig.for_problem(self.problem, seed=seed, hidden=self.hidden)

    def make_problem(self):
        return make_problem(self.problem, **self.grid)

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True, default=str).encode()).hexdigest()[:12]


def _parse_loss(entry, path) -> LossSpec:
    if not isinstance(entry, dict):
        raise ConfigError(path, "must be a mapping")
    unknown = set(entry) - _LOSS_KEYS
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown key")
    kind = entry.get("kind")
    bw = entry.get("boundary_weight", 1.0)
    try:
        if kind == "l2":
            return LossSpec(LossKind.l2(bw), "L2", 0)
        if kind in ("rkhs_kp", "rkhs_dense"):
            nu, ell = float(entry.get("nu", 0.5)), float(entry.get("ell", 1.0))
            lk = LossKind.kp(nu, ell, bw) if kind == "rkhs_kp" else LossKind.dense(nu, ell, bw, int(entry.get("dense_cap", 4096)))
            return LossSpec(lk, lk.label, nu)
        if kind == "sobolev":
            order = entry.get("order", 1)
            if order == 3:
                return LossSpec(None, "Sobolev nu=3", 3, "Sobolev order 3 is out of scope (jets cap at order 2)")
            lk = LossKind.sobolev(order, bw)
            return LossSpec(lk, lk.label, order)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None
    raise ConfigError(f"{path}.kind", f"expected one of l2, rkhs_kp, rkhs_dense, sobolev; got {kind!r}")


def parse_config(data: dict, mode=None) -> ExperimentConfig:
    """Validate a config mapping; errors carry the dotted path of the field."""
    if not isinstance(data, dict):
        raise ConfigError("", "config must be a mapping")
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")
    problem = data.get("problem")
    if problem not in FACTORIES:
        raise ConfigError("problem", f"expected one of {sorted(FACTORIES)}, got {problem!r}")
    mode = mode or data.get("mode", "forward")
    if mode not in ("forward", "inverse"):
        raise ConfigError("mode", f"expected forward or inverse, got {mode!r}")
    seeds = data.get("seeds", [0, 1, 2])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds", "expected a non-empty list of non-negative integers")
    grid = data.get("grid", {}) or {}
    if not isinstance(grid, dict):
        raise ConfigError("grid", "must be a mapping")
    grid = {k: tuple(v) if isinstance(v, list) else v for k, v in grid.items()}
    try:
        make_problem(problem, **grid)
    except (TypeError, ValueError, OSError) as exc:
        raise ConfigError("grid", str(exc)) from None
    net = data.get("network", {}) or {}
    hidden = net.get("hidden") if isinstance(net, dict) else None
    if hidden is not None and (not isinstance(hidden, list) or not all(isinstance(h, int) and h > 0 for h in hidden)):
        raise ConfigError("network.hidden", "expected a list of positive integers")
    if "loss" in data and "losses" in data:
        raise ConfigError("losses", "give either `loss` or `losses`, not both")
    entries = data.get("losses", [data.get("loss", {"kind": "rkhs_kp", "nu": 0.5})])
    if not isinstance(entries, list) or not entries:
        raise ConfigError("losses", "expected a non-empty list")
    key = "losses" if "losses" in data else "loss"
    losses = tuple(_parse_loss(e, f"{key}[{i}]" if key == "losses" else key) for i, e in enumerate(entries))
    tr = data.get("train", {}) or {}
    if not isinstance(tr, dict):
        raise ConfigError("train", "must be a mapping")
    unknown = set(tr) - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"train.{sorted(unknown)[0]}", "unknown key")
    cfg = ExperimentConfig(problem, mode, tuple(seeds), grid, tuple(hidden) if hidden else None, losses, dict(tr),
                           data.get("name", ""), data)
    probe = next((l.kind for l in losses if l.kind is not None), LossKind.l2())
    try:
        cfg.train_config(probe, seeds[0])
    except (TypeError, ValueError) as exc:
        raise ConfigError("train", str(exc)) from None
    return cfg


def load_config(path, mode=None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"{path}: not valid YAML ({exc})") from None
    return parse_config(data, mode)


# --------------------------------------------------------------------------
# running


@dataclass
class RunReport:
    problem: str
    loss: str
    nu_or_order: float
    mode: str
    seeds: list
    rel_l2: list
    mean: float | None
    se: float | None
    theta_hat: list
    wall_s: list
    iters: list
    status: list
    messages: list
    config: dict
    version: str = __version__

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data) -> "RunReport":
        return cls(**data)

    def rows(self):
        out = []
        for i, seed in enumerate(self.seeds):
            theta = self.theta_hat[i]
            out.append({
                "problem": self.problem,
                "loss": self.loss,
                "nu_or_order": repr(float(self.nu_or_order)),
                "mode": self.mode,
                "seed": str(seed),
                "rel_l2": "" if self.rel_l2[i] is None else repr(float(self.rel_l2[i])),
                "theta_hat": ";".join(repr(float(t)) for t in theta) if theta else "",
                "iters": str(self.iters[i]),
                "wall_s": repr(round(float(self.wall_s[i]), 3)),
                "status": self.status[i],
            })
        return out


def mean_and_se(values):
    vals = [v for v in values if v is not None and np.isfinite(v)]
    if not vals:
        return None, None
    mean = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return mean, se


def predict_on_test(problem, network: MLPConfig, params, chunk=20_000) -> np.ndarray:
    """Error-metric quantity predicted by the network on the test grid."""
    flat = jnp.asarray(getattr(params, "values", params))
    fn = jax.jit(lambda p: problem.prediction(lambda x: apply_mlp(network, flat, x), p))
    pts = problem.test_grid.points()
    parts = [np.asarray(fn(jnp.asarray(pts[i : i + chunk]))) for i in range(0, len(pts), chunk)]
    if problem.output_dim == 1:
        return np.concatenate(parts)
    # vector quantities are concatenated component-wise per chunk
    k = parts[0].size // min(chunk, len(pts))
    return np.concatenate([np.concatenate([p.reshape(k, -1)[j] for p in parts]) for j in range(k)])


def run_experiment(cfg: ExperimentConfig, loss: LossSpec, n_iter=None, traces=None) -> RunReport:
    """Train one loss variant over all seeds and evaluate on the test grid."""
    base = {"problem": cfg.problem, "loss": loss.label, "nu_or_order": loss.nu_or_order, "mode": cfg.mode,
            "seeds": list(cfg.seeds), "config": cfg.raw}
    n = len(cfg.seeds)
    if loss.kind is None:
        return RunReport(**base, rel_l2=[None] * n, mean=None, se=None, theta_hat=[[]] * n, wall_s=[0.0] * n,
                         iters=[0] * n, status=["skipped"] * n, messages=[loss.reason] * n)
    problem = cfg.make_problem()
    truth = problem.target(problem.test_grid.points())
    errs, thetas, walls, iters, status, msgs = [], [], [], [], [], []
    for seed in cfg.seeds:
        net = cfg.network(seed)
        overrides = {} if n_iter is None else {"n_iter": n_iter}
        t0 = time.perf_counter()
        try:
            tr = train(problem, net, cfg.train_config(loss.kind, seed, **overrides))
        except (ArithmeticError, ValueError) as exc:
            errs.append(None), thetas.append([]), walls.append(time.perf_counter() - t0), iters.append(0)
            status.append("skipped" if isinstance(exc, DenseCapError) else "failed")
            msgs.append(f"{type(exc).__name__}: {exc}")
            continue
        wall = time.perf_counter() - t0
        if traces is not None:
            traces[seed] = tr
        err = None
        if tr.status != "diverged":
            err = relative_l2_error(predict_on_test(problem, net, tr.params), truth)
        errs.append(err)
        thetas.append([float(t) for t in tr.theta] if cfg.mode == "inverse" else [])
        walls.append(wall)
        iters.append(tr.steps)
        status.append(tr.status)
        msgs.append(tr.message)
    mean, se = mean_and_se(errs)
    return RunReport(**base, rel_l2=errs, mean=mean, se=se, theta_hat=thetas, wall_s=walls, iters=iters,
                     status=status, messages=msgs)


# --------------------------------------------------------------------------
# files


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(columns, rows):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def read_results(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def emit_report(report: RunReport, out_dir, traces=None, results_csv=None):
    """Write ``report.json``, ``trace_<seed>.csv`` and upsert rows of ``results.csv``.

    Rows are keyed by (problem, loss, nu_or_order, mode, seed); re-running a
    configuration replaces its rows instead of duplicating them.
    """
    out_dir = Path(out_dir)
    results_csv = Path(results_csv) if results_csv is not None else out_dir / "results.csv"
    try:
        _atomic_write(out_dir / "report.json", json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
        for seed, tr in (traces or {}).items():
            rows = [dict(zip(TRACE_COLUMNS, (str(i), repr(l), th, repr(round(w, 3))))) for i, l, th, w in tr.rows()]
            _atomic_write(out_dir / f"trace_{seed}.csv", _csv_text(TRACE_COLUMNS, rows))
        key = lambda r: (r["problem"], r["loss"], r["nu_or_order"], r["mode"], r["seed"])
        new = report.rows()
        fresh = {key(r) for r in new}
        rows = [r for r in read_results(results_csv) if key(r) not in fresh] + new
        _atomic_write(results_csv, _csv_text(RESULT_COLUMNS, rows))
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write report files: {exc.strerror}", exc.filename) from None


# --------------------------------------------------------------------------
# K^{-1} timing


@dataclass(frozen=True)
class TimingStats:
    method: str
    n: int
    median: float
    min: float
    times: tuple
    value: float


def _parse_grid(spec, lo=0.0, hi=None):
    if isinstance(spec, (int, np.integer)):
        spec = (int(spec),)
    if isinstance(spec, str):
        spec = tuple(int(s) for s in spec.lower().split("x"))
    axes = [Grid1D(np.linspace(lo, lo + (m - 1) / 10.0 if hi is None else hi, m)) for m in spec]
    return TensorGrid(tuple(axes))


def _dense_tensor_qf(grid: TensorGrid, params, y, cap):
    if any(a.n > cap for a in grid.axes):
        raise DenseCapError(f"axis length above the dense cap {cap}")
    Y = y.reshape(grid.shape)
    for axis, g in enumerate(grid.axes):
        L = _cholesky(kernel_matrix(params, g))
        moved = np.moveaxis(Y, axis, 0)
        sol = lapack.dtrtrs(L, moved.reshape(g.n, -1), lower=1)[0]
        Y = np.moveaxis(sol.reshape(moved.shape), 0, axis)
    z = Y.reshape(-1)
    return float(z @ z)


def time_kinverse(grid, params: MaternParams, method="kp", repeats=5, seed=0, dense_cap=20_000, warmup=1):
    """Wall time of factor construction plus one quadratic form.

    ``grid`` is a point count, a ``"n1xn2"`` string, a :class:`Grid1D` or a
    :class:`TensorGrid`; counts are laid out with spacing 0.1.  The same
    random ``y`` (from ``seed``) is used for every method.
    """
    if isinstance(grid, Grid1D):
        grid = TensorGrid((grid,))
    elif not isinstance(grid, TensorGrid):
        grid = _parse_grid(grid)
    y = np.random.default_rng(seed).standard_normal(grid.n)
    if method == "kp":
        if grid.d == 1:
            run = lambda: quadratic_form(build_factor(grid.axes[0], params), y)
        else:
            run = lambda: tensor_quadratic_form(build_tensor_factor(grid, params, fallback=False), y)
    elif method == "dense":
        if grid.d == 1 and grid.n > dense_cap:
            raise DenseCapError(f"n={grid.n} exceeds the dense cap {dense_cap}")
        run = lambda: _dense_tensor_qf(grid, params, y, dense_cap)
    else:
        raise ValueError(f"method must be 'kp' or 'dense', got {method!r}")
    for _ in range(warmup):
        run()
    times, value = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        value = run()
        times.append(time.perf_counter() - t0)
    return TimingStats(method, grid.n, float(np.median(times)), float(np.min(times)), tuple(times), value)

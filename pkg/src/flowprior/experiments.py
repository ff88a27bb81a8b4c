"""Experiment pipelines: build instances, degrade, solve with each method, aggregate PSNR.

Each run writes to its output directory:

``records.jsonl``
    one JSON object per (instance, method), keys sorted; ``psnr`` is +inf
    (serialized as ``Infinity``) for an exact reconstruction.
``summary.csv``
    ``axis_value,method,n,mean_psnr,std_psnr`` (plot-ready).
``report.json``
    resolved config text plus the same aggregates.

Resuming a partially written run is not supported; rerun from scratch.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import degrade
from .config import SWEEP_AXES, Config, ConfigError, validate_experiment
from .flow import checkpoint_load
from .numkit import InvalidArgument, make_rng, psnr
from .solve import METHODS, SolveConfig, solve
from .theory import AnalyticPrior, verify_bound
from .training import IMAGE_KINDS, SYNTH_KINDS, load_dataset, read_imgd, synth_dataset

DEFAULT_METHODS = {
    "denoise_flow_noise": ["map", "mle", "bora", "hand"],
    "denoise_sinusoidal": ["map", "hand", "bora", "lasso_dct"],
    "denoise_radial": ["map", "hand", "bora", "lasso_dct"],
    "cs_noisy": ["map", "hand", "bora", "lasso_dct"],
    "cs_1bit": ["map", "hand", "bora"],
}
DEFAULT_OPERATOR = {
    "denoise_flow_noise": "scale",
    "denoise_sinusoidal": "identity",
    "denoise_radial": "identity",
    "cs_noisy": "linear",
    "cs_1bit": "sign",
}
DEFAULT_NOISE = {
    "denoise_flow_noise": "flow",
    "denoise_sinusoidal": "sinusoidal_rows",
    "denoise_radial": "radial",
    "cs_noisy": "sinusoidal",
    "cs_1bit": "sinusoidal",
}
NOISE_KINDS = ("sinusoidal", "sinusoidal_rows", "radial", "iso", "flow")
# compressed-sensing noise has positive mean; 0.05 is our chosen value (noise.mean overrides)
DEFAULT_NOISE_MEAN = {"cs_noisy": 0.05}


def _field_line(cfg: Config, section, key):
    return cfg.lines.get((section, key))


def _require_file(cfg: Config, section, key):
    path = cfg.get(section, key)
    if path is None:
        raise ConfigError(f"{section}.{key}", "required")
    if not os.path.isfile(path):
        raise ConfigError(f"{section}.{key}", f"file not found: {path}", _field_line(cfg, section, key))
    return path


def array_hash(a) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype=np.float64).tobytes()).hexdigest()[:16]


# resolved experiment ----------------------------------------------------------------

@dataclass
class Experiment:
    name: str
    cfg: Config
    seed: int
    instances: int
    methods: list
    truths: np.ndarray
    height: int
    width: int
    test_family: str
    prior_path: str
    noise_kind: str
    op_kind: str
    solve_cfgs: dict = field(default_factory=dict)

    @property
    def d(self):
        return self.truths.shape[1]

    @property
    def ood(self) -> bool:
        family = self.cfg.get("data", "prior_family")
        return family is not None and family != self.test_family


# Sinusoidal/radial denoising does not use a short z-space schedule: the 0.001-floor
# rows make the z-space problem stiff, so MAP runs in signal space from the observation.
_DENOISE_DIAG = {
    "map": dict(steps=300, lr=0.005, beta=1.0, space="x", z_init="observation"),
    "mle": dict(steps=1000, lr=0.02),
    "bora": dict(steps=1000, lr=0.02, lam=0.01),
    "hand": dict(steps=150, lr=0.02, gamma=2.0),
    "lasso_dct": dict(steps=200, lam=0.05),
}
# Per-experiment, per-method solver defaults; [solve] and [solve.<method>] sections override them.
METHOD_DEFAULTS = {
    "denoise_flow_noise": {
        "map": dict(steps=400, lr=0.02, beta=1.0),
        "mle": dict(steps=1000, lr=0.02),
        "bora": dict(steps=1000, lr=0.02, lam=0.01),
        "hand": dict(steps=400, lr=0.02, gamma=0.0),
        "lasso_dct": dict(steps=200, lam=0.05),
    },
    "denoise_sinusoidal": _DENOISE_DIAG,
    "denoise_radial": _DENOISE_DIAG,
    "cs_noisy": {
        "map": dict(steps=300, lr=0.02, beta=100.0),
        "mle": dict(steps=1000, lr=0.02),
        "bora": dict(steps=1000, lr=0.02, lam=0.001),
        "hand": dict(steps=300, lr=0.02, gamma=10.0),
        "lasso_dct": dict(steps=500, lam=0.01),
    },
    "cs_1bit": {
        "map": dict(steps=200, lr=0.02, beta=1.0),
        "mle": dict(steps=1000, lr=0.02),
        "bora": dict(steps=1000, lr=0.02, lam=0.01),
        "hand": dict(steps=200, lr=0.02, gamma=1.0),
    },
}


def solve_config_for(cfg: Config, name: str, method: str, seed: int) -> SolveConfig:
    kw = dict(METHOD_DEFAULTS[name].get(method, {}), method=method, seed=seed)
    for key in ("steps", "lr", "z_init", "z_init_std", "space", "restarts"):
        if cfg.has("solve", key):
            kw[key] = cfg.get("solve", key)
    section = f"solve.{method}"
    for key in cfg.raw.get(section, {}):
        kw[key] = cfg.get(section, key)
    if method != "map" and kw.get("space") == "x" and not cfg.has(section, "space"):
        kw["space"] = "z"  # a global space=x only applies where it is defined
    try:
        return SolveConfig(**kw)
    except InvalidArgument as exc:
        raise ConfigError(section, str(exc)) from None


def resolve(cfg: Config) -> Experiment:
    name = validate_experiment(cfg)
    if name == "theorem":
        raise ConfigError("experiment.name", "the theorem experiment runs through verify-theorem")
    seed = cfg.get("experiment", "seed", 0)
    instances = cfg.get("experiment", "instances", 20)
    methods = cfg.get("experiment", "methods", DEFAULT_METHODS[name])
    for m in methods:
        if m not in METHODS:
            raise ConfigError("experiment.methods", f"unknown method {m!r}", _field_line(cfg, "experiment", "methods"))

    test = cfg.get("data", "test", "synth:blobs8x8")
    if test.startswith("synth:"):
        kind = test.split(":", 1)[1]
        if kind not in SYNTH_KINDS:
            raise ConfigError("data.test", f"unknown synthetic kind {kind!r}", _field_line(cfg, "data", "test"))
        data = synth_dataset(kind, instances, make_rng([seed, 101]))
        family = kind
    else:
        _require_file(cfg, "data", "test")
        data = load_dataset(test)
        family = os.path.basename(test)
        if data.n < instances:
            raise ConfigError("data.test", f"dataset holds {data.n} items, {instances} instances requested")
    truths = data.items[:instances]

    prior_path = _require_file(cfg, "prior", "checkpoint")
    noise_kind = cfg.get("noise", "kind", DEFAULT_NOISE[name])
    if noise_kind not in NOISE_KINDS:
        raise ConfigError("noise.kind", f"unknown noise kind {noise_kind!r}", _field_line(cfg, "noise", "kind"))
    if noise_kind == "flow":
        _require_file(cfg, "noise", "checkpoint")
    op_kind = cfg.get("operator", "kind", DEFAULT_OPERATOR[name])
    if op_kind not in degrade.OPERATOR_KINDS:
        raise ConfigError("operator.kind", f"unknown operator {op_kind!r}", _field_line(cfg, "operator", "kind"))
    if cfg.has("operator", "matrix"):
        _require_file(cfg, "operator", "matrix")

    exp = Experiment(name, cfg, seed, instances, methods, truths, data.height, data.width, family,
                     prior_path, noise_kind, op_kind)
    for m in methods:
        exp.solve_cfgs[m] = solve_config_for(cfg, name, m, seed)
    if "lasso_dct" in methods and op_kind == "sign":
        raise ConfigError("experiment.methods", "lasso_dct cannot be combined with a sign operator")
    return exp


def resolved_config(exp: Experiment) -> Config:
    """The experiment's config with every default written out; reloading it reproduces the run."""
    cfg = exp.cfg.copy()
    cfg.set("experiment", "seed", exp.seed)
    cfg.set("experiment", "instances", exp.instances)
    cfg.set("experiment", "methods", exp.methods)
    if not cfg.has("data", "test"):
        cfg.set("data", "test", "synth:blobs8x8")
    cfg.set("noise", "kind", exp.noise_kind)
    if exp.noise_kind == "flow":
        cfg.set("noise", "shift", cfg.get("noise", "shift", 0.0))
        cfg.set("noise", "scale", cfg.get("noise", "scale", 1.0))
    elif exp.noise_kind == "iso":
        cfg.set("noise", "sigma", cfg.get("noise", "sigma", 0.1))
    else:
        cfg.set("noise", "amplitude", cfg.get("noise", "amplitude", 0.1))
    if exp.noise_kind != "flow":
        cfg.set("noise", "mean", cfg.get("noise", "mean", DEFAULT_NOISE_MEAN.get(exp.name, 0.0)))
    cfg.set("operator", "kind", exp.op_kind)
    if exp.op_kind == "scale":
        cfg.set("operator", "scale", cfg.get("operator", "scale", 0.5))
    elif exp.op_kind in ("linear", "sign") and not cfg.has("operator", "matrix"):
        cfg.set("operator", "m", cfg.get("operator", "m", 32))
    for method, sc in exp.solve_cfgs.items():
        for key, value in asdict(sc).items():
            if key not in ("method", "seed"):
                cfg.set(f"solve.{method}", key, "none" if value is None else value)
    return cfg


# per-instance work ---------------------------------------------------------------------

def build_operator(exp: Experiment, rng):
    cfg = exp.cfg
    d = exp.d
    if exp.op_kind == "identity":
        return degrade.identity_op(d)
    if exp.op_kind == "scale":
        return degrade.scale_op(d, cfg.get("operator", "scale", 0.5))
    if cfg.has("operator", "matrix"):
        A, _, _, _ = read_imgd(cfg.get("operator", "matrix"))
        if A.shape[0] != 1:
            raise ConfigError("operator.matrix", "matrix file must hold exactly one item")
        _, h, w, _ = read_imgd(cfg.get("operator", "matrix"))
        A = A.reshape(h, w)
    else:
        m = cfg.get("operator", "m", 32)
        if m < 1:
            raise ConfigError("operator.m", "must be >= 1", _field_line(cfg, "operator", "m"))
        A = degrade.gaussian_matrix(m, d, rng)
    return degrade.linear_op(A) if exp.op_kind == "linear" else degrade.sign_op(A)


def build_noise(exp: Experiment, m: int, noise_model_cache: dict):
    cfg = exp.cfg
    kind = exp.noise_kind
    amp = cfg.get("noise", "amplitude", 0.1)
    mean = cfg.get("noise", "mean", DEFAULT_NOISE_MEAN.get(exp.name, 0.0))
    if kind == "sinusoidal_rows":
        if m != exp.d:
            raise ConfigError("noise.kind", "row-wise sinusoidal noise needs an image-shaped observation")
        return degrade.DiagGauss(degrade.sinusoidal_rows(exp.height, exp.width, amp), mean)
    if kind == "sinusoidal":
        return degrade.DiagGauss(degrade.sinusoidal_vector(m, amp), mean)
    if kind == "radial":
        if m != exp.d:
            raise ConfigError("noise.kind", "radial noise needs an image-shaped observation")
        center = None
        if cfg.has("noise", "center_row") or cfg.has("noise", "center_col"):
            center = (cfg.get("noise", "center_row", exp.height // 2 - 1),
                      cfg.get("noise", "center_col", exp.width // 2 - 1))
        return degrade.DiagGauss(degrade.radial_image(exp.height, exp.width, center, amp), mean)
    if kind == "iso":
        return degrade.IsoGauss(cfg.get("noise", "sigma", 0.1), m, mean)
    path = cfg.get("noise", "checkpoint")
    if path not in noise_model_cache:
        noise_model_cache[path] = checkpoint_load(path)
    model = noise_model_cache[path]
    if model.d != m:
        raise ConfigError("noise.checkpoint", f"noise flow has dimension {model.d}, observations have {m}")
    return degrade.FlowNoise(model, cfg.get("noise", "shift", 0.0), cfg.get("noise", "scale", 1.0))


def run_instance(exp: Experiment, index: int, prior=None, noise_cache=None) -> list:
    prior = prior if prior is not None else checkpoint_load(exp.prior_path)
    noise_cache = {} if noise_cache is None else noise_cache
    if prior.d != exp.d:
        raise ConfigError("prior.checkpoint", f"prior has dimension {prior.d}, data has {exp.d}")
    x = exp.truths[index]
    op = build_operator(exp, make_rng([exp.seed, index, 1]))
    nm = build_noise(exp, op.m, noise_cache)
    noise = nm.sample(make_rng([exp.seed, index, 2]))
    y = degrade.apply_forward(op, x) + noise
    common = {
        "experiment": exp.name,
        "instance": index,
        "truth_hash": array_hash(x),
        "noise_hash": array_hash(noise),
        "observation_hash": array_hash(y),
        "ood": exp.ood,
    }
    records = []
    if op.kind in ("identity", "scale"):
        naive = y / (op.c if op.kind == "scale" else 1.0)
        records.append({**common, "method": "observation", "psnr": psnr(x, naive), "config_hash": "",
                        "final_loss": None, "loss_trace": [], "reconstruction": [float(v) for v in naive],
                        "final_z": None})
    shape = (exp.height, exp.width) if exp.height * exp.width == exp.d else None
    for method in exp.methods:
        rep = solve(prior, nm, op, y, exp.solve_cfgs[method], truth=x, image_shape=shape)
        records.append({**common, **rep.to_record()})
    return records


_WORKER_STATE = {}


def _worker(exp: Experiment, index: int):
    key = exp.prior_path
    if _WORKER_STATE.get("key") != key:
        _WORKER_STATE.update(key=key, prior=checkpoint_load(exp.prior_path), noise={})
    return run_instance(exp, index, _WORKER_STATE["prior"], _WORKER_STATE["noise"])


def run_experiment(exp: Experiment, workers: int = 1) -> list:
    if workers <= 1:
        prior = checkpoint_load(exp.prior_path)
        cache = {}
        out = []
        for i in range(exp.instances):
            out.extend(run_instance(exp, i, prior, cache))
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        chunks = list(pool.map(_worker, [exp] * exp.instances, range(exp.instances)))
    return [rec for chunk in chunks for rec in chunk]


# reports ------------------------------------------------------------------------------

def dumps_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def write_records(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps_record(rec) + "\n")


def read_records(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def aggregate(records) -> list:
    """Rows of (axis_value, method, n, mean, std) in first-seen order; sums are exactly rounded."""
    groups = {}
    for rec in records:
        key = (rec.get("axis_value"), rec["method"])
        if rec.get("psnr") is not None:
            groups.setdefault(key, []).append(float(rec["psnr"]))
    rows = []
    for (axis_value, method), values in groups.items():
        n = len(values)
        mean = math.fsum(values) / n
        if n > 1 and math.isfinite(mean):
            std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1))
        else:
            std = 0.0
        rows.append({"axis_value": axis_value, "method": method, "n": n, "mean_psnr": mean, "std_psnr": std})
    return rows


def summary_csv(rows) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["axis_value", "method", "n", "mean_psnr", "std_psnr"])
    for r in rows:
        av = "" if r["axis_value"] is None else repr(r["axis_value"])
        writer.writerow([av, r["method"], r["n"], repr(r["mean_psnr"]), repr(r["std_psnr"])])
    return out.getvalue()


def write_report(out_dir, records, config_text: str, axis: str | None = None) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    write_records(os.path.join(out_dir, "records.jsonl"), records)
    with open(os.path.join(out_dir, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(config_text)
    return write_summary(out_dir, records, axis)


def write_summary(out_dir, records, axis=None) -> dict:
    rows = aggregate(records)
    with open(os.path.join(out_dir, "summary.csv"), "w", encoding="utf-8") as fh:
        fh.write(summary_csv(rows))
    report = {"axis": axis, "aggregates": rows,
              "ood": any(r.get("ood") for r in records),
              "instances": len({r["instance"] for r in records})}
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return report


def evaluate_dir(out_dir) -> dict:
    """Recompute aggregates from ``records.jsonl``; rewriting the same files is idempotent."""
    records = read_records(os.path.join(out_dir, "records.jsonl"))
    axis = None
    report_path = os.path.join(out_dir, "report.json")
    if os.path.exists(report_path):
        with open(report_path, encoding="utf-8") as fh:
            axis = json.load(fh).get("axis")
    return write_summary(out_dir, records, axis)


# sweeps ----------------------------------------------------------------------------------

def _apply_axis(cfg: Config, axis: str, value: float) -> Config:
    cfg = cfg.copy()
    if axis == "measurements":
        if int(value) != value or value < 1:
            raise ConfigError("sweep.values", f"measurement counts must be positive integers, got {value}")
        cfg.set("operator", "m", int(value))
    elif axis == "noise_scale":
        key = {"iso": "sigma", "flow": "scale"}.get(cfg.get("noise", "kind", ""), "amplitude")
        cfg.set("noise", key, value)
    elif axis == "beta":
        cfg.set("solve.map", "beta", value)
    elif axis == "gamma":
        cfg.set("solve.hand", "gamma", value)
    return cfg


def run_sweep(cfg: Config, axis: str, values, workers: int = 1) -> tuple[list, dict]:
    """Re-run the experiment per axis value with identical instance seeds (paired design)."""
    if axis not in SWEEP_AXES:
        raise ConfigError("sweep.axis", f"unknown axis {axis!r}; expected one of {SWEEP_AXES}")
    values = list(values)
    if not values:
        raise ConfigError("sweep.values", "empty value list")
    name = validate_experiment(cfg)
    if axis == "measurements" and cfg.get("operator", "kind", DEFAULT_OPERATOR.get(name)) not in ("linear", "sign"):
        raise ConfigError("sweep.axis", "measurement sweeps need a linear or sign operator")
    records = []
    for value in values:
        exp = resolve(_apply_axis(cfg, axis, value))
        for rec in run_experiment(exp, workers):
            rec["axis"] = axis
            rec["axis_value"] = value
            records.append(rec)
    curves = {}
    for row in aggregate(records):
        curves.setdefault(row["method"], []).append((row["axis_value"], row["mean_psnr"], row["std_psnr"]))
    return records, curves


# theorem -------------------------------------------------------------------------------

def run_theorem(cfg: Config) -> dict:
    kind = cfg.get("theorem", "prior", "quartic")
    dim = cfg.get("theorem", "dim", 4)
    try:
        prior = AnalyticPrior(kind, np.zeros(dim), tau=cfg.get("theorem", "tau", 1.0),
                              a=cfg.get("theorem", "a", 1.0), b=cfg.get("theorem", "b", 0.1))
        seed = cfg.get("theorem", "seed", cfg.get("experiment", "seed", 0))
        return verify_bound(prior, cfg.get("theorem", "trials", 10), make_rng(seed),
                            cfg.get("theorem", "sigmas", [0.3, 1.0, 3.0]),
                            cfg.get("theorem", "delta_scales", [0.1, 0.5, 1.0, 2.0]))
    except InvalidArgument as exc:
        raise ConfigError("theorem", str(exc)) from None


__all__ = [
    "Experiment", "resolve", "run_experiment", "run_sweep", "run_theorem", "write_report",
    "evaluate_dir", "aggregate", "read_records", "dumps_record", "IMAGE_KINDS",
]

"""Command-line experiment driver.

Subcommands: simulate-data, oracle, run, sweep, rates, variance-probe.
Configuration is one JSON file plus ``--set key=value`` overrides (dotted keys
reach into dict-valued fields, values are parsed as JSON when possible).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericalFailure, WeightCollapse
from .estimators import (
    RandomizationConfig,
    amlpf_allocation,
    amlpf_estimate,
    default_config,
    fit_slope,
    l_max_for,
    pf_level_estimate,
    unbiased_estimate,
    variance_probe,
)
from .filters import ResamplePolicy
from .models import Dataset, TestFunction, build_model, simulate_dataset
from .oracles import dataset_hash, gbm_filter_mean, reference_pf
from .streams import generator, seed_sequence

ALL_METHODS = ("pf", "amlpf", "ub-mlpf", "ub-amlpf")

# log10(cost) vs log10(MSE) slopes reported for the full-scale experiment
REFERENCE_RATES = {
    "gbm": {"ub-mlpf": -1.31, "ub-amlpf": -1.1, "amlpf": -1.03},
    "clark-cameron": {"ub-mlpf": -1.42, "ub-amlpf": -1.16, "amlpf": -1.09},
    "nlm": {"ub-mlpf": -1.44, "ub-amlpf": -1.18, "amlpf": -1.1},
}

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


@dataclass
class ExperimentConfig:
    model: str = "gbm"
    model_params: dict = field(default_factory=dict)
    dataset: str | None = None  # defaults to <out_dir>/dataset.csv
    n: int = 100
    data_level: int = 10
    data_seed: int = 0
    k: int | None = None  # defaults to the dataset length
    method: str = "ub-amlpf"
    methods: list = field(default_factory=lambda: ["ub-mlpf", "ub-amlpf", "amlpf"])
    epsilon: float = 0.1
    epsilons: list = field(default_factory=lambda: [0.2, 0.1, 0.05, 0.025])
    reps: int = 100
    phi: str = "x1"
    resample: str = "adaptive"
    threshold: float = 0.5
    # randomization / allocation constants
    base_level: int = 0
    c_n: float = 1.0
    c_m: float = 1.0
    n0_cap: int = 256
    c_amlpf: float = 1.0
    c_pf: float = 1.0
    randomization: dict = field(default_factory=dict)  # overrides of RandomizationConfig fields for `run`
    # ground truth for models without an exact filter
    oracle_level: int = 9
    oracle_n: int = 100_000
    oracle_reps: int = 20
    # variance probe grid
    probe_levels: list = field(default_factory=lambda: [3, 4, 5, 6, 7])
    probe_ps: list = field(default_factory=lambda: [0, 1])
    probe_reps: int = 200
    probe_n0: int = 2000
    probe_antithetic: bool = True
    seed: int = 0
    out_dir: str = "out"
    parallel_width: int = 1
    literal_h: bool = False
    svg: bool = False

    def validate(self):
        if self.method not in ALL_METHODS:
            raise ConfigError(f"method must be one of {ALL_METHODS}, got {self.method!r}")
        bad = [m for m in self.methods if m not in ALL_METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}")
        eps = list(self.epsilons)
        if not eps or any(not 0 < e < 1 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError(f"epsilons must be a strictly decreasing grid in (0, 1), got {eps}")
        if not 0 < self.epsilon < 1:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.reps < 2:
            raise ConfigError("reps must be >= 2")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.data_level < 6:
            raise ConfigError("data_level must be >= 6")
        if self.parallel_width < 1:
            raise ConfigError("parallel_width must be >= 1")
        try:
            ResamplePolicy(self.resample, self.threshold)
            TestFunction.parse(self.phi)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        unknown = set(self.randomization) - {f.name for f in dataclasses.fields(RandomizationConfig)}
        if unknown:
            raise ConfigError(f"unknown randomization keys {sorted(unknown)}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        """Hash of everything that affects results (not parallel_width, out_dir or svg)."""
        d = self.to_dict()
        for key in ("parallel_width", "out_dir", "svg", "dataset"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    @property
    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else self.out / "dataset.csv"

    @property
    def policy(self) -> ResamplePolicy:
        return ResamplePolicy(self.resample, self.threshold)

    @property
    def test_function(self) -> TestFunction:
        return TestFunction.parse(self.phi)

    def build_model(self):
        try:
            return build_model(self.model, **self.model_params)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad model specification: {exc}") from exc


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, sets) -> dict:
    raw = json.loads(json.dumps(raw))
    for item in sets or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into non-dict key {p!r}")
        node[parts[-1]] = _parse_value(value)
    return raw


def load_config(path=None, sets=None, **extra) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    raw.update({k: v for k, v in extra.items() if v is not None})
    raw = apply_overrides(raw, sets)
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    try:
        cfg = ExperimentConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


# ---------------------------------------------------------------- file helpers


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _append_rows(path: Path, header, rows):
    """Append rows by rewriting the file atomically (readers never see half a row)."""
    old = []
    if path.exists():
        with open(path, newline="") as fh:
            old = list(csv.reader(fh))[1:]
    _atomic_write(path, _csv_text(header, old + [list(r) for r in rows]))


def _write_json(path: Path, obj):
    _atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(x) -> str:
    return repr(float(x))


RECORD_HEADER = ["i", "l", "p", "xi", "cost", "seed_tag", "config_hash"]
SWEEP_HEADER = ["method", "epsilon", "mse", "cost", "walltime", "reps", "config_hash"]
SWEEP_RECORD_HEADER = ["method", "epsilon", "rep"] + RECORD_HEADER


def _record_row(r, h):
    return [r.i, r.l, r.p, _fmt(r.xi), r.cost, r.seed_tag, h]


# ---------------------------------------------------------------- data and oracle


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    path = cfg.dataset_path
    if not path.exists():
        raise ConfigError(f"dataset {path} not found; run `simulate-data` first")
    return Dataset.from_csv(path)


def cmd_simulate_data(cfg: ExperimentConfig) -> Path:
    model = cfg.build_model()
    data = simulate_dataset(model, cfg.n, cfg.data_level, rng=generator(cfg.data_seed, 0))
    data.metadata["seed"] = cfg.data_seed
    return data.to_csv(_ensure_parent(cfg.dataset_path))


def _ensure_parent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _time_index(cfg, data) -> int:
    k = data.n if cfg.k is None else cfg.k
    if not 1 <= k <= data.n:
        raise ConfigError(f"k={k} outside 1..{data.n}")
    return k


def _oracle_path(cfg, data, k) -> Path:
    key = f"{cfg.model}-{dataset_hash(data)}-k{k}-{cfg.test_function.tag}-L{cfg.oracle_level}-N{cfg.oracle_n}-R{cfg.oracle_reps}"
    return cfg.out / "oracle" / f"{key}.json"


def cmd_oracle(cfg: ExperimentConfig) -> dict:
    """Ground truth: exact filter for GBM with phi = x, else a cached high-resolution PF."""
    model = cfg.build_model()
    data = load_dataset(cfg)
    k = _time_index(cfg, data)
    phi = cfg.test_function
    path = _oracle_path(cfg, data, k)
    if cfg.model == "gbm" and phi.kind in ("coord", "mean"):
        out = {"truth": gbm_filter_mean(model, data, k), "stderr": 0.0, "kind": "exact"}
    elif phi.kind == "const":
        out = {"truth": phi.value, "stderr": 0.0, "kind": "exact"}
    else:
        ref = reference_pf(model, data, k, cfg.oracle_level, cfg.oracle_n, cfg.oracle_reps, cfg.seed, phi,
                           cache_dir=cfg.out / "oracle", policy=cfg.policy)
        out = {"truth": ref.mean, "stderr": ref.stderr, "kind": "reference-pf"}
    out.update(k=k, phi=phi.tag, model=model.spec())
    _write_json(path, out)
    return out


def load_oracle(cfg, data, k) -> float:
    phi = cfg.test_function
    if cfg.model == "gbm" and phi.kind in ("coord", "mean"):
        return gbm_filter_mean(cfg.build_model(), data, k)
    if phi.kind == "const":
        return phi.value
    path = _oracle_path(cfg, data, k)
    if not path.exists():
        raise ConfigError(f"no ground truth cached at {path}; run the `oracle` command first")
    return json.loads(path.read_text())["truth"]


# ---------------------------------------------------------------- estimates


def _ub_config(cfg, eps, method, seed) -> RandomizationConfig:
    rc = default_config(eps, method, cfg.base_level, cfg.c_n, cfg.c_m, cfg.n0_cap, seed)
    if cfg.randomization:
        rc = dataclasses.replace(rc, **cfg.randomization)
    return rc


def _sub_seed(root, *path) -> int:
    return int(seed_sequence(root, *path).generate_state(1, dtype=np.uint64)[0] >> 1)


def estimate_once(cfg, model, data, k, method, eps, rep_path):
    """One estimate of the chosen method; returns ``(estimate, cost, records)``."""
    phi = cfg.test_function
    if method in ("ub-amlpf", "ub-mlpf"):
        rc = _ub_config(cfg, eps, method, _sub_seed(cfg.seed, *rep_path))
        res = unbiased_estimate(rc, model, data, k, phi, cfg.parallel_width, cfg.policy, cfg.literal_h)
        return res.estimate, res.total_cost, res
    rng = generator(cfg.seed, *rep_path)
    level = max(cfg.base_level, l_max_for(eps))
    if method == "pf":
        n = max(2, math.ceil(cfg.c_pf / eps**2))
        est, cost = pf_level_estimate(model, data, k, level, n, phi, rng, cfg.policy, cfg.literal_h)
        return est, cost, None
    alloc = amlpf_allocation(eps, level, cfg.base_level, cfg.c_amlpf)
    est, cost = amlpf_estimate(model, data, k, level, alloc, phi, rng, cfg.base_level, True, cfg.policy, cfg.literal_h)
    return est, cost, None


def cmd_run(cfg: ExperimentConfig) -> dict:
    model = cfg.build_model()
    data = load_dataset(cfg)
    k = _time_index(cfg, data)
    t0 = time.perf_counter()
    method_idx = ALL_METHODS.index(cfg.method)
    est, cost, res = estimate_once(cfg, model, data, k, cfg.method, cfg.epsilon, (method_idx, 0, 0))
    summary = {
        "method": cfg.method,
        "estimate": est,
        "total_cost": int(cost),
        "wall_time": time.perf_counter() - t0,
        "k": k,
        "config_hash": cfg.hash,
        "config": cfg.to_dict(),
    }
    if res is not None:
        summary["stderr"] = res.stderr
        summary["replicates"] = len(res.records)
        summary["randomization"] = res.config.to_dict()
        rows = [_record_row(r, cfg.hash) for r in res.records]
        _atomic_write(cfg.out / "records.csv", _csv_text(RECORD_HEADER, rows))
    _write_json(cfg.out / "summary.json", summary)
    return summary


def _done_rows(path: Path, h: str):
    if not path.exists():
        return set()
    with open(path, newline="") as fh:
        return {(r["method"], float(r["epsilon"])) for r in csv.DictReader(fh) if r["config_hash"] == h}


def cmd_sweep(cfg: ExperimentConfig) -> list:
    """MSE and mean cost per (method, epsilon); finished rows are skipped on rerun."""
    model = cfg.build_model()
    data = load_dataset(cfg)
    k = _time_index(cfg, data)
    truth = load_oracle(cfg, data, k)
    sweep_path = cfg.out / "sweep.csv"
    rec_path = cfg.out / "records.csv"
    _write_json(cfg.out / "sweep.json", {"config_hash": cfg.hash, "config": cfg.to_dict(), "truth": truth, "k": k})
    done = _done_rows(sweep_path, cfg.hash)
    rows = []
    for method in cfg.methods:
        mi = ALL_METHODS.index(method)
        for ei, eps in enumerate(cfg.epsilons):
            if (method, float(eps)) in done:
                continue
            sq, costs, walls, recs = [], [], [], []
            for r in range(cfg.reps):
                t0 = time.perf_counter()
                est, cost, res = estimate_once(cfg, model, data, k, method, eps, (mi, ei, r))
                walls.append(time.perf_counter() - t0)
                sq.append((est - truth) ** 2)
                costs.append(cost)
                if res is not None:
                    recs += [[method, _fmt(eps), r] + _record_row(x, cfg.hash) for x in res.records]
            row = [method, _fmt(eps), _fmt(np.mean(sq)), _fmt(np.mean(costs)), _fmt(np.mean(walls)), cfg.reps, cfg.hash]
            if recs:
                _append_rows(rec_path, SWEEP_RECORD_HEADER, recs)
            _append_rows(sweep_path, SWEEP_HEADER, [row])
            rows.append(row)
    return rows


# ---------------------------------------------------------------- rates


def rates_from_rows(rows, model=None) -> dict:
    hashes = {r["config_hash"] for r in rows if r.get("config_hash")}
    if len(hashes) > 1:
        raise ConfigError(f"sweep mixes config hashes {sorted(hashes)}")
    by_method = {}
    for r in rows:
        try:
            pt = (float(r["mse"]), float(r["cost"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed sweep row {r}: {exc}") from exc
        by_method.setdefault(r["method"], []).append(pt)
    out = {}
    for method, pts in by_method.items():
        if len(pts) < 3:
            raise ConfigError(f"method {method} has {len(pts)} sweep points; need >= 3")
        mse, cost = np.array(pts).T
        if np.any(mse <= 0) or np.any(cost <= 0):
            raise ConfigError(f"method {method}: MSE and cost must be positive for a log-log fit")
        if np.ptp(np.log10(mse)) == 0 or np.ptp(np.log10(cost)) == 0:
            raise ConfigError(f"method {method}: constant column, slope undefined")
        slope, se = fit_slope(np.log10(mse), np.log10(cost))
        out[method] = {"slope": slope, "stderr": se, "points": len(pts)}
        ref = REFERENCE_RATES.get(model or "", {}).get(method)
        if ref is not None:
            out[method]["reference"] = ref
    return out


def cmd_rates(sweep_csv, model=None, svg=None) -> dict:
    path = Path(sweep_csv)
    if not path.exists():
        raise ConfigError(f"sweep file {path} not found")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if model is None:
        meta = path.with_name("sweep.json")
        if meta.exists():
            model = json.loads(meta.read_text())["config"]["model"]
    res = rates_from_rows(rows, model)
    _write_json(path.with_name("rates.json"), {"model": model, "rates": res})
    if svg:
        write_svg(rows, path.with_name("rates.svg"))
    return res


def write_svg(rows, path, width=480, height=360):
    """Bare log10-log10 scatter of cost against MSE, one colour per method."""
    colours = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a"]
    pts = [(r["method"], math.log10(float(r["mse"])), math.log10(float(r["cost"]))) for r in rows]
    xs = [p[1] for p in pts]
    ys = [p[2] for p in pts]
    x0, x1 = min(xs), max(xs) or 1
    y0, y1 = min(ys), max(ys) or 1
    pad = 40

    def sx(x):
        return pad + (x - x0) / ((x1 - x0) or 1) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / ((y1 - y0) or 1) * (height - 2 * pad)

    methods = sorted({p[0] for p in pts})
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    parts.append(f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle">log10 MSE</text>')
    parts.append(f'<text x="12" y="{height / 2}" transform="rotate(-90 12 {height / 2})" text-anchor="middle">log10 cost</text>')
    for j, m in enumerate(methods):
        c = colours[j % len(colours)]
        parts.append(f'<text x="{pad + 5}" y="{16 + 14 * j}" fill="{c}">{m}</text>')
        for name, x, y in pts:
            if name == m:
                parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{c}"/>')
    parts.append("</svg>")
    _atomic_write(Path(path), "\n".join(parts) + "\n")


# ---------------------------------------------------------------- variance probe


def cmd_variance_probe(cfg: ExperimentConfig) -> dict:
    model = cfg.build_model()
    data = load_dataset(cfg)
    k = _time_index(cfg, data)
    phi = cfg.test_function
    probes = []
    for l in cfg.probe_levels:
        for p in cfg.probe_ps:
            probes.append(variance_probe(model, data, k, l, p, phi, cfg.probe_reps, cfg.probe_antithetic, cfg.probe_n0,
                                         cfg.seed, None, cfg.base_level, cfg.policy, cfg.literal_h))
    header = ["l", "p", "n_p", "second_moment", "stderr", "reps", "config_hash"]
    rows = [[pr.l, pr.p, pr.n_p, _fmt(pr.second_moment), _fmt(pr.stderr), pr.reps, cfg.hash] for pr in probes]
    _atomic_write(cfg.out / "probe.csv", _csv_text(header, rows))
    fits = {"level_slope": {}, "np_slope": {}}
    for p in cfg.probe_ps:
        sel = [pr for pr in probes if pr.p == p]
        if len(sel) >= 2 and all(pr.second_moment > 0 for pr in sel):
            s, se = fit_slope([pr.l for pr in sel], [math.log2(pr.second_moment) for pr in sel])
            fits["level_slope"][str(p)] = {"slope": s, "stderr": se}
    for l in cfg.probe_levels:
        sel = [pr for pr in probes if pr.l == l]
        if len(sel) >= 2 and all(pr.second_moment > 0 for pr in sel):
            s, se = fit_slope([math.log2(pr.n_p) for pr in sel], [math.log2(pr.second_moment) for pr in sel])
            fits["np_slope"][str(l)] = {"slope": s, "stderr": se}
    _write_json(cfg.out / "probe.json", {"config_hash": cfg.hash, "fits": fits})
    return fits


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ubfilter", description="Unbiased multilevel particle filtering experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("simulate-data", "oracle", "run", "sweep", "variance-probe"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry")
        sp.add_argument("--out", help="output directory (same as --set out_dir=...)")
        sp.add_argument("--parallel-width", type=int, help="worker processes for replicates")
    sp = sub.add_parser("rates")
    sp.add_argument("sweep_csv")
    sp.add_argument("--model", choices=sorted(REFERENCE_RATES), help="model whose reference rates to report")
    sp.add_argument("--svg", action="store_true", help="also write a log-log scatter as rates.svg")
    return ap


COMMANDS = {
    "simulate-data": cmd_simulate_data,
    "oracle": cmd_oracle,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "variance-probe": cmd_variance_probe,
}


def _report(result):
    if isinstance(result, Path):
        print(result)
    elif isinstance(result, dict):
        print(json.dumps({k: v for k, v in result.items() if k != "config"}, indent=2, sort_keys=True, default=str))
    elif isinstance(result, list):
        for row in result:
            print(",".join(str(x) for x in row))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "rates":
            res = cmd_rates(args.sweep_csv, args.model, args.svg)
            for method, r in res.items():
                ref = r.get("reference")
                ref_txt = f"  reference {ref:+.2f}" if ref is not None else ""
                print(f"{method:10s} slope {r['slope']:+.3f} +/- {r['stderr']:.3f}{ref_txt}")
            return EXIT_OK
        cfg = load_config(args.config, args.set, out_dir=args.out, parallel_width=args.parallel_width)
        _report(COMMANDS[args.command](cfg))
        return EXIT_OK
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, WeightCollapse) as exc:
        info = {"error": type(exc).__name__, "message": str(exc)}
        for key in ("time", "ensemble", "step", "level", "group", "replicate"):
            if getattr(exc, key, None) is not None:
                info[key] = getattr(exc, key)
        print(json.dumps(info, default=str), file=sys.stderr)
        return EXIT_NUMERICAL

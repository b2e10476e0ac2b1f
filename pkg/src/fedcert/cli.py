"""Experiment runner.

Four subcommands drive the whole pipeline from one JSON config:

  simulate     write a client world (manifest + per-client CSVs)
  certify      answer loss queries and write certificates + curve CSVs,
               plus the empirical target curves the plots need
  verify       Monte-Carlo coverage and tightness checks
  emit-plots   join certificates with target curves into tidy CSVs

Every run is a pure function of (config, seed): JSON keys are sorted, CSV
floats use repr-exact formatting, and nothing records timestamps, so reruns
are byte-identical.

Exit codes: 0 success, 1 usage or config error, 2 verification or dominance
failure, 3 query-budget exhaustion.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .fdiv import fdiv_cdf_bound, fdiv_mean_bound
from .losses import Hypothesis, LossFn, ZERO_ONE, LOSS_KINDS
from .metasim import (
    MetaConfig,
    export_world,
    generate_dataset,
    load_world,
    sample_clients,
    shift_meta_fdiv,
    shift_meta_wass,
    tilt_for_divergence,
)
from .nonrobust import cdf_bound, mean_bound
from .oracle import (
    adversarial_directions,
    coverage_experiment,
    sample_true_risks,
    tightness_probe,
)
from .query import BudgetExceededError, Client, TransportCost, HALF_SQ, PLAIN_L2
from .wass import DEFAULT_GRID_SIZE, DEFAULT_LEVEL_TOL, wass_mean_bound

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VERIFY = 2
EXIT_BUDGET = 3

_BOUND_KINDS = ("mean", "cdf", "fdiv-mean", "fdiv-cdf", "wass-mean")
_CURVE_KINDS = ("cdf", "fdiv-cdf")

PLOTS_HEADER = ["lambda", "empirical", "bound", "kind"]


class ConfigError(Exception):
    pass


_LAMBDA_GRID_SCHEMA = {
    "oneOf": [
        {"type": "array", "items": {"type": "number"}, "minItems": 1},
        {
            "type": "object",
            "required": ["start", "stop", "num"],
            "properties": {
                "start": {"type": "number"},
                "stop": {"type": "number"},
                "num": {"type": "integer", "minimum": 2},
            },
            "additionalProperties": False,
        },
    ]
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["world", "model", "data", "certificates"],
    "properties": {
        "world": {
            "type": "object",
            "required": ["dim", "n_classes"],
            "properties": {
                "dim": {"type": "integer", "minimum": 1},
                "n_classes": {"type": "integer", "minimum": 2},
                "shift_mode": {"enum": ["none", "feature", "label", "both"]},
                "cov_scale": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "model": {
            "type": "object",
            "oneOf": [
                {"required": ["kind", "weights"]},
                {"required": ["from_world"]},
            ],
        },
        "data": {
            "type": "object",
            "required": ["K", "n_k"],
            "properties": {
                "K": {"type": "integer", "minimum": 1},
                "n_k": {"type": "integer", "minimum": 1},
                "max_queries": {"type": "integer", "minimum": 1},
                "world_dir": {"type": "string"},
            },
            "additionalProperties": False,
        },
        "query": {
            "type": "object",
            "properties": {
                "loss": {"enum": list(LOSS_KINDS)},
                "cost": {"enum": [HALF_SQ, PLAIN_L2]},
                "grid": {"type": "array", "items": {"type": "number"}},
            },
            "additionalProperties": False,
        },
        "certificates": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["kind", "delta"],
                "properties": {
                    "kind": {"enum": list(_BOUND_KINDS)},
                    "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    "epsilon": {"type": "number", "minimum": 0},
                    "f_name": {"enum": ["kl", "chi-square"]},
                    "lambda_grid": _LAMBDA_GRID_SCHEMA,
                    "gap_constant": {"type": "number", "minimum": 0},
                    "level_tol": {"type": "number", "exclusiveMinimum": 0},
                    "grid_size": {"type": "integer", "minimum": 2},
                    "target_clients": {"type": "integer", "minimum": 1},
                },
                "additionalProperties": False,
            },
        },
        "verify": {
            "type": "object",
            "properties": {
                "trials": {"type": "integer", "minimum": 1},
                "target_clients": {"type": "integer", "minimum": 1},
                "kinds": {"type": "array", "minItems": 1},
                "tightness": {
                    "type": "object",
                    "required": ["bound_kind", "K_schedule", "n_schedule"],
                    "properties": {
                        "bound_kind": {"enum": ["mean", "fdiv-mean"]},
                        "K_schedule": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                        "n_schedule": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                        "trials": {"type": "integer", "minimum": 1},
                        "delta": {"type": "number"},
                        "epsilon": {"type": "number"},
                        "f_name": {"enum": ["kl", "chi-square"]},
                    },
                },
            },
        },
    },
}


def _fmt(x) -> str:
    return format(float(x), ".17g")


def load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config error at {exc.json_path}: {exc.message}") from exc
    return cfg


def config_digest(cfg: dict) -> str:
    return hashlib.sha1(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def _world_from_config(cfg: dict, seed: int | None) -> MetaConfig:
    wd = dict(cfg["world"])
    if seed is not None:
        wd["seed"] = int(seed)
    try:
        return MetaConfig.from_json_dict(wd)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"world config rejected: {exc}") from exc


def _model_from_config(cfg: dict, world: MetaConfig) -> Hypothesis:
    md = cfg["model"]
    if "from_world" in md:
        opts = md["from_world"] or {}
        if world.n_classes != 2:
            raise ConfigError("from_world models need a binary world")
        if world.archetypes is not None:
            w = np.asarray(world.archetype_weights, dtype=float)
            means = np.stack([a.class_means for a in world.archetypes])
            m = np.einsum("m,mcd->cd", w, means)
        else:
            m = world.class_means
        scale = float(opts.get("scale", 1.0))
        wvec = scale * (m[1] - m[0])
        if not np.any(wvec):
            raise ConfigError("from_world model is degenerate: equal class means")
        bias = -float(wvec @ (m[0] + m[1])) / 2.0
        return Hypothesis(kind="logistic", weights=wvec, bias=bias, name="world-lda")
    try:
        return Hypothesis.from_json_dict(md)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"model config rejected: {exc}") from exc


def _lambda_grid(req: dict) -> np.ndarray:
    spec = req.get("lambda_grid", {"start": 0.0, "stop": 1.0, "num": 50})
    if isinstance(spec, dict):
        return np.linspace(spec["start"], spec["stop"], spec["num"])
    return np.asarray(spec, dtype=float)


def _build_clients(cfg: dict, world: MetaConfig):
    data = cfg["data"]
    query_cfg = cfg.get("query", {})
    loss_fn = LossFn(query_cfg.get("loss", ZERO_ONE))
    cost = TransportCost(query_cfg.get("cost", HALF_SQ))
    grid = np.asarray(query_cfg["grid"], dtype=float) if "grid" in query_cfg else None
    if "world_dir" in data:
        loaded_cfg, _, datasets = load_world(data["world_dir"])
        if loaded_cfg.digest() != world.digest():
            raise ConfigError("world_dir manifest does not match the config world")
    else:
        specs = sample_clients(world, data["K"])
        datasets = [generate_dataset(s, data["n_k"], world) for s in specs]
    clients = [
        Client(ds.client_id, ds, loss_fn,
               cost=cost, max_queries=data.get("max_queries"), grid=grid)
        for ds in datasets
    ]
    return clients, loss_fn


def _target_world(world: MetaConfig, req: dict, h: Hypothesis) -> MetaConfig:
    """The shifted meta-distribution a certificate of this kind declares."""
    kind = req["kind"]
    eps = float(req.get("epsilon", 0.0))
    if kind in ("mean", "cdf") or eps == 0.0:
        return world
    if kind in ("fdiv-mean", "fdiv-cdf"):
        tilt = tilt_for_divergence(world, req["f_name"], eps)
        return shift_meta_fdiv(world, tilt)[0]
    shifted, _ = shift_meta_wass(world, eps, adversarial_directions(world, h))
    return shifted


def _require(req: dict, key: str):
    if key not in req:
        raise ConfigError(f"certificate request of kind {req['kind']!r} needs {key!r}")
    return req[key]


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    world = _world_from_config(cfg, args.seed)
    out = Path(args.out)
    specs = sample_clients(world, cfg["data"]["K"])
    datasets = [generate_dataset(s, cfg["data"]["n_k"], world) for s in specs]
    manifest = export_world(out / "world", world, specs, datasets)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_certify(args) -> int:
    cfg = load_config(args.config)
    world = _world_from_config(cfg, args.seed)
    h = _model_from_config(cfg, world)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clients, loss_fn = _build_clients(cfg, world)
    if loss_fn.kind != ZERO_ONE:
        # target curves use exact risks, which exist for the zero-one loss
        raise ConfigError("certify pipelines are wired for the zero-one loss")

    qv = np.array([c.query(h, 0.0).value for c in clients])
    ns = np.array([c.n_samples for c in clients])

    entries = []
    for i, req in enumerate(cfg["certificates"]):
        kind = req["kind"]
        delta = float(req["delta"])
        stem = f"{i:02d}_{kind}"
        files = {"certificate": f"{stem}.json"}

        if kind == "mean":
            result = mean_bound(qv, ns, delta)
        elif kind == "fdiv-mean":
            result = fdiv_mean_bound(qv, ns, delta, float(_require(req, "epsilon")),
                                     _require(req, "f_name"))
        elif kind == "wass-mean":
            result = wass_mean_bound(
                clients, h, float(_require(req, "epsilon")), delta,
                level_tol=float(req.get("level_tol", DEFAULT_LEVEL_TOL)),
                grid_size=int(req.get("grid_size", DEFAULT_GRID_SIZE)),
            )
        elif kind == "cdf":
            result = cdf_bound(qv, ns, delta, _lambda_grid(req))
        else:
            result = fdiv_cdf_bound(
                qv, ns, delta, float(_require(req, "epsilon")),
                _require(req, "f_name"), _lambda_grid(req),
                gap_constant=float(req.get("gap_constant", 1.0)),
            )

        if kind in _CURVE_KINDS:
            result.write_json(out / f"{stem}.json")
            result.write_csv(out / f"{stem}.csv")
            files["curve"] = f"{stem}.csv"
        else:
            result.write_json(out / f"{stem}.json")

        # empirical target curve: exact risks of fresh clients drawn from the
        # world this certificate declares (shifted when epsilon > 0)
        target = _target_world(world, req, h)
        rng = np.random.Generator(np.random.Philox(
            np.random.SeedSequence([world.seed, 777, i])))
        risks = sample_true_risks(target, int(req.get("target_clients", 2000)), h, rng)
        tpath = out / f"{stem}_target.csv"
        with open(tpath, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["lambda", "empirical"])
            if kind in _CURVE_KINDS:
                for lam in _lambda_grid(req):
                    wr.writerow([_fmt(lam), _fmt(np.mean(risks >= lam))])
            else:
                wr.writerow(["", _fmt(np.mean(risks))])
        files["target"] = f"{stem}_target.csv"
        entries.append({"kind": kind, "files": files})

    summary = {
        "config_digest": config_digest(cfg),
        "world_digest": world.digest(),
        "seed": world.seed,
        "requests": entries,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"wrote {len(entries)} certificates to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    if "verify" not in cfg:
        raise ConfigError("config has no 'verify' section")
    world = _world_from_config(cfg, args.seed)
    h = _model_from_config(cfg, world)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vc = cfg["verify"]
    trials = int(args.trials if args.trials is not None else vc.get("trials", 50))

    all_passed = True
    for i, entry in enumerate(vc.get("kinds", [])):
        kind = entry["kind"]
        bound_kind = "cdf-curve" if kind == "cdf" else kind
        params = {
            "h": h,
            "K": cfg["data"]["K"],
            "n_k": cfg["data"]["n_k"],
            "delta": entry.get("delta", 0.1),
            "epsilon": entry.get("epsilon", 0.0),
            "target_clients": vc.get("target_clients", 2000),
        }
        if "f_name" in entry:
            params["f_name"] = entry["f_name"]
        if "lambda_grid" in entry:
            params["lambda_grid"] = _lambda_grid(entry)
        report = coverage_experiment(world, bound_kind, params, trials,
                                     seed=world.seed, jobs=args.jobs)
        report.write_json(out / f"coverage_{i:02d}_{kind}.json")
        status = "ok" if report.passed else "FAIL"
        print(f"coverage {kind}: rate={report.violation_rate:.4f} "
              f"threshold={report.threshold:.4f} [{status}]")
        all_passed = all_passed and report.passed

    if "tightness" in vc:
        tc = vc["tightness"]
        rows = tightness_probe(
            world, tc["bound_kind"], tc["K_schedule"], tc["n_schedule"],
            int(tc.get("trials", 20)), world.seed,
            {
                "h": h,
                "delta": tc.get("delta", 0.1),
                "epsilon": tc.get("epsilon", 0.0),
                **({"f_name": tc["f_name"]} if "f_name" in tc else {}),
            },
        )
        keys = list(rows[0].keys())
        with open(out / "tightness.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(keys)
            for row in rows:
                wr.writerow([row["K"], row["n_k"]] + [_fmt(row[k]) for k in keys[2:]])
        gaps = [r["median_gap"] for r in rows]
        print("tightness gaps: " + ", ".join(f"{g:.4f}" for g in gaps))

    return EXIT_OK if all_passed else EXIT_VERIFY


def cmd_emit_plots(args) -> int:
    out = Path(args.out)
    summary_path = out / "summary.json"
    if not summary_path.exists():
        raise ConfigError(f"missing inputs: {summary_path}")
    with open(summary_path) as fh:
        summary = json.load(fh)

    missing = []
    for entry in summary["requests"]:
        for rel in entry["files"].values():
            if not (out / rel).exists():
                missing.append(str(out / rel))
    if missing:
        raise ConfigError("missing inputs: " + ", ".join(missing))

    rows = []
    violations = []
    for entry in summary["requests"]:
        kind = entry["kind"]
        files = entry["files"]
        with open(out / files["target"]) as fh:
            target = list(csv.DictReader(fh))
        if kind in _CURVE_KINDS:
            with open(out / files["curve"]) as fh:
                curve = list(csv.DictReader(fh))
            lams = np.array([float(r["lambda"]) for r in curve])
            vals = np.array([float(r["bound"]) for r in curve])
            for r in target:
                lam = float(r["lambda"])
                emp = float(r["empirical"])
                # survival bounds are right-continuous steps on the curve grid
                idx = np.searchsorted(lams, lam + 1e-12) - 1
                bound = float(vals[idx]) if idx >= 0 else 1.0
                rows.append([r["lambda"], r["empirical"], _fmt(bound), kind])
                if emp > bound + 1e-9:
                    violations.append((kind, lam, emp, bound))
        else:
            with open(out / files["certificate"]) as fh:
                cert = json.load(fh)
            bound = float(cert["value"])
            emp = float(target[0]["empirical"])
            rows.append(["", target[0]["empirical"], _fmt(bound), kind])
            if emp > bound + 1e-9:
                violations.append((kind, None, emp, bound))

    with open(out / "plots.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(PLOTS_HEADER)
        wr.writerows(rows)
    print(f"wrote {out / 'plots.csv'} ({len(rows)} rows)")

    if violations:
        for kind, lam, emp, bound in violations:
            where = f" at lambda={lam}" if lam is not None else ""
            print(f"dominance violated for {kind}{where}: "
                  f"empirical {emp:.6f} > bound {bound:.6f}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fedcert",
        description="certified loss bounds for shifted federated client populations",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, needs_config in (
        ("simulate", cmd_simulate, True),
        ("certify", cmd_certify, True),
        ("verify", cmd_verify, True),
        ("emit-plots", cmd_emit_plots, False),
    ):
        sp = sub.add_parser(name)
        if needs_config:
            sp.add_argument("--config", required=True, help="experiment config JSON")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the world seed")
        sp.add_argument("--trials", type=int, default=None, help="override trial count")
        sp.add_argument("--jobs", type=int, default=1, help="parallel trials")
        sp.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetExceededError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())

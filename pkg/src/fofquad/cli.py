"""Command-line entry point.

Usage::

    fofquad fit      --config fit.json      --out results/
    fofquad select   --config select.json   --out results/
    fofquad predict  --config predict.json  --out results/
    fofquad simulate --config sim.json      --out results/ --seed 1 --threads 4
    fofquad smooth   --config smooth.json   --out results/

Exit codes: 0 success, 2 input error, 3 numerical failure.  On failure an
``error.json`` document is written to the output directory and to stderr.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .basis import BasisSystem, difference_penalty, gram_matrix
from .design import QuadraticModelSpec, build_covariates, build_penalty, eval_surfaces
from .errors import ConfigError, FofquadError, InputError
from .estimator import FittedModel, RegressionData, fit, predict
from .io import read_long_csv, write_rows
from .selection import CRITERIA, evaluate, select
from .serialize import config_hash, dumps
from .simulate import ALL_ESTIMATORS, SimConfig, run_study, write_tables
from .smoothing import smooth_dataset

logger = logging.getLogger("fofquad")

PACKAGE_DATA = Path(__file__).parent / "data"

_COMMON = {"predictor", "response", "predictor_basis", "response_basis", "order", "penalty_order",
           "roughness", "months_to_unit", "noise", "max_outer", "tol", "domain", "response_domain",
           "surface_points", "seed"}
SCHEMAS = {
    "fit": _COMMON | {"lam"},
    "select": _COMMON | {"lam_grid", "M_y_grid", "criterion", "q_form"},
    "predict": {"model", "predictor", "times", "n_times", "months_to_unit", "roughness", "seed"},
    "simulate": {"n", "nu3", "nu1", "nu2", "n_t", "M_x", "M_y", "M_x_est", "M_y_est", "replications",
                 "predictor_noise", "toeplitz_rho", "wishart_df", "lam_grid", "estimators",
                 "max_outer", "tol", "seed"},
    "smooth": {"input", "basis", "roughness", "penalty_order", "months_to_unit", "domain", "seed"},
}
DEFAULTS = {
    "predictor_basis": {"kind": "gaussian_rbf", "M": 7},
    "response_basis": {"kind": "bspline", "M": 6, "degree_or_width": 3},
    "order": 2,
    "penalty_order": 2,
    "roughness": None,
    "months_to_unit": False,
    "noise": "variance",
    "max_outer": 200,
    "tol": 1e-6,
    "lam": 0.0,
    "surface_points": 25,
    "criterion": "GIC",
    "q_form": "subject",
}


class NumericalFailure(FofquadError):
    kind = "numerical_failure"


# --- config ---------------------------------------------------------------------


def load_config(path, command):
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - SCHEMAS[command]
    if unknown:
        raise ConfigError(f"unknown config keys for {command!r}: {sorted(unknown)}")
    cfg["_base"] = str(path.parent.resolve())
    return cfg


def _get(cfg, key):
    return cfg.get(key, DEFAULTS.get(key))


def resolve_path(cfg, value):
    """Paths are relative to the config file; ``package:NAME`` points at bundled data."""
    if value is None:
        raise ConfigError("missing required path")
    if str(value).startswith("package:"):
        return PACKAGE_DATA / str(value)[len("package:"):]
    p = Path(value)
    return p if p.is_absolute() else Path(cfg["_base"]) / p


def _basis_from(cfg, key, domain):
    conf = dict(_get(cfg, key))
    conf.setdefault("domain", list(domain))
    try:
        return BasisSystem.from_dict(conf)
    except (KeyError, ValueError) as exc:
        if isinstance(exc, FofquadError):
            raise
        raise ConfigError(f"{key}: {exc}") from None


def _metadata(cfg, command, seed=None):
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return {"tool": "fofquad", "version": __version__, "command": command,
            "config_hash": config_hash(clean), "seed": seed}


def _header(meta):
    return [f"{k}: {v}" for k, v in meta.items()]


# --- shared pipeline ------------------------------------------------------------


def _load_pair(cfg):
    months = _get(cfg, "months_to_unit")
    xd = read_long_csv(resolve_path(cfg, cfg.get("predictor")), "predictor",
                       cfg.get("domain"), months)
    yd = read_long_csv(resolve_path(cfg, cfg.get("response")), "response",
                       cfg.get("response_domain", cfg.get("domain")), months)
    if list(xd.ids) != list(yd.ids):
        common = [i for i in yd.ids if i in set(xd.ids)]
        if not common:
            raise InputError("predictor and response share no subject ids")
        xd = _reorder(xd, common)
        yd = _reorder(yd, common)
    return xd, yd


def _reorder(ds, ids):
    pos = {sid: k for k, sid in enumerate(ds.ids)}
    from .smoothing import LongitudinalDataset

    return LongitudinalDataset([ds.times[pos[i]] for i in ids], [ds.values[pos[i]] for i in ids],
                               ds.domain, ds.name, list(ids))


def _smooth_predictor(cfg, xd):
    pb = _basis_from(cfg, "predictor_basis", xd.domain)
    W, rough = smooth_dataset(xd, pb, _get(cfg, "roughness"), _get(cfg, "penalty_order"))
    return pb, W, rough


def _surfaces(model, out, meta, points):
    pb, rb = model.predictor_basis, model.response_basis
    s = np.linspace(*pb.domain, points)
    t = np.linspace(*rb.domain, points)
    surf = eval_surfaces(model.Theta, pb, rb, s, t, s)
    hdr = _header(meta)
    write_rows(out / "alpha.csv", ["t", "value"], zip(t, surf["alpha"]), hdr)
    write_rows(out / "beta_grid.csv", ["s", "t", "value"],
               ((si, tj, surf["beta"][a, b]) for a, si in enumerate(s) for b, tj in enumerate(t)), hdr)
    doc = {"metadata": meta, "s": s, "t": t, "alpha": surf["alpha"], "beta": surf["beta"]}
    if "gamma" in surf:
        G = surf["gamma"]
        write_rows(out / "gamma_grid.csv", ["r", "s", "t", "value"],
                   ((ri, sj, tk, G[a, b, c]) for a, ri in enumerate(s) for b, sj in enumerate(s)
                    for c, tk in enumerate(t)), hdr)
        doc["r"] = s
        doc["gamma"] = G
    (out / "surfaces.json").write_text(dumps(doc))


def _fit_report(model, data, ids, out, meta):
    rows = []
    for sid, Psi, z, y in zip(ids, data.Psi, data.Z, data.y):
        r = y - Psi @ model.Theta @ z
        rows.append([sid, len(y), float(r @ r), float(np.sqrt(np.mean(r**2))), float(np.abs(r).max())])
    write_rows(out / "fit_report.csv", ["subject_id", "n_obs", "rss", "rmse", "max_abs_residual"],
               rows, _header(meta))


def _write_model(model, out, meta):
    doc = model.to_dict()
    doc["metadata"] = meta
    (out / "model.json").write_text(dumps(doc))


# --- commands -------------------------------------------------------------------


def cmd_fit(cfg, out, seed=None):
    meta = _metadata(cfg, "fit", seed)
    xd, yd = _load_pair(cfg)
    pb, W, rough = _smooth_predictor(cfg, xd)
    rb = _basis_from(cfg, "response_basis", yd.domain)
    order = _get(cfg, "order")
    Phi = gram_matrix(pb)
    data = RegressionData(build_covariates(W, Phi, order), yd.times, yd.values, rb)
    po = _get(cfg, "penalty_order")
    spec = QuadraticModelSpec(pb.M, rb.M, difference_penalty(pb.M, po).matrix,
                              difference_penalty(rb.M, po).matrix, float(_get(cfg, "lam")), order)
    model = fit(data, spec, predictor_basis=pb, Phi=Phi, max_outer=_get(cfg, "max_outer"),
                tol=_get(cfg, "tol"), noise=_get(cfg, "noise"))
    model.smoothing = {"roughness": rough, "penalty_order": po}
    report = evaluate(model, data)
    model.diagnostics["criteria"] = report.row()
    _write_model(model, out, meta)
    _fit_report(model, data, yd.ids, out, meta)
    _surfaces(model, out, meta, _get(cfg, "surface_points"))
    return model


def cmd_select(cfg, out, seed=None):
    meta = _metadata(cfg, "select", seed)
    xd, yd = _load_pair(cfg)
    pb, W, rough = _smooth_predictor(cfg, xd)
    rb_conf = dict(_get(cfg, "response_basis"))
    if rb_conf.get("kind", "bspline") != "bspline":
        raise ConfigError("selection over M_y uses B-spline response bases")
    lam_grid = cfg.get("lam_grid")
    M_y_grid = cfg.get("M_y_grid", [rb_conf.get("M", 6)])
    if not lam_grid or not M_y_grid:
        raise ConfigError("lam_grid and M_y_grid must be non-empty")
    criterion = _get(cfg, "criterion")
    if criterion not in CRITERIA:
        raise ConfigError(f"criterion must be one of {CRITERIA}")
    Phi = gram_matrix(pb)
    try:
        res = select(W, Phi, yd.times, yd.values, yd.domain, lam_grid, M_y_grid, criterion,
                     order=_get(cfg, "order"), penalty_order=_get(cfg, "penalty_order"),
                     predictor_basis=pb, noise=_get(cfg, "noise"), q_form=_get(cfg, "q_form"),
                     max_outer=_get(cfg, "max_outer"), tol=_get(cfg, "tol"))
    except FofquadError as exc:
        if type(exc) is FofquadError:
            raise NumericalFailure(str(exc)) from None
        raise
    cols = ["M_y", "lam", "df"] + list(CRITERIA) + ["converged", "undefined", "selected"]
    rows = []
    for k, rep in enumerate(res.table):
        r = rep.row()
        undefined = ";".join(c for c in CRITERIA if not np.isfinite(r[c]))
        rows.append([r["M_y"], float(r["lam"]), float(r["df"])] + [float(r[c]) for c in CRITERIA]
                    + [bool(r["converged"]), undefined, k == res.best_index])
    write_rows(out / "selection_report.csv", cols, rows, _header(meta))
    best = res.best
    best.smoothing = {"roughness": rough, "penalty_order": _get(cfg, "penalty_order")}
    best.diagnostics["criteria"] = res.table[res.best_index].row()
    best.diagnostics["selected_by"] = criterion
    _write_model(best, out, meta)
    return res


def cmd_predict(cfg, out, seed=None):
    meta = _metadata(cfg, "predict", seed)
    try:
        doc = json.loads(resolve_path(cfg, cfg.get("model")).read_text())
    except FileNotFoundError as exc:
        raise InputError(f"model file not found: {exc.filename}") from None
    model = FittedModel.from_dict(doc)
    pb = model.predictor_basis
    xd = read_long_csv(resolve_path(cfg, cfg.get("predictor")), "predictor", pb.domain,
                       _get(cfg, "months_to_unit"))
    rough = cfg.get("roughness", model.smoothing.get("roughness"))
    W, _ = smooth_dataset(xd, pb, rough, model.smoothing.get("penalty_order", 2))
    if "times" in cfg:
        times = np.asarray(cfg["times"], dtype=float)
    else:
        times = np.linspace(*model.response_basis.domain, int(cfg.get("n_times", 101)))
    rows = []
    for sid, w in zip(xd.ids, W):
        yhat = predict(model, w, times)
        rows.extend([sid, tj, yj] for tj, yj in zip(times, yhat))
    write_rows(out / "predictions.csv", ["subject_id", "time", "value"], rows, _header(meta))
    return rows


def cmd_simulate(cfg, out, seed=None, threads=1):
    if seed is None:
        seed = int(cfg.get("seed", 0))
    meta = _metadata(cfg, "simulate", seed)
    ns = cfg.get("n", [50, 100, 200])
    nu3s = cfg.get("nu3", [0.3, 0.6])
    ns = [ns] if isinstance(ns, int) else list(ns)
    nu3s = [nu3s] if isinstance(nu3s, (int, float)) else list(nu3s)
    base = SimConfig()
    fields = {k: cfg[k] for k in ("n_t", "M_x", "M_y", "M_x_est", "M_y_est", "replications",
                                  "predictor_noise", "toeplitz_rho", "wishart_df", "lam_grid",
                                  "max_outer", "tol") if k in cfg}
    nu = (float(cfg.get("nu1", base.nu[0])), float(cfg.get("nu2", base.nu[1])), float(nu3s[0]))
    try:
        sim = SimConfig(**{**asdict(base), **fields, "nu": nu, "seed": seed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    estimators = cfg.get("estimators", list(ALL_ESTIMATORS))
    bad = set(estimators) - set(ALL_ESTIMATORS)
    if bad:
        raise ConfigError(f"unknown estimators {sorted(bad)}; choose from {list(ALL_ESTIMATORS)}")
    table = run_study(sim, ns, nu3s, estimators, threads=threads)
    write_tables(table, out, _header(meta))
    rows = [[est, n, nu3, r, float(v)] for (est, n, nu3), vals in table.ases.items()
            for r, v in enumerate(vals)]
    write_rows(out / "ases.csv", ["estimator", "n", "nu3", "replication", "ase"], rows, _header(meta))
    return table


def cmd_smooth(cfg, out, seed=None):
    meta = _metadata(cfg, "smooth", seed)
    ds = read_long_csv(resolve_path(cfg, cfg.get("input")), "input", cfg.get("domain"),
                       _get(cfg, "months_to_unit"))
    conf = dict(cfg.get("basis", DEFAULTS["predictor_basis"]))
    conf.setdefault("domain", list(ds.domain))
    basis = BasisSystem.from_dict(conf)
    po = _get(cfg, "penalty_order")
    W, rough = smooth_dataset(ds, basis, _get(cfg, "roughness"), po)
    rows = [[sid, k, float(c)] for sid, w in zip(ds.ids, W) for k, c in enumerate(w)]
    write_rows(out / "coefficients.csv", ["subject_id", "k", "coefficient"], rows, _header(meta))
    (out / "smoothing.json").write_text(dumps({"metadata": meta, "basis": basis.to_dict(),
                                               "roughness": rough, "penalty_order": po}))
    return W


COMMANDS = {"fit": cmd_fit, "select": cmd_select, "predict": cmd_predict,
            "simulate": cmd_simulate, "smooth": cmd_smooth}


def build_parser():
    parser = argparse.ArgumentParser(prog="fofquad", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _exit_code(exc):
    if isinstance(exc, (ConfigError, InputError)) or exc.kind in (
        "empty_dataset", "domain_error", "dimension_error", "config_error", "input_error"
    ):
        return 2
    return 3


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg = load_config(args.config, args.command)
        seed = args.seed if args.seed is not None else cfg.get("seed")
        if args.command == "simulate":
            cmd_simulate(cfg, out, seed, threads=args.threads)
        else:
            with threadpool_limits(limits=max(1, args.threads)):
                COMMANDS[args.command](cfg, out, seed)
    except FofquadError as exc:
        code = _exit_code(exc)
        _report_error(out, exc.kind, str(exc), code)
        return code
    except np.linalg.LinAlgError as exc:
        _report_error(out, "numerical_failure", str(exc), 3)
        return 3
    except (OSError, ValueError, KeyError) as exc:
        _report_error(out, "input_error", str(exc), 2)
        return 2
    return 0


def _report_error(out, kind, message, code):
    doc = json.dumps({"error": kind, "message": message, "exit_code": code}, indent=2)
    (out / "error.json").write_text(doc)
    print(doc, file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())

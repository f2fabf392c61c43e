"""JSON documents for fitted models."""

import hashlib
import json

import numpy as np

from . import __version__
from .basis import BasisSystem
from .design import QuadraticModelSpec

FORMAT = "fofquad-model/1"


def _basis_dict(b):
    return None if b is None else b.to_dict()


def model_to_dict(model) -> dict:
    spec = model.spec
    diag = {k: v for k, v in model.diagnostics.items()}
    return {
        "format": FORMAT,
        "version": __version__,
        "theta": np.asarray(model.Theta).tolist(),
        "nu": [float(x) for x in model.nu],
        "noise": model.noise,
        "spec": {
            "M_x": spec.M_x,
            "M_y": spec.M_y,
            "order": spec.order,
            "lam": spec.lam,
            "Omega_x": spec.Omega_x.tolist(),
            "Omega_y": spec.Omega_y.tolist(),
        },
        "predictor_basis": _basis_dict(model.predictor_basis),
        "response_basis": _basis_dict(model.response_basis),
        "Phi": None if model.Phi is None else np.asarray(model.Phi).tolist(),
        "smoothing": dict(model.smoothing),
        "diagnostics": _jsonable(diag),
    }


def model_from_dict(d: dict):
    from .estimator import FittedModel

    if d.get("format") != FORMAT:
        raise ValueError(f"not a model document (format={d.get('format')!r})")
    s = d["spec"]
    spec = QuadraticModelSpec(s["M_x"], s["M_y"], np.array(s["Omega_x"]), np.array(s["Omega_y"]),
                              s["lam"], s["order"])
    pb = d.get("predictor_basis")
    return FittedModel(
        Theta=np.array(d["theta"], dtype=float),
        nu=np.array(d["nu"], dtype=float),
        spec=spec,
        predictor_basis=None if pb is None else BasisSystem.from_dict(pb),
        response_basis=BasisSystem.from_dict(d["response_basis"]),
        Phi=None if d.get("Phi") is None else np.array(d["Phi"], dtype=float),
        noise=d.get("noise", "variance"),
        diagnostics=d.get("diagnostics", {}),
        smoothing=d.get("smoothing", {}),
    )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True)


def config_hash(config) -> str:
    blob = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]

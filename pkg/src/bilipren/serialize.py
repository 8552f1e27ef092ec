"""JSON documents for weights, certificates, layers and model containers.

Matrices serialize as ``{"rows": r, "cols": c, "data": [...]}`` with
row-major data; layer documents carry a ``kind`` tag so containers can be
reassembled without ambiguity.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .bilip import BiLipHyper, Certificate
from .compose import FactorModel, RenBlock, SandwichModel
from .orthogonal import DynOrtho, StaticOrtho
from .ren import RenDims, RenWeights

_WEIGHT_FIELDS = ("A", "B1", "B2", "C1", "D11", "D12", "C2", "D21", "D22",
                  "bx", "bv", "by")


class ModelFormatError(ValueError):
    """Document does not match the expected schema."""


def _mat_doc(M) -> dict:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return {"rows": M.shape[0], "cols": M.shape[1], "data": M.reshape(-1).tolist()}


def _mat_from(doc) -> np.ndarray:
    try:
        data = np.asarray(doc["data"], dtype=float)
        return data.reshape(doc["rows"], doc["cols"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"bad matrix document: {exc}") from exc


def _vec_doc(v) -> dict:
    v = np.atleast_1d(np.asarray(v, dtype=float))
    return {"rows": v.shape[0], "cols": 1, "data": v.tolist()}


def _vec_from(doc) -> np.ndarray:
    return _mat_from(doc).reshape(-1)


def weights_to_doc(wts: RenWeights) -> dict:
    dims = wts.dims
    doc = {
        "dims": {"n": dims.n, "q": dims.q, "m": dims.m},
        "activation": wts.activation,
        "flags": {"acyclic": wts.acyclic},
    }
    for name in _WEIGHT_FIELDS:
        value = getattr(wts, name)
        doc[name] = _vec_doc(value) if name.startswith("b") else _mat_doc(value)
    return doc


def weights_from_doc(doc) -> RenWeights:
    try:
        kwargs = {}
        for name in _WEIGHT_FIELDS:
            kwargs[name] = (_vec_from(doc[name]) if name.startswith("b")
                            else _mat_from(doc[name]))
        return RenWeights(**kwargs, activation=doc["activation"],
                          acyclic=bool(doc["flags"]["acyclic"]))
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"bad weights document: {exc}") from exc


def certificate_to_doc(cert: Certificate) -> dict:
    return {
        "P": _mat_doc(cert.P),
        "Lambda": _vec_doc(cert.Lambda),
        "lmi_min_eig": cert.lmi_min_eig,
        "kappa": cert.kappa,
        "alpha_bar": cert.alpha_bar,
        "mu": cert.mu,
        "nu": cert.nu,
    }


def certificate_from_doc(doc) -> Certificate:
    try:
        return Certificate(
            P=_mat_from(doc["P"]), Lambda=_vec_from(doc["Lambda"]),
            lmi_min_eig=float(doc["lmi_min_eig"]), kappa=float(doc["kappa"]),
            alpha_bar=float(doc["alpha_bar"]), mu=float(doc["mu"]),
            nu=float(doc["nu"]),
        )
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"bad certificate document: {exc}") from exc


def _block_to_doc(block: RenBlock) -> dict:
    h = block.hyper
    return {
        "kind": "bilip_ren",
        "weights": weights_to_doc(block.weights),
        "hyper": {"mu": h.mu, "nu": h.nu, "alpha_bar": h.alpha_bar,
                  "eps": h.eps, "activation": h.activation},
        "certificate": certificate_to_doc(block.certificate),
    }


def _block_from_doc(doc) -> RenBlock:
    wts = weights_from_doc(doc["weights"])
    h = doc["hyper"]
    hyper = BiLipHyper(mu=h["mu"], nu=h["nu"], dims=wts.dims,
                       alpha_bar=h["alpha_bar"], eps=h["eps"],
                       activation=h["activation"])
    return RenBlock(weights=wts, hyper=hyper,
                    certificate=certificate_from_doc(doc["certificate"]))


def layer_to_doc(layer) -> dict:
    if isinstance(layer, StaticOrtho):
        return {"kind": "static_ortho", "P": _mat_doc(layer.Pk), "q": _vec_doc(layer.qk)}
    if isinstance(layer, DynOrtho):
        return {"kind": "dyn_ortho", "A": _mat_doc(layer.Ak), "B": _mat_doc(layer.Bk),
                "C": _mat_doc(layer.Ck), "D": _mat_doc(layer.Dk),
                "d": _vec_doc(layer.dk), "w": _vec_doc(layer.wk)}
    if isinstance(layer, RenBlock):
        return _block_to_doc(layer)
    raise TypeError(f"cannot serialize layer of type {type(layer).__name__}")


def layer_from_doc(doc):
    kind = doc.get("kind")
    if kind == "static_ortho":
        return StaticOrtho(Pk=_mat_from(doc["P"]), qk=_vec_from(doc["q"]))
    if kind == "dyn_ortho":
        return DynOrtho(Ak=_mat_from(doc["A"]), Bk=_mat_from(doc["B"]),
                        Ck=_mat_from(doc["C"]), Dk=_mat_from(doc["D"]),
                        dk=_vec_from(doc["d"]), wk=_vec_from(doc["w"]))
    if kind == "bilip_ren":
        return _block_from_doc(doc)
    raise ModelFormatError(f"unknown layer kind {kind!r}")


def model_to_doc(model) -> dict:
    if isinstance(model, SandwichModel):
        return {
            "kind": "sandwich",
            "layers": [layer_to_doc(l) for l in model.layers],
            "mu": model.mu, "nu": model.nu,
            "allocation": model.allocation,
        }
    if isinstance(model, FactorModel):
        return {
            "kind": "factor",
            "inner": layer_to_doc(model.inner),
            "outer": model_to_doc(model.outer),
        }
    if isinstance(model, RenBlock):
        return _block_to_doc(model)
    raise TypeError(f"cannot serialize model of type {type(model).__name__}")


def model_from_doc(doc):
    kind = doc.get("kind")
    if kind == "sandwich":
        return SandwichModel(layers=[layer_from_doc(l) for l in doc["layers"]],
                             mu=float(doc["mu"]), nu=float(doc["nu"]),
                             allocation=doc.get("allocation", {}))
    if kind == "factor":
        return FactorModel(inner=layer_from_doc(doc["inner"]),
                           outer=model_from_doc(doc["outer"]))
    if kind == "bilip_ren":
        return _block_from_doc(doc)
    raise ModelFormatError(f"unknown model kind {kind!r}")


def save_model(model, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(model_to_doc(model), fh)


def load_model(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot read model file: {exc}") from exc
    return model_from_doc(doc)

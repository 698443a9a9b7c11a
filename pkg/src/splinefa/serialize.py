"""Structured-text persistence for fitted models and column metadata.

Models round-trip through YAML: per-item intercepts and coefficient
matrices, the copula coefficient matrix, basis sizes, and any rescale
bounds carried by the column metadata. Floats are written with full repr
precision so save/load is lossless.
"""

from __future__ import annotations

import numpy as np
import yaml

from .data import ColumnInfo
from .exceptions import SchemaError
from .latent import CopulaModel
from .likelihood import FactorModel
from .measurement import CONTINUOUS, ItemModel
from .numerics import build_basis, gauss_legendre_unit

FORMAT_NAME = "splinefa-model"
FORMAT_VERSION = 1


def _listify(a):
    return np.asarray(a, dtype=float).tolist()


def _column_doc(c: ColumnInfo) -> dict:
    doc = {
        "name": c.name,
        "kind": c.kind,
        "factor": c.factor,
        "monotone": bool(c.monotone),
        "score": c.score,
    }
    if c.kind != CONTINUOUS:
        doc["n_categories"] = int(c.n_categories)
    if c.bounds is not None:
        doc["bounds"] = [float(c.bounds[0]), float(c.bounds[1])]
    if c.partner is not None:
        doc["partner"] = c.partner
    return doc


def _column_from_doc(doc: dict) -> ColumnInfo:
    bounds = doc.get("bounds")
    return ColumnInfo(
        name=doc["name"],
        kind=doc["kind"],
        factor=doc["factor"],
        n_categories=int(doc.get("n_categories", 0)),
        monotone=bool(doc.get("monotone", True)),
        score=doc.get("score", "identity"),
        bounds=tuple(float(b) for b in bounds) if bounds is not None else None,
        partner=doc.get("partner"),
    )


def model_document(model: FactorModel, columns=None) -> dict:
    """Plain-data description of a fitted model (YAML/JSON friendly)."""
    items = []
    for item in model.items:
        doc = {
            "name": item.name,
            "kind": item.kind,
            "factor": item.factor,
            "basis_size": item.basis.size,
            "monotone": bool(item.monotone),
            "alpha": _listify(item.alpha),
            "coef": _listify(item.coef),
        }
        if item.kind != CONTINUOUS:
            doc["n_categories"] = int(item.n_categories)
        items.append(doc)
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "quadrature_size": len(model.quad),
        "copula": {
            "basis_size": model.copula.basis.size,
            "xi": _listify(model.copula.xi),
        },
        "items": items,
    }
    if columns is not None:
        doc["columns"] = [_column_doc(c) for c in columns]
    return doc


def model_from_document(doc: dict):
    """Rebuild (model, columns or None) from a model document."""
    if doc.get("format") != FORMAT_NAME:
        raise SchemaError(f"not a {FORMAT_NAME} document")
    if doc.get("version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported model document version {doc.get('version')!r}")
    items = []
    for idoc in doc["items"]:
        basis = build_basis(int(idoc["basis_size"]))
        items.append(
            ItemModel(
                name=idoc["name"],
                kind=idoc["kind"],
                factor=idoc["factor"],
                basis=basis,
                alpha=np.asarray(idoc["alpha"], dtype=float),
                coef=np.asarray(idoc["coef"], dtype=float),
                n_categories=int(idoc.get("n_categories", 0)),
                monotone=bool(idoc.get("monotone", True)),
            )
        )
    cop = doc["copula"]
    copula = CopulaModel(
        basis=build_basis(int(cop["basis_size"])),
        xi=np.asarray(cop["xi"], dtype=float),
    )
    quad = gauss_legendre_unit(int(doc["quadrature_size"]))
    model = FactorModel(items=items, copula=copula, quad=quad)
    columns = doc.get("columns")
    if columns is not None:
        columns = [_column_from_doc(c) for c in columns]
    return model, columns


def save_model(path, model: FactorModel, columns=None) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(model_document(model, columns), fh, sort_keys=False)


def load_model(path):
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: expected a mapping document")
    return model_from_document(doc)


def save_columns(path, columns) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump([_column_doc(c) for c in columns], fh, sort_keys=False)


def load_columns(path):
    with open(path) as fh:
        docs = yaml.safe_load(fh)
    if not isinstance(docs, list):
        raise SchemaError(f"{path}: expected a list of column entries")
    return [_column_from_doc(d) for d in docs]

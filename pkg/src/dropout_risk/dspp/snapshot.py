"""Versioned JSON snapshots of trained models.

Tensors are stored as base64 of their little-endian bytes, so a reload
reproduces every parameter (and hence every prediction) bit for bit.
"""

from __future__ import annotations

import base64
import json

import numpy as np
import torch

from ..datamodel import Standardizer
from .model import DTYPES, DsppArchitecture, DsppModel, build_dspp

FORMAT = "dropout-risk/dspp-snapshot"
VERSION = 1


def _encode(t: torch.Tensor) -> dict:
    a = t.detach().cpu().numpy()
    return {"dtype": str(a.dtype), "shape": list(a.shape),
            "data": base64.b64encode(np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<")).tobytes()).decode()}


def _decode(d: dict) -> torch.Tensor:
    raw = base64.b64decode(d["data"])
    a = np.frombuffer(raw, dtype=np.dtype(d["dtype"]).newbyteorder("<")).reshape(d["shape"])
    return torch.from_numpy(a.astype(np.dtype(d["dtype"]), copy=True))


def model_to_dict(model: DsppModel, config_hash: str = "", extra: dict | None = None) -> dict:
    if model.arch is None:
        raise ValueError("model has no architecture record; build it with build_dspp")
    return {
        "format": FORMAT,
        "version": VERSION,
        "config_hash": config_hash,
        "architecture": model.arch.to_dict(),
        "standardizer": model.standardizer.to_dict() if model.standardizer is not None else None,
        "extra": extra or {},
        "tensors": {name: _encode(t) for name, t in model.state_dict().items()},
    }


def model_from_dict(payload: dict) -> DsppModel:
    if payload.get("format") != FORMAT:
        raise ValueError("not a DSPP snapshot")
    if payload.get("version") != VERSION:
        raise ValueError(f"unsupported snapshot version {payload.get('version')}")
    arch = DsppArchitecture(**payload["architecture"])
    std = payload.get("standardizer")
    standardizer = Standardizer.from_dict(std) if std is not None else None
    # skeleton with the right shapes; every tensor is overwritten below
    skeleton_x = np.zeros((arch.n_inducing + 1, arch.input_dim))
    skeleton_x[:, 0] = np.arange(arch.n_inducing + 1)
    model = build_dspp(skeleton_x, arch, standardizer, seed=0)
    state = {name: _decode(d) for name, d in payload["tensors"].items()}
    model.load_state_dict(state)
    model.eval()
    return model


def save_model(path, model: DsppModel, config_hash: str = "", extra: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model, config_hash, extra), fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> DsppModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))

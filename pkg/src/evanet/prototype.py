"""Age-conditioned continuous prototypes of healthy latent codes."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .layers import Params, apply_mlp, init_mlp, sinusoid
from .tensor import ShapeError, Tensor

PROTO_LAYERS = 3


@dataclass
class PrototypePoint:
    age: float
    vector: np.ndarray


def embed_age(age, dim: int = 64) -> np.ndarray:
    """Interleaved sin/cos Fourier features of a positive age (or array of
    ages), base 10000."""
    a = np.asarray(age, dtype=np.float64)
    if np.any(~(a > 0)):
        raise ValueError(f"ages must be positive, got {age!r}")
    return sinusoid(a, dim)


def init_prototype(params: Params, d_age: int, hidden: int, d_latent: int,
                   rng: np.random.Generator) -> None:
    init_mlp(params, "proto", (d_age, hidden, hidden, d_latent), rng)


def prototype_forward(e, params: Params) -> Tensor:
    """Map age embeddings ``[d_age]`` or ``[B, d_age]`` to prototype points."""
    e = e if isinstance(e, Tensor) else Tensor(e)
    d_in = params["proto.0.weight"].shape[0]
    if e.shape[-1] != d_in:
        raise ShapeError(f"prototype network expects {d_in}-d embeddings, got {e.shape}")
    return apply_mlp(e, params, "proto", PROTO_LAYERS)


def prototype_at(age: float, params: Params) -> PrototypePoint:
    d_in = params["proto.0.weight"].shape[0]
    with T.no_grad():
        p = prototype_forward(embed_age(age, d_in), params)
    return PrototypePoint(float(age), p.data.copy())


def align_loss(z: Tensor, p: Tensor) -> Tensor:
    """Squared Euclidean distance, averaged over any leading batch axis."""
    if z.shape != p.shape:
        raise ShapeError(f"align_loss: shapes {z.shape} and {p.shape} differ")
    per = T.tsum(T.square(T.sub(z, p)), axis=-1)
    return T.mean(per) if per.ndim else per


def trajectory_dump(params: Params, ages: Sequence[float]) -> list[dict]:
    """Prototype points along an increasing age grid with the distance from
    each point to its predecessor (``None`` for the first)."""
    ages = [float(a) for a in ages]
    if not ages:
        raise ValueError("age grid is empty")
    if any(b <= a for a, b in zip(ages, ages[1:])):
        raise ValueError("age grid must be strictly increasing")
    d_in = params["proto.0.weight"].shape[0]
    with T.no_grad():
        pts = prototype_forward(embed_age(np.array(ages), d_in), params).data
    rows, prev = [], None
    for a, p in zip(ages, pts):
        dist = None if prev is None else float(np.linalg.norm(p - prev))
        rows.append({"age": a, "point": p.copy(), "dist_to_prev": dist})
        prev = p
    return rows


def principal_signs(rows: list[dict]) -> np.ndarray:
    """Signs of successive steps projected on the trajectory's first principal
    direction; all equal signs means the path is monotone along that axis."""
    pts = np.stack([r["point"] for r in rows])
    if len(pts) < 2:
        return np.zeros(0)
    centred = pts - pts.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    proj = centred @ vt[0]
    return np.sign(np.diff(proj))


def write_trajectory_csv(rows: list[dict], path) -> None:
    d = len(rows[0]["point"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["age"] + [f"p_{j}" for j in range(d)] + ["dist_to_prev"])
        for r in rows:
            dist = "" if r["dist_to_prev"] is None else repr(r["dist_to_prev"])
            w.writerow([repr(r["age"])] + [repr(float(v)) for v in r["point"]] + [dist])

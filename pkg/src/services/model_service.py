"""
Linear morphable shape model.

A face is the mean shape plus identity and expression displacements:

    S = S_mean + A_id @ (alpha_id * sigma_id) + A_exp @ (alpha_exp * sigma_exp)

Coefficients are expressed in standard deviations, so a truncation at 3
means "three sigma" for every basis column regardless of its magnitude.
Models are stored in the little-endian MDL1 format:

    "MDL1" | u32 version | u32 V | u32 K_id | u32 K_exp | u32 T
    mean_shape (3V f64) | id_basis (3V*K_id f64, column-major) | id_sigma
    exp_basis | exp_sigma | triangles (3T u32)
"""

import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateTriangleError,
    ModelDimensionError,
    ModelHeaderError,
    ModelLoadError,
    ModelNonFiniteError,
    ModelPayloadLengthError,
    TriangleIndexError,
)

MDL1_MAGIC = b"MDL1"
MDL1_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")

# toy head semi-axes in millimeters (x, y, z)
TOY_SEMI_AXES = (90.0, 120.0, 100.0)


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    out = np.ascontiguousarray(array, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class MorphableModel:
    mean_shape: np.ndarray  # (3V,)
    id_basis: np.ndarray  # (3V, K_id)
    id_sigma: np.ndarray  # (K_id,)
    exp_basis: np.ndarray  # (3V, K_exp)
    exp_sigma: np.ndarray  # (K_exp,)
    triangles: np.ndarray  # (T, 3)

    def __post_init__(self):
        object.__setattr__(self, "mean_shape", _frozen(self.mean_shape, np.float64))
        object.__setattr__(self, "id_basis", _frozen(self.id_basis, np.float64))
        object.__setattr__(self, "id_sigma", _frozen(self.id_sigma, np.float64))
        object.__setattr__(self, "exp_basis", _frozen(self.exp_basis, np.float64))
        object.__setattr__(self, "exp_sigma", _frozen(self.exp_sigma, np.float64))
        object.__setattr__(self, "triangles", _frozen(self.triangles, np.int64))
        self.validate()

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0] // 3

    @property
    def k_id(self) -> int:
        return self.id_basis.shape[1]

    @property
    def k_exp(self) -> int:
        return self.exp_basis.shape[1]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def validate(self) -> None:
        rows = self.mean_shape.shape[0]
        if self.mean_shape.ndim != 1 or rows == 0 or rows % 3 != 0:
            raise ModelDimensionError(
                f"mean_shape must hold 3*V > 0 coordinates, got shape {self.mean_shape.shape}"
            )
        for name, basis, sigma in (
            ("id", self.id_basis, self.id_sigma),
            ("exp", self.exp_basis, self.exp_sigma),
        ):
            if basis.ndim != 2 or basis.shape[0] != rows:
                raise ModelDimensionError(
                    f"{name}_basis must have {rows} rows, got shape {basis.shape}"
                )
            if sigma.ndim != 1 or sigma.shape[0] != basis.shape[1]:
                raise ModelDimensionError(
                    f"{name}_sigma length {sigma.shape} does not match {basis.shape[1]} basis columns"
                )
            if not (np.all(np.isfinite(basis)) and np.all(np.isfinite(sigma))):
                raise ModelNonFiniteError(f"{name} basis or sigma contains non-finite values")
            if np.any(sigma <= 0):
                raise ModelLoadError(f"{name}_sigma entries must be strictly positive")
        if not np.all(np.isfinite(self.mean_shape)):
            raise ModelNonFiniteError("mean_shape contains non-finite values")

        tris = self.triangles
        if tris.ndim != 2 or tris.shape[1] != 3 or tris.shape[0] == 0:
            raise ModelDimensionError(f"triangles must be a non-empty (T, 3) array, got {tris.shape}")
        if tris.min() < 0 or tris.max() >= self.n_vertices:
            raise TriangleIndexError(
                f"triangle index out of range [0, {self.n_vertices}): "
                f"min {tris.min()}, max {tris.max()}"
            )
        degenerate = (tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2]) | (tris[:, 0] == tris[:, 2])
        if np.any(degenerate):
            first = int(np.flatnonzero(degenerate)[0])
            raise DegenerateTriangleError(f"triangle {first} repeats a vertex: {tris[first].tolist()}")


@dataclass(frozen=True, eq=False)
class ShapeCoefficients:
    alpha_id: np.ndarray
    alpha_exp: np.ndarray

    @classmethod
    def zeros(cls, model: MorphableModel) -> "ShapeCoefficients":
        return cls(np.zeros(model.k_id), np.zeros(model.k_exp))

    @classmethod
    def neutral(cls, model: MorphableModel, alpha_id: np.ndarray) -> "ShapeCoefficients":
        """Identity coefficients with the expression held exactly at zero."""
        return cls(np.asarray(alpha_id, dtype=np.float64), np.zeros(model.k_exp))


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray  # (3V,) millimeters
    triangles: np.ndarray  # (T, 3)

    def points(self) -> np.ndarray:
        return self.vertices.reshape(-1, 3)

    def centroid(self) -> np.ndarray:
        return self.points().mean(axis=0)


def load_model(path: str | os.PathLike) -> MorphableModel:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise ModelHeaderError(f"{path}: file too short for an MDL1 header ({len(data)} bytes)")
    magic, version, n_vertices, k_id, k_exp, n_tris = _HEADER.unpack_from(data, 0)
    if magic != MDL1_MAGIC:
        raise ModelHeaderError(f"{path}: bad magic {magic!r}, expected {MDL1_MAGIC!r}")
    if version != MDL1_VERSION:
        raise ModelHeaderError(f"{path}: unsupported MDL1 version {version}")
    if n_vertices == 0 or n_tris == 0:
        raise ModelDimensionError(f"{path}: model needs vertices and triangles (V={n_vertices}, T={n_tris})")

    rows = 3 * n_vertices
    n_floats = rows + rows * k_id + k_id + rows * k_exp + k_exp
    expected = _HEADER.size + 8 * n_floats + 4 * 3 * n_tris
    if len(data) != expected:
        raise ModelPayloadLengthError(
            f"{path}: payload is {len(data)} bytes, header implies {expected}"
        )

    floats = np.frombuffer(data, dtype="<f8", count=n_floats, offset=_HEADER.size)
    tris = np.frombuffer(data, dtype="<u4", count=3 * n_tris, offset=_HEADER.size + 8 * n_floats)

    cursor = 0

    def take(count: int) -> np.ndarray:
        nonlocal cursor
        chunk = floats[cursor:cursor + count]
        cursor += count
        return chunk

    mean_shape = take(rows)
    id_basis = take(rows * k_id).reshape((rows, k_id), order="F")
    id_sigma = take(k_id)
    exp_basis = take(rows * k_exp).reshape((rows, k_exp), order="F")
    exp_sigma = take(k_exp)

    model = MorphableModel(
        mean_shape=mean_shape,
        id_basis=id_basis,
        id_sigma=id_sigma,
        exp_basis=exp_basis,
        exp_sigma=exp_sigma,
        triangles=tris.reshape(n_tris, 3).astype(np.int64),
    )
    logging.info(f"Loaded model {path}: V={model.n_vertices}, K_id={model.k_id}, K_exp={model.k_exp}")
    return model


def save_model(model: MorphableModel, path: str | os.PathLike) -> None:
    header = _HEADER.pack(
        MDL1_MAGIC, MDL1_VERSION, model.n_vertices, model.k_id, model.k_exp, model.n_triangles
    )
    parts = [
        header,
        model.mean_shape.astype("<f8").tobytes(),
        model.id_basis.astype("<f8").ravel(order="F").tobytes(),
        model.id_sigma.astype("<f8").tobytes(),
        model.exp_basis.astype("<f8").ravel(order="F").tobytes(),
        model.exp_sigma.astype("<f8").tobytes(),
        model.triangles.astype("<u4").tobytes(),
    ]
    try:
        with open(path, "wb") as f:
            f.write(b"".join(parts))
    except OSError as e:
        logging.error(f"Could not write model to {path}: {e}")
        raise
    logging.info(f"Saved model {path}: V={model.n_vertices}, K_id={model.k_id}, K_exp={model.k_exp}")


def _lat_long_cap(v_rings: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Front half of an ellipsoid as a pole + rings grid facing +z.

    Returns (points, theta, phi); theta is the polar angle from +z.
    """
    n_seg = 2 * v_rings
    theta = np.concatenate([[0.0], np.repeat(np.arange(1, v_rings + 1) * (0.5 * np.pi / v_rings), n_seg)])
    phi = np.concatenate([[0.0], np.tile(np.arange(n_seg) * (2.0 * np.pi / n_seg), v_rings)])
    a, b, c = TOY_SEMI_AXES
    points = np.stack(
        [a * np.sin(theta) * np.cos(phi), b * np.sin(theta) * np.sin(phi), c * np.cos(theta)], axis=1
    )
    return points, theta, phi


def _cap_triangles(v_rings: int) -> np.ndarray:
    n_seg = 2 * v_rings
    j = np.arange(n_seg)
    j_next = (j + 1) % n_seg
    # counter-clockwise seen from outside, so normals point away from the head
    fan = np.stack([np.zeros(n_seg, dtype=np.int64), 1 + j, 1 + j_next], axis=1)
    quads = []
    for ring in range(1, v_rings):
        inner = 1 + (ring - 1) * n_seg
        outer = 1 + ring * n_seg
        quads.append(np.stack([inner + j, outer + j, outer + j_next], axis=1))
        quads.append(np.stack([inner + j, outer + j_next, inner + j_next], axis=1))
    return np.concatenate([fan] + quads, axis=0)


def _displacement_fields(
    rng: np.random.Generator, points: np.ndarray, theta: np.ndarray, phi: np.ndarray, count: int, lower_face: bool
) -> np.ndarray:
    a, b, c = TOY_SEMI_AXES
    normals = points / np.array([a * a, b * b, c * c])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    t = theta / (0.5 * np.pi)
    window = 0.5 * (1.0 - np.tanh(points[:, 1] / 40.0)) if lower_face else np.ones(len(points))

    basis = np.zeros((3 * len(points), count))
    for k in range(count):
        field = np.zeros(len(points))
        for _ in range(2):
            ell = rng.integers(1, 4)
            m = rng.integers(0, 4)
            radial_phase, angular_phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
            angular = np.cos(m * phi + angular_phase)
            if m > 0:
                # vanish at the pole where phi is undefined
                angular = angular * np.sin(theta)
            field += rng.uniform(0.5, 1.0) * np.cos(np.pi * ell * t + radial_phase) * angular
        column = (field * window)[:, None] * normals
        norm = np.linalg.norm(column)
        if norm == 0.0:
            column = normals
            norm = np.linalg.norm(column)
        basis[:, k] = column.ravel() / norm
    return basis


def make_toy_model(seed: int, v_rings: int = 32, k_id: int = 20, k_exp: int = 10) -> MorphableModel:
    """Procedural stand-in for a scanned face model.

    An ellipsoidal head (90 x 120 x 100 mm semi-axes) triangulated as a
    latitude/longitude cap facing +z, recentred on its vertex centroid.
    Basis columns are smooth unit-norm displacement fields along the
    surface normal; expression fields are concentrated on the lower face.
    """
    if v_rings < 4:
        raise ValueError(f"v_rings must be >= 4, got {v_rings}")
    if k_id < 0 or k_exp < 0:
        raise ValueError(f"k_id and k_exp must be >= 0, got {k_id} and {k_exp}")

    rng = np.random.default_rng(seed)
    points, theta, phi = _lat_long_cap(v_rings)
    id_basis = _displacement_fields(rng, points, theta, phi, k_id, lower_face=False)
    exp_basis = _displacement_fields(rng, points, theta, phi, k_exp, lower_face=True)

    n_vertices = len(points)
    id_sigma = 4.0 * np.sqrt(n_vertices) * 0.85 ** np.arange(k_id)
    exp_sigma = 2.5 * np.sqrt(n_vertices) * 0.8 ** np.arange(k_exp)

    points = points - points.mean(axis=0)
    return MorphableModel(
        mean_shape=points.ravel(),
        id_basis=id_basis,
        id_sigma=id_sigma,
        exp_basis=exp_basis,
        exp_sigma=exp_sigma,
        triangles=_cap_triangles(v_rings),
    )


def _truncated_normal(rng: np.random.Generator, size: int, trunc: float) -> np.ndarray:
    values = rng.standard_normal(size)
    outside = np.abs(values) > trunc
    while np.any(outside):
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > trunc
    return values


def sample_coefficients(rng: np.random.Generator, model: MorphableModel, trunc: float = 3.0) -> ShapeCoefficients:
    if not trunc > 0:
        raise ValueError(f"trunc must be > 0, got {trunc}")
    alpha_id = _truncated_normal(rng, model.k_id, trunc)
    alpha_exp = _truncated_normal(rng, model.k_exp, trunc)
    return ShapeCoefficients(alpha_id, alpha_exp)


def synthesize_shape(model: MorphableModel, coeffs: ShapeCoefficients) -> Mesh:
    alpha_id = np.asarray(coeffs.alpha_id, dtype=np.float64)
    alpha_exp = np.asarray(coeffs.alpha_exp, dtype=np.float64)
    if alpha_id.shape != (model.k_id,) or alpha_exp.shape != (model.k_exp,):
        raise ValueError(
            f"coefficient lengths ({alpha_id.size}, {alpha_exp.size}) do not match "
            f"model (K_id={model.k_id}, K_exp={model.k_exp})"
        )
    vertices = (
        model.mean_shape
        + model.id_basis @ (alpha_id * model.id_sigma)
        + model.exp_basis @ (alpha_exp * model.exp_sigma)
    )
    return Mesh(vertices=vertices, triangles=model.triangles)

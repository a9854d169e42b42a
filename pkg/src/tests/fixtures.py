"""Analytic meshes and small protocols shared by the test modules."""

import numpy as np

from src.services.embedding_service import EmbeddingSet, unit_rows
from src.services.eval_service import Protocol
from src.services.model_service import Mesh, MorphableModel


def grid_mesh(xs: np.ndarray, ys: np.ndarray, z: np.ndarray) -> Mesh:
    """Triangulated height field: z has shape (len(ys), len(xs))."""
    gx, gy = np.meshgrid(xs, ys)
    vertices = np.stack([gx, gy, z], axis=-1).reshape(-1)
    nx = len(xs)
    tris = []
    for r in range(len(ys) - 1):
        for c in range(nx - 1):
            i = r * nx + c
            tris.append([i, i + 1, i + nx + 1])
            tris.append([i, i + nx + 1, i + nx])
    return Mesh(vertices, np.array(tris, dtype=np.int64))


def plane_mesh(half: float = 100.0, n: int = 8, z: float = 0.0, tilt_deg: float = 0.0) -> Mesh:
    """Square plane facing +z, optionally tilted about the y axis (z grows with x)."""
    xs = np.linspace(-half, half, n + 1)
    ys = np.linspace(-half, half, n + 1)
    gx, _ = np.meshgrid(xs, ys)
    return grid_mesh(xs, ys, z + np.tan(np.radians(tilt_deg)) * gx)


def uv_sphere(radius: float, segments: int = 128, rings: int = 64) -> Mesh:
    theta = np.arange(1, rings) * np.pi / rings
    phi = np.arange(segments) * 2.0 * np.pi / segments
    t, p = np.meshgrid(theta, phi, indexing="ij")
    body = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1).reshape(-1, 3)
    points = radius * np.vstack([[0.0, 0.0, 1.0], body, [0.0, 0.0, -1.0]])

    south = len(points) - 1
    j = np.arange(segments)
    j_next = (j + 1) % segments
    tris = [np.stack([np.zeros(segments, dtype=np.int64), 1 + j, 1 + j_next], axis=1)]
    for ring in range(rings - 2):
        upper = 1 + ring * segments
        lower = upper + segments
        tris.append(np.stack([upper + j, lower + j, lower + j_next], axis=1))
        tris.append(np.stack([upper + j, lower + j_next, upper + j_next], axis=1))
    last = 1 + (rings - 2) * segments
    tris.append(np.stack([np.full(segments, south), last + j_next, last + j], axis=1))
    return Mesh(points.reshape(-1), np.concatenate(tris))


def overlapping_planes(near_z: float, far_z: float, half: float = 100.0) -> Mesh:
    """Two stacked planes; near_z is closer to a frontal camera (larger world z)."""
    front = plane_mesh(half, 4, near_z)
    back = plane_mesh(half, 4, far_z)
    offset = len(front.points())
    return Mesh(
        np.concatenate([front.vertices, back.vertices]),
        np.concatenate([front.triangles, back.triangles + offset]),
    )


def tiny_model(k_id: int = 2, k_exp: int = 1, seed: int = 0) -> MorphableModel:
    """A two-triangle square with random unit-norm bases."""
    rng = np.random.default_rng(seed)
    mean = np.array([-10, -10, 0, 10, -10, 0, 10, 10, 0, -10, 10, 0], dtype=np.float64)
    id_basis = unit_rows(rng.standard_normal((k_id, 12))).T if k_id else np.zeros((12, 0))
    exp_basis = unit_rows(rng.standard_normal((k_exp, 12))).T if k_exp else np.zeros((12, 0))
    return MorphableModel(
        mean_shape=mean,
        id_basis=id_basis,
        id_sigma=np.linspace(2.0, 1.0, k_id),
        exp_basis=exp_basis,
        exp_sigma=np.linspace(1.5, 0.5, k_exp),
        triangles=np.array([[0, 1, 2], [0, 2, 3]]),
    )


def random_protocol(
    rng: np.random.Generator,
    n_classes: int = 6,
    dim: int = 8,
    n_probes: int = 20,
    modalities: tuple[str, ...] = ("rgb", "depth"),
    gallery_per_class: int = 1,
) -> Protocol:
    labels = np.repeat(np.arange(n_classes), gallery_per_class)
    gallery = {m: EmbeddingSet(m, rng.standard_normal((len(labels), dim)), labels) for m in modalities}
    probe_labels = rng.integers(0, n_classes, size=n_probes)
    probes = {m: EmbeddingSet(m, rng.standard_normal((n_probes, dim)), probe_labels) for m in modalities}
    tags = [str(t) for t in rng.choice(["clean", "corrupted-B"], size=n_probes)]
    return Protocol(gallery, probes, tags)


def brute_force_correct(protocol: Protocol, weights: dict[str, np.ndarray]) -> list[bool]:
    """Per-probe correctness recounted with explicit loops over gallery samples."""
    classes = sorted({int(l) for g in protocol.gallery.values() for l in g.labels})
    outcome = []
    for i in range(protocol.n_probes):
        best_label, best_score = None, -np.inf
        for label in classes:
            score = 0.0
            for m, w in weights.items():
                probe = protocol.probes[m].vectors[i]
                sims = [
                    float(np.dot(probe, g) / (np.linalg.norm(probe) * np.linalg.norm(g)))
                    for g, gl in zip(protocol.gallery[m].vectors, protocol.gallery[m].labels)
                    if gl == label
                ]
                score += w[i] * (max(sims) if sims else -1.0)
            if score > best_score:
                best_label, best_score = label, score
        outcome.append(best_label == int(protocol.probe_labels[i]))
    return outcome

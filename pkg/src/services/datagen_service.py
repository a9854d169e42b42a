"""
Parallel virtual depth-face dataset generation.

Every identity is an independent work unit seeded from (master seed,
identity index), so the files an identity produces do not depend on worker
count or completion order. Layout:

    out_dir/manifest.json
    out_dir/id_00000/e00_p00.pgm   depth, expression 0 (neutral), pose 0
    out_dir/id_00000/e00_p00.ppm   normals
"""

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator
from tqdm import tqdm

from .errors import DatasetGenerationError, ImageFormatError, ManifestError
from .model_service import MorphableModel, ShapeCoefficients, sample_coefficients, synthesize_shape
from .pnm_service import read_pgm16, read_ppm, write_pgm16, write_ppm
from .render_service import (
    DEFAULT_FAR,
    DEFAULT_NEAR,
    DEFAULT_PITCHES,
    DEFAULT_YAWS,
    MAX_DEPTH,
    Camera,
    NormalMap,
    decode_normals,
    hemisphere_cameras,
    render_views,
)

MANIFEST_NAME = "manifest.json"
PARTIAL_MANIFEST_NAME = "manifest.partial.json"


class CameraGridConfig(BaseModel):
    radius: float = Field(600.0, gt=0)
    focal: float = Field(220.0, gt=0)
    resolution: int = Field(128, gt=0)
    pitches: List[float] = Field(default_factory=lambda: list(DEFAULT_PITCHES))
    yaws: List[float] = Field(default_factory=lambda: list(DEFAULT_YAWS))
    near: float = Field(DEFAULT_NEAR, gt=0)
    far: float = Field(DEFAULT_FAR, gt=0, le=MAX_DEPTH)

    def cameras(self) -> list[Camera]:
        return hemisphere_cameras(
            radius=self.radius, focal=self.focal, res=self.resolution,
            pitches=self.pitches, yaws=self.yaws, near=self.near, far=self.far,
        )

    @property
    def n_cameras(self) -> int:
        return len(self.pitches) * len(self.yaws)


class GenConfig(BaseModel):
    n_identities: int = Field(10, ge=0)
    n_random_expressions: int = Field(40, ge=0)
    cameras: CameraGridConfig = Field(default_factory=CameraGridConfig)
    seed: int = Field(..., ge=0)
    out_dir: str
    trunc: float = Field(3.0, gt=0)

    @property
    def images_per_identity(self) -> int:
        return (1 + self.n_random_expressions) * self.cameras.n_cameras


class ManifestEntry(BaseModel):
    identity_id: int
    expression_id: int
    pose_id: int
    depth_path: str
    normal_path: str


class Manifest(BaseModel):
    config: GenConfig
    entries: List[ManifestEntry]
    total_count: int
    complete: bool = True

    @model_validator(mode="after")
    def _check_counts(self):
        if len(self.entries) != self.total_count:
            raise ValueError(f"manifest lists {len(self.entries)} entries but total_count is {self.total_count}")
        if self.complete:
            expected = self.config.n_identities * self.config.images_per_identity
            if self.total_count != expected:
                raise ValueError(f"total_count {self.total_count} breaks the count law (expected {expected})")
        return self


class Violation(BaseModel):
    path: str
    kind: str
    detail: str = ""


class VerifyReport(BaseModel):
    checked: int
    passed: int
    failed: int
    violations: List[Violation]

    @property
    def ok(self) -> bool:
        return self.failed == 0


def identity_rng(seed: int, identity: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(identity,)))


def _relative_paths(identity: int, expression: int, pose: int) -> tuple[str, str]:
    stem = f"id_{identity:05d}/e{expression:02d}_p{pose:02d}"
    return f"{stem}.pgm", f"{stem}.ppm"


def _render_identity(model: MorphableModel, config: GenConfig, identity: int) -> list[ManifestEntry]:
    rng = identity_rng(config.seed, identity)
    cameras = config.cameras.cameras()
    root = Path(config.out_dir)
    (root / f"id_{identity:05d}").mkdir(parents=True, exist_ok=True)

    identity_coeffs = sample_coefficients(rng, model, config.trunc)
    expressions = [ShapeCoefficients.neutral(model, identity_coeffs.alpha_id)]
    for _ in range(config.n_random_expressions):
        drawn = sample_coefficients(rng, model, config.trunc)
        expressions.append(ShapeCoefficients(identity_coeffs.alpha_id, drawn.alpha_exp))

    entries = []
    for expression_id, coeffs in enumerate(expressions):
        mesh = synthesize_shape(model, coeffs)
        for pose_id, (depth, normals) in enumerate(render_views(mesh, cameras)):
            depth_path, normal_path = _relative_paths(identity, expression_id, pose_id)
            comment = f"depthforge seed={config.seed} identity={identity} expression={expression_id} pose={pose_id}"
            write_pgm16(root / depth_path, depth.pixels, comment)
            write_ppm(root / normal_path, normals.pixels, comment)
            entries.append(ManifestEntry(
                identity_id=identity, expression_id=expression_id, pose_id=pose_id,
                depth_path=depth_path, normal_path=normal_path,
            ))
    return entries


def write_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    Path(path).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")


def read_manifest(path: str | os.PathLike) -> Manifest:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}")
    try:
        return Manifest.model_validate_json(text)
    except ValidationError as e:
        raise ManifestError(f"{path}: invalid manifest: {e}") from e


def generate_dataset(model: MorphableModel, config: GenConfig, threads: int = 1, progress: bool = False) -> Manifest:
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    root = Path(config.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    logging.info(
        f"Generating {config.n_identities} identities x {1 + config.n_random_expressions} expressions "
        f"x {config.cameras.n_cameras} cameras with {threads} worker(s) into {root}"
    )

    work = partial(_render_identity, model, config)
    identities = range(config.n_identities)
    entries: list[ManifestEntry] = []
    completed = 0
    started = time.perf_counter()
    executor = ProcessPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        results = executor.map(work, identities) if executor else map(work, identities)
        # map yields in identity order, whatever order the workers finish in
        for identity_entries in tqdm(results, total=config.n_identities, desc="identities", disable=not progress):
            entries.extend(identity_entries)
            completed += 1
    except OSError as e:
        partial_path = root / PARTIAL_MANIFEST_NAME
        partial_manifest = Manifest(config=config, entries=entries, total_count=len(entries), complete=False)
        try:
            write_manifest(partial_manifest, partial_path)
        except OSError:
            partial_path = None
        logging.error(f"Generation aborted after {completed} identities: {e}; partial manifest at {partial_path}")
        raise DatasetGenerationError(
            f"generation aborted after {completed} of {config.n_identities} identities: {e}",
            str(partial_path) if partial_path else None,
            completed,
        ) from e
    finally:
        if executor:
            executor.shutdown()

    elapsed = time.perf_counter() - started
    manifest = Manifest(config=config, entries=entries, total_count=len(entries))
    write_manifest(manifest, root / MANIFEST_NAME)
    rate = len(entries) / elapsed if elapsed > 0 else float("inf")
    logging.info(f"Generated {len(entries)} images in {elapsed:.2f}s ({rate:.1f} images/s)")
    return manifest


def _check_normals(normal_map: NormalMap, tolerance: float) -> Optional[Violation]:
    normals, mask = decode_normals(normal_map)
    if not np.any(mask):
        return None
    fg = normals[mask]
    deviation = np.abs(np.linalg.norm(fg, axis=1) - 1.0)
    if np.any(deviation > tolerance):
        return Violation(path="", kind="unit-norm",
                         detail=f"{int((deviation > tolerance).sum())} pixels, worst {deviation.max():.4f}")
    if np.any(fg[:, 2] > tolerance):
        return Violation(path="", kind="orientation",
                         detail=f"{int((fg[:, 2] > tolerance).sum())} pixels face away from the camera")
    return None


def verify_dataset(
    manifest: Manifest,
    root: str | os.PathLike | None = None,
    sample: Optional[int] = None,
    seed: int = 0,
    normal_tolerance: float = 0.01,
) -> VerifyReport:
    root = Path(root if root is not None else manifest.config.out_dir)
    grid = manifest.config.cameras
    entries = manifest.entries
    if sample is not None and sample < len(entries):
        picks = np.sort(np.random.default_rng(seed).choice(len(entries), size=sample, replace=False))
        entries = [entries[i] for i in picks]

    violations: list[Violation] = []
    failed = 0
    for entry in entries:
        found: list[Violation] = []
        for rel, reader in ((entry.depth_path, read_pgm16), (entry.normal_path, read_ppm)):
            path = root / rel
            if not path.exists():
                found.append(Violation(path=rel, kind="missing"))
                continue
            try:
                raster, _ = reader(path)
            except ImageFormatError as e:
                found.append(Violation(path=rel, kind="corrupt", detail=str(e)))
                continue
            if raster.shape[:2] != (grid.resolution, grid.resolution):
                found.append(Violation(path=rel, kind="dimensions", detail=f"{raster.shape[:2]}"))
                continue
            if reader is read_pgm16:
                fg = raster[raster > 0]
                if fg.size and (fg.min() < grid.near or fg.max() > grid.far):
                    found.append(Violation(path=rel, kind="depth-range",
                                           detail=f"[{fg.min()}, {fg.max()}] outside [{grid.near}, {grid.far}]"))
            else:
                problem = _check_normals(NormalMap(raster), normal_tolerance)
                if problem:
                    found.append(problem.model_copy(update={"path": rel}))
        if found:
            failed += 1
            violations.extend(found)

    report = VerifyReport(checked=len(entries), passed=len(entries) - failed, failed=failed, violations=violations)
    if report.failed:
        logging.warning(f"Verification found {report.failed} bad entries out of {report.checked}")
    else:
        logging.info(f"Verification passed for {report.checked} entries")
    return report


def diff_datasets(
    a: Manifest, b: Manifest, root_a: str | os.PathLike | None = None, root_b: str | os.PathLike | None = None
) -> list[str]:
    """Relative paths whose bytes differ between two generated datasets."""
    root_a = Path(root_a if root_a is not None else a.config.out_dir)
    root_b = Path(root_b if root_b is not None else b.config.out_dir)
    paths_a = {p for e in a.entries for p in (e.depth_path, e.normal_path)}
    paths_b = {p for e in b.entries for p in (e.depth_path, e.normal_path)}
    diffs = sorted(paths_a ^ paths_b)
    for rel in sorted(paths_a & paths_b):
        file_a, file_b = root_a / rel, root_b / rel
        if not (file_a.exists() and file_b.exists()) or file_a.read_bytes() != file_b.read_bytes():
            diffs.append(rel)
    return diffs

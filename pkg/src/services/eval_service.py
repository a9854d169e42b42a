"""
Gallery/probe identification: rank-1 evaluation, the fixed-weight
baseline, and a synthetic multi-modality embedding protocol for ablations.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field, field_validator

from .acw_service import (
    AcwTrainConfig,
    AcwTrainResult,
    ClassPrototypes,
    ConfidenceHead,
    confidence_batch,
    fuse,
    train,
)
from .embedding_service import EmbeddingSet, unit_rows
from .errors import ModalityMissingError

CLEAN_TAG = "clean"
CORRUPTED_TAG = "corrupted-B"
# score of a class with no gallery sample in a modality
MISSING_CLASS_SCORE = -1.0


class ToyConfig(BaseModel):
    n_classes: int = Field(50, gt=0)
    dim: int = Field(64, gt=0)
    samples_per_class: int = Field(20, gt=0)
    noise_sigma_clean: float = Field(0.15, ge=0)
    noise_sigma_corrupt: float = Field(1.5, ge=0)
    corrupt_fraction: float = Field(0.3, ge=0, le=1)
    degradation_bias: float = Field(1.0, ge=0)
    modalities: List[str] = Field(default_factory=lambda: ["rgb", "depth"])
    seed: int = Field(..., ge=0)

    @field_validator("modalities")
    @classmethod
    def _check_modalities(cls, value: List[str]) -> List[str]:
        if not value:
            raise ValueError("at least one modality is required")
        if len(set(value)) != len(value):
            raise ValueError(f"duplicate modality names: {value}")
        return value

    @property
    def corrupted_modality(self) -> str:
        """The second modality ("B"), or the only one."""
        return self.modalities[1] if len(self.modalities) > 1 else self.modalities[0]


@dataclass(eq=False)
class Protocol:
    gallery: Dict[str, EmbeddingSet]
    probes: Dict[str, EmbeddingSet]
    tags: Optional[List[str]] = None

    def __post_init__(self):
        self.validate()

    @property
    def modalities(self) -> list[str]:
        return list(self.probes)

    @property
    def n_probes(self) -> int:
        return len(next(iter(self.probes.values())))

    @property
    def probe_labels(self) -> np.ndarray:
        return next(iter(self.probes.values())).labels

    @property
    def classes(self) -> np.ndarray:
        """Sorted identity labels enrolled in any gallery modality."""
        return np.unique(np.concatenate([g.labels for g in self.gallery.values()]))

    def probe_tags(self) -> list[str]:
        return list(self.tags) if self.tags is not None else [CLEAN_TAG] * self.n_probes

    def validate(self) -> None:
        if not self.probes:
            raise ValueError("protocol has no probe modality")
        if not self.gallery or all(len(g) == 0 for g in self.gallery.values()):
            raise ValueError("protocol gallery is empty")
        labels = self.probe_labels
        for modality, probes in self.probes.items():
            if not np.array_equal(probes.labels, labels):
                raise ValueError(f"probe modality '{modality}' is not sample-aligned")
        if self.tags is not None and len(self.tags) != len(labels):
            raise ValueError(f"{len(self.tags)} tags for {len(labels)} probes")
        unknown = np.setdiff1d(labels, self.classes)
        if unknown.size:
            raise ValueError(f"probe labels missing from the gallery: {unknown[:10].tolist()}")


@dataclass(eq=False)
class ToyData:
    protocol: Protocol
    train: Dict[str, EmbeddingSet]
    train_tags: List[str] = field(default_factory=list)


class FusionMode(BaseModel):
    kind: Literal["acw", "fixed", "single"]
    weights: Optional[List[float]] = None
    modality: Optional[str] = None

    @classmethod
    def parse(cls, text: str) -> "FusionMode":
        """Accepts "acw", "fixed", "fixed:1,0" or "single:rgb"."""
        kind, _, arg = text.partition(":")
        if kind == "acw" and not arg:
            return cls(kind="acw")
        if kind == "fixed":
            try:
                weights = [float(w) for w in arg.split(",")] if arg else None
            except ValueError:
                raise ValueError(f"bad fixed weights {arg!r}")
            return cls(kind="fixed", weights=weights)
        if kind == "single" and arg:
            return cls(kind="single", modality=arg)
        raise ValueError(f"unknown fusion mode {text!r}; expected acw, fixed[:w1,w2,...] or single:<modality>")

    @property
    def label(self) -> str:
        if self.kind == "fixed" and self.weights is not None:
            return "fixed:" + ",".join(f"{w:g}" for w in self.weights)
        if self.kind == "single":
            return f"single:{self.modality}"
        return self.kind


class ProbeRecord(BaseModel):
    id: int
    label: int
    prediction: int
    confidences: Dict[str, float]
    margin: float
    tag: str
    correct: bool


class SubsetStats(BaseModel):
    count: int
    correct: int
    rank1: float


class EvalReport(BaseModel):
    config: Optional[dict] = None
    mode: str
    overall_rank1: float
    subsets: Dict[str, SubsetStats]
    probes: List[ProbeRecord]


@dataclass(eq=False)
class AblationResult:
    reports: Dict[str, EvalReport]
    # tag -> modality -> mean ACW confidence over the probes with that tag
    confidence_by_tag: Dict[str, Dict[str, float]]
    training: AcwTrainResult


def similarity_matrix(
    probes: np.ndarray, gallery: Mapping[str, EmbeddingSet], modality: str, classes: Optional[np.ndarray] = None
) -> np.ndarray:
    """(N, C) cosine similarities, max-pooled over each identity's gallery samples."""
    if modality not in gallery or len(gallery[modality]) == 0:
        raise ModalityMissingError(modality, "no gallery")
    enrolled = gallery[modality]
    classes = np.unique(enrolled.labels) if classes is None else np.asarray(classes)
    cols = np.searchsorted(classes, enrolled.labels)
    if np.any(cols >= len(classes)) or np.any(classes[np.minimum(cols, len(classes) - 1)] != enrolled.labels):
        raise ValueError(f"{modality} gallery holds labels outside the class list")

    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    sims = unit_rows(probes) @ unit_rows(enrolled.vectors).T
    out = np.full((probes.shape[0], len(classes)), MISSING_CLASS_SCORE)
    np.maximum.at(out.T, cols, sims.T)
    return out


def per_identity_similarity(
    probe: np.ndarray, gallery: Mapping[str, EmbeddingSet], modality: str, classes: Optional[np.ndarray] = None
) -> np.ndarray:
    return similarity_matrix(np.asarray(probe)[None, :], gallery, modality, classes)[0]


def baseline_fixed_fusion(similarities: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    if len(similarities) != len(weights):
        raise ValueError(f"{len(similarities)} similarity vectors but {len(weights)} weights")
    if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
        raise ValueError(f"weights must be non-negative with at least one positive, got {list(weights)}")
    return fuse(similarities, weights)


def rank1(records: Sequence[ProbeRecord]) -> float:
    if not records:
        raise ValueError("rank1 needs at least one probe record")
    return 100.0 * sum(r.correct for r in records) / len(records)


def _margins(fused: np.ndarray) -> np.ndarray:
    if fused.shape[1] < 2:
        return np.zeros(fused.shape[0])
    top2 = -np.partition(-fused, 1, axis=1)[:, :2]
    return top2[:, 0] - top2[:, 1]


def evaluate(
    protocol: Protocol,
    heads: Optional[Mapping[str, ConfidenceHead]],
    mode: FusionMode,
    config: Optional[dict] = None,
) -> EvalReport:
    if mode.kind == "single":
        if mode.modality not in protocol.probes:
            raise ModalityMissingError(mode.modality, "no probes")
        modalities = [mode.modality]
    else:
        modalities = protocol.modalities

    classes = protocol.classes
    n = protocol.n_probes
    similarities = [similarity_matrix(protocol.probes[m].vectors, protocol.gallery, m, classes) for m in modalities]

    if mode.kind == "acw":
        for m in modalities:
            if heads is None or m not in heads:
                raise ModalityMissingError(m, "no confidence head")
        weights = [confidence_batch(heads[m], protocol.probes[m].vectors) for m in modalities]
        fused = fuse(similarities, weights)
    elif mode.kind == "fixed":
        constants = mode.weights if mode.weights is not None else [1.0] * len(modalities)
        fused = baseline_fixed_fusion(similarities, constants)
        weights = [np.full(n, float(w)) for w in constants]
    else:
        fused = similarities[0]
        weights = [np.ones(n)]

    predictions = classes[np.argmax(fused, axis=1)]  # first maximum: lowest index wins ties
    margins = _margins(fused)
    labels = protocol.probe_labels
    tags = protocol.probe_tags()
    records = [
        ProbeRecord(
            id=i,
            label=int(labels[i]),
            prediction=int(predictions[i]),
            confidences={m: float(w[i]) for m, w in zip(modalities, weights)},
            margin=float(margins[i]),
            tag=tags[i],
            correct=bool(predictions[i] == labels[i]),
        )
        for i in range(n)
    ]

    subsets: dict[str, SubsetStats] = {}
    for tag in sorted(set(tags)):
        members = [r for r in records if r.tag == tag]
        correct = sum(r.correct for r in members)
        subsets[tag] = SubsetStats(count=len(members), correct=correct, rank1=100.0 * correct / len(members))

    report = EvalReport(config=config, mode=mode.label, overall_rank1=rank1(records), subsets=subsets, probes=records)
    per_tag = ", ".join(f"{t}={s.rank1:.2f}%" for t, s in subsets.items())
    logging.info(f"Rank-1 [{report.mode}]: {report.overall_rank1:.2f}% ({per_tag})")
    return report


def _toy_split(
    rng: np.random.Generator, config: ToyConfig, means: Mapping[str, np.ndarray], drift: np.ndarray, modality: str
) -> tuple[Dict[str, EmbeddingSet], List[str]]:
    labels = np.repeat(np.arange(config.n_classes), config.samples_per_class)
    n = len(labels)
    n_corrupt = int(round(config.corrupt_fraction * n))
    corrupted = np.zeros(n, dtype=bool)
    corrupted[rng.choice(n, size=n_corrupt, replace=False)] = True

    sets = {}
    for m in config.modalities:
        samples = means[m][labels] + config.noise_sigma_clean * rng.standard_normal((n, config.dim))
        if m == modality and n_corrupt:
            noise = config.noise_sigma_corrupt * rng.standard_normal((n_corrupt, config.dim))
            samples[corrupted] = means[m][labels[corrupted]] + noise + drift
        sets[m] = EmbeddingSet(m, unit_rows(samples), labels)
    tags = [CORRUPTED_TAG if flag else CLEAN_TAG for flag in corrupted]
    return sets, tags


def synth_toy_embeddings(config: ToyConfig) -> ToyData:
    """Seeded gallery/probe/train embeddings with one degraded modality.

    Class means are uniform on the unit sphere per modality. The gallery is
    one clean sample per class; the train and probe splits hold
    samples_per_class samples per class, of which corrupt_fraction carry
    heavy noise plus a shared drift in the corrupted modality.
    """
    rng = np.random.default_rng(config.seed)
    dim = config.dim
    means = {m: unit_rows(rng.standard_normal((config.n_classes, dim))) for m in config.modalities}
    direction = unit_rows(rng.standard_normal(dim))
    drift = (
        config.degradation_bias * np.sqrt(dim) * (config.noise_sigma_corrupt - config.noise_sigma_clean) * direction
    )

    classes = np.arange(config.n_classes)
    gallery = {
        m: EmbeddingSet(m, unit_rows(means[m] + config.noise_sigma_clean * rng.standard_normal(means[m].shape)), classes)
        for m in config.modalities
    }
    modality = config.corrupted_modality
    train_sets, train_tags = _toy_split(rng, config, means, drift, modality)
    probes, probe_tags = _toy_split(rng, config, means, drift, modality)
    logging.info(
        f"Toy protocol: {config.n_classes} classes, {len(probe_tags)} probes, "
        f"{probe_tags.count(CORRUPTED_TAG)} corrupted in '{modality}'"
    )
    return ToyData(Protocol(gallery, probes, probe_tags), train_sets, train_tags)


def run_ablation(toy_config: ToyConfig, train_config: AcwTrainConfig) -> AblationResult:
    """Single-modality, fixed equal-weight and ACW fusion over one toy protocol."""
    data = synth_toy_embeddings(toy_config)
    protocol = data.protocol
    frozen = not train_config.train_prototypes
    prototypes = {m: ClassPrototypes.from_neutral(protocol.gallery[m], frozen) for m in toy_config.modalities}
    training = train(data.train, prototypes, train_config, toy_config.seed)

    echo = {"toy": toy_config.model_dump(), "train": train_config.model_dump(by_alias=True)}
    modes = [FusionMode(kind="single", modality=m) for m in toy_config.modalities]
    modes += [FusionMode(kind="fixed", weights=[1.0] * len(toy_config.modalities)), FusionMode(kind="acw")]
    reports = {mode.label: evaluate(protocol, training.heads, mode, echo) for mode in modes}

    acw = reports["acw"]
    confidence_by_tag: dict[str, dict[str, float]] = {}
    for tag in acw.subsets:
        members = [r for r in acw.probes if r.tag == tag]
        confidence_by_tag[tag] = {
            m: float(np.mean([r.confidences[m] for r in members])) for m in toy_config.modalities
        }
    return AblationResult(reports=reports, confidence_by_tag=confidence_by_tag, training=training)


def format_report_table(reports: Mapping[str, EvalReport]) -> str:
    tags = sorted({t for r in reports.values() for t in r.subsets})
    header = ["mode", "overall"] + tags
    rows = [header]
    for name, report in reports.items():
        row = [name, f"{report.overall_rank1:.2f}"]
        row += [f"{report.subsets[t].rank1:.2f}" if t in report.subsets else "-" for t in tags]
        rows.append(row)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for k, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"

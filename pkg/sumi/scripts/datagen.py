#!/usr/bin/env python3
"""
Synthetic two-modality classification data, source-model training, feature
space corruptions and mixed test streams.

Corruption kinds:
  none              identity
  noise-u1/noise-u2 weak OOD: Gaussian noise on one modality
  both              strong OOD: noise on both modalities
  miss-u1/miss-u2   strong OOD: one modality replaced by the zero vector
  mix               strong OOD: one modality missing (side picked by seed),
                    the other noised

Noise std is 0.4 * severity * (task noise scale). Every random draw comes
from a numpy Generator built from a named seed.
"""

import logging
import math
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from adapt import Adam, evaluate
from model import MultimodalClassifier, MultimodalSample, ModelSpec, stack_samples
from numkit import ComputeGraph

logger = logging.getLogger(__name__)

CORRUPTION_KINDS = ("none", "noise-u1", "noise-u2", "both", "miss-u1", "miss-u2", "mix")
WEAK_KINDS = ("noise-u1", "noise-u2")
STRONG_KINDS = ("both", "miss-u1", "miss-u2", "mix")
MAX_SEVERITY = 5
NOISE_PER_SEVERITY = 0.4
MIXED_SEVERITY = "mixed"

ACCURACY_FLOOR = 0.9

SAMPLES_HEADER = "# sumi-samples v1"
SAMPLES_HEADER_PATTERN = re.compile(r"^# sumi-samples v1 c=(\d+) d1=(\d+) d2=(\d+)$")

# Salts that keep the per-purpose random streams of one seed independent
_TRAIN_SALT = 0
_TEST_SALT = 1
_CENTER_SALT = 2
_STREAM_SALT = 3
_SHUFFLE_SALT = 4


class SourceTrainingError(RuntimeError):
    """Source training finished below the clean-accuracy floor."""

    def __init__(self, accuracy: float, floor: float, diagnostics: Dict):
        self.accuracy = accuracy
        self.floor = floor
        self.diagnostics = diagnostics
        super().__init__(
            f"source model reached clean accuracy {accuracy:.4f} < floor {floor:.2f} "
            f"(epochs={diagnostics.get('epochs')}, final loss={diagnostics.get('final_loss')})")


@dataclass(frozen=True)
class TaskSpec:
    num_classes: int = 8
    input_dims: Tuple[int, int] = (16, 16)
    class_separation: float = 1.0
    noise_scale: float = 1.0
    informativeness: Tuple[float, float] = (1.0, 1.0)
    n_train: int = 4000
    n_test: int = 2000
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "informativeness", tuple(float(w) for w in self.informativeness))
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_dims) != 2 or min(self.input_dims) < 1:
            raise ValueError(f"input_dims must be two dims >= 1, got {self.input_dims}")
        if len(self.informativeness) != 2 or min(self.informativeness) <= 0:
            raise ValueError(f"informativeness weights must be two values > 0, got {self.informativeness}")
        if self.noise_scale <= 0 or self.class_separation <= 0:
            raise ValueError("noise_scale and class_separation must be > 0")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")

    def model_spec(self, **overrides) -> ModelSpec:
        return ModelSpec(input_dims=self.input_dims, num_classes=self.num_classes, **overrides)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["input_dims"] = list(self.input_dims)
        data["informativeness"] = list(self.informativeness)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "TaskSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown task keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class CorruptionKind:
    kind: str = "none"
    severity: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption {self.kind!r}, expected one of {CORRUPTION_KINDS}")
        if not 0 <= self.severity <= MAX_SEVERITY:
            raise ValueError(f"severity must lie in [0, {MAX_SEVERITY}], got {self.severity}")
        if (self.kind == "none") != (self.severity == 0) and self.kind not in ("miss-u1", "miss-u2"):
            raise ValueError(f"severity 0 goes with kind none only (got {self.kind}@{self.severity})")

    @property
    def tag(self) -> str:
        return "none" if self.kind == "none" else f"{self.kind}@{self.severity}"

    @property
    def is_strong(self) -> bool:
        return self.kind in STRONG_KINDS


@dataclass(frozen=True)
class StreamSpec:
    """Mixture of corruption kinds over the clean test set.

    severity is a level 1..5 or "mixed" (levels assigned round-robin within
    each kind). order "shuffled" interleaves everything; "weak-first" puts
    clean and weak-OOD samples before strong-OOD ones.
    """
    ratios: Tuple[Tuple[str, float], ...] = (("none", 1.0),)
    severity: object = 5
    n_samples: Optional[int] = None
    seed: int = 0
    order: str = "shuffled"
    name: Optional[str] = None

    def __post_init__(self):
        ratios = self.ratios.items() if isinstance(self.ratios, dict) else self.ratios
        ratios = tuple((str(k), float(r)) for k, r in ratios)
        object.__setattr__(self, "ratios", ratios)
        for kind, ratio in ratios:
            if kind not in CORRUPTION_KINDS:
                raise ValueError(f"unknown corruption {kind!r}, expected one of {CORRUPTION_KINDS}")
            if ratio < 0:
                raise ValueError(f"ratio for {kind} must be >= 0, got {ratio}")
        if len({k for k, _ in ratios}) != len(ratios):
            raise ValueError(f"duplicate kinds in {ratios}")
        if not ratios or abs(sum(r for _, r in ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {sum(r for _, r in ratios)}")
        if self.severity != MIXED_SEVERITY and not 1 <= int(self.severity) <= MAX_SEVERITY:
            raise ValueError(f"severity must be 1..{MAX_SEVERITY} or {MIXED_SEVERITY!r}, got {self.severity}")
        if self.order not in ("shuffled", "weak-first"):
            raise ValueError(f"order must be 'shuffled' or 'weak-first', got {self.order!r}")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        mixture = ",".join(f"{kind}:{ratio:g}" for kind, ratio in self.ratios)
        return f"{mixture}@{self.severity}"

    @property
    def mode(self) -> str:
        """'wild' when any strong-OOD kind has positive share, else 'weak'."""
        return "wild" if any(k in STRONG_KINDS and r > 0 for k, r in self.ratios) else "weak"

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["ratios"] = {k: r for k, r in self.ratios}
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "StreamSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown stream keys: {sorted(unknown)}")
        return cls(**data)


def parse_stream_spec(text: str, seed: int = 0) -> StreamSpec:
    """Parse "noise-u1:0.5,mix:0.5@5" ("@mixed" for mixed severity; a bare kind means ratio 1).

    "strong=0.3@5" is shorthand for ratio_stream(0.3, 5).
    """
    text = text.strip()
    severity: object = 5
    if "@" in text:
        text, level = text.rsplit("@", 1)
        severity = MIXED_SEVERITY if level == MIXED_SEVERITY else int(level)
    if text.startswith("strong="):
        return ratio_stream(float(text[len("strong="):]), severity, seed)
    ratios = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        kind, _, ratio = part.partition(":")
        ratios.append((kind.strip(), float(ratio) if ratio else 1.0))
    return StreamSpec(ratios=tuple(ratios), severity=severity, seed=seed)


def ratio_stream(strong_ratio: float, severity: object = 5, seed: int = 0) -> StreamSpec:
    """Strong share split evenly over both/miss-u1/miss-u2/mix, the rest over noise-u1/noise-u2."""
    if not 0.0 <= strong_ratio <= 1.0:
        raise ValueError(f"strong ratio must lie in [0, 1], got {strong_ratio}")
    weak = (1.0 - strong_ratio) / len(WEAK_KINDS)
    strong = strong_ratio / len(STRONG_KINDS)
    ratios = [(k, weak) for k in WEAK_KINDS if weak > 0] + [(k, strong) for k in STRONG_KINDS if strong > 0]
    return StreamSpec(ratios=tuple(ratios), severity=severity, seed=seed,
                      name=f"strong={strong_ratio:g}@{severity}")


# -----------------------------------------------------------------------------
# Task and source model
# -----------------------------------------------------------------------------


def _class_centers(spec: TaskSpec) -> List[np.ndarray]:
    rng = np.random.default_rng([spec.seed, _CENTER_SALT])
    return [rng.normal(0.0, spec.class_separation * weight, size=(spec.num_classes, dim))
            for dim, weight in zip(spec.input_dims, spec.informativeness)]


def _draw(spec: TaskSpec, centers: List[np.ndarray], n: int, salt: int) -> List[MultimodalSample]:
    rng = np.random.default_rng([spec.seed, salt])
    labels = np.arange(n) % spec.num_classes
    rng.shuffle(labels)
    x_u1 = centers[0][labels] + rng.normal(0.0, spec.noise_scale, size=(n, spec.input_dims[0]))
    x_u2 = centers[1][labels] + rng.normal(0.0, spec.noise_scale, size=(n, spec.input_dims[1]))
    return [MultimodalSample(x_u1[i], x_u2[i], label=int(labels[i]), domain="none") for i in range(n)]


def make_task(spec: TaskSpec) -> Tuple[List[MultimodalSample], List[MultimodalSample]]:
    """Gaussian class-conditional clusters per modality; returns (train, clean test)."""
    centers = _class_centers(spec)
    return _draw(spec, centers, spec.n_train, _TRAIN_SALT), _draw(spec, centers, spec.n_test, _TEST_SALT)


def cross_entropy_node(graph: ComputeGraph, p: int, labels: np.ndarray, num_classes: int) -> int:
    """Mean over rows of -log p[label]."""
    onehot = np.eye(num_classes)[labels]
    picked = graph.sum(graph.mul(graph.constant(onehot), graph.log(p)))
    return graph.scale(picked, -1.0 / len(labels))


def train_source(
    model_spec: ModelSpec,
    train: Sequence[MultimodalSample],
    epochs: int = 30,
    lr: float = 3e-3,
    seed: int = 0,
    batch_size: int = 64,
    test: Optional[Sequence[MultimodalSample]] = None,
    min_accuracy: Optional[float] = ACCURACY_FLOOR,
) -> Tuple[MultimodalClassifier, float]:
    """Full-parameter supervised training of the multimodal path.

    Returns (model, clean accuracy on test, or on train when no test set is
    given). Raises SourceTrainingError when min_accuracy is set and not met.
    """
    if not train:
        raise ValueError("train set is empty")
    model = MultimodalClassifier.initialize(model_spec, seed)
    optimizer = Adam(lr=lr)
    rng = np.random.default_rng([seed, _SHUFFLE_SALT])
    labels = np.array([s.label for s in train])
    final_loss = None

    for epoch in range(epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), batch_size):
            idx = order[start:start + batch_size]
            trace = model.trace(*stack_samples([train[i] for i in idx]))
            graph = trace.graph
            graph.set_output(cross_entropy_node(graph, trace.nodes["p_m"], labels[idx], model_spec.num_classes))
            losses.append(float(graph.evaluate(trace.bindings)))
            optimizer.step(model.params, graph.gradient(model.all_params()))
        final_loss = float(np.mean(losses))
        logger.debug("source epoch %d/%d loss=%.4f", epoch + 1, epochs, final_loss)

    accuracy = evaluate(model, test if test else train)
    logger.info("source model: %d epochs, clean accuracy %.4f", epochs, accuracy)
    if min_accuracy is not None and accuracy < min_accuracy:
        raise SourceTrainingError(accuracy, min_accuracy, {
            "epochs": epochs, "lr": lr, "seed": seed, "final_loss": final_loss,
            "n_train": len(train), "spec": model_spec.to_dict(),
        })
    return model, accuracy


# -----------------------------------------------------------------------------
# Corruptions and streams
# -----------------------------------------------------------------------------


def noise_std(severity: int, noise_scale: float) -> float:
    return NOISE_PER_SEVERITY * severity * noise_scale


def corrupt(sample: MultimodalSample, kind: CorruptionKind, seed, noise_scale: float = 1.0) -> MultimodalSample:
    """Apply one corruption; labels and dimensions never change."""
    if kind.kind == "none":
        return sample
    rng = np.random.default_rng(seed)
    std = noise_std(kind.severity, noise_scale)
    x = {"u1": sample.x_u1.copy(), "u2": sample.x_u2.copy()}

    if kind.kind == "mix":
        missing = "u1" if rng.integers(2) == 0 else "u2"
        noised = ("u2",) if missing == "u1" else ("u1",)
    else:
        missing = {"miss-u1": "u1", "miss-u2": "u2"}.get(kind.kind)
        noised = {"noise-u1": ("u1",), "noise-u2": ("u2",), "both": ("u1", "u2")}.get(kind.kind, ())

    for modality in noised:
        x[modality] = x[modality] + rng.normal(0.0, std, size=x[modality].shape)
    if missing is not None:
        x[missing] = np.zeros_like(x[missing])
    return MultimodalSample(x["u1"], x["u2"], label=sample.label, domain=kind.tag)


def _quotas(ratios: Sequence[Tuple[str, float]], n: int) -> Dict[str, int]:
    """Largest-remainder rounding of ratio * n; ties go to the earlier kind."""
    raw = [(kind, ratio * n) for kind, ratio in ratios]
    counts = {kind: int(math.floor(share)) for kind, share in raw}
    short = n - sum(counts.values())
    by_remainder = sorted(range(len(raw)), key=lambda i: (-(raw[i][1] - math.floor(raw[i][1])), i))
    for i in by_remainder[:short]:
        counts[raw[i][0]] += 1
    return counts


def make_stream(test: Sequence[MultimodalSample], spec: StreamSpec, noise_scale: float = 1.0) -> List[MultimodalSample]:
    """Corrupt the test set by quota and order it; labels and domain tags kept for scoring."""
    if not test:
        raise ValueError("test set is empty")
    n = len(test) if spec.n_samples is None else min(spec.n_samples, len(test))
    rng = np.random.default_rng([spec.seed, _STREAM_SALT])
    picked = rng.permutation(len(test))[:n]

    assignments: List[CorruptionKind] = []
    for kind, count in _quotas(spec.ratios, n).items():
        for j in range(count):
            if kind == "none":
                assignments.append(CorruptionKind())
            elif spec.severity == MIXED_SEVERITY:
                assignments.append(CorruptionKind(kind, 1 + j % MAX_SEVERITY))
            else:
                assignments.append(CorruptionKind(kind, int(spec.severity)))

    seeds = rng.integers(0, 2**63 - 1, size=n)
    stream = [corrupt(test[i], kind, int(s), noise_scale) for i, kind, s in zip(picked, assignments, seeds)]
    order = rng.permutation(n)
    stream = [stream[i] for i in order]
    if spec.order == "weak-first":
        strong = {k.tag for k in assignments if k.is_strong}
        stream = [s for s in stream if s.domain not in strong] + [s for s in stream if s.domain in strong]
    logger.debug("stream %s: %d samples", spec.label, len(stream))
    return stream


# -----------------------------------------------------------------------------
# Columnar text format
# -----------------------------------------------------------------------------


def write_samples(path, samples: Sequence[MultimodalSample], num_classes: int) -> Path:
    """Header line, then one CSV row per sample: label, domain, u1 values, u2 values."""
    if not samples:
        raise ValueError("no samples to write")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d1, d2 = samples[0].x_u1.shape[0], samples[0].x_u2.shape[0]
    with open(path, "w") as f:
        f.write(f"{SAMPLES_HEADER} c={num_classes} d1={d1} d2={d2}\n")
        for s in samples:
            label = "" if s.label is None else str(s.label)
            values = ",".join(repr(float(v)) for v in np.concatenate([s.x_u1, s.x_u2]))
            f.write(f"{label},{s.domain or ''},{values}\n")
    return path


def read_samples(path) -> Tuple[List[MultimodalSample], int]:
    """Inverse of write_samples; returns (samples, class count)."""
    path = Path(path)
    with open(path) as f:
        header = f.readline().rstrip("\n")
        match = SAMPLES_HEADER_PATTERN.match(header)
        if not match:
            raise ValueError(f"{path}: not a sumi samples file (header {header!r})")
        num_classes, d1, d2 = (int(g) for g in match.groups())
        samples = []
        for lineno, line in enumerate(f, start=2):
            cells = line.rstrip("\n").split(",")
            if len(cells) != 2 + d1 + d2:
                raise ValueError(f"{path}:{lineno}: expected {2 + d1 + d2} fields, got {len(cells)}")
            values = np.array([float(v) for v in cells[2:]])
            samples.append(MultimodalSample(
                values[:d1], values[d1:],
                label=int(cells[0]) if cells[0] else None,
                domain=cells[1] or None,
            ))
    return samples, num_classes

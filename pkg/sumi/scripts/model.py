#!/usr/bin/env python3
"""
Toy two-modality classifier: one encoder per modality, concatenation fusion
and a linear prediction head.

Encoder block: linear -> layer norm (learnable scale/shift) -> nonlinearity,
stacked twice. The unimodal prediction for modality i applies the same head
to [h_ui, 0], i.e. the other representation is zero-masked.

Only the layer-norm scale/shift tensors are adaptable.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from numkit import ACTIVATIONS, ComputeGraph, ParamSet
from objective import entropy_node

logger = logging.getLogger(__name__)

MODALITIES = ("u1", "u2")
ENCODER_BLOCKS = 2
NORM_SUFFIXES = (".norm.scale", ".norm.shift")

CHECKPOINT_FORMAT = "sumi-checkpoint"
# 2: training shuffle has its own salt
CHECKPOINT_VERSION = 2


class ModelError(Exception):
    """Base class for model errors."""


class DimensionError(ModelError, ValueError):
    """Input feature width does not match the model spec."""


class CheckpointError(ModelError):
    """Checkpoint file is missing, malformed or from another format version."""


@dataclass
class MultimodalSample:
    """Paired per-modality feature vectors; label and domain are for scoring only."""
    x_u1: np.ndarray
    x_u2: np.ndarray
    label: Optional[int] = None
    domain: Optional[str] = None

    def __post_init__(self):
        self.x_u1 = np.asarray(self.x_u1, dtype=np.float64)
        self.x_u2 = np.asarray(self.x_u2, dtype=np.float64)

    def modality(self, name: str) -> np.ndarray:
        return self.x_u1 if name == "u1" else self.x_u2


def stack_samples(samples: Sequence[MultimodalSample]) -> Tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise ValueError("cannot stack an empty batch")
    return (np.stack([s.x_u1 for s in samples]), np.stack([s.x_u2 for s in samples]))


@dataclass(frozen=True)
class ModelSpec:
    input_dims: Tuple[int, int] = (16, 16)
    hidden_dim: int = 64
    representation_dim: int = 32
    num_classes: int = 8
    nonlinearity: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if len(self.input_dims) != 2 or min(self.input_dims) < 1:
            raise ValueError(f"input_dims must be two dims >= 1, got {self.input_dims}")
        if self.hidden_dim < 1 or self.representation_dim < 1:
            raise ValueError("hidden_dim and representation_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.nonlinearity not in ACTIVATIONS:
            raise ValueError(f"nonlinearity must be one of {ACTIVATIONS}, got {self.nonlinearity!r}")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["input_dims"] = list(self.input_dims)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise KeyError(f"unknown model keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class ForwardOutputs:
    """Forward quantities for a batch (rows) or, via row(), a single sample."""
    h_u1: np.ndarray
    h_u2: np.ndarray
    h: np.ndarray
    logits_m: np.ndarray
    p_m: np.ndarray
    p_u1: np.ndarray
    p_u2: np.ndarray
    ent_m: np.ndarray
    ent_u1: np.ndarray
    ent_u2: np.ndarray
    logits_u1: Optional[np.ndarray] = None
    logits_u2: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.h.shape[0]) if self.h.ndim == 2 else 1

    def row(self, i: int) -> "ForwardOutputs":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        return ForwardOutputs(**{
            name: (None if value is None else (float(value[i]) if value.ndim == 1 else value[i]))
            for name, value in values.items()
        })

    @property
    def entropies(self) -> np.ndarray:
        """(n, 3) columns Ent_m, Ent_u1, Ent_u2."""
        return np.stack([np.atleast_1d(self.ent_m), np.atleast_1d(self.ent_u1),
                         np.atleast_1d(self.ent_u2)], axis=-1)

    def predictions(self) -> np.ndarray:
        # argmax breaks ties toward the lowest class index
        return np.atleast_2d(self.p_m).argmax(axis=-1)


@dataclass
class Trace:
    """A traced batch: the graph, named node ids, and evaluated outputs."""
    graph: ComputeGraph
    nodes: Dict[str, int]
    outputs: ForwardOutputs
    bindings: Dict[str, np.ndarray] = field(repr=False, default_factory=dict)


class MultimodalClassifier:
    """Parameters and graph construction for the toy classifier."""

    def __init__(self, spec: ModelSpec, params: Dict[str, np.ndarray], seed: Optional[int] = None):
        self.spec = spec
        self.params = params
        self.seed = seed
        expected = set(self.parameter_shapes(spec))
        if set(params) != expected:
            missing = sorted(expected - set(params))
            extra = sorted(set(params) - expected)
            raise ModelError(f"parameter names do not match spec (missing {missing}, extra {extra})")
        self._adaptable = [name for name in params if name.endswith(NORM_SUFFIXES)]

    # -- construction -------------------------------------------------------

    @staticmethod
    def parameter_shapes(spec: ModelSpec) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for modality, in_dim in zip(MODALITIES, spec.input_dims):
            widths = [in_dim, spec.hidden_dim, spec.representation_dim]
            for block in range(1, ENCODER_BLOCKS + 1):
                prefix = f"{modality}.block{block}"
                fan_in, fan_out = widths[block - 1], widths[block]
                shapes[f"{prefix}.linear.weight"] = (fan_out, fan_in)
                shapes[f"{prefix}.linear.bias"] = (fan_out,)
                shapes[f"{prefix}.norm.scale"] = (fan_out,)
                shapes[f"{prefix}.norm.shift"] = (fan_out,)
        shapes["head.weight"] = (spec.num_classes, 2 * spec.representation_dim)
        shapes["head.bias"] = (spec.num_classes,)
        return shapes

    @classmethod
    def initialize(cls, spec: ModelSpec, seed: int) -> "MultimodalClassifier":
        """He-scaled Gaussian weights, zero biases, unit scale, zero shift."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in cls.parameter_shapes(spec).items():
            if name.endswith(".weight"):
                params[name] = rng.normal(0.0, np.sqrt(2.0 / shape[1]), size=shape)
            elif name.endswith(".norm.scale"):
                params[name] = np.ones(shape)
            else:
                params[name] = np.zeros(shape)
        return cls(spec, params, seed=seed)

    def copy(self) -> "MultimodalClassifier":
        return MultimodalClassifier(self.spec, {k: v.copy() for k, v in self.params.items()}, seed=self.seed)

    # -- parameters ---------------------------------------------------------

    def adaptable_params(self) -> ParamSet:
        """Layer-norm scale/shift of both encoders adaptable; everything else frozen."""
        return ParamSet(self.params, adaptable=self._adaptable)

    def all_params(self) -> ParamSet:
        """Every tensor adaptable; used for supervised source training."""
        return ParamSet(self.params, adaptable=list(self.params))

    # -- graph --------------------------------------------------------------

    def _encoder(self, graph: ComputeGraph, x: int, modality: str) -> int:
        for block in range(1, ENCODER_BLOCKS + 1):
            prefix = f"{modality}.block{block}"
            x = graph.matmul(x, graph.input(f"{prefix}.linear.weight"))
            x = graph.bias_add(x, graph.input(f"{prefix}.linear.bias"))
            x = graph.layer_norm(x, graph.input(f"{prefix}.norm.scale"), graph.input(f"{prefix}.norm.shift"))
            x = graph.activation(x, self.spec.nonlinearity)
        return x

    def _head(self, graph: ComputeGraph, h: int) -> int:
        return graph.bias_add(graph.matmul(h, graph.input("head.weight")), graph.input("head.bias"))

    def build(self, graph: ComputeGraph, x_u1: int, x_u2: int) -> Dict[str, int]:
        """Add the forward pass to graph; returns node ids by name."""
        nodes = {"h_u1": self._encoder(graph, x_u1, "u1"), "h_u2": self._encoder(graph, x_u2, "u2")}
        nodes["h"] = graph.concat(nodes["h_u1"], nodes["h_u2"])
        nodes["logits_m"] = self._head(graph, nodes["h"])
        nodes["logits_u1"] = self._head(graph, graph.concat(nodes["h_u1"], graph.zeros_like(nodes["h_u2"])))
        nodes["logits_u2"] = self._head(graph, graph.concat(graph.zeros_like(nodes["h_u1"]), nodes["h_u2"]))
        for path in ("m", "u1", "u2"):
            nodes[f"p_{path}"] = graph.softmax(nodes[f"logits_{path}"])
            nodes[f"ent_{path}"] = entropy_node(graph, nodes[f"p_{path}"])
        return nodes

    def _check_width(self, x: np.ndarray, index: int):
        expected = self.spec.input_dims[index]
        if x.shape[-1] != expected:
            raise DimensionError(
                f"modality {MODALITIES[index]} has {x.shape[-1]} features, model expects {expected}")

    def trace(self, x_u1: np.ndarray, x_u2: np.ndarray) -> Trace:
        """Build and evaluate the forward graph for a (n, d) batch or single vectors."""
        x_u1 = np.asarray(x_u1, dtype=np.float64)
        x_u2 = np.asarray(x_u2, dtype=np.float64)
        self._check_width(x_u1, 0)
        self._check_width(x_u2, 1)
        if x_u1.shape[:-1] != x_u2.shape[:-1]:
            raise DimensionError(f"modality batch shapes differ: {x_u1.shape} vs {x_u2.shape}")
        graph = ComputeGraph()
        nodes = self.build(graph, graph.input("x_u1"), graph.input("x_u2"))
        graph.set_output(nodes["logits_m"])
        bindings = dict(self.params, x_u1=x_u1, x_u2=x_u2)
        graph.evaluate(bindings)
        outputs = ForwardOutputs(**{
            name: graph.value(nodes[name]).copy()
            for name in ("h_u1", "h_u2", "h", "logits_m", "p_m", "p_u1", "p_u2",
                         "ent_m", "ent_u1", "ent_u2", "logits_u1", "logits_u2")
        })
        return Trace(graph=graph, nodes=nodes, outputs=outputs, bindings=bindings)

    # -- checkpoints --------------------------------------------------------

    def save(self, path, clean_accuracy: Optional[float] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "clean_accuracy": clean_accuracy,
        }
        with open(path, "wb") as f:
            np.savez(f, __meta__=np.array(json.dumps(meta, sort_keys=True)), **self.params)
        logger.debug("saved checkpoint %s", path)
        return path

    @classmethod
    def load(cls, path) -> Tuple["MultimodalClassifier", Dict]:
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        try:
            with np.load(path, allow_pickle=False) as data:
                meta = json.loads(str(data["__meta__"]))
                params = {k: data[k].astype(np.float64) for k in data.files if k != "__meta__"}
        except (OSError, ValueError, KeyError) as e:
            raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, "
                f"got {meta.get('format')} v{meta.get('version')}")
        spec = ModelSpec.from_dict(meta["spec"])
        shapes = cls.parameter_shapes(spec)
        if set(params) != set(shapes):
            missing = sorted(set(shapes) - set(params))
            extra = sorted(set(params) - set(shapes))
            raise CheckpointError(f"{path}: parameter names do not match spec (missing {missing}, extra {extra})")
        wrong = {name: params[name].shape for name, shape in shapes.items() if params[name].shape != shape}
        if wrong:
            details = ", ".join(f"{name} {got} != {shapes[name]}" for name, got in sorted(wrong.items()))
            raise CheckpointError(f"{path}: parameter shapes do not match spec ({details})")
        return cls(spec, {name: params[name] for name in shapes}, seed=meta.get("seed")), meta


def forward_batch(model: MultimodalClassifier, samples: Sequence[MultimodalSample]) -> ForwardOutputs:
    x_u1, x_u2 = stack_samples(samples)
    return model.trace(x_u1, x_u2).outputs


def forward(model: MultimodalClassifier, sample: MultimodalSample) -> ForwardOutputs:
    """Forward quantities for one sample (vectors and float entropies)."""
    return model.trace(sample.x_u1[None, :], sample.x_u2[None, :]).outputs.row(0)


def adaptable_params(model: MultimodalClassifier) -> ParamSet:
    return model.adaptable_params()

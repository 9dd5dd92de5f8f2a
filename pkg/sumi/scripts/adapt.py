#!/usr/bin/env python3
"""
Online test-time adaptation loop and baseline adapters.

Adapter kinds:
  source             - no updates, plain online evaluation
  entropy-min        - minimize multimodal entropy over every sample
  gated-entropy-min  - minimize entropy over samples with Ent_m <= gamma_m,
                       weighted by exp(Ent0 - Ent_m)
  sumi               - IQR smoothing, unimodal assistance, MIS alignment

Every batch is scored with the parameters held BEFORE its update. Only the
layer-norm scale/shift tensors are ever written.
"""

import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from model import MultimodalClassifier, MultimodalSample, Trace, stack_samples
from numkit import ParamSet
from objective import ADAPT_MODES, AdaptConfig, total_loss
from selection import (
    SelectionMask,
    SmoothingSchedule,
    all_selected,
    entropy_gate,
    iqr_mask,
    quartiles,
    smoothing_value,
    ua_mask,
)

logger = logging.getLogger(__name__)

ADAPTER_KINDS = ("source", "entropy-min", "gated-entropy-min", "sumi")
EVAL_CHUNK = 512


class Adam:
    """Adam over a named parameter dict, updated in place."""

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1

        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            if self.m[name].shape != g.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, moments {self.m[name].shape}")

            self.m[name] *= self.beta1
            self.m[name] += (1.0 - self.beta1) * g
            self.v[name] *= self.beta2
            self.v[name] += (1.0 - self.beta2) * (g * g)

            denom = np.sqrt(self.v[name] / bc2) + self.epsilon
            params[name] -= step_size * self.m[name] / denom


@dataclass
class StepReport:
    iteration: int
    batch_size: int
    n_band: int
    n_selected: int
    loss: float
    components: Dict[str, float]
    smoothing: float
    running_accuracy: Optional[float]
    selected: List[int] = field(default_factory=list)
    mean_entropies: Dict[str, Optional[float]] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "StepReport":
        return cls(**data)


@dataclass
class RunReport:
    kind: str
    mode: str
    config: Dict
    iterations: int
    n_samples: int
    accuracy: Optional[float]
    domain_accuracy: Dict[str, float]
    selection: Dict[str, float]
    trace: List[StepReport]

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["trace"] = [step.to_dict() for step in self.trace]
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "RunReport":
        data = dict(data)
        data["trace"] = [StepReport.from_dict(step) for step in data["trace"]]
        return cls(**data)


class _Scoreboard:
    """Running correct/total counts, overall and per domain tag."""

    def __init__(self):
        self.correct = 0
        self.total = 0
        self.by_domain = defaultdict(lambda: [0, 0])

    def record(self, predictions: np.ndarray, batch: Sequence[MultimodalSample]):
        for pred, sample in zip(predictions, batch):
            if sample.label is None:
                continue
            hit = int(int(pred) == int(sample.label))
            self.correct += hit
            self.total += 1
            tally = self.by_domain[sample.domain or "none"]
            tally[0] += hit
            tally[1] += 1

    @property
    def accuracy(self) -> Optional[float]:
        return self.correct / self.total if self.total else None

    def domain_accuracy(self) -> Dict[str, float]:
        return {tag: hits / count for tag, (hits, count) in sorted(self.by_domain.items())}


def _mean_or_none(values: Optional[np.ndarray], mask: np.ndarray) -> Optional[float]:
    if values is None or not mask.any():
        return None
    return float(np.mean(values[mask]))


def _update(
    model: MultimodalClassifier,
    trace: Trace,
    mask: SelectionMask,
    config: AdaptConfig,
    iteration: int,
    mode: str,
    optimizer: Adam,
):
    """Build the loss on the traced batch, take one optimizer step; returns (loss, components)."""
    terms = total_loss(trace.graph, trace.nodes, mask.selected, config, iteration, mode,
                       ent_m=np.maximum(trace.outputs.ent_m, 0.0))
    graph = trace.graph
    graph.set_output(terms.total)
    loss = float(graph.evaluate(trace.bindings))
    components = {name: float(graph.value(node)) for name, node in terms.components.items()}
    if mask.count == 0:
        return loss, components
    grads = graph.gradient(model.adaptable_params())
    optimizer.step(model.params, grads)
    return loss, components


def _report(
    iteration: int,
    trace: Trace,
    band: SelectionMask,
    mask: SelectionMask,
    loss: float,
    components: Dict[str, float],
    f: float,
    board: _Scoreboard,
) -> StepReport:
    outputs = trace.outputs
    picked = mask.selected
    return StepReport(
        iteration=iteration,
        batch_size=len(mask),
        n_band=band.count,
        n_selected=mask.count,
        loss=loss,
        components=components,
        smoothing=f,
        running_accuracy=board.accuracy,
        selected=mask.indices,
        mean_entropies={
            "m": _mean_or_none(outputs.ent_m, picked),
            "u1": _mean_or_none(outputs.ent_u1, picked),
            "u2": _mean_or_none(outputs.ent_u2, picked),
        },
    )


def sumi_selection(trace: Trace, config: AdaptConfig, schedule: SmoothingSchedule, iteration: int):
    """(band mask, final mask): IQR smoothing first, then unimodal assistance within it."""
    outputs = trace.outputs
    n = len(outputs)
    if config.use_iqr:
        stats = quartiles(outputs.h, config.quantile_mode)
        band = iqr_mask(outputs.h, stats, schedule, iteration, config.beta)
    else:
        band = all_selected(n)
    entropies = np.maximum(outputs.entropies, 0.0)
    if config.use_ua:
        gate = ua_mask(entropies, config.gamma_m, config.gamma_u, config.mu, config.modality_order)
    else:
        gate = entropy_gate(entropies[:, 0], config.gamma_m)
    return band, band.restrict(gate)


def sumi_step(
    model: MultimodalClassifier,
    batch: Sequence[MultimodalSample],
    t: int,
    config: AdaptConfig,
    optimizer: Adam,
    mode: str = "wild",
    board: Optional[_Scoreboard] = None,
) -> StepReport:
    """One iteration of the adaptation algorithm on a batch.

    t is the zero-based step index; the schedule and the MIS window use the
    one-based iteration t + 1, so f reaches 1 on the final step.
    config must be resolved (see AdaptConfig.resolve).
    """
    if not batch:
        raise ValueError("batch is empty")
    iterations = config.iterations
    if not 0 <= t < iterations:
        raise ValueError(f"step {t} outside [0, {iterations})")
    iteration = t + 1
    schedule = SmoothingSchedule(config.schedule, iterations)
    board = board if board is not None else _Scoreboard()

    trace = model.trace(*stack_samples(batch))
    board.record(trace.outputs.predictions(), batch)

    band, mask = sumi_selection(trace, config, schedule, iteration)
    loss, components = _update(model, trace, mask, config, iteration, mode, optimizer)
    f = smoothing_value(schedule, iteration)
    return _report(iteration, trace, band, mask, loss, components, f, board)


def baseline_step(
    model: MultimodalClassifier,
    batch: Sequence[MultimodalSample],
    t: int,
    kind: str,
    config: AdaptConfig,
    optimizer: Adam,
    board: Optional[_Scoreboard] = None,
) -> StepReport:
    """One step of source / entropy-min / gated-entropy-min."""
    board = board if board is not None else _Scoreboard()
    trace = model.trace(*stack_samples(batch))
    board.record(trace.outputs.predictions(), batch)
    n = len(batch)
    iteration = t + 1

    if kind == "source":
        none = SelectionMask(selected=np.zeros(n, dtype=bool))
        return _report(iteration, trace, none, none, 0.0, {}, 0.0, board)

    band = all_selected(n)
    if kind == "entropy-min":
        # every row reported at Ent0 gives alpha == 1
        mask = all_selected(n)
        plain = _plain_entropy_config(config)
        terms = total_loss(trace.graph, trace.nodes, mask.selected, plain, iteration, "wild",
                           ent_m=np.full(n, plain.ent0))
        graph = trace.graph
        graph.set_output(terms.total)
        loss = float(graph.evaluate(trace.bindings))
        grads = graph.gradient(model.adaptable_params())
        optimizer.step(model.params, grads)
        components = {name: float(graph.value(node)) for name, node in terms.components.items()}
    elif kind == "gated-entropy-min":
        mask = entropy_gate(np.maximum(trace.outputs.ent_m, 0.0), config.gamma_m)
        loss, components = _update(model, trace, mask, _plain_entropy_config(config),
                                   iteration, "wild", optimizer)
    else:
        raise ValueError(f"unknown adapter kind {kind!r}, expected one of {ADAPTER_KINDS}")
    return _report(iteration, trace, band, mask, loss, components, 0.0, board)


def _plain_entropy_config(config: AdaptConfig) -> AdaptConfig:
    return replace(config, use_mis=False, balance_term=False)


def iteration_count(n_samples: int, config: AdaptConfig) -> int:
    if config.iterations is not None:
        return int(config.iterations)
    return math.ceil(n_samples / config.batch_size)


def run_adaptation(
    model: MultimodalClassifier,
    stream: Sequence[MultimodalSample],
    kind: str,
    config: AdaptConfig,
    mode: str = "wild",
    on_step: Optional[Callable[[StepReport], None]] = None,
) -> RunReport:
    """Adapt model in place over the stream, batch by batch, in order."""
    if not stream:
        raise ValueError("stream is empty")
    if kind not in ADAPTER_KINDS:
        raise ValueError(f"unknown adapter kind {kind!r}, expected one of {ADAPTER_KINDS}")
    if mode not in ADAPT_MODES:
        raise ValueError(f"mode must be one of {ADAPT_MODES}, got {mode!r}")

    iterations = iteration_count(len(stream), config)
    config = config.resolve(model.spec.num_classes, iterations)
    optimizer = Adam(lr=config.learning_rate)
    board = _Scoreboard()
    steps: List[StepReport] = []

    batches = [stream[i:i + config.batch_size] for i in range(0, len(stream), config.batch_size)]
    for t, batch in enumerate(batches[:iterations]):
        if kind == "sumi":
            step = sumi_step(model, batch, t, config, optimizer, mode=mode, board=board)
        else:
            step = baseline_step(model, batch, t, kind, config, optimizer, board=board)
        steps.append(step)
        if on_step is not None:
            on_step(step)
        logger.debug("%s step %d: |H|=%d |S|=%d loss=%.6f", kind, step.iteration,
                     step.n_band, step.n_selected, step.loss)

    n_steps = max(len(steps), 1)
    selection = {
        "mean_band": sum(s.n_band for s in steps) / n_steps,
        "mean_selected": sum(s.n_selected for s in steps) / n_steps,
        "total_selected": float(sum(s.n_selected for s in steps)),
    }
    return RunReport(
        kind=kind,
        mode=mode,
        config=config.to_dict(),
        iterations=iterations,
        n_samples=sum(len(b) for b in batches[:iterations]),
        accuracy=board.accuracy,
        domain_accuracy=board.domain_accuracy(),
        selection=selection,
        trace=steps,
    )


def evaluate(model: MultimodalClassifier, dataset: Sequence[MultimodalSample]) -> float:
    """Fraction of argmax-correct multimodal predictions (ties to the lowest class)."""
    if not dataset:
        raise ValueError("dataset is empty")
    correct = 0
    for start in range(0, len(dataset), EVAL_CHUNK):
        chunk = dataset[start:start + EVAL_CHUNK]
        predictions = model.trace(*stack_samples(chunk)).outputs.predictions()
        labels = np.array([s.label for s in chunk])
        correct += int((predictions == labels).sum())
    return correct / len(dataset)

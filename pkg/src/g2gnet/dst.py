"""Dynamic sparse training: periodic prune-and-regrow of hidden masks.

Every ``update_interval`` iterations each enabled layer drops
``round(rewire_fraction * active)`` active edges by the prune criterion and
adds the same number of previously inactive edges by the grow criterion.
Hebbian criteria score an edge ``(i, j)`` by the cosine similarity between
the batch activations of source neuron ``i`` and destination neuron ``j``.

Selections are deterministic: candidates are visited in row-major
(row, col) order and sorted stably, so equal scores resolve
lexicographically.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng
from .errors import ConfigurationError, RewireError

log = logging.getLogger(__name__)

PRUNE_CRITERIA = ("magnitude", "random", "hebbian")
GROW_CRITERIA = ("random", "hebbian")


@dataclass
class RewirePolicy:
    prune_criterion: str = "hebbian"
    grow_criterion: str = "hebbian"
    update_interval: int = 1000
    rewire_fraction: float = 0.025
    enabled_layers: tuple = (0, 1, 2)
    regrow_init: str = "zero"
    seed: int = 0

    def __post_init__(self):
        self.enabled_layers = tuple(int(i) for i in self.enabled_layers)
        self.validate()

    def validate(self):
        if self.prune_criterion not in PRUNE_CRITERIA:
            raise ConfigurationError(f"prune criterion must be one of {PRUNE_CRITERIA}")
        if self.grow_criterion not in GROW_CRITERIA:
            raise ConfigurationError(f"grow criterion must be one of {GROW_CRITERIA}")
        if not 0 < self.rewire_fraction < 1:
            raise ConfigurationError("rewire_fraction must lie strictly between 0 and 1")
        if self.update_interval < 1:
            raise ConfigurationError("update_interval must be at least 1")
        if self.regrow_init not in ("zero", "random"):
            raise ConfigurationError("regrow_init must be 'zero' or 'random'")

    @property
    def needs_snapshot(self):
        return "hebbian" in (self.prune_criterion, self.grow_criterion)


@dataclass
class ActivationSnapshot:
    pre: np.ndarray
    post: np.ndarray

    @property
    def batch_size(self):
        return self.pre.shape[0]


@dataclass
class RewireEvent:
    iteration: int
    layer: int
    pruned: list
    grown: list
    scores: dict = field(default_factory=dict)
    shortfall: int = 0

    def to_record(self) -> dict:
        return {
            "type": "rewire",
            "iteration": self.iteration,
            "layer": self.layer,
            "pruned": len(self.pruned),
            "grown": len(self.grown),
            "shortfall": self.shortfall,
            "scores": self.scores,
        }


def hebbian_scores(snap: ActivationSnapshot) -> np.ndarray:
    """``(n_in, n_out)`` cosine similarities between activation columns.

    A column with zero norm (a silent neuron) scores 0 against everything.
    """
    pre = np.asarray(snap.pre, dtype=np.float64)
    post = np.asarray(snap.post, dtype=np.float64)
    if pre.ndim != 2 or post.ndim != 2 or pre.shape[0] != post.shape[0] or pre.shape[0] < 1:
        raise ConfigurationError("snapshot needs matching batch dimensions with B >= 1")
    na = np.linalg.norm(pre, axis=0)
    nb = np.linalg.norm(post, axis=0)
    a = np.divide(pre, na, out=np.zeros_like(pre), where=na > 0)
    b = np.divide(post, nb, out=np.zeros_like(post), where=nb > 0)
    return np.clip(a.T @ b, -1.0, 1.0)


def edges_per_event(active: int, fraction: float) -> int:
    return int(math.floor(fraction * active + 0.5))


# Scores are ranked at this resolution so that values equal up to
# floating-point rounding tie, and ties fall back to row-major order.
RANK_DECIMALS = 12


def _lowest(cand, scores, k):
    order = np.argsort(np.round(np.asarray(scores, np.float64), RANK_DECIMALS), kind="stable")
    return cand[order[:k]]


def _highest(cand, scores, k):
    order = np.argsort(-np.round(np.asarray(scores, np.float64), RANK_DECIMALS), kind="stable")
    return cand[order[:k]]


def _to_edges(flat, n_out):
    flat = np.sort(np.asarray(flat, dtype=np.int64))
    return np.stack([flat // n_out, flat % n_out], axis=1)


def _quantiles(x):
    if len(x) == 0:
        return None
    return [float(v) for v in np.quantile(x, [0.0, 0.25, 0.5, 0.75, 1.0])]


def select_prune(layer, policy: RewirePolicy, snap=None, scores=None, gen=None, k=None):
    """Active edges to drop, as a ``(k, 2)`` array of (row, col) sorted lexicographically."""
    bits = layer.mask.bits
    cand = np.flatnonzero(bits)
    if cand.size == 0:
        raise RewireError("layer has no active edges to prune")
    if k is None:
        k = edges_per_event(cand.size, policy.rewire_fraction)
    k = min(k, cand.size)
    crit = policy.prune_criterion
    if crit == "magnitude":
        chosen = _lowest(cand, np.abs(layer.weight.ravel()[cand]), k)
    elif crit == "random":
        if gen is None:
            raise ConfigurationError("random pruning needs a generator")
        chosen = gen.choice(cand, size=k, replace=False)
    else:
        if scores is None:
            if snap is None:
                raise RewireError("hebbian pruning needs an activation snapshot")
            scores = hebbian_scores(snap)
        chosen = _lowest(cand, scores.ravel()[cand], k)
    return _to_edges(chosen, bits.shape[1])


def select_grow(layer, policy: RewirePolicy, snap=None, excluded=None, k=None, scores=None, gen=None):
    """Inactive edges to add; ``excluded`` (just-pruned edges) are never chosen.

    Returns fewer than ``k`` edges when the eligible pool is too small.
    """
    bits = layer.mask.bits
    n_out = bits.shape[1]
    eligible = ~bits.ravel()
    if excluded is not None and len(excluded):
        ex = np.asarray(excluded)
        eligible[ex[:, 0] * n_out + ex[:, 1]] = False
    cand = np.flatnonzero(eligible)
    if k is None:
        k = edges_per_event(int(np.count_nonzero(bits)), policy.rewire_fraction)
    k = min(k, cand.size)
    if policy.grow_criterion == "random":
        if gen is None:
            raise ConfigurationError("random growth needs a generator")
        chosen = gen.choice(cand, size=k, replace=False)
    else:
        if scores is None:
            if snap is None:
                raise RewireError("hebbian growth needs an activation snapshot")
            scores = hebbian_scores(snap)
        chosen = _highest(cand, scores.ravel()[cand], k)
    return _to_edges(chosen, n_out)


def apply_rewire(layer, pruned, grown, regrow_init="zero", gen=None):
    """Flip mask bits in place; pruned and grown weights and moments are reset."""
    bits = layer.mask.bits
    pruned = np.asarray(pruned, dtype=np.int64).reshape(-1, 2)
    grown = np.asarray(grown, dtype=np.int64).reshape(-1, 2)
    pr, pc = pruned[:, 0], pruned[:, 1]
    gr, gc = grown[:, 0], grown[:, 1]
    if not bits[pr, pc].all():
        raise RewireError("attempted to prune an inactive edge")
    if bits[gr, gc].any():
        raise RewireError("attempted to grow an already active edge")
    n_out = bits.shape[1]
    if np.intersect1d(pr * n_out + pc, gr * n_out + gc).size:
        raise RewireError("pruned and grown edge sets overlap")
    bits[pr, pc] = False
    bits[gr, gc] = True
    for arr in (layer.weight, layer.adam_w.first_moment, layer.adam_w.second_moment):
        arr[pr, pc] = 0
        arr[gr, gc] = 0
    if regrow_init == "random" and len(grown):
        fan_in = np.maximum(bits.sum(axis=0), 1)[gc]
        bound = np.sqrt(6.0 / fan_in)
        layer.weight[gr, gc] = (gen.uniform(-1.0, 1.0, size=len(grown)) * bound).astype(layer.weight.dtype)
    return layer


def rewire_layer(layer, policy: RewirePolicy, snap, iteration: int, layer_index: int) -> RewireEvent:
    active = int(np.count_nonzero(layer.mask.bits))
    k = edges_per_event(active, policy.rewire_fraction)
    if k == 0:
        log.info("layer %d: rewire at iteration %d selects 0 of %d edges; skipped", layer_index, iteration, active)
        return RewireEvent(iteration, layer_index, [], [])
    gen = rng.stream(policy.seed, rng.DST, layer_index, iteration)
    scores = hebbian_scores(snap) if policy.needs_snapshot else None
    pruned = select_prune(layer, policy, scores=scores, gen=gen, k=k)
    grown = select_grow(layer, policy, excluded=pruned, k=k, scores=scores, gen=gen)
    shortfall = k - len(grown)
    if shortfall:
        log.warning("layer %d: only %d of %d edges could be regrown", layer_index, len(grown), k)

    def summary(crit, edges):
        if crit == "magnitude":
            return _quantiles(np.abs(layer.weight[edges[:, 0], edges[:, 1]]))
        if crit == "hebbian":
            return _quantiles(scores[edges[:, 0], edges[:, 1]])
        return None

    info = {
        "prune": policy.prune_criterion,
        "grow": policy.grow_criterion,
        "prune_quantiles": summary(policy.prune_criterion, pruned),
        "grow_quantiles": summary(policy.grow_criterion, grown),
    }
    apply_rewire(layer, pruned, grown, policy.regrow_init, gen)
    return RewireEvent(iteration, layer_index, pruned.tolist(), grown.tolist(), info, shortfall)


def should_fire(iteration: int, policy: RewirePolicy | None) -> bool:
    return policy is not None and iteration > 0 and iteration % policy.update_interval == 0


def dst_hook(iteration, model, policy: RewirePolicy | None, last_snapshots):
    """Rewire the model if ``iteration`` is a scheduled update; else ``None``.

    ``last_snapshots`` is the model's snapshot list from the latest training
    batch: entry ``i`` feeds hidden layer ``i`` and entry ``i + 1`` is its
    output.
    """
    if not should_fire(iteration, policy):
        return None
    events = []
    for i in policy.enabled_layers:
        if i >= len(model.hidden):
            raise ConfigurationError(f"layer {i} is not a masked hidden layer")
        snap = None
        if policy.needs_snapshot:
            if last_snapshots is None or len(last_snapshots) <= i + 1:
                raise RewireError(f"hebbian criterion needs activations for layer {i}")
            snap = ActivationSnapshot(last_snapshots[i], last_snapshots[i + 1])
        events.append(rewire_layer(model.hidden[i], policy, snap, iteration, i))
    return events


class EventLog:
    """JSON-lines sink for rewire events."""

    def __init__(self, path, header=None):
        self.path = path
        self._f = open(path, "w", encoding="utf-8")
        if header is not None:
            self.write(dict(header, type="header"))

    def write(self, record):
        self._f.write(json.dumps(record, sort_keys=True) + "\n")
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def policy_from_dict(d: dict | None) -> RewirePolicy | None:
    if d is None:
        return None
    return RewirePolicy(**d)


def policy_to_dict(policy: RewirePolicy | None):
    return None if policy is None else asdict(policy)

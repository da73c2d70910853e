"""Aggregation strategies: FedAvg, coordinate-wise median, Krum, Zeno.

Each strategy consumes one round's client updates and produces the next
global weights. All of them canonicalize the update order by org id first,
so the output is bit-identical under any input permutation; documented
tie-breaks always prefer the lowest org id, which makes replays exact.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import AggregationError, ConfigurationError
from .mlp import ModelWeights, cross_entropy_loss, flatten, unflatten

AGGREGATOR_KINDS = ("fed_avg", "coord_median", "krum", "zeno")


@dataclass(frozen=True)
class ClientUpdate:
    """One organization's post-round weights plus its training sample count."""

    org_id: int
    weights: ModelWeights
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise AggregationError("client updates must carry sample_count >= 1")


@dataclass(frozen=True)
class AggregatorSpec:
    """Strategy selection plus per-strategy knobs.

    ``krum_f`` is the number of tolerated malicious clients; Krum scores
    each update against its K - krum_f - 2 nearest peers. Zeno ranks
    updates by estimated loss descent on ``server_validation`` (a small
    clean feature/label pair held by the server, never shipped to clients)
    minus ``zeno_rho`` times the squared update magnitude, then trims the
    ``zeno_b`` lowest-ranked before averaging. ``zeno_gamma`` scales the
    step at which the descent is probed (1.0 evaluates the full update).
    """

    kind: str = "fed_avg"
    krum_f: int = 1
    zeno_rho: float = 5e-4
    zeno_b: int = 1
    zeno_gamma: float = 0.001
    server_validation: tuple[np.ndarray, np.ndarray] | None = None

    def validate(self, num_clients: int | None = None) -> None:
        if self.kind not in AGGREGATOR_KINDS:
            raise ConfigurationError(
                f"unknown aggregator {self.kind!r}; expected one of {AGGREGATOR_KINDS}"
            )
        if self.krum_f < 0:
            raise ConfigurationError("krum_f must be >= 0")
        if self.zeno_rho < 0:
            raise ConfigurationError("zeno_rho must be >= 0")
        if self.zeno_b < 0:
            raise ConfigurationError("zeno_b must be >= 0")
        if self.zeno_gamma <= 0:
            raise ConfigurationError("zeno_gamma must be > 0")
        if self.kind == "zeno":
            if self.server_validation is None or len(self.server_validation[0]) == 0:
                raise ConfigurationError("zeno requires a non-empty server validation set")
            if num_clients is not None and self.zeno_b >= num_clients:
                raise ConfigurationError(
                    f"zeno_b={self.zeno_b} leaves no survivors out of {num_clients}"
                )
        if self.kind == "krum" and num_clients is not None:
            if num_clients < self.krum_f + 3:
                raise ConfigurationError(
                    f"krum needs at least f + 3 = {self.krum_f + 3} clients, "
                    f"got {num_clients}"
                )


def _sorted_flat(
    updates: Sequence[ClientUpdate],
) -> tuple[list[ClientUpdate], np.ndarray]:
    """Validate shape consistency and return (updates by org id, flat matrix)."""
    if not updates:
        raise AggregationError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.org_id)
    flats = [flatten(u.weights) for u in ordered]
    length = flats[0].size
    for update, vec in zip(ordered, flats):
        if vec.size != length:
            raise AggregationError(
                f"update from org {update.org_id} has {vec.size} parameters, "
                f"expected {length}"
            )
    return ordered, np.stack(flats)


def fed_avg(updates: Sequence[ClientUpdate]) -> ModelWeights:
    """Sample-count-weighted coordinatewise mean of the client weights."""
    ordered, flats = _sorted_flat(updates)
    counts = np.array([u.sample_count for u in ordered], dtype=np.float64)
    mean = (flats * (counts / counts.sum())[:, None]).sum(axis=0)
    return unflatten(ordered[0].weights.architecture, mean)


def coord_median(updates: Sequence[ClientUpdate]) -> ModelWeights:
    """Unweighted per-coordinate median; even counts average the middle two."""
    ordered, flats = _sorted_flat(updates)
    return unflatten(ordered[0].weights.architecture, np.median(flats, axis=0))


def krum_select(updates: Sequence[ClientUpdate], f: int = 1) -> tuple[int, ModelWeights]:
    """Krum selection: returns (selected org id, its exact weights).

    Each update is scored by the sum of squared Euclidean distances to its
    K - f - 2 nearest other updates; the lowest score wins, ties going to
    the lowest org id.
    """
    ordered, flats = _sorted_flat(updates)
    k = len(ordered)
    if k < f + 3:
        raise ConfigurationError(
            f"krum needs at least f + 3 = {f + 3} clients, got {k}"
        )
    neighbor_count = k - f - 2

    sq_norms = np.einsum("ij,ij->i", flats, flats)
    distances = sq_norms[:, None] + sq_norms[None, :] - 2.0 * (flats @ flats.T)
    np.maximum(distances, 0.0, out=distances)

    best_index = -1
    best_score = np.inf
    for i in range(k):
        others = np.delete(distances[i], i)
        others.sort()
        score = float(others[:neighbor_count].sum())
        if score < best_score:
            best_score = score
            best_index = i
    selected = ordered[best_index]
    return selected.org_id, selected.weights.copy()


def krum(updates: Sequence[ClientUpdate], f: int = 1) -> ModelWeights:
    """The Krum-selected update; always exactly one of the inputs."""
    return krum_select(updates, f)[1]


def zeno_rank(
    updates: Sequence[ClientUpdate],
    prev_global: ModelWeights,
    spec: AggregatorSpec,
) -> tuple[list[tuple[int, float]], list[int]]:
    """Score and rank updates by estimated loss descent.

    With u_i = flatten(w_i) - flatten(prev_global):

        score(i) = [loss(prev_global) - loss(prev_global + gamma * u_i)]
                   on the server validation set  -  zeno_rho * ||u_i||^2

    ``zeno_gamma`` scales the evaluated step: 1.0 scores the client's full
    update, while a small value (the default, matching the learning rate)
    probes the descent direction before confident-but-wrong regions of a
    far-away candidate can saturate the loss.

    Returns (scores ordered best-first as (org_id, score), surviving org ids
    after trimming the zeno_b lowest).
    """
    spec.validate(num_clients=len(updates))
    ordered, flats = _sorted_flat(updates)
    if spec.zeno_b >= len(ordered):
        raise ConfigurationError(
            f"zeno_b={spec.zeno_b} leaves no survivors out of {len(ordered)}"
        )
    val_x, val_y = spec.server_validation
    base_loss = cross_entropy_loss(prev_global, val_x, val_y)
    prev_flat = flatten(prev_global)
    arch = prev_global.architecture

    scored: list[tuple[int, float]] = []
    for update, vec in zip(ordered, flats):
        step = vec - prev_flat
        probe = unflatten(arch, prev_flat + spec.zeno_gamma * step)
        descent = base_loss - cross_entropy_loss(probe, val_x, val_y)
        magnitude = float(np.sum(step**2))
        scored.append((update.org_id, descent - spec.zeno_rho * magnitude))

    ranking = sorted(scored, key=lambda item: (-item[1], item[0]))
    survivors = sorted(org_id for org_id, _ in ranking[: len(ordered) - spec.zeno_b])
    return ranking, survivors


def zeno(
    updates: Sequence[ClientUpdate],
    prev_global: ModelWeights,
    spec: AggregatorSpec,
) -> ModelWeights:
    """Trim the zeno_b lowest-scored updates, average the rest unweighted."""
    _, survivors = zeno_rank(updates, prev_global, spec)
    ordered, flats = _sorted_flat(updates)
    keep = [i for i, u in enumerate(ordered) if u.org_id in set(survivors)]
    return unflatten(ordered[0].weights.architecture, flats[keep].mean(axis=0))


@dataclass
class Aggregator:
    """Uniform round-level interface over the four strategies.

    ``detail`` in the result records the Krum-selected org id or the Zeno
    ranking/survivors, for post-hoc analysis of a run.
    """

    spec: AggregatorSpec

    def __call__(
        self, updates: Sequence[ClientUpdate], prev_global: ModelWeights
    ) -> tuple[ModelWeights, dict]:
        kind = self.spec.kind
        if kind == "fed_avg":
            return fed_avg(updates), {}
        if kind == "coord_median":
            return coord_median(updates), {}
        if kind == "krum":
            selected, weights = krum_select(updates, self.spec.krum_f)
            return weights, {"krum_selected_org": selected}
        if kind == "zeno":
            ranking, survivors = zeno_rank(updates, prev_global, self.spec)
            ordered, flats = _sorted_flat(updates)
            keep = [i for i, u in enumerate(ordered) if u.org_id in set(survivors)]
            weights = unflatten(
                ordered[0].weights.architecture, flats[keep].mean(axis=0)
            )
            return weights, {
                "zeno_survivors": survivors,
                "zeno_scores": {org_id: score for org_id, score in ranking},
            }
        raise ConfigurationError(f"unknown aggregator {kind!r}")


def make_aggregator(spec: AggregatorSpec) -> Aggregator:
    spec.validate()
    return Aggregator(spec)

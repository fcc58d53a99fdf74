"""Server-side aggregation: synchronous weighted averaging and asynchronous
staleness-aware mixing, plus the bookkeeping both modes share.

The server never runs on real threads; the simulation's event loop feeds it
one state transition at a time. Staleness for weighting can be measured
either in aggregation events (version difference between dispatch and
receipt) or in nominal round units (elapsed virtual time quantized by a
configured round duration). Both measures are recorded on every log entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from hetfed.task import ModelParameters

SYNCHRONOUS = "sync"
ASYNCHRONOUS = "async"
STALENESS_ROUNDS = "rounds"
STALENESS_AGGREGATIONS = "aggregations"


class ProtocolError(RuntimeError):
    """A client/server interaction violated the federation protocol."""


@dataclass(frozen=True)
class UpdateMessage:
    client_id: str
    params: ModelParameters
    based_on_version: int
    sent_at: float
    shard_size: int

    def __post_init__(self):
        if self.based_on_version < 0:
            raise ValueError("based_on_version must be >= 0")
        if self.shard_size < 1:
            raise ValueError("shard_size must be >= 1")


@dataclass
class DispatchRecord:
    version: int
    time: float


@dataclass
class UpdateRecord:
    """One applied update: which client, at what version, and how stale it was."""

    client_id: str
    applied_at_version: int
    received_at: float
    tau: int  # staleness used for weighting, in the configured metric
    tau_aggregations: int  # aggregation events between dispatch and receipt
    weight: float


@dataclass
class ServerState:
    global_params: ModelParameters
    mode: str = SYNCHRONOUS
    alpha: float = 0.4
    staleness_aware: bool = True
    staleness_metric: str = STALENESS_ROUNDS
    nominal_round_seconds: float = 1.0
    registered: dict[str, int] = field(default_factory=dict)  # client_id -> shard size
    dispatches: dict[str, DispatchRecord] = field(default_factory=dict)
    pending: set[str] = field(default_factory=set)
    update_log: list[UpdateRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in (SYNCHRONOUS, ASYNCHRONOUS):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if self.staleness_metric not in (STALENESS_ROUNDS, STALENESS_AGGREGATIONS):
            raise ValueError(f"unknown staleness metric {self.staleness_metric!r}")
        if self.nominal_round_seconds <= 0:
            raise ValueError("nominal_round_seconds must be positive")

    @property
    def version(self) -> int:
        return self.global_params.version

    def register_client(self, client_id: str, shard_size: int) -> None:
        self.registered[client_id] = shard_size

    def record_dispatch(self, client_id: str, time: float) -> ModelParameters:
        if client_id not in self.registered:
            raise ProtocolError(f"dispatch to unknown client {client_id!r}")
        self.dispatches[client_id] = DispatchRecord(version=self.version, time=time)
        return self.global_params.copy()


def fedavg_aggregate(updates: list[UpdateMessage]) -> ModelParameters:
    """Shard-size weighted average: sum_k p_k W_k with p_k = N_k / sum_j N_j."""
    if not updates:
        raise ValueError("fedavg_aggregate requires at least one update")
    base = updates[0].based_on_version
    if any(u.based_on_version != base for u in updates):
        raise ProtocolError("synchronous aggregation received updates based on mixed global versions")
    weights = np.array([u.shard_size for u in updates], dtype=np.float64)
    weights /= weights.sum()
    values = np.zeros_like(updates[0].params.values)
    for w, u in zip(weights, updates):
        values += w * u.params.values
    return ModelParameters(values, updates[0].params.layout, version=base + 1)


def staleness_weight(alpha: float, tau: int) -> float:
    """Decay factor alpha / (1 + tau); equals alpha for a fresh update."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    return alpha / (1.0 + tau)


def measure_staleness(server: ServerState, update: UpdateMessage, received_at: float) -> tuple[int, int]:
    """(tau in the configured metric, tau in aggregation events)."""
    tau_agg = server.version - update.based_on_version
    if tau_agg < 0:
        raise ProtocolError("update based on a version newer than the server's")
    dispatch = server.dispatches.get(update.client_id)
    if dispatch is None:
        raise ProtocolError(f"update from client {update.client_id!r} that was never dispatched to")
    if server.staleness_metric == STALENESS_AGGREGATIONS:
        return tau_agg, tau_agg
    tau_rounds = int(math.floor((received_at - dispatch.time) / server.nominal_round_seconds))
    return max(tau_rounds, 0), tau_agg


def fedasync_apply(server: ServerState, update: UpdateMessage, received_at: float | None = None) -> ServerState:
    """Mix one arriving update into the global model and bump the version.

    new_globals = (1 - a_k) W_G + a_k W_k with a_k = alpha / (1 + tau) when
    staleness-aware, else a_k = alpha.
    """
    if server.mode != ASYNCHRONOUS:
        raise ProtocolError("fedasync_apply requires asynchronous mode")
    if update.client_id not in server.registered:
        raise ProtocolError(f"update from unknown client {update.client_id!r}")
    at = update.sent_at if received_at is None else received_at
    tau, tau_agg = measure_staleness(server, update, at)
    a_k = staleness_weight(server.alpha, tau) if server.staleness_aware else server.alpha
    mixed = (1.0 - a_k) * server.global_params.values + a_k * update.params.values
    new_version = server.version + 1
    server.global_params = ModelParameters(mixed, server.global_params.layout, version=new_version)
    server.update_log.append(
        UpdateRecord(
            client_id=update.client_id,
            applied_at_version=new_version,
            received_at=at,
            tau=tau,
            tau_aggregations=tau_agg,
            weight=a_k,
        )
    )
    return server


def sync_round_begin(server: ServerState, participating: list[str], time: float) -> dict[str, ModelParameters]:
    """Broadcast the current globals to this round's participants and await them all."""
    if server.mode != SYNCHRONOUS:
        raise ProtocolError("sync_round_begin requires synchronous mode")
    if server.pending:
        raise ProtocolError("previous synchronous round still awaiting updates")
    unknown = [c for c in participating if c not in server.registered]
    if unknown:
        raise ProtocolError(f"broadcast to unknown clients {unknown!r}")
    server.pending = set(participating)
    return {c: server.record_dispatch(c, time) for c in sorted(participating)}


def sync_round_receive(server: ServerState, updates: list[UpdateMessage], received_at: float) -> ModelParameters:
    """Aggregate once the full pending set has reported; clears the round."""
    if server.mode != SYNCHRONOUS:
        raise ProtocolError("sync_round_receive requires synchronous mode")
    got = {u.client_id for u in updates}
    if got != server.pending:
        raise ProtocolError(f"expected updates from {sorted(server.pending)}, got {sorted(got)}")
    new_params = fedavg_aggregate(sorted(updates, key=lambda u: u.client_id))
    server.global_params = new_params
    for u in sorted(updates, key=lambda u: u.client_id):
        server.update_log.append(
            UpdateRecord(
                client_id=u.client_id,
                applied_at_version=new_params.version,
                received_at=received_at,
                tau=0,
                tau_aggregations=0,
                weight=u.shard_size / sum(x.shard_size for x in updates),
            )
        )
    server.pending = set()
    return new_params

"""Discrete-event engine: virtual clock, heterogeneous device timing, dropouts,
and the federated training loop in both aggregation modes.

Every run is a pure function of (config, seed). Each simulated client owns
independent RNG streams for timing, dropout, and training noise, spawned from
the master seed, so event interleaving can never perturb the draws.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from hetfed import accountant as acct
from hetfed import federation as fed
from hetfed import task
from hetfed.dp import DpConfig, local_train

EVENT_KINDS = ("update_arrival", "broadcast_delivery", "dropout", "rejoin", "evaluation_tick")
_KIND_PRECEDENCE = {k: i for i, k in enumerate(EVENT_KINDS)}


class SimulationAbortedError(RuntimeError):
    """No client ever completes a round; the run cannot make progress."""


@dataclass(frozen=True)
class DeviceProfile:
    tier_name: str
    train_time_mean: float
    train_time_jitter: float
    exchange_latency_mean: float
    dropout_prob_per_round: float
    rejoin_delay: Optional[float] = None  # defaults to one full round-equivalent

    def __post_init__(self):
        if self.train_time_mean <= 0 or self.exchange_latency_mean <= 0:
            raise ValueError("times must be positive")
        if self.train_time_jitter < 0:
            raise ValueError("jitter must be >= 0")
        if not 0.0 <= self.dropout_prob_per_round < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")
        if self.rejoin_delay is None:
            object.__setattr__(self, "rejoin_delay", self.train_time_mean + self.exchange_latency_mean)
        elif self.rejoin_delay <= 0:
            raise ValueError("rejoin_delay must be positive")

    @property
    def mean_cycle(self) -> float:
        return self.train_time_mean + self.exchange_latency_mean


def default_profiles() -> list[DeviceProfile]:
    """Five hardware tiers, slowest first. Training-time and latency ratios follow
    the measured 7x training-time and 7x exchange-latency spread between the
    low-end and high-end tiers, with the mid tier 3-4x off either end."""
    return [
        DeviceProfile("hw_t1", 490.0, 0.15, 0.175, 3.0 / 60.0),
        DeviceProfile("hw_t2", 450.0, 0.15, 0.170, 2.0 / 60.0),
        DeviceProfile("hw_t3", 260.0, 0.10, 0.090, 0.0),
        DeviceProfile("hw_t4", 75.0, 0.05, 0.030, 0.0),
        DeviceProfile("hw_t5", 70.0, 0.05, 0.025, 0.0),
    ]


def sample_round_duration(profile: DeviceProfile, rng: np.random.Generator) -> float:
    """One local round's wall time: a log-normal train-time draw plus a log-normal
    exchange-latency draw, both with the profile's relative jitter."""
    return _lognormal(profile.train_time_mean, profile.train_time_jitter, rng) + _lognormal(
        profile.exchange_latency_mean, profile.train_time_jitter, rng
    )


def _lognormal(mean: float, rel_std: float, rng: np.random.Generator) -> float:
    if rel_std <= 0:
        return mean
    s2 = math.log1p(rel_std * rel_std)
    return float(rng.lognormal(math.log(mean) - s2 / 2.0, math.sqrt(s2)))


@dataclass(frozen=True)
class SimEvent:
    fire_at: float
    kind: str
    client_id: str
    scheduled_at: float


@dataclass
class _Client:
    index: int
    client_id: str
    profile: DeviceProfile
    shard: task.ClientShard
    timing_rng: np.random.Generator
    dropout_rng: np.random.Generator
    training_rng: np.random.Generator
    accountant: Optional[acct.AccountantState]
    mech: Optional[acct.MechanismParams]
    update_count: int = 0
    dropouts: int = 0
    taus: list[int] = field(default_factory=list)
    taus_agg: list[int] = field(default_factory=list)
    epsilon_trajectory: list[tuple[float, float]] = field(default_factory=list)
    local_accuracy_trajectory: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class ClientReport:
    tier_name: str
    update_count: int
    participation_pct: float
    dropouts: int
    staleness_mean: Optional[float]
    staleness_histogram: dict[int, int]
    staleness_values: list[int]
    final_epsilon: Optional[float]
    epsilon_trajectory: list[tuple[float, float]]
    final_local_accuracy: Optional[float]
    local_accuracy_trajectory: list[tuple[float, float]]

    def to_dict(self) -> dict:
        return {
            "tier_name": self.tier_name,
            "update_count": self.update_count,
            "participation_pct": self.participation_pct,
            "dropouts": self.dropouts,
            "staleness_mean": self.staleness_mean,
            "staleness_histogram": {str(k): v for k, v in sorted(self.staleness_histogram.items())},
            "staleness_values": self.staleness_values,
            "final_epsilon": self.final_epsilon,
            "epsilon_trajectory": self.epsilon_trajectory,
            "final_local_accuracy": self.final_local_accuracy,
            "local_accuracy_trajectory": self.local_accuracy_trajectory,
        }


@dataclass
class RunReport:
    mode: str
    seed: int
    accuracy_trajectory: list[tuple[float, int, float]]  # (virtual time, aggregation index, pooled accuracy)
    per_client: dict[str, ClientReport]
    time_to_target: Optional[float]
    target_accuracy: float
    participation_at_target: Optional[dict[str, float]]
    total_virtual_time: float
    total_aggregations: int
    rounds_completed: int  # synchronous rounds; equals total_aggregations in async mode
    aborted_rounds: int
    stop_reason: str
    final_pooled_accuracy: Optional[float]
    event_trace: list[SimEvent]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "accuracy_trajectory": self.accuracy_trajectory,
            "per_client": {cid: rep.to_dict() for cid, rep in self.per_client.items()},
            "time_to_target": self.time_to_target,
            "target_accuracy": self.target_accuracy,
            "participation_at_target": self.participation_at_target,
            "total_virtual_time": self.total_virtual_time,
            "total_aggregations": self.total_aggregations,
            "rounds_completed": self.rounds_completed,
            "aborted_rounds": self.aborted_rounds,
            "stop_reason": self.stop_reason,
            "final_pooled_accuracy": self.final_pooled_accuracy,
            "event_trace": [[e.fire_at, e.kind, e.client_id, e.scheduled_at] for e in self.event_trace],
        }


def staleness_trace(report: RunReport) -> dict[str, float]:
    """Mean staleness per client from the update log; asynchronous runs only."""
    if report.mode != fed.ASYNCHRONOUS:
        raise ValueError("staleness is only defined for asynchronous runs (always 0 in sync mode)")
    return {
        cid: float(np.mean(rep.staleness_values)) if rep.staleness_values else float("nan")
        for cid, rep in report.per_client.items()
    }


class _EventQueue:
    """Heap with the deterministic tie order (fire_at, kind precedence, client index)."""

    def __init__(self):
        self._heap: list[tuple[float, int, int, int, SimEvent]] = []
        self._seq = 0

    def push(self, event: SimEvent, client_index: int) -> None:
        heapq.heappush(self._heap, (event.fire_at, _KIND_PRECEDENCE[event.kind], client_index, self._seq, event))
        self._seq += 1

    def pop(self) -> SimEvent:
        return heapq.heappop(self._heap)[4]

    def peek_time(self) -> float:
        return self._heap[0][0]

    def __bool__(self) -> bool:
        return bool(self._heap)


class _StopTracker:
    def __init__(self, target: float, sustain: int):
        self.target = target
        self.sustain = sustain
        self.consecutive = 0
        self.first_hit_time: Optional[float] = None
        self.converged_at: Optional[float] = None
        self.participation_snapshot: Optional[dict[str, float]] = None

    def observe(self, time: float, accuracy: float, clients: list[_Client]) -> bool:
        if accuracy >= self.target:
            self.consecutive += 1
            if self.consecutive == 1:
                self.first_hit_time = time
            if self.consecutive >= self.sustain and self.converged_at is None:
                self.converged_at = self.first_hit_time
                self.participation_snapshot = _participation(clients)
                return True
        else:
            self.consecutive = 0
            self.first_hit_time = None
        return False


def _participation(clients: list[_Client]) -> dict[str, float]:
    total = sum(c.update_count for c in clients)
    if total == 0:
        return {c.client_id: 0.0 for c in clients}
    return {c.client_id: 100.0 * c.update_count / total for c in clients}


def _compose_privacy(client: _Client, applications: int, granularity: str, time: float, delta: float) -> None:
    if client.accountant is None:
        return
    n = 1 if granularity == "per_round" else applications
    client.accountant = acct.compose(client.accountant, client.mech, applications=n)
    client.epsilon_trajectory.append((time, acct.epsilon(client.accountant, delta)))


def run(config) -> RunReport:
    """Execute one federated training run under the given ExperimentConfig."""
    rng_root = np.random.SeedSequence(config.seed)
    data_ss, partition_ss, init_ss, clients_ss = rng_root.spawn(4)

    dataset = task.generate_synthetic(
        config.classes, config.input_dim, config.per_class, config.separation, data_ss
    )
    shards = task.partition_iid(dataset, len(config.profiles), config.train_fraction, partition_ss)
    pooled = task.pooled_test_set(shards)
    layout = task.ModelLayout(config.input_dim, config.hidden_dim, config.classes)
    global_params = task.init_params(layout, np.random.default_rng(init_ss))

    dp_config = DpConfig(
        clip_norm=config.clip_norm,
        noise_multiplier=config.sigma,
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        local_epochs=config.local_epochs,
    )
    grid = tuple(range(1, config.lambda_max + 1))

    clients: list[_Client] = []
    client_seeds = clients_ss.spawn(len(config.profiles))
    for index, (profile, shard) in enumerate(zip(config.profiles, shards)):
        t_ss, d_ss, n_ss = client_seeds[index].spawn(3)
        if config.sigma > 0:
            mech = acct.MechanismParams(
                q=min(1.0, config.batch_size / len(shard.train)), sigma=config.sigma, lambda_grid=grid
            )
            state = acct.AccountantState.fresh(grid)
        else:
            mech, state = None, None
        clients.append(
            _Client(
                index=index,
                client_id=profile.tier_name,
                profile=profile,
                shard=shard,
                timing_rng=np.random.default_rng(t_ss),
                dropout_rng=np.random.default_rng(d_ss),
                training_rng=np.random.default_rng(n_ss),
                accountant=state,
                mech=mech,
            )
        )

    nominal_round = config.resolved_nominal_round_seconds()
    server = fed.ServerState(
        global_params=global_params,
        mode=config.mode,
        alpha=config.alpha,
        staleness_aware=config.staleness_aware,
        staleness_metric=config.staleness_metric,
        nominal_round_seconds=nominal_round,
    )
    for c in clients:
        server.register_client(c.client_id, len(c.shard.train))

    trace: list[SimEvent] = []
    trajectory: list[tuple[float, int, float]] = []
    tracker = _StopTracker(config.target_accuracy, config.sustain_evaluations)
    state = {"stop_reason": None, "rounds": 0, "aborted": 0, "final_time": 0.0}

    def local_eval(client: _Client, time: float) -> None:
        client.local_accuracy_trajectory.append((time, task.evaluate(server.global_params, client.shard.test)))

    def pooled_eval(time: float) -> float:
        accuracy = task.evaluate(server.global_params, pooled)
        trajectory.append((time, server.version, accuracy))
        trace.append(SimEvent(time, "evaluation_tick", "server", time))
        return accuracy

    def budget_exceeded(time: float) -> Optional[str]:
        if config.max_virtual_time is not None and time > config.max_virtual_time:
            return "time_budget"
        if server.version >= config.max_aggregations:
            return "aggregation_budget"
        return None

    if config.mode == fed.SYNCHRONOUS:
        _run_sync(config, server, clients, trace, tracker, state, pooled_eval, local_eval, dp_config, nominal_round)
    else:
        _run_async(config, server, clients, trace, tracker, state, pooled_eval, local_eval, dp_config, budget_exceeded)

    per_client = {}
    participation = _participation(clients)
    for c in clients:
        hist: dict[int, int] = {}
        for t in c.taus:
            hist[t] = hist.get(t, 0) + 1
        per_client[c.client_id] = ClientReport(
            tier_name=c.profile.tier_name,
            update_count=c.update_count,
            participation_pct=participation[c.client_id],
            dropouts=c.dropouts,
            staleness_mean=(float(np.mean(c.taus)) if (c.taus and config.mode == fed.ASYNCHRONOUS) else None),
            staleness_histogram=hist,
            staleness_values=list(c.taus),
            final_epsilon=(c.epsilon_trajectory[-1][1] if c.epsilon_trajectory else None),
            epsilon_trajectory=list(c.epsilon_trajectory),
            final_local_accuracy=(c.local_accuracy_trajectory[-1][1] if c.local_accuracy_trajectory else None),
            local_accuracy_trajectory=list(c.local_accuracy_trajectory),
        )

    return RunReport(
        mode=config.mode,
        seed=config.seed,
        accuracy_trajectory=trajectory,
        per_client=per_client,
        time_to_target=tracker.converged_at,
        target_accuracy=config.target_accuracy,
        participation_at_target=tracker.participation_snapshot,
        total_virtual_time=state["final_time"],
        total_aggregations=server.version,
        rounds_completed=state["rounds"],
        aborted_rounds=state["aborted"],
        stop_reason=state["stop_reason"],
        final_pooled_accuracy=(trajectory[-1][2] if trajectory else None),
        event_trace=trace,
    )


def _run_sync(config, server, clients, trace, tracker, state, pooled_eval, local_eval, dp_config, nominal_round):
    t = 0.0
    consecutive_aborts = 0
    while True:
        reason = None
        if config.max_virtual_time is not None and t >= config.max_virtual_time:
            reason = "time_budget"
        elif server.version >= config.max_aggregations:
            reason = "aggregation_budget"
        if reason:
            state["stop_reason"] = reason
            break

        participating = []
        for c in clients:
            if c.dropout_rng.random() < c.profile.dropout_prob_per_round:
                c.dropouts += 1
                trace.append(SimEvent(t, "dropout", c.client_id, t))
            else:
                participating.append(c)
        if not participating:
            state["aborted"] += 1
            consecutive_aborts += 1
            if consecutive_aborts > config.max_consecutive_aborted_rounds:
                raise SimulationAbortedError(
                    f"{consecutive_aborts} consecutive rounds with zero surviving clients"
                )
            t += nominal_round
            continue
        consecutive_aborts = 0

        fed.sync_round_begin(server, [c.client_id for c in participating], t)
        queue = _EventQueue()
        pending_updates: dict[str, tuple[fed.UpdateMessage, int, float]] = {}
        for c in participating:
            trace.append(SimEvent(t, "broadcast_delivery", c.client_id, t))
            local_eval(c, t)
            result = local_train(server.global_params, c.shard.train, dp_config, c.training_rng)
            arrival = t + sample_round_duration(c.profile, c.timing_rng)
            pending_updates[c.client_id] = (
                fed.UpdateMessage(
                    client_id=c.client_id,
                    params=result.params,
                    based_on_version=server.version,
                    sent_at=arrival,
                    shard_size=len(c.shard.train),
                ),
                result.mechanism_applications,
                arrival,
            )
            queue.push(SimEvent(arrival, "update_arrival", c.client_id, t), c.index)

        last_arrival = t
        by_id = {c.client_id: c for c in clients}
        while queue:
            event = queue.pop()
            trace.append(event)
            last_arrival = max(last_arrival, event.fire_at)
            client = by_id[event.client_id]
            _, applications, arrival = pending_updates[event.client_id]
            _compose_privacy(client, applications, config.composition_granularity, arrival, config.delta)
            client.update_count += 1
            client.taus.append(0)
            client.taus_agg.append(0)

        fed.sync_round_receive(server, [u for (u, _, _) in pending_updates.values()], last_arrival)
        state["rounds"] += 1
        t = last_arrival
        state["final_time"] = t
        accuracy = pooled_eval(t)
        if tracker.observe(t, accuracy, clients) and config.stop_on_target:
            state["stop_reason"] = "target"
            break


def _run_async(config, server, clients, trace, tracker, state, pooled_eval, local_eval, dp_config, budget_exceeded):
    queue = _EventQueue()
    in_flight: dict[str, tuple[fed.UpdateMessage, int]] = {}

    def dispatch(client: _Client, now: float) -> None:
        trace.append(SimEvent(now, "broadcast_delivery", client.client_id, now))
        local_eval(client, now)
        if client.dropout_rng.random() < client.profile.dropout_prob_per_round:
            client.dropouts += 1
            trace.append(SimEvent(now, "dropout", client.client_id, now))
            queue.push(SimEvent(now + client.profile.rejoin_delay, "rejoin", client.client_id, now), client.index)
            return
        globals_copy = server.record_dispatch(client.client_id, now)
        result = local_train(globals_copy, client.shard.train, dp_config, client.training_rng)
        arrival = now + sample_round_duration(client.profile, client.timing_rng)
        in_flight[client.client_id] = (
            fed.UpdateMessage(
                client_id=client.client_id,
                params=result.params,
                based_on_version=globals_copy.version,
                sent_at=arrival,
                shard_size=len(client.shard.train),
            ),
            result.mechanism_applications,
        )
        queue.push(SimEvent(arrival, "update_arrival", client.client_id, now), client.index)

    by_id = {c.client_id: c for c in clients}
    for c in clients:
        dispatch(c, 0.0)

    while queue:
        next_time = queue.peek_time()
        if config.max_virtual_time is not None and next_time > config.max_virtual_time:
            state["stop_reason"] = "time_budget"
            break
        event = queue.pop()
        trace.append(event)
        t = event.fire_at
        state["final_time"] = t
        client = by_id[event.client_id]

        if event.kind == "rejoin":
            dispatch(client, t)
            continue

        message, applications = in_flight.pop(event.client_id)
        _compose_privacy(client, applications, config.composition_granularity, t, config.delta)
        fed.fedasync_apply(server, message, received_at=t)
        record = server.update_log[-1]
        client.update_count += 1
        client.taus.append(record.tau)
        client.taus_agg.append(record.tau_aggregations)
        state["rounds"] = server.version
        accuracy = pooled_eval(t)
        if tracker.observe(t, accuracy, clients) and config.stop_on_target:
            state["stop_reason"] = "target"
            break
        reason = budget_exceeded(t)
        if reason:
            state["stop_reason"] = reason
            break
        dispatch(client, t)

    if state["stop_reason"] is None:
        state["stop_reason"] = "exhausted"

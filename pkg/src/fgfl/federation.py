"""Synchronous federated-learning round protocol with FedAvg and SCAFFOLD.

The server dispatches the global model each round, waits for every
selected client (duplicate deliveries are dropped by round/sender),
aggregates, evaluates a held-out validation split, and applies early
stopping; the returned weights always belong to the round with the best
validation MAE. Client drift under heterogeneous data is optionally
corrected with SCAFFOLD control variates: per-client running correction
vectors whose server-side mean adjusts each local step.

All math runs at float64 on the canonical flat parameter vector;
parameters cross the transport as float32, so results are identical for
any transport meeting the delivery contract.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
import threading
import time
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import wire
from .graphs import PatientSample
from .model import ModelConfig, ModelParameters, init_parameters, unflatten
from .training import (
    Metrics,
    OptimizerState,
    TrainConfig,
    adam_step,
    batch_loss_and_gradient,
    clip_gradients,
    flat_loss_and_gradient,
    evaluate,
    train_local,
)
from .transport import MessageEndpoint, Transport, TransportTimeout

log = logging.getLogger("fgfl.federation")

FEDAVG = "fedavg"
SCAFFOLD = "scaffold"


class FederationError(RuntimeError):
    pass


class ClientRejected(FederationError):
    pass


@dataclass
class FederationConfig:
    experiment_id: str = "exp"
    algorithm: str = FEDAVG
    rounds: int = 200
    patience: int = 10
    eta_g: float = 1.0
    local_lr: float = 0.003
    k_steps: int = 0  # 0: one pass over the shard at the training batch size
    sample_fraction: float = 1.0  # 1.0: full participation
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    scaffold_clip: float | None = None
    scaffold_optimizer: str = "sgd"  # Eq.-faithful default; "adam" optional
    persist_optimizer: bool = False
    round_timeout: float = 600.0
    join_timeout: float = 60.0
    max_round_retries: int = 1

    def __post_init__(self):
        if self.algorithm not in (FEDAVG, SCAFFOLD):
            raise FederationError(f"unknown algorithm {self.algorithm!r}")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise FederationError("sample_fraction must be in (0, 1]")


@dataclass
class ClientState:
    """Book-keeping for one client: shard, sample count, control variate."""

    client_id: str
    samples: list[PatientSample]
    control: np.ndarray | None = None  # c_i, zero-initialized for SCAFFOLD
    optimizer: OptimizerState | None = None

    @property
    def n(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class RoundPlan:
    round_index: int
    participants: tuple[str, ...]
    algorithm: str
    k_steps: int
    local_lr: float


@dataclass
class LocalUpdate:
    """What one client reports back for one round."""

    client_id: str
    round_index: int
    n: int
    params: np.ndarray | None = None  # FedAvg: full updated weights
    delta: np.ndarray | None = None  # SCAFFOLD: W_i^r - W^{r-1}
    control: np.ndarray | None = None  # SCAFFOLD: updated c_i^r

    def vector_length(self) -> int:
        vec = self.params if self.params is not None else self.delta
        return 0 if vec is None else vec.size


@dataclass
class FederationResult:
    w_star: np.ndarray  # float64 flat weights at the best validation round
    best_round: int
    best_val_mae: float
    rounds: list[dict]
    early_stopped: bool
    metrics_lines: list[dict] = field(default_factory=list)


def canonical_round_log(rounds: list[dict]) -> list[dict]:
    """Round log with volatile timing fields removed (for hashing/equality)."""
    return [{k: v for k, v in entry.items() if k != "wall_ms"} for entry in rounds]


def result_fingerprint(result: FederationResult) -> str:
    """SHA-256 over the float32 weights and the canonical round log."""
    digest = hashlib.sha256()
    digest.update(result.w_star.astype("<f4").tobytes())
    digest.update(json.dumps(canonical_round_log(result.rounds), sort_keys=True).encode())
    return digest.hexdigest()


def derive_seed(experiment_seed: int, round_index: int, client_id: str) -> int:
    """Stable per-(round, client) seed, identical across processes."""
    tag = zlib.crc32(client_id.encode("utf-8"))
    return int(np.random.SeedSequence([experiment_seed, round_index, tag]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# aggregation and local rounds (pure functions; float64 throughout)
# ---------------------------------------------------------------------------

def sample_clients(
    registry: list[str], fraction: float, experiment_seed: int, round_index: int
) -> tuple[str, ...]:
    """Select this round's participants (full participation by default)."""
    if not registry:
        raise FederationError("no registered clients")
    ordered = sorted(registry)
    if fraction >= 1.0:
        return tuple(ordered)
    count = max(1, round(fraction * len(ordered)))
    rng = np.random.default_rng([experiment_seed, round_index])
    picked = rng.choice(len(ordered), size=count, replace=False)
    return tuple(ordered[i] for i in sorted(picked))


def fedavg_aggregate(updates: list[LocalUpdate]) -> np.ndarray:
    """Sample-count-weighted average of client weights."""
    if not updates:
        raise FederationError("fedavg_aggregate: no updates")
    rounds = {u.round_index for u in updates}
    lengths = {u.vector_length() for u in updates}
    if len(rounds) != 1 or len(lengths) != 1:
        raise FederationError(f"inconsistent updates: rounds {rounds}, lengths {lengths}")
    ordered = sorted(updates, key=lambda u: u.client_id)
    total = sum(u.n for u in ordered)
    acc = np.zeros(ordered[0].vector_length())
    for u in ordered:
        if u.params is None:
            raise FederationError(f"update from {u.client_id} lacks full parameters")
        acc += (u.n / total) * np.asarray(u.params, dtype=np.float64)
    return acc


def scaffold_local_round(
    client: ClientState,
    w_global: np.ndarray,
    c_server: np.ndarray,
    k_steps: int,
    local_lr: float,
    model_config: ModelConfig,
    batch_size: int = 2,
    seed: int = 0,
    clip: float | None = None,
    optimizer: str = "sgd",
) -> LocalUpdate:
    """K drift-corrected local steps; returns the delta and the new c_i.

    Each step follows the corrected direction g - c_i + c where g is the
    mini-batch MSE gradient (computed without dropout, so the
    control-variate algebra is exact). With the default plain-SGD steps
    the control update c_i' = c_i - c + (W_prev - W_new)/(K lr), which
    equals the mean of the uncorrected gradients along the trajectory.
    With ``optimizer="adam"`` the corrected gradients feed a fresh Adam
    state instead, and c_i' is set to that gradient mean directly: the
    drift form would be in Adam's normalized units and corrupt later
    gradient-space corrections.
    """
    if k_steps < 1:
        raise FederationError(f"scaffold needs k_steps >= 1, got {k_steps}")
    if local_lr <= 0:
        raise FederationError("scaffold needs a positive local learning rate")
    if optimizer not in ("sgd", "adam"):
        raise FederationError(f"unknown scaffold optimizer {optimizer!r}")
    c_client = client.control
    if c_client is None:
        c_client = np.zeros_like(np.asarray(w_global, dtype=np.float64))
    w_prev = np.asarray(w_global, dtype=np.float64)
    w = w_prev.copy()
    rng = np.random.default_rng(seed)
    pending: list[np.ndarray] = []
    adam_state = (
        OptimizerState.fresh(w.size, lr=local_lr, weight_decay=0.0) if optimizer == "adam" else None
    )
    from .model import PredictionContext  # local import to avoid cycle at module load

    grad_ctx = PredictionContext(mode="eval")  # deterministic gradients, no dropout
    grad_sum = np.zeros_like(w)
    for _ in range(k_steps):
        if not pending:
            order = rng.permutation(client.n)
            pending = [order[i : i + batch_size] for i in range(0, client.n, batch_size)]
        batch = [client.samples[i] for i in pending.pop(0)]
        _, grad = flat_loss_and_gradient(w, model_config, batch, grad_ctx)
        if clip is not None:
            grad = clip_gradients(grad, clip)
        if not np.all(np.isfinite(grad)):
            raise FederationError(f"client {client.client_id}: non-finite gradient, aborting round")
        grad_sum += grad
        corrected = grad - c_client + c_server
        if adam_state is not None:
            w = adam_step(w, corrected, adam_state)
        else:
            w = w - local_lr * corrected
    delta = w - w_prev
    if adam_state is not None:
        c_new = grad_sum / k_steps
    else:
        c_new = c_client - c_server + (w_prev - w) / (k_steps * local_lr)
    return LocalUpdate(
        client_id=client.client_id,
        round_index=0,
        n=client.n,
        delta=delta,
        control=c_new,
    )


def scaffold_aggregate(
    updates: list[LocalUpdate],
    w_prev: np.ndarray,
    c_prev: np.ndarray,
    eta_g: float,
    previous_controls: dict[str, np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Global model and server-variate update from client deltas.

    W^r = W^{r-1} + (eta_g/|S|) sum(delta_i); the server variate moves by
    the mean client-variate change, so under full participation from zero
    it always equals the mean of the current client variates.
    """
    if not updates:
        raise FederationError("scaffold_aggregate: no updates")
    lengths = {u.vector_length() for u in updates} | {np.asarray(w_prev).size}
    if len(lengths) != 1:
        raise FederationError(f"scaffold_aggregate: inconsistent vector lengths {lengths}")
    ordered = sorted(updates, key=lambda u: u.client_id)
    count = len(ordered)
    delta_sum = np.zeros_like(np.asarray(w_prev, dtype=np.float64))
    control_shift = np.zeros_like(delta_sum)
    for u in ordered:
        if u.delta is None or u.control is None:
            raise FederationError(f"update from {u.client_id} lacks delta/control variate")
        delta_sum += np.asarray(u.delta, dtype=np.float64)
        prev = previous_controls.get(u.client_id)
        if prev is None:
            prev = np.zeros_like(delta_sum)
        control_shift += np.asarray(u.control, dtype=np.float64) - prev
    w_new = np.asarray(w_prev, dtype=np.float64) + (eta_g / count) * delta_sum
    c_new = np.asarray(c_prev, dtype=np.float64) + control_shift / count
    return w_new, c_new


def fedavg_local_round(
    client: ClientState,
    w_global: np.ndarray,
    model_config: ModelConfig,
    train_config: TrainConfig,
    persist_optimizer: bool = False,
) -> LocalUpdate:
    """Local FedAvg training from fresh global weights.

    Adam moments reset each round by default (matching the fresh global
    weights); with ``persist_optimizer`` the client keeps them across
    rounds.
    """
    params = unflatten(np.asarray(w_global, dtype=np.float64), model_config)
    state = None
    if persist_optimizer and train_config.optimizer == "adam":
        if client.optimizer is None:
            client.optimizer = OptimizerState.fresh(
                w_global.size, lr=train_config.lr, weight_decay=train_config.weight_decay
            )
        state = client.optimizer
    trained, _ = train_local(client.samples, params, train_config, optimizer_state=state)
    return LocalUpdate(
        client_id=client.client_id,
        round_index=0,
        n=client.n,
        params=trained.flatten(),
    )


def default_k_steps(n_samples: int, batch_size: int, local_epochs: int = 1) -> int:
    """One pass over the shard per epoch at the given batch size."""
    per_epoch = -(-n_samples // batch_size)
    return max(1, per_epoch * max(1, local_epochs))


# ---------------------------------------------------------------------------
# validation split
# ---------------------------------------------------------------------------

def validation_split(
    samples: list[PatientSample], fraction: float = 0.1, seed: int = 0
) -> tuple[list[PatientSample], list[PatientSample]]:
    """Split off a label-quartile-stratified validation subset."""
    if len(samples) < 2:
        raise FederationError("validation_split needs at least two samples")
    ordered = sorted(samples, key=lambda s: (s.label, s.patient_id))
    labels = np.array([s.label for s in ordered], dtype=np.float64)
    qs = np.percentile(labels, [25, 50, 75])
    bins: dict[int, list[PatientSample]] = {0: [], 1: [], 2: [], 3: []}
    for s in ordered:
        bins[int(np.searchsorted(qs, s.label, side="right"))].append(s)
    rng = np.random.default_rng(seed)
    want = max(1, round(fraction * len(samples)))
    val: list[PatientSample] = []
    order = [b for b in (0, 1, 2, 3) if bins[b]]
    quotas = {b: int(np.floor(fraction * len(bins[b]))) for b in order}
    for b in order:
        chosen = rng.choice(len(bins[b]), size=min(quotas[b], len(bins[b])), replace=False)
        val.extend(bins[b][i] for i in sorted(chosen))
    bi = 0
    while len(val) < want:  # top up round-robin from remaining bins
        b = order[bi % len(order)]
        remaining = [s for s in bins[b] if s not in val]
        if remaining:
            pick = rng.integers(len(remaining))
            val.append(remaining[pick])
        bi += 1
    val_ids = {s.patient_id for s in val}
    train = [s for s in samples if s.patient_id not in val_ids]
    val_in_order = [s for s in samples if s.patient_id in val_ids]
    return train, val_in_order


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------

class EarlyStopping:
    """Patience monitor over validation MAE; keeps the best weights."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_mae = np.inf
        self.best_round = 0
        self.best_weights: np.ndarray | None = None
        self.rounds_since_best = 0

    def observe(self, round_index: int, val_mae: float, weights: np.ndarray) -> bool:
        """Record one round; returns True when training should stop."""
        if val_mae < self.best_mae:
            self.best_mae = val_mae
            self.best_round = round_index
            self.best_weights = weights.copy()
            self.rounds_since_best = 0
        else:
            self.rounds_since_best += 1
        return self.rounds_since_best >= self.patience


# ---------------------------------------------------------------------------
# transport-driven server
# ---------------------------------------------------------------------------

class FederationServer:
    """Mode (a) parameter server: one round at a time, waits for all."""

    def __init__(
        self,
        config: FederationConfig,
        registry: list[str],
        validation: list[PatientSample],
        initial: ModelParameters,
        endpoint: MessageEndpoint,
    ):
        self.config = config
        self.registry = sorted(registry)
        if not self.registry:
            raise FederationError("server needs at least one registered client")
        self.validation = validation
        self.model_config = initial.config
        self.w = initial.flatten()
        self.c = np.zeros_like(self.w) if config.algorithm == SCAFFOLD else None
        self.client_controls: dict[str, np.ndarray] = {}
        self.client_n: dict[str, int] = {}
        self.endpoint = endpoint
        self._joined: dict[str, int] = {}  # client id -> join nonce

    # -- join phase ----------------------------------------------------------

    def _ack(self, client: str, accepted: bool, reason: str = "") -> None:
        msg = wire.FederationMessage(
            kind=wire.KIND_JOIN_ACK,
            experiment=self.config.experiment_id,
            round=0,
            sender="server",
            body=wire.JoinAckBody(client=client, accepted=accepted, reason=reason),
        )
        self.endpoint.send(wire.topic_for(wire.KIND_JOIN_ACK, self.config.experiment_id), msg)

    def _await_joins(self, join_sub) -> None:
        deadline = time.monotonic() + self.config.join_timeout
        while set(self._joined) != set(self.registry):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                missing = sorted(set(self.registry) - set(self._joined))
                raise FederationError(f"clients never joined: {missing}")
            msg = join_sub.receive(timeout=remaining)
            if msg.kind != wire.KIND_JOIN:
                continue
            if msg.experiment != self.config.experiment_id:
                self._ack(msg.sender, False, "experiment id mismatch")
                continue
            if msg.sender not in self.registry:
                self._ack(msg.sender, False, "unknown client id")
                continue
            nonce = msg.body.nonce
            if msg.sender in self._joined and self._joined[msg.sender] != nonce:
                self._ack(msg.sender, False, "duplicate client id")
                continue
            self._joined[msg.sender] = nonce
            self.client_n[msg.sender] = msg.body.n_samples
            self._ack(msg.sender, True)

    # -- round machinery -------------------------------------------------

    def _broadcast_global(self, plan: RoundPlan) -> None:
        payload = wire.ModelPayload(
            scheme_id=self.model_config.scheme_id,
            params=self.w,
            control=self.c if self.config.algorithm == SCAFFOLD else None,
        )
        body = wire.GlobalModelBody(
            payload=payload,
            algorithm=plan.algorithm,
            local_lr=plan.local_lr,
            k_steps=plan.k_steps,
            participants=plan.participants,
        )
        msg = wire.FederationMessage(
            kind=wire.KIND_GLOBAL_MODEL,
            experiment=self.config.experiment_id,
            round=plan.round_index,
            sender="server",
            body=body,
        )
        topic = wire.topic_for(wire.KIND_GLOBAL_MODEL, self.config.experiment_id, plan.round_index)
        self.endpoint.send(topic, msg, retain=True)

    def _collect_updates(self, plan: RoundPlan, update_sub) -> list[LocalUpdate]:
        expected = set(plan.participants)
        got: dict[str, LocalUpdate] = {}
        retries = 0
        deadline = time.monotonic() + self.config.round_timeout
        while set(got) != expected:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                missing = sorted(expected - set(got))
                if retries < self.config.max_round_retries:
                    retries += 1
                    log.warning(
                        "round %d: missing updates from %s, rebroadcasting (retry %d)",
                        plan.round_index, missing, retries,
                    )
                    self._broadcast_global(plan)
                    deadline = time.monotonic() + self.config.round_timeout
                    continue
                self._send_control(wire.KIND_ROUND_ABORT, plan.round_index, f"missing updates from {missing}")
                raise FederationError(f"round {plan.round_index} failed: no update from {missing}")
            try:
                msg = update_sub.receive(timeout=remaining)
            except TransportTimeout:
                continue
            if msg.kind != wire.KIND_LOCAL_UPDATE or msg.round != plan.round_index:
                continue  # stale or foreign traffic
            if msg.sender not in expected or msg.sender in got:
                continue  # duplicate delivery (QoS 1) or non-participant
            body = msg.body
            got[msg.sender] = LocalUpdate(
                client_id=msg.sender,
                round_index=msg.round,
                n=body.n_samples,
                params=(
                    body.payload.params.astype(np.float64)
                    if self.config.algorithm == FEDAVG
                    else None
                ),
                delta=(
                    body.payload.params.astype(np.float64)
                    if self.config.algorithm == SCAFFOLD
                    else None
                ),
                control=(
                    body.payload.control.astype(np.float64)
                    if body.payload.control is not None
                    else None
                ),
            )
        return [got[c] for c in sorted(got)]

    def _send_control(self, kind: str, round_index: int, text: str) -> None:
        if kind == wire.KIND_ROUND_ABORT:
            body = wire.RoundAbortBody(reason=text)
        else:
            body = wire.ExperimentEndBody(status=text, final_round=round_index)
        msg = wire.FederationMessage(
            kind=kind,
            experiment=self.config.experiment_id,
            round=round_index,
            sender="server",
            body=body,
        )
        self.endpoint.send(wire.topic_for(kind, self.config.experiment_id), msg)

    def run(self) -> FederationResult:
        cfg = self.config
        update_sub = self.endpoint.listen(f"fl/{cfg.experiment_id}/round/+/update/+")
        join_sub = self.endpoint.listen(wire.topic_for(wire.KIND_JOIN, cfg.experiment_id))
        self._await_joins(join_sub)

        stopper = EarlyStopping(cfg.patience)
        rounds_log: list[dict] = []
        metrics_lines: list[dict] = []
        early = False
        final_round = 0
        for round_index in range(1, cfg.rounds + 1):
            final_round = round_index
            started = time.perf_counter()
            participants = sample_clients(self.registry, cfg.sample_fraction, cfg.seed, round_index)
            plan = RoundPlan(
                round_index=round_index,
                participants=participants,
                algorithm=cfg.algorithm,
                k_steps=cfg.k_steps,
                local_lr=cfg.local_lr,
            )
            self._broadcast_global(plan)
            updates = self._collect_updates(plan, update_sub)
            for u in updates:
                u.round_index = round_index
            if cfg.algorithm == FEDAVG:
                self.w = fedavg_aggregate(updates)
            else:
                self.w, self.c = scaffold_aggregate(
                    updates, self.w, self.c, cfg.eta_g, self.client_controls
                )
                for u in updates:
                    self.client_controls[u.client_id] = u.control
            val = evaluate(self.validation, unflatten(self.w, self.model_config))
            metrics_lines.append(val.json_line(round_index, "server", "val"))
            stop = stopper.observe(round_index, val.mae, self.w)
            rounds_log.append(
                {
                    "round": round_index,
                    "algorithm": cfg.algorithm,
                    "participants": list(participants),
                    "val_mae": val.mae,
                    "wall_ms": round((time.perf_counter() - started) * 1000.0, 3),
                    "early_stopped": False,
                }
            )
            if stop:
                early = True
                rounds_log[-1]["early_stopped"] = True
                break
        self._send_control(wire.KIND_EXPERIMENT_END, final_round, "done")
        w_star = stopper.best_weights if stopper.best_weights is not None else self.w
        return FederationResult(
            w_star=w_star,
            best_round=stopper.best_round,
            best_val_mae=float(stopper.best_mae),
            rounds=rounds_log,
            early_stopped=early,
            metrics_lines=metrics_lines,
        )


# ---------------------------------------------------------------------------
# transport-driven client
# ---------------------------------------------------------------------------

class FederationClient:
    """One training participant; single-threaded."""

    def __init__(
        self,
        client_id: str,
        samples: list[PatientSample],
        config: FederationConfig,
        model_config: ModelConfig,
        endpoint: MessageEndpoint,
        join_nonce: int | None = None,
    ):
        self.state = ClientState(client_id=client_id, samples=samples)
        self.config = config
        self.model_config = model_config
        self.endpoint = endpoint
        self.join_nonce = (
            join_nonce
            if join_nonce is not None
            else int.from_bytes(np.random.SeedSequence().entropy.to_bytes(16, "little")[:8], "little")
        )

    def _join(self, inbox) -> None:
        cfg = self.config
        join_msg = wire.FederationMessage(
            kind=wire.KIND_JOIN,
            experiment=cfg.experiment_id,
            round=0,
            sender=self.state.client_id,
            body=wire.JoinBody(
                scheme_id=self.model_config.scheme_id,
                n_samples=self.state.n,
                nonce=self.join_nonce,
            ),
        )
        topic = wire.topic_for(wire.KIND_JOIN, cfg.experiment_id)
        deadline = time.monotonic() + cfg.join_timeout
        self.endpoint.send(topic, join_msg)
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise FederationError(f"{self.state.client_id}: no join-ack from server")
            try:
                msg = inbox.receive(timeout=min(2.0, remaining))
            except TransportTimeout:
                self.endpoint.send(topic, join_msg)  # ack may have raced our subscribe
                continue
            if msg.kind == wire.KIND_JOIN_ACK and msg.body.client == self.state.client_id:
                if not msg.body.accepted:
                    raise ClientRejected(f"{self.state.client_id}: join rejected: {msg.body.reason}")
                return

    def _train_round(self, msg: wire.FederationMessage) -> LocalUpdate:
        cfg = self.config
        body = msg.body
        w_global = body.payload.params.astype(np.float64)
        seed = derive_seed(cfg.seed, msg.round, self.state.client_id)
        if body.algorithm == SCAFFOLD:
            c_server = body.payload.control.astype(np.float64)
            k = body.k_steps or default_k_steps(
                self.state.n, cfg.train.batch_size, cfg.train.local_epochs
            )
            update = scaffold_local_round(
                self.state,
                w_global,
                c_server,
                k_steps=k,
                local_lr=body.local_lr or cfg.local_lr,
                model_config=self.model_config,
                batch_size=cfg.train.batch_size,
                seed=seed,
                clip=cfg.scaffold_clip,
                optimizer=cfg.scaffold_optimizer,
            )
            self.state.control = update.control
        else:
            update = fedavg_local_round(
                self.state,
                w_global,
                self.model_config,
                replace(cfg.train, seed=seed),
                persist_optimizer=cfg.persist_optimizer,
            )
        update.round_index = msg.round
        return update

    def _send_update(self, update: LocalUpdate) -> None:
        cfg = self.config
        vec = update.params if update.params is not None else update.delta
        payload = wire.ModelPayload(
            scheme_id=self.model_config.scheme_id,
            params=vec,
            control=update.control,
        )
        msg = wire.FederationMessage(
            kind=wire.KIND_LOCAL_UPDATE,
            experiment=cfg.experiment_id,
            round=update.round_index,
            sender=self.state.client_id,
            body=wire.LocalUpdateBody(payload=payload, n_samples=update.n),
        )
        topic = wire.topic_for(
            wire.KIND_LOCAL_UPDATE, cfg.experiment_id, update.round_index, self.state.client_id
        )
        self.endpoint.send(topic, msg)

    def run(self) -> None:
        cfg = self.config
        inbox = self.endpoint.listen(
            f"fl/{cfg.experiment_id}/round/+/global",
            f"fl/{cfg.experiment_id}/control",
        )
        self._join(inbox)
        last_round = 0
        while True:
            msg = inbox.receive(timeout=cfg.round_timeout + cfg.join_timeout)
            if msg.experiment != cfg.experiment_id:
                continue
            if msg.kind == wire.KIND_EXPERIMENT_END:
                return
            if msg.kind == wire.KIND_ROUND_ABORT:
                log.warning("%s: round %d aborted by server", self.state.client_id, msg.round)
                continue
            if msg.kind != wire.KIND_GLOBAL_MODEL or msg.round <= last_round:
                continue  # duplicate or stale broadcast
            if self.state.client_id not in msg.body.participants:
                last_round = msg.round
                continue
            update = self._train_round(msg)
            last_round = msg.round
            self._send_update(update)


# ---------------------------------------------------------------------------
# whole-experiment drivers
# ---------------------------------------------------------------------------

def run_federation(
    config: FederationConfig,
    shards: dict[str, list[PatientSample]],
    validation: list[PatientSample],
    initial: ModelParameters,
    transport_factory,
) -> FederationResult:
    """Run server plus one worker thread per client over a transport.

    ``transport_factory(name)`` returns the transport handle for each
    participant ("server" or a client id); a shared loopback instance and
    per-process MQTT connections both fit this signature.
    """
    server = FederationServer(
        config=config,
        registry=list(shards),
        validation=validation,
        initial=initial,
        endpoint=MessageEndpoint(transport_factory("server")),
    )
    clients = [
        FederationClient(
            client_id=cid,
            samples=samples,
            config=config,
            model_config=initial.config,
            endpoint=MessageEndpoint(transport_factory(cid)),
        )
        for cid, samples in sorted(shards.items())
    ]
    errors: list[Exception] = []

    def client_main(client: FederationClient) -> None:
        try:
            client.run()
        except Exception as exc:  # surfaced after join
            errors.append(exc)

    threads = [
        threading.Thread(target=client_main, args=(c,), daemon=True, name=f"client-{c.state.client_id}")
        for c in clients
    ]
    # compute-bound worker threads: a coarser GIL switch interval avoids
    # needless churn while the server blocks on the update queue
    previous_interval = sys.getswitchinterval()
    sys.setswitchinterval(0.05)
    for t in threads:
        t.start()
    try:
        result = server.run()
    finally:
        for t in threads:
            t.join(timeout=30.0)
        sys.setswitchinterval(previous_interval)
    if errors:
        raise errors[0]
    return result


def run_centralized(
    train: list[PatientSample],
    validation: list[PatientSample],
    initial: ModelParameters,
    config: FederationConfig,
) -> FederationResult:
    """Pooled training with the same round/early-stopping scaffolding.

    Equivalent to FedAvg with a single client holding everything; run
    directly (no transport) for speed.
    """
    w = initial.flatten()
    stopper = EarlyStopping(config.patience)
    rounds_log: list[dict] = []
    metrics_lines: list[dict] = []
    early = False
    state = None
    if config.persist_optimizer and config.train.optimizer == "adam":
        state = OptimizerState.fresh(w.size, lr=config.train.lr, weight_decay=config.train.weight_decay)
    for round_index in range(1, config.rounds + 1):
        started = time.perf_counter()
        seed = derive_seed(config.seed, round_index, "centralized")
        params = unflatten(w, initial.config)
        trained, _ = train_local(train, params, replace(config.train, seed=seed), optimizer_state=state)
        w = trained.flatten()
        val = evaluate(validation, unflatten(w, initial.config))
        metrics_lines.append(val.json_line(round_index, "centralized", "val"))
        stop = stopper.observe(round_index, val.mae, w)
        rounds_log.append(
            {
                "round": round_index,
                "algorithm": "centralized",
                "participants": ["centralized"],
                "val_mae": val.mae,
                "wall_ms": round((time.perf_counter() - started) * 1000.0, 3),
                "early_stopped": False,
            }
        )
        if stop:
            early = True
            rounds_log[-1]["early_stopped"] = True
            break
    w_star = stopper.best_weights if stopper.best_weights is not None else w
    return FederationResult(
        w_star=w_star,
        best_round=stopper.best_round,
        best_val_mae=float(stopper.best_mae),
        rounds=rounds_log,
        early_stopped=early,
        metrics_lines=metrics_lines,
    )


def run_isolated(
    shards: dict[str, list[PatientSample]],
    initial: ModelParameters,
    config: FederationConfig,
    val_fraction: float = 0.1,
) -> dict[str, FederationResult]:
    """Independent per-client training without collaboration."""
    results: dict[str, FederationResult] = {}
    for cid in sorted(shards):
        samples = shards[cid]
        train, val = validation_split(samples, fraction=val_fraction, seed=derive_seed(config.seed, 0, cid))
        sub = replace(config, experiment_id=f"{config.experiment_id}-{cid}")
        result = run_centralized(train, val, initial, sub)
        results[cid] = result
    return results

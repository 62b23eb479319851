"""Round-based simulation of federated co-training with adaptive weighting.

Each round every client evaluates its previous model on its private data and
on the current pseudo-labelled pool, derives its adaptive weight, and runs one
SGD epoch on the combined loss. On rounds with ``t % b == b - 1`` clients
upload predictions (and expertise) on the public pool, the server forms the
consensus, and the new pseudo-labels replace the old ones.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .consensus import (
    EXPERTISE_VARIANTS, FREQUENCY, UNIFORM, Upload, consensus_argmax, dp_noise_expertise,
    expertise_frequency, expertise_uncertainty, majority_consensus, predict_hard,
    weighted_score_matrix,
)
from .data import Dataset, PublicPool
from .learner import (
    LOGISTIC, MLP, MODEL_KINDS, Model, combined_loss, compute_lambda, cross_entropy_loss,
    init_model, sgd_epoch,
)
from .metrics import (
    LedgerEntry, RoundStat, RunRecord, SyncStat, accuracy, estimate_smoothness,
    grad_norm_sq_sample, gradient_variance, pseudo_label_drift,
)

log = logging.getLogger(__name__)

FEDMOSAIC = "fedmosaic"
FEDCT = "fedct_majority"
LOCAL = "local_only"
CENTRALIZED = "centralized"
MODES = (FEDMOSAIC, FEDCT, LOCAL, CENTRALIZED)

EXPERTISE_BYTES = 8  # float64 on the wire

_INIT_TAG = 1 << 20
_DP_TAG = 1 << 21


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DPConfig:
    epsilon: float
    clip_max: float = 1.0


@dataclass(frozen=True)
class ProtocolConfig:
    num_rounds: int = 20
    sync_period: int = 1
    step_size: float = 0.1
    batch_size: int = 16
    expertise_variant: str = FREQUENCY
    dp: Optional[DPConfig] = None
    mode: str = FEDMOSAIC
    seed: int = 0
    model_kind: str = LOGISTIC
    hidden: int = 16
    n_jobs: int = 1
    diagnostics: bool = True

    def validate(self):
        if self.num_rounds < 1:
            raise ConfigError("num_rounds must be >= 1")
        if self.sync_period < 1:
            raise ConfigError("sync_period must be >= 1")
        if not self.step_size > 0:
            raise ConfigError("step_size must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.expertise_variant not in EXPERTISE_VARIANTS:
            raise ConfigError(f"unknown expertise variant {self.expertise_variant!r}")
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model_kind!r}")
        if self.model_kind == MLP and self.hidden < 1:
            raise ConfigError("hidden must be >= 1")
        if self.dp is not None:
            if self.mode != FEDMOSAIC:
                raise ConfigError(f"dp noise applies to expertise; mode {self.mode!r} sends none")
            if not self.dp.epsilon > 0 or not self.dp.clip_max > 0:
                raise ConfigError("dp epsilon and clip_max must be positive")
        if self.n_jobs < 1:
            raise ConfigError("n_jobs must be >= 1")
        return self

    def replace(self, **changes) -> "ProtocolConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def is_sync_round(t: int, sync_period: int) -> bool:
    return t % sync_period == sync_period - 1


def derive_seed(seed: int, *keys: int) -> int:
    """Per-client/per-round stream seed; independent of execution order."""
    ss = np.random.SeedSequence([int(seed), *map(int, keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class LambdaState:
    value: float = 0.0
    loss_priv: float = float("nan")
    loss_pseudo: Optional[float] = None
    round: int = -1


@dataclass
class ClientState:
    id: int
    model: Model
    data: Dataset
    class_freq: np.ndarray
    test: Optional[Dataset] = None
    lam: LambdaState = field(default_factory=LambdaState)

    def __post_init__(self):
        if not np.array_equal(self.class_freq, self.data.class_counts()):
            raise ValueError(f"client {self.id}: class_freq disagrees with its data")


@dataclass
class ServerState:
    num_clients: int
    num_classes: int
    round: int = 0
    consensus: Optional[np.ndarray] = None
    received: dict = field(default_factory=dict)

    def receive(self, upload: Upload):
        if upload.client_id in self.received:
            raise RuntimeError(f"duplicate upload from client {upload.client_id}")
        self.received[upload.client_id] = upload

    def aggregate(self, mode: str, round: int) -> np.ndarray:
        missing = sorted(set(range(self.num_clients)) - set(self.received))
        if missing:
            raise RuntimeError(f"round {round}: missing uploads from clients {missing}")
        ups = [self.received[i] for i in sorted(self.received)]
        preds = [u.labels for u in ups]
        if mode == FEDCT:
            labels = majority_consensus(preds, self.num_classes)
        else:
            S = weighted_score_matrix(preds, [u.expertise for u in ups], self.num_classes)
            labels = consensus_argmax(S)
        self.received.clear()
        self.consensus = labels
        self.round = round
        return labels


def label_bits(num_classes: int) -> int:
    return max(1, math.ceil(math.log2(num_classes)))


def message_sizes(num_clients: int, public_size: int, num_classes: int,
                  with_expertise: bool, round: int = 0) -> LedgerEntry:
    """Traffic of one synchronisation. Analytic byte columns may be fractional;
    wire columns round each message up to whole bytes."""
    bits = label_bits(num_classes)
    label_bytes = public_size * bits / 8
    scalars = public_size if with_expertise else 0
    up_msg = label_bytes + scalars * EXPERTISE_BYTES
    up_wire = math.ceil(label_bytes) + scalars * EXPERTISE_BYTES
    return LedgerEntry(
        round=round,
        uplink_label_entries=num_clients * public_size,
        uplink_scalars=num_clients * scalars,
        uplink_bytes=num_clients * up_msg,
        uplink_wire_bytes=num_clients * up_wire,
        downlink_label_entries=num_clients * public_size,
        downlink_bytes=num_clients * label_bytes,
        downlink_wire_bytes=num_clients * math.ceil(label_bytes),
    )


def _local_round(client: ClientState, t: int, pool_X, pseudo, config: ProtocolConfig):
    model, data = client.model, client.data
    loss_priv = cross_entropy_loss(model, data.X, data.y)
    if pseudo is None or config.mode == LOCAL:
        lam, loss_pseudo, Xu, yu = 0.0, None, None, None
    else:
        Xu, yu = pool_X, pseudo
        loss_pseudo = cross_entropy_loss(model, Xu, yu)
        lam = compute_lambda(loss_priv, loss_pseudo)
    gn = grad_norm_sq_sample(model, data.X, data.y, Xu, yu, lam)
    new_model = sgd_epoch(model, data.X, data.y, Xu, yu, lam, config.step_size,
                          config.batch_size, seed=derive_seed(config.seed, client.id, t))
    acc = accuracy(new_model, client.test) if client.test is not None else float("nan")
    lam_state = LambdaState(lam, loss_priv, loss_pseudo, t)
    stat = RoundStat(t, client.id, lam, loss_priv, loss_pseudo, acc, gn)
    return dataclasses.replace(client, model=new_model, lam=lam_state), stat


def _expertise(client: ClientState, labels, pool_X, config: ProtocolConfig, t: int):
    v = config.expertise_variant
    if v == FREQUENCY:
        E = expertise_frequency(client.class_freq, labels)
    elif v == UNIFORM:
        E = np.ones(len(labels))
    else:
        E = expertise_uncertainty(client.model, pool_X, v)
    if config.dp is not None:
        E = dp_noise_expertise(E, config.dp.epsilon, config.dp.clip_max,
                               seed=derive_seed(config.seed, client.id, t, _DP_TAG))
    return E


def make_upload(client: ClientState, pool_X, config: ProtocolConfig, t: int) -> Upload:
    labels = predict_hard(client.model, pool_X)
    E = None if config.mode == FEDCT else _expertise(client, labels, pool_X, config, t)
    return Upload(client.id, t, labels, E)


def sync_round(clients: Sequence[ClientState], server: ServerState, config: ProtocolConfig,
               t: int, pool: PublicPool):
    """Collect uploads from every client, aggregate, and account the traffic."""
    if not is_sync_round(t, config.sync_period):
        raise RuntimeError(f"round {t} is not a sync round for b={config.sync_period}")
    for c in clients:
        server.receive(make_upload(c, pool.X, config, t))
    labels = server.aggregate(config.mode, t)
    entry = message_sizes(len(clients), len(pool), server.num_classes,
                          with_expertise=config.mode == FEDMOSAIC, round=t)
    return labels, entry


def _map(fn, items, n_jobs: int):
    if n_jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, items))


def _check_inputs(clients_data, test_sets):
    if len(clients_data) < 1:
        raise ConfigError("need at least one client")
    if len(test_sets) != len(clients_data):
        raise ConfigError("need one test set per client")
    dims = {d.dim for d in clients_data} | {d.dim for d in test_sets}
    classes = {d.num_classes for d in clients_data}
    if len(dims) != 1 or len(classes) != 1:
        raise ConfigError("clients disagree on feature dimension or number of classes")
    if any(len(d) == 0 for d in clients_data):
        raise ConfigError("empty client dataset")
    return dims.pop(), classes.pop()


def _new_model(config: ProtocolConfig, dim: int, num_classes: int, client_id: int) -> Model:
    return init_model(config.model_kind, dim, num_classes,
                      config.hidden if config.model_kind == MLP else None,
                      seed=derive_seed(config.seed, client_id, _INIT_TAG))


def run_experiment(clients_data: Sequence[Dataset], public_pool: Optional[PublicPool],
                   test_sets: Sequence[Dataset], config: ProtocolConfig,
                   pool_truth=None) -> RunRecord:
    config.validate()
    if config.mode == CENTRALIZED:
        return run_centralized(pool_datasets(clients_data), test_sets, config)
    dim, C = _check_inputs(clients_data, test_sets)
    m = len(clients_data)
    co_training = config.mode in (FEDMOSAIC, FEDCT)
    if co_training and (public_pool is None or len(public_pool) == 0):
        raise ConfigError(f"mode {config.mode!r} needs a non-empty public pool")
    if public_pool is not None and len(public_pool) and public_pool.dim != dim:
        raise ConfigError("public pool dimension differs from client data")

    clients = [
        ClientState(i, _new_model(config, dim, C, i), d, d.class_counts(), test_sets[i])
        for i, d in enumerate(clients_data)
    ]
    server = ServerState(m, C)
    pool_X = public_pool.X if public_pool is not None else None
    U = len(public_pool) if public_pool is not None else 0
    record = RunRecord(config=config.to_dict(), seed=config.seed, num_clients=m,
                       public_size=U, min_shard_size=min(len(d) for d in clients_data))
    pseudo = None

    for t in range(config.num_rounds):
        results = _map(lambda c: _local_round(c, t, pool_X, pseudo, config), clients,
                       config.n_jobs)
        clients = [c for c, _ in results]
        stats = [s for _, s in results]

        if co_training and is_sync_round(t, config.sync_period):
            labels, entry = sync_round(clients, server, config, t, public_pool)
            sync = _sync_diagnostics(clients, pool_X, pseudo, labels, pool_truth, config, t)
            per_up = entry.uplink_bytes / m
            per_down = entry.downlink_bytes / m
            for s in stats:
                s.uplink_bytes, s.downlink_bytes = per_up, per_down
                s.pseudo_label_drift = sync.drift
            record.syncs.append(sync)
            pseudo = labels
        else:
            entry = LedgerEntry(round=t)
        record.ledger.append(entry)
        record.rounds.extend(stats)
        log.debug("round %d done (%s)", t, config.mode)

    record.final_models = [c.model.to_dict() for c in clients]
    if config.diagnostics:
        record.smoothness = [
            estimate_smoothness(c.model, c.data.X, c.data.y,
                                pool_X if pseudo is not None else None, pseudo, c.lam.value,
                                seed=derive_seed(config.seed, c.id))
            for c in clients
        ]
    return record


def _sync_diagnostics(clients, pool_X, prev, labels, truth, config, t) -> SyncStat:
    sync = SyncStat(round=t, labels=[int(v) for v in labels])
    if prev is not None:
        sync.drift = pseudo_label_drift(prev, labels)
    if truth is not None:
        sync.pseudo_label_acc = float(np.mean(np.asarray(truth) == labels))
    if not config.diagnostics:
        return sync
    if prev is not None:
        sync.objective_drift = [
            abs(combined_loss(c.model, c.data.X, c.data.y, pool_X, labels, c.lam.value)
                - combined_loss(c.model, c.data.X, c.data.y, pool_X, prev, c.lam.value))
            for c in clients
        ]
    sync.sigma_bar_sq = [gradient_variance(c.model, c.data.X, c.data.y) for c in clients]
    sync.sigma_tilde_sq = [gradient_variance(c.model, pool_X, labels) for c in clients]
    return sync


def pool_datasets(datasets: Sequence[Dataset]) -> Dataset:
    return Dataset(
        np.concatenate([d.X for d in datasets]),
        np.concatenate([d.y for d in datasets]),
        datasets[0].num_classes,
        np.concatenate([d.ids for d in datasets]),
    )


def run_centralized(all_data_pooled: Dataset, test_sets: Sequence[Dataset],
                    config: ProtocolConfig) -> RunRecord:
    """One model on the union of all shards, scored on every client's test set.

    Uses client 0's init and SGD seeds, so with a single client it replays
    the local-only trajectory exactly.
    """
    config = config.replace(mode=CENTRALIZED)
    config.validate()
    dim, C = _check_inputs([all_data_pooled], [all_data_pooled])
    if any(t.dim != dim for t in test_sets):
        raise ConfigError("test set dimension differs from training data")
    data = all_data_pooled
    model = _new_model(config, dim, C, 0)
    m = len(test_sets)
    record = RunRecord(config=config.to_dict(), seed=config.seed, num_clients=m,
                       public_size=0, min_shard_size=len(data))
    for t in range(config.num_rounds):
        loss = cross_entropy_loss(model, data.X, data.y)
        gn = grad_norm_sq_sample(model, data.X, data.y)
        model = sgd_epoch(model, data.X, data.y, step_size=config.step_size,
                          batch_size=config.batch_size, seed=derive_seed(config.seed, 0, t))
        for i, test in enumerate(test_sets):
            record.rounds.append(RoundStat(t, i, 0.0, loss, None, accuracy(model, test), gn))
        record.ledger.append(LedgerEntry(round=t))
    record.final_models = [model.to_dict()] * m
    if config.diagnostics:
        record.smoothness = [estimate_smoothness(model, data.X, data.y,
                                                 seed=derive_seed(config.seed, 0))] * m
    return record

"""Federated orchestration: rounds, client updates, and server-side generator training.

The server owns a flat global parameter vector, an optional frozen classifier,
and an optional conditional generator.  Each round it may refresh the
generator against the current global model, samples a client subset, runs
local training on each participant, and uniformly averages the returned
vectors.  All randomness flows through explicitly owned generator streams so
runs are reproducible even with thread-pooled clients.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .concept_space import (
    ConceptDistribution,
    DistributionClassifier,
    classifier_logits,
    classifier_logits_backward,
    sample_condition_batch,
)
from .data import LabeledDataset, PartitionPlan
from .losses import (
    GeneratorLossConfig,
    distribution_loss,
    diversity_loss,
    generator_loss,
    semantic_loss,
    surrogate_align_loss,
)
from .nn import (
    AdamState,
    ConditionalGenerator,
    ParameterVector,
    adam_step,
    model_to_vector,
    vector_to_model,
)

logger = logging.getLogger(__name__)

METHODS = ("fedbm", "fedavg", "lkcc-only", "cgde-only")


@dataclass
class TrainingConfig:
    """Runtime knobs shared by client updates and generator refreshes."""

    method: str = "fedbm"
    local_epochs: int = 1
    batch_size: int = 8
    synthetic_batch: int = 8
    learning_rate: float = 1e-2
    lr_decay: float = 0.99
    participation: float = 0.5
    generator_period: int = 5
    generator_steps: int = 100
    generator_batch: int = 32
    generator_lr: float = 1e-3
    gen_loss: GeneratorLossConfig = field(default_factory=GeneratorLossConfig)
    workers: int = 1

    def uses_generator(self) -> bool:
        return self.method in ("fedbm", "cgde-only")

    def uses_frozen_classifier(self) -> bool:
        return self.method in ("fedbm", "lkcc-only", "cgde-only")


@dataclass
class ClientState:
    """One client: its id, private shard, rng stream, and local epoch count."""

    client_id: int
    data: LabeledDataset
    rng: np.random.Generator
    epochs: int = 1


@dataclass
class ServerState:
    """Global model plus the frozen-classifier / generator attachments."""

    model_vector: ParameterVector
    classifier: DistributionClassifier | None = None
    dists: list[ConceptDistribution] | None = None
    generator: ConditionalGenerator | None = None
    gen_opt: AdamState | None = None
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    round: int = 0
    generator_ready: bool = False


@dataclass
class RoundReport:
    """Everything one round produced, in CSV order."""

    round: int
    participant_ids: tuple
    mean_local_loss: float
    test_accuracy: float
    test_macro_f1: float
    val_accuracy: float
    val_macro_f1: float
    gen_sem: float | None = None
    gen_div: float | None = None
    gen_dis: float | None = None
    seconds: float = 0.0

    @property
    def n_participants(self) -> int:
        return len(self.participant_ids)


def spawn_streams(seed: int, num_clients: int):
    """Deterministic rng tree: (model_init, server, partition, per-client list).

    Client streams are created once and advance only when their client trains,
    so participation patterns do not perturb other clients' draws.
    """
    root = np.random.SeedSequence(seed)
    model_ss, server_ss, partition_ss, clients_ss = root.spawn(4)
    client_rngs = [np.random.default_rng(s) for s in clients_ss.spawn(num_clients)]
    return (
        np.random.default_rng(model_ss),
        np.random.default_rng(server_ss),
        np.random.default_rng(partition_ss),
        client_rngs,
    )


def build_clients(
    train: LabeledDataset, plan: PartitionPlan, rngs: list[np.random.Generator], epochs: int
) -> list[ClientState]:
    if len(rngs) != plan.num_clients:
        raise ValueError(f"{len(rngs)} rng streams for {plan.num_clients} clients")
    return [
        ClientState(client_id=i, data=train.subset(ix, "train"), rng=rngs[i], epochs=epochs)
        for i, ix in enumerate(plan.client_indices)
    ]


def aggregate(vectors: list[ParameterVector]) -> ParameterVector:
    """Uniform mean of parameter vectors (running statistics included)."""
    if not vectors:
        raise ValueError("nothing to aggregate")
    layout = vectors[0].layout
    for i, v in enumerate(vectors[1:], start=1):
        if v.layout != layout:
            raise ValueError(f"vector {i} layout differs from vector 0")
    mean = np.stack([v.values for v in vectors], axis=0).mean(axis=0)
    return ParameterVector(values=mean, layout=layout)


def client_update(
    client: ClientState,
    global_vec: ParameterVector,
    classifier: DistributionClassifier | None,
    generator: ConditionalGenerator | None,
    dists: list[ConceptDistribution] | None,
    cfg: TrainingConfig,
    round_idx: int,
) -> tuple[ParameterVector, float]:
    """Local training for one client; returns (updated vector, mean step loss).

    Starts from the broadcast vector, runs ``client.epochs`` epochs of
    shuffled mini-batches, and, when a generator is supplied, appends a fresh
    synthetic batch (labels drawn uniformly, conditions sampled from the class
    Gaussians) to every real batch.  The frozen classifier is never updated.
    The optimizer is created fresh each call with the lr schedule continued
    from ``round_idx``: lr * decay^(round_idx * epochs), decayed again after
    each local epoch.
    """
    model, head = vector_to_model(global_vec)
    if head is None and classifier is None:
        raise ValueError("need either a frozen classifier or a trainable head")
    params = dict(model.params)
    if head is not None:
        for k, v in head.params.items():
            params[f"head.{k}"] = v
    lr = cfg.learning_rate * cfg.lr_decay ** (round_idx * client.epochs)
    opt = AdamState(lr=lr, decay=cfg.lr_decay)
    n = len(client.data)
    num_classes = classifier.num_classes if classifier is not None else head.num_classes
    step_losses = []
    for _ in range(client.epochs):
        order = client.rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = client.data.x[idx]
            yb = client.data.y[idx]
            if generator is not None and cfg.synthetic_batch > 0:
                ys = client.rng.integers(0, num_classes, size=cfg.synthetic_batch)
                z = sample_condition_batch(dists, ys, client.rng)
                xs, _ = generator.forward(z)
                xb = np.concatenate([xb, xs], axis=0)
                yb = np.concatenate([yb, ys], axis=0)
            if xb.shape[0] < 2:
                continue  # train-mode BN needs at least 2 rows
            h, _, cache = model.forward(xb, "train")
            if classifier is not None:
                lv = surrogate_align_loss(h, yb, classifier)
                dh = lv.grads["features"]
                grads, _ = model.backward(cache, dh)
            else:
                logits = head.forward(h)
                lv = semantic_loss(logits, yb)
                head_grads, dh = head.backward(h, lv.grads["logits"])
                grads, _ = model.backward(cache, dh)
                for k, g in head_grads.items():
                    grads[f"head.{k}"] = g
            adam_step(opt, params, grads)
            step_losses.append(lv.value)
        opt.decay_lr()
    mean_loss = float(np.mean(step_losses)) if step_losses else 0.0
    return model_to_vector(model, head), mean_loss


def train_generator(server: ServerState, cfg: TrainingConfig) -> dict:
    """Refresh the server generator against the frozen current global model.

    Per step: sample labels and conditions, generate a batch, push it through
    a copy of the global model in train mode, and take one Adam step on the
    combined objective (semantic + diversity + statistics matching).  The
    statistics target is the global model's running stats, which are read once
    and never written; the global vector is bit-identical afterwards.
    Returns the mean loss components over the refresh.
    """
    if server.generator is None or server.classifier is None or server.dists is None:
        raise ValueError("generator refresh needs a generator, classifier, and distributions")
    model, _ = vector_to_model(server.model_vector)
    running = [
        (model.stats["rm1"].copy(), model.stats["rv1"].copy()),
        (model.stats["rm2"].copy(), model.stats["rv2"].copy()),
    ]
    if server.gen_opt is None:
        server.gen_opt = AdamState(lr=cfg.generator_lr, decay=1.0)
    num_classes = len(server.dists)
    sems, divs, diss = [], [], []
    for _ in range(cfg.generator_steps):
        ys = server.rng.integers(0, num_classes, size=cfg.generator_batch)
        z = sample_condition_batch(server.dists, ys, server.rng)
        xhat, gcache = server.generator.forward(z)
        h, batch_stats, fcache = model.forward(xhat, "train", update_running=False)
        logits = classifier_logits(server.classifier, h)
        sem = semantic_loss(logits, ys)
        div = diversity_loss(z, xhat)
        dis = distribution_loss(batch_stats, running)
        total = generator_loss(sem, div, dis, cfg.gen_loss)
        dh = classifier_logits_backward(server.classifier, h, total.grads["logits"])
        stat_inj = list(zip(total.grads["batch_means"], total.grads["batch_vars"]))
        _, dxhat = model.backward(fcache, dh, bn_stat_grads=stat_inj)
        dxhat = dxhat + total.grads["outputs"]
        ggrads, _ = server.generator.backward(gcache, dxhat)
        adam_step(server.gen_opt, server.generator.params, ggrads)
        sems.append(sem.value)
        divs.append(div.value)
        diss.append(dis.value)
    server.generator_ready = True
    if not sems:
        return {"gen_sem": 0.0, "gen_div": 0.0, "gen_dis": 0.0}
    return {
        "gen_sem": float(np.mean(sems)),
        "gen_div": float(np.mean(divs)),
        "gen_dis": float(np.mean(diss)),
    }


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> float:
    """Macro F1 over classes, excluding classes absent from both truth and prediction."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("cannot score an empty label array")
    scores = []
    for k in range(num_classes):
        tp = int(np.sum((y_pred == k) & (y_true == k)))
        fp = int(np.sum((y_pred == k) & (y_true != k)))
        fn = int(np.sum((y_pred != k) & (y_true == k)))
        if tp + fp + fn == 0:
            continue
        scores.append(2.0 * tp / (2.0 * tp + fp + fn))
    if not scores:
        raise ValueError("no class present in either truth or prediction")
    return float(np.mean(scores))


def evaluate(
    vec: ParameterVector, classifier: DistributionClassifier | None, dataset: LabeledDataset
) -> tuple[float, float]:
    """Eval-mode accuracy and macro F1 on a dataset; returns (acc, f1)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    model, head = vector_to_model(vec)
    if classifier is None and head is None:
        raise ValueError("need either a frozen classifier or a trainable head")
    h, _, _ = model.forward(dataset.x, "eval")
    logits = classifier_logits(classifier, h) if classifier is not None else head.forward(h)
    pred = logits.argmax(axis=1)
    acc = float(np.mean(pred == dataset.y))
    num_classes = classifier.num_classes if classifier is not None else head.num_classes
    return acc, macro_f1(dataset.y, pred, num_classes)


def run_round(
    server: ServerState,
    clients: list[ClientState],
    cfg: TrainingConfig,
    val_data: LabeledDataset,
    test_data: LabeledDataset,
) -> RoundReport:
    """One federated round; advances ``server.round`` and the global vector.

    Order of operations: maybe refresh the generator (every
    ``generator_period`` rounds, never at round 0), sample
    ceil(participation * C) clients without replacement, run their local
    updates (thread pool when ``cfg.workers`` > 1, aggregation order fixed by
    participant order), average, then evaluate the new global model.
    """
    if not clients:
        raise ValueError("need at least one client")
    r = server.round
    gen_metrics: dict = {}
    if (
        server.generator is not None
        and r > 0
        and r % cfg.generator_period == 0
    ):
        gen_metrics = train_generator(server, cfg)
    n_pick = math.ceil(cfg.participation * len(clients))
    picked = server.rng.choice(len(clients), size=n_pick, replace=False)
    ids = sorted(int(i) for i in picked)
    participants = []
    for i in ids:
        if len(clients[i].data) == 0:
            logger.warning("client %d has an empty partition; skipped this round", i)
            continue
        participants.append(clients[i])
    if not participants:
        raise RuntimeError(f"round {r}: every sampled client had an empty partition")
    gen = server.generator if (server.generator is not None and server.generator_ready) else None

    def _one(cl: ClientState):
        return client_update(
            cl, server.model_vector, server.classifier, gen, server.dists, cfg, r
        )

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_one, participants))
    else:
        results = [_one(cl) for cl in participants]
    vectors = [v for v, _ in results]
    losses = [l for _, l in results]
    server.model_vector = aggregate(vectors)
    server.round = r + 1
    test_acc, test_f1 = evaluate(server.model_vector, server.classifier, test_data)
    val_acc, val_f1 = evaluate(server.model_vector, server.classifier, val_data)
    return RoundReport(
        round=r,
        participant_ids=tuple(c.client_id for c in participants),
        mean_local_loss=float(np.mean(losses)),
        test_accuracy=test_acc,
        test_macro_f1=test_f1,
        val_accuracy=val_acc,
        val_macro_f1=val_f1,
        gen_sem=gen_metrics.get("gen_sem"),
        gen_div=gen_metrics.get("gen_div"),
        gen_dis=gen_metrics.get("gen_dis"),
    )

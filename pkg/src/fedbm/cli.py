"""Experiment configuration, artifact writing, and the command-line entry point.

A run is described by a JSON config (dataset spec, embedding spec, federation
knobs) plus a few flag overrides.  ``run`` executes the experiment and writes
three artifacts into the output directory: ``metrics.csv`` with one row per
round, ``summary.json`` echoing the exact config plus final/best metrics, and
``best_model.fbm1``, the checkpoint of the best validation round.

Exit codes: 0 success, 2 invalid config, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .concept_space import (
    ConceptEmbeddingSet,
    DistributionClassifier,
    estimate_distributions,
    build_classifier,
    load_embeddings,
    write_embeddings,
)
from .data import load_csv_dataset, make_synthetic_benchmark, dirichlet_partition, split_dataset
from .federation import (
    METHODS,
    ServerState,
    TrainingConfig,
    build_clients,
    evaluate,
    run_round,
    spawn_streams,
)
from .losses import GeneratorLossConfig
from .nn import (
    AdamState,
    ConditionalGenerator,
    FeatureExtractor,
    LinearHead,
    model_to_vector,
    save_checkpoint,
)

CSV_HEADER = [
    "round",
    "n_participants",
    "mean_local_loss",
    "test_accuracy",
    "test_macro_f1",
    "gen_sem",
    "gen_div",
    "gen_dis",
    "seconds",
]


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


@dataclass(frozen=True)
class DataSpec:
    kind: str
    classes: int = 0
    input_dim: int = 0
    per_class: int = 0
    separation: float = 0.0
    seed: int = 0
    path: str = ""


@dataclass(frozen=True)
class EmbeddingSpec:
    kind: str
    prompts: int = 0
    dim: int = 0
    spread: float = 0.0
    seed: int = 0
    path: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSpec
    embeddings: EmbeddingSpec
    seed: int = 0
    method: str = "fedbm"
    out_dir: str = "runs/out"
    rounds: int = 10
    clients: int = 8
    participation: float = 0.5
    local_epochs: int = 1
    batch_size: int = 8
    synthetic_batch: int = 8
    learning_rate: float = 1e-2
    lr_decay: float = 0.99
    temperature: float = 1.0
    lambda_div: float = 1.0
    lambda_dis: float = 0.1
    generator_period: int = 5
    generator_steps: int = 100
    generator_batch: int = 32
    generator_lr: float = 1e-3
    beta: float = 0.05
    workers: int = 1
    timing: str = "wall"

    def training(self) -> TrainingConfig:
        return TrainingConfig(
            method=self.method,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            synthetic_batch=self.synthetic_batch,
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            participation=self.participation,
            generator_period=self.generator_period,
            generator_steps=self.generator_steps,
            generator_batch=self.generator_batch,
            generator_lr=self.generator_lr,
            gen_loss=GeneratorLossConfig(lambda_div=self.lambda_div, lambda_dis=self.lambda_dis),
            workers=self.workers,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _require(cond: bool, name: str, msg: str):
    if not cond:
        raise ConfigError(f"{name}: {msg}")


def _as_int(raw: dict, name: str, default=None):
    v = raw.get(name.split(".")[-1], default)
    _require(v is not None, name, "missing")
    _require(isinstance(v, int) and not isinstance(v, bool), name, f"must be an integer, got {v!r}")
    return v


def _as_float(raw: dict, name: str, default=None):
    v = raw.get(name.split(".")[-1], default)
    _require(v is not None, name, "missing")
    _require(
        isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v),
        name,
        f"must be a finite number, got {v!r}",
    )
    return float(v)


def _parse_data(raw) -> DataSpec:
    _require(isinstance(raw, dict), "data", "must be an object")
    kind = raw.get("kind")
    _require(kind in ("synthetic", "csv"), "data.kind", f"must be 'synthetic' or 'csv', got {kind!r}")
    if kind == "synthetic":
        allowed = {"kind", "classes", "input_dim", "per_class", "separation", "seed"}
        for k in raw:
            _require(k in allowed, f"data.{k}", "unknown field")
        classes = _as_int(raw, "data.classes")
        input_dim = _as_int(raw, "data.input_dim")
        per_class = _as_int(raw, "data.per_class")
        separation = _as_float(raw, "data.separation")
        seed = _as_int(raw, "data.seed", 0)
        _require(classes >= 2, "data.classes", f"must be at least 2, got {classes}")
        _require(input_dim >= 1, "data.input_dim", f"must be positive, got {input_dim}")
        _require(per_class >= 1, "data.per_class", f"must be positive, got {per_class}")
        _require(separation >= 0, "data.separation", f"must be non-negative, got {separation}")
        return DataSpec(
            kind=kind, classes=classes, input_dim=input_dim, per_class=per_class,
            separation=separation, seed=seed,
        )
    allowed = {"kind", "path", "classes", "seed"}
    for k in raw:
        _require(k in allowed, f"data.{k}", "unknown field")
    path = raw.get("path")
    _require(isinstance(path, str) and path, "data.path", "must be a non-empty string")
    _require(Path(path).is_file(), "data.path", f"file not found: {path}")
    classes = _as_int(raw, "data.classes")
    _require(classes >= 2, "data.classes", f"must be at least 2, got {classes}")
    seed = _as_int(raw, "data.seed", 0)
    return DataSpec(kind=kind, path=path, classes=classes, seed=seed)


def _parse_embeddings(raw) -> EmbeddingSpec:
    _require(isinstance(raw, dict), "embeddings", "must be an object")
    kind = raw.get("kind")
    _require(
        kind in ("synthetic", "file"),
        "embeddings.kind",
        f"must be 'synthetic' or 'file', got {kind!r}",
    )
    if kind == "synthetic":
        allowed = {"kind", "prompts", "dim", "spread", "seed"}
        for k in raw:
            _require(k in allowed, f"embeddings.{k}", "unknown field")
        prompts = _as_int(raw, "embeddings.prompts")
        dim = _as_int(raw, "embeddings.dim")
        spread = _as_float(raw, "embeddings.spread")
        seed = _as_int(raw, "embeddings.seed", 0)
        _require(prompts >= 2, "embeddings.prompts", f"must be at least 2, got {prompts}")
        _require(dim >= 1, "embeddings.dim", f"must be positive, got {dim}")
        _require(spread >= 0, "embeddings.spread", f"must be non-negative, got {spread}")
        return EmbeddingSpec(kind=kind, prompts=prompts, dim=dim, spread=spread, seed=seed)
    allowed = {"kind", "path"}
    for k in raw:
        _require(k in allowed, f"embeddings.{k}", "unknown field")
    path = raw.get("path")
    _require(isinstance(path, str) and path, "embeddings.path", "must be a non-empty string")
    _require(Path(path).is_file(), "embeddings.path", f"file not found: {path}")
    return EmbeddingSpec(kind=kind, path=path)


_TOP_LEVEL = {
    "data", "embeddings", "seed", "method", "out_dir", "rounds", "clients",
    "participation", "local_epochs", "batch_size", "synthetic_batch",
    "learning_rate", "lr_decay", "temperature", "lambda_div", "lambda_dis",
    "generator_period", "generator_steps", "generator_batch", "generator_lr",
    "beta", "workers", "timing",
}


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a raw config dict; raises :class:`ConfigError` naming the bad field."""
    _require(isinstance(raw, dict), "config", "top level must be an object")
    for k in raw:
        _require(k in _TOP_LEVEL, k, "unknown field")
    _require("data" in raw, "data", "missing")
    _require("embeddings" in raw, "embeddings", "missing")
    data = _parse_data(raw["data"])
    embeddings = _parse_embeddings(raw["embeddings"])
    cfg = ExperimentConfig(
        data=data,
        embeddings=embeddings,
        seed=_as_int(raw, "seed", 0),
        method=raw.get("method", "fedbm"),
        out_dir=raw.get("out_dir", "runs/out"),
        rounds=_as_int(raw, "rounds", 10),
        clients=_as_int(raw, "clients", 8),
        participation=_as_float(raw, "participation", 0.5),
        local_epochs=_as_int(raw, "local_epochs", 1),
        batch_size=_as_int(raw, "batch_size", 8),
        synthetic_batch=_as_int(raw, "synthetic_batch", 8),
        learning_rate=_as_float(raw, "learning_rate", 1e-2),
        lr_decay=_as_float(raw, "lr_decay", 0.99),
        temperature=_as_float(raw, "temperature", 1.0),
        lambda_div=_as_float(raw, "lambda_div", 1.0),
        lambda_dis=_as_float(raw, "lambda_dis", 0.1),
        generator_period=_as_int(raw, "generator_period", 5),
        generator_steps=_as_int(raw, "generator_steps", 100),
        generator_batch=_as_int(raw, "generator_batch", 32),
        generator_lr=_as_float(raw, "generator_lr", 1e-3),
        beta=_as_float(raw, "beta", 0.05),
        workers=_as_int(raw, "workers", 1),
        timing=raw.get("timing", "wall"),
    )
    _require(cfg.seed >= 0, "seed", f"must be non-negative, got {cfg.seed}")
    _require(cfg.method in METHODS, "method", f"must be one of {METHODS}, got {cfg.method!r}")
    _require(isinstance(cfg.out_dir, str) and cfg.out_dir, "out_dir", "must be a non-empty string")
    _require(cfg.rounds >= 0, "rounds", f"must be non-negative, got {cfg.rounds}")
    _require(cfg.clients >= 1, "clients", f"must be positive, got {cfg.clients}")
    _require(0 < cfg.participation <= 1, "participation", f"must be in (0, 1], got {cfg.participation}")
    _require(cfg.local_epochs >= 0, "local_epochs", f"must be non-negative, got {cfg.local_epochs}")
    _require(cfg.batch_size >= 2, "batch_size", f"must be at least 2, got {cfg.batch_size}")
    _require(cfg.synthetic_batch >= 0, "synthetic_batch", f"must be non-negative, got {cfg.synthetic_batch}")
    _require(cfg.learning_rate > 0, "learning_rate", f"must be positive, got {cfg.learning_rate}")
    _require(0 < cfg.lr_decay <= 1, "lr_decay", f"must be in (0, 1], got {cfg.lr_decay}")
    _require(cfg.temperature > 0, "temperature", f"must be positive, got {cfg.temperature}")
    _require(cfg.lambda_div >= 0, "lambda_div", f"must be non-negative, got {cfg.lambda_div}")
    _require(cfg.lambda_dis >= 0, "lambda_dis", f"must be non-negative, got {cfg.lambda_dis}")
    _require(cfg.generator_period >= 1, "generator_period", f"must be positive, got {cfg.generator_period}")
    _require(cfg.generator_steps >= 0, "generator_steps", f"must be non-negative, got {cfg.generator_steps}")
    _require(cfg.generator_batch >= 2, "generator_batch", f"must be at least 2, got {cfg.generator_batch}")
    _require(cfg.generator_lr > 0, "generator_lr", f"must be positive, got {cfg.generator_lr}")
    _require(cfg.beta > 0, "beta", f"must be positive, got {cfg.beta}")
    _require(cfg.workers >= 1, "workers", f"must be positive, got {cfg.workers}")
    _require(cfg.timing in ("wall", "none"), "timing", f"must be 'wall' or 'none', got {cfg.timing!r}")
    return cfg


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a JSON config file and apply flag overrides before validation."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config: file not found: {path}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: not valid JSON: {exc}") from exc
    if overrides:
        raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    return parse_config(raw)


def gen_synthetic_embeddings(
    num_classes: int,
    num_prompts: int,
    dim: int,
    spread: float,
    seed: int,
    path=None,
    class_names=None,
) -> ConceptEmbeddingSet:
    """Build prompt embeddings as anchor + spread * noise per class.

    Anchors are unit vectors rejection-sampled until every pair has cosine
    similarity below 0.9, so classes stay distinguishable even in low
    dimension.  ``spread`` 0 collapses each class to its anchor (zero
    variance).  Writes a CEB1 file when ``path`` is given.
    """
    if num_classes < 1 or num_prompts < 2 or dim < 1:
        raise ValueError(
            f"invalid dims: classes={num_classes}, prompts={num_prompts}, dim={dim}"
        )
    if not np.isfinite(spread) or spread < 0:
        raise ValueError(f"spread must be finite and non-negative, got {spread}")
    rng = np.random.default_rng(seed)
    anchors: list[np.ndarray] = []
    for k in range(num_classes):
        for _ in range(1000):
            v = rng.standard_normal(dim)
            norm = np.linalg.norm(v)
            if norm < 1e-12:
                continue
            v /= norm
            if all(float(v @ a) < 0.9 for a in anchors):
                anchors.append(v)
                break
        else:
            raise ValueError(
                f"could not separate {num_classes} anchors in dimension {dim}"
            )
    emb = np.stack(
        [[a + spread * rng.standard_normal(dim) for _ in range(num_prompts)] for a in anchors]
    )
    if class_names is None:
        class_names = tuple(f"class_{k}" for k in range(num_classes))
    eset = ConceptEmbeddingSet(embeddings=emb, class_names=tuple(class_names))
    if path is not None:
        write_embeddings(eset, path)
    return eset


def _resolve_data(cfg: ExperimentConfig):
    if cfg.data.kind == "synthetic":
        return make_synthetic_benchmark(
            cfg.data.classes, cfg.data.input_dim, cfg.data.per_class,
            cfg.data.separation, cfg.data.seed,
        )
    x, y = load_csv_dataset(cfg.data.path, cfg.data.classes)
    return split_dataset(x, y, np.random.default_rng(cfg.data.seed))


def _resolve_embeddings(cfg: ExperimentConfig, out_dir: Path) -> ConceptEmbeddingSet:
    if cfg.embeddings.kind == "synthetic":
        path = out_dir / "embeddings.ceb1"
        gen_synthetic_embeddings(
            cfg.data.classes, cfg.embeddings.prompts, cfg.embeddings.dim,
            cfg.embeddings.spread, cfg.embeddings.seed, path=path,
        )
        return load_embeddings(path)
    eset = load_embeddings(cfg.embeddings.path)
    if eset.num_classes != cfg.data.classes:
        raise ConfigError(
            f"embeddings.path: file has {eset.num_classes} classes, data has {cfg.data.classes}"
        )
    return eset


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run(cfg: ExperimentConfig) -> dict:
    """Execute one experiment and write metrics.csv, summary.json, best_model.fbm1.

    Returns the summary dict.  Re-running the same config overwrites the same
    artifact files.
    """
    out_dir = Path(cfg.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise RuntimeError(f"output dir {cfg.out_dir!r} is not writable: {exc}") from exc

    train, val, test = _resolve_data(cfg)
    eset = _resolve_embeddings(cfg, out_dir)
    input_dim = train.x.shape[1]
    feat_dim = eset.dim
    num_classes = cfg.data.classes
    if train.y.max() >= num_classes:
        raise ConfigError(f"data.classes: found label {train.y.max()} in the training split")

    model_rng, server_rng, partition_rng, client_rngs = spawn_streams(cfg.seed, cfg.clients)
    extractor = FeatureExtractor(input_dim, feat_dim, model_rng)
    tr = cfg.training()
    generator = ConditionalGenerator(feat_dim, input_dim, model_rng) if tr.uses_generator() else None
    head = None
    classifier = None
    dists = estimate_distributions(eset)
    if cfg.method == "fedavg":
        head = LinearHead(feat_dim, num_classes, model_rng)
    elif cfg.method == "cgde-only":
        # ablation of the concept classifier: random frozen weights, zero variances
        means = model_rng.standard_normal((feat_dim, num_classes)) / np.sqrt(feat_dim)
        classifier = DistributionClassifier(
            means=means, variances=np.zeros_like(means),
            temperature=cfg.temperature, class_names=eset.class_names,
        )
    else:
        classifier = build_classifier(dists, cfg.temperature)

    plan = dirichlet_partition(train.y, cfg.clients, cfg.beta, partition_rng)
    clients = build_clients(train, plan, client_rngs, cfg.local_epochs)
    server = ServerState(
        model_vector=model_to_vector(extractor, head),
        classifier=classifier,
        dists=dists,
        generator=generator,
        gen_opt=AdamState(lr=cfg.generator_lr, decay=1.0) if generator is not None else None,
        rng=server_rng,
    )

    reports = []
    best_vector = server.model_vector
    best_round = -1
    best_val = -1.0
    best_test = evaluate(server.model_vector, classifier, test)
    if cfg.rounds == 0:
        init_val = evaluate(server.model_vector, classifier, val)
        best_val = init_val[0]
    for _ in range(cfg.rounds):
        t0 = time.perf_counter()
        report = run_round(server, clients, tr, val, test)
        report.seconds = time.perf_counter() - t0 if cfg.timing == "wall" else 0.0
        reports.append(report)
        if report.val_accuracy > best_val:
            best_val = report.val_accuracy
            best_round = report.round
            best_vector = server.model_vector
            best_test = (report.test_accuracy, report.test_macro_f1)

    with open(out_dir / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for rep in reports:
            writer.writerow([
                rep.round,
                rep.n_participants,
                _fmt(rep.mean_local_loss),
                _fmt(rep.test_accuracy),
                _fmt(rep.test_macro_f1),
                _fmt(rep.gen_sem),
                _fmt(rep.gen_div),
                _fmt(rep.gen_dis),
                _fmt(rep.seconds),
            ])

    save_checkpoint(best_vector, out_dir / "best_model.fbm1")
    final = reports[-1] if reports else None
    test_acc, test_f1 = evaluate(server.model_vector, classifier, test)
    summary = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "rounds_completed": len(reports),
        "best_round": best_round,
        "best_val_accuracy": best_val,
        "best_test_accuracy": best_test[0],
        "best_test_macro_f1": best_test[1],
        "final_test_accuracy": final.test_accuracy if final else test_acc,
        "final_test_macro_f1": final.test_macro_f1 if final else test_f1,
    }
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedbm",
        description="Federated training with a frozen concept classifier and a server-side generator",
    )
    parser.add_argument("--config", required=True, help="path to a JSON experiment config")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--method", default=None, choices=METHODS, help="override the method")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(
            args.config,
            overrides={"seed": args.seed, "out_dir": args.out, "method": args.method},
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        summary = run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface anything as a runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    print(
        f"method={cfg.method} rounds={summary['rounds_completed']} "
        f"final_test_accuracy={summary['final_test_accuracy']:.4f} "
        f"final_test_macro_f1={summary['final_test_macro_f1']:.4f}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())

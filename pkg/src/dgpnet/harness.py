"""Episode sampling, training and evaluation loops, ablations, robustness runs,
and feature export."""

from __future__ import annotations

import csv
import json
import logging
import math
import multiprocessing
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .config import ModelConfig
from .data import Dataset
from .embedding import label_code
from .graph import forward_episode, init_model
from .params import Adam, ParameterStore
from .seeding import EVAL, ROBUST, TRAIN, derive_rng, derive_seed
from .tensor import no_grad

log = logging.getLogger(__name__)

ABLATION_VARIANTS = {
    "GCN": dict(dense=False, proto_mode="none"),
    "GCN(dense)": dict(dense=True, proto_mode="none"),
    "pro-point(only)": dict(dense=True, proto_mode="only"),
    "GCN(dense)+pro_infor": dict(dense=True, proto_mode="info"),
    "GCN(dense)+pro-point": dict(dense=True, proto_mode="nodes"),
}

SUMMARY_FIELDS = ["variant", "n_way", "k_shot", "mean_acc", "std", "episodes", "seed"]


class SamplingError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class Episode:
    support_images: np.ndarray  # (N*K, S, S), class-major
    support_labels: np.ndarray
    support_angles: np.ndarray
    support_indices: np.ndarray
    query_image: np.ndarray
    query_label: int
    query_angle: int
    query_index: int
    classes: np.ndarray  # dataset class id behind each episode label
    episode_seed: int = 0

    @property
    def n_way(self) -> int:
        return len(self.classes)


def sample_task(dataset: Dataset, n_way: int, k_shot: int, rng: np.random.Generator, episode_seed: int = 0) -> Episode:
    """Draw N classes, K supports each, and one disjoint query from one of them."""
    classes, counts = np.unique(dataset.class_ids, return_counts=True)
    if len(classes) < n_way:
        raise SamplingError(f"split has {len(classes)} classes, need {n_way}")
    if counts.min() < k_shot + 1:
        raise SamplingError(f"class {classes[counts.argmin()]} has {counts.min()} samples, need {k_shot + 1}")
    chosen = rng.choice(classes, size=n_way, replace=False)
    target = int(rng.integers(n_way))
    sup_idx, q_idx = [], None
    for i, c in enumerate(chosen):
        pool = np.flatnonzero(dataset.class_ids == c)
        take = k_shot + 1 if i == target else k_shot
        picked = rng.choice(pool, size=take, replace=False)
        sup_idx.extend(picked[:k_shot])
        if i == target:
            q_idx = int(picked[k_shot])
    sup_idx = np.array(sup_idx)
    return Episode(
        support_images=dataset.images[sup_idx],
        support_labels=np.repeat(np.arange(n_way), k_shot),
        support_angles=dataset.angle_ids[sup_idx],
        support_indices=sup_idx,
        query_image=dataset.images[q_idx],
        query_label=target,
        query_angle=int(dataset.angle_ids[q_idx]),
        query_index=q_idx,
        classes=chosen,
        episode_seed=episode_seed,
    )


def episode_at(dataset: Dataset, config: ModelConfig, base_seed: int, *stream: int) -> Episode:
    seed = derive_seed(base_seed, *stream)
    return sample_task(dataset, config.graph.n_way, config.graph.k_shot, np.random.default_rng(seed), seed)


# ---------------------------------------------------------------- run reports


@dataclass
class RunReport:
    records: List[dict] = field(default_factory=list)
    config: Dict = field(default_factory=dict)
    variant: str = ""
    seed: int = 0
    run_size: int = 100
    wall_clock: float = 0.0
    error: Optional[str] = None

    @property
    def mean_acc(self) -> float:
        if not self.records:
            return float("nan")
        return float(np.mean([r["correct"] for r in self.records]))

    @property
    def run_accuracies(self) -> np.ndarray:
        """Accuracy of each consecutive block of ``run_size`` episodes."""
        flags = np.array([r["correct"] for r in self.records], dtype=float)
        n = len(flags) // self.run_size
        return flags[: n * self.run_size].reshape(n, self.run_size).mean(axis=1) if n else np.array([])

    @property
    def std(self) -> float:
        runs = self.run_accuracies
        return float(np.std(runs)) if len(runs) > 1 else 0.0

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records])

    def summary_row(self) -> dict:
        return {
            "variant": self.variant,
            "n_way": self.config.get("graph.n_way"),
            "k_shot": self.config.get("graph.k_shot"),
            "mean_acc": "nan" if self.error else f"{self.mean_acc:.6f}",
            "std": "nan" if self.error else f"{self.std:.6f}",
            "episodes": len(self.records),
            "seed": self.seed,
        }

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def write_summary_csv(path, reports: Sequence[RunReport]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        for rep in reports:
            w.writerow(rep.summary_row())


# -------------------------------------------------------------------- training


def train(
    config: ModelConfig,
    train_split: Optional[Dataset],
    steps: int,
    store: Optional[ParameterStore] = None,
    episode_source: Optional[Callable[[int], Episode]] = None,
    q_per_episode: int = 1,
    log_every: int = 0,
) -> tuple:
    """Episodic training with Adam; returns (parameters, RunReport of per-step losses).

    ``episode_source(step)`` overrides sampling (e.g. a frozen pool); by
    default step ``i`` samples from ``derive_seed(seed, TRAIN, i, j)``.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    config.validate()
    store = store if store is not None else init_model(config)
    opt = Adam(store, lr=config.lr)
    report = RunReport(config=config.to_flat(), seed=config.seed, variant="train")
    g = config.graph
    start = time.perf_counter()
    for step in range(steps):
        if episode_source is not None:
            eps = [episode_source(step)]
        else:
            eps = [episode_at(train_split, config, config.seed, TRAIN, step, j) for j in range(q_per_episode)]
        store.zero_grad()
        loss, correct = None, 0
        for ep in eps:
            out = forward_episode(ep, store, config, training=True)
            loss = out.loss if loss is None else loss + out.loss
            correct += int(out.prediction == ep.query_label)
        if len(eps) > 1:
            loss = loss * (1.0 / len(eps))
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(
                f"non-finite loss at step {step} (n_way={g.n_way}, k_shot={g.k_shot}, "
                f"dense={g.dense}, proto_mode={g.proto_mode}, lr={config.lr})"
            )
        loss.backward()
        opt.step()
        report.records.append({"episode": step, "loss": value, "correct": correct / len(eps)})
        if log_every and (step + 1) % log_every == 0:
            recent = report.losses[-log_every:]
            log.info("step %d loss %.4f", step + 1, recent.mean())
    report.wall_clock = time.perf_counter() - start
    return store, report


# ------------------------------------------------------------------ evaluation

_WORKER: dict = {}


def _predict(store, config, episode):
    with no_grad():
        out = forward_episode(episode, store, config, training=False)
    return out.posterior, float(out.loss.data)


def _eval_range(indices, stream):
    store, config, dataset = _WORKER["store"], _WORKER["config"], _WORKER["dataset"]
    predictor = _WORKER["predictor"]
    out = []
    for i in indices:
        ep = episode_at(dataset, config, _WORKER["seed"], *stream, i)
        if predictor is None:
            post, loss = _predict(store, config, ep)
        else:
            post = np.asarray(predictor(ep), dtype=float)
            loss = float(-np.log(max(post[ep.query_label], 1e-300)))
        pred = int(np.argmax(post))
        out.append({
            "episode": int(i),
            "label": int(ep.query_label),
            "prediction": pred,
            "correct": int(pred == ep.query_label),
            "loss": loss,
        })
    return out


def _pool_eval(chunk):
    return _eval_range(*chunk)


def evaluate(
    store: ParameterStore,
    config: ModelConfig,
    test_split: Dataset,
    n_episodes: int,
    seed: Optional[int] = None,
    jobs: int = 1,
    stream: Sequence[int] = (EVAL,),
    run_size: int = 100,
    predictor: Optional[Callable[[Episode], np.ndarray]] = None,
    variant: str = "eval",
) -> RunReport:
    """Score ``n_episodes`` test tasks with frozen parameters and eval-mode normalization.

    Episode ``i`` is a pure function of (seed, stream, i); with ``jobs > 1``
    contiguous index blocks run in forked workers and are merged in index
    order, so the report is identical for any job count.
    """
    config.validate()
    seed = config.seed if seed is None else seed
    _check_dims(store, config)
    _WORKER.update(store=store, config=config, dataset=test_split, seed=seed, predictor=predictor)
    start = time.perf_counter()
    idx = np.arange(n_episodes)
    if jobs <= 1 or n_episodes < 2:
        records = _eval_range(idx, tuple(stream))
    else:
        chunks = [(c, tuple(stream)) for c in np.array_split(idx, jobs) if len(c)]
        with multiprocessing.get_context("fork").Pool(min(jobs, len(chunks))) as pool:
            parts = pool.map(_pool_eval, chunks)
        records = [r for part in parts for r in part]
    _WORKER.clear()
    return RunReport(records=records, config=config.to_flat(), variant=variant, seed=seed, run_size=run_size,
                     wall_clock=time.perf_counter() - start)


def _check_dims(store: ParameterStore, config: ModelConfig):
    fresh = init_model(config, seed=0)
    for k, t in fresh.params.items():
        if k not in store.params or store.params[k].shape != t.shape:
            got = store.params[k].shape if k in store.params else "missing"
            raise ValueError(f"parameters do not match config: {k} expected {t.shape}, got {got}")


# ------------------------------------------------------------------- ablations


def ablation_run(
    base: ModelConfig,
    train_split: Dataset,
    test_split: Dataset,
    steps: int,
    episodes: int,
    variants: Optional[Sequence[str]] = None,
    jobs: int = 1,
) -> List[RunReport]:
    """Train and evaluate each ablation variant under the same seed and data.

    A variant that diverges is reported with ``error`` set instead of aborting
    the whole table.
    """
    names = list(variants or ABLATION_VARIANTS)
    configs = [base.replace(**ABLATION_VARIANTS[name]) for name in names]
    reports = []
    for name, cfg, trained in zip(names, configs, train_many(configs, train_split, steps, jobs=jobs)):
        if isinstance(trained, TrainingError):
            log.warning("variant %s failed: %s", name, trained)
            rep = RunReport(config=cfg.to_flat(), variant=name, seed=cfg.seed, error=str(trained))
        else:
            rep = evaluate(trained, cfg, test_split, episodes, jobs=jobs, variant=name)
        rep.variant = name
        reports.append(rep)
    return reports


def _train_job(args):
    config, steps = args
    try:
        store, _ = train(config, _WORKER["train_split"], steps)
    except TrainingError as exc:
        return exc
    return store.arrays()


def train_many(configs: Sequence[ModelConfig], train_split: Dataset, steps: int, jobs: int = 1) -> list:
    """Train independent runs, up to ``jobs`` at a time in forked workers.

    Each entry of the result is a trained ParameterStore, or the TrainingError
    that stopped that run. Every run is a pure function of its config, so the
    job count does not change any weight.
    """
    _WORKER["train_split"] = train_split
    try:
        tasks = [(cfg, steps) for cfg in configs]
        if jobs <= 1 or len(tasks) < 2:
            results = [_train_job(t) for t in tasks]
        else:
            with multiprocessing.get_context("fork").Pool(min(jobs, len(tasks))) as pool:
                results = pool.map(_train_job, tasks, chunksize=1)
    finally:
        _WORKER.pop("train_split", None)
    out = []
    for cfg, res in zip(configs, results):
        if isinstance(res, TrainingError):
            out.append(res)
        else:
            store = init_model(cfg)
            store.load_arrays(res)
            out.append(store)
    return out


@dataclass
class RobustnessResult:
    with_proto: np.ndarray
    without_proto: np.ndarray

    @property
    def std_with(self) -> float:
        return float(np.std(self.with_proto))

    @property
    def std_without(self) -> float:
        return float(np.std(self.without_proto))


def robustness_histogram(
    store_with: ParameterStore,
    config_with: ModelConfig,
    store_without: ParameterStore,
    config_without: ModelConfig,
    test_split: Dataset,
    runs: int = 100,
    episodes: int = 100,
    seed: Optional[int] = None,
    jobs: int = 1,
) -> RobustnessResult:
    """Accuracy of ``runs`` independent ``episodes``-episode test runs per arm.

    Both arms see the same episodes (stream ROBUST); the population standard
    deviation of each accuracy array is the reported spread.
    """
    seed = config_with.seed if seed is None else seed
    arms = []
    for store, cfg in ((store_with, config_with), (store_without, config_without)):
        rep = evaluate(store, cfg, test_split, runs * episodes, seed=seed, jobs=jobs, stream=(ROBUST,),
                       run_size=episodes)
        arms.append(rep.run_accuracies)
    return RobustnessResult(with_proto=arms[0], without_proto=arms[1])


# ---------------------------------------------------------------------- export


def export_embeddings(store: ParameterStore, config: ModelConfig, episode: Episode, stage: str = "final"):
    """Rows of (node_id, role, class, angle, features...) for external plotting.

    ``stage='embedding'`` gives labeled embeddings before the graph;
    ``stage='final'`` gives node features after the last graph iteration.
    """
    if stage not in ("embedding", "final"):
        raise ValueError(f"stage must be 'embedding' or 'final', got {stage!r}")
    with no_grad():
        out = forward_episode(episode, store, config, training=False)
    if stage == "embedding":
        g = config.graph
        nk = len(episode.support_labels)
        emb = out.embeddings.data
        feats = [np.concatenate([emb[i], label_code(int(episode.support_labels[i]), g.n_way)]) for i in range(nk)]
        feats.append(np.concatenate([emb[nk], label_code(None, g.n_way)]))
        meta = [("support", int(c), int(a)) for c, a in zip(episode.support_labels, episode.support_angles)]
        meta.append(("query", int(episode.query_label), int(episode.query_angle)))
    else:
        feats = list(out.features[-1].data)
        meta = []
        for n in out.nodes:
            cls = n.class_id if n.role != "query" else int(episode.query_label)
            angle = n.angle_id if n.angle_id is not None else -1
            meta.append((n.role, cls, angle))
    header = ["node_id", "role", "class", "angle"] + [f"f{i}" for i in range(len(feats[0]))]
    rows = [[i, role, cls, angle] + [repr(float(v)) for v in f] for i, ((role, cls, angle), f) in enumerate(zip(meta, feats))]
    return header, rows


def write_rows_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)

"""Teacher pre-training and the triplet-distillation fine-tuning loop.

Both phases share one engine: sample a PK batch, embed it with the student,
mine triplets, compute the batch loss (with per-triplet teacher gaps and the
batch-maximum gap in dynamic mode), backpropagate, and take an SGD step.
Runs are single-threaded and fully determined by (dataset, config, seed);
the teacher oracle is read-only throughout.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import evaluation
from .data import IdentityDataset, MINING_STRATEGIES, mine_triplets, sample_pk_batch
from .errors import ContractViolation, StagnationError
from .loss import MarginConfig, batch_loss
from .mlp import MlpModel, backward_batch, forward_batch, init_mlp, init_sgd, sgd_step
from .numerics import Rng, derive_subseed, pairwise_sq_euclidean
from .teacher import TeacherOracle, tabulate

MAX_CONSECUTIVE_EMPTY = 50


@dataclass(frozen=True)
class DistillConfig:
    margin: MarginConfig
    p: int = 8
    k: int = 8
    iterations: int = 2500
    learning_rate: float = 0.001
    momentum: float = 0.9
    mining: str = "semi_hard"
    seed: int = 0
    eval_every: int = 0   # 0 disables periodic verification logging

    def __post_init__(self):
        if self.p < 2 or self.k < 2:
            raise ContractViolation("distillation needs p >= 2 and k >= 2")
        if self.iterations < 0:
            raise ContractViolation("iterations must be >= 0")
        if self.mining not in MINING_STRATEGIES:
            raise ContractViolation(f"unknown mining strategy {self.mining!r}")
        if self.eval_every < 0:
            raise ContractViolation("eval_every must be >= 0")


@dataclass(frozen=True)
class TeacherTrainConfig:
    hidden_dims: tuple[int, ...] = (128, 128, 128)
    embed_dim: int = 32
    margin: float = 0.3
    learning_rate: float = 0.01
    momentum: float = 0.9
    iterations: int = 1500
    p: int = 8
    k: int = 8
    mining: str = "semi_hard"
    accuracy_floor: float = 0.95
    floor_pairs: int = 200


@dataclass
class TrainLog:
    iterations: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    mean_margin: list[float] = field(default_factory=list)
    active_frac: list[float] = field(default_factory=list)
    eval_points: list[tuple[int, float]] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    def append(self, it: int, loss: float, mean_margin: float, active_frac: float) -> None:
        self.iterations.append(it)
        self.loss.append(loss)
        self.mean_margin.append(mean_margin)
        self.active_frac.append(active_frac)

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            skipped = set(self.skipped)
            rows = iter(zip(self.iterations, self.loss, self.mean_margin, self.active_frac))
            row = next(rows, None)
            for it in sorted(set(self.iterations) | skipped):
                if it in skipped:
                    fh.write(json.dumps({"iter": it, "skipped": True}) + "\n")
                    continue
                assert row is not None and row[0] == it
                fh.write(
                    json.dumps(
                        {
                            "iter": row[0],
                            "loss": row[1],
                            "mean_margin": row[2],
                            "active_frac": row[3],
                        }
                    )
                    + "\n"
                )
                row = next(rows, None)

    @classmethod
    def read_jsonl(cls, path) -> "TrainLog":
        log = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for ln in fh:
                if not ln.strip():
                    continue
                rec = json.loads(ln)
                if rec.get("skipped"):
                    log.skipped.append(int(rec["iter"]))
                else:
                    log.append(
                        int(rec["iter"]), float(rec["loss"]),
                        float(rec["mean_margin"]), float(rec["active_frac"]),
                    )
        return log


def _run_triplet_loop(
    model: MlpModel,
    ds: IdentityDataset,
    *,
    margin: MarginConfig,
    p: int,
    k: int,
    iterations: int,
    learning_rate: float,
    momentum: float,
    mining: str,
    rng: Rng,
    teacher_vectors: np.ndarray | None,
    eval_every: int = 0,
    eval_pairs=None,
) -> TrainLog:
    """Shared training engine; mutates model in place."""
    log = TrainLog()
    if iterations == 0:
        return log
    sgd = init_sgd(model, learning_rate, momentum)
    consecutive_empty = 0
    for it in range(iterations):
        batch = sample_pk_batch(ds, p, k, rng)
        emb, cache = forward_batch(model, ds.X[batch.entries])
        triplets = mine_triplets(batch, emb, mining, rng)
        if triplets.shape[0] == 0:
            log.skipped.append(it)
            consecutive_empty += 1
            if consecutive_empty > MAX_CONSECUTIVE_EMPTY:
                raise StagnationError(
                    f"no usable triplets for {consecutive_empty} consecutive batches"
                )
            continue
        consecutive_empty = 0
        gaps = None
        if margin.mode == "dynamic":
            tvec = teacher_vectors[batch.entries]
            tdist = pairwise_sq_euclidean(tvec)
            raw = tdist[triplets[:, 0], triplets[:, 2]] - tdist[triplets[:, 0], triplets[:, 1]]
            gaps = np.maximum(raw, 0.0)
        result = batch_loss(emb, triplets, gaps, margin)
        grads = backward_batch(model, cache, result.grad)
        sgd_step(sgd, model, grads)
        log.append(
            it, result.loss, float(result.margins.mean()), float(result.active.mean())
        )
        if eval_every and eval_pairs is not None and (it + 1) % eval_every == 0:
            report = evaluation.verify(model, ds, eval_pairs)
            log.eval_points.append((it, report.best_accuracy))
    return log


def train_teacher(
    ds: IdentityDataset,
    cfg: TeacherTrainConfig = TeacherTrainConfig(),
    seed: int = 0,
) -> tuple[TeacherOracle, TrainLog]:
    """Train the larger MLP with a fixed margin, freeze it, and tabulate it.

    The returned oracle is table-backed (one embedding per dataset sample)
    and keeps a reference to the frozen model for checkpointing.  If the
    training-set verification accuracy misses cfg.accuracy_floor, the oracle
    carries an under-trained warning instead of failing.
    """
    rng = Rng(seed)
    model = init_mlp(
        (ds.input_dim, *cfg.hidden_dims, cfg.embed_dim),
        normalize_output=True,
        rng=rng,
    )
    log = _run_triplet_loop(
        model,
        ds,
        margin=MarginConfig.fixed(cfg.margin),
        p=cfg.p,
        k=cfg.k,
        iterations=cfg.iterations,
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        mining=cfg.mining,
        rng=rng,
        teacher_vectors=None,
    )
    oracle = tabulate(TeacherOracle.from_model(model), ds)
    per_identity = [ds.rows_of(i).size for i in ds.identity_list]
    pos_avail = sum(k * (k - 1) // 2 for k in per_identity)
    neg_avail = ds.n_samples * (ds.n_samples - 1) // 2 - pos_avail
    pairs = evaluation.build_pairs(
        ds, min(cfg.floor_pairs, pos_avail), min(cfg.floor_pairs, neg_avail),
        Rng(derive_subseed(seed, "teacher-floor")),
    )
    accuracy = evaluation.verify(oracle, ds, pairs).best_accuracy
    if cfg.iterations == 0 or accuracy < cfg.accuracy_floor:
        message = (
            f"under-trained teacher: verification accuracy {accuracy:.3f} "
            f"below floor {cfg.accuracy_floor:.3f}"
        )
        warnings.warn(message)
        oracle.warning = message
    return oracle, log


def distill(
    ds: IdentityDataset,
    teacher: TeacherOracle,
    student: MlpModel,
    cfg: DistillConfig,
) -> tuple[MlpModel, TrainLog]:
    """Fine-tune a copy of the student against the frozen teacher's margins.

    In dynamic mode every mined triplet gets the margin F(gap) with the
    batch-maximum gap as d_max; fixed mode ignores the teacher entirely so a
    (m, m) dynamic run and a fixed-m run follow bitwise-identical
    trajectories.  The input student is left untouched.
    """
    if ds.input_dim != student.input_dim:
        raise ContractViolation("student input dim disagrees with the dataset")
    trained = student.copy()
    teacher_vectors = None
    if cfg.margin.mode == "dynamic":
        table = tabulate(teacher, ds)
        teacher_vectors = table.embed_rows(ds, np.arange(ds.n_samples))
    eval_pairs = None
    if cfg.eval_every:
        per_identity = [ds.rows_of(i).size for i in ds.identity_list]
        pos_avail = sum(k * (k - 1) // 2 for k in per_identity)
        neg_avail = ds.n_samples * (ds.n_samples - 1) // 2 - pos_avail
        eval_pairs = evaluation.build_pairs(
            ds, min(200, pos_avail), min(200, neg_avail),
            Rng(derive_subseed(cfg.seed, "distill-eval")),
        )
    log = _run_triplet_loop(
        trained,
        ds,
        margin=cfg.margin,
        p=cfg.p,
        k=cfg.k,
        iterations=cfg.iterations,
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        mining=cfg.mining,
        rng=Rng(cfg.seed),
        teacher_vectors=teacher_vectors,
        eval_every=cfg.eval_every,
        eval_pairs=eval_pairs,
    )
    return trained, log

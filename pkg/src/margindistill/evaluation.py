"""Pair-based verification and teacher/student geometry comparison.

Verification sweeps a decision threshold over cosine distances of labeled
pairs and reports the best same/different accuracy.  Candidate thresholds
are the midpoints between consecutive distinct observed distances plus two
extremes: the minimum distance (classifies every pair as "different" under
the strict ``distance < threshold`` rule) and max distance + 1 (classifies
every pair as "same").  Ties break toward the smaller threshold.

Geometry preservation is measured as the Spearman rank correlation between
the strict upper triangles of two inter-identity centroid distance
matrices; ranks use the average convention for ties.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import IdentityDataset
from .errors import (
    CapacityError,
    ContractViolation,
    DegenerateInput,
    FormatError,
    InsufficientData,
)
from .mlp import MlpModel, forward_batch
from .numerics import Rng
from .teacher import TeacherOracle


@dataclass
class PairSet:
    a_ids: np.ndarray
    b_ids: np.ndarray
    same: np.ndarray

    def __post_init__(self):
        self.a_ids = np.asarray(self.a_ids, dtype=np.int64)
        self.b_ids = np.asarray(self.b_ids, dtype=np.int64)
        self.same = np.asarray(self.same, dtype=bool)
        if not (self.a_ids.shape == self.b_ids.shape == self.same.shape):
            raise ContractViolation("pair arrays must align")

    def __len__(self) -> int:
        return self.a_ids.size


@dataclass
class VerificationReport:
    best_accuracy: float
    best_threshold: float
    roc_points: list[tuple[float, float]]  # (false-accept rate, true-accept rate)

    def to_json(self) -> str:
        return json.dumps(
            {
                "best_accuracy": self.best_accuracy,
                "best_threshold": self.best_threshold,
                "roc_points": [list(p) for p in self.roc_points],
            }
        )


def _embeddings_for(embedder, ds: IdentityDataset, rows: np.ndarray) -> np.ndarray:
    if isinstance(embedder, TeacherOracle):
        return embedder.embed_rows(ds, rows)
    if isinstance(embedder, MlpModel):
        emb, _ = forward_batch(embedder, ds.X[rows])
        return emb
    raise ContractViolation(f"cannot embed with a {type(embedder).__name__}")


def build_pairs(
    ds: IdentityDataset, n_pos: int, n_neg: int, rng: Rng
) -> PairSet:
    """n_pos same-identity and n_neg different-identity sample-id pairs.

    No unordered pair repeats.  Rejection sampling with a deterministic
    enumeration fallback keeps tight requests (all available pairs) feasible.
    """
    if n_pos < 0 or n_neg < 0:
        raise ContractViolation("pair counts must be >= 0")
    per_identity = [ds.rows_of(i).size for i in ds.identity_list]
    pos_available = sum(k * (k - 1) // 2 for k in per_identity)
    total_pairs = ds.n_samples * (ds.n_samples - 1) // 2
    neg_available = total_pairs - pos_available
    if n_pos > pos_available:
        raise CapacityError(f"requested {n_pos} positive pairs, only {pos_available} exist")
    if n_neg > neg_available:
        raise CapacityError(f"requested {n_neg} negative pairs, only {neg_available} exist")

    a_ids: list[int] = []
    b_ids: list[int] = []
    same: list[bool] = []

    def collect(want: int, want_same: bool) -> None:
        if want == 0:
            return
        seen: set[tuple[int, int]] = set()
        attempts = 0
        budget = 200 * want + 10_000
        while len(seen) < want and attempts < budget:
            attempts += 1
            if want_same:
                ident = ds.identity_list[rng.randint(ds.n_identities)]
                rows = ds.rows_of(ident)
                if rows.size < 2:
                    continue
                i, j = rng.sample_indices(rows.size, 2)
                r1, r2 = int(rows[i]), int(rows[j])
            else:
                r1 = rng.randint(ds.n_samples)
                r2 = rng.randint(ds.n_samples)
                if r1 == r2 or ds.labels[r1] == ds.labels[r2]:
                    continue
            key = (min(r1, r2), max(r1, r2))
            if key in seen:
                continue
            seen.add(key)
            a_ids.append(int(ds.sample_ids[key[0]]))
            b_ids.append(int(ds.sample_ids[key[1]]))
            same.append(want_same)
        if len(seen) < want:
            # deterministic fallback: enumerate the remaining valid pairs
            remaining = []
            for r1 in range(ds.n_samples):
                for r2 in range(r1 + 1, ds.n_samples):
                    if (ds.labels[r1] == ds.labels[r2]) != want_same:
                        continue
                    if (r1, r2) in seen:
                        continue
                    remaining.append((r1, r2))
            picks = rng.sample_indices(len(remaining), want - len(seen))
            for idx in picks:
                r1, r2 = remaining[idx]
                seen.add((r1, r2))
                a_ids.append(int(ds.sample_ids[r1]))
                b_ids.append(int(ds.sample_ids[r2]))
                same.append(want_same)

    collect(n_pos, True)
    collect(n_neg, False)
    return PairSet(a_ids=np.array(a_ids), b_ids=np.array(b_ids), same=np.array(same))


def _pair_cosine_distances(embedder, ds: IdentityDataset, pairs: PairSet) -> np.ndarray:
    rows_a = np.array([ds.row(s) for s in pairs.a_ids], dtype=np.int64)
    rows_b = np.array([ds.row(s) for s in pairs.b_ids], dtype=np.int64)
    unique_rows = np.unique(np.concatenate([rows_a, rows_b]))
    emb = _embeddings_for(embedder, ds, unique_rows)
    position = {int(r): i for i, r in enumerate(unique_rows)}
    ea = emb[[position[int(r)] for r in rows_a]]
    eb = emb[[position[int(r)] for r in rows_b]]
    na = np.sqrt(np.einsum("ij,ij->i", ea, ea))
    nb = np.sqrt(np.einsum("ij,ij->i", eb, eb))
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise DegenerateInput("zero-norm embedding in verification pairs")
    return 1.0 - np.einsum("ij,ij->i", ea, eb) / (na * nb)


def threshold_sweep(distances: np.ndarray, same: np.ndarray) -> VerificationReport:
    """Best-accuracy threshold search on precomputed pair distances."""
    d = np.asarray(distances, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if d.size == 0:
        raise ContractViolation("cannot sweep an empty pair set")
    levels = np.unique(d)
    candidates = [float(levels[0])]
    candidates.extend(float(0.5 * (levels[i] + levels[i + 1])) for i in range(levels.size - 1))
    candidates.append(float(levels[-1]) + 1.0)
    thresholds = np.array(candidates, dtype=np.float64)

    pred = d[None, :] < thresholds[:, None]          # (T, n_pairs)
    correct = pred == same[None, :]
    accuracy = correct.mean(axis=1)
    best = int(np.argmax(accuracy))                   # first max = smallest threshold

    n_pos = int(same.sum())
    n_neg = int((~same).sum())
    roc = []
    for t in range(thresholds.size):
        tar = float(pred[t, same].mean()) if n_pos else 0.0
        far = float(pred[t, ~same].mean()) if n_neg else 0.0
        roc.append((far, tar))
    return VerificationReport(
        best_accuracy=float(accuracy[best]),
        best_threshold=float(thresholds[best]),
        roc_points=roc,
    )


def verify(embedder, ds: IdentityDataset, pairs: PairSet) -> VerificationReport:
    """Cosine-distance verification accuracy under the best swept threshold."""
    if len(pairs) == 0:
        raise ContractViolation("verify requires a non-empty pair set")
    for a, b, s in zip(pairs.a_ids, pairs.b_ids, pairs.same):
        if (ds.labels[ds.row(a)] == ds.labels[ds.row(b)]) != bool(s):
            raise ContractViolation(
                f"pair ({a}, {b}) label disagrees with the dataset identity map"
            )
    distances = _pair_cosine_distances(embedder, ds, pairs)
    return threshold_sweep(distances, pairs.same)


def centroid_distance_matrix(
    embedder, ds: IdentityDataset
) -> tuple[list[int], np.ndarray]:
    """Pairwise squared Euclidean distances between per-identity mean embeddings.

    Returns (sorted identity ids, matrix); the matrix is exactly symmetric
    with a zero diagonal.
    """
    emb = _embeddings_for(embedder, ds, np.arange(ds.n_samples))
    idents = ds.identity_list
    centroids = np.stack([emb[ds.rows_of(i)].mean(axis=0) for i in idents])
    n = len(idents)
    mat = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            diff = centroids[i] - centroids[j]
            mat[i, j] = mat[j, i] = float(np.dot(diff, diff))
    return idents, mat


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with the average convention for ties."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = 0.5 * (i + j) + 1.0
        for t in range(i, j + 1):
            ranks[order[t]] = avg
        i = j + 1
    return ranks


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Spearman rank correlation (Pearson on average ranks)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ContractViolation("rank correlation needs equal-length inputs")
    if x.size < 3:
        raise InsufficientData("rank correlation needs >= 3 observations")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt(float(np.dot(rx, rx)) * float(np.dot(ry, ry)))
    if denom == 0.0:
        raise DegenerateInput("rank correlation undefined for constant ranks")
    return float(np.dot(rx, ry)) / denom


def structure_correlation(teacher_matrix: np.ndarray, student_matrix: np.ndarray) -> float:
    """Spearman correlation of the strict upper triangles of two centroid matrices."""
    tm = np.asarray(teacher_matrix, dtype=np.float64)
    sm = np.asarray(student_matrix, dtype=np.float64)
    if tm.shape != sm.shape or tm.ndim != 2 or tm.shape[0] != tm.shape[1]:
        raise ContractViolation("matrices must be square and equally shaped")
    n = tm.shape[0]
    if n < 3:
        raise InsufficientData("structure correlation needs >= 3 identities")
    iu = np.triu_indices(n, k=1)
    return spearman(tm[iu], sm[iu])


# ---------------------------------------------------------------------------
# pair file format: JSON lines {a, b, same}
# ---------------------------------------------------------------------------

def save_pairs_jsonl(pairs: PairSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a, b, s in zip(pairs.a_ids, pairs.b_ids, pairs.same):
            fh.write(json.dumps({"a": int(a), "b": int(b), "same": bool(s)}) + "\n")


def load_pairs_jsonl(path) -> PairSet:
    a_ids = []
    b_ids = []
    same = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln in fh:
            if not ln.strip():
                continue
            try:
                rec = json.loads(ln)
                a_ids.append(int(rec["a"]))
                b_ids.append(int(rec["b"]))
                same.append(bool(rec["same"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}: bad pair record: {exc}") from exc
    if not a_ids:
        raise FormatError(f"{path}: empty pair file")
    return PairSet(a_ids=np.array(a_ids), b_ids=np.array(b_ids), same=np.array(same))

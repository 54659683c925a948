"""Frozen teacher oracle, teacher distance gaps, and margin calibration.

A TeacherOracle answers embedding queries but is never updated; its distance
is fixed to squared Euclidean on unit-norm outputs, the same convention the
student trains under, so teacher gaps and the student's hinge live on one
scale.  Oracles are either a precomputed embedding table or a frozen MLP;
tables are preferred during training (no repeated forward cost, exactly
reproducible answers).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import IdentityDataset, Sample
from .errors import (
    CapacityError,
    ContractViolation,
    FormatError,
    UnknownSampleError,
)
from .mlp import MlpModel, forward_batch
from .numerics import Rng, pairwise_sq_euclidean, sq_euclidean

TABLE_MAGIC = b"TFEMB1"
UNIT_NORM_TOL = 1e-6


class TeacherOracle:
    """Immutable embedding oracle; construct via from_model / from_table."""

    def __init__(self, dim: int, backing: str, *, model=None, sample_ids=None,
                 identities=None, vectors=None, warning: str | None = None):
        if backing not in ("model", "table"):
            raise ContractViolation("backing must be 'model' or 'table'")
        self.dim = int(dim)
        self.backing = backing
        self.model = model
        self.warning = warning
        if backing == "table":
            self.sample_ids = np.asarray(sample_ids, dtype=np.int64)
            self.identities = np.asarray(identities, dtype=np.int64)
            self.vectors = np.asarray(vectors, dtype=np.float64)
            if self.vectors.ndim != 2 or self.vectors.shape[1] != self.dim:
                raise ContractViolation("table vectors must be (n, dim)")
            n = self.vectors.shape[0]
            if self.sample_ids.shape != (n,) or self.identities.shape != (n,):
                raise ContractViolation("table arrays must align")
            norms = np.sqrt(np.einsum("ij,ij->i", self.vectors, self.vectors))
            if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
                raise ContractViolation("table vectors must be unit-norm")
            self._pos_of = {int(s): i for i, s in enumerate(self.sample_ids)}
            if len(self._pos_of) != n:
                raise ContractViolation("duplicate sample id in table")

    @classmethod
    def from_model(cls, model: MlpModel, warning: str | None = None) -> "TeacherOracle":
        if not model.normalize_output:
            raise ContractViolation("teacher models must L2-normalize their output")
        return cls(dim=model.embed_dim, backing="model", model=model, warning=warning)

    @classmethod
    def from_table(cls, sample_ids, identities, vectors,
                   model=None, warning: str | None = None) -> "TeacherOracle":
        vectors = np.asarray(vectors, dtype=np.float64)
        return cls(
            dim=vectors.shape[1], backing="table", model=model,
            sample_ids=sample_ids, identities=identities, vectors=vectors,
            warning=warning,
        )

    # -- queries ------------------------------------------------------------

    def embed(self, sample: Sample | int) -> np.ndarray:
        """Unit-norm embedding of one sample; table lookups accept bare ids."""
        if self.backing == "table":
            sid = sample.sample_id if isinstance(sample, Sample) else int(sample)
            pos = self._pos_of.get(sid)
            if pos is None:
                raise UnknownSampleError(f"sample id {sid} not in embedding table")
            return self.vectors[pos].copy()
        if not isinstance(sample, Sample):
            raise ContractViolation("model-backed oracles need a Sample with features")
        emb, _ = forward_batch(self.model, sample.x[None, :])
        return emb[0]

    def embed_rows(self, ds: IdentityDataset, rows: np.ndarray) -> np.ndarray:
        """Embeddings for dataset rows, one per row, as an (n, dim) matrix."""
        rows = np.asarray(rows, dtype=np.int64)
        if self.backing == "model":
            emb, _ = forward_batch(self.model, ds.X[rows])
            return emb
        positions = np.array(
            [self._pos_of.get(int(s), -1) for s in ds.sample_ids[rows]],
            dtype=np.int64,
        )
        if np.any(positions < 0):
            missing = int(ds.sample_ids[rows][positions < 0][0])
            raise UnknownSampleError(f"sample id {missing} not in embedding table")
        return self.vectors[positions]

    def distance(self, u, v) -> float:
        """The oracle's fixed metric: squared Euclidean."""
        return sq_euclidean(u, v)


def teacher_embed(oracle: TeacherOracle, sample: Sample | int) -> np.ndarray:
    return oracle.embed(sample)


def teacher_gap(oracle: TeacherOracle, a: Sample, p: Sample, n: Sample) -> float:
    """max(T(a,n) - T(a,p), 0): how much farther the teacher puts the negative.

    The label contract is enforced: p must share a's identity, n must not.
    """
    if p.identity != a.identity:
        raise ContractViolation("positive must share the anchor's identity")
    if n.identity == a.identity:
        raise ContractViolation("negative must have a different identity")
    ea = oracle.embed(a)
    ep = oracle.embed(p)
    en = oracle.embed(n)
    return max(oracle.distance(ea, en) - oracle.distance(ea, ep), 0.0)


def gaps_for_batch(
    oracle: TeacherOracle,
    ds: IdentityDataset,
    batch_rows: np.ndarray,
    triplets: np.ndarray,
) -> np.ndarray:
    """Vectorized teacher gaps for mined triplet positions within a batch."""
    vec = oracle.embed_rows(ds, np.asarray(batch_rows, dtype=np.int64))
    dmat = pairwise_sq_euclidean(vec)
    tri = np.asarray(triplets, dtype=np.int64)
    raw = dmat[tri[:, 0], tri[:, 2]] - dmat[tri[:, 0], tri[:, 1]]
    return np.maximum(raw, 0.0)


def tabulate(oracle: TeacherOracle, ds: IdentityDataset) -> TeacherOracle:
    """Precompute every dataset embedding into a table-backed oracle."""
    if oracle.backing == "table":
        return oracle
    rows = np.arange(ds.n_samples)
    vectors = oracle.embed_rows(ds, rows)
    return TeacherOracle.from_table(
        sample_ids=ds.sample_ids,
        identities=ds.labels,
        vectors=vectors,
        model=oracle.model,
        warning=oracle.warning,
    )


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

@dataclass
class CalibrationReport:
    """Empirical spread of teacher gaps over sampled triplets.

    ``triplets`` records the sampled (anchor, positive, negative) ids so the
    d values can be recomputed independently from raw embeddings.
    """

    sample_count: int
    d_values: list[float]
    d_min_observed: float
    d_max_observed: float
    suggested_m_min: float
    suggested_m_max: float
    triplets: list[tuple[int, int, int]] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "sample_count": self.sample_count,
                "d_values": self.d_values,
                "d_min_observed": self.d_min_observed,
                "d_max_observed": self.d_max_observed,
                "suggested_m_min": self.suggested_m_min,
                "suggested_m_max": self.suggested_m_max,
                "triplets": [list(t) for t in self.triplets],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "CalibrationReport":
        try:
            obj = json.loads(text)
            return cls(
                sample_count=int(obj["sample_count"]),
                d_values=[float(v) for v in obj["d_values"]],
                d_min_observed=float(obj["d_min_observed"]),
                d_max_observed=float(obj["d_max_observed"]),
                suggested_m_min=float(obj["suggested_m_min"]),
                suggested_m_max=float(obj["suggested_m_max"]),
                triplets=[tuple(int(v) for v in t) for t in obj.get("triplets", [])],
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad calibration report: {exc}") from exc


def calibrate_margins(
    oracle: TeacherOracle,
    ds: IdentityDataset,
    n_triplets: int,
    rng: Rng,
) -> CalibrationReport:
    """Sample random valid triplets and report the spread of teacher gaps.

    Anchors are drawn uniformly from samples whose identity has a second
    sample, positives uniformly from the anchor's other samples, negatives
    uniformly from all other-identity samples.  The suggested margin bounds
    are the observed extremes; callers may override both.
    """
    if n_triplets < 1:
        raise ContractViolation("n_triplets must be >= 1")
    eligible_rows = [
        r for r in range(ds.n_samples)
        if ds.rows_of(int(ds.labels[r])).size >= 2
    ]
    if not eligible_rows or ds.n_identities < 2:
        raise CapacityError("calibration needs >= 2 identities, one with >= 2 samples")
    d_values = []
    triplets = []
    for _ in range(n_triplets):
        a_row = eligible_rows[rng.randint(len(eligible_rows))]
        ident = int(ds.labels[a_row])
        same = [int(r) for r in ds.rows_of(ident) if r != a_row]
        p_row = same[rng.randint(len(same))]
        other = np.where(ds.labels != ident)[0]
        n_row = int(other[rng.randint(other.size)])
        a, p, n = ds.sample_at_row(a_row), ds.sample_at_row(p_row), ds.sample_at_row(n_row)
        d_values.append(teacher_gap(oracle, a, p, n))
        triplets.append((a.sample_id, p.sample_id, n.sample_id))
    d_min = min(d_values)
    d_max = max(d_values)
    return CalibrationReport(
        sample_count=n_triplets,
        d_values=d_values,
        d_min_observed=d_min,
        d_max_observed=d_max,
        suggested_m_min=d_min,
        suggested_m_max=d_max,
        triplets=triplets,
    )


# ---------------------------------------------------------------------------
# embedding table files: binary "TFEMB1" or JSON lines
# ---------------------------------------------------------------------------

def save_embedding_table(oracle: TeacherOracle, path) -> None:
    """Binary table: magic, u32 count, u32 dim, then per record
    u32 identity, u32 sample, dim little-endian f32 values."""
    if oracle.backing != "table":
        raise ContractViolation("only table-backed oracles can be saved")
    order = np.argsort(oracle.sample_ids, kind="stable")
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC)
        fh.write(struct.pack("<II", oracle.sample_ids.size, oracle.dim))
        for i in order:
            sid = int(oracle.sample_ids[i])
            ident = int(oracle.identities[i])
            if not (0 <= sid < 2**32 and 0 <= ident < 2**32):
                raise ContractViolation("table ids must fit in u32")
            fh.write(struct.pack("<II", ident, sid))
            fh.write(oracle.vectors[i].astype("<f4").tobytes())


def load_embedding_table(path) -> TeacherOracle:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(TABLE_MAGIC):
        raise FormatError(f"{path}: bad embedding-table magic (expected TFEMB1)")
    off = len(TABLE_MAGIC)
    try:
        count, dim = struct.unpack_from("<II", blob, off)
        off += 8
        sample_ids = np.empty(count, dtype=np.int64)
        identities = np.empty(count, dtype=np.int64)
        vectors = np.empty((count, dim), dtype=np.float64)
        for i in range(count):
            ident, sid = struct.unpack_from("<II", blob, off)
            off += 8
            vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=off)
            off += 4 * dim
            sample_ids[i] = sid
            identities[i] = ident
            vectors[i] = vec.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated embedding table: {exc}") from exc
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
    return TeacherOracle.from_table(sample_ids, identities, vectors)


def save_embedding_table_jsonl(oracle: TeacherOracle, path) -> None:
    if oracle.backing != "table":
        raise ContractViolation("only table-backed oracles can be saved")
    order = np.argsort(oracle.sample_ids, kind="stable")
    with open(path, "w", encoding="utf-8") as fh:
        for i in order:
            rec = {
                "identity": int(oracle.identities[i]),
                "sample": int(oracle.sample_ids[i]),
                "vector": [float(v) for v in oracle.vectors[i]],
            }
            fh.write(json.dumps(rec) + "\n")


def load_embedding_table_jsonl(path) -> TeacherOracle:
    sample_ids = []
    identities = []
    vectors = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln in fh:
            if not ln.strip():
                continue
            try:
                rec = json.loads(ln)
                identities.append(int(rec["identity"]))
                sample_ids.append(int(rec["sample"]))
                vectors.append([float(v) for v in rec["vector"]])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}: bad table record: {exc}") from exc
    if not vectors:
        raise FormatError(f"{path}: empty embedding table")
    return TeacherOracle.from_table(sample_ids, identities, np.array(vectors))

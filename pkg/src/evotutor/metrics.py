"""Run metrics, behavioral diversity, and latent-trajectory projection export.

The per-generation metrics row carries desk-scale analogues of teacher-side
indicators (gate-violation rate, questioning depth, strategy diversity over a
fixed probe set) and the four higher-order student event rates. Elite adapter
vectors are exported raw and as a deterministic 2-D principal-component
projection.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

METRICS_HEADER = (
    "generation,fitness_mean,fitness_max,sv,gate_rate,depth_mean,directness_mean,"
    "ki_rate,kt_rate,ct_rate,cr_rate"
)

REPORTS_HEADER = (
    "generation,individual,fitness,novelty,gate_rate,mean_process,mean_outcome,"
    "mean_total,elite,parents,error,wall_time_s"
)


@dataclass(frozen=True)
class MetricsRow:
    generation: int
    fitness_mean: float
    fitness_max: float
    sv: float
    gate_rate: float
    depth_mean: float
    directness_mean: float
    ki_rate: float
    kt_rate: float
    ct_rate: float
    cr_rate: float

    def validate(self) -> None:
        for name in ("sv", "gate_rate", "ki_rate", "kt_rate", "ct_rate", "cr_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"metrics rate {name}={v} outside [0, 1]")


def fmt(value) -> str:
    """Stable scalar formatting for CSV output (shortest round-trip floats)."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def metrics_row_csv(row: MetricsRow) -> str:
    return ",".join(
        fmt(getattr(row, name)) for name in MetricsRow.__dataclass_fields__
    )


# ---------------------------------------------------------------------------
# behavioral diversity
# ---------------------------------------------------------------------------


def jensen_shannon(p: np.ndarray, q: np.ndarray) -> float:
    """JS divergence in nats; bounded by log 2."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * (np.log(a[mask]) - np.log(b[mask]))))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def behavioral_diversity(signatures: list[np.ndarray]) -> float:
    """Mean pairwise JS divergence of concept-head distributions, in [0, 1].

    Each signature is a (n_probes, n_concepts) stack of probability rows taken
    at the shared probe beliefs.
    """
    if len(signatures) < 2:
        raise ValueError("behavioral diversity needs at least 2 individuals")
    n_probes = signatures[0].shape[0]
    if n_probes < 1:
        raise ValueError("behavioral diversity needs at least 1 probe")
    total = 0.0
    pairs = 0
    for i in range(len(signatures)):
        for j in range(i + 1, len(signatures)):
            for p in range(n_probes):
                total += jensen_shannon(signatures[i][p], signatures[j][p])
            pairs += n_probes
    return total / (pairs * math.log(2.0))


# ---------------------------------------------------------------------------
# projection export
# ---------------------------------------------------------------------------


def _leading_direction(
    centered: np.ndarray, orthogonal_to: np.ndarray | None = None, iters: int = 200
) -> np.ndarray:
    d = centered.shape[1]
    v = np.ones(d) / math.sqrt(d)
    if orthogonal_to is not None:
        v = v - (v @ orthogonal_to) * orthogonal_to
    for _ in range(iters):
        w = centered.T @ (centered @ v)
        if orthogonal_to is not None:
            w = w - (w @ orthogonal_to) * orthogonal_to
        norm = np.linalg.norm(w)
        if norm < 1e-30:
            break
        v = w / norm
    pivot = int(np.argmax(np.abs(v)))
    if v[pivot] < 0:
        v = -v
    return v


def pca_project(vectors: np.ndarray) -> np.ndarray:
    """Mean-centered projection onto the top two principal directions.

    Power iteration with one deflation step, fixed iteration count, and a
    deterministic start vector, so repeated runs give identical coordinates.
    The second direction is re-orthogonalized against the first each
    iteration; on rank-one data the deflated residual is rounding noise and
    would otherwise pull the iteration back to the leading direction.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] < 2:
        raise ValueError("projection needs at least 2 vectors")
    centered = vectors - vectors.mean(axis=0)
    v1 = _leading_direction(centered)
    scores1 = centered @ v1
    deflated = centered - np.outer(scores1, v1)
    v2 = _leading_direction(deflated, orthogonal_to=v1)
    return np.column_stack([scores1, deflated @ v2])


# ---------------------------------------------------------------------------
# file outputs
# ---------------------------------------------------------------------------


def write_metrics_csv(path: Path, rows: list[MetricsRow]) -> None:
    lines = [METRICS_HEADER]
    for row in rows:
        row.validate()
        lines.append(metrics_row_csv(row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_reports_csv(path: Path, report_rows: list[dict]) -> None:
    lines = [REPORTS_HEADER]
    for row in report_rows:
        lines.append(
            ",".join(
                [
                    fmt(row["generation"]),
                    fmt(row["individual"]),
                    fmt(row["fitness"]),
                    fmt(row["novelty"]),
                    fmt(row["gate_rate"]),
                    fmt(row["mean_process"]),
                    fmt(row["mean_outcome"]),
                    fmt(row["mean_total"]),
                    fmt(row["elite"]),
                    "|".join(str(p) for p in row["parents"]),
                    row.get("error") or "",
                    fmt(row["wall_time_s"]),
                ]
            )
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_trajectories_jsonl(path: Path, records: list[dict]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def write_projection_csv(
    path: Path, coords: np.ndarray, generations: list[int], ids: list[int],
    fitness: list[float],
) -> None:
    lines = ["generation,individual,x,y,fitness"]
    for g, ind, (x, y), f in zip(generations, ids, coords, fitness):
        lines.append(f"{g},{ind},{fmt(x)},{fmt(y)},{fmt(f)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_elites_npz(
    path: Path, vectors: np.ndarray, generations: list[int], ids: list[int],
    fitness: list[float],
) -> None:
    np.savez(
        path,
        vectors=vectors,
        generations=np.asarray(generations, dtype=np.int64),
        ids=np.asarray(ids, dtype=np.int64),
        fitness=np.asarray(fitness, dtype=np.float64),
    )


def export_projection(run_dir: Path) -> Path:
    """Recompute projection.csv from the raw elite vectors stored by a run."""
    source = run_dir / "elites.npz"
    if not source.exists():
        raise FileNotFoundError(f"no elite vector export at {source}")
    data = np.load(source)
    coords = pca_project(data["vectors"])
    out = run_dir / "projection.csv"
    write_projection_csv(
        out, coords, data["generations"].tolist(), data["ids"].tolist(),
        data["fitness"].tolist(),
    )
    return out

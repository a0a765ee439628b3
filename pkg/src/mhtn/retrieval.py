"""Bi-modal retrieval over common representations: cosine ranking, AP / MAP and
11-point interpolated precision-recall curves.

Ties in similarity are broken by ascending gallery instance id.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import kernels
from .errors import DataError


def cosine_similarity(a, b) -> float:
    """``a.b / (|a||b|)``; defined as 0 when either vector has zero norm."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DataError(f"cosine similarity dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(queries, gallery) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.shape[1] != g.shape[1]:
        raise DataError(f"query width {q.shape[1]} != gallery width {g.shape[1]}")
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    qs = np.divide(q, qn, out=np.zeros_like(q), where=qn > 0)
    gs = np.divide(g, gn, out=np.zeros_like(g), where=gn > 0)
    return np.clip(qs @ gs.T, -1.0, 1.0)


def average_precision(relevance, num_relevant: Optional[int] = None) -> float:
    """AP of one ranked list: ``(1/R) sum_k (R_k / k) rel_k``.

    ``num_relevant`` (R) defaults to the number of relevant flags; AP is 0
    when R is 0.
    """
    rel = np.asarray(relevance, dtype=np.float64).ravel()
    hits = rel.sum()
    R = hits if num_relevant is None else num_relevant
    if hits > R:
        raise DataError(f"{int(hits)} relevant items in the ranking but R = {R}")
    if R == 0:
        return 0.0
    ranks = np.arange(1, rel.size + 1)
    terms = (np.cumsum(rel) / ranks)[rel > 0]
    # left-to-right accumulation (cumsum, not pairwise sum) keeps results reproducible bit for bit
    return float(np.cumsum(terms)[-1] / R) if terms.size else 0.0


@dataclass
class TaskResult:
    query_modality: str
    gallery_modality: str
    map: float
    num_queries: int
    recall: np.ndarray = field(repr=False)
    precision: np.ndarray = field(repr=False)
    ap: np.ndarray = field(repr=False)


def evaluate_task(
    query_emb,
    query_labels,
    gallery_emb,
    gallery_labels,
    gallery_ids=None,
    query_modality: str = "query",
    gallery_modality: str = "gallery",
    workers: int = 1,
) -> TaskResult:
    """Every query ranks the full gallery by cosine similarity; MAP is the mean AP."""
    q = np.asarray(query_emb, dtype=np.float64)
    g = np.asarray(gallery_emb, dtype=np.float64)
    if q.shape[0] == 0 or g.shape[0] == 0:
        raise DataError(f"empty query or gallery set for {query_modality}->{gallery_modality}")
    ql = np.asarray(query_labels, dtype=np.int64)
    gl = np.asarray(gallery_labels, dtype=np.int64)
    gid = np.arange(g.shape[0]) if gallery_ids is None else np.asarray(gallery_ids)
    by_id = np.argsort(gid, kind="stable")
    g, gl = g[by_id], gl[by_id]

    def run(rows):
        return kernels.rank_metrics(cosine_matrix(q[rows], g), ql[rows], gl)

    chunks = np.array_split(np.arange(q.shape[0]), max(1, min(workers, q.shape[0])))
    if len(chunks) == 1:
        parts = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(len(chunks)) as pool:
            parts = list(pool.map(run, chunks))
    ap = np.concatenate([p[0] for p in parts])
    pr = np.vstack([p[1] for p in parts])
    levels = np.linspace(0.0, 1.0, kernels.PR_LEVELS)
    return TaskResult(query_modality, gallery_modality, float(ap.mean()), q.shape[0], levels, pr.mean(axis=0), ap)


@dataclass
class TaskMatrix:
    tasks: dict[tuple[str, str], TaskResult]

    @property
    def average(self) -> float:
        return float(np.mean([t.map for t in self.tasks.values()]))

    def __getitem__(self, key) -> TaskResult:
        return self.tasks[key]

    def __len__(self):
        return len(self.tasks)


def evaluate_all(
    embeddings: Mapping[str, np.ndarray],
    labels: Mapping[str, np.ndarray],
    ids: Optional[Mapping[str, np.ndarray]] = None,
    workers: int = 1,
) -> TaskMatrix:
    """MAP and PR curve for every ordered pair of distinct modalities."""
    mods = list(embeddings)
    if len(mods) < 2:
        raise DataError("bi-modal retrieval needs at least two embedded modalities")
    tasks = {}
    for qm, gm in permutations(mods, 2):
        tasks[(qm, gm)] = evaluate_task(
            embeddings[qm], labels[qm], embeddings[gm], labels[gm],
            None if ids is None else ids[gm], qm, gm, workers,
        )
    return TaskMatrix(tasks)


def format_results(matrix: TaskMatrix, meta: Optional[Mapping] = None) -> str:
    lines = []
    for key, val in (meta or {}).items():
        lines.append(f"# {key}={val}")
    lines.append("query_modality\tgallery_modality\tmap\tqueries")
    for t in matrix.tasks.values():
        lines.append(f"{t.query_modality}\t{t.gallery_modality}\t{t.map!r}\t{t.num_queries}")
    total = sum(t.num_queries for t in matrix.tasks.values())
    lines.append(f"average\taverage\t{matrix.average!r}\t{total}")
    return "\n".join(lines) + "\n"


def write_results(path, matrix: TaskMatrix, meta: Optional[Mapping] = None) -> None:
    Path(path).write_text(format_results(matrix, meta))


def read_results(path) -> dict:
    """``{(query, gallery): map}`` plus ``("average", "average")``."""
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or line.startswith("query_modality"):
            continue
        q, g, m, _ = line.split("\t")
        out[(q, g)] = float(m)
    return out


def write_pr_curves(directory, matrix: TaskMatrix) -> list[Path]:
    """One ``pr_<query>_<gallery>.tsv`` file of (recall, precision) rows per task."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for (qm, gm), t in matrix.tasks.items():
        p = directory / f"pr_{qm}_{gm}.tsv"
        rows = ["recall\tprecision"] + [f"{r!r}\t{v!r}" for r, v in zip(t.recall, t.precision)]
        p.write_text("\n".join(rows) + "\n")
        paths.append(p)
    return paths

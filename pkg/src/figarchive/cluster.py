"""Dimensionality reduction and over-clustering of image embeddings.

PCA runs on the covariance eigendecomposition (fine for d up to a few
thousand) keeping the smallest component count that reaches the explained-
variance target, with an optional cap.  Component signs are fixed so each
component's largest-magnitude coordinate is positive, making runs
reproducible.  K-means uses k-means++ seeding and Lloyd iterations, fully
deterministic given (X, K, seed); empty clusters are re-seeded from the
farthest point.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .embedding import EmbeddingMatrix
from .errors import ValidationError


@dataclass
class PcaModel:
    mean: np.ndarray  # (d,)
    components: np.ndarray  # (k, d) orthonormal rows
    explained_variance_ratio: np.ndarray  # (k,) non-increasing
    reached_target: bool = True

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def d(self) -> int:
        return self.components.shape[1]


@dataclass
class ClusterModel:
    K: int
    centroids: np.ndarray  # (K, k)
    seed: int
    assignments: dict[str, int] = field(default_factory=dict)
    inertia_history: list[float] = field(default_factory=list)

    def members(self, cluster_id: int) -> list[str]:
        return sorted(k for k, c in self.assignments.items() if c == cluster_id)

    def predict(self, X: EmbeddingMatrix) -> dict[str, int]:
        """Nearest-centroid assignment for new rows."""
        dists = _pairwise_sq_dists(X.values.astype(np.float64), self.centroids)
        nearest = np.argmin(dists, axis=1)
        return {key: int(c) for key, c in zip(X.row_keys, nearest)}


def fit_pca(
    X: EmbeddingMatrix,
    variance_target: float = 0.99,
    max_components: Optional[int] = None,
) -> PcaModel:
    """Fit mean-centered PCA keeping the smallest k reaching the target.

    ``reached_target`` is False when the cap (or the data's rank) stops the
    cumulative explained-variance ratio short of the target.
    """
    if not 0 < variance_target <= 1:
        raise ValidationError("variance_target must be in (0, 1]")
    if X.n < 2:
        raise ValidationError("PCA needs at least 2 samples")
    values = X.values.astype(np.float64)
    mean = values.mean(axis=0)
    centered = values - mean
    cov = (centered.T @ centered) / (X.n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]

    total = float(eigvals.sum())
    if total <= 0:
        raise ValidationError("data has zero variance")
    ratios = eigvals / total
    cumulative = np.cumsum(ratios)

    rank = int(np.count_nonzero(eigvals > 1e-12 * eigvals[0]))
    limit = rank if max_components is None else min(rank, max_components)
    reach_idx = int(np.searchsorted(cumulative, variance_target - 1e-12) + 1)
    k = min(reach_idx, limit)
    reached = cumulative[k - 1] >= variance_target - 1e-12

    components = eigvecs[:, :k].T.copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaModel(
        mean=mean,
        components=components,
        explained_variance_ratio=ratios[:k].copy(),
        reached_target=bool(reached),
    )


def project(model: PcaModel, X: EmbeddingMatrix) -> EmbeddingMatrix:
    """Rows become ``(x - mean) @ components.T`` in the reduced space."""
    if X.d != model.d:
        raise ValidationError(f"dimension mismatch: matrix d={X.d}, model d={model.d}")
    reduced = (X.values.astype(np.float64) - model.mean) @ model.components.T
    return EmbeddingMatrix(values=reduced.astype(np.float32), row_keys=list(X.row_keys))


def _pairwise_sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (n, K) squared euclidean distances, computed stably in float64
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp_init(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((K, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centers[0] = points[first]
    closest_sq = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, K):
        total = closest_sq.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest_sq / total))
        centers[i] = points[idx]
        closest_sq = np.minimum(closest_sq, ((points - centers[i]) ** 2).sum(axis=1))
    return centers


def kmeans(
    X: EmbeddingMatrix,
    K: int,
    seed: int,
    max_iters: int = 300,
    tol: float = 1e-6,
) -> ClusterModel:
    """Lloyd k-means with k-means++ seeding; deterministic given (X, K, seed)."""
    if X.n < K:
        raise ValidationError(f"need at least K={K} samples, have {X.n}")
    points = X.values.astype(np.float64)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(points, K, rng)
    inertia_history: list[float] = []
    labels = np.zeros(X.n, dtype=np.int64)

    for _ in range(max_iters):
        dists = _pairwise_sq_dists(points, centers)
        labels = np.argmin(dists, axis=1)
        inertia_history.append(float(dists[np.arange(X.n), labels].sum()))

        new_centers = centers.copy()
        for c in range(K):
            mask = labels == c
            if mask.any():
                new_centers[c] = points[mask].mean(axis=0)
        # re-seed empty clusters from the current farthest points
        empties = [c for c in range(K) if not (labels == c).any()]
        if empties:
            assigned_d = dists[np.arange(X.n), labels].copy()
            for c in empties:
                far = int(np.argmax(assigned_d))
                new_centers[c] = points[far]
                assigned_d[far] = -1.0
        shift = float(np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max())
        centers = new_centers
        if shift < tol:
            break

    dists = _pairwise_sq_dists(points, centers)
    labels = np.argmin(dists, axis=1)
    inertia_history.append(float(dists[np.arange(X.n), labels].sum()))
    assignments = {key: int(c) for key, c in zip(X.row_keys, labels)}
    return ClusterModel(
        K=K, centroids=centers, seed=seed,
        assignments=assignments, inertia_history=inertia_history,
    )


def sample_members(
    assignments: dict[str, int],
    cluster_id: int,
    n: int = 30,
    seed: int = 0,
) -> list[str]:
    """Uniform sample without replacement from one cluster's member keys."""
    if cluster_id not in set(assignments.values()):
        raise ValidationError(f"unknown cluster id {cluster_id}")
    members = sorted(k for k, c in assignments.items() if c == cluster_id)
    if len(members) <= n:
        return members
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(members), size=n, replace=False)
    return [members[i] for i in picks]


def sample_cluster(
    model: ClusterModel,
    cluster_id: int,
    n: int = 30,
    seed: int = 0,
) -> list[str]:
    """Sample montage keys from one cluster of a fitted model."""
    return sample_members(model.assignments, cluster_id, n=n, seed=seed)


def save_assignments(assignments: dict[str, int], path: str | Path) -> None:
    """Persist the image-key -> cluster-id cache as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_key", "cluster_id"])
        for key, cid in assignments.items():
            writer.writerow([key, cid])


def load_assignments(path: str | Path) -> dict[str, int]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["image_key", "cluster_id"]:
            raise ValidationError(f"unexpected assignment cache header: {header}")
        return {row[0]: int(row[1]) for row in reader if row}


def save_pca_model(model: PcaModel, out_dir: str | Path, name: str = "pca") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.components.bin").write_bytes(model.components.astype("<f8").tobytes())
    (out_dir / f"{name}.mean.bin").write_bytes(model.mean.astype("<f8").tobytes())
    header = out_dir / f"{name}.json"
    header.write_text(json.dumps({
        "k": model.k, "d": model.d,
        "explained_variance_ratio": model.explained_variance_ratio.tolist(),
        "reached_target": model.reached_target,
        "components_file": f"{name}.components.bin",
        "mean_file": f"{name}.mean.bin",
    }))
    return header


def load_pca_model(header_path: str | Path) -> PcaModel:
    header_path = Path(header_path)
    meta = json.loads(header_path.read_text())
    comp = np.frombuffer((header_path.parent / meta["components_file"]).read_bytes(), dtype="<f8")
    mean = np.frombuffer((header_path.parent / meta["mean_file"]).read_bytes(), dtype="<f8")
    return PcaModel(
        mean=mean.copy(),
        components=comp.reshape(meta["k"], meta["d"]).copy(),
        explained_variance_ratio=np.array(meta["explained_variance_ratio"]),
        reached_target=meta["reached_target"],
    )


def save_centroids(model: ClusterModel, out_dir: str | Path, name: str = "kmeans") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.centroids.bin").write_bytes(model.centroids.astype("<f8").tobytes())
    header = out_dir / f"{name}.json"
    header.write_text(json.dumps({
        "K": model.K, "dim": int(model.centroids.shape[1]), "seed": model.seed,
        "centroids_file": f"{name}.centroids.bin",
    }))
    return header


def load_centroids(header_path: str | Path, assignments: dict[str, int] | None = None) -> ClusterModel:
    header_path = Path(header_path)
    meta = json.loads(header_path.read_text())
    cents = np.frombuffer((header_path.parent / meta["centroids_file"]).read_bytes(), dtype="<f8")
    return ClusterModel(
        K=meta["K"],
        centroids=cents.reshape(meta["K"], meta["dim"]).copy(),
        seed=meta["seed"],
        assignments=dict(assignments or {}),
    )

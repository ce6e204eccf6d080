"""Walkthrough: embedding, over-clustering, and human-in-the-loop labeling.

Embeds synthetic images with the deterministic hash backend, reduces with
PCA, over-clusters with k-means, samples montages for review, applies
scripted annotations, resolves them by majority vote, and propagates labels
to every image.

Run:  python demos/02_cluster_and_annotate.py
"""

from __future__ import annotations

import numpy as np

from figarchive.cluster import fit_pca, kmeans, project, sample_members
from figarchive.embedding import HashEmbeddingBackend, embed_images
from figarchive.taxonomy import (
    ClusterAnnotation,
    disagreement_stats,
    load_taxonomy,
    propagate,
    resolve_all,
)


def main() -> None:
    # three visual "motifs"; each image is a noisy variant of one motif
    rng = np.random.default_rng(0)
    motifs = [bytes([v]) * 48 for v in (10, 120, 230)]
    images = []
    for i in range(90):
        motif = motifs[i % 3]
        noise = bytes(rng.integers(0, 4, size=4, dtype=np.uint8))
        images.append((f"img{i:03d}", motif + noise))

    matrix, skipped = embed_images(images, HashEmbeddingBackend(dim=64))
    print(f"embedded {matrix.n} images at d={matrix.d} ({len(skipped)} skipped)")

    pca = fit_pca(matrix, variance_target=0.99, max_components=25)
    reduced = project(pca, matrix)
    print(f"PCA kept {pca.k} components, cumulative EV "
          f"{float(np.cumsum(pca.explained_variance_ratio)[-1]):.3f}, "
          f"reached target: {pca.reached_target}")

    model = kmeans(reduced, K=6, seed=11)
    sizes = {c: len(model.members(c)) for c in sorted(set(model.assignments.values()))}
    print(f"k-means K=6 cluster sizes: {sizes}")

    montage = {c: sample_members(model.assignments, c, n=30, seed=100 + c) for c in sizes}
    print(f"montage sample for cluster 0: {montage[0][:5]}... ({len(montage[0])} keys)")

    # scripted annotations: two annotators agree, a third dissents on cluster 0
    taxonomy = load_taxonomy()
    annotations = []
    concepts = ["Microscopy", "Clinical Imaging", "Plots and Charts",
                "Maps", "Tables", "Immuno Assays"]
    locals_ = ["light microscopy", "x-ray radiography", "bar plot", "map", "table", "immunoassay"]
    for cid in sizes:
        for annotator in ("ann-a", "ann-b"):
            annotations.append(ClusterAnnotation(
                annotator, cid, "single", [concepts[cid]], [locals_[cid]]))
    annotations.append(ClusterAnnotation("ann-c", 0, "single", ["Tables"], ["checklist table"]))

    resolved = resolve_all(annotations, taxonomy=taxonomy)
    r0 = resolved[0]
    print(f"\ncluster 0 resolution: primary={r0.primary_global!r}, "
          f"needs_review={r0.needs_review} (one dissenting vote)")
    print(f"cluster 1 resolution: primary={resolved[1].primary_global!r}, "
          f"needs_review={resolved[1].needs_review}")

    labels = propagate(resolved, model.assignments)
    print(f"propagated labels to {len(labels)} images; "
          f"img000 -> {labels['img000'].primary_global!r}")

    stats = disagreement_stats(annotations)
    print("\ninter-annotator disagreement (percent):")
    for concept, row in stats.per_concept.items():
        print(f"  {concept}: mean={row['mean']:.2f} max={row['max']:.2f}")


if __name__ == "__main__":
    main()

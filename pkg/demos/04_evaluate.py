"""Walkthrough: zero-shot classification, retrieval recall, bootstrap
confidence intervals, and parameter interpolation.

Synthetic "encoders": class prototypes plus noise stand in for real image and
text embeddings.

Run:  python demos/04_evaluate.py
"""

from __future__ import annotations

import numpy as np

from figarchive.evaluation import (
    ClosedVqaItem,
    RetrievalSet,
    bootstrap_ci,
    closed_vqa_accuracy,
    recall_at_k,
    shuffle_answers,
    wise_ft_merge,
)


def main() -> None:
    rng = np.random.default_rng(1)
    d, m, n = 32, 4, 500

    # classification: image embeddings lean toward their class prototype
    prototypes = rng.standard_normal((m, d))
    items = []
    for _ in range(n):
        cls = int(rng.integers(m))
        image = prototypes[cls] + 0.8 * rng.standard_normal(d)
        items.append(ClosedVqaItem(
            image_embedding=image,
            answer_texts=[f"class {j}" for j in range(m)],
            answer_embeddings=prototypes.copy(),
            correct_index=cls,
        ))
    items = shuffle_answers(items, seed=7)
    accuracy, _ = closed_vqa_accuracy(items)
    scores = [1.0 if p == it.correct_index else 0.0
              for p, it in zip(closed_vqa_accuracy(items)[1], items)]
    low, high = bootstrap_ci(scores, resamples=1000, seed=7)
    print(f"closed-VQA accuracy over {n} items, {m} options: "
          f"{accuracy:.3f} (95% CI [{low:.3f}, {high:.3f}], chance {1 / m:.2f})")

    # retrieval: captions are noisy copies of their image embeddings
    n_pairs = 300
    images = rng.standard_normal((n_pairs, d))
    captions = images + 0.9 * rng.standard_normal((n_pairs, d))
    rs = RetrievalSet(image_embeddings=images, caption_embeddings=captions)
    for k in (1, 10, 100):
        print(f"recall@{k}: image->text {recall_at_k(rs, 'image_to_text', k):.3f}  "
              f"text->image {recall_at_k(rs, 'text_to_image', k):.3f}")

    # interpolation between a base and an adapted parameter set
    base = {"proj": np.zeros((4, 4)), "bias": np.zeros(4)}
    adapted = {"proj": np.ones((4, 4)), "bias": np.full(4, 2.0)}
    for alpha in (0.0, 0.5, 1.0):
        merged = wise_ft_merge(base, adapted, alpha)
        print(f"alpha={alpha}: proj mean {merged['proj'].mean():.2f}, "
              f"bias mean {merged['bias'].mean():.2f}")


if __name__ == "__main__":
    main()

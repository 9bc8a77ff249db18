"""The synthetic benchmark: deterministic scenes, five question families with
oracle-checked answers, attribute-structured region features, and the three
split regimes (iid, compositional holdout, changing priors).

Run: python demos/03_synthetic_benchmark.py
"""

import numpy as np

from ramen import data as D

# --- one scene, generated deterministically from (seed, id) -----------------
scene = D.generate_scene(seed=0, id=7, max_objects=5)
print(f"scene {scene.id}: {len(scene.objects)} objects")
for o in scene.objects:
    print(f"  {o.size:5s} {o.color:6s} {o.shape:8s} box=({o.box[0]:.2f},{o.box[1]:.2f},{o.box[2]:.2f},{o.box[3]:.2f})")

# --- questions with programmatic answers ------------------------------------
items = D.generate_questions(scene, per_family=2)
print("\nquestions:")
for it in items:
    check = D.answer_oracle(it, scene)
    assert check == it.answer
    print(f"  [{it.family:18s}] {it.question!r} -> {it.answer}")

# --- region features: codebook + noise + spatial tail, padded to 15 ---------
regions = D.featurize_scene(scene, noise_sigma=0.1, seed=3, visual_dim=256)
print(f"\nfeaturized: {len(regions)} regions x {regions.dim} dims "
      f"({len(scene.objects)} objects + {15 - len(scene.objects)} background)")

book = D.get_codebook(seed=3, visual_dim=2048)
entries = np.stack(list(book.entries().values()))
cos = entries @ entries.T
np.fill_diagonal(cos, 0.0)
print(f"codebook: 48 triples at 2048-d, max pairwise cosine {cos.max():.3f} (< 0.5)")

# --- split regimes -----------------------------------------------------------
for regime in ("iid", "compositional", "changing_priors"):
    items, scenes, info = D.generate_corpus(
        D.CorpusConfig(num_scenes=250, per_family=2, seed=5, regime=regime)
    )
    stats = D.corpus_statistics(items)
    line = f"{regime:16s} {stats['total']:5d} items, splits {stats['by_split']}"
    if regime == "compositional":
        line += f", held-out pairs {info['heldout_pairs'][:3]}..."
    if regime == "changing_priors":
        tvs = {k: round(v, 2) for k, v in info["tv_per_family"].items()}
        line += f", train-vs-test TV {tvs}"
    print("\n" + line)

# --- the changing-priors regime in numbers ----------------------------------
items, _, info = D.generate_corpus(
    D.CorpusConfig(num_scenes=250, per_family=2, seed=5, regime="changing_priors")
)
exist = [it for it in items if it.family == "exist"]
for split in ("train", "test"):
    counts = D._answer_counts([it for it in exist if it.split == split])
    total = sum(counts.values())
    dist = {a: round(c / total, 2) for a, c in sorted(counts.items())}
    print(f"exist answers in {split}: {dist}")

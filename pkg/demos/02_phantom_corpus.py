"""A small phantom corpus: split, content hash and a PCA-spread subset."""
import numpy as np

from ksyn.phantom import PhantomSpec, corpus_hash, make_corpus, pca_select

corpus = make_corpus(30, PhantomSpec(grid=(64, 64, 8)), seed=0, train_size=24)
train = corpus.train()
print(f"{len(corpus.volumes)} volumes, {len(train)} train / {len(corpus.heldout())} held out")
print(f"corpus hash {corpus_hash(corpus.volumes)[:16]}")

mag = np.abs(train[0].data)
print(f"frame-to-frame change in volume 0: {np.mean(np.abs(np.diff(mag, axis=2))):.4f}")

subset = pca_select(train, 6)
print(f"PCA subset of 6: {subset}")

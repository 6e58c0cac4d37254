"""Train a small k-space codec briefly and inspect latent shape and reconstruction error."""
import numpy as np

from ksyn.codec import CodecConfig, decode, encode, train_codec
from ksyn.kspace import volume_kspace
from ksyn.phantom import PhantomSpec, make_corpus

corpus = make_corpus(6, PhantomSpec(grid=(32, 32, 4)), seed=0, train_size=5)
ks = [volume_kspace(v) for v in corpus.train()]
cfg = CodecConfig(width=8, temporal_width=8, codebook_size=32, iterations=150, batch_volumes=2,
                  patch=(32, 32, 3))
res = train_codec(ks, cfg)
print(f"loss {np.mean(res.losses[:10]):.4f} -> {np.mean(res.losses[-10:]):.4f}")

held = volume_kspace(corpus.heldout()[0])
z, rec = encode(held, res.model)
out = decode(z, res.model, rec)
print(f"latent shape {z.shape}; held-out k-space relative error "
      f"{np.linalg.norm(out.data - held) / np.linalg.norm(held):.3f}")

"""Distribution metrics on embedded frames: real vs real, real vs noise."""
from ksyn.kspace import volume_kspace
from ksyn.metrics import evaluate_corpora
from ksyn.phantom import PhantomSpec, make_corpus
from ksyn.pipeline import noise_volumes, split_halves

corpus = make_corpus(24, PhantomSpec(grid=(32, 32, 8)), seed=0)
vols = [volume_kspace(v) for v in corpus.volumes]
a, b = split_halves(vols, seed=0)
noise = noise_volumes(12, vols, seed=0)
cfg = {"kid_subset_size": 50, "kid_subsets": 50}

for label, other in (("real half", a), ("noise", noise)):
    reps = evaluate_corpora(b, other, cfg)
    print(f"{label:>9s}: " + "  ".join(f"{r.metric} {r.value:.4g}" for r in reps))

"""Drive the full command-line pipeline on a tiny configuration.

Usage: python 08_cli_pipeline.py [workdir]
"""
import sys
import tempfile
from pathlib import Path

import yaml

from ksyn.cli import main
from ksyn.io import read_metric_csv

root = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="ksyn-demo-"))
root.mkdir(parents=True, exist_ok=True)
cfg = root / "tiny.yaml"
cfg.write_text(yaml.safe_dump({
    "seed": 1,
    "phantom": {"grid": [32, 32, 4]},
    "corpus": {"n": 12, "n_heldout": 6, "ablation_sizes": [3, 6]},
    "codec": {"width": 8, "temporal_width": 8, "codebook_size": 32, "iterations": 60,
              "batch_volumes": 2, "patch": [32, 32, 3]},
    "diffusion": {"T": 20, "iterations": 60, "batch": 8, "widths": [8, 16], "emb_dim": 8, "groups": 4},
    "synthesis": {"n": 8},
    "metrics": {"kid_subset_size": 16, "kid_subsets": 10},
}))
c = ["--config", str(cfg)]
steps = [
    ["phantom", *c, "--train-size", "9"],
    ["train-codec", *c, "--corpus", str(root / "phantom")],
    ["train-diffusion", *c, "--corpus", str(root / "phantom"), "--codec", str(root / "train-codec/codec.ckpt")],
    ["synthesize", *c, "--corpus", str(root / "phantom"), "--codec", str(root / "train-codec/codec.ckpt"),
     "--denoiser", str(root / "train-diffusion/denoiser.ckpt")],
    ["evaluate", *c, "--real", str(root / "phantom"), "--synth", str(root / "synthesize")],
    ["mask", *c, "--R", "4", "--grid", "32", "32"],
    ["export-png", *c, "--input", str(root / "synthesize"), "--frames", "0"],
]
for argv in steps:
    code = main([*argv, "--out", str(root / argv[0])])
    print(f"ksyn {argv[0]:<16s} exit {code}")
    if code:
        sys.exit(code)

for row in read_metric_csv(root / "evaluate/metrics.csv"):
    print(f"{row['metric']:>5s} {float(row['value']):.4g}")
print(f"outputs under {root}")

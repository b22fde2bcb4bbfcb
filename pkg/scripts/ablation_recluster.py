"""Re-clustering ablation: PSNR with and without residual-driven splits."""
import argparse
import json
import logging

from clusterinr.experiments import ReclusterSetup, median, recluster_ablation

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--seeds", type=int, default=3)
args = p.parse_args()
logging.basicConfig(level=logging.ERROR)

runs = [recluster_ablation(s, ReclusterSetup()) for s in range(args.seeds)]
for s, r in enumerate(runs):
    print(f"seed {s}: {json.dumps(r)}")
print(f"median gain {median([r['recluster'] - r['no_recluster'] for r in runs]):.2f} dB")

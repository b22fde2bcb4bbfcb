"""Branched versus shared heads at a matched parameter budget."""
import argparse
import json
import logging

from clusterinr.experiments import BranchSetup, branch_ablation, median

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--seeds", type=int, default=3)
p.add_argument("--width", type=int, default=BranchSetup.width)
p.add_argument("--points", type=int, default=BranchSetup.points)
args = p.parse_args()
logging.basicConfig(level=logging.ERROR)

runs = [branch_ablation(s, BranchSetup(points=args.points, width=args.width)) for s in range(args.seeds)]
for s, r in enumerate(runs):
    print(f"seed {s}: {json.dumps(r)}")
print(f"median gain {median([r['branched'] - r['shared'] for r in runs]):.2f} dB")

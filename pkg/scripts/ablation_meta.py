"""Meta-initialization ablation: fine-tuning epochs to reach the target loss."""
import argparse
import json
import logging

from clusterinr.experiments import MetaSetup, median, meta_ablation

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--seeds", type=int, default=5)
p.add_argument("--target", type=float, default=MetaSetup.target_loss)
args = p.parse_args()
logging.basicConfig(level=logging.ERROR)

runs = [meta_ablation(s, MetaSetup(target_loss=args.target)) for s in range(args.seeds)]
for s, r in enumerate(runs):
    print(f"seed {s}: {json.dumps(r)}")
print(f"median epoch reduction {median([r['reduction'] for r in runs]):.1%}")

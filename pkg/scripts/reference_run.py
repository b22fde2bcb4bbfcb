"""End-to-end reference encode: PSNR, compression ratio and wall time."""
import argparse
import json
import logging

from clusterinr.experiments import ReferenceSetup, reference_run

p = argparse.ArgumentParser(description=__doc__)
p.add_argument("--seed", type=int, default=0)
p.add_argument("--width", type=int, default=ReferenceSetup.width)
args = p.parse_args()
logging.basicConfig(level=logging.INFO)

print(json.dumps(reference_run(args.seed, ReferenceSetup(width=args.width)), indent=2))

"""DIRL/CCR ablation on the high-distractor split, with each model also scored
at the highest sweep magnitude. Writes one JSON line per run.

usage: python3 scripts/ablation.py [--out runs.jsonl] [--seeds 0,1,2]
"""
import argparse
import json

from dirlcc.experiments import ABLATION_SEEDS, SWEEP_MAGNITUDE, VARIANTS, ablation_runs, mean_bleu


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="ablation.jsonl")
    p.add_argument("--seeds", default=",".join(map(str, ABLATION_SEEDS)))
    args = p.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    results = ablation_runs(seeds, log=print)
    with open(args.out, "w") as fh:
        for r in results:
            fh.write(json.dumps({"variant": r.name, "seed": r.seed, "bleu4": r.report.bleu4,
                                 "exact_match": r.report.exact_match,
                                 f"sweep_bleu4_m{SWEEP_MAGNITUDE}": r.sweep.bleu4,
                                 "seconds": round(r.seconds, 1)}) + "\n")
    for name in VARIANTS:
        print(f"{name:10s} test {mean_bleu(results, name):.4f}  "
              f"magnitude {SWEEP_MAGNITUDE} {mean_bleu(results, name, 'sweep'):.4f}")


if __name__ == "__main__":
    main()

"""Train the synthetic preset on the toy split and print held-out metrics.

usage: python3 scripts/toy_run.py [key=value ...]   (config overrides)
"""
import json
import sys

from dirlcc.experiments import toy_run


def main(argv):
    overrides = dict(a.split("=", 1) for a in argv)
    res = toy_run(**overrides)
    r = res.report
    print(json.dumps({"exact_match": r.exact_match, "bleu4": r.bleu4, "pointing": r.pointing,
                      "by_change": {k: v["exact_match"] for k, v in r.by_change.items()},
                      "train_seconds": round(res.seconds, 1)}, indent=2))


if __name__ == "__main__":
    main(sys.argv[1:])

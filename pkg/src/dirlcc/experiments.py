"""Desk-scale reference runs shared by the acceptance suite and scripts/.

Each run is a pure function of its config and the fixed dataset seeds below,
so repeated runs give identical numbers.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

from .config import TrainConfig, preset
from .evaluate import EvalReport, evaluate, sweep_dataset
from .scenes import HIGH, MODERATE, generate_dataset

TOY_TRAIN, TOY_TEST = 2000, 200
TOY_SEEDS = (1, 2)
HIGH_SEEDS = (11, 12)
ABLATION_SEEDS = (0, 1, 2)
SWEEP_MAGNITUDE = 3

VARIANTS = {
    "full": dict(dirl=True, ccr=True),
    "dirl_only": dict(dirl=True, ccr=False),
    "ccr_only": dict(dirl=False, ccr=True),
    "baseline": dict(dirl=False, ccr=False),
}


@dataclass
class RunResult:
    name: str
    seed: int
    report: EvalReport
    seconds: float
    sweep: EvalReport | None = None
    trace: list | None = None


def toy_data():
    train = generate_dataset(TOY_TRAIN, TOY_SEEDS[0], distractors=MODERATE)
    test = generate_dataset(TOY_TEST, TOY_SEEDS[1], distractors=MODERATE)
    return train, test


def high_data():
    train = generate_dataset(TOY_TRAIN, HIGH_SEEDS[0], distractors=HIGH)
    test = generate_dataset(TOY_TEST, HIGH_SEEDS[1], distractors=HIGH)
    return train, test


def fit_and_score(config: TrainConfig, train_set, test_set, name="run", sweep_magnitude=None):
    from .train import train

    t0 = time.perf_counter()
    ckpt = train(config, train_set)
    seconds = time.perf_counter() - t0
    model = ckpt.model()
    sweep = None
    if sweep_magnitude is not None:
        sweep = evaluate(model, sweep_dataset(sweep_magnitude))
        sweep.magnitude = sweep_magnitude
    return RunResult(name, config.seed, evaluate(model, test_set), seconds, sweep, ckpt.trace)


def toy_run(**overrides) -> RunResult:
    train_set, test_set = toy_data()
    return fit_and_score(preset("synthetic", **overrides), train_set, test_set, "toy")


def ablation_runs(seeds=ABLATION_SEEDS, variants=VARIANTS, log=None, **overrides) -> list:
    """Train every variant for every seed on the high-distractor split. Each
    run is also scored on the sweep set at the highest magnitude."""
    train_set, test_set = high_data()
    results = []
    for name, flags in variants.items():
        for seed in seeds:
            cfg = preset("synthetic-ablation", seed=seed, **flags, **overrides)
            res = fit_and_score(cfg, train_set, test_set, name, SWEEP_MAGNITUDE)
            if log:
                log(f"{name} seed={seed} bleu={res.report.bleu4:.4f} "
                    f"sweep@{SWEEP_MAGNITUDE}={res.sweep.bleu4:.4f} ({res.seconds:.0f}s)")
            results.append(res)
    return results


def mean_bleu(results, name, field="report") -> float:
    vals = [getattr(r, field).bleu4 for r in results if r.name == name]
    return sum(vals) / len(vals)

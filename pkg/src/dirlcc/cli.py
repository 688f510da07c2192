"""Command-line entry point: gen-data, train, caption, eval, sweep."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import TrainConfig, apply_overrides, dump_config, load_config
from .errors import ContractError, FormatError, GenerationError, NumericError
from .evaluate import SWEEP_COUNT, SWEEP_SEED, distractor_sweep, evaluate
from .featio import load_dataset, read_features, save_dataset
from .metrics import AttentionMap, export_attention
from .scenes import CHANGE_TYPES, MODERATE, DistractorRange, generate_dataset
from .train import TrainingAborted, load_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("dirlcc")

# grid size, channels and distractor range per data preset
DATA_PRESETS = {
    "synthetic": (6, 32, MODERATE),
    "synthetic-clean": (6, 32, DistractorRange()),
    "synthetic-high": (6, 32, DistractorRange.for_magnitude(2)),
}


class UsageError(Exception):
    pass


def _write_jsonl(records, path=None):
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(lines)
    sys.stdout.write(lines)


def _parse_gain(text):
    parts = [float(p) for p in text.replace(":", ",").split(",")]
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) != 2 or parts[0] > parts[1]:
        raise UsageError(f"--gain expects G or LO,HI, got {text!r}")
    return tuple(parts)


def cmd_gen_data(args):
    if args.preset not in DATA_PRESETS:
        raise UsageError(f"unknown data preset {args.preset!r}; choose from {sorted(DATA_PRESETS)}")
    grid, channels, dist = DATA_PRESETS[args.preset]
    grid = args.grid or grid
    if args.magnitude is not None:
        dist = DistractorRange.for_magnitude(args.magnitude)
    if args.shift is not None:
        dist = replace(dist, max_shift=args.shift)
    if args.gain is not None:
        lo, hi = _parse_gain(args.gain)
        dist = replace(dist, gain_lo=lo, gain_hi=hi)
    if args.noise is not None:
        dist = replace(dist, noise_sigma=args.noise)
    mix = args.change_mix.split(",") if args.change_mix else list(CHANGE_TYPES)
    bad = [m for m in mix if m not in CHANGE_TYPES]
    if bad:
        raise UsageError(f"unknown change types {bad}")
    samples = generate_dataset(args.count, args.seed, mix, dist, grid, channels)
    manifest = save_dataset(samples, args.out)
    log.info("wrote %d pairs to %s", len(samples), manifest)
    return EXIT_OK


def _config(args) -> TrainConfig:
    overrides = {}
    for item in args.override or []:
        if "=" not in item:
            raise UsageError(f"--override expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    try:
        if args.config:
            return load_config(args.config, overrides)
        return apply_overrides(TrainConfig(), overrides)
    except ContractError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args):
    cfg = _config(args)
    samples = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    resume = load_checkpoint(args.resume) if args.resume else None

    def progress(rec):
        if rec["iteration"] % args.log_every == 0:
            log.info("iter %d  L_cap %.4f  L_dirl %.4f  L_ccr %.4f  offdiag %.3f", rec["iteration"],
                     rec["L_cap"], rec["L_dirl"], rec["L_ccr"], rec["offdiag_mean"])

    try:
        ckpt = train(cfg, samples, resume=resume, out_dir=out,
                     trace_path=out / "trace.jsonl", callback=progress)
    except TrainingAborted as exc:
        log.error("%s; last good checkpoint in %s", exc, out / "last_good.ckpt")
        return EXIT_NUMERIC
    log.info("finished at iteration %d; checkpoint %s", ckpt.iteration, out / "final.ckpt")
    return EXIT_OK


def cmd_caption(args):
    model = load_checkpoint(args.ckpt).model()
    before, after = read_features(args.before), read_features(args.after)
    if before.values.shape != after.values.shape:
        raise FormatError(f"before {before.values.shape} and after {after.values.shape} grids differ")
    res = model.caption(before.values[None], after.values[None], args.max_len)
    words = model.vocab.decode(res.tokens[0])
    record = {"caption": " ".join(w for w in words if not w.startswith("<")),
              "tokens": words, "truncated": res.truncated[0]}
    if args.dump_attn:
        h, w = before.height, before.width
        attn = AttentionMap.from_weights(words[1:], res.attention[0], h, w)
        record["attention"] = [str(p) for p in export_attention(attn, args.dump_attn)]
    _write_jsonl([record])
    return EXIT_OK


def cmd_eval(args):
    model = load_checkpoint(args.ckpt).model()
    report = evaluate(model, load_dataset(args.data))
    _write_jsonl([report.to_dict()], args.report)
    return EXIT_OK


def cmd_sweep(args):
    try:
        mags = [int(m) for m in args.magnitudes.split(",")]
    except ValueError:
        raise UsageError(f"--magnitudes expects integers like 0,1,2, got {args.magnitudes!r}") from None
    model = load_checkpoint(args.ckpt).model()
    reports = distractor_sweep(model, mags, args.count, args.seed)
    _write_jsonl([r.to_dict() for r in reports], args.report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dirlcc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic before/after dataset")
    g.add_argument("--preset", default="synthetic")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--change-mix", help="comma-separated change types")
    g.add_argument("--magnitude", type=int, help="distractor magnitude k (shift <= k)")
    g.add_argument("--shift", type=int, help="max cyclic shift per axis")
    g.add_argument("--gain", help="gain G or range LO,HI")
    g.add_argument("--noise", type=float, help="feature noise sigma")
    g.add_argument("--grid", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a captioner")
    t.add_argument("--config")
    t.add_argument("--override", action="append", metavar="KEY=VALUE")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("caption", help="caption one before/after feature pair")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--before", required=True)
    c.add_argument("--after", required=True)
    c.add_argument("--dump-attn")
    c.add_argument("--max-len", type=int)
    c.set_defaults(func=cmd_caption)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="BLEU-4 across distractor magnitudes")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--magnitudes", default="0,1,2,3")
    s.add_argument("--report")
    s.add_argument("--count", type=int, default=SWEEP_COUNT)
    s.add_argument("--seed", type=int, default=SWEEP_SEED)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        log.error("%s", exc)
        return EXIT_USAGE
    except (FormatError, GenerationError, FileNotFoundError, IsADirectoryError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except ContractError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

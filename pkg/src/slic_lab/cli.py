"""``slic-lab`` command line.

Every subcommand accepts ``--config`` (JSON run config), ``--seed`` (overrides
every section's seed), ``--out`` and ``--overwrite``.  Exit status is 0 on
success, 2 for refused or invalid input and 3 when training diverges.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import pipeline as P
from .calibration import TrainingDiverged
from .config import ConfigError, load_config
from .flops import FlopsInput, encoder_flops_per_token, decoder_flops_per_token, estimate_flops, flops_input_for
from .model import SequenceError, TrainingHalted
from .tasks import generate_dataset, write_dataset


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", help="JSON run config (defaults apply to missing keys)")
    p.add_argument("--seed", type=int, help="override every section's seed")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slic-lab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _common(p, "dataset directory")

    p = sub.add_parser("finetune", help="MLE fine-tuning with checkpoint selection")
    _common(p, "run directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--resume", help="continue from a last.ckpt")
    p.add_argument("--selection", choices=("perplexity", "rouge"), help="override finetune.selection")

    p = sub.add_parser("decode-candidates", help="build a candidate cache")
    _common(p, "cache file (JSONL)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="override decode.split")
    p.add_argument("--max-examples", type=int, help="override decode.max_examples")

    p = sub.add_parser("calibrate", help="calibrate a fine-tuned checkpoint on a cache")
    _common(p, "run directory")
    p.add_argument("--checkpoint", required=True, help="fine-tuned checkpoint")
    p.add_argument("--cache", required=True, help="training candidate cache")
    p.add_argument("--val-cache", help="held-out candidate cache for validation L_cal and tau")
    p.add_argument("--data", help="dataset directory for validation R_m")

    p = sub.add_parser("evaluate", help="decoding sweep and report tables")
    _common(p, "report directory")
    p.add_argument("--checkpoint", action="append", required=True, metavar="NAME=PATH",
                   help="repeatable; the first one picks alpha*")
    p.add_argument("--data", required=True)
    p.add_argument("--heldout-cache", help="candidate cache for the held-out likelihood/similarity tau")

    p = sub.add_parser("flops", help="inference FLOPs estimate")
    p.add_argument("--config", help="derive parameter counts from this config's model section")
    p.add_argument("--seed", type=int, help="accepted for uniformity; unused")
    p.add_argument("--out", help="write the JSON result here instead of stdout")
    p.add_argument("--overwrite", action="store_true")
    for name in ("n-enc-params", "n-dec-params", "n-enc-layer", "n-dec-layer", "d-enc-attn", "d-dec-attn"):
        p.add_argument(f"--{name}", type=int)
    p.add_argument("--n-enc-ctx", type=int, required=True)
    p.add_argument("--n-dec-ctx", type=int, required=True)
    p.add_argument("-m", "--num-candidates", type=int, required=True)

    p = sub.add_parser("preset", help="run every stage of a preset")
    p.add_argument("--name", default="salient_copy")
    p.add_argument("--config", help="use this config instead of the named preset")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="work directory")
    p.add_argument("--overwrite", action="store_true")
    return ap


def _flops(args) -> dict:
    explicit = {
        "n_enc_params": args.n_enc_params, "n_dec_params": args.n_dec_params,
        "n_enc_layer": args.n_enc_layer, "n_dec_layer": args.n_dec_layer,
        "d_enc_attn": args.d_enc_attn, "d_dec_attn": args.d_dec_attn,
    }
    if args.config:
        base = dataclasses.asdict(flops_input_for(load_config(args.config).model, args.n_enc_ctx, args.n_dec_ctx, args.num_candidates))
        base.update({k: v for k, v in explicit.items() if v is not None})
    else:
        missing = [k for k, v in explicit.items() if v is None]
        if missing:
            raise ConfigError(f"flops needs --config or all of {['--' + k.replace('_', '-') for k in missing]}")
        base = {**explicit, "n_enc_ctx": args.n_enc_ctx, "n_dec_ctx": args.n_dec_ctx, "m": args.num_candidates}
    f = FlopsInput(**base)
    return {
        "input": dataclasses.asdict(f),
        "C_enc": encoder_flops_per_token(f),
        "C_dec": decoder_flops_per_token(f),
        "total": estimate_flops(f),
    }


def run(args) -> dict:
    if args.command == "flops":
        return _flops(args)
    if args.command == "preset":
        from .experiment import load_preset, run_all

        cfg = load_config(args.config, args.seed) if args.config else load_preset(args.name, args.seed)
        res = run_all(cfg, args.out, args.overwrite, log=lambda s: print(s, file=sys.stderr))
        return {"summary": res["evaluate"]["summary"], "alpha_star": res["evaluate"]["alpha_star"], "seconds": res["seconds"]}

    cfg = load_config(args.config, args.seed)
    if args.command == "gen-data":
        from pathlib import Path

        if (Path(args.out) / "train.jsonl").exists() and not args.overwrite:
            raise P.StageError(f"{args.out} already holds a dataset; pass --overwrite to replace")
        write_dataset(generate_dataset(cfg.task), args.out, cfg.task)
        return {"data": args.out}
    if args.command == "finetune":
        if args.selection:
            cfg = dataclasses.replace(cfg, finetune=dataclasses.replace(cfg.finetune, selection=args.selection))
        return P.run_finetune(cfg, args.data, args.out, resume=args.resume, overwrite=args.overwrite)
    if args.command == "decode-candidates":
        split = args.split or cfg.candidates.split
        max_ex = args.max_examples if args.max_examples is not None else cfg.candidates.max_examples
        return P.run_decode_candidates(
            args.checkpoint, args.data, args.out, cfg.decode, cfg.similarity, split, max_ex, args.overwrite
        )
    if args.command == "calibrate":
        res = P.run_calibrate(cfg, args.checkpoint, args.cache, args.out, args.val_cache, args.data, args.overwrite)
        return {k: v for k, v in res.items() if k != "eval"}
    if args.command == "evaluate":
        ckpts = {}
        for item in args.checkpoint:
            name, sep, path = item.partition("=")
            if not sep or not name or not path:
                raise ConfigError(f"--checkpoint expects NAME=PATH, got {item!r}")
            ckpts[name] = path
        res = P.run_evaluate(cfg, ckpts, args.data, args.out, args.heldout_cache, args.overwrite)
        return {"alpha_star": res["alpha_star"], "summary": res["summary"]}
    raise ConfigError(f"unknown command {args.command}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = run(args)
    except (TrainingHalted, TrainingDiverged) as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 3
    except (ConfigError, P.StageError, SequenceError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    text = json.dumps(result, indent=2, sort_keys=True, default=str)
    if args.command == "flops" and args.out:
        from pathlib import Path

        if Path(args.out).exists() and not args.overwrite:
            print(f"error: {args.out} exists; pass --overwrite to replace", file=sys.stderr)
            return 2
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Chained preset run: gen-data, finetune, decode-candidates, calibrate, evaluate.

The held-out candidate sets used for the likelihood/similarity tau are decoded
from the fine-tuned checkpoint on the validation split, exactly like the
training cache, and never enter a gradient.
"""

from __future__ import annotations

import json
import time
from importlib import resources
from pathlib import Path

from . import pipeline as P
from .config import RunConfig, dump_config, from_dict
from .tasks import generate_dataset, write_dataset

PRESETS = ("salient_copy",)


def load_preset(name: str = "salient_copy", seed: int | None = None) -> RunConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    raw = json.loads(resources.files("slic_lab.presets").joinpath(f"{name}.json").read_text())
    cfg = from_dict(raw)
    return cfg.with_seed(seed) if seed is not None else cfg


def run_all(cfg: RunConfig, workdir, overwrite: bool = False, log=print) -> dict:
    """Run every stage into ``workdir``; returns the key numbers of each stage."""
    w = Path(workdir)
    w.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, w / "config.json")
    times = {}

    def stage(name, fn):
        t = time.perf_counter()
        out = fn()
        times[name] = time.perf_counter() - t
        log(f"[{name}] {times[name]:.1f}s")
        return out

    data = w / "data"
    stage("gen-data", lambda: write_dataset(generate_dataset(cfg.task), data, cfg.task))
    ft = stage("finetune", lambda: P.run_finetune(cfg, data, w / "finetune", overwrite=overwrite))
    ckpt = w / "finetune" / "finetuned.ckpt"
    stage("decode-candidates", lambda: P.run_decode_candidates(
        ckpt, data, w / "candidates.train.jsonl", cfg.decode, cfg.similarity,
        cfg.candidates.split, cfg.candidates.max_examples, overwrite))
    stage("decode-heldout", lambda: P.run_decode_candidates(
        ckpt, data, w / "candidates.val.jsonl", cfg.decode, cfg.similarity, "val", None, overwrite))
    cal = stage("calibrate", lambda: P.run_calibrate(
        cfg, ckpt, w / "candidates.train.jsonl", w / "calibrate", w / "candidates.val.jsonl", data, overwrite))
    ev = stage("evaluate", lambda: P.run_evaluate(
        cfg, {"finetuned": ckpt, "calibrated": w / "calibrate" / "calibrated.ckpt"}, data, w / "evaluate",
        w / "candidates.val.jsonl", overwrite))
    return {"finetune": ft, "calibrate": cal, "evaluate": ev, "seconds": times}

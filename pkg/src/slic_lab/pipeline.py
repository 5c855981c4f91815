"""The three training stages and the evaluation harness.

Every stage is a pure function of its input files, its config and its seed:
batch order, pair sampling and nucleus draws all come from generators seeded
by ``(seed, purpose, counter)``, and every output file is written with a fixed
float formatting and key order, so a rerun reproduces the files byte for byte.

Outputs
-------
finetune (``out_dir``)
    ``train_log.csv``  step, loss, grad_norm (one row per optimizer step)
    ``metrics.csv``    step, train_loss, val_perplexity, val_token_accuracy,
                       val_rouge1, val_rouge2, val_rougeL, val_r_m
    ``best_perplexity.ckpt``, ``best_rouge.ckpt``, ``last.ckpt`` (with Adam
    state) and ``finetuned.ckpt`` (the one picked by ``selection``)
decode-candidates
    one JSONL cache file, one record per example (see ``CACHE_FIELDS``)
calibrate (``out_dir``)
    ``loss_curve.csv`` step, loss, cal, reg, skipped, grad_norm
    ``eval.csv``       step, val_cal_loss, train_tau, val_tau, val_r_m
    ``final.ckpt``, ``best.ckpt`` (best validation R_m, latest on ties) and ``calibrated.ckpt``
    (a copy of ``best.ckpt``)
evaluate (``out_dir``)
    ``curves.csv``, ``alpha_sensitivity.csv``, ``summary.csv``; each row names
    the checkpoint id and the decoding configuration that produced it.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import shutil
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .calibration import (
    CalibrationExample,
    CandidateRecord,
    calibrate_step,
    untied_pairs,
)
from .config import RunConfig
from .decoding import DecodeConfig, decode_batch, normalize, select_best
from .metrics import (
    MetricTriple,
    SimilarityScore,
    SpanMatchConfig,
    kendall_tau,
    mean_triple,
    overall_score,
    repetition_rate,
    rouge_triple,
    span_similarity,
)
from .model import Adam, ModelCheckpoint, Seq2Seq, gather_targets, mle_train_step
from .tasks import Example, read_split, words

CACHE_FIELDS = ("example_id", "context_ids", "target_ids", "checkpoint_id", "decode_config", "similarity_config", "m_effective", "candidates")


class StageError(RuntimeError):
    """A stage refused to run (missing inputs, stale cache, existing outputs)."""


# ---------------------------------------------------------------------------
# small helpers


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["" if r.get(h) is None else _fmt(r[h]) for h in header])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _pairs(examples: list[Example]) -> list[tuple]:
    return [(e.x, e.y) for e in examples]


def _guard_dir(out_dir: Path, names, overwrite: bool) -> None:
    existing = [n for n in names if (out_dir / n).exists()]
    if existing and not overwrite:
        raise StageError(f"{out_dir} already holds {existing}; pass --overwrite to replace")
    out_dir.mkdir(parents=True, exist_ok=True)


def decode_texts(model: Seq2Seq, examples: list[Example], cfg: DecodeConfig, seed: int = 0, chunk: int = 256):
    """Candidate lists for ``examples``; example ``i`` samples with seed ``[seed, i]``."""
    out = []
    for s in range(0, len(examples), chunk):
        part = examples[s : s + chunk]
        seeds = [[seed, s + i] for i in range(len(part))]
        out.extend(decode_batch(model, [e.x for e in part], cfg, seeds))
    return out


def greedy_quality(model: Seq2Seq, examples: list[Example], num_beams: int = 1, max_len: int = 16) -> MetricTriple:
    cfg = DecodeConfig(method="beam", num_candidates=num_beams, max_len=max_len)
    cands = decode_texts(model, examples, cfg)
    return mean_triple(rouge_triple(words(select_best(c).tokens), words(e.y)) for c, e in zip(cands, examples))


def token_accuracy(model: Seq2Seq, examples: list[Example], batch_size: int = 256) -> float:
    """Fraction of target positions where the teacher-forced argmax is the target."""
    hit = total = 0
    with ad.no_grad():
        for s in range(0, len(examples), batch_size):
            part = examples[s : s + batch_size]
            logp, _, y_ids, mask = model.forward_batch([e.x for e in part], [e.y for e in part])
            pred = logp.data.argmax(axis=-1) + 2
            hit += int(((pred == y_ids) & mask).sum())
            total += int(mask.sum())
    return hit / total


def r_m(t: MetricTriple) -> float:
    return overall_score([t])


# ---------------------------------------------------------------------------
# fine-tuning


FINETUNE_FILES = ("train_log.csv", "metrics.csv", "best_perplexity.ckpt", "best_rouge.ckpt", "last.ckpt", "finetuned.ckpt")
METRIC_HEADER = (
    "step", "train_loss", "val_perplexity", "val_token_accuracy",
    "val_rouge1", "val_rouge2", "val_rougeL", "val_r_m",
)


def run_finetune(cfg: RunConfig, data_dir, out_dir, resume=None, overwrite: bool = False) -> dict:
    """MLE training with periodic validation; returns paths and checkpoint ids.

    With ``resume`` (a ``last.ckpt``) training continues from its step with its
    optimizer state; logs up to that step are kept.
    """
    ft = cfg.finetune
    out = Path(out_dir)
    if resume is None:
        _guard_dir(out, FINETUNE_FILES, overwrite)
    else:
        out.mkdir(parents=True, exist_ok=True)
    train = read_split(data_dir, "train")
    val = read_split(data_dir, "val")
    val_rouge_set = val[: ft.eval_examples]
    opt = Adam()
    log_rows: list[dict] = []
    metric_rows: list[dict] = []
    best = {"perplexity": math.inf, "rouge": -math.inf}

    if resume is not None:
        ck = ModelCheckpoint.load(resume)
        if ck.config != cfg.model:
            raise StageError("resume checkpoint was trained with a different model config")
        model = ck.model()
        opt.load_state_arrays(ck.extra)
        start = ck.step
        best = {"perplexity": ck.meta["best_perplexity"], "rouge": ck.meta["best_rouge"]}
        log_rows = [r for r in _typed_rows(out / "train_log.csv") if r["step"] <= start]
        metric_rows = [r for r in _typed_rows(out / "metrics.csv") if r["step"] <= start]
    else:
        model = Seq2Seq.initialize(cfg.model, ft.seed)
        start = 0

    window: list[float] = []

    def evaluate(step: int) -> None:
        ppl = model.perplexity(_pairs(val))
        acc = token_accuracy(model, val)
        tri = greedy_quality(model, val_rouge_set, 1, cfg.decode.max_len)
        row = {
            "step": step,
            "train_loss": float(np.mean(window)) if window else None,
            "val_perplexity": ppl,
            "val_token_accuracy": acc,
            "val_rouge1": tri.rouge1,
            "val_rouge2": tri.rouge2,
            "val_rougeL": tri.rougeL,
            "val_r_m": r_m(tri),
        }
        metric_rows.append(row)
        window.clear()
        kw = dict(step=step, val_perplexity=ppl, val_rouge=tri.to_dict())
        if ppl < best["perplexity"]:
            best["perplexity"] = ppl
            ModelCheckpoint.from_model(model, meta={"selected_by": "perplexity"}, **kw).save(out / "best_perplexity.ckpt")
        if row["val_r_m"] > best["rouge"]:
            best["rouge"] = row["val_r_m"]
            ModelCheckpoint.from_model(model, meta={"selected_by": "rouge"}, **kw).save(out / "best_rouge.ckpt")

    for step in range(start, ft.steps):
        rng = np.random.default_rng([ft.seed, 1, step])
        idx = rng.choice(len(train), size=min(ft.batch_size, len(train)), replace=False)
        batch = [train[i] for i in idx]
        loss = mle_train_step(
            model, opt, [e.x for e in batch], [e.y for e in batch],
            ft.learning_rate, ft.grad_clip, ft.label_smoothing,
        )
        log_rows.append({"step": step + 1, "loss": loss, "grad_norm": opt.last_norm})
        window.append(loss)
        if (step + 1) % ft.eval_every == 0 or step + 1 == ft.steps:
            evaluate(step + 1)
    if not metric_rows:
        evaluate(start)

    meta = {"best_perplexity": best["perplexity"], "best_rouge": best["rouge"]}
    ModelCheckpoint.from_model(model, step=max(start, ft.steps), meta=meta, extra=opt.state_arrays()).save(out / "last.ckpt")
    _write_csv(out / "train_log.csv", ("step", "loss", "grad_norm"), log_rows)
    _write_csv(out / "metrics.csv", METRIC_HEADER, metric_rows)
    chosen = out / ("best_perplexity.ckpt" if ft.selection == "perplexity" else "best_rouge.ckpt")
    shutil.copyfile(chosen, out / "finetuned.ckpt")
    return {
        "finetuned": str(out / "finetuned.ckpt"),
        "best_perplexity_id": ModelCheckpoint.load(out / "best_perplexity.ckpt").checkpoint_id(),
        "best_rouge_id": ModelCheckpoint.load(out / "best_rouge.ckpt").checkpoint_id(),
        "final_val_token_accuracy": metric_rows[-1]["val_token_accuracy"],
    }


def _typed_rows(path) -> list[dict]:
    rows = []
    for r in read_csv(path):
        rows.append({k: (int(v) if k == "step" else (float(v) if v != "" else None)) for k, v in r.items()})
    return rows


# ---------------------------------------------------------------------------
# candidate cache


def _dedup(cands):
    seen, out = set(), []
    for c in cands:
        if c.tokens not in seen:
            seen.add(c.tokens)
            out.append(c)
    return out


def score_candidates(model: Seq2Seq, x, target, cand_tokens, sim_cfg: SpanMatchConfig):
    """Teacher-forced log-probs, span similarities and ROUGE for one candidate set."""
    ys = [tuple(c) for c in cand_tokens] + [tuple(target)]
    with ad.no_grad():
        logp, hidden, y_ids, mask = model.forward_batch([x], ys, [0] * len(ys))
        seq = (gather_targets(logp, y_ids, mask).data * mask).sum(axis=1)
    lengths = mask.sum(axis=1)
    if sim_cfg.representation_source == "token_embeddings":
        emb = model.params["embed"].data
        reps = [emb[np.asarray(y)] for y in ys]
    else:
        reps = [hidden.data[k, : lengths[k]] for k in range(len(ys))]
    tgt = reps[-1]
    out = []
    for k, toks in enumerate(ys[:-1]):
        sim = span_similarity(reps[k], tgt, sim_cfg)
        out.append({
            "token_ids": list(toks),
            "ft_log_prob": float(seq[k]),
            "span_similarity": sim.to_dict(),
            "rouge": rouge_triple(words(toks), words(target)).to_dict(),
        })
    return out


def run_decode_candidates(
    ckpt_path,
    data_dir,
    out_path,
    decode_cfg: DecodeConfig,
    sim_cfg: SpanMatchConfig,
    split: str = "train",
    max_examples: int | None = None,
    overwrite: bool = False,
    chunk: int = 256,
) -> dict:
    """Decode a candidate set for every example of ``split`` (or its first ``max_examples``)."""
    out = Path(out_path)
    if out.exists() and not overwrite:
        raise StageError(f"candidate cache {out} exists; pass --overwrite to replace")
    ck = ModelCheckpoint.load(ckpt_path)
    model = ck.model()
    cid = ck.checkpoint_id()
    examples = read_split(data_dir, split)
    if max_examples is not None:
        examples = examples[:max_examples]
    sim_dict = {"span_lengths": list(sim_cfg.span_lengths), "representation_source": sim_cfg.representation_source}
    lines = []
    for s in range(0, len(examples), chunk):
        part = examples[s : s + chunk]
        seeds = [[decode_cfg.seed, s + i] for i in range(len(part))]
        cands = decode_batch(model, [e.x for e in part], decode_cfg, seeds)
        for e, cs in zip(part, cands):
            toks = [c.tokens for c in _dedup(cs)]
            rec = {
                "example_id": e.id,
                "context_ids": list(e.x),
                "target_ids": list(e.y),
                "checkpoint_id": cid,
                "decode_config": decode_cfg.to_dict(),
                "similarity_config": sim_dict,
                "m_effective": len(toks),
                "candidates": score_candidates(model, e.x, e.y, toks, sim_cfg),
            }
            lines.append(json.dumps(rec, sort_keys=True))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(line + "\n" for line in lines))
    return {"cache": str(out), "records": len(lines), "checkpoint_id": cid}


def read_cache(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def cache_examples(records) -> list[CalibrationExample]:
    out = []
    for r in records:
        cands = [
            CandidateRecord(
                tuple(c["token_ids"]),
                float(c["ft_log_prob"]),
                SimilarityScore.from_dict(c["span_similarity"]),
                MetricTriple.from_dict(c["rouge"]),
            )
            for c in r["candidates"]
        ]
        out.append(CalibrationExample(tuple(r["context_ids"]), tuple(r["target_ids"]), cands))
    return out


# ---------------------------------------------------------------------------
# calibration


def candidate_log_probs(model: Seq2Seq, examples: list[CalibrationExample], chunk: int = 64) -> list[np.ndarray]:
    """Current sequence log-probs of every candidate, per example."""
    out = []
    with ad.no_grad():
        for s in range(0, len(examples), chunk):
            part = examples[s : s + chunk]
            ys, owners = [], []
            for b, ex in enumerate(part):
                for c in ex.candidates:
                    ys.append(tuple(c.tokens))
                    owners.append(b)
            if not ys:
                out.extend(np.zeros(0) for _ in part)
                continue
            lp = model.sequence_log_probs([ex.context for ex in part], ys, owners).data
            k = 0
            for ex in part:
                out.append(lp[k : k + len(ex.candidates)].copy())
                k += len(ex.candidates)
    return out


def mean_tau(model: Seq2Seq, examples: list[CalibrationExample], source: str = "span_f") -> float:
    """Mean Kendall tau between current log-probs and frozen similarities, over sets of >= 2."""
    lps = candidate_log_probs(model, examples)
    taus = [
        kendall_tau(lp, [c.score(source) for c in ex.candidates])
        for lp, ex in zip(lps, examples)
        if len(ex.candidates) >= 2
    ]
    return float(np.mean(taus)) if taus else 0.0


def full_rank_loss(model: Seq2Seq, examples: list[CalibrationExample], beta: float, source: str = "span_f") -> float:
    """Rank loss averaged over every untied pair (no sampling), then over examples."""
    lps = candidate_log_probs(model, examples)
    vals = []
    for lp, ex in zip(lps, examples):
        pairs = untied_pairs([c.score(source) for c in ex.candidates])
        if pairs:
            vals.append(np.mean([max(0.0, beta - lp[i] + lp[j]) for i, j in pairs]))
    return float(np.mean(vals)) if vals else 0.0


CALIBRATE_FILES = ("loss_curve.csv", "eval.csv", "final.ckpt", "best.ckpt", "calibrated.ckpt")


def run_calibrate(
    cfg: RunConfig,
    ft_ckpt_path,
    cache_path,
    out_dir,
    val_cache_path=None,
    data_dir=None,
    overwrite: bool = False,
) -> dict:
    """Calibrate from the fine-tuned checkpoint on a candidate cache.

    Validation R_m needs ``data_dir``; validation L_cal and tau need
    ``val_cache_path``.  ``best.ckpt`` is the evaluated step (after step 0)
    with the highest validation R_m, or the final model when none is available.
    """
    cal_cfg, run = cfg.calibration, cfg.calibrate_run
    out = Path(out_dir)
    _guard_dir(out, CALIBRATE_FILES, overwrite)
    ft_ck = ModelCheckpoint.load(ft_ckpt_path)
    cid = ft_ck.checkpoint_id()
    records = read_cache(cache_path)
    if not records:
        raise StageError(f"candidate cache {cache_path} is empty")
    stale = {r["checkpoint_id"] for r in records} - {cid}
    if stale:
        raise StageError(f"cache {cache_path} was built from checkpoint(s) {sorted(stale)}, not {cid}")
    train = cache_examples(records)
    val_ex = []
    if val_cache_path is not None:
        vrec = read_cache(val_cache_path)
        if {r["checkpoint_id"] for r in vrec} - {cid}:
            raise StageError(f"validation cache {val_cache_path} does not match checkpoint {cid}")
        val_ex = cache_examples(vrec)
    val_data = read_split(data_dir, "val")[: run.val_examples] if data_dir is not None else []

    model = ft_ck.model()
    ft_model = ft_ck.model()
    opt = Adam()
    src = cal_cfg.similarity_source
    pair_rng = np.random.default_rng([run.seed, 11])
    tau_train = train[: run.tau_examples]

    curve, evals = [], []
    best_score, best_step = -math.inf, None

    def evaluate(step: int) -> None:
        nonlocal best_score, best_step
        row = {"step": step, "train_tau": mean_tau(model, tau_train, src)}
        if val_ex:
            row["val_cal_loss"] = full_rank_loss(model, val_ex, cal_cfg.beta, src)
            row["val_tau"] = mean_tau(model, val_ex, src)
        if val_data:
            row["val_r_m"] = r_m(greedy_quality(model, val_data, run.val_num_beams, cfg.decode.max_len))
            # ties go to the later step: more calibration at equal quality
            if step > 0 and row["val_r_m"] >= best_score:
                best_score, best_step = row["val_r_m"], step
                ModelCheckpoint.from_model(model, step=step, meta={"selected_by": "val_r_m", "from": cid}).save(out / "best.ckpt")
        evals.append(row)

    evaluate(0)
    order: list[int] = []
    epoch = 0
    for step in range(run.steps):
        if len(order) < cal_cfg.batch_size:
            perm = np.random.default_rng([run.seed, 7, epoch]).permutation(len(train))
            order.extend(int(i) for i in perm)
            epoch += 1
        idx, order = order[: cal_cfg.batch_size], order[cal_cfg.batch_size :]
        res = calibrate_step([train[i] for i in idx], cal_cfg, model, ft_model, opt, pair_rng)
        curve.append({"step": step + 1, "loss": res.loss, "cal": res.cal, "reg": res.reg,
                      "skipped": res.skipped, "grad_norm": res.grad_norm})
        if (step + 1) % run.eval_every == 0 or step + 1 == run.steps:
            evaluate(step + 1)

    final = ModelCheckpoint.from_model(model, step=run.steps, meta={"from": cid})
    final.save(out / "final.ckpt")
    if best_step is None:
        shutil.copyfile(out / "final.ckpt", out / "best.ckpt")
    shutil.copyfile(out / "best.ckpt", out / "calibrated.ckpt")
    _write_csv(out / "loss_curve.csv", ("step", "loss", "cal", "reg", "skipped", "grad_norm"), curve)
    _write_csv(out / "eval.csv", ("step", "val_cal_loss", "train_tau", "val_tau", "val_r_m"), evals)
    return {
        "final": str(out / "final.ckpt"),
        "best": str(out / "best.ckpt"),
        "calibrated": str(out / "calibrated.ckpt"),
        "best_step": best_step if best_step is not None else run.steps,
        "eval": evals,
        "skipped_fraction": (sum(r["skipped"] for r in curve) / (len(curve) * cal_cfg.batch_size)) if curve else 0.0,
    }


# ---------------------------------------------------------------------------
# evaluation


CURVE_HEADER = (
    "checkpoint", "checkpoint_id", "method", "num_candidates", "alpha", "nucleus_p", "seed",
    "rouge1", "rouge2", "rougeL", "r_m", "rep", "kendall_tau", "mean_candidates",
)
ALPHA_HEADER = ("checkpoint", "checkpoint_id", "method", "num_candidates", "alpha", "rouge1", "rouge2", "rougeL", "r_m", "rep")
SUMMARY_HEADER = (
    "checkpoint", "checkpoint_id", "split", "alpha_star", "perplexity", "rouge1", "rouge2", "rougeL", "r_m",
    "rep", "rouge_l_alpha0", "rouge_l_alpha_star", "heldout_tau", "decode",
)


def _quality_row(cands_per_example, examples, alpha):
    """Select with ``alpha`` (re-normalizing stored log-probs) and score against targets."""
    triples, outputs, taus = [], [], []
    for cands, e in zip(cands_per_example, examples):
        rescored = [dataclasses.replace(c, normalized_score=normalize(c.log_prob, len(c.tokens), alpha)) for c in cands]
        best = select_best(rescored)
        out = words(best.tokens)
        outputs.append(out)
        triples.append(rouge_triple(out, words(e.y)))
        if len(cands) >= 2:
            q = [rouge_triple(words(c.tokens), words(e.y)).rougeL for c in cands]
            taus.append(kendall_tau([c.log_prob for c in cands], q))
    tri = mean_triple(triples)
    return {
        "rouge1": tri.rouge1, "rouge2": tri.rouge2, "rougeL": tri.rougeL, "r_m": r_m(tri),
        "rep": repetition_rate(outputs), "kendall_tau": float(np.mean(taus)) if taus else 0.0,
        "mean_candidates": float(np.mean([len(c) for c in cands_per_example])),
    }


def choose_alpha(model: Seq2Seq, examples: list[Example], grid, num_beams: int, max_len: int) -> tuple[float, list[dict]]:
    """Alpha with the best R_m on ``examples`` (ties go to the smaller alpha)."""
    rows, best, best_a = [], -math.inf, None
    for a in sorted(grid):
        cfg = DecodeConfig(method="beam", num_candidates=num_beams, alpha=float(a), max_len=max_len)
        row = _quality_row(decode_texts(model, examples, cfg), examples, float(a))
        rows.append({"alpha": float(a), **row})
        if row["r_m"] > best:
            best, best_a = row["r_m"], float(a)
    return best_a, rows


def run_evaluate(
    cfg: RunConfig,
    checkpoints: dict,
    data_dir,
    out_dir,
    heldout_cache=None,
    overwrite: bool = False,
) -> dict:
    """Decode sweep over checkpoints x methods x num_candidates x {0, alpha*}.

    ``checkpoints`` maps a display name to a checkpoint path; alpha* is chosen
    on ``alpha_split`` with the first checkpoint, which should be the
    fine-tuned one.
    """
    ev = cfg.evaluate
    if not checkpoints:
        raise StageError("evaluate needs at least one checkpoint")
    if 0.0 not in ev.alpha_grid:
        raise StageError("alpha_grid must contain 0")
    out = Path(out_dir)
    _guard_dir(out, ("curves.csv", "alpha_sensitivity.csv", "summary.csv"), overwrite)
    examples = read_split(data_dir, ev.split)
    alpha_examples = read_split(data_dir, ev.alpha_split)
    if ev.max_examples is not None:
        examples = examples[: ev.max_examples]
        alpha_examples = alpha_examples[: ev.max_examples]
    loaded = {name: ModelCheckpoint.load(p) for name, p in checkpoints.items()}
    models = {name: ck.model() for name, ck in loaded.items()}
    ids = {name: ck.checkpoint_id() for name, ck in loaded.items()}
    first = next(iter(models))

    alpha_rows = []
    if ev.alpha_star is not None:
        alpha_star = float(ev.alpha_star)
    else:
        alpha_star, _ = choose_alpha(models[first], alpha_examples, ev.alpha_grid, ev.alpha_select_candidates, ev.max_len)
    alphas = sorted({0.0, alpha_star})

    heldout = cache_examples(read_cache(heldout_cache)) if heldout_cache is not None else None

    curves, summary = [], []
    for name, model in models.items():
        base = {"checkpoint": name, "checkpoint_id": ids[name]}
        for a in sorted(set(ev.alpha_grid) | {alpha_star}):
            dc = DecodeConfig(method="beam", num_candidates=ev.alpha_select_candidates, alpha=float(a), max_len=ev.max_len)
            row = _quality_row(decode_texts(model, examples, dc), examples, float(a))
            alpha_rows.append({**base, "method": "beam", "num_candidates": dc.num_candidates, "alpha": float(a), **row})
        for method in ev.methods:
            for n in ev.num_candidates:
                sampled = None
                for a in alphas:
                    dc = DecodeConfig(
                        method=method, num_candidates=n, alpha=a, nucleus_p=ev.nucleus_p,
                        max_len=ev.max_len, seed=ev.seed,
                    )
                    if method == "nucleus":
                        # sampling does not depend on alpha, only the final selection does
                        sampled = sampled if sampled is not None else decode_texts(model, examples, dc, ev.seed)
                        cands = sampled
                    else:
                        cands = decode_texts(model, examples, dc, ev.seed)
                    row = _quality_row(cands, examples, a)
                    curves.append({**base, "method": method, "num_candidates": n, "alpha": a,
                                   "nucleus_p": ev.nucleus_p if method == "nucleus" else None,
                                   "seed": ev.seed if method == "nucleus" else None, **row})

        def pick(a):
            return next(r for r in alpha_rows if r["checkpoint"] == name and r["alpha"] == a)

        head = pick(alpha_star)
        summary.append({
            **base,
            "split": ev.split,
            "alpha_star": alpha_star,
            "perplexity": model.perplexity(_pairs(examples)),
            "rouge1": head["rouge1"], "rouge2": head["rouge2"], "rougeL": head["rougeL"], "r_m": head["r_m"],
            "rep": head["rep"],
            "rouge_l_alpha0": pick(0.0)["rougeL"],
            "rouge_l_alpha_star": head["rougeL"],
            "heldout_tau": mean_tau(model, heldout, cfg.calibration.similarity_source) if heldout else None,
            "decode": f"beam/{ev.alpha_select_candidates}/alpha={alpha_star}",
        })
    summary.append({
        "checkpoint": "reference", "checkpoint_id": "", "split": ev.split,
        "rep": repetition_rate([words(e.y) for e in examples]),
    })

    _write_csv(out / "curves.csv", CURVE_HEADER, curves)
    _write_csv(out / "alpha_sensitivity.csv", ALPHA_HEADER, alpha_rows)
    _write_csv(out / "summary.csv", SUMMARY_HEADER, summary)
    return {"alpha_star": alpha_star, "curves": curves, "alpha_sensitivity": alpha_rows, "summary": summary}

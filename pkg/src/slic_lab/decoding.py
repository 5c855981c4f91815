"""Candidate generation: beam search, diverse beam search, nucleus sampling.

All three decoders share one batched model call per step across every live
hypothesis of every example; the per-example bookkeeping is plain Python.

Ordering of hypotheses is canonical everywhere: higher normalized score,
then higher log-prob, then lexicographically smaller token tuple.  No
repetition blocking of any kind is applied.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .model import BOS, EOS, FIRST_OUTPUT, Seq2Seq, pad_batch

METHODS = ("beam", "diverse_beam", "nucleus")


@dataclass(frozen=True)
class DecodeConfig:
    method: str = "beam"
    num_candidates: int = 8
    alpha: float = 0.0
    nucleus_p: float = 0.9
    temperature: float = 1.0
    num_groups: int = 1
    diversity_penalty: float = 0.0
    max_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown decoding method {self.method!r}")
        if self.num_candidates < 1:
            raise ValueError("num_candidates must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.nucleus_p <= 1:
            raise ValueError(f"nucleus_p must be in (0, 1], got {self.nucleus_p}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.method == "diverse_beam" and self.num_candidates % self.num_groups:
            raise ValueError(
                f"num_groups={self.num_groups} does not divide num_candidates={self.num_candidates}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ScoredCandidate:
    tokens: tuple[int, ...]
    log_prob: float
    normalized_score: float
    group: int = 0


def normalize(log_prob: float, length: int, alpha: float) -> float:
    """``log_prob / length**alpha``; alpha 0 returns the raw log-prob."""
    if alpha == 0:
        return log_prob
    return log_prob / (max(length, 1) ** alpha)


def _key(score: float, logp: float, tokens: tuple) -> tuple:
    return (-score, -logp, tokens)


def select_best(candidates) -> ScoredCandidate:
    """Highest normalized score; ties go to the shorter, then lexicographically smaller sequence."""
    if not candidates:
        raise ValueError("select_best of an empty candidate list")
    return min(candidates, key=lambda c: (-c.normalized_score, len(c.tokens), c.tokens))


# ---------------------------------------------------------------------------
# shared machinery


class _Encoded:
    """Encoder memory for a batch of contexts, computed once."""

    def __init__(self, model: Seq2Seq, xs, chunk: int = 512):
        xs = [model.check_context(x) for x in xs]
        ids, mask = pad_batch(xs)
        from . import autodiff as ad

        parts = []
        with ad.no_grad():
            for s in range(0, len(xs), chunk):
                parts.append(model.encode_batch(ids[s : s + chunk], mask[s : s + chunk]).data)
        self.memory = np.concatenate(parts, axis=0) if parts else np.zeros((0, 1, model.cfg.d_model))
        self.mask = mask


def _next_log_probs(model: Seq2Seq, enc: _Encoded, owners: list[int], prefixes: list[tuple], chunk: int = 2048):
    """Next-token log-probs (N, V-2) for hypotheses ``prefixes`` of examples ``owners``."""
    if not prefixes:
        return np.zeros((0, model.cfg.num_outputs))
    T = len(prefixes[0])
    out = []
    for s in range(0, len(prefixes), chunk):
        own = np.asarray(owners[s : s + chunk])
        pre = np.full((len(own), T + 1), BOS, dtype=np.int64)
        if T:
            pre[:, 1:] = np.asarray(prefixes[s : s + chunk], dtype=np.int64)
        out.append(model.next_log_probs(enc.memory[own], enc.mask[own], pre))
    return np.concatenate(out, axis=0)


def _top_expansions(base_scores, lp, length, alpha, width):
    """Indices (hyp, col) of expansions that can enter a top-``width`` selection.

    Returns every expansion whose normalized score ties or beats the
    ``width``-th best, so exact tie-breaking can be done afterwards.
    """
    total = base_scores[:, None] + lp
    norm = total / (length**alpha) if alpha else total
    flat = norm.reshape(-1)
    if flat.size > width:
        kth = np.partition(flat, flat.size - width)[flat.size - width]
        keep = np.nonzero(flat >= kth)[0]
    else:
        keep = np.arange(flat.size)
    return np.unravel_index(keep, norm.shape)


# ---------------------------------------------------------------------------
# beam search


def beam_search_batch(model: Seq2Seq, xs, cfg: DecodeConfig) -> list[list[ScoredCandidate]]:
    if cfg.method == "diverse_beam":
        return diverse_beam_search_batch(model, xs, cfg)
    return _grouped_beam(model, xs, cfg, groups=1, penalty=0.0)


def beam_search(model: Seq2Seq, x, cfg: DecodeConfig) -> list[ScoredCandidate]:
    """Width-``num_candidates`` beam search; finished hypotheses compete with live ones."""
    return beam_search_batch(model, [x], cfg)[0]


def diverse_beam_search_batch(model: Seq2Seq, xs, cfg: DecodeConfig) -> list[list[ScoredCandidate]]:
    if cfg.num_candidates % cfg.num_groups:
        raise ValueError(
            f"num_groups={cfg.num_groups} does not divide num_candidates={cfg.num_candidates}"
        )
    return _grouped_beam(model, xs, cfg, groups=cfg.num_groups, penalty=cfg.diversity_penalty)


def diverse_beam_search(model: Seq2Seq, x, cfg: DecodeConfig) -> list[ScoredCandidate]:
    """Hamming-diverse beam search with ``num_groups`` groups of ``m / g`` beams.

    Group ``j`` selects on its log-prob minus ``diversity_penalty`` times the
    number of times each token was chosen at the same step by groups ``< j``.
    The returned ``log_prob`` is always the true model log-prob.
    """
    return diverse_beam_search_batch(model, [x], cfg)[0]


class _Hyp:
    __slots__ = ("tokens", "logp", "aug", "done")

    def __init__(self, tokens, logp, aug, done):
        self.tokens, self.logp, self.aug, self.done = tokens, logp, aug, done


def _grouped_beam(model: Seq2Seq, xs, cfg: DecodeConfig, groups: int, penalty: float):
    width = cfg.num_candidates // groups
    max_len = min(cfg.max_len, model.cfg.max_dec_len)
    alpha = cfg.alpha
    enc = _Encoded(model, xs)
    V = model.cfg.num_outputs
    eos_col = EOS - FIRST_OUTPUT
    # beams[i][g] -> list of _Hyp
    beams = [[[_Hyp((), 0.0, 0.0, False)] for _ in range(groups)] for _ in xs]
    active = [[True] * groups for _ in xs]

    for t in range(max_len):
        owners, prefixes, slots = [], [], []
        for i, ex in enumerate(beams):
            for g, beam in enumerate(ex):
                if not active[i][g]:
                    continue
                for h, hyp in enumerate(beam):
                    if not hyp.done:
                        owners.append(i)
                        prefixes.append(hyp.tokens)
                        slots.append((i, g, h))
        if not owners:
            break
        lp_all = _next_log_probs(model, enc, owners, prefixes)
        rows: dict[tuple[int, int], list[int]] = {}
        for r, (i, g, _h) in enumerate(slots):
            rows.setdefault((i, g), []).append(r)

        last_step = t + 1 >= max_len
        for i, ex in enumerate(beams):
            counts = np.zeros(V)
            for g in range(groups):
                if not active[i][g]:
                    continue
                beam = ex[g]
                live = [h for h in beam if not h.done]
                finished = [h for h in beam if h.done]
                r = rows.get((i, g), [])
                lp = lp_all[r]
                pool = list(finished)
                if live:
                    sel_lp = lp - penalty * counts if (penalty and g) else lp
                    base = np.array([h.aug for h in live])
                    hi, ci = _top_expansions(base, sel_lp, t + 1, alpha, width)
                    for a, c in zip(hi.tolist(), ci.tolist()):
                        parent = live[a]
                        tok = c + FIRST_OUTPUT
                        pool.append(
                            _Hyp(
                                parent.tokens + (tok,),
                                parent.logp + float(lp[a, c]),
                                parent.aug + float(sel_lp[a, c]),
                                c == eos_col or last_step,
                            )
                        )
                pool.sort(key=lambda h: _key(normalize(h.aug, len(h.tokens), alpha), h.logp, h.tokens))
                new = pool[:width]
                for h in new:
                    if h not in finished:
                        counts[h.tokens[-1] - FIRST_OUTPUT] += 1
                ex[g] = new
                if all(h.done for h in new):
                    active[i][g] = False

    results = []
    for ex in beams:
        cands = [
            ScoredCandidate(h.tokens, h.logp, normalize(h.logp, len(h.tokens), alpha), g)
            for g, beam in enumerate(ex)
            for h in beam
        ]
        cands.sort(key=lambda c: _key(c.normalized_score, c.log_prob, c.tokens) + (c.group,))
        results.append(cands)
    return results


# ---------------------------------------------------------------------------
# nucleus sampling


def nucleus_filter(probs: np.ndarray, p: float) -> np.ndarray:
    """Zero all but the smallest probability-sorted prefix with mass >= p, renormalize.

    Rows are sorted by descending probability with ties broken by token
    index, so the most likely token always survives.
    """
    if not 0 < p <= 1:
        raise ValueError(f"nucleus_p must be in (0, 1], got {p}")
    order = np.argsort(-probs, axis=-1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=-1)
    cum = np.cumsum(sorted_p, axis=-1)
    # keep index j when the mass before it is still short of p
    keep_sorted = (cum - sorted_p) < p
    keep_sorted[..., 0] = True
    keep = np.zeros_like(keep_sorted)
    np.put_along_axis(keep, order, keep_sorted, axis=-1)
    out = np.where(keep, probs, 0.0)
    return out / out.sum(axis=-1, keepdims=True)


def nucleus_sample_batch(model: Seq2Seq, xs, cfg: DecodeConfig, seeds=None) -> list[list[ScoredCandidate]]:
    """``num_candidates`` samples per context; example ``i`` draws from ``default_rng(seeds[i])``.

    Duplicate samples are dropped, so fewer than ``num_candidates`` may return.
    """
    if not 0 < cfg.nucleus_p <= 1:
        raise ValueError(f"nucleus_p must be in (0, 1], got {cfg.nucleus_p}")
    if seeds is None:
        seeds = [cfg.seed] * len(xs)
    rngs = [np.random.default_rng(s) for s in seeds]
    m = cfg.num_candidates
    max_len = min(cfg.max_len, model.cfg.max_dec_len)
    enc = _Encoded(model, xs)
    seqs = [[() for _ in range(m)] for _ in xs]
    logps = [[0.0] * m for _ in xs]
    done = [[False] * m for _ in xs]

    for t in range(max_len):
        owners, prefixes, slots = [], [], []
        for i in range(len(xs)):
            for j in range(m):
                if not done[i][j]:
                    owners.append(i)
                    prefixes.append(seqs[i][j])
                    slots.append((i, j))
        if not owners:
            break
        lp = _next_log_probs(model, enc, owners, prefixes)
        z = lp / cfg.temperature
        probs = np.exp(z - z.max(axis=-1, keepdims=True))
        probs /= probs.sum(axis=-1, keepdims=True)
        probs = nucleus_filter(probs, cfg.nucleus_p)
        cum = np.cumsum(probs, axis=-1)
        # one uniform per live sequence, drawn in (example, sample) order
        u = np.empty(len(slots))
        start = 0
        while start < len(slots):
            i = slots[start][0]
            end = start
            while end < len(slots) and slots[end][0] == i:
                end += 1
            u[start:end] = rngs[i].random(end - start)
            start = end
        for r, (i, j) in enumerate(slots):
            c = int(np.searchsorted(cum[r], u[r] * cum[r, -1], side="right"))
            c = min(c, probs.shape[1] - 1)
            while probs[r, c] == 0.0:  # guard against landing on a filtered column
                c -= 1
            tok = c + FIRST_OUTPUT
            seqs[i][j] = seqs[i][j] + (tok,)
            logps[i][j] += float(lp[r, c])
            if tok == EOS or t + 1 >= max_len:
                done[i][j] = True

    results = []
    for i in range(len(xs)):
        seen, cands = set(), []
        for j in range(m):
            s = seqs[i][j]
            if s in seen:
                continue
            seen.add(s)
            cands.append(ScoredCandidate(s, logps[i][j], normalize(logps[i][j], len(s), cfg.alpha)))
        cands.sort(key=lambda c: _key(c.normalized_score, c.log_prob, c.tokens))
        results.append(cands)
    return results


def nucleus_sample(model: Seq2Seq, x, cfg: DecodeConfig) -> list[ScoredCandidate]:
    return nucleus_sample_batch(model, [x], cfg)[0]


def decode_batch(model: Seq2Seq, xs, cfg: DecodeConfig, seeds=None) -> list[list[ScoredCandidate]]:
    """Dispatch on ``cfg.method``."""
    if cfg.method == "nucleus":
        return nucleus_sample_batch(model, xs, cfg, seeds)
    if cfg.method == "diverse_beam":
        return diverse_beam_search_batch(model, xs, cfg)
    return _grouped_beam(model, xs, cfg, groups=1, penalty=0.0)


def greedy_decode(model: Seq2Seq, x, max_len: int) -> tuple[int, ...]:
    """Argmax decoding, the reference for width-1 beam search."""
    enc = _Encoded(model, [x])
    toks: tuple[int, ...] = ()
    for _ in range(min(max_len, model.cfg.max_dec_len)):
        lp = _next_log_probs(model, enc, [0], [toks])[0]
        tok = int(np.argmax(lp)) + FIRST_OUTPUT
        toks = toks + (tok,)
        if tok == EOS:
            break
    return toks

"""Calibration objective: pair sampling, the four calibration losses, the two
regularizers and the combined update.

Sequence log-probs entering the losses are plain sums over tokens (no length
normalization).  Similarities are labels computed once with the fine-tuned
model and never recomputed here.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import MetricTriple, SimilarityScore
from .model import Adam, Seq2Seq, gather_targets

LOSS_TYPES = ("rank", "margin", "list_rank", "expected_reward")
REG_TYPES = ("none", "cross_entropy", "kl_divergence")
PAIRWISE = ("rank", "margin")


class TrainingDiverged(FloatingPointError):
    """A loss became NaN or infinite."""


@dataclass(frozen=True)
class CalibrationConfig:
    loss_type: str = "rank"
    beta: float = 10.0
    reg_type: str = "kl_divergence"
    lam: float | None = None
    learning_rate: float = 1e-3
    pairs_per_example: int = 4
    similarity_source: str = "span_f"
    batch_size: int = 8
    grad_clip: float | None = 1.0

    def __post_init__(self):
        if self.loss_type not in LOSS_TYPES:
            raise ValueError(f"unknown loss_type {self.loss_type!r}")
        if self.reg_type not in REG_TYPES:
            raise ValueError(f"unknown reg_type {self.reg_type!r}")
        if self.beta < 0 or (self.lam is not None and self.lam < 0):
            raise ValueError("beta and lam must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.pairs_per_example < 1:
            raise ValueError("pairs_per_example must be >= 1")
        if self.similarity_source not in ("span_f", "rouge"):
            raise ValueError(f"unknown similarity_source {self.similarity_source!r}")

    @property
    def reg_weight(self) -> float:
        """``lam``, or ``1e-5 / learning_rate`` when unset (lr * lam fixed at 1e-5)."""
        if self.lam is not None:
            return self.lam
        return 1e-5 / self.learning_rate if self.learning_rate > 0 else 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CandidateRecord:
    tokens: tuple[int, ...]
    ft_log_prob: float
    similarity: SimilarityScore
    aux_rouge: MetricTriple | None = None

    def score(self, source: str = "span_f") -> float:
        if source == "rouge":
            if self.aux_rouge is None:
                raise ValueError("rouge similarity requested but candidate has no ROUGE")
            r = self.aux_rouge
            return (r.rouge1 + r.rouge2 + r.rougeL) / 300.0
        return self.similarity.value


@dataclass
class CalibrationExample:
    context: tuple[int, ...]
    target: tuple[int, ...]
    candidates: list[CandidateRecord] = field(default_factory=list)

    def canonical(self, source: str = "span_f") -> CalibrationExample:
        """Candidates sorted by similarity desc, then ft log-prob desc, then tokens."""
        cands = sorted(self.candidates, key=lambda c: (-c.score(source), -c.ft_log_prob, c.tokens))
        return CalibrationExample(self.context, self.target, cands)


# ---------------------------------------------------------------------------
# pair sampling


def untied_pairs(sims) -> list[tuple[int, int]]:
    """All index pairs with different similarity, oriented (higher, lower)."""
    out = []
    for i in range(len(sims)):
        for j in range(i + 1, len(sims)):
            if sims[i] > sims[j]:
                out.append((i, j))
            elif sims[j] > sims[i]:
                out.append((j, i))
    return out


def sample_pairs(example: CalibrationExample, k: int, rng: np.random.Generator, source: str = "span_f"):
    """Up to ``k`` distinct untied pairs ``(pos, neg)`` drawn uniformly without replacement.

    Indices refer to ``example.candidates``.  An empty list means the example
    has no usable pair and should be skipped by pairwise losses.
    """
    if len(example.candidates) < 2:
        return []
    pairs = untied_pairs([c.score(source) for c in example.candidates])
    if len(pairs) <= k:
        return pairs
    pick = rng.choice(len(pairs), size=k, replace=False)
    return [pairs[i] for i in pick]


# ---------------------------------------------------------------------------
# losses (Tensor in, Tensor out; plain floats are accepted)


def loss_rank(logp_pos, logp_neg, beta: float) -> Tensor:
    return ad.relu(beta - ad.tensor(logp_pos) + logp_neg)


def loss_margin(logp_pos, logp_neg, s_pos: float, s_neg: float, beta: float) -> Tensor:
    return ad.relu(beta * (s_pos - s_neg) - ad.tensor(logp_pos) + logp_neg)


def loss_list_rank(logps, beta: float) -> Tensor:
    """Sum over i < j of ``max(0, beta*(j-i) - logp_i + logp_j)``.

    ``logps`` (shape (m,)) must already be ordered by similarity, best first.
    """
    logps = ad.tensor(logps)
    m = logps.shape[0]
    if m < 2:
        raise ValueError("list rank loss needs at least 2 candidates")
    i, j = np.triu_indices(m, k=1)
    margins = beta * (j - i).astype(np.float64)
    return ad.sum(ad.relu(margins - logps[i] + logps[j]))


def loss_expected_reward(logps, sims) -> Tensor:
    """Negative similarity expected under the candidates' renormalized likelihoods."""
    logps = ad.tensor(logps)
    weights = ad.softmax(logps)
    return -ad.sum(weights * np.asarray(sims, dtype=np.float64))


def reg_cross_entropy(model: Seq2Seq, x, target) -> Tensor:
    x, target = model.check_context(x), model.check_target(target)
    return -model.sequence_log_probs([x], [target])[0]


def _kl_terms(logp: Tensor, ft_logp: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-sequence sum over real positions of KL(p_theta || p_ft), shape (N,)."""
    per_pos = ad.sum(ad.exp(logp) * (logp - ft_logp), axis=-1)
    return ad.sum(per_pos * mask, axis=1)


def reg_kl(model: Seq2Seq, ft_model: Seq2Seq, x, target) -> Tensor:
    """Sum over target positions of full-vocabulary KL(P_theta || P_ft)."""
    if model.cfg != ft_model.cfg:
        raise ValueError("calibrated and fine-tuned models must share a ModelConfig")
    x, target = model.check_context(x), model.check_target(target)
    logp, _, _, mask = model.forward_batch([x], [target])
    with ad.no_grad():
        ft_logp = ft_model.forward_batch([x], [target])[0].data
    return _kl_terms(logp, ft_logp, mask)[0]


# ---------------------------------------------------------------------------
# combined step


@dataclass
class StepResult:
    loss: float
    cal: float
    reg: float
    skipped: int
    grad_norm: float = 0.0


def calibration_loss(
    batch, cfg: CalibrationConfig, model: Seq2Seq, ft_model: Seq2Seq | None, rng: np.random.Generator
) -> tuple[Tensor, Tensor, Tensor, int]:
    """Total, calibration and regularization losses (Tensors) and the skip count."""
    if cfg.reg_type == "kl_divergence" and ft_model is not None and model.cfg != ft_model.cfg:
        raise ValueError("calibrated and fine-tuned models must share a ModelConfig")
    src = cfg.similarity_source
    batch = [ex.canonical(src) for ex in batch]
    contexts = [tuple(ex.context) for ex in batch]

    # per example: sampled pairs (pairwise losses) and the candidate indices scored
    plans: list[tuple[list, list[int]]] = []
    skipped = 0
    for ex in batch:
        pairs: list = []
        if cfg.loss_type in PAIRWISE:
            pairs = sample_pairs(ex, cfg.pairs_per_example, rng, src)
            used = sorted({i for p in pairs for i in p})
        elif cfg.loss_type == "list_rank":
            tied = not untied_pairs([c.score(src) for c in ex.candidates])
            used = [] if tied else list(range(len(ex.candidates)))
        else:
            used = list(range(len(ex.candidates)))
        skipped += not used
        plans.append((pairs, used))

    ys, owners, slots = [], [], {}
    for b, ex in enumerate(batch):
        for i in plans[b][1]:
            slots[(b, i)] = len(ys)
            ys.append(tuple(ex.candidates[i].tokens))
            owners.append(b)
    reg_row = {}
    if cfg.reg_type != "none":
        for b, ex in enumerate(batch):
            reg_row[b] = len(ys)
            ys.append(tuple(ex.target))
            owners.append(b)

    zero = ad.tensor(0.0)
    if not ys:
        return zero, zero, zero, skipped

    logp, _, y_ids, y_mask = model.forward_batch(contexts, ys, owners)
    tok = gather_targets(logp, y_ids, y_mask)
    seq_lp = ad.sum(tok * y_mask, axis=1)

    cal_terms = []
    for b, ex in enumerate(batch):
        plan, used = plans[b]
        if not used:
            continue
        if cfg.loss_type in PAIRWISE:
            pos = seq_lp[[slots[(b, p)] for p, _ in plan]]
            neg = seq_lp[[slots[(b, n)] for _, n in plan]]
            if cfg.loss_type == "rank":
                terms = loss_rank(pos, neg, cfg.beta)
            else:
                s_pos = np.array([ex.candidates[p].score(src) for p, _ in plan])
                s_neg = np.array([ex.candidates[n].score(src) for _, n in plan])
                terms = ad.relu(cfg.beta * (s_pos - s_neg) - pos + neg)
            cal_terms.append(ad.mean(terms))
        else:
            lps = seq_lp[[slots[(b, i)] for i in used]]
            if cfg.loss_type == "list_rank":
                cal_terms.append(loss_list_rank(lps, cfg.beta))
            else:
                cal_terms.append(loss_expected_reward(lps, [ex.candidates[i].score(src) for i in used]))

    n = len(batch)
    cal = ad.sum(ad.concat([ad.reshape(t, (1,)) for t in cal_terms])) * (1.0 / n) if cal_terms else zero

    reg = zero
    if reg_row:
        rows = [reg_row[b] for b in range(n)]
        if cfg.reg_type == "cross_entropy":
            reg = -ad.sum(seq_lp[rows]) * (1.0 / n)
        else:
            if ft_model is None:
                raise ValueError("KL regularization needs the fine-tuned model")
            tx = [tuple(batch[b].target) for b in range(n)]
            with ad.no_grad():
                ft_logp = ft_model.forward_batch(contexts, tx)[0].data
            T = ft_logp.shape[1]
            mine = logp[rows][:, :T]
            reg = ad.sum(_kl_terms(mine, ft_logp, y_mask[rows][:, :T])) * (1.0 / n)
    total = cal + cfg.reg_weight * reg if reg_row else cal
    return total, cal, reg, skipped


def calibrate_step(
    batch,
    cfg: CalibrationConfig,
    model: Seq2Seq,
    ft_model: Seq2Seq | None,
    optimizer: Adam,
    rng: np.random.Generator,
) -> StepResult:
    """One update of ``model`` on mean over the batch of ``L_cal + lam * L_reg``."""
    model.zero_grad()
    total, cal, reg, skipped = calibration_loss(batch, cfg, model, ft_model, rng)
    value = total.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite calibration loss {value} (cal={cal.item()}, reg={reg.item()})")
    total.backward()
    norm = optimizer.step(model.params, cfg.learning_rate, cfg.grad_clip)
    return StepResult(value, cal.item(), reg.item(), skipped, norm)

"""Small transformer encoder-decoder on top of :mod:`slic_lab.autodiff`.

Token ids ``0``, ``1`` and ``2`` are PAD, BOS and EOS.  PAD and BOS can never be
emitted, so the output softmax runs over ``vocab_size - 2`` columns where
column ``c`` is token ``c + 2`` (EOS is column 0).  Targets are scored exactly
as given; a complete target carries its trailing EOS and that token's
log-probability is part of the sequence likelihood.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, BOS, EOS = 0, 1, 2
FIRST_OUTPUT = 2  # lowest emittable token id


class SequenceError(ValueError):
    """A token sequence violates the model's input contract."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 128
    num_enc_layers: int = 2
    num_dec_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 128
    max_enc_len: int = 48
    max_dec_len: int = 16
    activation: str = "gelu"
    tie_embeddings: bool = True
    init_std: float = 0.05

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.vocab_size <= 3:
            raise ValueError("vocab_size must exceed the 3 reserved ids")
        if self.max_enc_len < 1 or self.max_dec_len < 1:
            raise ValueError("max lengths must be >= 1")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def num_outputs(self) -> int:
        return self.vocab_size - FIRST_OUTPUT

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, F, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "embed": (V, D),
        "enc_pos": (cfg.max_enc_len, D),
        "dec_pos": (cfg.max_dec_len, D),
    }

    def ln(prefix):
        shapes[prefix + ".g"] = (D,)
        shapes[prefix + ".b"] = (D,)

    def attn(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{w}"] = (D, D)

    def ff(prefix):
        shapes[prefix + ".w1"] = (D, F)
        shapes[prefix + ".b1"] = (F,)
        shapes[prefix + ".w2"] = (F, D)
        shapes[prefix + ".b2"] = (D,)

    for i in range(cfg.num_enc_layers):
        ln(f"enc.{i}.ln1")
        attn(f"enc.{i}.self")
        ln(f"enc.{i}.ln2")
        ff(f"enc.{i}.ff")
    ln("enc.ln_f")
    for i in range(cfg.num_dec_layers):
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        ln(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln3")
        ff(f"dec.{i}.ff")
    ln("dec.ln_f")
    if not cfg.tie_embeddings:
        shapes["out.w"] = (D, cfg.num_outputs)
    shapes["out.b"] = (cfg.num_outputs,)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, cfg.init_std, size=shape)
    return params


def count_params(cfg: ModelConfig, embeddings: bool = True) -> int:
    skip = {"embed", "enc_pos", "dec_pos"}
    return int(
        np.sum([np.prod(s) for n, s in param_shapes(cfg).items() if embeddings or n not in skip])
    )


def pad_batch(seqs) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad integer sequences; returns ``(ids, mask)`` with mask true on real tokens."""
    width = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), max(width, 1)), PAD, dtype=np.int64)
    mask = np.zeros_like(ids, dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


@dataclass
class DecoderStates:
    """Decoder output hidden states, one row per target token."""

    hidden: np.ndarray

    def __post_init__(self):
        if self.hidden.ndim != 2:
            raise ValueError(f"DecoderStates expects L x D, got {self.hidden.shape}")


class Seq2Seq:
    """Encoder-decoder whose parameters are autodiff leaves.

    ``params`` maps names from :func:`param_shapes` to Tensors with
    ``requires_grad=True``.  All forward methods are pure given the
    parameters, so an instance that is not being trained can be shared
    across threads.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        expected = param_shapes(cfg)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ValueError(f"parameter names do not match config: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if tuple(np.shape(params[name])) != shape:
                raise ValueError(f"parameter {name}: shape {np.shape(params[name])} != {shape}")
        self.cfg = cfg
        self.params = {n: Tensor(np.array(params[n], dtype=np.float64), requires_grad=True) for n in expected}

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int) -> Seq2Seq:
        return cls(cfg, init_params(cfg, seed))

    def numpy_params(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- validation ---------------------------------------------------------

    def check_context(self, x) -> list[int]:
        x = [int(t) for t in x]
        if not x:
            raise SequenceError("context must be non-empty")
        if len(x) > self.cfg.max_enc_len:
            raise SequenceError(f"context length {len(x)} exceeds max_enc_len={self.cfg.max_enc_len}")
        _check_ids(x, self.cfg.vocab_size)
        return x

    def check_target(self, y) -> list[int]:
        y = [int(t) for t in y]
        if len(y) > self.cfg.max_dec_len:
            raise SequenceError(f"target length {len(y)} exceeds max_dec_len={self.cfg.max_dec_len}")
        _check_ids(y, self.cfg.vocab_size)
        if any(t in (PAD, BOS) for t in y):
            raise SequenceError("target contains PAD or BOS")
        if EOS in y[:-1]:
            raise SequenceError("EOS may only appear as the last target token")
        return y

    # -- building blocks ----------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return ad.layer_norm(x) * self._p(prefix + ".g") + self._p(prefix + ".b")

    def _attention(self, q_in: Tensor, kv_in: Tensor, prefix: str, mask: np.ndarray) -> Tensor:
        # mask: bool, True where attention is blocked, broadcastable to (B, H, Tq, Tk)
        B, Tq, D = q_in.shape
        Tk = kv_in.shape[1]
        H = self.cfg.num_heads
        dh = D // H

        def heads(t: Tensor, T: int) -> Tensor:
            return t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

        q = heads(q_in @ self._p(prefix + ".wq"), Tq)
        k = heads(kv_in @ self._p(prefix + ".wk"), Tk)
        v = heads(kv_in @ self._p(prefix + ".wv"), Tk)
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        weights = ad.softmax(ad.masked_fill(scores, mask, -1e9))
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(B, Tq, D)
        return ctx @ self._p(prefix + ".wo")

    def _ff(self, x: Tensor, prefix: str) -> Tensor:
        act = ad.gelu if self.cfg.activation == "gelu" else ad.relu
        h = act(x @ self._p(prefix + ".w1") + self._p(prefix + ".b1"))
        return h @ self._p(prefix + ".w2") + self._p(prefix + ".b2")

    # -- batched forward ----------------------------------------------------

    def encode_batch(self, x_ids: np.ndarray, x_mask: np.ndarray) -> Tensor:
        """``x_ids``: (B, S) padded contexts -> memory (B, S, D)."""
        S = x_ids.shape[1]
        if S > self.cfg.max_enc_len:
            raise SequenceError(f"context length {S} exceeds max_enc_len={self.cfg.max_enc_len}")
        h = ad.embedding(self._p("embed"), x_ids) + self._p("enc_pos")[:S]
        blocked = ~x_mask[:, None, None, :]
        for i in range(self.cfg.num_enc_layers):
            a = self._ln(h, f"enc.{i}.ln1")
            h = h + self._attention(a, a, f"enc.{i}.self", blocked)
            h = h + self._ff(self._ln(h, f"enc.{i}.ln2"), f"enc.{i}.ff")
        return self._ln(h, "enc.ln_f")

    def decode_batch(self, memory: Tensor, x_mask: np.ndarray, y_in: np.ndarray) -> Tensor:
        """Decoder hidden states (B, T, D) for BOS-prefixed inputs ``y_in`` (B, T)."""
        T = y_in.shape[1]
        if T > self.cfg.max_dec_len:
            raise SequenceError(f"target length {T} exceeds max_dec_len={self.cfg.max_dec_len}")
        h = ad.embedding(self._p("embed"), y_in) + self._p("dec_pos")[:T]
        causal = np.triu(np.ones((T, T), dtype=bool), k=1)[None, None]
        cross_blocked = ~x_mask[:, None, None, :]
        for i in range(self.cfg.num_dec_layers):
            a = self._ln(h, f"dec.{i}.ln1")
            h = h + self._attention(a, a, f"dec.{i}.self", causal)
            h = h + self._attention(self._ln(h, f"dec.{i}.ln2"), memory, f"dec.{i}.cross", cross_blocked)
            h = h + self._ff(self._ln(h, f"dec.{i}.ln3"), f"dec.{i}.ff")
        return self._ln(h, "dec.ln_f")

    def output_log_probs(self, hidden: Tensor) -> Tensor:
        """Log-probabilities over emittable tokens (column ``c`` is token ``c + 2``)."""
        if self.cfg.tie_embeddings:
            w = self._p("embed")[FIRST_OUTPUT:].transpose()
        else:
            w = self._p("out.w")
        return ad.log_softmax(hidden @ w + self._p("out.b"))

    def forward_batch(self, xs, ys, owners=None) -> tuple[Tensor, Tensor, np.ndarray, np.ndarray]:
        """Teacher-forced pass over a batch.

        ``ys[k]`` is conditioned on ``xs[owners[k]]`` (default ``owners[k] = k``),
        so several targets can share one encoder pass.  Returns
        ``(log_probs (N,T,V-2), hidden (N,T,D), target_ids (N,T), target_mask (N,T))``.
        """
        x_ids, x_mask = pad_batch(xs)
        y_ids, y_mask = pad_batch(ys)
        y_in = np.concatenate([np.full((len(ys), 1), BOS, dtype=np.int64), y_ids[:, :-1]], axis=1)
        memory = self.encode_batch(x_ids, x_mask)
        if owners is not None:
            owners = np.asarray(owners, dtype=np.int64)
            memory = memory[owners]
            x_mask = x_mask[owners]
        hidden = self.decode_batch(memory, x_mask, y_in)
        return self.output_log_probs(hidden), hidden, y_ids, y_mask

    def token_log_probs(self, xs, ys, owners=None) -> tuple[Tensor, np.ndarray]:
        """Per-token log P of the realized targets, (N, T), and the real-token mask."""
        logp, _, y_ids, y_mask = self.forward_batch(xs, ys, owners)
        return gather_targets(logp, y_ids, y_mask), y_mask

    def sequence_log_probs(self, xs, ys, owners=None) -> Tensor:
        """Sum of token log-probs per sequence, shape (N,)."""
        tok, mask = self.token_log_probs(xs, ys, owners)
        return ad.sum(tok * mask, axis=1)

    # -- single-example API --------------------------------------------------

    def encode(self, x) -> Tensor:
        x = self.check_context(x)
        ids, mask = pad_batch([x])
        return self.encode_batch(ids, mask)[0]

    def teacher_forced(self, x, y) -> tuple[Tensor, DecoderStates]:
        """Per-position log-prob vectors over emittable tokens and the decoder states."""
        x = self.check_context(x)
        y = self.check_target(y)
        if not y:
            raise SequenceError("target must be non-empty")
        logp, hidden, _, _ = self.forward_batch([x], [y])
        return logp[0], DecoderStates(hidden.data[0].copy())

    def decoder_states(self, xs, ys) -> list[DecoderStates]:
        with ad.no_grad():
            _, hidden, _, mask = self.forward_batch(xs, ys)
        return [DecoderStates(hidden.data[i, : mask[i].sum()].copy()) for i in range(len(ys))]

    def sequence_log_prob(self, x, y) -> float:
        x = self.check_context(x)
        y = self.check_target(y)
        with ad.no_grad():
            return float(self.sequence_log_probs([x], [y]).data[0])

    def perplexity(self, dataset, batch_size: int = 256) -> float:
        """``exp(-sum log P / number of target tokens)`` over ``(x, y)`` pairs."""
        if not dataset:
            raise ValueError("perplexity of an empty dataset")
        total, count = 0.0, 0
        with ad.no_grad():
            for start in range(0, len(dataset), batch_size):
                chunk = dataset[start : start + batch_size]
                tok, mask = self.token_log_probs([c[0] for c in chunk], [c[1] for c in chunk])
                total += float((tok.data * mask).sum())
                count += int(mask.sum())
        return math.exp(-total / count)

    def next_log_probs(self, memory: np.ndarray, x_mask: np.ndarray, prefixes: np.ndarray) -> np.ndarray:
        """Next-token log-probs (N, V-2) for BOS-prefixed ``prefixes`` (N, T); no tape."""
        with ad.no_grad():
            hidden = self.decode_batch(Tensor(memory), x_mask, prefixes)
            return self.output_log_probs(hidden[:, -1:]).data[:, 0]


def gather_targets(logp: Tensor, y_ids: np.ndarray, y_mask: np.ndarray) -> Tensor:
    """Pick the realized token's log-prob at each position; PAD positions read column 0."""
    return ad.gather(logp, np.where(y_mask, y_ids - FIRST_OUTPUT, 0))


def _check_ids(seq, vocab_size: int) -> None:
    bad = [t for t in seq if t < 0 or t >= vocab_size]
    if bad:
        raise SequenceError(f"token ids {bad[:5]} outside vocabulary of size {vocab_size}")


# ---------------------------------------------------------------------------
# MLE fine-tuning


class TrainingHalted(FloatingPointError):
    """Training produced a non-finite loss."""


def mle_loss(model: Seq2Seq, xs, ys, label_smoothing: float = 0.0) -> Tensor:
    """Mean token NLL over non-PAD target positions (optionally label-smoothed)."""
    if not len(ys):
        raise ValueError("empty batch")
    logp, _, y_ids, y_mask = model.forward_batch(xs, ys)
    nll = -gather_targets(logp, y_ids, y_mask)
    if label_smoothing:
        uniform = -ad.mean(logp, axis=-1)
        nll = (1.0 - label_smoothing) * nll + label_smoothing * uniform
    return ad.sum(nll * y_mask) * (1.0 / float(y_mask.sum()))


def mle_train_step(
    model: Seq2Seq,
    optimizer: Adam,
    xs,
    ys,
    learning_rate: float,
    clip_norm: float | None = None,
    label_smoothing: float = 0.0,
) -> float:
    model.zero_grad()
    loss = mle_loss(model, xs, ys, label_smoothing)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingHalted(f"non-finite MLE loss {value} at optimizer step {optimizer.t}")
    loss.backward()
    optimizer.step(model.params, learning_rate, clip_norm)
    return value


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction; betas (0.9, 0.999), eps 1e-8."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.last_norm = 0.0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], lr: float, clip_norm: float | None = None) -> float:
        """Apply one update from ``param.grad``; returns the pre-clip global grad norm."""
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
        norm = math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()])))
        scale = 1.0
        if clip_norm is not None and norm > clip_norm:
            scale = clip_norm / norm
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for n, p in params.items():
            g = grads[n] * scale
            m = self.m.get(n)
            v = self.v.get(n)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[n], self.v[n] = m, v
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.last_norm = norm
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([float(self.t)])}
        for n in self.m:
            out["adam.m." + n] = self.m[n]
            out["adam.v." + n] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if "adam.t" not in arrays:
            return
        self.t = int(arrays["adam.t"][0])
        for k, a in arrays.items():
            if k.startswith("adam.m."):
                self.m[k[len("adam.m."):]] = a.copy()
            elif k.startswith("adam.v."):
                self.v[k[len("adam.v."):]] = a.copy()


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"SLICKPT1"


@dataclass
class ModelCheckpoint:
    """Parameters plus bookkeeping.

    File layout (all integers little-endian)::

        8 bytes   magic "SLICKPT1"
        8 bytes   u64 header length H
        H bytes   UTF-8 JSON header: {"config", "step", "val_perplexity",
                  "val_rouge", "meta", "arrays": [{"name", "shape", "offset"}]}
        ...       float64 little-endian array payloads at the listed offsets
                  (relative to the end of the header), in header order

    ``arrays`` lists model parameters under their names and optimizer state
    under ``adam.*``.  The header is written with sorted keys, so identical
    checkpoints produce identical bytes.
    """

    config: ModelConfig
    parameters: dict[str, np.ndarray]
    step: int = 0
    val_perplexity: float | None = None
    val_rouge: dict | None = None
    meta: dict = field(default_factory=dict)
    extra: dict[str, np.ndarray] = field(default_factory=dict)

    def model(self) -> Seq2Seq:
        return Seq2Seq(self.config, self.parameters)

    @classmethod
    def from_model(cls, model: Seq2Seq, **kw) -> ModelCheckpoint:
        return cls(config=model.cfg, parameters=model.numpy_params(), **kw)

    def to_bytes(self) -> bytes:
        names = list(param_shapes(self.config)) + sorted(self.extra)
        arrays = {**self.parameters, **self.extra}
        entries, payload, offset = [], [], 0
        for n in names:
            a = np.ascontiguousarray(arrays[n], dtype="<f8")
            entries.append({"name": n, "shape": list(a.shape), "offset": offset})
            payload.append(a.tobytes())
            offset += a.nbytes
        header = {
            "config": self.config.to_dict(),
            "step": int(self.step),
            "val_perplexity": self.val_perplexity,
            "val_rouge": self.val_rouge,
            "meta": self.meta,
            "arrays": entries,
        }
        hb = json.dumps(header, sort_keys=True).encode()
        return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(payload)

    @classmethod
    def from_bytes(cls, raw: bytes) -> ModelCheckpoint:
        if raw[:8] != MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (hlen,) = struct.unpack("<Q", raw[8:16])
        header = json.loads(raw[16 : 16 + hlen])
        base = 16 + hlen
        cfg = ModelConfig(**header["config"])
        own = set(param_shapes(cfg))
        params, extra = {}, {}
        for e in header["arrays"]:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            a = np.frombuffer(raw, dtype="<f8", count=n, offset=base + e["offset"]).reshape(e["shape"])
            (params if e["name"] in own else extra)[e["name"]] = a.astype(np.float64)
        return cls(
            config=cfg,
            parameters=params,
            step=header["step"],
            val_perplexity=header["val_perplexity"],
            val_rouge=header["val_rouge"],
            meta=header.get("meta", {}),
            extra=extra,
        )

    def save(self, path) -> str:
        raw = self.to_bytes()
        Path(path).write_bytes(raw)
        return hashlib.sha256(raw).hexdigest()

    @classmethod
    def load(cls, path) -> ModelCheckpoint:
        return cls.from_bytes(Path(path).read_bytes())

    def checkpoint_id(self) -> str:
        """Hash of the parameters and config only (metrics and optimizer state excluded)."""
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for n in param_shapes(self.config):
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.parameters[n], dtype="<f8").tobytes())
        return h.hexdigest()[:16]

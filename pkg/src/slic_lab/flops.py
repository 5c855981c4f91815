"""Inference-compute estimate for an encoder-decoder decoding ``m`` candidates.

The decoder's attention term uses half the context length implicitly: it has
no factor 2, unlike the encoder's, because causal masking halves the
effective attention span.  Arithmetic is on Python ints, so it never wraps.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import ModelConfig, count_params, param_shapes


@dataclass(frozen=True)
class FlopsInput:
    n_enc_params: int
    n_dec_params: int
    n_enc_layer: int
    n_dec_layer: int
    n_enc_ctx: int
    n_dec_ctx: int
    d_enc_attn: int
    d_dec_attn: int
    m: int

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not isinstance(v, int) or isinstance(v, bool):
                raise TypeError(f"{k} must be an int, got {type(v).__name__}")
            if v < 0 or (v == 0 and k != "m"):
                raise ValueError(f"{k} must be positive, got {v}")


def encoder_flops_per_token(f: FlopsInput) -> int:
    return 2 * f.n_enc_params + 2 * f.n_enc_layer * f.n_enc_ctx * f.d_enc_attn


def decoder_flops_per_token(f: FlopsInput) -> int:
    return 2 * f.n_dec_params + f.n_dec_layer * f.n_dec_ctx * f.d_dec_attn


def estimate_flops(f: FlopsInput) -> int:
    return encoder_flops_per_token(f) * f.n_enc_ctx + decoder_flops_per_token(f) * f.n_dec_ctx * f.m


def flops_input_for(cfg: ModelConfig, n_enc_ctx: int, n_dec_ctx: int, m: int) -> FlopsInput:
    """Non-embedding parameter counts and attention widths of a model config."""
    total = count_params(cfg, embeddings=False)
    enc = sum_prefix(cfg, "enc.")
    return FlopsInput(
        n_enc_params=enc,
        n_dec_params=total - enc,
        n_enc_layer=cfg.num_enc_layers,
        n_dec_layer=cfg.num_dec_layers,
        n_enc_ctx=n_enc_ctx,
        n_dec_ctx=n_dec_ctx,
        d_enc_attn=cfg.d_model,
        d_dec_attn=cfg.d_model,
        m=m,
    )


def sum_prefix(cfg: ModelConfig, prefix: str) -> int:
    total = 0
    for name, shape in param_shapes(cfg).items():
        if name.startswith(prefix):
            n = 1
            for s in shape:
                n *= s
            total += n
    return total

"""Attention variants for the transformer blocks.

Five flavors share one skeleton: project queries/keys/values per head, build a
row-stochastic map, apply it to the values, merge heads, project out. The
interesting differences are what happens to the map between the softmax and
the value product:

- vanilla:        nothing
- temperature:    logits divided by a (fixed, learnable, or depth-decayed) tau
- drop_attention: random entries zeroed and the rest rescaled (train only)
- re_attention:   heads mixed through a learnable HxH matrix, then normalized
- shared:         an earlier block's map is mixed/normalized and applied to
                  this block's values; no Q/K projections exist here

All ops accept optional leading batch dims: Q/K/V are [..., H, T, d] and maps
are [..., H, T, T].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from reattn import ops
from reattn.errors import ConfigError, DimensionError, SpecParseError
from reattn.ops import RunningStats
from reattn.tensor import Tensor


# -- diagnostics-facing map type ---------------------------------------------


@dataclass
class AttentionMap:
    """One block's post-softmax map for one sample: heads x out-token x in-token.

    Column values[h, :, t] is how much input token t contributes to each
    output token; those columns are what the cross-layer similarity compares.
    """

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or self.values.shape[-1] != self.values.shape[-2]:
            raise DimensionError(f"attention map must be [H, T, T], got {self.values.shape}")

    @property
    def heads(self) -> int:
        return self.values.shape[0]

    @property
    def tokens(self) -> int:
        return self.values.shape[1]

    def column(self, head: int, token: int) -> np.ndarray:
        return self.values[head, :, token]

    def validate(self, atol: float = 1e-5) -> "AttentionMap":
        if not np.isfinite(self.values).all():
            raise DimensionError("attention map holds non-finite values")
        if self.values.min() < -atol or self.values.max() > 1.0 + atol:
            raise DimensionError("attention map entries outside [0, 1]")
        row_sums = self.values.sum(axis=-1)
        if not np.allclose(row_sums, 1.0, atol=atol):
            raise DimensionError(
                f"attention map rows are not stochastic (max deviation "
                f"{np.abs(row_sums - 1.0).max():.2e})"
            )
        return self


@dataclass
class HeadMixMatrix:
    """Learnable HxH mixing weights; column h' builds mixed head h'."""

    theta: Tensor

    def __post_init__(self):
        if self.theta.ndim != 2 or self.theta.shape[0] != self.theta.shape[1]:
            raise ConfigError(f"head mix matrix must be square, got {self.theta.shape}")

    @property
    def heads(self) -> int:
        return self.theta.shape[0]

    @classmethod
    def identity_init(cls, heads: int, rng: np.random.Generator | None = None,
                      noise_std: float = 0.01, dtype=np.float32) -> "HeadMixMatrix":
        """Identity plus small Gaussian noise: starts as plain attention and
        breaks the symmetry between heads."""
        theta = np.eye(heads, dtype=dtype)
        if rng is not None and noise_std > 0:
            theta = theta + noise_std * rng.standard_normal((heads, heads)).astype(dtype)
        return cls(Tensor(theta, requires_grad=True))


# -- per-block variant configuration -----------------------------------------

VARIANT_KINDS = ("vanilla", "re_attention", "temperature", "drop_attention", "shared")
TEMPERATURE_MODES = ("learnable", "linear_decay")
NORM_MODES = ("batch", "identity")


@dataclass
class AttentionVariantConfig:
    """What one block's attention does. Fields irrelevant to `kind` stay None."""

    kind: str = "vanilla"
    temperature: float | str | None = None
    drop_rate: float | None = None
    norm_mode: str | None = None
    norm_per_sample: bool | None = None
    tau_start: float | None = None
    tau_end: float | None = None

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ConfigError(f"unknown attention kind {self.kind!r}; one of {VARIANT_KINDS}")
        if self.kind in ("re_attention", "shared") and self.norm_mode is None:
            self.norm_mode = "batch"
        self.validate()

    def validate(self):
        used = {"kind"}
        if self.kind == "temperature":
            used.add("temperature")
            t = self.temperature
            if isinstance(t, str):
                if t not in TEMPERATURE_MODES:
                    raise ConfigError(f"temperature mode {t!r}; one of {TEMPERATURE_MODES}")
                if t == "linear_decay":
                    used |= {"tau_start", "tau_end"}
            elif isinstance(t, (int, float)):
                if t <= 0:
                    raise ConfigError(f"temperature must be positive, got {t}")
            else:
                raise ConfigError("kind=temperature needs a positive number, "
                                  "'learnable', or 'linear_decay'")
        elif self.kind == "drop_attention":
            used.add("drop_rate")
            r = self.drop_rate if self.drop_rate is not None else 0.1
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"drop_rate must be in [0, 1), got {r}")
        elif self.kind in ("re_attention", "shared"):
            used |= {"norm_mode", "norm_per_sample"}
            if self.norm_mode not in NORM_MODES:
                raise ConfigError(f"norm_mode {self.norm_mode!r}; one of {NORM_MODES}")
            if self.norm_per_sample is not None and self.norm_mode != "batch":
                raise ConfigError("norm_per_sample only applies to norm_mode='batch'")
        for f in fields(self):
            if f.name not in used and getattr(self, f.name) is not None:
                raise ConfigError(f"field {f.name!r} is not used by kind {self.kind!r}")

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "kind" and v is not None:
                out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionVariantConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecParseError(f"unknown attention variant field(s) {sorted(unknown)}")
        return cls(**d)

    def resolved_drop_rate(self) -> float:
        return 0.1 if self.drop_rate is None else self.drop_rate

    def decayed_temperature(self, block: int, num_blocks: int) -> float:
        """Linear schedule from tau_start at block 0 to tau_end at the last."""
        start = 1.0 if self.tau_start is None else self.tau_start
        end = 0.5 if self.tau_end is None else self.tau_end
        if num_blocks <= 1:
            return start
        frac = block / (num_blocks - 1)
        return start + (end - start) * frac


# -- weights bundles ----------------------------------------------------------


@dataclass
class Affine:
    weight: Tensor
    bias: Tensor


# -- shape helpers -------------------------------------------------------------


def _swap_last(t: Tensor) -> Tensor:
    perm = list(range(t.ndim))
    perm[-1], perm[-2] = perm[-2], perm[-1]
    return ops.transpose(t, perm)


def split_heads(t: Tensor, heads: int) -> Tensor:
    """[..., T, D] -> [..., H, T, d] with d = D // H."""
    d_model = t.shape[-1]
    if d_model % heads != 0:
        raise ConfigError(f"embed dim {d_model} not divisible by {heads} heads")
    tokens = t.shape[-2]
    lead = t.shape[:-2]
    r = ops.reshape(t, lead + (tokens, heads, d_model // heads))
    perm = list(range(r.ndim))
    perm[-3], perm[-2] = perm[-2], perm[-3]
    return ops.transpose(r, perm)


def merge_heads(t: Tensor) -> Tensor:
    """[..., H, T, d] -> [..., T, H*d]."""
    heads, tokens, dim = t.shape[-3:]
    lead = t.shape[:-3]
    perm = list(range(t.ndim))
    perm[-3], perm[-2] = perm[-2], perm[-3]
    return ops.reshape(ops.transpose(t, perm), lead + (tokens, heads * dim))


def mix_heads(map_t: Tensor, theta: Tensor) -> Tensor:
    """mixed[..., h', i, j] = sum_h theta[h, h'] * map[..., h, i, j]."""
    heads, tokens = map_t.shape[-3], map_t.shape[-2]
    if theta.shape != (heads, heads):
        raise ConfigError(
            f"head mix matrix {theta.shape} does not match {heads} heads"
        )
    lead = map_t.shape[:-3]
    flat = ops.reshape(map_t, lead + (heads, tokens * tokens))
    mixed = _swap_last(ops.matmul(_swap_last(flat), theta))
    return ops.reshape(mixed, lead + (heads, tokens, tokens))


def map_norm(map_t: Tensor, norm_mode: str, scale: Tensor | None,
             shift: Tensor | None, running: RunningStats | None = None,
             mode: str = "train", per_sample: bool = False) -> Tensor:
    """Normalization over map entries, statistics per head.

    Batch mode pools every (T x T) entry of a head across the batch (or per
    sample when `per_sample`); identity mode passes through.
    """
    if norm_mode == "identity":
        return map_t
    if norm_mode != "batch":
        raise ConfigError(f"unknown map norm mode {norm_mode!r}")
    if scale is None or shift is None:
        raise ConfigError("batch map norm needs scale/shift parameters")
    head_axis = map_t.ndim - 3
    if per_sample:
        axes = (map_t.ndim - 2, map_t.ndim - 1)
        running = None
    else:
        axes = tuple(i for i in range(map_t.ndim) if i != head_axis)
    return ops.normalize(map_t, "batch", axes, scale, shift, running=running, mode=mode)


# -- attention operations ------------------------------------------------------


def qkv_project(x: Tensor, q_proj: Affine, k_proj: Affine, v_proj: Affine,
                heads: int) -> tuple[Tensor, Tensor, Tensor]:
    """Three independent learned projections of [..., T, D], per-head layout."""
    if x.shape[-1] % heads != 0:
        raise ConfigError(f"embed dim {x.shape[-1]} not divisible by {heads} heads")
    q = split_heads(ops.linear(x, q_proj.weight, q_proj.bias), heads)
    k = split_heads(ops.linear(x, k_proj.weight, k_proj.bias), heads)
    v = split_heads(ops.linear(x, v_proj.weight, v_proj.bias), heads)
    return q, k, v


def _check_qkv(q: Tensor, k: Tensor, v: Tensor):
    if not (q.shape == k.shape == v.shape):
        raise DimensionError(f"Q/K/V shapes disagree: {q.shape} / {k.shape} / {v.shape}")
    if q.ndim < 3:
        raise DimensionError(f"Q/K/V must be [..., H, T, d], got {q.shape}")


def attention_map(q: Tensor, k: Tensor, temperature: float | Tensor = 1.0) -> Tensor:
    """softmax(Q K^T / (tau sqrt(d))) rows over the key axis."""
    d = q.shape[-1]
    scores = ops.mul(ops.matmul(q, _swap_last(k)), 1.0 / math.sqrt(d))
    if isinstance(temperature, Tensor):
        return ops.softmax(ops.div(scores, temperature), axis=-1)
    return ops.softmax(scores, axis=-1, temperature=temperature)


def mhsa(q: Tensor, k: Tensor, v: Tensor, out_proj: Affine,
         temperature: float | Tensor = 1.0) -> tuple[Tensor, Tensor]:
    """Multi-head self-attention; tau=1 is the plain formulation.

    Returns the projected output [..., T, D] and the map [..., H, T, T].
    """
    _check_qkv(q, k, v)
    attn = attention_map(q, k, temperature)
    out = ops.linear(merge_heads(ops.matmul(attn, v)), out_proj.weight, out_proj.bias)
    return out, attn


def re_attention(q: Tensor, k: Tensor, v: Tensor, theta: HeadMixMatrix | Tensor,
                 out_proj: Affine, norm_mode: str = "batch",
                 norm_scale: Tensor | None = None, norm_shift: Tensor | None = None,
                 running: RunningStats | None = None, mode: str = "train",
                 per_sample: bool = False) -> tuple[Tensor, Tensor, Tensor]:
    """Head-mixing attention: the raw per-head maps are the basis, a learnable
    HxH matrix recombines them, and a normalization tames the variance before
    the value product.

    Returns (out, raw_map, mixed_map); the raw map feeds collapse diagnostics,
    the mixed map (pre-normalization) is for inspection.
    """
    _check_qkv(q, k, v)
    theta_t = theta.theta if isinstance(theta, HeadMixMatrix) else theta
    if theta_t.shape != (q.shape[-3], q.shape[-3]):
        raise ConfigError(
            f"head mix matrix {theta_t.shape} does not match {q.shape[-3]} heads"
        )
    raw = attention_map(q, k)
    mixed = mix_heads(raw, theta_t)
    applied = map_norm(mixed, norm_mode, norm_scale, norm_shift, running, mode, per_sample)
    out = ops.linear(merge_heads(ops.matmul(applied, v)), out_proj.weight, out_proj.bias)
    return out, raw, mixed


def drop_attention(q: Tensor, k: Tensor, v: Tensor, out_proj: Affine,
                   drop_rate: float, mask_source=None,
                   mode: str = "train") -> tuple[Tensor, Tensor]:
    """Plain attention with dropout applied directly to the map entries.

    `mask_source` is an explicit 0/1 array or a seeded Generator; evaluation
    mode applies no mask. Returns the map actually applied to the values.
    """
    _check_qkv(q, k, v)
    raw = attention_map(q, k)
    if isinstance(mask_source, np.random.Generator):
        applied = ops.dropout(raw, drop_rate, rng=mask_source, mode=mode)
    else:
        applied = ops.dropout(raw, drop_rate, mask=mask_source, mode=mode)
    out = ops.linear(merge_heads(ops.matmul(applied, v)), out_proj.weight, out_proj.bias)
    return out, applied


def shared_attention_forward(x: Tensor, shared_map: Tensor,
                             theta: HeadMixMatrix | Tensor, v_proj: Affine,
                             out_proj: Affine, heads: int,
                             norm_mode: str = "batch",
                             norm_scale: Tensor | None = None,
                             norm_shift: Tensor | None = None,
                             running: RunningStats | None = None,
                             mode: str = "train",
                             per_sample: bool = False) -> Tensor:
    """Attention reuse: applies a stored earlier-block map to this block's
    values. Q/K projections for this block are never computed; the mix matrix
    models the small cross-layer variation and the norm adjusts the variance.
    """
    theta_t = theta.theta if isinstance(theta, HeadMixMatrix) else theta
    tokens = x.shape[-2]
    if shared_map.shape[-1] != tokens or shared_map.shape[-2] != tokens:
        raise DimensionError(
            f"shared map tokens {shared_map.shape[-2:]} do not match input tokens {tokens}"
        )
    v = split_heads(ops.linear(x, v_proj.weight, v_proj.bias), heads)
    mixed = mix_heads(shared_map, theta_t)
    applied = map_norm(mixed, norm_mode, norm_scale, norm_shift, running, mode, per_sample)
    return ops.linear(merge_heads(ops.matmul(applied, v)), out_proj.weight, out_proj.bias)

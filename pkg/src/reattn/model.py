"""Classifier assembly: patch embedding, pre-norm transformer blocks with
per-block attention variants, and the class-token head.

Blocks follow the pre-norm layout: x + attn(norm(x)), then x + mlp(norm(x)).
When `shared_from` is set, every block after it skips its own Q/K path and
reuses the stored map of that block through `shared_attention_forward`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from reattn import ops
from reattn.attention import (
    Affine,
    AttentionMap,
    AttentionVariantConfig,
    drop_attention,
    mhsa,
    qkv_project,
    re_attention,
    shared_attention_forward,
)
from reattn.errors import ConfigError, ManifestError, SpecParseError
from reattn.ops import RunningStats
from reattn.tensor import Tensor, read_tensor, resolve_dtype, write_tensor

_CONFIG_KEYS = ("image_size", "patch_size", "num_classes", "num_blocks", "embed_dim",
                "num_heads", "mlp_hidden", "variants", "shared_from", "channels")


def _parse_variants(spec, num_blocks: int) -> list[AttentionVariantConfig]:
    """Accepts a single variant dict, a per-block list, or a '11-5' split
    string (leading blocks vanilla, trailing blocks re-attention)."""
    if spec is None:
        return [AttentionVariantConfig() for _ in range(num_blocks)]
    if isinstance(spec, str):
        parts = spec.split("-")
        if len(parts) != 2 or not all(p.isdigit() for p in parts):
            raise SpecParseError(f"split ratio must look like '11-5', got {spec!r}")
        vanilla, reatt = int(parts[0]), int(parts[1])
        if vanilla + reatt != num_blocks:
            raise SpecParseError(
                f"split {spec!r} sums to {vanilla + reatt}, model has {num_blocks} blocks"
            )
        return ([AttentionVariantConfig() for _ in range(vanilla)]
                + [AttentionVariantConfig(kind="re_attention") for _ in range(reatt)])
    if isinstance(spec, dict):
        return [AttentionVariantConfig.from_dict(spec) for _ in range(num_blocks)]
    if isinstance(spec, list):
        if len(spec) != num_blocks:
            raise SpecParseError(
                f"variants list has {len(spec)} entries for {num_blocks} blocks"
            )
        return [v if isinstance(v, AttentionVariantConfig)
                else AttentionVariantConfig.from_dict(v) for v in spec]
    raise SpecParseError(f"cannot interpret variants spec of type {type(spec).__name__}")


@dataclass
class ModelConfig:
    image_size: int
    patch_size: int
    num_classes: int
    num_blocks: int
    embed_dim: int
    num_heads: int
    mlp_hidden: int
    block_variants: list[AttentionVariantConfig] | None = None
    shared_from: int | None = None
    channels: int = 3

    def __post_init__(self):
        if self.block_variants is None:
            self.block_variants = [AttentionVariantConfig() for _ in range(self.num_blocks)]
        self.validate()

    def validate(self):
        if self.image_size <= 0 or self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed dim {self.embed_dim} not divisible by {self.num_heads} heads"
            )
        if len(self.block_variants) != self.num_blocks:
            raise ConfigError(
                f"{len(self.block_variants)} block variants for {self.num_blocks} blocks"
            )
        if self.num_classes <= 0 or self.mlp_hidden <= 0 or self.num_blocks < 0:
            raise ConfigError("num_classes, mlp_hidden must be positive; num_blocks >= 0")
        if self.shared_from is not None:
            if not 0 <= self.shared_from < self.num_blocks - 1:
                raise ConfigError(
                    f"shared_from {self.shared_from} must lie in [0, {self.num_blocks - 1})"
                )

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def effective_variants(self) -> list[AttentionVariantConfig]:
        """Per-block variants with the sharing override applied: every block
        after `shared_from` runs the map-reuse path."""
        out = list(self.block_variants)
        if self.shared_from is not None:
            for b in range(self.shared_from + 1, self.num_blocks):
                if out[b].kind != "shared":
                    out[b] = AttentionVariantConfig(kind="shared")
        return out

    def to_dict(self) -> dict:
        d = {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "num_classes": self.num_classes,
            "num_blocks": self.num_blocks,
            "embed_dim": self.embed_dim,
            "num_heads": self.num_heads,
            "mlp_hidden": self.mlp_hidden,
            "variants": [v.to_dict() for v in self.block_variants],
        }
        if self.shared_from is not None:
            d["shared_from"] = self.shared_from
        if self.channels != 3:
            d["channels"] = self.channels
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(_CONFIG_KEYS)
        if unknown:
            raise SpecParseError(f"unknown model config field(s) {sorted(unknown)}")
        missing = {"image_size", "patch_size", "num_classes", "num_blocks",
                   "embed_dim", "num_heads", "mlp_hidden"} - set(d)
        if missing:
            raise SpecParseError(f"model config missing field(s) {sorted(missing)}")
        return cls(
            image_size=d["image_size"],
            patch_size=d["patch_size"],
            num_classes=d["num_classes"],
            num_blocks=d["num_blocks"],
            embed_dim=d["embed_dim"],
            num_heads=d["num_heads"],
            mlp_hidden=d["mlp_hidden"],
            block_variants=_parse_variants(d.get("variants"), d["num_blocks"]),
            shared_from=d.get("shared_from"),
            channels=d.get("channels", 3),
        )


# -- parameter layout ----------------------------------------------------------

_STD = 0.02  # init scale for weights, class token, positionals


def parameter_entries(config: ModelConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, init) for every learnable tensor, in checkpoint order.

    Shared blocks carry no Q/K projections; the mix matrix and map-norm
    affine exist only where the variant uses them.
    """
    c = config
    D, H, M = c.embed_dim, c.num_heads, c.mlp_hidden
    patch_dim = c.patch_size * c.patch_size * c.channels
    entries = [
        ("patch_embed.weight", (patch_dim, D), "normal"),
        ("patch_embed.bias", (D,), "zeros"),
        ("cls_token", (1, D), "normal"),
        ("pos_embed", (c.num_tokens, D), "normal"),
    ]
    for b, variant in enumerate(c.effective_variants()):
        p = f"blocks.{b}"
        entries += [(f"{p}.ln1.scale", (D,), "ones"), (f"{p}.ln1.shift", (D,), "zeros")]
        if variant.kind != "shared":
            entries += [
                (f"{p}.attn.wq", (D, D), "normal"), (f"{p}.attn.bq", (D,), "zeros"),
                (f"{p}.attn.wk", (D, D), "normal"), (f"{p}.attn.bk", (D,), "zeros"),
            ]
        entries += [
            (f"{p}.attn.wv", (D, D), "normal"), (f"{p}.attn.bv", (D,), "zeros"),
            (f"{p}.attn.wo", (D, D), "normal"), (f"{p}.attn.bo", (D,), "zeros"),
        ]
        if variant.kind in ("re_attention", "shared"):
            entries.append((f"{p}.attn.theta", (H, H), "identity_noise"))
            if variant.norm_mode == "batch":
                entries += [
                    (f"{p}.attn.norm_scale", (H, 1, 1), "ones"),
                    (f"{p}.attn.norm_shift", (H, 1, 1), "zeros"),
                ]
        if variant.kind == "temperature" and variant.temperature == "learnable":
            entries.append((f"{p}.attn.log_tau", (), "zeros"))
        entries += [
            (f"{p}.ln2.scale", (D,), "ones"), (f"{p}.ln2.shift", (D,), "zeros"),
            (f"{p}.mlp.w1", (D, M), "normal"), (f"{p}.mlp.b1", (M,), "zeros"),
            (f"{p}.mlp.w2", (M, D), "normal"), (f"{p}.mlp.b2", (D,), "zeros"),
        ]
    entries += [
        ("final_norm.scale", (D,), "ones"), ("final_norm.shift", (D,), "zeros"),
        ("head.weight", (D, c.num_classes), "normal"),
        ("head.bias", (c.num_classes,), "zeros"),
    ]
    return entries


def count_params(config: ModelConfig) -> int:
    """Exact learnable-scalar count, biases and norm affines included."""
    return sum(int(np.prod(shape)) if shape else 1
               for _, shape, _ in parameter_entries(config))


def _init_array(shape, kind, rng: np.random.Generator, dtype) -> np.ndarray:
    if kind == "normal":
        return (_STD * rng.standard_normal(shape)).astype(dtype)
    if kind == "zeros":
        return np.zeros(shape, dtype=dtype)
    if kind == "ones":
        return np.ones(shape, dtype=dtype)
    if kind == "identity_noise":
        eye = np.eye(shape[0], dtype=dtype)
        return eye + (0.01 * rng.standard_normal(shape)).astype(dtype)
    raise ConfigError(f"unknown init kind {kind!r}")


# -- forward results -------------------------------------------------------------


@dataclass
class BatchForward:
    """Differentiable results of one batched pass (tensors stay on the tape)."""

    logits: Tensor
    block_features: list[Tensor]
    block_maps: list[Tensor]
    mixed_maps: dict[int, Tensor] = field(default_factory=dict)


@dataclass
class ForwardTrace:
    """Per-image diagnostics view: plain arrays, detached from any tape."""

    logits: np.ndarray
    block_features: list[np.ndarray]
    block_maps: list[AttentionMap]


class Model:
    """Parameters plus the forward pass; build with `Model.build`."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 buffers: dict[str, RunningStats], precision: str):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.precision = precision

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0,
              precision: str = "single") -> "Model":
        dtype = resolve_dtype(precision)
        rng = np.random.default_rng(seed)
        params = {
            name: Tensor._wrap(_init_array(shape, kind, rng, dtype), True)
            for name, shape, kind in parameter_entries(config)
        }
        buffers = {}
        for b, variant in enumerate(config.effective_variants()):
            if variant.kind in ("re_attention", "shared") and variant.norm_mode == "batch":
                # per-head stats, keepdims layout for batched [N, H, T, T] maps
                buffers[f"blocks.{b}.attn.norm_running"] = RunningStats.for_shape(
                    (1, config.num_heads, 1, 1), dtype=dtype
                )
        return cls(config, params, buffers, precision)

    # -- parameter access ----------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def astype(self, precision: str) -> "Model":
        dtype = resolve_dtype(precision)
        params = {k: Tensor._wrap(np.ascontiguousarray(t.data.astype(dtype)), True)
                  for k, t in self.params.items()}
        buffers = {
            k: RunningStats(r.mean.astype(dtype), r.var.astype(dtype),
                            r.momentum, r.batches_seen)
            for k, r in self.buffers.items()
        }
        name = "double" if dtype == np.float64 else "single"
        return Model(self.config, params, buffers, name)

    def _affine(self, name: str) -> Affine:
        return Affine(self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    # -- forward -------------------------------------------------------------

    def patch_tokens(self, images: Tensor) -> Tensor:
        """[..., C, S, S] -> [..., T, D]: patchify, embed, class token, positions."""
        c = self.config
        C, S, p = c.channels, c.image_size, c.patch_size
        if images.shape[-3:] != (C, S, S):
            raise ConfigError(
                f"images of shape {images.shape} do not match config "
                f"[{C}, {S}, {S}]"
            )
        lead = images.shape[:-3]
        n_side = S // p
        x = ops.reshape(images, lead + (C, n_side, p, n_side, p))
        nl = len(lead)
        perm = tuple(range(nl)) + tuple(nl + i for i in (1, 3, 2, 4, 0))
        x = ops.transpose(x, perm)
        x = ops.reshape(x, lead + (n_side * n_side, p * p * C))
        x = ops.linear(x, self.params["patch_embed.weight"], self.params["patch_embed.bias"])
        cls = ops.broadcast_to(self.params["cls_token"], lead + (1, c.embed_dim))
        x = ops.concat([cls, x], axis=len(lead))
        return ops.add(x, self.params["pos_embed"])

    def _layer_norm(self, x: Tensor, prefix: str) -> Tensor:
        return ops.normalize(x, "layer", (-1,), self.params[f"{prefix}.scale"],
                             self.params[f"{prefix}.shift"])

    def _block_attention(self, b: int, variant: AttentionVariantConfig, h: Tensor,
                         stored_map: Tensor | None, mode: str,
                         rng: np.random.Generator | None):
        """Returns (attn_out, trace_map, mixed_map_or_None, stored_map)."""
        c = self.config
        p = f"blocks.{b}.attn"
        out_proj = Affine(self.params[f"{p}.wo"], self.params[f"{p}.bo"])
        v_proj = Affine(self.params[f"{p}.wv"], self.params[f"{p}.bv"])

        if variant.kind == "shared":
            if stored_map is None:
                raise ConfigError(f"block {b} is shared but no map was stored")
            out = shared_attention_forward(
                h, stored_map, self.params[f"{p}.theta"], v_proj, out_proj,
                heads=c.num_heads, norm_mode=variant.norm_mode,
                norm_scale=self.params.get(f"{p}.norm_scale"),
                norm_shift=self.params.get(f"{p}.norm_shift"),
                running=self.buffers.get(f"{p}.norm_running"),
                mode=mode, per_sample=bool(variant.norm_per_sample),
            )
            return out, stored_map, None, stored_map

        q, k, v = qkv_project(h, self._qproj(p), self._kproj(p), v_proj, c.num_heads)
        if variant.kind == "vanilla":
            out, amap = mhsa(q, k, v, out_proj)
            return out, amap, None, amap
        if variant.kind == "temperature":
            tau = variant.temperature
            if tau == "learnable":
                tau = ops.exp(self.params[f"{p}.log_tau"])
            elif tau == "linear_decay":
                tau = variant.decayed_temperature(b, c.num_blocks)
            out, amap = mhsa(q, k, v, out_proj, temperature=tau)
            return out, amap, None, amap
        if variant.kind == "drop_attention":
            if mode == "train" and rng is None:
                raise ConfigError("drop_attention in train mode needs a generator")
            out, amap = drop_attention(q, k, v, out_proj,
                                       variant.resolved_drop_rate(), rng, mode)
            return out, amap, None, amap
        if variant.kind == "re_attention":
            out, raw, mixed = re_attention(
                q, k, v, self.params[f"{p}.theta"], out_proj,
                norm_mode=variant.norm_mode,
                norm_scale=self.params.get(f"{p}.norm_scale"),
                norm_shift=self.params.get(f"{p}.norm_shift"),
                running=self.buffers.get(f"{p}.norm_running"),
                mode=mode, per_sample=bool(variant.norm_per_sample),
            )
            return out, raw, mixed, raw
        raise ConfigError(f"unknown attention kind {variant.kind!r}")

    def _qproj(self, p):
        return Affine(self.params[f"{p}.wq"], self.params[f"{p}.bq"])

    def _kproj(self, p):
        return Affine(self.params[f"{p}.wk"], self.params[f"{p}.bk"])

    def forward(self, images, mode: str = "train",
                rng: np.random.Generator | None = None) -> BatchForward:
        """Full pass over [N, C, S, S] (or a single [C, S, S]) input.

        Any NaN/Inf activation raises a numerical-failure error naming the
        block. The per-block maps in the result are the diagnostics-facing
        ones: raw (pre-mixing) for re-attention, post-drop for drop blocks,
        the reused map for shared blocks.
        """
        if mode not in ("train", "eval"):
            raise ConfigError(f"unknown forward mode {mode!r}")
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images), dtype=self.precision)
        if images.dtype != resolve_dtype(self.precision):
            images = images.astype(self.precision)
        if images.ndim == 3:
            images = ops.reshape(images, (1,) + images.shape)
        elif images.ndim != 4:
            raise ConfigError(f"images must be [N, C, S, S], got {images.shape}")

        c = self.config
        tokens = self.patch_tokens(images)
        variants = c.effective_variants()

        features: list[Tensor] = []
        maps: list[Tensor] = []
        mixed_maps: dict[int, Tensor] = {}
        stored_map: Tensor | None = None

        for b, variant in enumerate(variants):
            h = self._layer_norm(tokens, f"blocks.{b}.ln1")
            attn_out, trace_map, mixed, candidate = self._block_attention(
                b, variant, h, stored_map, mode, rng
            )
            tokens = ops.add(tokens, attn_out)
            h2 = self._layer_norm(tokens, f"blocks.{b}.ln2")
            m = ops.linear(h2, self.params[f"blocks.{b}.mlp.w1"],
                           self.params[f"blocks.{b}.mlp.b1"])
            m = ops.gelu(m)
            m = ops.linear(m, self.params[f"blocks.{b}.mlp.w2"],
                           self.params[f"blocks.{b}.mlp.b2"])
            tokens = ops.add(tokens, m)
            tokens.check_finite(f"block {b} output")
            features.append(tokens)
            maps.append(trace_map)
            if mixed is not None:
                mixed_maps[b] = mixed
            if c.shared_from is not None and b == c.shared_from:
                stored_map = candidate

        tokens = self._layer_norm(tokens, "final_norm")
        cls = tokens[:, 0, :]
        logits = ops.linear(cls, self.params["head.weight"], self.params["head.bias"])
        logits.check_finite("logits")
        return BatchForward(logits, features, maps, mixed_maps)


def forward_traces(model: Model, images, mode: str = "eval",
                   rng: np.random.Generator | None = None) -> list[ForwardTrace]:
    """Per-image diagnostic traces (detached arrays), batched input."""
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    fwd = model.forward(arr, mode=mode, rng=rng)
    n = arr.shape[0]
    traces = []
    for i in range(n):
        traces.append(ForwardTrace(
            logits=fwd.logits.data[i].copy(),
            block_features=[f.data[i].copy() for f in fwd.block_features],
            block_maps=[AttentionMap(m.data[i].copy()) for m in fwd.block_maps],
        ))
    return traces


def patch_embed(model: Model, image) -> Tensor:
    """Tokens for one image or a batch; thin name for the embedding stage."""
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image), dtype=model.precision)
    return model.patch_tokens(image)


# -- checkpoints -----------------------------------------------------------------

_MANIFEST_NAME = "manifest.json"
_TENSORS_NAME = "tensors.bin"


def save_checkpoint(model: Model, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    param_names = list(model.params)
    buffer_names = list(model.buffers)
    manifest = {
        "format": "reattn-checkpoint",
        "version": 1,
        "precision": model.precision,
        "config": model.config.to_dict(),
        "params": param_names,
        "buffers": buffer_names,
        "buffer_meta": {
            name: {"momentum": model.buffers[name].momentum,
                   "batches_seen": model.buffers[name].batches_seen}
            for name in buffer_names
        },
    }
    with open(directory / _MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2)
    with open(directory / _TENSORS_NAME, "wb") as f:
        for name in param_names:
            write_tensor(f, model.params[name])
        for name in buffer_names:
            write_tensor(f, model.buffers[name].mean)
            write_tensor(f, model.buffers[name].var)
    return directory


def load_checkpoint(directory) -> Model:
    directory = Path(directory)
    try:
        with open(directory / _MANIFEST_NAME) as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise ManifestError(f"no {_MANIFEST_NAME} under {directory}")
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest is not valid JSON: {e}")
    if manifest.get("format") != "reattn-checkpoint":
        raise ManifestError(f"unrecognized checkpoint format {manifest.get('format')!r}")

    config = ModelConfig.from_dict(manifest["config"])
    precision = manifest.get("precision", "single")
    expected = {name: shape for name, shape, _ in parameter_entries(config)}
    if list(expected) != manifest["params"]:
        raise ManifestError("manifest parameter list does not match its config")

    params: dict[str, Tensor] = {}
    buffers: dict[str, RunningStats] = {}
    try:
        with open(directory / _TENSORS_NAME, "rb") as f:
            for name in manifest["params"]:
                arr = read_tensor(f)
                if arr.shape != tuple(expected[name]):
                    raise ManifestError(
                        f"tensor {name} has shape {arr.shape}, config wants {expected[name]}"
                    )
                params[name] = Tensor._wrap(arr, True)
            for name in manifest["buffers"]:
                meta = manifest["buffer_meta"][name]
                mean = read_tensor(f)
                var = read_tensor(f)
                buffers[name] = RunningStats(mean, var, meta["momentum"],
                                             meta["batches_seen"])
    except FileNotFoundError:
        raise ManifestError(f"no {_TENSORS_NAME} under {directory}")
    except Exception as e:
        if isinstance(e, ManifestError):
            raise
        raise ManifestError(f"checkpoint tensors unreadable: {e}")
    return Model(config, params, buffers, precision)

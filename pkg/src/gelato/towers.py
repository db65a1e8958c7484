"""Frozen encoder towers and the frozen text backbone.

These are seeded stand-ins for pretrained encoders: correct dataflow and
dimension relationships, deterministic weights (Gaussian, std 0.02). The
vision tower emits a patch-token grid whose sides must be even so the 2x2
spatial merge downstream always applies; the audio tower emits one token
per analysis window; the text backbone is a causal transformer with rotary
positions and per-task low-rank adapters on its attention query/value
projections.

All tower parameters are created frozen. Ablation scopes may flip encoder
parameters to trainable; the forward code is freeze-agnostic and simply
runs on whatever leaves it is given.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionError,
    EmptyInputError,
    MergeIncompatibilityError,
    PatchingError,
    TooShortError,
)
from .numerics import (
    ParamSet,
    Var,
    add,
    affine,
    causal_softmax,
    gelu,
    layer_norm,
    matmul,
    reshape,
    rotary,
    scale,
    softmax_rows,
    swapaxes,
    transpose,
)
from .profiles import LAYER_NORM_EPS, ModelProfile

INIT_STD = 0.02
ROPE_BASE = 10000.0


@dataclass
class VisionTower:
    profile: ModelProfile
    params: ParamSet
    prefix: str = "vision"


@dataclass
class AudioTower:
    profile: ModelProfile
    params: ParamSet
    prefix: str = "audio"


@dataclass
class TextBackbone:
    profile: ModelProfile
    params: ParamSet
    prefix: str = "backbone"


@dataclass
class LoraAdapter:
    """Low-rank delta on the backbone attention q/v projections.

    Effective weight is W + (alpha/rank) * B @ A; a zero B makes the
    adapter an exact identity delta.
    """

    prefix: str
    rank: int
    alpha: float


# --------------------------------------------------------------------- init

def _add_affine(ps: ParamSet, name: str, d_out: int, d_in: int, rng) -> None:
    ps.add(f"{name}/W", rng.normal(0.0, INIT_STD, size=(d_out, d_in)))
    ps.add(f"{name}/b", np.zeros(d_out))


def _add_block(ps: ParamSet, prefix: str, d: int, d_ff: int, rng) -> None:
    ps.add(f"{prefix}/ln1/gamma", np.ones(d))
    ps.add(f"{prefix}/ln1/beta", np.zeros(d))
    for w in ("Wq", "Wk", "Wv", "Wo"):
        ps.add(f"{prefix}/attn/{w}", rng.normal(0.0, INIT_STD, size=(d, d)))
    ps.add(f"{prefix}/ln2/gamma", np.ones(d))
    ps.add(f"{prefix}/ln2/beta", np.zeros(d))
    _add_affine(ps, f"{prefix}/mlp/fc1", d_ff, d, rng)
    _add_affine(ps, f"{prefix}/mlp/fc2", d, d_ff, rng)


def _add_encoder(ps: ParamSet, prefix: str, d: int, depth: int, rng) -> None:
    for i in range(depth):
        _add_block(ps, f"{prefix}/block{i}", d, 4 * d, rng)
    ps.add(f"{prefix}/ln_f/gamma", np.ones(d))
    ps.add(f"{prefix}/ln_f/beta", np.zeros(d))


def build_towers(profile: ModelProfile, seed: int) -> tuple[VisionTower, AudioTower, TextBackbone]:
    """Deterministically construct the three frozen stacks over one shared
    parameter set; identical (profile, seed) give bitwise identical
    weights."""
    ps = ParamSet()
    rng = np.random.default_rng([seed, 0])
    _add_affine(ps, "vision/patch", profile.d_vit, profile.patch_size ** 2 * profile.image_channels, rng)
    _add_encoder(ps, "vision", profile.d_vit, profile.vit_depth, rng)

    rng = np.random.default_rng([seed, 1])
    _add_affine(ps, "audio/frame", profile.d_aud, profile.frame_len, rng)
    _add_encoder(ps, "audio", profile.d_aud, profile.aud_depth, rng)

    rng = np.random.default_rng([seed, 2])
    ps.add("backbone/embed", rng.normal(0.0, INIT_STD, size=(profile.vocab_size, profile.d_text)))
    _add_encoder(ps, "backbone", profile.d_text, profile.text_depth, rng)

    return VisionTower(profile, ps), AudioTower(profile, ps), TextBackbone(profile, ps)


def add_lora_params(ps: ParamSet, profile: ModelProfile, seed: int, prefix: str = "lora") -> LoraAdapter:
    """Seeded adapter weights emulating an inherited, already-trained
    adapter: both factors nonzero so the delta visibly changes outputs."""
    rng = np.random.default_rng([seed, 3])
    r = profile.lora_rank
    d = profile.d_text
    for i in range(profile.text_depth):
        for proj in ("q", "v"):
            ps.add(f"{prefix}/block{i}/{proj}/A", rng.normal(0.0, INIT_STD, size=(r, d)))
            ps.add(f"{prefix}/block{i}/{proj}/B", rng.normal(0.0, INIT_STD, size=(d, r)))
    return LoraAdapter(prefix=prefix, rank=r, alpha=profile.lora_alpha)


# ------------------------------------------------------------------ helpers

def sinusoidal_positions(n: int, d: int, scale: float = INIT_STD) -> np.ndarray:
    # Scaled to the weight-init magnitude: unscaled sin/cos values would be
    # ~25x larger than the std-0.02 embeddings they are added to and would
    # drown the content signal.
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angles = pos / ROPE_BASE ** (2 * i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return scale * pe


def rope_tables(t: int, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    pos = np.arange(t)[:, None]
    i = np.arange(head_dim // 2)[None, :]
    angles = pos * ROPE_BASE ** (-2 * i / head_dim)
    return np.cos(angles), np.sin(angles)


def _leaf(params: ParamSet, leaves: dict | None, name: str) -> Var:
    if leaves is not None:
        return leaves[name]
    return Var(params[name].value)


def _attention(x: Var, get, heads: int, causal: bool, rope: tuple | None,
               lora_get=None) -> Var:
    t, d = x.value.shape
    dh = d // heads

    def proj(name):
        w = get(f"attn/{name}")
        if lora_get is not None and name in ("Wq", "Wv"):
            a, b, s = lora_get(name)
            w = add(w, scale(matmul(b, a), s))
        return matmul(x, transpose(w))

    def split(v):
        return swapaxes(reshape(v, (t, heads, dh)), 0, 1)  # (H, T, dh)

    q, k, v = split(proj("Wq")), split(proj("Wk")), split(proj("Wv"))
    if rope is not None:
        cos, sin = rope
        q = rotary(q, cos, sin)
        k = rotary(k, cos, sin)
    scores = scale(matmul(q, swapaxes(k, 1, 2)), 1.0 / math.sqrt(dh))
    p = causal_softmax(scores) if causal else softmax_rows(scores)
    out = matmul(p, v)  # (H, T, dh)
    out = reshape(swapaxes(out, 0, 1), (t, d))
    return matmul(out, transpose(get("attn/Wo")))


def _encoder_forward(x: Var, params: ParamSet, leaves: dict | None, prefix: str,
                     depth: int, heads: int, causal: bool,
                     adapter: LoraAdapter | None = None) -> Var:
    t = x.value.shape[0]
    d = x.value.shape[1]
    rope = rope_tables(t, d // heads) if causal else None

    for i in range(depth):
        bp = f"{prefix}/block{i}"

        def get(name, _bp=bp):
            return _leaf(params, leaves, f"{_bp}/{name}")

        lora_get = None
        if adapter is not None and f"{adapter.prefix}/block{i}/q/A" in params:
            def lora_get(name, _i=i):
                proj = "q" if name == "Wq" else "v"
                a = _leaf(params, leaves, f"{adapter.prefix}/block{_i}/{proj}/A")
                b = _leaf(params, leaves, f"{adapter.prefix}/block{_i}/{proj}/B")
                return a, b, adapter.alpha / adapter.rank

        h = layer_norm(x, get("ln1/gamma"), get("ln1/beta"), LAYER_NORM_EPS)
        x = add(x, _attention(h, get, heads, causal, rope, lora_get))
        h = layer_norm(x, get("ln2/gamma"), get("ln2/beta"), LAYER_NORM_EPS)
        h = affine(h, get("mlp/fc1/W"), get("mlp/fc1/b"))
        h = affine(gelu(h), get("mlp/fc2/W"), get("mlp/fc2/b"))
        x = add(x, h)

    return layer_norm(
        x,
        _leaf(params, leaves, f"{prefix}/ln_f/gamma"),
        _leaf(params, leaves, f"{prefix}/ln_f/beta"),
        LAYER_NORM_EPS,
    )


# --------------------------------------------------------------- tower ops

def patch_grid(profile: ModelProfile, height: int, width: int) -> tuple[int, int]:
    ps = profile.patch_size
    if height % ps or width % ps:
        raise PatchingError(f"image {height}x{width} not divisible by patch size {ps}")
    rows, cols = height // ps, width // ps
    if rows % 2 or cols % 2:
        raise MergeIncompatibilityError(
            f"patch grid {rows}x{cols} has an odd side; 2x2 merge needs even sides"
        )
    return rows, cols


def encode_image(tower: VisionTower, image: np.ndarray, leaves: dict | None = None):
    """Image (H, W, C) -> (patch tokens (P, d_vit), (rows, cols))."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != tower.profile.image_channels:
        raise DimensionError(
            f"expected (H, W, {tower.profile.image_channels}) image, got {image.shape}"
        )
    h, w, c = image.shape
    rows, cols = patch_grid(tower.profile, h, w)
    psz = tower.profile.patch_size
    patches = (
        image.reshape(rows, psz, cols, psz, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * cols, psz * psz * c)
    )
    x = affine(
        patches,
        _leaf(tower.params, leaves, "vision/patch/W"),
        _leaf(tower.params, leaves, "vision/patch/b"),
    )
    x = add(x, Var(sinusoidal_positions(rows * cols, tower.profile.d_vit)))
    out = _encoder_forward(
        x, tower.params, leaves, tower.prefix,
        tower.profile.vit_depth, tower.profile.vit_heads, causal=False,
    )
    return out, (rows, cols)


def audio_token_count(profile: ModelProfile, n_samples: int) -> int:
    fl, hop = profile.frame_len, profile.hop
    if n_samples < fl:
        raise TooShortError(f"audio of {n_samples} samples is shorter than one {fl}-sample frame")
    return (n_samples - fl) // hop + 1


def encode_audio(tower: AudioTower, samples: np.ndarray, leaves: dict | None = None) -> Var:
    """Samples (T,) -> encoder states (K, d_aud), one per analysis window."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise DimensionError(f"expected 1D sample array, got {samples.shape}")
    k = audio_token_count(tower.profile, samples.shape[0])
    fl, hop = tower.profile.frame_len, tower.profile.hop
    starts = np.arange(k) * hop
    frames = samples[starts[:, None] + np.arange(fl)[None, :]]
    x = affine(
        frames,
        _leaf(tower.params, leaves, "audio/frame/W"),
        _leaf(tower.params, leaves, "audio/frame/b"),
    )
    x = add(x, Var(sinusoidal_positions(k, tower.profile.d_aud)))
    return _encoder_forward(
        x, tower.params, leaves, tower.prefix,
        tower.profile.aud_depth, tower.profile.aud_heads, causal=False,
    )


def run_backbone(backbone: TextBackbone, states, adapter: LoraAdapter | None = None,
                 leaves: dict | None = None) -> Var:
    """Causal transformer pass over prepared input states (T, d_text);
    differentiable with respect to the states so projector gradients flow
    through the frozen stack."""
    states = states if isinstance(states, Var) else Var(states)
    if states.value.ndim != 2 or states.value.shape[1] != backbone.profile.d_text:
        raise DimensionError(
            f"expected (T, {backbone.profile.d_text}) states, got {states.value.shape}"
        )
    if states.value.shape[0] == 0:
        raise EmptyInputError("cannot run the backbone on an empty sequence")
    return _encoder_forward(
        states, backbone.params, leaves, backbone.prefix,
        backbone.profile.text_depth, backbone.profile.text_heads,
        causal=True, adapter=adapter,
    )

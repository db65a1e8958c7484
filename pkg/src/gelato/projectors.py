"""Alignment layers between the frozen towers and the text hidden space.

The vision path normalizes each patch token, concatenates 2x2 neighborhoods
(quartering the token count), runs the frozen first linear layer with GELU,
then the trainable second linear layer into the text width. The audio path
is a single trainable affine applied independently per audio token. The
four modality delimiter embeddings round out the trainable set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, EmptyInputError, MergeIncompatibilityError
from .numerics import ParamSet, Var, affine, as_var, gather_concat_rows, gelu, layer_norm
from .profiles import DELIMITER_NAMES, LAYER_NORM_EPS, ModelProfile
from .towers import INIT_STD


@dataclass
class VisionProjector:
    profile: ModelProfile
    params: ParamSet
    prefix: str = "vproj"


@dataclass
class AudioProjector:
    profile: ModelProfile
    params: ParamSet
    prefix: str = "aproj"


def merge_indices(rows: int, cols: int) -> np.ndarray:
    """Patch indices of each 2x2 neighborhood, in row-major block order with
    row-major order inside the block."""
    if rows % 2 or cols % 2:
        raise MergeIncompatibilityError(f"grid {rows}x{cols} has an odd side")
    r = np.arange(0, rows, 2)[:, None, None, None]
    c = np.arange(0, cols, 2)[None, :, None, None]
    dr = np.array([0, 0, 1, 1])[None, None, :, None]
    dc = np.array([0, 1, 0, 1])[None, None, :, None]
    idx = (r + dr) * cols + (c + dc)
    return idx.reshape(rows * cols // 4, 4)


def spatial_merge_2x2(patches, grid: tuple[int, int]) -> Var:
    """Concatenate each 2x2 patch neighborhood into one 4*d_vit token.

    Pure rearrangement; in the projector pipeline it runs on patch tokens
    that were already layer-normalized.
    """
    patches = as_var(patches)
    rows, cols = grid
    if patches.value.ndim != 2 or patches.value.shape[0] != rows * cols:
        raise DimensionError(
            f"patches {patches.value.shape} do not cover a {rows}x{cols} grid"
        )
    return gather_concat_rows(patches, merge_indices(rows, cols))


def project_vision(proj: VisionProjector, patches, grid: tuple[int, int],
                   leaves: dict | None = None) -> Var:
    """Patch tokens (P, d_vit) -> text-space features (P/4, d_text)."""

    def leaf(name):
        full = f"{proj.prefix}/{name}"
        return leaves[full] if leaves is not None else Var(proj.params[full].value)

    x = layer_norm(patches, leaf("ln/gamma"), leaf("ln/beta"), LAYER_NORM_EPS)
    m = spatial_merge_2x2(x, grid)
    z = gelu(affine(m, leaf("fc1/W"), leaf("fc1/b")))
    return affine(z, leaf("fc2/W"), leaf("fc2/b"))


def project_audio(proj: AudioProjector, states, leaves: dict | None = None) -> Var:
    """Audio states (K, d_aud) -> text-space features (K, d_text), one
    token in, one token out, rows independent."""
    states = as_var(states)
    if states.value.ndim != 2 or states.value.shape[0] < 1:
        raise EmptyInputError(f"audio projection needs at least one state, got {states.value.shape}")

    def leaf(name):
        full = f"{proj.prefix}/{name}"
        return leaves[full] if leaves is not None else Var(proj.params[full].value)

    return affine(states, leaf("fc/W"), leaf("fc/b"))


# ----------------------------------------------------------- initialization

def _xavier(rng, d_out: int, d_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_out, d_in))


def add_frozen_projector_params(ps: ParamSet, profile: ModelProfile, seed: int) -> None:
    """The inherited, always-frozen half of the vision projector: per-token
    LayerNorm affine and the first linear layer."""
    rng = np.random.default_rng([seed, 4])
    ps.add("vproj/ln/gamma", np.ones(profile.d_vit))
    ps.add("vproj/ln/beta", np.zeros(profile.d_vit))
    ps.add("vproj/fc1/W", rng.normal(0.0, INIT_STD, size=(profile.d_mid, 4 * profile.d_vit)))
    ps.add("vproj/fc1/b", rng.normal(0.0, INIT_STD, size=profile.d_mid))


def init_trainable(profile: ModelProfile, seed: int) -> dict[str, np.ndarray]:
    """Fresh trainable weights: Xavier-uniform projections, zero biases,
    delimiter embeddings Gaussian std 0.02. Deterministic per seed."""
    rng = np.random.default_rng([seed, 5])
    out = {
        "vproj/fc2/W": _xavier(rng, profile.d_text, profile.d_mid),
        "vproj/fc2/b": np.zeros(profile.d_text),
        "aproj/fc/W": _xavier(rng, profile.d_text, profile.d_aud),
        "aproj/fc/b": np.zeros(profile.d_text),
    }
    for name in DELIMITER_NAMES:
        out[f"delim/{name}"] = rng.normal(0.0, INIT_STD, size=profile.d_text)
    return out


def delimiter_trainable(profile: ModelProfile, name: str) -> bool:
    """Which delimiter embeddings the released recipe trains: all four on
    profiles with trainable vision delimiters, only the audio pair
    otherwise."""
    if name.startswith("audio_"):
        return True
    return profile.train_vision_delims

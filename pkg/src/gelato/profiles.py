"""Model shape profiles.

The ``toy`` profile is the working configuration: small enough that full
training runs finish in minutes on one CPU core. The ``small`` and ``nano``
profiles reproduce the production dimension relationships (text hidden size,
4x merged vision width, 1280-wide audio states, per-profile truncation sets)
and are used for shape-level checks only.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

from .errors import ConfigurationError

# Token id layout: 0..255 raw bytes, 256 pad, then special ids. Placeholder
# (pad) positions are always overwritten with projected features, so image
# and video share one visual pad id; provenance lives in the slot map.
BYTE_VOCAB = 256
PAD_ID = 256
VISION_START_ID = 257
VISION_END_ID = 258
AUDIO_START_ID = 259
AUDIO_END_ID = 260
VISUAL_PAD_ID = 261
AUDIO_PAD_ID = 262

DELIMITER_NAMES = ("vision_start", "vision_end", "audio_start", "audio_end")
DELIMITER_IDS = {
    VISION_START_ID: "vision_start",
    VISION_END_ID: "vision_end",
    AUDIO_START_ID: "audio_start",
    AUDIO_END_ID: "audio_end",
}

TASK_VARIANTS = ("retrieval", "text-matching", "clustering", "classification")
MODALITIES = ("text", "vision", "audio", "omni")

LAYER_NORM_EPS = 1e-6
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelProfile:
    """Dimension and depth settings for one model size."""

    name: str
    d_text: int
    d_vit: int
    d_mid: int          # fc_vision_1 output width
    d_aud: int
    text_depth: int
    text_heads: int
    vit_depth: int
    vit_heads: int
    aud_depth: int
    aud_heads: int
    patch_size: int
    frame_len: int      # audio analysis window, in samples
    hop: int
    k_set: tuple[int, ...]
    train_vision_delims: bool   # nano learns only the audio delimiter pair
    image_channels: int = 1
    lora_rank: int = 4
    lora_alpha: float = 8.0

    def __post_init__(self):
        if self.d_mid != 4 * self.d_vit:
            raise ConfigurationError(
                f"d_mid must equal 4*d_vit (2x2 merge), got {self.d_mid} vs 4*{self.d_vit}"
            )
        for d, h, what in (
            (self.d_text, self.text_heads, "text"),
            (self.d_vit, self.vit_heads, "vision"),
            (self.d_aud, self.aud_heads, "audio"),
        ):
            if d % h != 0:
                raise ConfigurationError(f"{what} width {d} not divisible by {h} heads")
        if (self.d_text // self.text_heads) % 2 != 0:
            raise ConfigurationError("text head width must be even for rotary pairs")
        if not self.k_set or list(self.k_set) != sorted(set(self.k_set)):
            raise ConfigurationError("k_set must be non-empty and strictly ascending")
        if self.k_set[-1] > self.d_text:
            raise ConfigurationError(
                f"largest truncation dim {self.k_set[-1]} exceeds d_text {self.d_text}"
            )

    @property
    def vocab_size(self) -> int:
        return BYTE_VOCAB + 1  # bytes + pad

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_set"] = list(self.k_set)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelProfile":
        d = dict(d)
        d["k_set"] = tuple(d["k_set"])
        return ModelProfile(**d)


TOY = ModelProfile(
    name="toy",
    d_text=64, d_vit=16, d_mid=64, d_aud=48,
    text_depth=2, text_heads=4,
    vit_depth=2, vit_heads=4,
    aud_depth=2, aud_heads=4,
    patch_size=2, frame_len=16, hop=8,
    k_set=(8, 16, 32, 64),
    train_vision_delims=True,
)

SMALL = ModelProfile(
    name="small",
    d_text=1024, d_vit=1024, d_mid=4096, d_aud=1280,
    text_depth=2, text_heads=8,
    vit_depth=2, vit_heads=8,
    aud_depth=2, aud_heads=8,
    patch_size=2, frame_len=16, hop=8,
    k_set=(32, 64, 128, 256, 512, 768, 1024),
    train_vision_delims=True,
    image_channels=3,
)

NANO = ModelProfile(
    name="nano",
    d_text=768, d_vit=768, d_mid=3072, d_aud=1280,
    text_depth=2, text_heads=8,
    vit_depth=2, vit_heads=8,
    aud_depth=2, aud_heads=8,
    patch_size=2, frame_len=16, hop=8,
    k_set=(32, 64, 128, 256, 512, 768),
    train_vision_delims=False,
    image_channels=3,
)

PROFILES = {"toy": TOY, "small": SMALL, "nano": NANO}


def get_profile(name: str) -> ModelProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown profile {name!r}; expected one of {sorted(PROFILES)}"
        ) from None

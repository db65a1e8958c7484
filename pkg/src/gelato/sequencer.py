"""Input serialization and backbone-state materialization.

Every input becomes one token sequence. Text stays as raw bytes; each image
becomes a delimited run of visual placeholder slots (one per merged patch
token); audio becomes a delimited run of audio slots (one per encoder
window); a video is one visual segment per frame, preceded by its audio
segment when an audio track exists; mixed inputs concatenate their parts in
document order.

Placeholder positions never read a token embedding: materialization
overwrites each slot with the matching projected feature row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    DimensionError,
    EmptyInputError,
    SlotMismatchError,
    StructureError,
)
from .profiles import (
    AUDIO_END_ID,
    AUDIO_PAD_ID,
    AUDIO_START_ID,
    ModelProfile,
    PAD_ID,
    VISION_END_ID,
    VISION_START_ID,
    VISUAL_PAD_ID,
)
from .projectors import project_audio, project_vision
from .towers import audio_token_count, encode_audio, encode_image, patch_grid
from .numerics import Var, concat_rows, reshape

ITEM_KINDS = ("text", "image", "audio", "video", "mixed")


@dataclass
class InputItem:
    """One embeddable input. Exactly the payload fields implied by `kind`
    are set; media arrive as raw tensors (no file decoding here)."""

    kind: str
    text: Optional[str] = None
    image: Optional[np.ndarray] = None
    samples: Optional[np.ndarray] = None
    frames: Optional[list] = None
    video_audio: Optional[np.ndarray] = None
    items: Optional[list] = None

    def __post_init__(self):
        if self.kind not in ITEM_KINDS:
            raise StructureError(f"unknown item kind {self.kind!r}")
        if self.kind == "video" and (not self.frames or len(self.frames) < 1):
            raise StructureError("video items need at least one frame")
        if self.kind == "mixed":
            if not self.items:
                raise StructureError("mixed items must not be empty")
            for child in self.items:
                if child.kind == "mixed":
                    raise StructureError("mixed items cannot nest")


def text_item(s: str) -> InputItem:
    return InputItem("text", text=s)


def image_item(image) -> InputItem:
    return InputItem("image", image=np.asarray(image, dtype=np.float64))


def audio_item(samples) -> InputItem:
    return InputItem("audio", samples=np.asarray(samples, dtype=np.float64))


def video_item(frames, audio=None) -> InputItem:
    return InputItem(
        "video",
        frames=[np.asarray(f, dtype=np.float64) for f in frames],
        video_audio=None if audio is None else np.asarray(audio, dtype=np.float64),
    )


def mixed_item(items: list) -> InputItem:
    return InputItem("mixed", items=list(items))


@dataclass
class SlotRun:
    """A contiguous run of placeholder positions bound to one media source."""

    start: int
    length: int
    kind: str                    # 'image' | 'frame' | 'audio'
    media_index: int             # index into collect_media(item)
    frame_index: Optional[int] = None


@dataclass
class TokenSequence:
    ids: list
    slots: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)


# ------------------------------------------------------------- tokenization

def tokenize_text(s: str) -> list:
    """Reversible byte-level ids."""
    return list(s.encode("utf-8"))


def decode_text(ids) -> str:
    return bytes(int(i) for i in ids).decode("utf-8")


# --------------------------------------------------------------- serialize

def item_modalities(item: InputItem) -> set:
    """Which towers an item requires."""
    if item.kind == "text":
        return set()
    if item.kind == "image":
        return {"vision"}
    if item.kind == "audio":
        return {"audio"}
    if item.kind == "video":
        need = {"vision"}
        if item.video_audio is not None:
            need.add("audio")
        return need
    out = set()
    for child in item.items:
        out |= item_modalities(child)
    return out


def _vision_slot_count(profile: ModelProfile, image: np.ndarray) -> int:
    if image.ndim != 3:
        raise DimensionError(f"expected (H, W, C) image, got {image.shape}")
    rows, cols = patch_grid(profile, image.shape[0], image.shape[1])
    return rows * cols // 4


def collect_media(item: InputItem) -> list:
    """Media tensors in the exact order serialize() assigns slot indices:
    document order, with a video's audio track before its frames."""
    if item.kind == "text":
        return []
    if item.kind == "image":
        return [("image", item.image)]
    if item.kind == "audio":
        return [("audio", item.samples)]
    if item.kind == "video":
        out = []
        if item.video_audio is not None:
            out.append(("audio", item.video_audio))
        out.extend(("frame", f) for f in item.frames)
        return out
    out = []
    for child in item.items:
        out.extend(collect_media(child))
    return out


def serialize(item: InputItem, profile: ModelProfile) -> TokenSequence:
    """Flatten an input into ids plus a slot map binding placeholder runs to
    media. Slot counts match exactly what the towers and projectors will
    produce for each tensor."""
    ids: list = []
    slots: list = []
    media_counter = [0]

    def visual_segment(tensor, kind, frame_index=None):
        n = _vision_slot_count(profile, tensor)
        ids.append(VISION_START_ID)
        slots.append(SlotRun(len(ids), n, kind, media_counter[0], frame_index))
        ids.extend([VISUAL_PAD_ID] * n)
        ids.append(VISION_END_ID)
        media_counter[0] += 1

    def audio_segment(samples):
        k = audio_token_count(profile, np.asarray(samples).shape[0])
        ids.append(AUDIO_START_ID)
        slots.append(SlotRun(len(ids), k, "audio", media_counter[0]))
        ids.extend([AUDIO_PAD_ID] * k)
        ids.append(AUDIO_END_ID)
        media_counter[0] += 1

    def emit(node: InputItem):
        if node.kind == "text":
            ids.extend(tokenize_text(node.text))
        elif node.kind == "image":
            visual_segment(node.image, "image")
        elif node.kind == "audio":
            audio_segment(node.samples)
        elif node.kind == "video":
            if node.video_audio is not None:
                audio_segment(node.video_audio)
            for f, frame in enumerate(node.frames):
                visual_segment(frame, "frame", frame_index=f)
        else:
            for child in node.items:
                emit(child)

    emit(item)
    return TokenSequence(ids=ids, slots=slots)


# ------------------------------------------------------------------- parse

def parse_sequence(seq: TokenSequence) -> list:
    """Recover the segment skeleton from a serialized sequence: a list of
    ('text', n_bytes), ('image', n), ('frame', n) and ('audio', n) entries.
    Raises StructureError when delimiters do not bracket their runs."""
    slot_at = {}
    for run in seq.slots:
        for pos in range(run.start, run.start + run.length):
            if pos in slot_at:
                raise StructureError(f"overlapping slot runs at position {pos}")
            slot_at[pos] = run

    segments = []
    i = 0
    n = len(seq.ids)
    while i < n:
        tok = seq.ids[i]
        if tok in (VISION_START_ID, AUDIO_START_ID):
            pad = VISUAL_PAD_ID if tok == VISION_START_ID else AUDIO_PAD_ID
            end = VISION_END_ID if tok == VISION_START_ID else AUDIO_END_ID
            run = slot_at.get(i + 1)
            if run is None or run.start != i + 1:
                raise StructureError(f"segment at {i} has no slot run")
            stop = i + 1 + run.length
            if any(seq.ids[p] != pad for p in range(i + 1, stop)):
                raise StructureError("placeholder run contains foreign tokens")
            if stop >= n or seq.ids[stop] != end:
                raise StructureError("placeholder run not closed by its end delimiter")
            segments.append((run.kind, run.length))
            i = stop + 1
        elif tok in (VISION_END_ID, VISUAL_PAD_ID, AUDIO_END_ID, AUDIO_PAD_ID):
            raise StructureError(f"unexpected token {tok} outside a segment at {i}")
        else:
            j = i
            while j < n and seq.ids[j] <= PAD_ID:
                j += 1
            segments.append(("text", j - i))
            i = j
    return segments


# ------------------------------------------------------------- materialize

def materialize(seq: TokenSequence, bundle, media: list,
                leaves: dict | None = None) -> Var:
    """Build the backbone input matrix (T, d_text): token-embedding rows for
    bytes, delimiter-embedding rows for delimiters, and projected feature
    rows for every placeholder slot, in order."""
    from .registry import require_modality  # local import, no cycle at module load

    params = bundle.params

    def leaf(name):
        return leaves[name] if leaves is not None else Var(params[name].value)

    features = {}
    for run in seq.slots:
        if run.media_index >= len(media):
            raise SlotMismatchError(
                f"slot run references media {run.media_index} but only {len(media)} present"
            )
        kind, tensor = media[run.media_index]
        if run.kind == "audio":
            require_modality(bundle, "audio")
            states = encode_audio(bundle.audio, tensor, leaves)
            feats = project_audio(bundle.audio_projector, states, leaves)
        else:
            require_modality(bundle, "vision")
            patches, grid = encode_image(bundle.vision, tensor, leaves)
            feats = project_vision(bundle.vision_projector, patches, grid, leaves)
        if feats.value.shape[0] != run.length:
            raise SlotMismatchError(
                f"slot run at {run.start} expects {run.length} features, "
                f"projector produced {feats.value.shape[0]}"
            )
        features[run.start] = feats

    table = params["backbone/embed"].value
    delim_rows = {
        VISION_START_ID: "delim/vision_start",
        VISION_END_ID: "delim/vision_end",
        AUDIO_START_ID: "delim/audio_start",
        AUDIO_END_ID: "delim/audio_end",
    }

    pieces = []
    i = 0
    n = len(seq.ids)
    covered = {}
    for run in seq.slots:
        for pos in range(run.start, run.start + run.length):
            covered[pos] = run
    while i < n:
        tok = seq.ids[i]
        if i in covered:
            run = covered[i]
            if run.start != i:
                raise SlotMismatchError(f"slot run at {run.start} misaligned at {i}")
            pieces.append(features[run.start])
            i += run.length
        elif tok in delim_rows:
            pieces.append(reshape(leaf(delim_rows[tok]), (1, -1)))
            i += 1
        elif tok in (VISUAL_PAD_ID, AUDIO_PAD_ID):
            raise SlotMismatchError(f"placeholder at position {i} not covered by any slot run")
        else:
            j = i
            while j < n and seq.ids[j] <= PAD_ID and j not in covered:
                j += 1
            pieces.append(Var(table[np.asarray(seq.ids[i:j], dtype=np.intp)]))
            i = j
    if not pieces:
        raise EmptyInputError("cannot materialize an empty sequence")
    return concat_rows(pieces)

"""Checkpoint persistence and dynamic weight loading.

One checkpoint file holds the shared frozen weights once plus four
task-specific sets (adapter, second vision projector layer, audio projector,
delimiter embeddings). Loading selects a task variant and a modality
attribute; only the tensors that combination needs become resident.

File layout (little-endian throughout):

    magic "GELA" | u16 version | u32 manifest length | manifest JSON
    | u32 tensor count
    | per tensor: u16 name length, name, u8 rank, u64 x rank dims, u64 offset
    | zero padding to a 64-byte boundary
    | float32 payload (tensors packed in index order at their offsets)

Tensors are stored float32; the working precision in memory is float64, so
a store/load round trip quantizes every load of the same file identically.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np

from .errors import (
    ConfigurationError,
    IntegrityError,
    ModalityUnavailableError,
    VariantNotFoundError,
)
from .numerics import ParamSet
from .profiles import MODALITIES, ModelProfile, TASK_VARIANTS
from .projectors import (
    AudioProjector,
    VisionProjector,
    add_frozen_projector_params,
    init_trainable,
)
from .towers import (
    AudioTower,
    LoraAdapter,
    TextBackbone,
    VisionTower,
    add_lora_params,
    build_towers,
)

MAGIC = b"GELA"
FORMAT_VERSION = 1
MTF_MAGIC = b"MTF1"

# Runtime-name prefixes making up each group. Shared tensors are stored once
# under "shared/"; per-task tensors under "task/<variant>/".
TASK_PREFIXES = ("vproj/fc2/", "aproj/", "delim/", "lora/")

# Documented resident sets: runtime-name prefixes instantiated per modality.
RESIDENT_PREFIXES = {
    "text": ("backbone/", "lora/"),
    "vision": ("backbone/", "lora/", "vision/", "vproj/",
               "delim/vision_start", "delim/vision_end"),
    "audio": ("backbone/", "lora/", "audio/", "aproj/",
              "delim/audio_start", "delim/audio_end"),
    "omni": ("backbone/", "lora/", "vision/", "vproj/", "audio/", "aproj/", "delim/"),
}


@dataclass
class Checkpoint:
    """In-memory image of a checkpoint file: manifest plus float32 tensors
    under storage names."""

    manifest: dict
    tensors: dict

    def task_variants(self) -> list:
        seen = []
        for name in self.tensors:
            if name.startswith("task/"):
                variant = name.split("/", 2)[1]
                if variant not in seen:
                    seen.append(variant)
        return seen


@dataclass
class ModelBundle:
    """A loaded model: frozen stacks plus the active task's trainable set.

    `params` holds exactly the tensors resident for (task, modality);
    `source` (a path or a Checkpoint) retains access to everything else for
    task switching and saving.
    """

    profile: ModelProfile
    task: str
    modality: str
    params: ParamSet
    manifest: dict
    source: Union[str, Checkpoint, None]
    backbone: TextBackbone
    adapter: LoraAdapter
    vision: Optional[VisionTower] = None
    audio: Optional[AudioTower] = None
    vision_projector: Optional[VisionProjector] = None
    audio_projector: Optional[AudioProjector] = None

    def resident_names(self) -> list:
        return self.params.names()

    def loaded_modalities(self) -> set:
        out = set()
        if self.vision is not None:
            out.add("vision")
        if self.audio is not None:
            out.add("audio")
        return out

    def copy(self) -> "ModelBundle":
        ps = self.params.copy()
        return replace(
            self,
            params=ps,
            manifest=dict(self.manifest),
            backbone=TextBackbone(self.profile, ps),
            vision=None if self.vision is None else VisionTower(self.profile, ps),
            audio=None if self.audio is None else AudioTower(self.profile, ps),
            vision_projector=None if self.vision_projector is None else VisionProjector(self.profile, ps),
            audio_projector=None if self.audio_projector is None else AudioProjector(self.profile, ps),
        )


def require_modality(bundle: ModelBundle, modality: str) -> None:
    if modality == "vision" and bundle.vision is None:
        raise ModalityUnavailableError(
            f"bundle loaded with modality={bundle.modality!r} has no vision tower"
        )
    if modality == "audio" and bundle.audio is None:
        raise ModalityUnavailableError(
            f"bundle loaded with modality={bundle.modality!r} has no audio tower"
        )


# ----------------------------------------------------------------- assembly

def build_model(profile: ModelProfile, seed: int) -> Checkpoint:
    """Construct a complete model image: shared frozen weights plus all four
    task-variant sets, ready to save or load."""
    vision, audio, backbone = build_towers(profile, seed)
    ps = vision.params
    add_frozen_projector_params(ps, profile, seed)

    tensors = {}
    for name in ps.names():
        tensors[f"shared/{name}"] = ps[name].value.astype(np.float32)

    task_seeds = {}
    for i, task in enumerate(TASK_VARIANTS):
        task_seed = seed + 1000 * (i + 1)
        task_seeds[task] = task_seed
        task_ps = ParamSet()
        add_lora_params(task_ps, profile, task_seed)
        for name in task_ps.names():
            tensors[f"task/{task}/{name}"] = task_ps[name].value.astype(np.float32)
        for name, value in init_trainable(profile, task_seed).items():
            tensors[f"task/{task}/{name}"] = value.astype(np.float32)

    manifest = {
        "format_version": FORMAT_VERSION,
        "profile": profile.to_dict(),
        "tasks": list(TASK_VARIANTS),
        "build_seed": seed,
        "task_seeds": task_seeds,
        "k_set": list(profile.k_set),
        "scope_used": None,
        "creation_step": 0,
    }
    return Checkpoint(manifest=manifest, tensors=tensors)


def _resident(runtime_name: str, modality: str) -> bool:
    return any(runtime_name.startswith(p) for p in RESIDENT_PREFIXES[modality])


def _storage_name(runtime_name: str, task: str) -> str:
    if any(runtime_name.startswith(p) for p in TASK_PREFIXES):
        return f"task/{task}/{runtime_name}"
    return f"shared/{runtime_name}"


def bundle_from_checkpoint(ckpt: Checkpoint, task: str, modality: str,
                           source: Union[str, Checkpoint, None] = None) -> ModelBundle:
    if task not in TASK_VARIANTS:
        raise ConfigurationError(f"unknown task variant {task!r}")
    if modality not in MODALITIES:
        raise ConfigurationError(f"unknown modality {modality!r}")
    if task not in ckpt.task_variants():
        raise VariantNotFoundError(f"checkpoint has no task variant {task!r}")

    profile = ModelProfile.from_dict(ckpt.manifest["profile"])
    ps = ParamSet()
    for storage_name, value in ckpt.tensors.items():
        if storage_name.startswith("shared/"):
            runtime = storage_name[len("shared/"):]
        elif storage_name.startswith(f"task/{task}/"):
            runtime = storage_name[len(f"task/{task}/"):]
        else:
            continue
        if _resident(runtime, modality):
            ps.add(runtime, value.astype(np.float64))

    has_vision = modality in ("vision", "omni")
    has_audio = modality in ("audio", "omni")
    return ModelBundle(
        profile=profile,
        task=task,
        modality=modality,
        params=ps,
        manifest=dict(ckpt.manifest),
        source=source if source is not None else ckpt,
        backbone=TextBackbone(profile, ps),
        adapter=LoraAdapter("lora", profile.lora_rank, profile.lora_alpha),
        vision=VisionTower(profile, ps) if has_vision else None,
        audio=AudioTower(profile, ps) if has_audio else None,
        vision_projector=VisionProjector(profile, ps) if has_vision else None,
        audio_projector=AudioProjector(profile, ps) if has_audio else None,
    )


# -------------------------------------------------------------- file format

def _write_checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    manifest_bytes = json.dumps(ckpt.manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    names = sorted(ckpt.tensors)

    index_size = 0
    for name in names:
        arr = ckpt.tensors[name]
        index_size += 2 + len(name.encode()) + 1 + 8 * arr.ndim + 8

    header_size = 4 + 2 + 4 + len(manifest_bytes) + 4 + index_size
    payload_start = (header_size + 63) // 64 * 64

    offsets = {}
    cursor = payload_start
    for name in names:
        offsets[name] = cursor
        cursor += ckpt.tensors[name].nbytes

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(manifest_bytes)))
    buf.write(manifest_bytes)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = ckpt.tensors[name]
        enc = name.encode()
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(struct.pack("<Q", offsets[name]))
    buf.write(b"\x00" * (payload_start - header_size))
    for name in names:
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype=np.float32)
        buf.write(arr.astype("<f4", copy=False).tobytes())
    return buf.getvalue()


def save(ckpt: Checkpoint, path: str) -> None:
    with open(path, "wb") as f:
        f.write(_write_checkpoint_bytes(ckpt))


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise IntegrityError(f"truncated checkpoint while reading {what}")
    return data


def _read_header(f):
    if _read_exact(f, 4, "magic") != MAGIC:
        raise IntegrityError("bad magic; not a checkpoint file")
    (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
    if version != FORMAT_VERSION:
        raise IntegrityError(f"unsupported format version {version}")
    (mlen,) = struct.unpack("<I", _read_exact(f, 4, "manifest length"))
    try:
        manifest = json.loads(_read_exact(f, mlen, "manifest").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"manifest is not valid JSON: {e}") from e
    (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
    index = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
        name = _read_exact(f, nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
        dims = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "dims")) if rank else ()
        (offset,) = struct.unpack("<Q", _read_exact(f, 8, "offset"))
        index[name] = (tuple(int(d) for d in dims), int(offset))
    return manifest, index


def _read_tensor(f, file_size: int, name: str, dims: tuple, offset: int) -> np.ndarray:
    nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if dims else 4
    if offset + nbytes > file_size:
        raise IntegrityError(
            f"tensor {name!r} extends past end of file ({offset + nbytes} > {file_size})"
        )
    f.seek(offset)
    raw = _read_exact(f, nbytes, f"tensor {name!r}")
    return np.frombuffer(raw, dtype="<f4").reshape(dims).copy()


def read_checkpoint(path: str, names: Optional[list] = None) -> Checkpoint:
    """Read a checkpoint; with `names`, only those tensors are pulled from
    the payload (the index makes the file seekable)."""
    import os

    file_size = os.path.getsize(path)
    with open(path, "rb") as f:
        manifest, index = _read_header(f)
        wanted = list(index) if names is None else names
        tensors = {}
        for name in wanted:
            if name not in index:
                raise IntegrityError(f"tensor {name!r} missing from checkpoint index")
            dims, offset = index[name]
            tensors[name] = _read_tensor(f, file_size, name, dims, offset)
    return Checkpoint(manifest=manifest, tensors=tensors)


def checkpoint_index(path: str) -> tuple:
    with open(path, "rb") as f:
        return _read_header(f)


def load(path: str, task: str, modality: str) -> ModelBundle:
    """Instantiate a bundle with exactly the tensors (task, modality)
    requires; everything else stays on disk."""
    manifest, index = checkpoint_index(path)
    variants = sorted({n.split("/", 2)[1] for n in index if n.startswith("task/")})
    if task not in variants:
        raise VariantNotFoundError(
            f"checkpoint {path} has no task variant {task!r} (found {variants})"
        )

    needed = []
    for storage_name in index:
        if storage_name.startswith("shared/"):
            runtime = storage_name[len("shared/"):]
        elif storage_name.startswith(f"task/{task}/"):
            runtime = storage_name[len(f"task/{task}/"):]
        else:
            continue
        if _resident(runtime, modality):
            needed.append(storage_name)

    ckpt = read_checkpoint(path, names=sorted(needed))
    ckpt = Checkpoint(manifest=manifest, tensors=ckpt.tensors)
    return bundle_from_checkpoint(ckpt, task, modality, source=path)


def bundle_to_checkpoint(bundle: ModelBundle) -> Checkpoint:
    """Merge the bundle's (possibly trained) resident tensors back over its
    source image. Frozen tensors survive bit-exactly: float32 -> float64 ->
    float32 is the identity."""
    if isinstance(bundle.source, Checkpoint):
        tensors = dict(bundle.source.tensors)
    elif isinstance(bundle.source, str):
        tensors = dict(read_checkpoint(bundle.source).tensors)
    else:
        raise ConfigurationError("bundle has no source to merge non-resident tensors from")
    for runtime in bundle.params.names():
        storage = _storage_name(runtime, bundle.task)
        tensors[storage] = bundle.params[runtime].value.astype(np.float32)
    return Checkpoint(manifest=dict(bundle.manifest), tensors=tensors)


def save_bundle(bundle: ModelBundle, path: str) -> None:
    save(bundle_to_checkpoint(bundle), path)


def switch_task(bundle: ModelBundle, task: str) -> ModelBundle:
    """Swap adapter, projectors, and delimiter embeddings for another stored
    variant. Shared tensors keep their storage: the new bundle's frozen
    arrays are the same objects."""
    if task not in TASK_VARIANTS:
        raise ConfigurationError(f"unknown task variant {task!r}")

    if isinstance(bundle.source, Checkpoint):
        source_ckpt = bundle.source
        if task not in source_ckpt.task_variants():
            raise VariantNotFoundError(f"source checkpoint has no task variant {task!r}")
        task_tensors = {
            n: v for n, v in source_ckpt.tensors.items() if n.startswith(f"task/{task}/")
        }
    else:
        manifest, index = checkpoint_index(bundle.source)
        names = [n for n in index if n.startswith(f"task/{task}/")]
        if not names:
            raise VariantNotFoundError(
                f"checkpoint {bundle.source} has no task variant {task!r}"
            )
        task_tensors = read_checkpoint(bundle.source, names=sorted(names)).tensors

    ps = ParamSet()
    for runtime in bundle.params.names():
        if any(runtime.startswith(p) for p in TASK_PREFIXES):
            continue
        ps.add(runtime, bundle.params[runtime].value)  # same array, same storage
    prefix = f"task/{task}/"
    for storage_name in sorted(task_tensors):
        runtime = storage_name[len(prefix):]
        if _resident(runtime, bundle.modality):
            ps.add(runtime, task_tensors[storage_name].astype(np.float64))

    profile = bundle.profile
    has_vision = bundle.vision is not None
    has_audio = bundle.audio is not None
    return ModelBundle(
        profile=profile,
        task=task,
        modality=bundle.modality,
        params=ps,
        manifest=dict(bundle.manifest),
        source=bundle.source,
        backbone=TextBackbone(profile, ps),
        adapter=LoraAdapter("lora", profile.lora_rank, profile.lora_alpha),
        vision=VisionTower(profile, ps) if has_vision else None,
        audio=AudioTower(profile, ps) if has_audio else None,
        vision_projector=VisionProjector(profile, ps) if has_vision else None,
        audio_projector=AudioProjector(profile, ps) if has_audio else None,
    )


# ---------------------------------------------------------- media tensor IO

def write_mtf(path: str, array: np.ndarray) -> None:
    """Media Tensor File: magic, u8 rank, u32 dims, float32 payload."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(MTF_MAGIC)
        f.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            f.write(struct.pack("<I", dim))
        f.write(arr.astype("<f4", copy=False).tobytes())


def read_mtf(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MTF_MAGIC:
            raise IntegrityError(f"{path} is not a media tensor file")
        (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
        dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims")) if rank else ()
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        raw = _read_exact(f, 4 * n, "payload")
        if f.read(1):
            raise IntegrityError(f"{path} has trailing bytes after payload")
    return np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float64)

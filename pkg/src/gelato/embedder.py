"""End-to-end embedding: serialize, materialize, frozen backbone with the
task adapter, last-token pooling, L2 normalization. Truncation re-normalizes
a prefix of the pre-normalization pooled state; cosine results are identical
either way, but keeping the raw state makes that explicit and testable."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import DimensionError, GelatoError, ModalityUnavailableError, ZeroNormError
from .numerics import Var, last_row, l2_normalize
from .profiles import NORM_FLOOR
from .registry import ModelBundle
from .sequencer import InputItem, collect_media, item_modalities, materialize, serialize
from .towers import run_backbone


@dataclass
class Embedding:
    full: np.ndarray            # unit norm
    raw_last_state: np.ndarray  # pre-normalization, kept for truncation


def embed_raw(item: InputItem, bundle: ModelBundle, leaves: dict | None = None) -> Var:
    """Pooled pre-normalization state as a graph node; the differentiable
    core shared by inference and training."""
    needed = item_modalities(item)
    missing = needed - bundle.loaded_modalities()
    if missing:
        raise ModalityUnavailableError(
            f"item needs {sorted(missing)} but bundle was loaded with "
            f"modality={bundle.modality!r}"
        )
    seq = serialize(item, bundle.profile)
    media = collect_media(item)
    states = materialize(seq, bundle, media, leaves)
    out = run_backbone(bundle.backbone, states, bundle.adapter, leaves)
    return last_row(out)


def embed(item: InputItem, bundle: ModelBundle) -> Embedding:
    raw = embed_raw(item, bundle)
    full = l2_normalize(raw)
    return Embedding(full=full.value, raw_last_state=raw.value)


def truncate(e: Embedding, k: int) -> np.ndarray:
    """First k dimensions of the pooled state, re-normalized."""
    d = e.raw_last_state.shape[0]
    if not 1 <= k <= d:
        raise DimensionError(f"truncation dim {k} out of range [1, {d}]")
    prefix = e.raw_last_state[:k]
    n = float(np.linalg.norm(prefix))
    if n <= NORM_FLOOR:
        raise ZeroNormError(f"{k}-prefix has norm {n:.3e}")
    return prefix / n


def embed_batch(items, bundle: ModelBundle, parallel: bool = False) -> list:
    """Embed items in order; results are identical to sequential embed()
    calls. With parallel=True items fan out across threads (each forward
    pass is an independent graph)."""
    items = list(items)
    if parallel:
        with ThreadPoolExecutor() as pool:
            futures = [pool.submit(embed, item, bundle) for item in items]
        results = []
        for i, fut in enumerate(futures):
            try:
                results.append(fut.result())
            except GelatoError as e:
                raise type(e)(f"item {i}: {e}") from e
        return results
    results = []
    for i, item in enumerate(items):
        try:
            results.append(embed(item, bundle))
        except GelatoError as e:
            raise type(e)(f"item {i}: {e}") from e
    return results


# ------------------------------------------------------------ dump formats

def write_embeddings_binary(path: str, ids, vectors) -> None:
    """Per item: u16 id length, id bytes, u32 dimension, float32 values."""
    with open(path, "wb") as f:
        for item_id, vec in zip(ids, vectors):
            enc = str(item_id).encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            arr = np.asarray(vec, dtype="<f4")
            f.write(struct.pack("<I", arr.shape[0]))
            f.write(arr.tobytes())


def write_embeddings_text(path: str, ids, vectors) -> None:
    """Debug format: one vector per line, id first, values space-separated."""
    with open(path, "w") as f:
        for item_id, vec in zip(ids, vectors):
            values = " ".join(repr(float(x)) for x in np.asarray(vec, dtype=np.float32))
            f.write(f"{item_id} {values}\n")

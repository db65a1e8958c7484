"""Dataset plumbing: pair manifests (one JSON record per line, media by
path to media tensor files) and a synthetic cross-modal dataset of noisy
linear views of shared latents, used for convergence checks and demos."""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import ConfigurationError, StructureError
from .profiles import ModelProfile
from .registry import read_mtf, write_mtf
from .sequencer import (
    InputItem,
    audio_item,
    image_item,
    mixed_item,
    text_item,
    video_item,
)
from .trainer import DataSource, MixtureSpec


# ----------------------------------------------------------- manifest files

def item_from_record(rec: dict, base_dir: str) -> InputItem:
    kind = rec.get("kind")
    if kind == "text":
        return text_item(rec["text"])
    if kind == "image":
        return image_item(read_mtf(os.path.join(base_dir, rec["path"])))
    if kind == "audio":
        return audio_item(read_mtf(os.path.join(base_dir, rec["path"])))
    if kind == "video":
        frames = [read_mtf(os.path.join(base_dir, p)) for p in rec["frames"]]
        audio = None
        if rec.get("audio"):
            audio = read_mtf(os.path.join(base_dir, rec["audio"]))
        return video_item(frames, audio)
    if kind == "mixed":
        return mixed_item([item_from_record(r, base_dir) for r in rec["items"]])
    raise StructureError(f"manifest record has unknown kind {kind!r}")


def load_pair_manifest(path: str) -> list:
    """Training manifest: each line {"left": <item>, "right": <item>}."""
    base = os.path.dirname(os.path.abspath(path))
    pairs = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise StructureError(f"{path}:{lineno}: invalid JSON: {e}") from e
            if "left" not in rec or "right" not in rec:
                raise StructureError(f"{path}:{lineno}: record needs left and right items")
            pairs.append((item_from_record(rec["left"], base),
                          item_from_record(rec["right"], base)))
    if not pairs:
        raise ConfigurationError(f"manifest {path} holds no pairs")
    return pairs


def load_item_manifest(path: str) -> list:
    """Embedding/eval manifest: each line {"id": ..., <item fields>}."""
    base = os.path.dirname(os.path.abspath(path))
    items = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "id" not in rec:
                raise StructureError(f"{path}:{lineno}: record needs an id")
            items.append((str(rec["id"]), item_from_record(rec, base)))
    if not items:
        raise ConfigurationError(f"manifest {path} holds no items")
    return items


def mixture_from_config(entries: list) -> MixtureSpec:
    """entries: [(manifest path, weight), ...]"""
    sources = []
    for path, weight in entries:
        name = os.path.splitext(os.path.basename(path))[0]
        sources.append((DataSource(name=name, pairs=load_pair_manifest(path)), weight))
    return MixtureSpec(sources)


# --------------------------------------------------------- synthetic pairs

def make_aligned_pairs(profile: ModelProfile, n_pairs: int, seed: int,
                       latent_dim: int = 12, noise: float = 0.05,
                       image_side: int = 8, audio_len: int = 40,
                       view_seed: int | None = None) -> list:
    """Image/audio pairs that are noisy linear views of shared latents:
    alignable by projectors alone, which is exactly what the convergence
    checks need.

    The two fixed view matrices come from `view_seed` (default: `seed`);
    latents and noise come from `seed`. Train and held-out splits must share
    the view seed, otherwise the held-out pairs live under a different map
    and nothing learned can transfer.
    """
    view_rng = np.random.default_rng([seed if view_seed is None else view_seed, 41])
    rng = np.random.default_rng([seed, 42])
    c = profile.image_channels
    img_dim = image_side * image_side * c
    view_img = view_rng.normal(size=(img_dim, latent_dim)) / np.sqrt(latent_dim)
    view_aud = view_rng.normal(size=(audio_len, latent_dim)) / np.sqrt(latent_dim)
    pairs = []
    for _ in range(n_pairs):
        z = rng.normal(size=latent_dim)
        img = (view_img @ z + noise * rng.normal(size=img_dim)).reshape(image_side, image_side, c)
        aud = view_aud @ z + noise * rng.normal(size=audio_len)
        pairs.append((image_item(img), audio_item(aud)))
    return pairs


def write_aligned_dataset(out_dir: str, profile: ModelProfile, n_pairs: int,
                          seed: int, **kwargs) -> str:
    """Materialize make_aligned_pairs() as media tensor files plus a pair
    manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    pairs = make_aligned_pairs(profile, n_pairs, seed, **kwargs)
    manifest_path = os.path.join(out_dir, "pairs.jsonl")
    with open(manifest_path, "w") as f:
        for i, (left, right) in enumerate(pairs):
            img_name = f"img_{i:05d}.mtf"
            aud_name = f"aud_{i:05d}.mtf"
            write_mtf(os.path.join(out_dir, img_name), left.image)
            write_mtf(os.path.join(out_dir, aud_name), right.samples)
            rec = {
                "left": {"kind": "image", "path": img_name},
                "right": {"kind": "audio", "path": aud_name},
            }
            f.write(json.dumps(rec) + "\n")
    return manifest_path


def main(argv=None):
    """Generate a synthetic aligned dataset on disk (demo helper)."""
    import argparse

    from .profiles import get_profile

    ap = argparse.ArgumentParser(description=main.__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--pairs", type=int, default=512)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--profile", default="toy")
    ap.add_argument("--noise", type=float, default=0.05)
    args = ap.parse_args(argv)
    path = write_aligned_dataset(args.out, get_profile(args.profile), args.pairs, args.seed,
                                 noise=args.noise)
    print(path)


if __name__ == "__main__":
    main()

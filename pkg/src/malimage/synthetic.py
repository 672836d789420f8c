"""Synthetic desk-scale corpora for experiments and verification.

Real malware corpora cannot ship with the package, so experiments run on
generated binaries whose byte patterns form family-specific textures in
image space. Each file's bytes are laid out for the width the size lookup
will assign, with the texture a function of normalized (row, column)
coordinates -- the pattern survives reshaping and resizing regardless of the
drawn file size.

Families (cycled with rising frequency beyond four): vertical stripes,
horizontal stripes, checkerboard, diagonal gradient.

Embeddings for the transfer head come from a noisy class-mean model: family f
maps to the one-hot vector e_f scaled to unit length, plus isotropic Gaussian
noise.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DataError
from .imaging import width_for_size
from .numerics import make_rng
from .transfer import EmbeddingSet


def _texture(family: int, uu: np.ndarray, vv: np.ndarray) -> np.ndarray:
    """Base pattern in [0, 1] over normalized coordinates."""
    freq = 4.0 + 2.0 * (family // 4)
    kind = family % 4
    if kind == 0:
        base = np.sign(np.sin(2 * np.pi * freq * vv))
    elif kind == 1:
        base = np.sign(np.sin(2 * np.pi * freq * uu))
    elif kind == 2:
        base = np.sign(np.sin(2 * np.pi * freq * uu)
                       * np.sin(2 * np.pi * freq * vv))
    else:
        return (uu + vv) / 2.0
    return 0.5 + 0.5 * base


def texture_bytes(family: int, size: int, rng, noise: int = 32) -> bytes:
    """Byte payload whose image at the table-assigned width shows the texture."""
    if size < 1:
        raise DataError("size must be >= 1")
    width = width_for_size(size)
    height = -(-size // width)
    uu = (np.arange(height, dtype=np.float64)[:, None] + 0.5) / height
    vv = (np.arange(width, dtype=np.float64)[None, :] + 0.5) / width
    base = np.broadcast_to(_texture(family, uu, vv), (height, width))
    grid = base * 191.0 + 32.0
    if noise:
        grid = grid + rng.integers(-noise, noise + 1, size=grid.shape)
    data = np.clip(np.rint(grid), 0, 255).astype(np.uint8)
    return data.reshape(-1)[:size].tobytes()


def generate_corpus(out_dir, families: int = 4, per_family: int = 200,
                    seed: int = 7, min_kb: float = 6.0, max_kb: float = 48.0,
                    noise: int = 32):
    """Write family subdirectories of binaries plus a manifest.csv.

    Returns (manifest_path, entries). File sizes are drawn uniformly from
    [min_kb, max_kb] kilobytes, so samples cross several width brackets.
    """
    rng = make_rng(seed)
    out_dir = str(out_dir)
    entries = []
    for fam in range(families):
        fam_dir = os.path.join(out_dir, f"family{fam}")
        os.makedirs(fam_dir, exist_ok=True)
        for i in range(per_family):
            size = int(rng.integers(int(min_kb * 1024), int(max_kb * 1024) + 1))
            payload = texture_bytes(fam, size, rng, noise=noise)
            path = os.path.join(fam_dir, f"sample{i:04d}.bin")
            with open(path, "wb") as fh:
                fh.write(payload)
            entries.append((path, f"family{fam}"))
    manifest_path = os.path.join(out_dir, "manifest.csv")
    from .corpus import write_manifest
    write_manifest(manifest_path, entries)
    return manifest_path, entries


def generate_embeddings(entries, families: int, dim: int = 16,
                        sigma: float = 0.2, seed: int = 7) -> EmbeddingSet:
    """Noisy class-mean embeddings keyed by manifest path."""
    if dim < families:
        raise DataError(f"dim={dim} cannot separate {families} class means")
    label_names = sorted({lab for _, lab in entries})
    means = np.zeros((len(label_names), dim))
    for i in range(len(label_names)):
        means[i, i] = 1.0
    rng = make_rng(seed)
    ids, vectors = [], []
    for path, label in entries:
        mean = means[label_names.index(label)]
        vectors.append(mean + rng.normal(0.0, sigma, size=dim))
    ids = [path for path, _ in entries]
    return EmbeddingSet(sample_ids=ids,
                        vectors=np.array(vectors, dtype=np.float32),
                        backbone_tag=f"synthetic-classmean-d{dim}-s{sigma}")


BRACKET_SIZES_KB = [2, 10, 25, 45, 80, 150, 300, 700, 1500, 2500]


def generate_bracket_samples(out_dir, seed: int = 11):
    """One noise-free textured binary per size bracket (plus the 10 kb
    boundary), alternating between two labels. Returns manifest entries."""
    rng = make_rng(seed)
    out_dir = str(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, kb in enumerate(BRACKET_SIZES_KB):
        size = kb * 1024
        payload = texture_bytes(i % 4, size, rng, noise=0)
        path = os.path.join(out_dir, f"bracket_{kb:04d}kb.bin")
        with open(path, "wb") as fh:
            fh.write(payload)
        entries.append((path, f"group{i % 2}"))
    return entries

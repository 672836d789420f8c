"""Local surrogate explanations for single predictions.

Flow: segment the image into super pixels (SLIC), sample binary
presence/absence vectors over the segments, run the classifier on the masked
images, fit a proximity-weighted sparse ridge regression of the target-class
probability on the binary vectors, and render the signed segment weights as
an overlay.

SLIC notes: the gray intensity is scaled to [0, 100] (a lightness-like range)
so the conventional compactness=10 balances color against space; the distance
is D^2 = dc^2 + (compactness/S)^2 * ds^2 with S = sqrt(h*w/K). After the
iterations each label's largest connected component keeps its identity and
every other component is merged into its largest neighboring segment, so all
returned segments are 4-connected.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ShapeMismatch
from .numerics import make_rng

KERNEL_WIDTH = 0.25


@dataclass
class Segmentation:
    labels: np.ndarray       # (m, m) int32
    n_segments: int


@dataclass
class Explanation:
    target_class: int
    intercept: float
    weights: np.ndarray      # (n_segments,) signed
    used_samples: int
    local_fit_r2: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"target_class": self.target_class,
                "intercept": self.intercept,
                "weights": [float(w) for w in self.weights],
                "r2": self.local_fit_r2,
                "used_samples": self.used_samples,
                "degenerate": self.degenerate}


def _init_centers(h, w, k):
    ny = max(1, round(np.sqrt(k * h / w)))
    nx = -(-k // ny)
    centers = []
    for i in range(ny):
        for j in range(nx):
            centers.append(((i + 0.5) * h / ny, (j + 0.5) * w / nx))
    return np.array(centers)


def slic_segment(img: np.ndarray, k: int = 200, compactness: float = 10.0,
                 iters: int = 10) -> Segmentation:
    if img.ndim != 2:
        raise ShapeMismatch(f"expected 2-D image, got shape {img.shape}")
    h, w = img.shape
    if not 1 <= k <= h * w:
        raise DataError(f"k must be in [1, {h * w}]")
    if k == 1:
        return Segmentation(labels=np.zeros((h, w), dtype=np.int32), n_segments=1)

    intensity = img.astype(np.float64) * 100.0
    step = np.sqrt(h * w / k)
    ratio = (compactness / step) ** 2
    centers_pos = _init_centers(h, w, k)
    n_c = len(centers_pos)
    centers_val = np.array([
        intensity[min(int(cy), h - 1), min(int(cx), w - 1)]
        for cy, cx in centers_pos])

    ii, jj = np.mgrid[0:h, 0:w]
    labels = np.zeros((h, w), dtype=np.int32)
    for it in range(iters):
        dist = np.full((h, w), np.inf)
        for ci in range(n_c):
            cy, cx = centers_pos[ci]
            y0, y1 = max(int(cy - 2 * step), 0), min(int(cy + 2 * step) + 1, h)
            x0, x1 = max(int(cx - 2 * step), 0), min(int(cx + 2 * step) + 1, w)
            if y0 >= y1 or x0 >= x1:
                continue
            dc2 = (intensity[y0:y1, x0:x1] - centers_val[ci]) ** 2
            ds2 = ((ii[y0:y1, x0:x1] - cy) ** 2 + (jj[y0:y1, x0:x1] - cx) ** 2)
            d = dc2 + ratio * ds2
            region = dist[y0:y1, x0:x1]
            better = d < region
            region[better] = d[better]
            labels[y0:y1, x0:x1][better] = ci
        # pixels outside every search window fall back to the nearest center
        if np.isinf(dist).any():
            miss = np.isinf(dist)
            my, mx = np.nonzero(miss)
            d_all = ((my[:, None] - centers_pos[:, 0]) ** 2
                     + (mx[:, None] - centers_pos[:, 1]) ** 2)
            labels[miss] = np.argmin(d_all, axis=1)
        flat = labels.ravel()
        counts = np.bincount(flat, minlength=n_c)
        sum_i = np.bincount(flat, weights=ii.ravel(), minlength=n_c)
        sum_j = np.bincount(flat, weights=jj.ravel(), minlength=n_c)
        sum_v = np.bincount(flat, weights=intensity.ravel(), minlength=n_c)
        occupied = counts > 0
        centers_pos[occupied, 0] = sum_i[occupied] / counts[occupied]
        centers_pos[occupied, 1] = sum_j[occupied] / counts[occupied]
        centers_val[occupied] = sum_v[occupied] / counts[occupied]
    return _enforce_connectivity(labels)


def _connected_components(labels):
    h, w = labels.shape
    comp = np.full((h, w), -1, dtype=np.int32)
    comp_label = []
    comp_size = []
    next_id = 0
    for si in range(h):
        for sj in range(w):
            if comp[si, sj] >= 0:
                continue
            lab = labels[si, sj]
            queue = deque([(si, sj)])
            comp[si, sj] = next_id
            size = 0
            while queue:
                ci, cj = queue.popleft()
                size += 1
                for ni, nj in ((ci - 1, cj), (ci + 1, cj), (ci, cj - 1), (ci, cj + 1)):
                    if 0 <= ni < h and 0 <= nj < w and comp[ni, nj] < 0 \
                            and labels[ni, nj] == lab:
                        comp[ni, nj] = next_id
                        queue.append((ni, nj))
            comp_label.append(lab)
            comp_size.append(size)
            next_id += 1
    return comp, np.array(comp_label), np.array(comp_size)


def _enforce_connectivity(labels) -> Segmentation:
    """Keep each label's largest component; merge orphans into the largest
    adjacent segment. Returns densely renumbered 4-connected segments."""
    comp, comp_label, comp_size = _connected_components(labels)
    n_comp = len(comp_size)
    keep = np.zeros(n_comp, dtype=bool)
    for lab in np.unique(comp_label):
        members = np.nonzero(comp_label == lab)[0]
        largest = members[np.argmax(comp_size[members])]
        keep[largest] = True

    h, w = labels.shape
    adjacency = [set() for _ in range(n_comp)]
    for i in range(h):
        for j in range(w):
            a = comp[i, j]
            if i + 1 < h and comp[i + 1, j] != a:
                adjacency[a].add(comp[i + 1, j])
                adjacency[comp[i + 1, j]].add(a)
            if j + 1 < w and comp[i, j + 1] != a:
                adjacency[a].add(comp[i, j + 1])
                adjacency[comp[i, j + 1]].add(a)

    # union-find with kept components as roots
    parent = np.arange(n_comp)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    merged_size = comp_size.astype(np.int64).copy()
    pending = [c for c in range(n_comp) if not keep[c]]
    while pending:
        progressed = False
        remaining = []
        for c in pending:
            if find(c) != c:
                continue
            neighbor_roots = {find(nb) for nb in adjacency[c]} - {c}
            roots = [r for r in neighbor_roots if keep[r]]
            if not roots:
                remaining.append(c)
                continue
            target = max(roots, key=lambda r: (merged_size[r], -r))
            parent[c] = target
            merged_size[target] += merged_size[c]
            progressed = True
        if not progressed and remaining:
            # orphans surrounded by orphans: attach to any neighbor
            c = remaining[0]
            nb = min(adjacency[c])
            parent[c] = find(nb)
            merged_size[find(nb)] += merged_size[c]
        pending = [c for c in remaining if find(c) == c and not keep[find(c)]]

    roots = sorted({find(c) for c in range(n_comp)})
    renumber = {r: i for i, r in enumerate(roots)}
    flat = np.array([renumber[find(c)] for c in range(n_comp)], dtype=np.int32)
    return Segmentation(labels=flat[comp], n_segments=len(roots))


def sample_perturbations(n_segments: int, n_samples: int = 1000, seed: int = 0):
    """Binary presence vectors plus proximity weights.

    Sample 0 is always the all-ones vector (the unperturbed image); the rest
    are uniform over {0,1}^K. Proximity = exp(-D^2 / sigma^2) with cosine
    distance to the all-ones vector and sigma = 0.25.
    """
    if n_samples < 1:
        raise DataError("n_samples must be >= 1")
    rng = make_rng(seed)
    z = rng.integers(0, 2, size=(n_samples, n_segments), dtype=np.uint8)
    z[0] = 1
    ones = np.sum(z, axis=1)
    with np.errstate(invalid="ignore"):
        cos = np.where(ones > 0, np.sqrt(ones / n_segments), 0.0)
    dist = 1.0 - cos
    proximity = np.exp(-dist ** 2 / KERNEL_WIDTH ** 2)
    return z, proximity


def segment_means(img, seg: Segmentation):
    flat = seg.labels.ravel()
    counts = np.bincount(flat, minlength=seg.n_segments)
    sums = np.bincount(flat, weights=np.asarray(img, dtype=np.float64).ravel(),
                       minlength=seg.n_segments)
    return sums / np.maximum(counts, 1)


def mask_apply(img, seg: Segmentation, z, fill: str = "segment_mean",
               fills=None):
    """Replace absent segments (z=0) with their mean intensity (or zero)."""
    if img.shape != seg.labels.shape:
        raise ShapeMismatch("image and segmentation shapes differ")
    if len(z) != seg.n_segments:
        raise ShapeMismatch(f"z has {len(z)} entries for {seg.n_segments} segments")
    if fills is None:
        fills = (segment_means(img, seg) if fill == "segment_mean"
                 else np.zeros(seg.n_segments))
    present = np.asarray(z, dtype=bool)[seg.labels]
    return np.where(present, img, fills[seg.labels].astype(img.dtype))


def fit_surrogate(z, proximity, probs, target_class: int, sparsity: int = 10,
                  ridge: float = 1e-3) -> Explanation:
    """Proximity-weighted ridge regression of the target probability on z.

    Weights are normalized to unit mass (duplicated samples change nothing);
    the intercept is unpenalized. Sparsity keeps the top coefficients by
    magnitude and refits on that subset.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(probs, dtype=np.float64)
    if y.ndim == 2:
        y = y[:, target_class]
    n, k = z.shape
    wts = np.asarray(proximity, dtype=np.float64)
    wts = wts / wts.sum()

    ybar = wts @ y
    yc = y - ybar
    ss_tot = float(wts @ (yc ** 2))
    if ss_tot < 1e-24:
        return Explanation(target_class=target_class, intercept=float(ybar),
                           weights=np.zeros(k), used_samples=n,
                           local_fit_r2=0.0, degenerate=True)

    def ridge_solve(cols):
        zc = z[:, cols] - (wts @ z[:, cols])
        a = zc.T @ (zc * wts[:, None]) + ridge * np.eye(len(cols))
        b = zc.T @ (wts * yc)
        return np.linalg.solve(a, b)

    beta_full = ridge_solve(list(range(k)))
    weights = np.zeros(k)
    if sparsity < k:
        top = np.argsort(-np.abs(beta_full), kind="stable")[:sparsity]
        top = sorted(int(t) for t in top)
        weights[top] = ridge_solve(top)
    else:
        weights = beta_full

    zbar = wts @ z
    intercept = float(ybar - zbar @ weights)
    resid = y - (z @ weights + intercept)
    r2 = 1.0 - float(wts @ (resid ** 2)) / ss_tot
    return Explanation(target_class=target_class, intercept=intercept,
                       weights=weights, used_samples=n, local_fit_r2=r2)


def explain(predict_fn, img, top: int = 5, k: int = 200, n_samples: int = 1000,
            seed: int = 0, compactness: float = 10.0, iters: int = 10,
            sparsity: int = 10, fill: str = "segment_mean",
            batch_size: int = 64):
    """Explanations for the model's top predicted classes on one image.

    predict_fn maps a (n, m, m) image batch to an (n, c) probability matrix.
    Returns (segmentation, explanations ordered by predicted probability).
    """
    seg = slic_segment(img, k=k, compactness=compactness, iters=iters)
    z, proximity = sample_perturbations(seg.n_segments, n_samples, seed)
    fills = (segment_means(img, seg) if fill == "segment_mean"
             else np.zeros(seg.n_segments))
    probs_rows = []
    for lo in range(0, n_samples, batch_size):
        batch = np.stack([mask_apply(img, seg, zi, fill, fills=fills)
                          for zi in z[lo:lo + batch_size]])
        probs_rows.append(np.asarray(predict_fn(batch)))
    probs = np.vstack(probs_rows)

    base = probs[0]
    order = np.argsort(-base, kind="stable")[:min(top, len(base))]
    explanations = [fit_surrogate(z, proximity, probs, int(c), sparsity=sparsity)
                    for c in order]
    return seg, explanations


def explanation_write(path, explanations, seed: int, params: dict) -> None:
    payload = {"seed": seed, "params": params,
               "explanations": [e.to_dict() for e in explanations]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def render_overlay(img, seg: Segmentation, explanation: Explanation,
                   out_path, tint_alpha: float = 0.5) -> None:
    """Binary PPM: red segment boundaries; green tint on positive-weight
    segments, red tint on negative, opacity proportional to |weight|."""
    base = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255), 0, 255)
    rgb = np.repeat(base[:, :, None], 3, axis=2)

    max_w = float(np.max(np.abs(explanation.weights))) if explanation.weights.size else 0.0
    if max_w > 0:
        for s in range(seg.n_segments):
            wgt = explanation.weights[s]
            if wgt == 0.0:
                continue
            alpha = tint_alpha * abs(wgt) / max_w
            color = np.array([0.0, 255.0, 0.0]) if wgt > 0 else np.array([255.0, 0.0, 0.0])
            mask = seg.labels == s
            rgb[mask] = (1.0 - alpha) * rgb[mask] + alpha * color

    boundary = np.zeros(seg.labels.shape, dtype=bool)
    boundary[:-1, :] |= seg.labels[:-1, :] != seg.labels[1:, :]
    boundary[:, :-1] |= seg.labels[:, :-1] != seg.labels[:, 1:]
    rgb[boundary] = [255.0, 0.0, 0.0]

    data = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    h, w = seg.labels.shape
    with open(out_path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())

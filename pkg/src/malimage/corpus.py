"""Labeled corpora: manifest ingestion, image stores, and the train/val/test split.

A manifest is a CSV with header ``path,label``. Sample ids are the manifest
path strings (unique by construction). Label indices are assigned by sorting
label names lexicographically so they are stable across runs.

The split is stratified per class with a seeded PCG64 generator; counts use
largest-remainder rounding (ties favor train, then val) so every bucket stays
within one sample of its exact share. The recorded split JSON, not the PRNG,
is the source of truth for reproducing an experiment.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import imaging
from .errors import DataError, DuplicatePath, EmptyCorpus, SingleClass


@dataclass
class Corpus:
    label_names: list[str]
    samples: list[tuple[str, int]]          # (sample_id, label_index)
    images: dict[str, np.ndarray]           # sample_id -> (side, side) float32
    side: int
    skipped: list[tuple[str, str]] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    def label_of(self, sample_id: str) -> int:
        if not hasattr(self, "_label_map"):
            self._label_map = dict(self.samples)
        return self._label_map[sample_id]

    def arrays(self, ids) -> tuple[np.ndarray, np.ndarray]:
        """Stack images (n, side, side) float64 and labels (n,) for given ids."""
        x = np.stack([self.images[i] for i in ids]).astype(np.float64)
        y = np.array([self.label_of(i) for i in ids], dtype=np.intp)
        return x, y


@dataclass
class SplitAssignment:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    seed: int
    ratios: tuple[float, float, float]

    def subset(self, name: str) -> list[str]:
        return {"train": self.train_ids, "val": self.val_ids,
                "test": self.test_ids}[name]


def read_manifest(path) -> list[tuple[str, str]]:
    """Read a ``path,label`` CSV; paths must be unique."""
    entries = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["path", "label"]:
            raise DataError(f"{path}: manifest must start with header 'path,label'")
        for row in reader:
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 2:
                raise DataError(f"{path}: malformed manifest row {row!r}")
            p, label = row[0].strip(), row[1].strip()
            if p in seen:
                raise DuplicatePath(f"duplicate manifest path: {p}")
            seen.add(p)
            entries.append((p, label))
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label"])
        writer.writerows(entries)


def filter_min_size(entries, min_kb: float) -> list[tuple[str, str]]:
    """Drop entries whose file is strictly under min_kb kilobytes."""
    if min_kb < 0:
        raise DataError("min_kb must be >= 0")
    threshold = min_kb * 1024
    return [(p, lab) for p, lab in entries if os.path.getsize(p) >= threshold]


def ingest(entries, image_side: int, threads: int = 1) -> Corpus:
    """Run every manifest file through the imaging pipeline.

    Unreadable files are skipped and reported in ``corpus.skipped``; an empty
    result or a single-label corpus is an error. With threads > 1 files are
    converted in parallel; record order stays manifest order either way.
    """
    seen = set()
    for p, _ in entries:
        if p in seen:
            raise DuplicatePath(f"duplicate manifest path: {p}")
        seen.add(p)

    def load_one(entry):
        path, label = entry
        try:
            return path, label, imaging.image_from_file(path, image_side), None
        except OSError as exc:
            return path, label, None, str(exc)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(load_one, entries))
    else:
        results = [load_one(e) for e in entries]

    labels_present = sorted({lab for _, lab in entries})
    samples: list[tuple[str, int]] = []
    images: dict[str, np.ndarray] = {}
    skipped: list[tuple[str, str]] = []
    for path, label, img, err in results:
        if err is not None:
            skipped.append((path, err))
            continue
        sample_id = str(path)
        samples.append((sample_id, labels_present.index(label)))
        images[sample_id] = img

    if not samples:
        raise EmptyCorpus("no files could be ingested")
    used = sorted({idx for _, idx in samples})
    label_names = [labels_present[i] for i in used]
    remap = {old: new for new, old in enumerate(used)}
    samples = [(sid, remap[idx]) for sid, idx in samples]
    if len(label_names) < 2:
        raise SingleClass("classification corpus needs at least 2 labels")
    return Corpus(label_names=label_names, samples=samples, images=images,
                  side=image_side, skipped=skipped)


def save_corpus(corpus: Corpus, store_path) -> None:
    """Write the .mimg store plus a .labels.json sidecar."""
    records = [(sid, corpus.images[sid]) for sid, _ in corpus.samples]
    imaging.write_image_store(store_path, records)
    sidecar = labels_sidecar_path(store_path)
    payload = {
        "label_names": corpus.label_names,
        "samples": [{"id": sid, "label": corpus.label_names[idx]}
                    for sid, idx in corpus.samples],
        "side": corpus.side,
        "skipped": [{"path": p, "reason": r} for p, r in corpus.skipped],
    }
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_corpus(store_path) -> Corpus:
    records = imaging.read_image_store(store_path)
    with open(labels_sidecar_path(store_path), encoding="utf-8") as fh:
        payload = json.load(fh)
    label_names = payload["label_names"]
    by_label = {name: i for i, name in enumerate(label_names)}
    labels = {s["id"]: by_label[s["label"]] for s in payload["samples"]}
    samples = [(sid, labels[sid]) for sid, _ in records]
    images = dict(records)
    return Corpus(label_names=label_names, samples=samples, images=images,
                  side=payload["side"],
                  skipped=[(s["path"], s["reason"]) for s in payload["skipped"]])


def load_corpus_labels(store_path) -> Corpus:
    """Label table only (images left empty); enough for splitting."""
    with open(labels_sidecar_path(store_path), encoding="utf-8") as fh:
        payload = json.load(fh)
    label_names = payload["label_names"]
    by_label = {name: i for i, name in enumerate(label_names)}
    samples = [(s["id"], by_label[s["label"]]) for s in payload["samples"]]
    return Corpus(label_names=label_names, samples=samples, images={},
                  side=payload["side"],
                  skipped=[(s["path"], s["reason"]) for s in payload["skipped"]])


def labels_sidecar_path(store_path) -> str:
    return str(store_path) + ".labels.json"


def _bucket_counts(n: int, ratios) -> tuple[int, int, int]:
    # largest-remainder rounding keeps each bucket within 1 of its exact
    # share; remainder units go to train first on fractional ties
    exact = [r * n for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    leftover = n - sum(counts)
    order = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in range(leftover):
        counts[order[i]] += 1
    return counts[0], counts[1], counts[2]


def split(corpus: Corpus, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitAssignment:
    """Deterministic stratified partition of the corpus ids."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise DataError("ratios must be three nonnegative reals")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must sum to 1, got {sum(ratios)}")

    by_class: dict[int, list[str]] = {i: [] for i in range(corpus.n_classes)}
    for sid, idx in corpus.samples:
        by_class[idx].append(sid)
    for idx, ids in by_class.items():
        if not ids:
            raise DataError(f"class {corpus.label_names[idx]} has no samples")

    rng = np.random.default_rng(seed)
    train: list[str] = []
    val: list[str] = []
    test: list[str] = []
    for idx in range(corpus.n_classes):
        ids = list(by_class[idx])
        perm = rng.permutation(len(ids))
        shuffled = [ids[p] for p in perm]
        n_train, n_val, n_test = _bucket_counts(len(ids), ratios)
        train.extend(shuffled[:n_train])
        val.extend(shuffled[n_train:n_train + n_val])
        test.extend(shuffled[n_train + n_val:])
    return SplitAssignment(train_ids=train, val_ids=val, test_ids=test,
                           seed=seed, ratios=ratios)


def save_split(assignment: SplitAssignment, path) -> None:
    payload = {
        "seed": assignment.seed,
        "ratios": list(assignment.ratios),
        "train": assignment.train_ids,
        "val": assignment.val_ids,
        "test": assignment.test_ids,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def load_split(path) -> SplitAssignment:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return SplitAssignment(train_ids=payload["train"], val_ids=payload["val"],
                           test_ids=payload["test"], seed=payload["seed"],
                           ratios=tuple(payload["ratios"]))

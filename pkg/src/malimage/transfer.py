"""Transfer-learning linear head over externally computed embeddings.

The frozen backbone runs out of process: whatever network produced the
features, its per-sample output vectors arrive in a ``.memb`` file and only
the final dense+softmax layer is trained here. Embeddings are never mutated
by training.

``.memb`` layout: magic "MEMB" | version u8 | n u32 LE | d u32 LE |
backbone_tag (u16 length + UTF-8) | n records of (id: u16 length + UTF-8,
d x f32 LE).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .baselines import SoftmaxClassifier
from .errors import BadMagic, DimMismatch, MissingEmbedding, TruncatedFile

MEMB_MAGIC = b"MEMB"
MEMB_VERSION = 1


@dataclass
class EmbeddingSet:
    sample_ids: list[str]
    vectors: np.ndarray          # (n, d) float32
    backbone_tag: str = ""

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def rows_for(self, ids) -> np.ndarray:
        index = {sid: i for i, sid in enumerate(self.sample_ids)}
        missing = [sid for sid in ids if sid not in index]
        if missing:
            raise MissingEmbedding(missing)
        return self.vectors[[index[sid] for sid in ids]].astype(np.float64)


def save_embeddings(emb: EmbeddingSet, path) -> None:
    vectors = np.ascontiguousarray(emb.vectors, dtype=np.float32)
    n, d = vectors.shape
    if len(emb.sample_ids) != n:
        raise DimMismatch(f"{len(emb.sample_ids)} ids for {n} vectors")
    tag = emb.backbone_tag.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MEMB_MAGIC)
        fh.write(struct.pack("<BII", MEMB_VERSION, n, d))
        fh.write(struct.pack("<H", len(tag)))
        fh.write(tag)
        for sid, vec in zip(emb.sample_ids, vectors):
            ident = sid.encode("utf-8")
            fh.write(struct.pack("<H", len(ident)))
            fh.write(ident)
            fh.write(vec.astype("<f4").tobytes())


def load_embeddings(path) -> EmbeddingSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MEMB_MAGIC:
        raise BadMagic(f"{path}: bad magic at offset 0 (want MEMB)")
    if len(blob) < 13:
        raise TruncatedFile(f"{path}: header truncated at offset {len(blob)}")
    version, n, d = struct.unpack_from("<BII", blob, 4)
    if version != MEMB_VERSION:
        raise BadMagic(f"{path}: unsupported version {version} at offset 4")
    if d < 1:
        raise DimMismatch(f"{path}: embedding dimension {d} at offset 9")
    off = 13
    if off + 2 > len(blob):
        raise TruncatedFile(f"{path}: tag length truncated at offset {off}")
    (tag_len,) = struct.unpack_from("<H", blob, off)
    off += 2
    if off + tag_len > len(blob):
        raise TruncatedFile(f"{path}: tag truncated at offset {off}")
    tag = blob[off:off + tag_len].decode("utf-8")
    off += tag_len

    ids = []
    vectors = np.empty((n, d), dtype=np.float32)
    for i in range(n):
        if off + 2 > len(blob):
            raise TruncatedFile(f"{path}: record {i} truncated at offset {off}")
        (id_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        if off + id_len + 4 * d > len(blob):
            raise TruncatedFile(f"{path}: record {i} truncated at offset {off}")
        ids.append(blob[off:off + id_len].decode("utf-8"))
        off += id_len
        vectors[i] = np.frombuffer(blob, dtype="<f4", count=d, offset=off)
        off += 4 * d
    if len(set(ids)) != n:
        raise DimMismatch(f"{path}: duplicate sample ids")
    return EmbeddingSet(sample_ids=ids, vectors=vectors, backbone_tag=tag)


def train_head(emb: EmbeddingSet, corpus, assignment, epochs=25, lr=0.1,
               l2=1e-4, batch_size=32, seed=0):
    """Retrain the final layer on frozen features.

    Delegates to the softmax learner; the checkpoint with the best validation
    accuracy (earliest on ties) becomes the returned model.
    Returns (classifier, history, selected_epoch).
    """
    x_train = emb.rows_for(assignment.train_ids)
    y_train = np.array([corpus.label_of(sid) for sid in assignment.train_ids])
    eval_set = None
    if assignment.val_ids:
        x_val = emb.rows_for(assignment.val_ids)
        y_val = np.array([corpus.label_of(sid) for sid in assignment.val_ids])
        eval_set = (x_val, y_val)
    clf = SoftmaxClassifier(epochs=epochs, lr=lr, l2=l2,
                            batch_size=batch_size, seed=seed)
    clf.fit(x_train, y_train, n_classes=corpus.n_classes,
            eval_set=eval_set, select_best=eval_set is not None)
    return clf, clf.history_, clf.selected_epoch_

"""From-scratch comparison classifiers behind one fit / predict_proba contract.

Every learner returns a row-stochastic probability matrix, is deterministic
given its seed, and serializes into the ``.mmod`` container. Probability
calibration choices that the underlying methods do not define (softmax over
SVM margins, posterior softmax over LDA discriminants) are documented on the
class.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (BadMagic, DataError, Diverged, InvalidLabels, KTooLarge,
                     TruncatedFile)
from .numerics import PcaModel, make_rng

MMOD_MAGIC = b"MMOD"
MMOD_VERSION = 1
KIND_TAGS = {"knn": 1, "gnb": 2, "lda": 3, "softmax": 4, "linear_svm": 5,
             "mlp": 6, "smallcnn": 7}


@dataclass
class TrainRecord:
    epoch: int              # 1-based
    loss: float
    train_accuracy: float
    val_accuracy: float | None = None


def history_csv_write(history, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss,train_acc,val_acc\n")
        for rec in history:
            val = "" if rec.val_accuracy is None else repr(rec.val_accuracy)
            fh.write(f"{rec.epoch},{rec.loss!r},{rec.train_accuracy!r},{val}\n")


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax: exact row sums of 1 after normalization."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_xy(x, y, n_classes=None, require_multiclass=False):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DataError(f"bad training shapes: x {x.shape}, y {y.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("training data contains non-finite values")
    if n_classes is None:
        n_classes = int(y.max()) + 1 if y.size else 0
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise InvalidLabels(f"labels outside [0, {n_classes})")
    if require_multiclass and len(np.unique(y)) < 2:
        raise InvalidLabels("need at least 2 classes to fit")
    return x, y, n_classes


def _accuracy(probs, y):
    return float(np.mean(np.argmax(probs, axis=1) == y))


class KnnClassifier:
    """k-nearest-neighbor votes under L2 distance.

    Distance ties are broken by lower training-sample index (stable sort),
    vote ties by lower class index at argmax time.
    """

    kind = "knn"

    def __init__(self, k=5):
        self.k = int(k)

    def fit(self, x, y, n_classes=None):
        x, y, n_classes = _check_xy(x, y, n_classes)
        if self.k > x.shape[0]:
            raise KTooLarge(f"k={self.k} exceeds {x.shape[0]} training samples")
        self.x_ = x
        self.y_ = y
        self.n_classes_ = n_classes
        return self

    def predict_proba(self, x):
        x = np.asarray(x, dtype=np.float64)
        probs = np.zeros((x.shape[0], self.n_classes_))
        for qi in range(x.shape[0]):
            # plain squared distances (not the expanded quadratic form) so the
            # ordering matches a direct per-pair computation bit for bit
            d2 = np.sum((self.x_ - x[qi]) ** 2, axis=1)
            nearest = np.argsort(d2, kind="stable")[:self.k]
            for idx in nearest:
                probs[qi, self.y_[idx]] += 1.0
        probs /= self.k
        return probs

    def hyperparams(self):
        return {"k": self.k, "n_classes": getattr(self, "n_classes_", None)}

    def param_blobs(self):
        return [self.x_, self.y_.astype(np.float64)]

    def set_param_blobs(self, blobs):
        self.x_ = blobs[0]
        self.y_ = blobs[1].astype(np.intp)

    @classmethod
    def from_hyperparams(cls, hp):
        clf = cls(k=hp["k"])
        clf.n_classes_ = hp["n_classes"]
        return clf


class GaussianNbClassifier:
    """Naive Bayes with per-feature Gaussian likelihoods.

    Variances get an additive floor of var_smoothing times the largest
    feature variance so constant features never produce singularities.
    """

    kind = "gnb"

    def __init__(self, var_smoothing=1e-9):
        self.var_smoothing = float(var_smoothing)

    def fit(self, x, y, n_classes=None):
        x, y, n_classes = _check_xy(x, y, n_classes)
        self.n_classes_ = n_classes
        d = x.shape[1]
        self.means_ = np.zeros((n_classes, d))
        self.vars_ = np.zeros((n_classes, d))
        counts = np.zeros(n_classes)
        for c in range(n_classes):
            xc = x[y == c]
            counts[c] = len(xc)
            if len(xc):
                self.means_[c] = xc.mean(axis=0)
                self.vars_[c] = xc.var(axis=0)
        max_var = float(np.max(x.var(axis=0)))
        eps = self.var_smoothing * max_var if max_var > 0 else self.var_smoothing
        self.vars_ += eps
        with np.errstate(divide="ignore"):
            self.log_priors_ = np.where(counts > 0,
                                        np.log(counts / counts.sum()), -np.inf)
        return self

    def predict_proba(self, x):
        x = np.asarray(x, dtype=np.float64)
        log_post = np.empty((x.shape[0], self.n_classes_))
        for c in range(self.n_classes_):
            diff = x - self.means_[c]
            ll = -0.5 * np.sum(np.log(2.0 * np.pi * self.vars_[c])
                               + diff ** 2 / self.vars_[c], axis=1)
            log_post[:, c] = self.log_priors_[c] + ll
        return softmax_rows(log_post)

    def hyperparams(self):
        return {"var_smoothing": self.var_smoothing,
                "n_classes": getattr(self, "n_classes_", None)}

    def param_blobs(self):
        return [self.means_, self.vars_, self.log_priors_]

    def set_param_blobs(self, blobs):
        self.means_, self.vars_, self.log_priors_ = blobs

    @classmethod
    def from_hyperparams(cls, hp):
        clf = cls(var_smoothing=hp["var_smoothing"])
        clf.n_classes_ = hp["n_classes"]
        return clf


class LdaClassifier:
    """Linear discriminant analysis with a shared ridge-regularized covariance.

    Pooled covariance sums per-sample centered outer products in sample order
    (so class relabeling cannot change the float result), divides by n - K,
    and adds ridge * trace/d * I for invertibility.
    """

    kind = "lda"

    def __init__(self, ridge=1e-6):
        self.ridge = float(ridge)

    def fit(self, x, y, n_classes=None):
        x, y, n_classes = _check_xy(x, y, n_classes)
        n, d = x.shape
        if n <= n_classes:
            raise DataError("LDA needs more samples than classes")
        self.n_classes_ = n_classes
        self.means_ = np.zeros((n_classes, d))
        counts = np.zeros(n_classes)
        for c in range(n_classes):
            xc = x[y == c]
            counts[c] = len(xc)
            if len(xc):
                self.means_[c] = xc.mean(axis=0)
        centered = x - self.means_[y]
        cov = (centered.T @ centered) / (n - n_classes)
        lam = self.ridge * np.trace(cov) / d
        cov += lam * np.eye(d)
        self.precision_ = np.linalg.inv(cov)
        with np.errstate(divide="ignore"):
            self.log_priors_ = np.where(counts > 0,
                                        np.log(counts / n), -np.inf)
        return self

    def discriminants(self, x):
        x = np.asarray(x, dtype=np.float64)
        pm = self.precision_ @ self.means_.T             # (d, c)
        quad = 0.5 * np.sum(self.means_ * pm.T, axis=1)  # (c,)
        return x @ pm - quad + self.log_priors_

    def predict_proba(self, x):
        return softmax_rows(self.discriminants(x))

    def hyperparams(self):
        return {"ridge": self.ridge, "n_classes": getattr(self, "n_classes_", None)}

    def param_blobs(self):
        return [self.means_, self.precision_, self.log_priors_]

    def set_param_blobs(self, blobs):
        self.means_, self.precision_, self.log_priors_ = blobs

    @classmethod
    def from_hyperparams(cls, hp):
        clf = cls(ridge=hp["ridge"])
        clf.n_classes_ = hp["n_classes"]
        return clf


def softmax_loss_and_grad(w, b, x, y, l2):
    """Mean cross-entropy + 0.5*l2*||w||^2 and its gradients."""
    n = x.shape[0]
    logits = x @ w + b
    zmax = logits.max(axis=1, keepdims=True)
    logsumexp = zmax + np.log(np.exp(logits - zmax).sum(axis=1, keepdims=True))
    log_probs = logits - logsumexp
    loss = -np.mean(log_probs[np.arange(n), y]) + 0.5 * l2 * np.sum(w * w)
    probs = np.exp(log_probs)
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n
    dw = x.T @ delta + l2 * w
    db = delta.sum(axis=0)
    return loss, dw, db


class SoftmaxClassifier:
    """Multinomial logistic regression by mini-batch gradient descent.

    Weights start at zero (the pre-training model is uniform). After each
    epoch the full-train loss is checked; if it increased, the epoch is
    rolled back and the learning rate halves, so accepted losses are
    nonincreasing.
    """

    kind = "softmax"

    def __init__(self, epochs=25, lr=0.1, l2=1e-4, batch_size=32, seed=0):
        self.epochs = int(epochs)
        self.lr = float(lr)
        self.l2 = float(l2)
        self.batch_size = int(batch_size)
        self.seed = int(seed)

    def fit(self, x, y, n_classes=None, eval_set=None, select_best=False):
        x, y, n_classes = _check_xy(x, y, n_classes, require_multiclass=True)
        n, d = x.shape
        self.n_classes_ = n_classes
        self.w_ = np.zeros((d, n_classes))
        self.b_ = np.zeros(n_classes)
        rng = make_rng(self.seed)
        lr = self.lr
        self.history_ = []
        self.selected_epoch_ = None
        best_acc = -1.0
        best_params = None

        prev_loss, _, _ = softmax_loss_and_grad(self.w_, self.b_, x, y, self.l2)
        for epoch in range(1, self.epochs + 1):
            w_start, b_start = self.w_.copy(), self.b_.copy()
            perm = rng.permutation(n)
            for lo in range(0, n, self.batch_size):
                idx = perm[lo:lo + self.batch_size]
                _, dw, db = softmax_loss_and_grad(self.w_, self.b_,
                                                  x[idx], y[idx], self.l2)
                self.w_ -= lr * dw
                self.b_ -= lr * db
            loss, _, _ = softmax_loss_and_grad(self.w_, self.b_, x, y, self.l2)
            if not np.isfinite(loss):
                raise Diverged(f"softmax loss non-finite at epoch {epoch}")
            if loss > prev_loss:
                self.w_, self.b_ = w_start, b_start
                lr *= 0.5
                loss = prev_loss
            prev_loss = loss

            train_acc = _accuracy(self.predict_proba(x), y)
            val_acc = None
            if eval_set is not None:
                xv, yv = eval_set
                val_acc = _accuracy(self.predict_proba(xv), np.asarray(yv))
                if select_best and val_acc > best_acc:
                    best_acc = val_acc
                    best_params = (self.w_.copy(), self.b_.copy())
                    self.selected_epoch_ = epoch
            self.history_.append(TrainRecord(epoch, float(loss), train_acc, val_acc))

        if select_best and best_params is not None:
            self.w_, self.b_ = best_params
        return self

    def predict_proba(self, x):
        x = np.asarray(x, dtype=np.float64)
        return softmax_rows(x @ self.w_ + self.b_)

    def hyperparams(self):
        return {"epochs": self.epochs, "lr": self.lr, "l2": self.l2,
                "batch_size": self.batch_size, "seed": self.seed,
                "n_classes": getattr(self, "n_classes_", None)}

    def param_blobs(self):
        return [self.w_, self.b_]

    def set_param_blobs(self, blobs):
        self.w_, self.b_ = blobs

    @classmethod
    def from_hyperparams(cls, hp):
        clf = cls(epochs=hp["epochs"], lr=hp["lr"], l2=hp["l2"],
                  batch_size=hp["batch_size"], seed=hp["seed"])
        clf.n_classes_ = hp["n_classes"]
        return clf


class LinearSvmClassifier:
    """One-vs-rest linear SVM trained with the Pegasos subgradient schedule.

    The bias rides along as a constant-1 feature so the 1/(lam*t) steps shrink
    it like any other weight. All per-class weight vectors see the same seeded
    sample stream and the same step counter. predict_proba is a softmax over
    margins -- a calibration convention, not a probabilistic model.
    """

    kind = "linear_svm"

    def __init__(self, lam=1e-3, epochs=25, seed=0):
        self.lam = float(lam)
        self.epochs = int(epochs)
        self.seed = int(seed)

    def fit(self, x, y, n_classes=None):
        x, y, n_classes = _check_xy(x, y, n_classes, require_multiclass=True)
        n = x.shape[0]
        xa = np.hstack([x, np.ones((n, 1))])
        self.n_classes_ = n_classes
        w = np.zeros((n_classes, xa.shape[1]))
        signs = np.full((n, n_classes), -1.0)
        signs[np.arange(n), y] = 1.0
        rng = make_rng(self.seed)
        t = 1
        for epoch in range(self.epochs):
            for i in rng.permutation(n):
                eta = 1.0 / (self.lam * t)
                yi = signs[i]
                margins = yi * (w @ xa[i])
                active = margins < 1.0
                w *= (1.0 - eta * self.lam)
                if np.any(active):
                    w += (eta * yi * active)[:, None] * xa[i][None, :]
                t += 1
            if not np.all(np.isfinite(w)):
                raise Diverged(f"svm weights non-finite after epoch {epoch + 1}")
        self.w_ = w
        return self

    def margins(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x @ self.w_[:, :-1].T + self.w_[:, -1]

    def predict_proba(self, x):
        return softmax_rows(self.margins(x))

    def hyperparams(self):
        return {"lam": self.lam, "epochs": self.epochs, "seed": self.seed,
                "n_classes": getattr(self, "n_classes_", None)}

    def param_blobs(self):
        return [self.w_]

    def set_param_blobs(self, blobs):
        (self.w_,) = blobs

    @classmethod
    def from_hyperparams(cls, hp):
        clf = cls(lam=hp["lam"], epochs=hp["epochs"], seed=hp["seed"])
        clf.n_classes_ = hp["n_classes"]
        return clf


def mlp_loss_and_grad(params, x, y):
    """Forward + backward for the one-hidden-layer ReLU network."""
    w1, b1, w2, b2 = params
    n = x.shape[0]
    pre = x @ w1 + b1
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ w2 + b2
    zmax = logits.max(axis=1, keepdims=True)
    logsumexp = zmax + np.log(np.exp(logits - zmax).sum(axis=1, keepdims=True))
    log_probs = logits - logsumexp
    loss = -np.mean(log_probs[np.arange(n), y])
    delta = np.exp(log_probs)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    dw2 = hidden.T @ delta
    db2 = delta.sum(axis=0)
    dhidden = delta @ w2.T
    dhidden[pre <= 0.0] = 0.0
    dw1 = x.T @ dhidden
    db1 = dhidden.sum(axis=0)
    return loss, (dw1, db1, dw2, db2)


class MlpClassifier:
    """Shallow fully connected network: one ReLU hidden layer, softmax output.

    Hidden weights use seeded uniform He-style init (+-sqrt(6/fan_in)); the
    output layer starts at zero so class relabeling permutes outputs exactly.
    """

    kind = "mlp"

    def __init__(self, hidden=128, epochs=25, lr=0.1, batch_size=32, seed=0):
        self.hidden = int(hidden)
        self.epochs = int(epochs)
        self.lr = float(lr)
        self.batch_size = int(batch_size)
        self.seed = int(seed)

    def fit(self, x, y, n_classes=None):
        x, y, n_classes = _check_xy(x, y, n_classes, require_multiclass=True)
        n, d = x.shape
        self.n_classes_ = n_classes
        rng = make_rng(self.seed)
        limit = np.sqrt(6.0 / d)
        self.w1_ = rng.uniform(-limit, limit, size=(d, self.hidden))
        self.b1_ = np.zeros(self.hidden)
        self.w2_ = np.zeros((self.hidden, n_classes))
        self.b2_ = np.zeros(n_classes)
        for epoch in range(1, self.epochs + 1):
            perm = rng.permutation(n)
            for lo in range(0, n, self.batch_size):
                idx = perm[lo:lo + self.batch_size]
                loss, grads = mlp_loss_and_grad(self._params(), x[idx], y[idx])
                if not np.isfinite(loss):
                    raise Diverged(f"mlp loss non-finite at epoch {epoch}")
                for p, g in zip(self._params(), grads):
                    p -= self.lr * g
        return self

    def _params(self):
        return (self.w1_, self.b1_, self.w2_, self.b2_)

    def predict_proba(self, x):
        x = np.asarray(x, dtype=np.float64)
        hidden = np.maximum(x @ self.w1_ + self.b1_, 0.0)
        return softmax_rows(hidden @ self.w2_ + self.b2_)

    def hyperparams(self):
        return {"hidden": self.hidden, "epochs": self.epochs, "lr": self.lr,
                "batch_size": self.batch_size, "seed": self.seed,
                "n_classes": getattr(self, "n_classes_", None)}

    def param_blobs(self):
        return [self.w1_, self.b1_, self.w2_, self.b2_]

    def set_param_blobs(self, blobs):
        self.w1_, self.b1_, self.w2_, self.b2_ = blobs

    @classmethod
    def from_hyperparams(cls, hp):
        clf = cls(hidden=hp["hidden"], epochs=hp["epochs"], lr=hp["lr"],
                  batch_size=hp["batch_size"], seed=hp["seed"])
        clf.n_classes_ = hp["n_classes"]
        return clf


CLASSIFIERS = {cls.kind: cls for cls in
               (KnnClassifier, GaussianNbClassifier, LdaClassifier,
                SoftmaxClassifier, LinearSvmClassifier, MlpClassifier)}


# --- .mmod model container ----------------------------------------------------
#
# magic "MMOD" | version u8 | kind tag u8 | JSON block (u32 length prefix) |
# blob count u32 | blobs, each u32 byte length + raw f64 LE data.
# Blob shapes live in the JSON block so arrays reconstruct exactly.


def save_model(path, clf, pca: PcaModel | None = None, meta: dict | None = None):
    blobs = [np.ascontiguousarray(b, dtype=np.float64) for b in clf.param_blobs()]
    header = {
        "kind": clf.kind,
        "hyperparams": clf.hyperparams(),
        "blob_shapes": [list(b.shape) for b in blobs],
        "meta": meta or {},
    }
    if pca is not None:
        pca_blobs = [pca.mean, pca.components, pca.explained_variance,
                     np.array([pca.total_variance])]
        pca_blobs = [np.ascontiguousarray(b, dtype=np.float64) for b in pca_blobs]
        header["pca"] = {"blob_shapes": [list(b.shape) for b in pca_blobs],
                         "rank_deficient": pca.rank_deficient}
        blobs.extend(pca_blobs)
    else:
        header["pca"] = None

    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MMOD_MAGIC)
        fh.write(struct.pack("<BB", MMOD_VERSION, KIND_TAGS[clf.kind]))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<I", len(blobs)))
        for blob in blobs:
            raw = blob.astype("<f8").tobytes()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def load_model(path):
    """Returns (classifier, pca_or_none, meta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MMOD_MAGIC:
        raise BadMagic(f"{path}: bad magic at offset 0 (want MMOD)")
    if len(blob) < 10:
        raise TruncatedFile(f"{path}: header truncated at offset {len(blob)}")
    version, kind_tag = struct.unpack_from("<BB", blob, 4)
    if version != MMOD_VERSION:
        raise BadMagic(f"{path}: unsupported version {version} at offset 4")
    (json_len,) = struct.unpack_from("<I", blob, 6)
    off = 10
    if off + json_len > len(blob):
        raise TruncatedFile(f"{path}: JSON block truncated at offset {off}")
    header = json.loads(blob[off:off + json_len].decode("utf-8"))
    off += json_len
    if off + 4 > len(blob):
        raise TruncatedFile(f"{path}: blob count truncated at offset {off}")
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays = []
    for _ in range(count):
        if off + 4 > len(blob):
            raise TruncatedFile(f"{path}: blob length truncated at offset {off}")
        (nbytes,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + nbytes > len(blob):
            raise TruncatedFile(f"{path}: blob data truncated at offset {off}")
        arrays.append(np.frombuffer(blob, dtype="<f8", count=nbytes // 8,
                                    offset=off).copy())
        off += nbytes

    kind = header["kind"]
    tag = KIND_TAGS.get(kind)
    if tag is None or tag != kind_tag:
        raise DataError(f"{path}: kind tag {kind_tag} does not match JSON kind {kind!r}")

    shapes = header["blob_shapes"]
    clf_arrays = [a.reshape(s) for a, s in zip(arrays, shapes)]
    if kind == "smallcnn":
        from . import smallcnn
        clf = smallcnn.SmallCnn.from_hyperparams(header["hyperparams"])
    else:
        clf = CLASSIFIERS[kind].from_hyperparams(header["hyperparams"])
    clf.set_param_blobs(clf_arrays)

    pca = None
    if header.get("pca") is not None:
        pshapes = header["pca"]["blob_shapes"]
        parrs = [a.reshape(s) for a, s in
                 zip(arrays[len(shapes):], pshapes)]
        pca = PcaModel(mean=parrs[0], components=parrs[1],
                       explained_variance=parrs[2],
                       total_variance=float(parrs[3][0]),
                       rank_deficient=header["pca"]["rank_deficient"])
    return clf, pca, header.get("meta", {})

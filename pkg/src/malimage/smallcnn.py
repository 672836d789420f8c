"""The training-from-scratch comparator: a small inception-style CNN.

Input is a batch of 28x28 single-channel images (channel-last, float64).
Topology:

    stem:   3x3 conv, 8 filters, stride 1, same padding, ReLU
    block:  parallel branches [1x1 conv x8, 3x3 conv x8, 5x5 conv x4,
            3x3 maxpool -> 1x1 conv x4], each ReLU, concatenated to 24
            channels (two such blocks)
    head:   global average pool -> dense layer to n_classes

All passes are written by hand. Convolution runs as k*k shifted matmuls over
the channel axis, which keeps peak memory near the activation size instead of
materializing an im2col buffer. Accumulation order is fixed everywhere so
training is bit-reproducible for a given seed.
"""

from __future__ import annotations

import numpy as np

from .baselines import TrainRecord, softmax_rows
from .errors import DataError, Diverged, ShapeMismatch
from .numerics import make_rng


def _he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Conv2dSame:
    """k x k convolution, stride 1, zero same-padding, NHWC layout.

    Weights are (k, k, in_ch, out_ch); the forward pass accumulates one
    (n*h*w, in_ch) @ (in_ch, out_ch) product per kernel offset. A 1x1 kernel
    collapses to a single matmul.
    """

    def __init__(self, in_ch, out_ch, k, dtype=np.float64):
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.k = k
        self.dtype = dtype
        self.w = np.zeros((k, k, in_ch, out_ch), dtype=dtype)
        self.b = np.zeros(out_ch, dtype=dtype)

    def init_params(self, rng):
        self.w = _he_uniform(rng, self.w.shape,
                             self.in_ch * self.k * self.k).astype(self.dtype)
        self.b = np.zeros(self.out_ch, dtype=self.dtype)

    def forward(self, x):
        n, h, w, c = x.shape
        if c != self.in_ch:
            raise ShapeMismatch(f"conv expects {self.in_ch} channels, got {c}")
        if self.k == 1:
            out = x.reshape(-1, c) @ self.w[0, 0] + self.b
            return out.reshape(n, h, w, self.out_ch), x
        p = self.k // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        out = np.zeros((n, h, w, self.out_ch), dtype=x.dtype)
        flat = out.reshape(-1, self.out_ch)
        for a in range(self.k):
            for b in range(self.k):
                patch = np.ascontiguousarray(xp[:, a:a + h, b:b + w, :])
                flat += patch.reshape(-1, c) @ self.w[a, b]
        out += self.b
        return out, xp

    def backward(self, dout, cache):
        n, h, w, o = dout.shape
        c = self.in_ch
        dout_flat = np.ascontiguousarray(dout).reshape(-1, o)
        if self.k == 1:
            x = cache
            dw = np.zeros_like(self.w)
            dw[0, 0] = x.reshape(-1, c).T @ dout_flat
            dx = (dout_flat @ self.w[0, 0].T).reshape(n, h, w, c)
            return dx, {"w": dw, "b": dout_flat.sum(axis=0)}
        xp = cache
        dw = np.zeros_like(self.w)
        dxp = np.zeros_like(xp)
        for a in range(self.k):
            for b in range(self.k):
                patch = np.ascontiguousarray(xp[:, a:a + h, b:b + w, :])
                dw[a, b] = patch.reshape(-1, c).T @ dout_flat
                dxp[:, a:a + h, b:b + w, :] += (dout_flat @ self.w[a, b].T
                                                ).reshape(n, h, w, c)
        db = dout_flat.sum(axis=0)
        p = self.k // 2
        dx = dxp[:, p:p + h, p:p + w, :]
        return dx, {"w": dw, "b": db}

    def params(self):
        return {"w": self.w, "b": self.b}


class Relu:
    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, dout, cache):
        dx = dout.copy()
        dx[cache <= 0.0] = 0.0
        return dx, {}


class MaxPool3x3Same:
    """3x3 max pooling, stride 1, same padding; ties route to the first
    window position (fixed scan order), matching the backward mask."""

    def forward(self, x):
        n, h, w, c = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)),
                    constant_values=-np.inf)
        out = xp[:, 0:h, 0:w, :].copy()
        for p in range(1, 9):
            a, b = divmod(p, 3)
            np.maximum(out, xp[:, a:a + h, b:b + w, :], out=out)
        return out, (xp, out)

    def backward(self, dout, cache):
        xp, out = cache
        n = xp.shape[0]
        h, w, c = out.shape[1], out.shape[2], out.shape[3]
        dxp = np.zeros_like(xp)
        claimed = np.zeros(out.shape, dtype=bool)
        for p in range(9):
            a, b = divmod(p, 3)
            mask = (xp[:, a:a + h, b:b + w, :] == out) & ~claimed
            dxp[:, a:a + h, b:b + w, :] += dout * mask
            claimed |= mask
        return dxp[:, 1:1 + h, 1:1 + w, :], {}


class GlobalAvgPool:
    def forward(self, x):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, dout, cache):
        n, h, w, c = cache
        dx = np.broadcast_to(dout[:, None, None, :] / (h * w), (n, h, w, c))
        return dx.copy(), {}


class Dense:
    def __init__(self, in_features, out_features, dtype=np.float64):
        self.in_features = in_features
        self.out_features = out_features
        self.dtype = dtype
        self.w = np.zeros((in_features, out_features), dtype=dtype)
        self.b = np.zeros(out_features, dtype=dtype)

    def init_params(self, rng):
        self.w = _he_uniform(rng, self.w.shape, self.in_features).astype(self.dtype)
        self.b = np.zeros(self.out_features, dtype=self.dtype)

    def forward(self, x):
        return x @ self.w + self.b, x

    def backward(self, dout, cache):
        dx = dout @ self.w.T
        return dx, {"w": cache.T @ dout, "b": dout.sum(axis=0)}

    def params(self):
        return {"w": self.w, "b": self.b}


class InceptionBlock:
    """Four parallel branches concatenated along channels (8+8+4+4 = 24)."""

    def __init__(self, in_ch, dtype=np.float64):
        self.branches = [
            [Conv2dSame(in_ch, 8, 1, dtype), Relu()],
            [Conv2dSame(in_ch, 8, 3, dtype), Relu()],
            [Conv2dSame(in_ch, 4, 5, dtype), Relu()],
            [MaxPool3x3Same(), Conv2dSame(in_ch, 4, 1, dtype), Relu()],
        ]
        self.out_ch = 24

    def init_params(self, rng):
        for branch in self.branches:
            for layer in branch:
                if hasattr(layer, "init_params"):
                    layer.init_params(rng)

    def forward(self, x):
        outs, caches = [], []
        for branch in self.branches:
            h = x
            branch_cache = []
            for layer in branch:
                h, cache = layer.forward(h)
                branch_cache.append(cache)
            outs.append(h)
            caches.append(branch_cache)
        return np.concatenate(outs, axis=-1), (caches, [o.shape[-1] for o in outs])

    def backward(self, dout, cache):
        caches, widths = cache
        dx_total = None
        grads = {}
        offset = 0
        for bi, (branch, branch_cache, width) in enumerate(
                zip(self.branches, caches, widths)):
            d = dout[..., offset:offset + width]
            offset += width
            for li in range(len(branch) - 1, -1, -1):
                d, layer_grads = branch[li].backward(d, branch_cache[li])
                for name, g in layer_grads.items():
                    grads[f"b{bi}.l{li}.{name}"] = g
            dx_total = d if dx_total is None else dx_total + d
        return dx_total, grads

    def params(self):
        out = {}
        for bi, branch in enumerate(self.branches):
            for li, layer in enumerate(branch):
                if hasattr(layer, "params"):
                    for name, p in layer.params().items():
                        out[f"b{bi}.l{li}.{name}"] = p
        return out


def cross_entropy(logits, y):
    """Log-sum-exp cross-entropy: mean loss and dlogits."""
    n = logits.shape[0]
    zmax = logits.max(axis=1, keepdims=True)
    logsumexp = zmax + np.log(np.exp(logits - zmax).sum(axis=1, keepdims=True))
    log_probs = logits - logsumexp
    loss = -np.mean(log_probs[np.arange(n), y])
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    return loss, dlogits


class SmallCnn:
    """The full network. Trains in float32 by default (the gradient-check
    suite builds float64 instances); predictions are normalized in float64
    so probability rows sum to 1 at full precision."""

    kind = "smallcnn"
    SIDE = 28

    def __init__(self, n_classes, epochs=25, lr=1e-3, batch_size=32, seed=0,
                 dtype=np.float32):
        self.n_classes = int(n_classes)
        self.epochs = int(epochs)
        self.lr = float(lr)
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.dtype = dtype

        self.stem = Conv2dSame(1, 8, 3, dtype)
        self.stem_relu = Relu()
        self.block1 = InceptionBlock(8, dtype)
        self.block2 = InceptionBlock(24, dtype)
        self.gap = GlobalAvgPool()
        self.dense = Dense(24, self.n_classes, dtype)
        self.init_params(make_rng(self.seed))

    def init_params(self, rng):
        self.stem.init_params(rng)
        self.block1.init_params(rng)
        self.block2.init_params(rng)
        self.dense.init_params(rng)

    # parameter registry: fixed name -> array order for Adam and serialization
    def params(self):
        out = {}
        for name, p in self.stem.params().items():
            out[f"stem.{name}"] = p
        for name, p in self.block1.params().items():
            out[f"block1.{name}"] = p
        for name, p in self.block2.params().items():
            out[f"block2.{name}"] = p
        for name, p in self.dense.params().items():
            out[f"dense.{name}"] = p
        return out

    def n_params(self):
        return sum(p.size for p in self.params().values())

    def _check_batch(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[..., None]
        if x.ndim != 4 or x.shape[1:] != (self.SIDE, self.SIDE, 1):
            raise ShapeMismatch(
                f"expected (n, {self.SIDE}, {self.SIDE}, 1) batch, got {x.shape}")
        return x

    def forward(self, x):
        x = self._check_batch(x)
        caches = {}
        h, caches["stem"] = self.stem.forward(x)
        h, caches["stem_relu"] = self.stem_relu.forward(h)
        h, caches["block1"] = self.block1.forward(h)
        h, caches["block2"] = self.block2.forward(h)
        h, caches["gap"] = self.gap.forward(h)
        logits, caches["dense"] = self.dense.forward(h)
        return logits, caches

    def predict_proba(self, x, batch_size=64):
        x = self._check_batch(x)
        rows = []
        for lo in range(0, x.shape[0], batch_size):
            logits, _ = self.forward(x[lo:lo + batch_size])
            rows.append(softmax_rows(logits.astype(np.float64)))
        return np.vstack(rows)

    def loss_and_grads(self, x, y):
        """Mean cross-entropy over the batch plus gradients for every parameter."""
        y = np.asarray(y, dtype=np.intp)
        logits, caches = self.forward(x)
        loss, dlogits = cross_entropy(logits, y)
        grads = {}
        d, dense_grads = self.dense.backward(dlogits, caches["dense"])
        for name, g in dense_grads.items():
            grads[f"dense.{name}"] = g
        d, _ = self.gap.backward(d, caches["gap"])
        d, block2_grads = self.block2.backward(d, caches["block2"])
        for name, g in block2_grads.items():
            grads[f"block2.{name}"] = g
        d, block1_grads = self.block1.backward(d, caches["block1"])
        for name, g in block1_grads.items():
            grads[f"block1.{name}"] = g
        d, _ = self.stem_relu.backward(d, caches["stem_relu"])
        _, stem_grads = self.stem.backward(d, caches["stem"])
        for name, g in stem_grads.items():
            grads[f"stem.{name}"] = g
        return loss, grads, logits

    def fit(self, x, y, eval_set=None, select_best=True):
        """Adam training with per-epoch validation checkpoints.

        The returned model carries the parameters of the epoch with the best
        validation accuracy (earliest on ties), not the final epoch.
        """
        x = self._check_batch(x)
        y = np.asarray(y, dtype=np.intp)
        if y.min() < 0 or y.max() >= self.n_classes:
            raise DataError(f"labels outside [0, {self.n_classes})")
        if len(np.unique(y)) < 2:
            raise DataError("need at least 2 classes in the training split")

        rng = make_rng(self.seed)
        self.init_params(rng)
        params = self.params()
        names = sorted(params.keys())
        adam_m = {k: np.zeros_like(params[k]) for k in names}
        adam_v = {k: np.zeros_like(params[k]) for k in names}
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        step = 0

        n = x.shape[0]
        self.history_ = []
        self.selected_epoch_ = None
        best_acc = -1.0
        best_params = None

        for epoch in range(1, self.epochs + 1):
            perm = rng.permutation(n)
            epoch_loss = 0.0
            correct = 0
            for lo in range(0, n, self.batch_size):
                idx = perm[lo:lo + self.batch_size]
                xb, yb = x[idx], y[idx]
                loss, grads, logits = self.loss_and_grads(xb, yb)
                if not np.isfinite(loss):
                    raise Diverged(f"loss non-finite at epoch {epoch}")
                correct += int(np.sum(np.argmax(logits, axis=1) == yb))
                epoch_loss += loss * len(idx)
                step += 1
                for k in names:
                    g = grads[k]
                    adam_m[k] = beta1 * adam_m[k] + (1 - beta1) * g
                    adam_v[k] = beta2 * adam_v[k] + (1 - beta2) * g * g
                    mhat = adam_m[k] / (1 - beta1 ** step)
                    vhat = adam_v[k] / (1 - beta2 ** step)
                    params[k] -= self.lr * mhat / (np.sqrt(vhat) + eps)

            train_loss = epoch_loss / n
            train_acc = correct / n
            val_acc = None
            if eval_set is not None:
                xv, yv = eval_set
                probs = self.predict_proba(xv)
                val_acc = float(np.mean(np.argmax(probs, axis=1)
                                        == np.asarray(yv)))
                if select_best and val_acc > best_acc:
                    best_acc = val_acc
                    best_params = {k: p.copy() for k, p in params.items()}
                    self.selected_epoch_ = epoch
            self.history_.append(TrainRecord(epoch, float(train_loss),
                                             float(train_acc), val_acc))

        if select_best and best_params is not None:
            self.set_params(best_params)
        return self

    def set_params(self, new_params):
        for k, p in self.params().items():
            p[...] = new_params[k]

    # --- .mmod plumbing ---
    def hyperparams(self):
        return {"n_classes": self.n_classes, "epochs": self.epochs,
                "lr": self.lr, "batch_size": self.batch_size,
                "seed": self.seed, "dtype": np.dtype(self.dtype).name,
                "param_names": sorted(self.params().keys())}

    def param_blobs(self):
        params = self.params()
        return [params[k] for k in sorted(params.keys())]

    def set_param_blobs(self, blobs):
        names = sorted(self.params().keys())
        self.set_params(dict(zip(names, blobs)))

    @classmethod
    def from_hyperparams(cls, hp):
        return cls(n_classes=hp["n_classes"], epochs=hp["epochs"],
                   lr=hp["lr"], batch_size=hp["batch_size"], seed=hp["seed"],
                   dtype=np.dtype(hp.get("dtype", "float32")))


def train_on_corpus(corpus, assignment, n_classes=None, epochs=25, lr=1e-3,
                    batch_size=32, seed=0):
    """Train on a 28-pixel corpus split; returns (model, history, selected_epoch)."""
    if corpus.side != SmallCnn.SIDE:
        raise DataError(f"smallcnn needs a {SmallCnn.SIDE}-pixel store, "
                        f"corpus side is {corpus.side}")
    x_train, y_train = corpus.arrays(assignment.train_ids)
    x_val, y_val = corpus.arrays(assignment.val_ids)
    model = SmallCnn(n_classes=n_classes or corpus.n_classes, epochs=epochs,
                     lr=lr, batch_size=batch_size, seed=seed)
    model.fit(x_train, y_train,
              eval_set=(x_val, y_val) if len(y_val) else None)
    return model, model.history_, model.selected_epoch_

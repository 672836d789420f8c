"""Command-line pipeline: synth / convert / split / train / eval / explain /
ensemble.

Every command writes a resolved-config JSON next to its primary output and
derives all randomness from --seed; artifact files never embed wall-clock
time, so identical invocations produce byte-identical outputs.

Exit codes: 0 ok, 1 usage, 2 data or format error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import (baselines, corpus, ensemble, evaluate, imaging, interpret,
               numerics, smallcnn, synthetic, transfer)
from .errors import DataError, Diverged, MalimageError, UsageError

MODEL_CHOICES = ("softmax", "knn", "gnb", "lda", "svm", "mlp", "smallcnn")


def write_config(out_path, command: str, args: argparse.Namespace) -> None:
    options = {k: v for k, v in sorted(vars(args).items())
               if k not in ("func", "command") and not k.startswith("_")}
    payload = {"command": command, "options": options}
    with open(str(out_path) + ".config.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _parse_ratios(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError("--ratios needs three comma-separated numbers")
    return tuple(float(p) for p in parts)


def cmd_synth(args) -> int:
    manifest_path, entries = synthetic.generate_corpus(
        args.out_dir, families=args.families, per_family=args.per_family,
        seed=args.seed, min_kb=args.min_kb, max_kb=args.max_kb,
        noise=args.noise)
    emb = synthetic.generate_embeddings(entries, families=args.families,
                                        dim=args.dim, sigma=args.sigma,
                                        seed=args.seed)
    emb_path = args.embeddings_out or f"{args.out_dir}/embeddings.memb"
    transfer.save_embeddings(emb, emb_path)
    write_config(manifest_path, "synth", args)
    print(f"wrote {len(entries)} binaries, manifest {manifest_path}, "
          f"embeddings {emb_path}")
    return 0


def cmd_convert(args) -> int:
    entries = corpus.read_manifest(args.manifest)
    if args.min_kb is not None:
        before = len(entries)
        entries = corpus.filter_min_size(entries, args.min_kb)
        print(f"size filter: kept {len(entries)} of {before} files "
              f"(removed under {args.min_kb} kb)")
    c = corpus.ingest(entries, args.size, threads=args.threads)
    corpus.save_corpus(c, args.out_store)
    print(f"store {args.out_store}: {len(c.samples)} records at "
          f"{args.size}x{args.size}, {len(c.skipped)} skipped")
    for path, reason in c.skipped:
        print(f"  skipped {path}: {reason}")
    write_config(args.out_store, "convert", args)
    if args.small_out:
        small = corpus.ingest(entries, 28, threads=args.threads)
        corpus.save_corpus(small, args.small_out)
        print(f"store {args.small_out}: {len(small.samples)} records at 28x28")
        write_config(args.small_out, "convert", args)
    return 0


def cmd_split(args) -> int:
    c = corpus.load_corpus_labels(args.store)
    assignment = corpus.split(c, _parse_ratios(args.ratios), seed=args.seed)
    corpus.save_split(assignment, args.out)
    write_config(args.out, "split", args)
    print(f"split {args.out}: train {len(assignment.train_ids)} / "
          f"val {len(assignment.val_ids)} / test {len(assignment.test_ids)}")
    return 0


def _flat_pixels(c, ids):
    x, y = c.arrays(ids)
    return x.reshape(len(ids), -1), y


def cmd_train(args) -> int:
    assignment = corpus.load_split(args.split)
    c = corpus.load_corpus(args.store)
    history = None
    pca = None
    if args.lr is None:
        args.lr = 1e-3 if args.model == "smallcnn" else 0.1

    if args.model == "smallcnn":
        if args.embeddings:
            raise UsageError("smallcnn trains on images, not embeddings")
        model, history, selected = smallcnn.train_on_corpus(
            c, assignment, epochs=args.epochs, lr=args.lr,
            batch_size=args.batch_size, seed=args.seed)
        print(f"smallcnn: {model.n_params()} parameters")
        meta = {"input": {"kind": "image", "side": smallcnn.SmallCnn.SIDE},
                "selected_epoch": selected}
    elif args.embeddings:
        if args.model != "softmax":
            raise UsageError("only the softmax head trains on embeddings")
        emb = transfer.load_embeddings(args.embeddings)
        model, history, selected = transfer.train_head(
            emb, c, assignment, epochs=args.epochs, lr=args.lr, l2=args.l2,
            batch_size=args.batch_size, seed=args.seed)
        meta = {"input": {"kind": "embeddings", "dim": emb.dim},
                "selected_epoch": selected}
    else:
        x_train, y_train = _flat_pixels(c, assignment.train_ids)
        if args.pca:
            pca = numerics.pca_fit(x_train, args.pca)
            x_train = numerics.pca_transform(pca, x_train)
        meta = {"input": {"kind": "pixels", "side": c.side,
                          "pca_k": args.pca or None}}
        if args.model == "softmax":
            model = baselines.SoftmaxClassifier(
                epochs=args.epochs, lr=args.lr, l2=args.l2,
                batch_size=args.batch_size, seed=args.seed)
            eval_set = None
            if assignment.val_ids:
                x_val, y_val = _flat_pixels(c, assignment.val_ids)
                if pca is not None:
                    x_val = numerics.pca_transform(pca, x_val)
                eval_set = (x_val, y_val)
            model.fit(x_train, y_train, n_classes=c.n_classes,
                      eval_set=eval_set, select_best=eval_set is not None)
            history = model.history_
            meta["selected_epoch"] = model.selected_epoch_
        elif args.model == "knn":
            model = baselines.KnnClassifier(k=args.k).fit(
                x_train, y_train, n_classes=c.n_classes)
        elif args.model == "gnb":
            model = baselines.GaussianNbClassifier().fit(
                x_train, y_train, n_classes=c.n_classes)
        elif args.model == "lda":
            model = baselines.LdaClassifier().fit(
                x_train, y_train, n_classes=c.n_classes)
        elif args.model == "svm":
            model = baselines.LinearSvmClassifier(
                lam=args.lam, epochs=args.epochs, seed=args.seed).fit(
                x_train, y_train, n_classes=c.n_classes)
        elif args.model == "mlp":
            model = baselines.MlpClassifier(
                hidden=args.hidden, epochs=args.epochs, lr=args.lr,
                batch_size=args.batch_size, seed=args.seed).fit(
                x_train, y_train, n_classes=c.n_classes)
        else:
            raise UsageError(f"unknown model {args.model!r}")

    baselines.save_model(args.out, model, pca=pca, meta=meta)
    write_config(args.out, "train", args)
    if history:
        baselines.history_csv_write(history, str(args.out) + ".history.csv")
    selected = meta.get("selected_epoch")
    extra = f", selected epoch {selected}" if selected else ""
    print(f"model {args.out}: kind {model.kind}{extra}")
    return 0


def _bundle_features(clf, pca, meta, c, emb, ids):
    kind = meta["input"]["kind"]
    if kind == "embeddings":
        if emb is None:
            raise UsageError("model was trained on embeddings; pass --embeddings")
        return emb.rows_for(ids)
    if kind == "image":
        x, _ = c.arrays(ids)
        return x
    x, _ = c.arrays(ids)
    flat = x.reshape(len(ids), -1)
    if pca is not None:
        flat = numerics.pca_transform(pca, flat)
    return flat


def _predict_chunked(clf, x, threads: int):
    if threads <= 1 or len(x) < 64:
        return clf.predict_proba(x)
    from concurrent.futures import ThreadPoolExecutor
    chunks = np.array_split(np.arange(len(x)), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        rows = list(pool.map(lambda idx: clf.predict_proba(x[idx]), chunks))
    return np.vstack(rows)


def cmd_eval(args) -> int:
    clf, pca, meta = baselines.load_model(args.model)
    assignment = corpus.load_split(args.split)
    c = corpus.load_corpus(args.store)
    emb = transfer.load_embeddings(args.embeddings) if args.embeddings else None
    ids = assignment.subset(args.subset)
    if not ids:
        raise DataError(f"subset {args.subset!r} is empty")
    x = _bundle_features(clf, pca, meta, c, emb, ids)
    y = np.array([c.label_of(sid) for sid in ids])

    probs = _predict_chunked(clf, x, args.threads)
    probs_path = args.probs or str(args.report) + ".mprob"
    evaluate.write_probs(probs_path, probs)

    cm = evaluate.confusion(y, evaluate.predict_labels(probs), c.n_classes)
    report = evaluate.rates(cm)
    roc_points = None
    if c.n_classes == 2:
        report.f1 = evaluate.f1_binary(cm, positive_class=args.positive_class)
        roc_points, auc = evaluate.roc_auc(probs[:, args.positive_class],
                                           (y == args.positive_class).astype(int))
        report.auc = auc
        report.roc_points = [(f, t) for _, f, t in roc_points]
    evaluate.report_write(report, args.report, "json")
    if args.csv:
        evaluate.report_write(report, args.csv, "csv")
    if args.roc_csv and roc_points is not None:
        evaluate.roc_csv_write(roc_points, args.roc_csv)
    if args.labels_out:
        with open(args.labels_out, "w", encoding="utf-8") as fh:
            json.dump({"labels": [int(v) for v in y]}, fh)
            fh.write("\n")
    write_config(args.report, "eval", args)

    print(f"eval {args.subset}: accuracy {report.accuracy * 100:.2f}%, "
          f"avg FPR {report.avg_fpr * 100:.3f}%, avg TPR {report.avg_tpr * 100:.2f}%")
    if report.f1 is not None:
        print(f"  F1 {report.f1 * 100:.2f}%, AUC {report.auc:.4f}")
    return 0


def cmd_explain(args) -> int:
    clf, pca, meta = baselines.load_model(args.model)
    c = corpus.load_corpus(args.store)
    if args.image_id not in c.images:
        raise DataError(f"image id {args.image_id!r} not in store")
    img = c.images[args.image_id]
    kind = meta["input"]["kind"]

    if kind == "embeddings":
        raise UsageError("embedding-input models cannot explain pixel images")

    model_side = (smallcnn.SmallCnn.SIDE if kind == "image"
                  else meta["input"]["side"])

    def predict_fn(batch):
        if batch.shape[1] != model_side:
            batch = np.stack([imaging.resize_bilinear(b, model_side)
                              for b in batch])
        if kind == "image":
            return clf.predict_proba(batch)
        flat = batch.reshape(len(batch), -1).astype(np.float64)
        if pca is not None:
            flat = numerics.pca_transform(pca, flat)
        return clf.predict_proba(flat)

    seg, explanations = interpret.explain(
        predict_fn, img, top=args.top, k=args.superpixels,
        n_samples=args.samples, seed=args.seed, compactness=args.compactness,
        iters=args.iters, sparsity=args.sparsity, fill=args.fill)
    params = {"superpixels": args.superpixels, "samples": args.samples,
              "top": args.top, "compactness": args.compactness,
              "iters": args.iters, "sparsity": args.sparsity,
              "n_segments": seg.n_segments, "image_id": args.image_id}
    interpret.explanation_write(args.out, explanations, args.seed, params)
    if args.overlay_prefix:
        for exp in explanations:
            interpret.render_overlay(img, seg, exp,
                                     f"{args.overlay_prefix}{exp.target_class}.ppm")
    write_config(args.out, "explain", args)
    top_exp = explanations[0]
    print(f"explained {args.image_id}: {seg.n_segments} segments, top class "
          f"{top_exp.target_class}, local fit r2 {top_exp.local_fit_r2:.3f}")
    return 0


def cmd_ensemble(args) -> int:
    p1 = evaluate.read_probs(args.probs[0])
    p2 = evaluate.read_probs(args.probs[1])
    with open(args.labels, encoding="utf-8") as fh:
        y = json.load(fh)["labels"]
    if args.threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        grid = [round(i * args.grid, 12)
                for i in range(int(np.ceil(1.0 / args.grid)) + 1)]
        grid = [a for a in grid if a < 1.0] + [1.0]
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            values = list(pool.map(
                lambda a: ensemble.metric_value(
                    args.metric, ensemble.combine(p1, p2, a), y), grid))
        curve = list(zip(grid, [float(v) for v in values]))
        best_idx = int(np.argmax([v for _, v in curve]))
        result = ensemble.CombinationResult(
            alpha=curve[best_idx][0], objective_value=curve[best_idx][1],
            metric_name=args.metric, grid_step=args.grid,
            per_alpha_curve=curve)
    else:
        result = ensemble.optimize_alpha(p1, p2, y, metric=args.metric,
                                         grid_step=args.grid)
    ensemble.result_write(result, args.out)
    if args.curve_csv:
        ensemble.curve_csv_write(result, args.curve_csv)
    write_config(args.out, "ensemble", args)
    print(f"best alpha {result.alpha} with {args.metric} = "
          f"{result.objective_value:.4f}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="malimage",
                     description="Vision-based malware classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--families", type=int, default=4)
    p.add_argument("--per-family", type=int, default=200)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--min-kb", type=float, default=6.0)
    p.add_argument("--max-kb", type=float, default=48.0)
    p.add_argument("--noise", type=int, default=32)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--sigma", type=float, default=0.2)
    p.add_argument("--embeddings-out", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert", help="binaries to .mimg image store")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-store", required=True)
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--min-kb", type=float, default=None)
    p.add_argument("--small-out", default=None,
                   help="also write a 28x28 store here")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("split", help="stratified train/val/test split")
    p.add_argument("--store", required=True)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="fit a classifier on a split")
    p.add_argument("--model", required=True, choices=MODEL_CHOICES)
    p.add_argument("--store", required=True)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pca", type=int, default=None)
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--lr", type=float, default=None,
                   help="default 1e-3 for smallcnn (Adam), 0.1 otherwise")
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=int, default=5, help="kNN neighbors")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3,
                   help="SVM regularization")
    p.add_argument("--hidden", type=int, default=128, help="MLP width")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics report on a split subset")
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--embeddings", default=None)
    p.add_argument("--split", required=True)
    p.add_argument("--subset", default="test", choices=("train", "val", "test"))
    p.add_argument("--report", required=True)
    p.add_argument("--probs", default=None, help=".mprob output path")
    p.add_argument("--csv", default=None, help="also write a CSV report")
    p.add_argument("--roc-csv", default=None)
    p.add_argument("--labels-out", default=None)
    p.add_argument("--positive-class", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="super-pixel surrogate explanation")
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlay-prefix", default=None,
                   help="write <prefix><class>.ppm overlays")
    p.add_argument("--superpixels", type=int, default=200)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--compactness", type=float, default=10.0)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--sparsity", type=int, default=10)
    p.add_argument("--fill", default="segment_mean",
                   choices=("segment_mean", "zero"))
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("ensemble", help="convex combination of two prob files")
    p.add_argument("--probs", nargs=2, required=True, metavar=("A", "B"))
    p.add_argument("--labels", required=True)
    p.add_argument("--metric", default="accuracy", choices=ensemble.METRICS)
    p.add_argument("--grid", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.add_argument("--curve-csv", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_ensemble)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Diverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 3
    except (MalimageError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()

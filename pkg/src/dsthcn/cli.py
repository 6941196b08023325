"""Command-line interface: ``dsthcn <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import archive, data, plotting
from . import hypergraph as hg
from .config import ConfigError, RunConfig, load_config, with_seed
from .data import FormatError, atomic_write, read_skl
from .layers import DSTHCN, TOPOLOGIES, CrossHypergraph, ModelConfig, param_count, spatial_topologies
from .numcore import DimensionError, InputError, NumericError
from .skeleton import get_skeleton
from .training import (
    DEFAULT_FUSION_WEIGHTS, StreamKind, fuse_scores, metrics_csv, prepare_inputs, train_loop,
)

log = logging.getLogger("dsthcn")

FEATURES = ("A", "B", "C", "D", "E", "concat", "F_topology", "F_out", "Z_out", "out")


class CLIError(Exception):
    pass


def _threads(args):
    n = args.threads if getattr(args, "threads", None) else os.environ.get("DSTHCN_THREADS", 1)
    try:
        n = int(n)
    except ValueError:
        raise CLIError(f"thread count must be an integer, got {n!r}") from None
    if n < 1:
        raise CLIError("thread count must be >= 1")
    return n


def _fmt(x):
    return "%.9g" % x


def _matrix_csv(mat, row_label, col_prefix):
    mat = np.atleast_2d(mat)
    lines = [row_label + "," + ",".join(f"{col_prefix}{j}" for j in range(mat.shape[1]))]
    for i, row in enumerate(mat):
        lines.append(f"{i}," + ",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def _read_dataset(path, allow_empty=False):
    ds = read_skl(path)
    if not allow_empty and len(ds) == 0:
        raise FormatError(f"{path} holds no samples", 16)
    return ds


def _skeleton_for(ds):
    if ds.skeleton == "custom":
        raise CLIError("custom skeletons carry no definition; use ntu25 or ucla20 data")
    return get_skeleton(ds.skeleton)


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args):
    total = args.per_class + (args.val_per_class if args.val_out else 0)
    ds = data.gen_synthetic(args.classes, total, args.frames, args.skeleton, args.seed,
                            noise=args.noise, jitter=args.jitter)
    if args.val_out:
        train, val = data.split_per_class(ds, args.per_class)
        data.write_skl(args.out, train)
        data.write_skl(args.val_out, val)
        print(f"wrote {len(train)} samples to {args.out} and {len(val)} to {args.val_out}")
    else:
        data.write_skl(args.out, ds)
        print(f"wrote {len(ds)} samples to {args.out}")


# ---------------------------------------------------------------------------
# train / eval


def _model_meta(cfg, ds, stream, in_channels, frames):
    return {
        "model": dataclasses.asdict(cfg.model),
        "skeleton": ds.skeleton,
        "num_classes": ds.num_classes,
        "in_channels": in_channels,
        "frames": frames,
        "stream": stream,
        "preprocess": cfg.preprocess,
        "seed": cfg.seed,
    }


def _inputs(ds, sk, stream, preprocess, dual_correlation):
    x, y = ds.arrays()
    if x.shape[1] != 3 and preprocess:
        raise CLIError(f"preprocessing expects 3 coordinate channels, data has {x.shape[1]}")
    return prepare_inputs(x, sk, stream, preprocess, dual_correlation), y


def build_model(meta):
    cfg = ModelConfig(**meta["model"])
    return DSTHCN(cfg, get_skeleton(meta["skeleton"]), meta["num_classes"],
                  meta["in_channels"], meta["frames"], seed=meta["seed"])


def load_model(path):
    state, meta, _ = archive.load_archive(path)
    model = build_model(meta)
    archive.load_state(model, state)
    model.eval()
    return model, meta


def cmd_train(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        with_seed(cfg, args.seed)
    data_path = args.data or cfg.data
    out_dir = args.out_dir or cfg.out_dir
    val_path = args.val or cfg.val
    if not data_path or not out_dir:
        raise CLIError("--data and --out-dir are required (flag or config)")
    ds = _read_dataset(data_path)
    sk = _skeleton_for(ds)
    stream = StreamKind(args.stream)
    x, y = _inputs(ds, sk, stream, cfg.preprocess, cfg.model.dual_correlation)
    if val_path:
        vds = _read_dataset(val_path)
        if (vds.skeleton, vds.num_classes) != (ds.skeleton, ds.num_classes):
            raise CLIError("validation data does not match the training data")
        xv, yv = _inputs(vds, sk, stream, cfg.preprocess, cfg.model.dual_correlation)
        if xv.shape[1:] != x.shape[1:]:
            raise CLIError(f"validation samples are {xv.shape[1:]}, training {x.shape[1:]}")
    else:
        xv, yv = x[:0], y[:0]
    frames = x.shape[2]
    if frames < 2 ** sum(s == 2 for s in cfg.model.strides):
        raise CLIError(f"{frames} frames are too few for the configured strides")
    model = DSTHCN(cfg.model, sk, ds.num_classes, x.shape[1], frames, seed=cfg.seed)
    log.info("model has %d parameters", param_count(model))
    result = train_loop(model, (x, y), (xv, yv), cfg.train)

    os.makedirs(out_dir, exist_ok=True)
    meta = _model_meta(cfg, ds, stream.value, x.shape[1], frames)
    meta["best_epoch"] = result.best_epoch
    state, kinds = archive.model_state(model)
    archive.save_archive(os.path.join(out_dir, "last.json"), state, meta, kinds)
    archive.save_archive(os.path.join(out_dir, "model.json"), result.best_state, meta, kinds)
    atomic_write(os.path.join(out_dir, "metrics.csv"), metrics_csv(result.history))
    resolved = cfg.to_dict() | {"data": data_path, "val": val_path, "out_dir": out_dir}
    atomic_write(os.path.join(out_dir, "config.json"), json.dumps(resolved, indent=1) + "\n")
    if not args.no_plots:
        plotting.plot_metrics(result.history, os.path.join(out_dir, "metrics.png"))
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs: train_acc {last.train_acc:.4f} "
          f"val_acc {last.val_acc:.4f} best_epoch {result.best_epoch}")


def evaluate(model, meta, ds, batch_size=64):
    sk = get_skeleton(meta["skeleton"])
    if ds.skeleton != meta["skeleton"] or ds.num_classes != meta["num_classes"]:
        raise CLIError("data does not match the model's skeleton or class count")
    x, y = _inputs(ds, sk, meta["stream"], meta["preprocess"], meta["model"]["dual_correlation"])
    if x.shape[1:] != (meta["in_channels"], meta["frames"], sk.num_joints):
        raise CLIError(f"samples are {x.shape[1:]}, the model expects "
                       f"{(meta['in_channels'], meta['frames'], sk.num_joints)}")
    return model.predict_proba(x, batch_size), y


def scores_csv(scores):
    k = scores.shape[1]
    lines = ["sample," + ",".join(f"score_{j}" for j in range(k))]
    for i, row in enumerate(scores):
        lines.append(f"{i}," + ",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def read_scores(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if not header or header[0] != "sample" or not all(h.startswith("score_") for h in header[1:]):
            raise CLIError(f"{path}: not a scores CSV")
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return arr[:, 1:] if arr.size else np.zeros((0, len(header) - 1))


def cmd_eval(args):
    model, meta = load_model(args.model)
    ds = _read_dataset(args.data)
    scores, y = evaluate(model, meta, ds)
    acc = float(np.mean(scores.argmax(axis=1) == y))
    if args.scores_out:
        atomic_write(args.scores_out, scores_csv(scores))
    print(f"top1 {acc:.6f} ({int(round(acc * len(y)))}/{len(y)})")


def cmd_fuse(args):
    scores = [read_scores(p) for p in args.scores]
    rows = {s.shape for s in scores}
    if len(rows) != 1:
        raise CLIError(f"score files disagree in shape: {sorted(rows)}")
    if args.weights:
        try:
            weights = [float(w) for w in args.weights.split(",")]
        except ValueError:
            raise CLIError(f"bad --weights {args.weights!r}") from None
    elif len(scores) == 4:
        weights = list(DEFAULT_FUSION_WEIGHTS.values())
    else:
        weights = [1.0] * len(scores)
    fused, pred = fuse_scores(scores, weights)
    if args.out:
        lines = ["sample,prediction"] + [f"{i},{p}" for i, p in enumerate(pred)]
        atomic_write(args.out, "\n".join(lines) + "\n")
    if args.data:
        _, y = _read_dataset(args.data).arrays()
        if len(y) != len(pred):
            raise CLIError(f"{len(pred)} fused rows for {len(y)} labelled samples")
        acc = float(np.mean(pred == y))
        print(f"top1 {acc:.6f} ({int(round(acc * len(y)))}/{len(y)})")
    else:
        print(f"fused {len(pred)} samples")


# ---------------------------------------------------------------------------
# inspection and export


def _block_input(model, x, block):
    if not 0 <= block < len(model.blocks):
        raise CLIError(f"block must lie in [0, {len(model.blocks)})")
    model.eval()
    h = model.stem.forward(x)
    for b in model.blocks[:block]:
        h = b.forward(h)
    return h


def _write_hypergraph(out_dir, prefix, H, plots, signed=False):
    inc = hg.IncidenceMatrix(H)
    op = hg.normalize(inc).matrix
    atomic_write(os.path.join(out_dir, f"{prefix}H.csv"), _matrix_csv(inc.H, "node", "edge"))
    atomic_write(os.path.join(out_dir, f"{prefix}W.csv"),
                 "edge,weight\n" + "".join(f"{e},{_fmt(w)}\n" for e, w in enumerate(inc.weights)))
    atomic_write(os.path.join(out_dir, f"{prefix}Htilde.csv"), _matrix_csv(op, "node", "node"))
    if plots:
        plotting.plot_matrix(inc.H, os.path.join(out_dir, f"{prefix}H.png"),
                             f"{prefix}incidence", "hyperedge", "node", signed=signed)
        plotting.plot_matrix(op, os.path.join(out_dir, f"{prefix}Htilde.png"),
                             f"{prefix}normalised operator", "node", "node", signed=signed)


def cmd_inspect(args):
    ds = _read_dataset(args.data)
    sk = _skeleton_for(ds)
    if not 0 <= args.sample < len(ds):
        raise CLIError(f"sample must lie in [0, {len(ds)})")
    cfg = ModelConfig()
    k_sp = args.k if args.k is not None else cfg.k_spatial
    clusters = args.clusters if args.clusters is not None else cfg.kmeans_clusters
    plots = not args.no_plots
    os.makedirs(args.out, exist_ok=True)
    if args.what == "spatial-knn":
        _write_hypergraph(args.out, "", hg.spatial_knn(sk, k_sp).H, plots)
        return
    if args.what == "spatial-kmeans":
        _write_hypergraph(args.out, "", hg.spatial_kmeans(sk, clusters, args.seed).H, plots)
        return
    if args.what == "spatial-parts":
        _write_hypergraph(args.out, "", hg.spatial_parts(sk).H, plots)
        return

    # time-point and cross hypergraphs depend on features and learned maps
    if args.model:
        model, meta = load_model(args.model)
        x = np.asarray(_inputs_for(meta, ds, args.sample, sk), model.dtype)
        h = _block_input(model, x, args.block)
        block = model.blocks[args.block]
        h_t = block.tph.forward(h)[0][0]
        cross = block.cross[TOPOLOGIES.index(args.topology)]
    else:
        x = prepare_inputs(ds.samples[args.sample].tensor[None].astype(float), sk)
        t = x.shape[2]
        k_t = min(args.k if args.k is not None else cfg.k_temporal, t)
        rng = np.random.default_rng(args.seed)
        reducer = rng.standard_normal((x.shape[1], hg.reduced_dim(x.shape[1])))
        h_t = hg.tph_knn(x[0], k_t, reducer).H
        h_n = spatial_topologies(sk, cfg)[TOPOLOGIES.index(args.topology)]
        cross = CrossHypergraph(h_n, t, rng)
    if args.what == "tph":
        _write_hypergraph(args.out, "", h_t, plots)
        return
    h_st, h_ts = hg.cross_hypergraphs(
        cross.h_n, h_t, cross.mu_st.value, cross.phi_st.value, cross.mu_ts.value, cross.phi_ts.value
    )
    _write_hypergraph(args.out, "st_", h_st, plots, signed=True)
    _write_hypergraph(args.out, "ts_", h_ts, plots, signed=True)


def _inputs_for(meta, ds, index, sk):
    one = data.Dataset(ds.skeleton, ds.num_classes, [ds.samples[index]])
    x, _ = _inputs(one, sk, meta["stream"], meta["preprocess"], meta["model"]["dual_correlation"])
    return x


def cmd_export_features(args):
    model, meta = load_model(args.model)
    ds = _read_dataset(args.data)
    sk = _skeleton_for(ds)
    if not 0 <= args.sample < len(ds):
        raise CLIError(f"sample must lie in [0, {len(ds)})")
    if not 0 <= args.block < len(model.blocks):
        raise CLIError(f"block must lie in [0, {len(model.blocks)})")
    x = np.asarray(_inputs_for(meta, ds, args.sample, sk), model.dtype)
    model.eval()
    model.forward(x)
    feats = model.blocks[args.block].features
    f = feats[args.feature]
    if args.feature in ("A", "D", "E", "concat", "F_topology"):
        f = f[TOPOLOGIES.index(args.topology)]
    f = np.asarray(f[0], dtype=float)
    atomic_write(args.out, data.feature_csv(f))
    if not args.no_plots:
        plotting.plot_feature(f, os.path.splitext(args.out)[0] + ".png",
                              f"block {args.block} {args.feature}")


def cmd_export_sample(args):
    ds = _read_dataset(args.data)
    if not 0 <= args.sample < len(ds):
        raise CLIError(f"sample must lie in [0, {len(ds)})")
    x = ds.samples[args.sample].tensor.astype(float)
    if args.preprocess:
        x = data.preprocess(x, _skeleton_for(ds))
    atomic_write(args.out, data.feature_csv(x))
    if not args.no_plots:
        plotting.plot_feature(x, os.path.splitext(args.out)[0] + ".png", f"sample {args.sample}")


def cmd_params(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    sk = get_skeleton(args.skeleton)
    model = DSTHCN(cfg.model, sk, args.classes, args.in_channels, args.frames, seed=cfg.seed)
    print(param_count(model))


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="dsthcn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic SKL dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--per-class", type=int, default=16)
    g.add_argument("--frames", type=int, default=20)
    g.add_argument("--skeleton", default="ntu25", choices=["ntu25", "ucla20"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.01)
    g.add_argument("--jitter", type=float, default=1.0)
    g.add_argument("--val-out", help="also write a held-out split here")
    g.add_argument("--val-per-class", type=int, default=8)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one input stream")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--val")
    t.add_argument("--out-dir")
    t.add_argument("--stream", default="joint", choices=[s.value for s in StreamKind])
    t.add_argument("--seed", type=int)
    t.add_argument("--threads", type=int)
    t.add_argument("--no-plots", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a dataset with a trained model")
    e.add_argument("--model", required=True, help="archive manifest (model.json)")
    e.add_argument("--data", required=True)
    e.add_argument("--scores-out")
    e.add_argument("--threads", type=int)
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fuse", help="weighted fusion of per-stream scores")
    f.add_argument("--scores", nargs="+", required=True)
    f.add_argument("--weights", help="comma-separated, one per scores file")
    f.add_argument("--data", help="labelled SKL file for accuracy")
    f.add_argument("--out", help="write fused predictions CSV")
    f.set_defaults(func=cmd_fuse)

    i = sub.add_parser("inspect", help="dump a hypergraph (H, W, normalised operator)")
    i.add_argument("--data", required=True)
    i.add_argument("--sample", type=int, default=0)
    i.add_argument("--what", required=True,
                   choices=["tph", "spatial-knn", "spatial-kmeans", "spatial-parts", "cross"])
    i.add_argument("--out", required=True, help="output directory")
    i.add_argument("--model", help="use a trained model's learned maps")
    i.add_argument("--block", type=int, default=0)
    i.add_argument("--topology", default="knn", choices=TOPOLOGIES)
    i.add_argument("--k", type=int)
    i.add_argument("--clusters", type=int)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--no-plots", action="store_true")
    i.set_defaults(func=cmd_inspect)

    x = sub.add_parser("export-features", help="dump a block's intermediate features")
    x.add_argument("--model", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--sample", type=int, default=0)
    x.add_argument("--block", type=int, default=0)
    x.add_argument("--feature", default="F_out", choices=FEATURES)
    x.add_argument("--topology", default="knn", choices=TOPOLOGIES)
    x.add_argument("--out", required=True)
    x.add_argument("--no-plots", action="store_true")
    x.set_defaults(func=cmd_export_features)

    s = sub.add_parser("export-sample", help="dump one sample as CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--sample", type=int, default=0)
    s.add_argument("--preprocess", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_export_sample)

    c = sub.add_parser("params", help="count the parameters of a configuration")
    c.add_argument("--config")
    c.add_argument("--skeleton", default="ntu25", choices=["ntu25", "ucla20"])
    c.add_argument("--classes", type=int, default=60)
    c.add_argument("--in-channels", type=int, default=3)
    c.add_argument("--frames", type=int, default=64)
    c.set_defaults(func=cmd_params)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_threads(args)):
            args.func(args)
    except (CLIError, ConfigError, FormatError, InputError, DimensionError,
            NumericError, OSError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"dsthcn {args.command}: error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

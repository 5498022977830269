"""Command line: ``imip {train,eval,pairs,compress,report}``.

Failures print a single line ``imip: error: <kind>: <message>`` on stderr and
exit nonzero (2 for usage problems, 1 otherwise).
"""
import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import bench
from .binio import ContainerError
from .compression import (
    load_descriptors,
    payload_bytes,
    pca_fit,
    pca_project,
    pca_reconstruct,
    pq_decode,
    pq_encode,
    pq_fit,
    representation_size_bytes,
    save_pca,
    save_pq,
)
from .network import NetworkConfig, init_weights, load_params, save_params
from .training import TrainConfig, train

log = logging.getLogger("imip")


class CliError(Exception):
    def __init__(self, kind, message, code=1):
        super().__init__(message)
        self.kind, self.code = kind, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message, 2)


def _read_toml(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _fields(cls, table, where):
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(table) - known
    if extra:
        raise CliError("config", f"unknown keys in [{where}]: {', '.join(sorted(extra))}")
    return dict(table)


# -- train ---------------------------------------------------------------------

def _training_pairs(data, root, seed):
    """List of (img_a, img_b, psi) from the [data] table."""
    from .correspondence import KltChainCorrespondence
    from .klt import TRAIN_OVERLAP
    from .synthetic import homography_pair

    if "dataset" in data:
        ds = bench.open_dataset(root / data["dataset"])
        if isinstance(ds, bench.HomographyPairs):
            from .correspondence import HomographyCorrespondence
            out = []
            for pa, pb, H in ds.pairs:
                a, b = bench.load_image(pa), bench.load_image(pb)
                out.append((a, b, HomographyCorrespondence(H, a.shape, b.shape)))
            return out
        frames = ds.frames()
        pairs = bench.sample_sequence_pairs(frames, int(data.get("pairs", 100)),
                                            float(data.get("overlap", TRAIN_OVERLAP)), seed)
        if not pairs:
            raise CliError("data", "no frame pair reaches the overlap threshold")
        return [(frames[a], frames[b], KltChainCorrespondence(frames, a, b)) for a, b in pairs]
    count = int(data.get("synthetic_pairs", 0))
    if count <= 0:
        raise CliError("config", "[data] needs either dataset or synthetic_pairs")
    shape = tuple(data.get("shape", (64, 64)))
    return [homography_pair(shape, seed=seed + i, angle_deg=float(data.get("angle_deg", 10.0)))
            for i in range(count)]


def cmd_train(args):
    cfg = _read_toml(args.config)
    root = Path(args.config).parent
    net_cfg = NetworkConfig(**_fields(NetworkConfig, cfg.get("network", {}), "network"))
    tr_cfg = TrainConfig(**_fields(TrainConfig, cfg.get("training", {}), "training"))
    out = Path(args.out or root / cfg.get("output", {}).get("params", "params.imip"))
    params = load_params(args.init) if args.init else init_weights(net_cfg)
    if tr_cfg.iterations == 0:
        save_params(params, out)
        print(f"wrote {out} iterations=0")
        return 0
    data = cfg.get("data", {})
    samples = _training_pairs(data, root, tr_cfg.seed)
    val = _training_pairs(data["validation"], root, tr_cfg.seed + 10_000) if "validation" in data else None
    best, tlog = train(samples, params, tr_cfg, val_pairs=val)
    save_params(best, out)
    log_path = args.log or cfg.get("output", {}).get("log")
    if log_path:
        tlog.write_csv(log_path)
    last = tlog.rows[-1]
    print(f"wrote {out} iterations={tr_cfg.iterations} last_inliers={last['inlier_count']}")
    return 0


# -- eval / pairs ------------------------------------------------------------------

def cmd_eval(args):
    params = load_params(args.params)
    ds = bench.open_dataset(args.dataset)
    config = bench.EvalConfig(count=args.count, pair_seed=args.seed, overlap_o=args.o,
                              ransac_seed=args.ransac_seed, workers=args.workers)
    pairs = bench.read_pairs_file(args.pairs) if args.pairs else None
    records = bench.evaluate_pairs(ds, params, config, pairs=pairs, out_csv=args.out, cache_dir=args.cache)
    if args.hist:
        bench.write_histogram_csv(args.hist, bench.inlierness_histogram(records, args.bins))
    ms = np.mean([r.matching_score for r in records]) if records else float("nan")
    line = f"pairs={len(records)} mean_matching_score={ms:.6f}"
    if isinstance(ds, bench.SequenceStereo) and records:
        for preset in sorted(bench.ACCURACY_PRESETS):
            line += f" accuracy_{preset}={bench.accuracy(records, preset=preset):.6f}"
    print(line)
    return 0


def cmd_pairs(args):
    ds = bench.open_dataset(args.dataset)
    if not isinstance(ds, bench.SequenceStereo):
        raise CliError("data", "pair sampling needs a sequence dataset")
    pairs = bench.sample_sequence_pairs(ds.frames(), args.count, args.o, args.seed, cache_dir=args.cache)
    if args.out:
        bench.write_pairs_file(args.out, pairs)
    else:
        sys.stdout.write("".join(f"{a} {b}\n" for a, b in pairs))
    if len(pairs) < args.count:
        log.warning("only %d of %d pairs reach overlap %.2f", len(pairs), args.count, args.o)
    return 0


# -- compress ------------------------------------------------------------------------

def cmd_compress(args):
    if args.method == "pca":
        if args.k is None:
            raise CliError("usage", "pca needs --k", 2)
        size_kw = dict(k=args.k)
    elif args.method == "pq":
        if args.k is None or args.m is None:
            raise CliError("usage", "pq needs --m and --k", 2)
        size_kw = dict(m=args.m, k=args.k)
    else:
        if args.d is None:
            raise CliError("usage", "raw needs --d", 2)
        size_kw = dict(d=args.d, bytes_per_scalar=args.bytes_per_scalar)
    line = (f"method={args.method} payload_bytes={payload_bytes(args.method, **size_kw)} "
            f"frame_bytes={representation_size_bytes(args.method, n_pts=args.n_pts, **size_kw)}")
    if args.descriptors:
        X = load_descriptors(args.descriptors)
        if args.method == "pca":
            model = pca_fit(X, args.k)
            rec = pca_reconstruct(model, pca_project(model, X))
            if args.out:
                save_pca(args.out, model)
        elif args.method == "pq":
            model = pq_fit(X, args.m, args.k, seed=args.seed)
            rec = pq_decode(model, pq_encode(model, X))
            if args.out:
                save_pq(args.out, model)
        else:
            rec = X
        line += f" mse={np.mean((X - rec) ** 2):.6f}"
    print(line)
    return 0


# -- report ----------------------------------------------------------------------------

def cmd_report(args):
    cfg = _read_toml(args.runs)
    root = Path(args.runs).parent
    groups = []
    for run in cfg.get("run", []):
        run = dict(run)
        method = run.pop("method")
        label = run.pop("label", method)
        records = bench.read_results_csv(root / run.pop("results"))
        groups.append(bench.MethodGroup(label, method, run, records))
    preset = args.preset or cfg.get("preset", "kitti")
    rows = bench.size_accuracy_report(groups, preset=preset)
    text = bench.report_csv(rows)
    if args.csv:
        Path(args.csv).write_text(text)
    else:
        sys.stdout.write(text)
    if args.svg:
        Path(args.svg).write_text(bench.report_svg(rows, title=f"accuracy ({preset}) vs bytes per frame"))
    return 0


def build_parser():
    p = _Parser(prog="imip", description="Descriptor-free interest points: training and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a detector from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--log")
    t.add_argument("--init", help="start from an existing params file")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate params on a dataset, write the results CSV")
    e.add_argument("--params", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--pairs")
    e.add_argument("--count", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--o", type=float, default=0.5)
    e.add_argument("--ransac-seed", type=int, default=0)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--hist")
    e.add_argument("--bins", type=int, default=10)
    e.add_argument("--cache")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("pairs", help="sample frame pairs by KLT overlap")
    q.add_argument("--dataset", required=True)
    q.add_argument("--o", type=float, default=0.5)
    q.add_argument("--count", type=int, default=100)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out")
    q.add_argument("--cache")
    q.set_defaults(func=cmd_pairs)

    c = sub.add_parser("compress", help="size accounting and descriptor compression baselines")
    c.add_argument("--method", choices=["raw", "pca", "pq"], required=True)
    c.add_argument("--descriptors")
    c.add_argument("--k", type=int)
    c.add_argument("--m", type=int)
    c.add_argument("--d", type=int)
    c.add_argument("--bytes-per-scalar", type=int, default=4)
    c.add_argument("--n-pts", type=int, default=128)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compress)

    r = sub.add_parser("report", help="accuracy vs representation size table and SVG")
    r.add_argument("--runs", required=True)
    r.add_argument("--csv")
    r.add_argument("--svg")
    r.add_argument("--preset", choices=sorted(bench.ACCURACY_PRESETS))
    r.set_defaults(func=cmd_report)
    return p


def _one_line(msg):
    return " ".join(str(msg).split())


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="imip: %(levelname)s: %(message)s")
        return args.func(args)
    except CliError as e:
        print(f"imip: error: {e.kind}: {_one_line(e)}", file=sys.stderr)
        return e.code
    except FileNotFoundError as e:
        print(f"imip: error: missing-file: {_one_line(e)}", file=sys.stderr)
        return 1
    except (ContainerError, bench.DatasetError, tomllib.TOMLDecodeError) as e:
        print(f"imip: error: bad-input: {_one_line(e)}", file=sys.stderr)
        return 1
    except (ValueError, TypeError, IndexError, KeyError) as e:
        print(f"imip: error: invalid: {_one_line(e)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

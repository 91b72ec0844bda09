"""Command-line entry point: ``gcnn {train,eval,gradcheck,inspect-filters,coarsen-report}``.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure, 3 IO/format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from gcnn.coarsen import amg_coarsen, polarity_split
from gcnn.data import TEST_FILES, TRAIN_FILES, load_mnist_dir, read_manifest, subsample_dataset, write_manifest
from gcnn.errors import ConfigError, FormatError, GCNNError, InvalidArgument
from gcnn.graph import build_grid_graph, laplacian, read_edge_list, restrict_graph, write_edge_list
from gcnn.network import (
    NetworkConfig,
    build_network,
    load_checkpoint,
    save_checkpoint,
    train,
    write_metrics,
)
from gcnn.spectral import dump_basis, eigendecompose
from gcnn import verify

log = logging.getLogger("gcnn")

GRID_ROWS = GRID_COLS = 28


@dataclass
class ExperimentConfig:
    command: str = "train"
    data_dir: str = os.environ.get("GCNN_MNIST_DIR", "data/mnist")
    grid: str = "regular"
    exclude: int = 84
    seed: int = 0
    out: str = "runs/latest"
    train_limit: int | None = None
    test_limit: int | None = None
    weight_mode: str = "binary"
    deterministic: bool = False
    threads: int | None = None
    graph_in: str | None = None
    graph_out: str | None = None
    dump_basis: str | None = None
    net: NetworkConfig = field(default_factory=NetworkConfig)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "net"}
        d["net"] = self.net.to_dict()
        return d


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    shared = argparse.ArgumentParser(add_help=False, argument_default=S)
    shared.add_argument("--config", help="JSON file with option values; flags override it")
    shared.add_argument("--data-dir", dest="data_dir", help="directory holding the MNIST IDX files")
    shared.add_argument("--grid", choices=["regular", "subsampled"])
    shared.add_argument("--exclude", type=int, help="vertices removed for the subsampled grid")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--epochs", type=int)
    shared.add_argument("--beta", type=float)
    shared.add_argument("--levels", type=int, dest="pool_levels")
    shared.add_argument("--weight-mode", dest="weight_mode", choices=["binary", "euclidean"])
    shared.add_argument("--deterministic", action="store_true")
    shared.add_argument("--threads", type=int)
    shared.add_argument("--graph-in", dest="graph_in")
    shared.add_argument("--graph-out", dest="graph_out")
    shared.add_argument("--dump-basis", dest="dump_basis")
    shared.add_argument("--architecture")
    shared.add_argument("--lr", type=float)
    shared.add_argument("--momentum", type=float)
    shared.add_argument("--batch-size", dest="batch_size", type=int)
    shared.add_argument("--train-limit", dest="train_limit", type=int)
    shared.add_argument("--test-limit", dest="test_limit", type=int)
    shared.add_argument("--relu-after-conv", dest="relu_after_conv", action="store_true")
    shared.add_argument("--knot-domain", dest="knot_domain", choices=["rank", "value"])
    shared.add_argument("--gradient", choices=["proposed", "naive"], help="backprop formulation used in training")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="gcnn", description="Train, evaluate and verify spectral graph CNNs on MNIST grids.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[shared], help="train a network and log per-epoch test accuracy")
    t.add_argument("--tracked-weights", dest="tracked_weights", type=int, default=S)

    e = sub.add_parser("eval", parents=[shared], help="test accuracy of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--manifest", default=S, help="manifest.json of the run (default: next to the checkpoint)")
    e.add_argument("--tracked-weights", dest="tracked_weights", type=int, default=S)

    g = sub.add_parser("gradcheck", parents=[shared], help="finite-difference gradient study")
    g.add_argument("--target", choices=["data", "filters", "tracked", "all"], default="all")
    g.add_argument("--variant", choices=["proposed", "naive", "both"], default="both")
    g.add_argument("--tracked-weights", dest="gc_tracked", type=_int_list, default=[60])
    g.add_argument("--runs", type=int, default=100)
    g.add_argument("--step", type=float, default=1e-4)
    g.add_argument("--forward-diff", dest="forward_diff", action="store_true")
    g.add_argument("--samples", type=int, default=1)
    g.add_argument("--channels", type=_int_list, default=[1, 1], help="input,output channel counts")

    i = sub.add_parser("inspect-filters", parents=[shared], help="dump interpolated filters and feature maps")
    i.add_argument("checkpoint")
    i.add_argument("--manifest", default=S)
    i.add_argument("--sample", type=int, default=0, help="test-set index whose feature maps are dumped")
    i.add_argument("--tracked-weights", dest="tracked_weights", type=int, default=S)

    c = sub.add_parser("coarsen-report", parents=[shared], help="coarsening statistics and coarse graphs")
    c.add_argument("--tracked-weights", dest="tracked_weights", type=int, default=S)
    return p


def resolve_config(ns: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then the JSON config file, then explicit flags."""
    values: dict = {}
    if getattr(ns, "config", None):
        try:
            values.update(json.loads(Path(ns.config).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {ns.config}: {exc}") from exc
        values.update(values.pop("net", {}) or {})
    values.update(vars(ns))
    cfg = ExperimentConfig(command=ns.command)
    net_fields = NetworkConfig.__dataclass_fields__
    net_values = {}
    for k, v in values.items():
        if k in net_fields:
            net_values[k] = v
        elif k in ExperimentConfig.__dataclass_fields__ and k not in ("net", "command"):
            setattr(cfg, k, v)
    net_values.setdefault("seed", cfg.seed)
    cfg.net = NetworkConfig(**{**cfg.net.to_dict(), **net_values})
    if cfg.grid not in ("regular", "subsampled"):
        raise ConfigError(f"unknown grid mode {cfg.grid!r}")
    return cfg


# ---------------------------------------------------------------- helpers


def _threads(cfg: ExperimentConfig):
    limit = 1 if cfg.deterministic else cfg.threads
    if limit is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


def _grid_graph(cfg: ExperimentConfig, excluded=None):
    """Graph on which signals live, plus kept vertex ids and excluded ids."""
    base = build_grid_graph(GRID_ROWS, GRID_COLS, weight_mode=cfg.weight_mode)
    if cfg.grid == "regular":
        kept, excluded = np.arange(base.n), np.zeros(0, dtype=np.int64)
    else:
        if excluded is None:
            rng = np.random.default_rng(cfg.seed)
            excluded = np.sort(rng.choice(base.n, size=cfg.exclude, replace=False))
        excluded = np.asarray(excluded, dtype=np.int64)
        keep = np.ones(base.n, dtype=bool)
        keep[excluded] = False
        kept = np.flatnonzero(keep)
    graph = base if cfg.grid == "regular" else restrict_graph(base, kept)
    if cfg.graph_in:
        loaded = read_edge_list(cfg.graph_in)
        if loaded.n != graph.n:
            raise ConfigError(f"--graph-in has {loaded.n} vertices but the signals have {graph.n}")
        graph = type(graph)(loaded.adjacency, vertex_labels=graph.vertex_labels, coords=graph.coords)
    if cfg.graph_out:
        write_edge_list(graph, cfg.graph_out)
    if cfg.dump_basis:
        dump_basis(eigendecompose(laplacian(graph)), cfg.dump_basis)
    return graph, kept, excluded


def _load_split(cfg, split, graph, kept):
    ds = load_mnist_dir(cfg.data_dir, split)
    ds = ds.head(cfg.train_limit if split == "train" else cfg.test_limit)
    if cfg.grid == "subsampled":
        ds = subsample_dataset(ds, kept, graph)
    elif cfg.graph_in:
        from gcnn.data import Dataset

        ds = Dataset(ds.images, ds.labels, graph)
    return ds


def _mnist_files(cfg, split):
    d = Path(cfg.data_dir)
    names = TRAIN_FILES if split == "train" else TEST_FILES
    out = []
    for name in names:
        for cand in (d / name, d / (name + ".gz")):
            if cand.exists():
                out.append(cand)
                break
    return out


def _config_from_manifest(ns, checkpoint) -> tuple[ExperimentConfig, list[int]]:
    manifest_path = getattr(ns, "manifest", None) or Path(checkpoint).parent / "manifest.json"
    cfg = resolve_config(ns)
    excluded = None
    if Path(manifest_path).exists():
        manifest = read_manifest(manifest_path)
        stored = manifest.get("config", {})
        merged = {**stored, **stored.get("net", {})}
        merged.pop("net", None)
        explicit = {k for k in vars(ns)}
        for k, v in merged.items():
            if k in explicit or k in ("command", "out"):
                continue
            if k in NetworkConfig.__dataclass_fields__:
                setattr(cfg.net, k, v)
            elif k in ExperimentConfig.__dataclass_fields__:
                setattr(cfg, k, v)
        excluded = manifest.get("excluded_vertices")
    return cfg, excluded


def _restore(cfg, excluded, checkpoint):
    graph, kept, excluded = _grid_graph(cfg, excluded)
    net = build_network(cfg.net, graph)
    net.load_params(load_checkpoint(checkpoint))
    return net, graph, kept


# ---------------------------------------------------------------- commands


def cmd_train(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    graph, kept, excluded = _grid_graph(cfg)
    train_set = _load_split(cfg, "train", graph, kept)
    test_set = _load_split(cfg, "test", graph, kept)
    write_manifest(out / "manifest.json", seed=cfg.seed, excluded=excluded, config=cfg.to_dict(),
                   files=_mnist_files(cfg, "train") + _mnist_files(cfg, "test"))

    net = build_network(cfg.net, graph)
    for line in net.describe():
        log.info(line)
    history = []

    def report(row):
        history.append(row)
        write_metrics(out / "metrics.csv", history)
        print(f"epoch {row.epoch:4d}  train_loss {row.train_loss:.4f}  test_accuracy {100 * row.test_accuracy:.2f}%", flush=True)

    result = train(net, train_set.batch(), train_set.labels, test_set.batch(), test_set.labels, cfg.net,
                   on_epoch=report, checkpoint_path=out / "best.ckpt", record_time=not cfg.deterministic)
    write_metrics(out / "metrics.csv", result.history)
    save_checkpoint(out / "final.ckpt", net.params)
    if result.failure:
        print(f"training stopped: {result.failure}", file=sys.stderr)
        return 2
    print(f"best test accuracy {100 * result.best_accuracy:.2f}% at epoch {result.best_epoch}")
    return 0


def cmd_eval(cfg: ExperimentConfig, checkpoint, excluded=None) -> float:
    net, graph, kept = _restore(cfg, excluded, checkpoint)
    test_set = _load_split(cfg, "test", graph, kept)
    acc = net.accuracy(test_set.batch(), test_set.labels)
    print(f"test_accuracy {acc!r}")
    return acc


def cmd_gradcheck(cfg: ExperimentConfig, ns) -> list:
    graph, _, _ = _grid_graph(cfg)
    if len(ns.channels) != 2:
        raise ConfigError("--channels takes exactly two integers: input,output")
    setup = verify.GradCheckSetup(graph=graph, samples=ns.samples, in_ch=ns.channels[0], out_ch=ns.channels[1],
                                  step=ns.step, forward_diff=ns.forward_diff, knot_domain=cfg.net.knot_domain)
    for m in ns.gc_tracked:
        if not 1 <= m <= graph.n:
            raise InvalidArgument(f"tracked weight count {m} outside 1..{graph.n}")
    targets = verify.TARGETS if ns.target == "all" else (ns.target,)
    reports = []
    for target in targets:
        reports.extend(verify.run_protocol(setup, target, ns.gc_tracked, ns.runs, cfg.seed, ns.variant))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    verify.write_reports_csv(out / "gradcheck.csv", reports)
    print(verify.format_reports(reports))
    return reports


def _write_map(path, graph, maps):
    """maps: (C, N) activations on ``graph``."""
    coords = graph.coords if graph.coords is not None else np.full((graph.n, 2), np.nan)
    header = ["vertex", "label", "row", "col"] + [f"ch{c}" for c in range(maps.shape[0])]
    lines = [",".join(header)]
    for v in range(graph.n):
        vals = [str(v), str(int(graph.vertex_labels[v])), repr(float(coords[v, 0])), repr(float(coords[v, 1]))]
        vals += [repr(float(x)) for x in maps[:, v]]
        lines.append(",".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_inspect(cfg: ExperimentConfig, checkpoint, sample: int, excluded=None) -> dict:
    net, graph, kept = _restore(cfg, excluded, checkpoint)
    test_set = _load_split(cfg, "test", graph, kept)
    if not 0 <= sample < len(test_set):
        raise InvalidArgument(f"sample index {sample} outside 0..{len(test_set) - 1}")
    out = Path(cfg.out)
    filt_dir, map_dir = out / "filters", out / "maps"
    filt_dir.mkdir(parents=True, exist_ok=True)
    map_dir.mkdir(parents=True, exist_ok=True)

    from gcnn.conv import interpolate_filters

    written = {"filters": [], "maps": []}
    for idx, layer in enumerate(net.layers):
        if layer.kind != "conv":
            continue
        k = interpolate_filters(layer.interp, net.layer_params(idx)["k_hat"])
        layer_dir = filt_dir / net.names[idx]
        layer_dir.mkdir(exist_ok=True)
        for i in range(k.shape[0]):
            for o in range(k.shape[1]):
                path = layer_dir / f"i{i}_o{o}.csv"
                rows = ["index,eigenvalue,value"]
                rows += [f"{b},{layer.basis.lam[b]!r},{k[i, o, b]!r}" for b in range(k.shape[2])]
                path.write_text("\n".join(rows) + "\n")
                written["filters"].append(path)

    x = test_set.batch([sample])
    _write_map(out / "input_signal.csv", graph, x[0])
    _, probs, acts = net.forward(x, keep_maps=True)
    g = graph
    for idx, (layer, (act, _)) in enumerate(zip(net.layers, acts)):
        if layer.kind == "pool":
            g = layer.hierarchy.coarse_graph
        if layer.kind not in ("conv", "pool"):
            continue
        path = map_dir / f"layer{idx}_{net.names[idx]}.csv"
        _write_map(path, g, act[0])
        written["maps"].append(path)
    print(f"sample {sample}: label {test_set.labels[sample]}, predicted {int(probs[0].argmax())}")
    print(f"wrote {len(written['filters'])} filter files and {len(written['maps'])} feature-map files under {out}")
    return written


def cmd_coarsen_report(cfg: ExperimentConfig) -> list:
    graph, _, _ = _grid_graph(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    h = amg_coarsen(graph, cfg.net.beta, cfg.net.pool_levels, seed=cfg.seed)
    print(f"level 0: {graph.n} vertices, {graph.num_edges} edges, {graph.num_components()} component(s)")
    counts = [graph.n]
    for depth, lvl in enumerate(h.levels, start=1):
        sizes = lvl.aggregate_sizes
        hist = np.bincount(sizes)
        desc = ", ".join(f"{s}:{c}" for s, c in enumerate(hist) if c)
        print(f"level {depth}: {lvl.coarse_graph.n} vertices, {lvl.coarse_graph.num_edges} edges; aggregate sizes {{{desc}}}")
        write_edge_list(lvl.coarse_graph, out / f"level{depth}.txt")
        counts.append(lvl.coarse_graph.n)
    kept, comp = polarity_split(eigendecompose(laplacian(graph)))
    print(f"polarity split of level 0: keep {kept.size}, complement {comp.size}")
    return counts


# ---------------------------------------------------------------- entry


def run(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(ns, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if ns.command in ("eval", "inspect-filters"):
            cfg, excluded = _config_from_manifest(ns, ns.checkpoint)
        else:
            cfg, excluded = resolve_config(ns), None
        with _threads(cfg):
            if ns.command == "train":
                return cmd_train(cfg)
            if ns.command == "eval":
                cmd_eval(cfg, ns.checkpoint, excluded)
            elif ns.command == "gradcheck":
                cmd_gradcheck(cfg, ns)
            elif ns.command == "inspect-filters":
                cmd_inspect(cfg, ns.checkpoint, ns.sample, excluded)
            else:
                cmd_coarsen_report(cfg)
        return 0
    except GCNNError as exc:
        print(f"gcnn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        print(f"gcnn: configuration error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"gcnn: I/O error: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Command-line entry point: ``spectral-attention <subcommand> ...``.

Exit codes:
  0  success
  1  unexpected internal error
  2  usage error (unknown flag, bad value)
  3  malformed or inconsistent configuration
  4  task mismatch between data and model
  5  missing or malformed data file
  6  gradient check failed
  7  training diverged (non-finite loss)

Failures print a single line ``error: code=<n> kind=<kind> msg=<text>`` to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .graph import (Dataset, GraphError, disjoint_union, enumerate_small_graphs, gen_cycle, gen_ring_pair,
                    sbm_cluster_dataset)
from .graphio import load_graphs, save_graphs
from .model import ConfigError, ModelConfig, gradcheck_model
from .spectral import (biharmonic_distance_matrix, decompose_graph, diffusion_distance_matrix, greens_function,
                       select_eigpairs)
from .train import (GAMMA_SWEEP_DEFAULT, DivergenceError, TaskMismatchError, TrainConfig, evaluate, train_model,
                    write_run)
from .wl import discrimination_report

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_CONFIG, EXIT_TASK, EXIT_DATA, EXIT_GRADCHECK, EXIT_DIVERGED = range(8)


class CliError(Exception):
    def __init__(self, code: int, kind: str, msg: str):
        super().__init__(msg)
        self.code = code
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


def fmt(x) -> str:
    """17 significant digits, enough to round-trip any float64."""
    return format(float(x), ".17g")


# flag dest -> (section, config key)
MODEL_FLAGS = {
    "layers": "L", "heads": "H", "hidden": "d", "k_lpe": "k_lpe", "m": "m", "gamma": "gamma",
    "lpe": "lpe_kind", "attention": "attention", "self_loop_branch": "self_loop_branch",
    "readout": "readout", "laplacian": "laplacian", "lpe_layers": "lpe_layers", "lpe_heads": "lpe_heads",
}
TRAIN_FLAGS = {
    "lr": "lr_init", "lr_factor": "lr_reduce_factor", "patience": "patience", "lr_min": "lr_min",
    "weight_decay": "weight_decay", "dropout": "dropout", "batch_size": "batch_size", "epochs": "max_epochs",
    "sign_flip": "sign_flip_augment", "stop_at_lr_min": "stop_at_lr_min",
}


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    g = p.add_argument_group("model")
    g.add_argument("--layers", type=int, default=S, help="number of attention layers L")
    g.add_argument("--heads", type=int, default=S, help="attention heads H")
    g.add_argument("--hidden", type=int, default=S, help="hidden width d")
    g.add_argument("--k-lpe", type=int, default=S, help="positional-encoding width k")
    g.add_argument("--m", type=int, default=S, help="number of lowest eigenpairs")
    g.add_argument("--gamma", type=float, default=S, help="added-pair attention weight")
    g.add_argument("--lpe", choices=("node", "edge", "none"), default=S)
    g.add_argument("--attention", choices=("full", "sparse"), default=S)
    g.add_argument("--self-loop-branch", choices=("real", "added"), default=S)
    g.add_argument("--readout", choices=("mean", "sum"), default=S)
    g.add_argument("--laplacian", choices=("combinatorial", "symmetric-normalized"), default=S)
    g.add_argument("--lpe-layers", type=int, default=S)
    g.add_argument("--lpe-heads", type=int, default=S)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=S, help="initial learning rate")
    g.add_argument("--lr-factor", type=float, default=S, help="plateau reduce factor")
    g.add_argument("--patience", type=int, default=S)
    g.add_argument("--lr-min", type=float, default=S)
    g.add_argument("--weight-decay", type=float, default=S)
    g.add_argument("--dropout", type=float, default=S)
    g.add_argument("--batch-size", type=int, default=S)
    g.add_argument("--epochs", type=int, default=S, help="maximum epochs")
    g.add_argument("--sign-flip", action=argparse.BooleanOptionalAction, default=S,
                   help="random eigenvector sign flips during training")
    g.add_argument("--stop-at-lr-min", action=argparse.BooleanOptionalAction, default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = _Parser(prog="spectral-attention", description="Spectral graph attention toolkit.",
                     epilog=__doc__.split("\n\n", 1)[1], formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", type=Path, default=None, help="JSON file merged under the flags")
    parser.add_argument("--seed", type=int, default=S, help="global random seed (default 0)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a graph corpus")
    p.add_argument("kind", choices=("sbm", "cycles", "ring-pairs", "enumerate-small"))
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-train", type=int, default=S)
    p.add_argument("--n-val", type=int, default=S)
    p.add_argument("--n-test", type=int, default=S)
    p.add_argument("--num-nodes", type=int, default=S)
    p.add_argument("--num-communities", type=int, default=S)
    p.add_argument("--p-in", type=float, default=S)
    p.add_argument("--p-out", type=float, default=S)
    p.add_argument("--sizes", type=int, nargs="+", default=S, help="cycle / ring sizes")
    p.add_argument("--max-nodes", type=int, default=S, help="enumerate-small bound")

    p = sub.add_parser("spectra", help="eigen-decomposition of each graph as JSON")
    p.add_argument("graph_file", type=Path)
    p.add_argument("--kind", choices=("combinatorial", "symmetric-normalized"), default=S)
    p.add_argument("--m", type=int, default=S, help="keep only the m lowest pairs (zero-padded)")
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("distances", help="pairwise spectral distances as CSV")
    p.add_argument("graph_file", type=Path)
    p.add_argument("--measure", choices=("diffusion", "biharmonic", "greens"), default=S)
    p.add_argument("--t", type=float, default=S, help="diffusion time")
    p.add_argument("--as-written", action="store_true", default=S,
                   help="greens: square the eigenvector products before dividing")
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("wl-compare", help="1-WL versus spectra discrimination report as CSV")
    p.add_argument("graph_file", type=Path)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("train", help="train a model (optionally sweep gamma)")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, default=S, help="output directory (default runs)")
    p.add_argument("--gamma-sweep", type=float, nargs="*", default=S,
                   help="train once per gamma; no values means 0 1e-3 1e-1 1 10")
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="metrics of a checkpoint on a data file as JSON")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default=S, help="split name (default: every graph)")
    p.add_argument("--out", type=Path, default=None)
    _add_model_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full forward")
    p.add_argument("--n-nodes", type=int, default=S)
    p.add_argument("--max-coords", type=int, default=S, help="sampled coordinates per tensor")
    _add_model_flags(p)
    return parser


DEFAULTS = {
    "gen-data": {"n_train": 200, "n_val": 50, "n_test": 50, "num_nodes": 40, "num_communities": 4,
                 "p_in": 0.5, "p_out": 0.05, "sizes": None, "max_nodes": 6},
    "spectra": {"kind": "combinatorial", "m": None},
    "distances": {"measure": "diffusion", "t": 1.0, "as_written": False},
    "wl-compare": {},
    "train": {"out": "runs", "gamma_sweep": None},
    "eval": {"split": None},
    "gradcheck": {"n_nodes": 6, "max_coords": 20},
}
GRADCHECK_MODEL = {"L": 2, "H": 2, "d": 32, "k_lpe": 8, "m": 4, "lpe_heads": 2, "lpe_kind": "node",
                   "task": "node-classification", "in_dim": 3, "edge_dim": 2, "out_dim": 3}


def _load_config(path: Optional[Path]) -> dict:
    if path is None:
        return {}
    try:
        blob = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, "config", f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, "config", f"config file is not valid JSON: {exc}")
    if not isinstance(blob, dict):
        raise CliError(EXIT_CONFIG, "config", "config file must hold a JSON object")
    return blob


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags; returns {options, model, train, seed}."""
    cmd = args.command
    blob = _load_config(args.config)
    model_file = blob.pop("model", {}) or {}
    train_file = blob.pop("train", {}) or {}
    allowed = set(DEFAULTS[cmd]) | {"seed"}
    unknown = set(blob) - allowed
    if unknown:
        raise CliError(EXIT_CONFIG, "config", f"unknown config keys for {cmd}: {sorted(unknown)}")
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    options = {**DEFAULTS[cmd], **blob, **{k: v for k, v in given.items() if k in DEFAULTS[cmd]}}
    seed = int(given.get("seed", blob.get("seed", 0)))
    model = dict(model_file)
    model.update({MODEL_FLAGS[k]: v for k, v in given.items() if k in MODEL_FLAGS})
    train = dict(train_file)
    train.update({TRAIN_FLAGS[k]: v for k, v in given.items() if k in TRAIN_FLAGS})
    return {"options": options, "model": model, "train": train, "seed": seed}


def _emit(text: str, out: Optional[Path]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load(path: Path) -> Dataset:
    if not Path(path).exists():
        raise CliError(EXIT_DATA, "data", f"graph file not found: {path}")
    return load_graphs(path)


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(kind: str, out: Path, seed: int, opts: dict) -> Dataset:
    if kind == "sbm":
        ds = sbm_cluster_dataset(opts["n_train"], opts["n_val"], opts["n_test"], opts["num_nodes"],
                                 opts["num_communities"], opts["p_in"], opts["p_out"], seed)
    elif kind == "cycles":
        # each size n gives the 1-WL-equivalent pair C_2n and C_n + C_n
        graphs = []
        for n in opts["sizes"] or [3]:
            graphs += [gen_cycle(2 * n), disjoint_union(gen_cycle(n), gen_cycle(n))]
        ds = Dataset(graphs)
    elif kind == "ring-pairs":
        sizes = opts["sizes"] or [3, 4, 5]
        ds = Dataset([gen_ring_pair(a, b) for i, a in enumerate(sizes) for b in sizes[i:]])
    else:
        ds = Dataset(enumerate_small_graphs(opts["max_nodes"]))
    save_graphs(ds, out)
    return ds


def cmd_spectra(graph_file: Path, kind: str = "combinatorial", m: Optional[int] = None) -> list:
    out = []
    for i, g in enumerate(_load(graph_file).graphs):
        sd = decompose_graph(g, kind)
        rec = {"graph": i, "kind": kind, "num_zero_modes": sd.num_zero_modes,
               "multiplicities": [list(grp) for grp in sd.multiplicity_groups]}
        if m is None:
            rec["eigenvalues"] = sd.eigenvalues.tolist()
            rec["eigenvectors"] = sd.eigenvectors.tolist()
        else:
            sel = select_eigpairs(sd, m)
            rec["eigenvalues"] = sel.eigenvalues.tolist()
            rec["eigenvectors"] = sel.eigenvectors.tolist()
            rec["mask"] = sel.mask.tolist()
        out.append(rec)
    return out


def cmd_distances(graph_file: Path, measure: str = "diffusion", t: float = 1.0, as_written: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["graph", "j1", "j2", "value"])
    for gi, g in enumerate(_load(graph_file).graphs):
        if measure == "diffusion":
            mat = diffusion_distance_matrix(g, t)
        elif measure == "biharmonic":
            mat = biharmonic_distance_matrix(g)
        else:
            mat = greens_function(g, as_written=as_written)
        for a in range(g.num_nodes):
            for b in range(g.num_nodes):
                w.writerow([gi, a, b, fmt(mat[a, b])])
    return buf.getvalue()


def cmd_wl_compare(graph_file: Path) -> str:
    graphs = _load(graph_file).graphs
    return discrimination_report(graphs, [f"g{i}" for i in range(len(graphs))]).to_csv()


def _model_config(ds: Dataset, model: dict) -> ModelConfig:
    if ds.task is None:
        raise CliError(EXIT_TASK, "task", "data file has no task; training needs labels")
    if "task" in model and model["task"] != ds.task:
        raise TaskMismatchError(f"config task {model['task']!r} does not match data task {ds.task!r}")
    graphs = ds.graphs
    inferred = {"task": ds.task, "in_dim": graphs[0].node_feature_matrix().shape[1],
                "edge_dim": next((g.edge_feature_matrix().shape[1] for g in graphs if g.num_edges), 1)}
    if ds.task == "node-classification":
        inferred["out_dim"] = int(max(int(np.max(g.node_labels)) for g in graphs)) + 1
    elif ds.task == "graph-regression":
        inferred["out_dim"] = len(np.ravel(graphs[0].graph_label))
    else:
        inferred["out_dim"] = 1
    return ModelConfig.from_dict({**inferred, **model})


def cmd_train(data: Path, model: dict, train: dict, seed: int, out: Path,
              gamma_sweep: Optional[Sequence[float]] = None) -> list:
    ds = _load(data)
    mcfg = _model_config(ds, model)
    tcfg = TrainConfig.from_dict({**train, "seed": seed})
    out = Path(out)
    if gamma_sweep is None:
        rec = train_model(ds, mcfg, tcfg)
        write_run(rec, out, "run")
        return [rec]
    gammas = list(gamma_sweep) or list(GAMMA_SWEEP_DEFAULT)
    records = []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gamma", "expected_non_neighbor_mass", "non_neighbor_mass", "best_epoch", "test_metric"])
    for i, gamma in enumerate(gammas):
        cfg = ModelConfig.from_dict({**mcfg.to_dict(), "gamma": float(gamma), "attention": "full"})
        rec = train_model(ds, cfg, TrainConfig.from_dict({**tcfg.to_dict(), "gamma_sweep": gammas}))
        write_run(rec, out, f"gamma_{i}")
        w.writerow([fmt(gamma), fmt(rec.expected_non_neighbor_mass), fmt(rec.non_neighbor_mass),
                    rec.best_epoch, fmt(rec.test_metric)])
        records.append(rec)
    (out / "sweep.csv").write_text(buf.getvalue())
    return records


def _summary_for(checkpoint: Path) -> Optional[Path]:
    name = checkpoint.name
    if name.endswith(".ckpt.json"):
        cand = checkpoint.with_name(name[: -len(".ckpt.json")] + ".json")
        if cand.exists():
            return cand
    return None


def cmd_eval(checkpoint: Path, data: Path, model: dict, split: Optional[str] = None) -> dict:
    if not Path(checkpoint).exists():
        raise CliError(EXIT_DATA, "data", f"checkpoint not found: {checkpoint}")
    ds = _load(data)
    summary = _summary_for(Path(checkpoint))
    base = json.loads(summary.read_text())["model_config"] if summary else {}
    mcfg = _model_config(ds, {**base, **model}) if base or model else _model_config(ds, {})
    params = ad.load_checkpoint(checkpoint)
    result = evaluate(ds, params, mcfg, split)
    result["task"] = ds.task
    return result


def cmd_gradcheck(model: dict, n_nodes: int = 6, seed: int = 0, max_coords: int = 20) -> ad.GradcheckReport:
    cfg = ModelConfig.from_dict({**GRADCHECK_MODEL, **model})
    return gradcheck_model(cfg, n_nodes, seed, max_coords)


# -- dispatch -----------------------------------------------------------------


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    r = resolve(args)
    o, seed = r["options"], r["seed"]
    cmd = args.command
    if cmd == "gen-data":
        ds = cmd_gen_data(args.kind, args.out, seed, o)
        print(f"wrote {len(ds)} graphs to {args.out}")
    elif cmd == "spectra":
        _emit(_json(cmd_spectra(args.graph_file, o["kind"], o["m"])), args.out)
    elif cmd == "distances":
        _emit(cmd_distances(args.graph_file, o["measure"], o["t"], o["as_written"]), args.out)
    elif cmd == "wl-compare":
        _emit(cmd_wl_compare(args.graph_file), args.out)
    elif cmd == "train":
        records = cmd_train(args.data, r["model"], r["train"], seed, Path(o["out"]), o["gamma_sweep"])
        for rec in records:
            print(f"gamma={fmt(rec.gamma)} best_epoch={rec.best_epoch} test_metric={fmt(rec.test_metric)} "
                  f"non_neighbor_mass={fmt(rec.non_neighbor_mass)}")
    elif cmd == "eval":
        _emit(_json(cmd_eval(args.checkpoint, args.data, r["model"], o["split"])), args.out)
    elif cmd == "gradcheck":
        report = cmd_gradcheck(r["model"], o["n_nodes"], seed, o["max_coords"])
        print(report.summary())
        for name in sorted(report.max_rel_err):
            print(f"  {name} max_rel_err={report.max_rel_err[name]:.3e} checked={report.checked[name]}")
        if not report.passed:
            raise CliError(EXIT_GRADCHECK, "gradcheck", f"max relative error {report.worst:.3e} >= {report.tol:g}")
    return EXIT_OK


def _fail(code: int, kind: str, msg) -> int:
    text = " ".join(str(msg).split())
    sys.stderr.write(f"error: code={code} kind={kind} msg={text}\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        return run(argv)
    except CliError as exc:
        return _fail(exc.code, exc.kind, exc)
    except (ConfigError, TypeError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except TaskMismatchError as exc:
        return _fail(EXIT_TASK, "task", exc)
    except DivergenceError as exc:
        return _fail(EXIT_DIVERGED, "divergence", exc)
    except (GraphError, FileNotFoundError, ValueError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except Exception as exc:  # noqa: BLE001 - last-resort one-line report
        return _fail(EXIT_INTERNAL, "internal", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())

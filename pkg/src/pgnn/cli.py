"""Command-line harness: ``pgnn <command> [options]``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    SplitMask,
    csbm_params_from_phi,
    generate_csbm,
    load_dataset,
    load_graph,
    make_split,
    perturb_edges,
    read_features,
    read_labels,
    save_dataset,
    write_edges,
    write_features,
)
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .graph import homophily
from .model import MODEL_KINDS, TrainConfig, train
from .solver import PlapConfig, compute_coeffs, compute_M, run_smoother
from .spectral import (
    EigenPair,
    aggregation_entropy,
    decomposition_residual,
    eigenvalue_bound,
    eigh_p2,
    filter_response,
    p_inner,
    verify_p_eigenpair,
)

CSBM_DEFAULTS = {"n": 800, "f": 200, "d": 10.0, "epsilon": 3.25, "seed": 0}
METRICS = ("train_acc", "val_acc", "test_acc")


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    model: str = "pgnn"
    p: float = 2.0
    mu: float = 0.1
    K: int = 6
    detach_weights: bool = False
    lr: float = 0.01
    weight_decay: float = 5e-4
    dropout: float = 0.5
    max_epochs: int = 1000
    patience: int = 200
    hidden: int = 16
    data: dict | None = None
    split: str = "sparse"
    rate: float = 0.0
    repeat: int = 20
    seed: int = 0
    out: str = "results"
    phis: list = field(default_factory=lambda: [-1.0, 0.0, 1.0])
    models: list = field(default_factory=lambda: ["pgnn", "mlp"])

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.split not in ("sparse", "dense") and not str(self.split).endswith(".json"):
            raise ConfigError(f"split must be 'sparse', 'dense' or a .json file, got {self.split!r}")
        if not 0 <= self.rate <= 1:
            raise ConfigError(f"rate must lie in [0, 1], got {self.rate}")
        if self.repeat < 1:
            raise ConfigError("repeat must be >= 1")
        if any(m not in MODEL_KINDS for m in self.models):
            raise ConfigError(f"models must be drawn from {MODEL_KINDS}")
        if self.data is not None:
            if set(self.data) == {"csbm"}:
                extra = set(self.data["csbm"]) - set(CSBM_DEFAULTS) - {"phi"}
                if extra:
                    raise ConfigError(f"unknown csbm keys: {sorted(extra)}")
            elif set(self.data) != {"edges", "features", "labels"}:
                raise ConfigError("data must be {'csbm': {...}} or {'edges', 'features', 'labels'} paths")
        # validate the nested configs eagerly
        self.plap_config()
        self.train_config(0)

    def plap_config(self) -> PlapConfig:
        return PlapConfig(p=self.p, mu=self.mu, K=self.K, detach_weights=self.detach_weights)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, weight_decay=self.weight_decay, dropout=self.dropout,
            max_epochs=self.max_epochs, patience=self.patience, hidden=self.hidden,
            seed=seed, plap=self.plap_config(),
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            obj = json.loads(text)
        except ValueError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(obj)

    def digest(self) -> str:
        """Hash of the experiment content; the output directory is excluded."""
        obj = asdict(self)
        obj.pop("out")
        return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunResult:
    config_digest: str
    model: str
    seed: int
    train_acc: float
    val_acc: float
    test_acc: float
    best_epoch: int
    epochs_run: int
    homophily: float
    lp_trace: dict | None
    phi: float | None = None
    wall_time: float = 0.0

    def record(self) -> dict:
        """Deterministic JSON record; wall time is kept out."""
        out = asdict(self)
        out.pop("wall_time")
        if self.phi is None:
            out.pop("phi")
        return out


# --------------------------------------------------------------------------
# Runs
# --------------------------------------------------------------------------


def _load_data(cfg: ExperimentConfig, phi: float | None = None) -> Dataset:
    data = cfg.data
    if data is None or "csbm" in data:
        params = dict(CSBM_DEFAULTS)
        params.update((data or {}).get("csbm", {}))
        if phi is not None:
            params["phi"] = phi
        if "phi" not in params:
            raise ConfigError("csbm data needs phi")
        return generate_csbm(csbm_params_from_phi(**params))
    return load_dataset(data["edges"], data["features"], data["labels"])


def _split_for(cfg: ExperimentConfig, n: int, seed: int) -> SplitMask:
    if cfg.split in ("sparse", "dense"):
        return make_split(n, cfg.split, seed=seed)
    return SplitMask.from_json(Path(cfg.split).read_text(encoding="utf-8"), n)


def _trace_summary(ds_graph, X, params, cfg: ExperimentConfig) -> dict:
    F0 = np.maximum(X @ params.theta1, 0.0)
    _, trace = run_smoother(ds_graph, F0, cfg.plap_config())
    steps = np.diff(trace)
    return {
        "first": trace[0],
        "last": trace[-1],
        "nonincreasing": bool(np.all(steps <= 1e-9 * np.maximum(np.abs(trace[:-1]), 1.0))),
    }


def run_one(cfg: ExperimentConfig, ds: Dataset, model: str, seed: int, phi=None) -> RunResult:
    start = time.perf_counter()
    split = _split_for(cfg, ds.graph.n, seed)
    g = perturb_edges(ds.graph, cfg.rate, seed=seed) if cfg.rate > 0 else ds.graph
    try:
        params, m = train(g, ds.X, ds.labels, split, model, cfg.train_config(seed), ds.num_classes)
    except NumericalError as exc:
        raise NumericalError(f"model {model}, seed {seed}: {exc}") from exc
    trace = _trace_summary(g, ds.X, params, cfg) if model == "pgnn" else None
    return RunResult(
        config_digest=cfg.digest(), model=model, seed=seed,
        train_acc=m.train_acc, val_acc=m.val_acc, test_acc=m.test_acc,
        best_epoch=m.best_epoch, epochs_run=m.epochs_run,
        homophily=homophily(g, ds.labels), lp_trace=trace, phi=phi,
        wall_time=time.perf_counter() - start,
    )


def _task(args):
    return run_one(*args)


def run_many(tasks: list[tuple], jobs: int = 1) -> list[RunResult]:
    """Run ``run_one`` argument tuples, in worker processes if ``jobs > 1``."""
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_task, tasks))
    return [_task(t) for t in tasks]


def _std(xs) -> float:
    return float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0


def summarize(results: list[RunResult]) -> list[dict]:
    """One row per (model, phi) group with mean and sample std of each metric."""
    groups: dict = {}
    for r in results:
        groups.setdefault((r.model, r.phi), []).append(r)
    rows = []
    for (model, phi), rs in groups.items():
        row = {"model": model, "phi": "" if phi is None else phi, "runs": len(rs)}
        for k in METRICS:
            xs = [getattr(r, k) for r in rs]
            row[f"{k}_mean"] = float(np.mean(xs))
            row[f"{k}_std"] = _std(xs)
        rows.append(row)
    return rows


def write_outputs(out: Path, results: list[RunResult]) -> list[dict]:
    out.mkdir(parents=True, exist_ok=True)
    results = sorted(results, key=lambda r: (r.phi if r.phi is not None else 0.0, r.model, r.seed))
    with open(out / "runs.jsonl", "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.record(), sort_keys=True) + "\n")
    with open(out / "timings.jsonl", "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps({"model": r.model, "phi": r.phi, "seed": r.seed, "wall_time": r.wall_time}) + "\n")
    rows = summarize(results)
    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return rows


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig, jobs: int = 1) -> list[dict]:
    ds = _load_data(cfg)
    tasks = [(cfg, ds, cfg.model, cfg.seed + i) for i in range(cfg.repeat)]
    return write_outputs(Path(cfg.out), run_many(tasks, jobs))


def cmd_bench(cfg: ExperimentConfig, jobs: int = 1) -> list[dict]:
    """Each phi in ``cfg.phis`` times each model in ``cfg.models``, ``cfg.repeat`` seeds."""
    if cfg.data is not None and "csbm" not in cfg.data:
        raise ConfigError("bench runs on generated cSBM data; use train for files")
    tasks = []
    for phi in cfg.phis:
        ds = _load_data(cfg, float(phi))
        for model in cfg.models:
            tasks += [(cfg, ds, model, cfg.seed + i, float(phi)) for i in range(cfg.repeat)]
    return write_outputs(Path(cfg.out), run_many(tasks, jobs))


def cmd_smooth(edges, features, p, mu, K, out) -> Path:
    g = load_graph(edges)
    X = read_features(features)
    cfg = PlapConfig(p=p, mu=mu, K=K)
    F, trace = run_smoother(g, X, cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_features(out / "smoothed.csv", F)
    with open(out / "trace.csv", "w", encoding="utf-8") as fh:
        fh.write("step,objective\n")
        fh.writelines(f"{k},{v!r}\n" for k, v in enumerate(trace))
    report = filter_response(g, F, p, mu)
    with open(out / "filter.csv", "w", encoding="utf-8") as fh:
        fh.write("node,grad_norm,response,regime\n")
        fh.writelines(f"{i},{a!r},{b!r},{r}\n" for i, a, b, r in report.rows())
    return out


def _read_pairs(path) -> list[EigenPair]:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        return [EigenPair(float(d["lambda"]), np.asarray(d["u"], dtype=np.float64)) for d in obj]
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed eigenpair file {path}: {exc}") from exc


def cmd_spectral_check(edges, p: float, pairs_path=None) -> dict:
    g = load_graph(edges)
    bound = eigenvalue_bound(g, p)
    report: dict = {"n": g.n, "p": p, "bound": bound}
    if pairs_path is None:
        if p != 2:
            raise ConfigError("without an eigenpair file only p = 2 can be checked")
        pairs = eigh_p2(g)
    else:
        pairs = _read_pairs(pairs_path)
        for pr in pairs:
            if pr.u.shape != (g.n,):
                raise DataError(f"eigenvector of length {pr.u.size} for {g.n} nodes")
    residuals = [verify_p_eigenpair(g, pr, p) for pr in pairs]
    lams = [pr.lam for pr in pairs]
    report["eigenvalues"] = lams
    report["residuals"] = residuals
    report["max_residual"] = max(residuals) if residuals else 0.0
    report["within_bound"] = [bool(-1e-8 <= lam <= bound + 1e-8) for lam in lams]
    inner = [
        abs(p_inner(a.u, b.u, p))
        for i, a in enumerate(pairs) for b in pairs[i + 1:]
        if abs(a.lam - b.lam) > 1e-8
    ]
    report["max_p_inner"] = max(inner) if inner else 0.0
    if pairs_path is None:
        report["decomposition_residual"] = decomposition_residual(g, pairs, p)
    return report


def cmd_entropy(edges, features, p, mu, out, bins=30) -> Path:
    g = load_graph(edges)
    F = read_features(features)
    M = compute_M(g, F, p)
    alpha, _ = compute_coeffs(g, M, mu, p)
    H, counts, bin_edges = aggregation_entropy(g, M, alpha, bins)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "entropy.csv", "w", encoding="utf-8") as fh:
        fh.write("node,entropy\n")
        fh.writelines(f"{i},{float(h)!r}\n" for i, h in enumerate(H))
    with open(out / "entropy_hist.csv", "w", encoding="utf-8") as fh:
        fh.write("bin_lo,bin_hi,count\n")
        for lo, hi, c in zip(bin_edges[:-1], bin_edges[1:], counts):
            fh.write(f"{float(lo)!r},{float(hi)!r},{int(c)}\n")
    return out


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


FLAG_KEYS = {
    "p": "p", "mu": "mu", "k": "K", "lr": "lr", "hidden": "hidden", "dropout": "dropout",
    "split": "split", "rate": "rate", "repeat": "repeat", "seed": "seed", "out": "out",
    "model": "model",
}


def _experiment_flags(sp):
    sp.add_argument("--config", help="JSON experiment config")
    sp.add_argument("--model", choices=MODEL_KINDS)
    sp.add_argument("--p", type=float)
    sp.add_argument("--mu", type=float)
    sp.add_argument("--k", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--hidden", type=int)
    sp.add_argument("--dropout", type=float)
    sp.add_argument("--split")
    sp.add_argument("--rate", type=float)
    sp.add_argument("--repeat", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--detach-weights", action="store_true")
    sp.add_argument("--out")
    sp.add_argument("--edges")
    sp.add_argument("--features")
    sp.add_argument("--labels")


def _config_from_args(args) -> ExperimentConfig:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        ExperimentConfig.from_dict(base)
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    if args.detach_weights:
        base["detach_weights"] = True
    paths = [args.edges, args.features, args.labels]
    if any(paths):
        if not all(paths):
            raise ConfigError("--edges, --features and --labels go together")
        base["data"] = {"edges": args.edges, "features": args.features, "labels": args.labels}
    return ExperimentConfig.from_dict(base)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pgnn", description="p-Laplacian message passing experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, help_ in (("train", "train on a dataset for several seeds"),
                        ("bench", "cSBM phi sweep comparing models")):
        _experiment_flags(sub.add_parser(name, help=help_))

    sp = sub.add_parser("smooth", help="run the regularizing iteration on raw features")
    sp.add_argument("--edges", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--p", type=float, default=2.0)
    sp.add_argument("--mu", type=float, default=0.1)
    sp.add_argument("--k", type=int, default=6)
    sp.add_argument("--out", default="smooth")

    sp = sub.add_parser("spectral-check", help="eigenpair and bound audit")
    sp.add_argument("--edges", required=True)
    sp.add_argument("--p", type=float, default=2.0)
    sp.add_argument("--pairs", help="JSON list of {lambda, u}")
    sp.add_argument("--out")

    sp = sub.add_parser("csbm", help="generate a cSBM dataset")
    sp.add_argument("--n", type=int, default=CSBM_DEFAULTS["n"])
    sp.add_argument("--f", type=int, default=CSBM_DEFAULTS["f"])
    sp.add_argument("--d", type=float, default=CSBM_DEFAULTS["d"])
    sp.add_argument("--epsilon", type=float, default=CSBM_DEFAULTS["epsilon"])
    sp.add_argument("--phi", type=float, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="csbm")

    sp = sub.add_parser("perturb", help="replace a fraction of edges with random ones")
    sp.add_argument("--edges", required=True)
    sp.add_argument("--rate", type=float, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("entropy", help="aggregation-weight entropy per node")
    sp.add_argument("--edges", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--p", type=float, default=2.0)
    sp.add_argument("--mu", type=float, default=0.1)
    sp.add_argument("--bins", type=int, default=30)
    sp.add_argument("--out", default="entropy")

    sp = sub.add_parser("homophily", help="print the homophily score")
    sp.add_argument("--edges", required=True)
    sp.add_argument("--labels", required=True)
    return parser


def _print_summary(rows):
    for row in rows:
        tag = row["model"] if row["phi"] == "" else f"{row['model']} phi={row['phi']}"
        print(f"{tag}: test {100 * row['test_acc_mean']:.2f} +- {100 * row['test_acc_std']:.2f} "
              f"over {row['runs']} runs")


def dispatch(args) -> None:
    if args.command in ("train", "bench"):
        cfg = _config_from_args(args)
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        rows = (cmd_train if args.command == "train" else cmd_bench)(cfg, args.jobs)
        _print_summary(rows)
    elif args.command == "smooth":
        print(cmd_smooth(args.edges, args.features, args.p, args.mu, args.k, args.out))
    elif args.command == "spectral-check":
        report = cmd_spectral_check(args.edges, args.p, args.pairs)
        text = json.dumps(report, indent=2)
        if args.out:
            Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(text)
    elif args.command == "csbm":
        ds = generate_csbm(csbm_params_from_phi(args.n, args.f, args.d, args.epsilon, args.phi, args.seed))
        for path in save_dataset(ds, args.out, "csbm"):
            print(path)
    elif args.command == "perturb":
        write_edges(args.out, perturb_edges(load_graph(args.edges), args.rate, args.seed))
    elif args.command == "entropy":
        print(cmd_entropy(args.edges, args.features, args.p, args.mu, args.out, args.bins))
    elif args.command == "homophily":
        g = load_graph(args.edges)
        labels = read_labels(args.labels)
        if labels.size != g.n:
            raise DataError(f"{labels.size} labels for {g.n} nodes")
        print(repr(homophily(g, labels)))


def main(argv=None) -> int:
    try:
        dispatch(build_parser().parse_args(argv))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

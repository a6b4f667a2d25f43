"""Command-line experiment runner.

Every subcommand resolves a JSON config (see :mod:`dncl.config`), writes its
CSV/checkpoint outputs into ``--out`` and finishes by atomically writing
``manifest.json``.  Figures are rendered next to the CSVs unless
``--no-figures`` is given.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .config import ConfigError
from .data import (
    DataError,
    Dataset,
    ScalarToySpec,
    SpiralsSpec,
    Standardizer,
    gen_scalar_toy,
    gen_spirals,
    load_csv,
    split,
)
from .diagnostics import (
    bvc_decompose,
    cumulative_score,
    pairwise_diversity,
    rademacher_group_ratio,
    regression_metrics,
    trait_metrics,
)
from .ensemble import (
    NclEnsemble,
    TrainConfig,
    ensemble_forward,
    fold_standardizer,
    load_ensemble,
    mean_diversity,
    save_ensemble,
    scalar_dynamics,
    train,
)
from .losses import LossKind
from .rng import SplitMix64

log = logging.getLogger("dncl")

# stream keys for seeds derived from the single config seed
_INIT_STREAM = 0x1A17
_TEST_STREAM = 0x7E57
_TRIAL_STREAM = 0x7121
_FEATURE_STREAM = 0xFEA7


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage


def derived_seed(seed: int, key: int) -> int:
    return SplitMix64(seed).spawn(key).seed


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


class Run:
    """Output directory bookkeeping and the run manifest."""

    def __init__(self, cfg: dict, figures: bool):
        self.cfg = cfg
        self.out = Path(cfg["out"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.figures = figures
        self.outputs: list[str] = []
        self.started = time.perf_counter()

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    @contextmanager
    def stage(self, name: str):
        log.info("stage %s", name)
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc

    def manifest(self, status: str = "complete", failed_stage: str | None = None) -> dict:
        outputs = []
        for name in self.outputs:
            p = self.out / name
            if p.exists():
                outputs.append({"path": name, "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
            else:
                outputs.append({"path": name, "sha256": None, "missing": True})
        doc = {
            "tool": "dncl",
            "version": __version__,
            "experiment": self.cfg["experiment"],
            "seed": self.cfg["seed"],
            "config_hash": cfgmod.config_hash(self.cfg),
            "config": self.cfg,
            "outputs": outputs,
            "wall_clock_seconds": round(time.perf_counter() - self.started, 3),
            "status": status,
        }
        if failed_stage is not None:
            doc["failed_stage"] = failed_stage
            doc["partial"] = True
        tmp = self.out / "manifest.json.tmp"
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.out / "manifest.json")
        return doc


# -- shared builders ----------------------------------------------------------


def loss_kind(cfg: dict) -> LossKind:
    return LossKind(cfg["loss"], t=float(cfg["smoothl1.t"]), c=float(cfg["tukey.c"]))


def train_config(cfg: dict, n_train: int, seed: int | None = None, lam: float | None = None) -> TrainConfig:
    bs = cfg["train.batch_size"] or n_train
    return TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=bs,
        lr=float(cfg["optim.lr"]),
        momentum=float(cfg["optim.momentum"]),
        weight_decay=float(cfg["optim.weight_decay"]),
        lam=float(cfg["lambda"] if lam is None else lam),
        seed=cfg["seed"] if seed is None else seed,
        loss=loss_kind(cfg),
    )


def build_model(cfg: dict, in_dim: int, out_dim: int, seed: int, lam: float | None = None) -> NclEnsemble:
    return NclEnsemble.build(
        in_dim, cfg["model.hidden"], cfg["K"], out_dim, SplitMix64(seed).spawn(_INIT_STREAM),
        lam=float(cfg["lambda"] if lam is None else lam), activation=cfg["model.activation"],
        weighted=cfg["heads.weighted"], constant_mean=cfg["heads.constant_mean"],
    )


def spirals_spec(cfg: dict, seed: int, points: int | None = None) -> SpiralsSpec:
    return SpiralsSpec(points or cfg["spirals.points"], float(cfg["spirals.turns"]),
                       float(cfg["spirals.noise"]), seed)


def toy_spec(cfg: dict) -> ScalarToySpec:
    return ScalarToySpec(float(cfg["toy.target"]), cfg["toy.regressors"], cfg["toy.iterations"],
                         float(cfg["toy.lr"]), float(cfg["toy.init_low"]), float(cfg["toy.init_high"]),
                         cfg["seed"])


def load_dataset(cfg: dict) -> Dataset:
    if cfg["data.source"] == "spirals":
        return gen_spirals(spirals_spec(cfg, cfg["seed"]))
    if not cfg["data.csv"]:
        raise ConfigError("data.source = csv requires data.csv")
    if not cfg["data.features"] or not cfg["data.targets"]:
        raise ConfigError("data.features and data.targets must name at least one column each")
    return load_csv(cfg["data.csv"], cfg["data.features"], cfg["data.targets"])


def head_predictions(model: NclEnsemble, x) -> np.ndarray:
    """Per-head predictions flattened to (K, N * O)."""
    per_head = ensemble_forward(model, x).per_head
    return per_head.reshape(per_head.shape[0], -1)


def write_predictions(path, preds: np.ndarray) -> None:
    """Long-format dump; ``preds`` is (T, K, S)."""
    T, K, S = preds.shape
    rows = ((t, k, s, preds[t, k, s]) for t in range(T) for k in range(K) for s in range(S))
    write_csv(path, ["trial", "head", "sample", "value"], rows)


def read_predictions(path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows or set(rows[0]) != {"trial", "head", "sample", "value"}:
        raise DataError(f"{path}: expected columns trial, head, sample, value")
    try:
        idx = np.array([[int(r["trial"]), int(r["head"]), int(r["sample"])] for r in rows])
        vals = np.array([float(r["value"]) for r in rows])
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed row: {exc}") from exc
    shape = tuple(idx.max(axis=0) + 1)
    if len(rows) != int(np.prod(shape)) or idx.min() < 0:
        raise DataError(f"{path}: incomplete (trial, head, sample) grid")
    out = np.full(shape, np.nan)
    out[idx[:, 0], idx[:, 1], idx[:, 2]] = vals
    if np.isnan(out).any():
        raise DataError(f"{path}: duplicate or missing entries")
    return out


def read_targets(path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows or set(rows[0]) != {"sample", "value"}:
        raise DataError(f"{path}: expected columns sample, value")
    order = np.argsort([int(r["sample"]) for r in rows])
    return np.array([float(r["value"]) for r in rows])[order]


def accuracy(pred, y) -> float:
    return float((np.sign(pred).ravel() == np.asarray(y).ravel()).mean())


def surface_grid(model: NclEnsemble, xs, ys):
    """Evaluate every head and the aggregate on the lattice ``xs x ys``.

    Returns ``(per_head, ensemble)`` shaped ``(K, len(ys), len(xs))`` and
    ``(len(ys), len(xs))``; only the first output dimension is used.
    """
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    outs = ensemble_forward(model, pts)
    ens = model.predict(pts)[:, 0]
    per_head = outs.per_head[:, :, 0].reshape(model.K, len(ys), len(xs))
    return per_head, ens.reshape(len(ys), len(xs))


# -- subcommands --------------------------------------------------------------


def run_dynamics(cfg: dict, run: Run) -> dict:
    """Scalar convergence toy: conventional vs NCL trajectories."""
    spec = toy_spec(cfg)
    with run.stage("generate"):
        _, init = gen_scalar_toy(spec)
    summary = {}
    trajs = {}
    with run.stage("simulate"):
        for regime, lam in (("conventional", 0.0), ("ncl", float(cfg["lambda"]))):
            traj = scalar_dynamics(init, spec.target, lam, spec.lr, spec.iterations,
                                   cfg["heads.constant_mean"])
            trajs[regime] = traj
            final = traj[-1]
            err = abs(final.mean() - spec.target)
            spread = mean_diversity(final[:, None, None]) if len(final) > 1 else 0.0
            summary[regime] = {"lambda": lam, "mean_abs_error": float(err), "spread": float(spread)}
            rows = [(regime, n, k, traj[n, k]) for n in range(traj.shape[0]) for k in range(traj.shape[1])]
            rows += [(regime, "summary", "mean_abs_error", err), (regime, "summary", "spread", spread)]
            write_csv(run.path(f"dynamics_{regime}.csv"), ["regime", "iteration", "regressor", "value"], rows)
    if run.figures:
        with run.stage("figures"):
            from .plotting import plot_dynamics

            plot_dynamics({"conventional": trajs["conventional"], f"NCL (lambda={cfg['lambda']})": trajs["ncl"]},
                          spec.target, run.path("dynamics.png"))
    return summary


def run_surface(cfg: dict, run: Run) -> dict:
    """Decision surfaces and held-out accuracy on the spirals task, both regimes."""
    seed = cfg["seed"]
    with run.stage("generate"):
        train_ds = gen_spirals(spirals_spec(cfg, seed))
        test_ds = gen_spirals(spirals_spec(cfg, derived_seed(seed, _TEST_STREAM), cfg["surface.test_points"]))
        train_ds.to_csv(run.path("spirals_train.csv"))
        test_ds.to_csv(run.path("spirals_test.csv"))
        st = Standardizer.fit(train_ds.features)
        scaled = Dataset(st.transform(train_ds.features), train_ds.targets, "spirals")
        lo = train_ds.features.min(axis=0) - cfg["surface.margin"]
        hi = train_ds.features.max(axis=0) + cfg["surface.margin"]
        R = cfg["surface.resolution"]
        xs, ys = np.linspace(lo[0], hi[0], R), np.linspace(lo[1], hi[1], R)
    results, surfaces = {}, {}
    for regime, lam in (("conventional", 0.0), ("ncl", float(cfg["lambda"]))):
        with run.stage(f"train-{regime}"):
            model = build_model(cfg, 2, 1, seed, lam)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                tlog = train(model, scaled, train_config(cfg, len(scaled), lam=lam))
            fold_standardizer(model, st.mean, st.std)
            run.path(f"surface_{regime}.nclf").write_bytes(save_ensemble(model))
            tlog.to_csv(run.path(f"train_log_{regime}.csv"))
        with run.stage(f"surface-{regime}"):
            per_head, ens = surface_grid(model, xs, ys)
            surfaces[regime] = (per_head, ens)
            gx, gy = np.meshgrid(xs, ys)
            cols = [gx.ravel(), gy.ravel()] + [per_head[k].ravel() for k in range(model.K)] + [ens.ravel()]
            header = ["x", "y"] + [f"head_{k}" for k in range(model.K)] + ["ensemble"]
            write_csv(run.path(f"surface_{regime}.csv"), header, zip(*cols))
            results[regime] = {
                "lambda": lam,
                "train_accuracy": accuracy(model.predict(train_ds.features), train_ds.targets),
                "test_accuracy": accuracy(model.predict(test_ds.features), test_ds.targets),
                "diversity": mean_diversity(ensemble_forward(model, test_ds.features).per_head),
            }
    keys = ["lambda", "train_accuracy", "test_accuracy", "diversity"]
    write_csv(run.path("surface_accuracy.csv"), ["regime"] + keys,
              [[r] + [results[r][k] for k in keys] for r in results])
    if run.figures:
        with run.stage("figures"):
            from .plotting import plot_surfaces

            plot_surfaces(xs, ys, {"NCL": surfaces["ncl"], "conventional": surfaces["conventional"]},
                          train_ds.features, train_ds.targets, run.path("surface.png"))
    return results


def _metric_row(trial, split_name, pred, y, level):
    m = regression_metrics(pred, y)
    t = trait_metrics(pred, y)
    return [trial, split_name, m["MAE"], m["RMSE"], t["A"], t["R2"], cumulative_score(pred, y, level)]


METRIC_HEADER = ["trial", "split", "MAE", "RMSE", "A", "R2", "CS"]


def run_pipeline(cfg: dict, run: Run) -> dict:
    """Train ``pipeline.trials`` ensembles, evaluate, decompose and measure diversity."""
    seed = cfg["seed"]
    with run.stage("data"):
        ds = load_dataset(cfg)
        train_ds, test_ds = split(ds, cfg["data.test_fraction"], seed)
        eval_ds = test_ds if len(test_ds) else train_ds
        st = Standardizer.fit(train_ds.features) if cfg["data.standardize"] else None
        fit_ds = train_ds if st is None else Dataset(st.transform(train_ds.features), train_ds.targets)
    T = cfg["pipeline.trials"]
    preds, metric_rows = [], []
    level = float(cfg["eval.cs_level"])
    models = []
    for t in range(T):
        tseed = seed if t == 0 else derived_seed(seed, _TRIAL_STREAM + t)
        with run.stage(f"train-trial-{t}"):
            model = build_model(cfg, ds.features.shape[1], ds.targets.shape[1], tseed)
            tlog = train(model, fit_ds, train_config(cfg, len(fit_ds), seed=tseed),
                         checkpoint_path=run.out / f"diverged_t{t}.nclf")
            if st is not None:
                fold_standardizer(model, st.mean, st.std)
            run.path(f"model_t{t}.nclf").write_bytes(save_ensemble(model))
            tlog.to_csv(run.path(f"train_log_t{t}.csv"))
            models.append((model, tlog))
        with run.stage(f"eval-trial-{t}"):
            for name, part in (("train", train_ds), ("test", test_ds)):
                if len(part):
                    metric_rows.append(_metric_row(t, name, model.predict(part.features), part.targets, level))
            preds.append(head_predictions(model, eval_ds.features))
    preds = np.stack(preds)
    targets = eval_ds.targets.ravel()
    with run.stage("report"):
        write_csv(run.path("metrics.csv"), METRIC_HEADER, metric_rows)
        write_predictions(run.path("predictions.csv"), preds)
        write_csv(run.path("targets.csv"), ["sample", "value"], enumerate(targets))
        K = preds.shape[1]
        if K >= 2:
            d = pairwise_diversity(preds[0]).d
            write_csv(run.path("diversity.csv"), ["head"] + [f"head_{k}" for k in range(K)],
                      [[i] + list(d[i]) for i in range(K)])
    summary = {"trials": T, "metrics": metric_rows}
    if T >= 2:
        with run.stage("decompose"):
            rep = bvc_decompose(preds, targets)
            _write_decomposition(run, rep)
            summary["decomposition"] = rep.as_dict()
    if run.figures:
        with run.stage("figures"):
            from .plotting import plot_diversity, plot_training

            plot_training(models[0][1], run.path("train_log_t0.png"))
            if K >= 2:
                plot_diversity(pairwise_diversity(preds[0]).d, run.path("diversity.png"))
    return summary


def _write_decomposition(run: Run, rep) -> None:
    d = rep.as_dict()
    write_csv(run.path("decomposition.csv"), ["term", "value"],
              [(k, d[k]) for k in ("bias_sq", "variance", "covariance", "mse_of_mean")]
              + [("residual", rep.residual), ("trials", rep.trials), ("heads", rep.heads)])
    run.path("decomposition.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def run_eval(cfg: dict, run: Run) -> dict:
    if not cfg["eval.checkpoint"]:
        raise ConfigError("eval requires eval.checkpoint")
    with run.stage("load"):
        model, _ = load_ensemble(Path(cfg["eval.checkpoint"]).read_bytes())
        ds = load_dataset(cfg)
    with run.stage("evaluate"):
        row = _metric_row(0, "all", model.predict(ds.features), ds.targets, float(cfg["eval.cs_level"]))
        write_csv(run.path("metrics.csv"), METRIC_HEADER, [row])
        write_predictions(run.path("predictions.csv"), head_predictions(model, ds.features)[None])
        write_csv(run.path("targets.csv"), ["sample", "value"], enumerate(ds.targets.ravel()))
    return dict(zip(METRIC_HEADER, row))


def run_decompose(cfg: dict, run: Run) -> dict:
    if not cfg["decompose.predictions"] or not cfg["decompose.targets"]:
        raise ConfigError("decompose requires decompose.predictions and decompose.targets")
    with run.stage("load"):
        preds = read_predictions(cfg["decompose.predictions"])
        targets = read_targets(cfg["decompose.targets"])
        if preds.shape[2] != len(targets):
            raise DataError(f"{preds.shape[2]} predicted samples but {len(targets)} targets")
    if preds.shape[0] < 2:
        raise StageError("decompose", ValueError(f"need >= 2 trials, found {preds.shape[0]}"))
    with run.stage("decompose"):
        rep = bvc_decompose(preds, targets)
        _write_decomposition(run, rep)
    return rep.as_dict()


def run_rademacher(cfg: dict, run: Run) -> dict:
    seed = cfg["seed"]
    with run.stage("features"):
        if cfg["rademacher.features"]:
            phi = np.loadtxt(cfg["rademacher.features"], delimiter=",", ndmin=2,
                             skiprows=_header_rows(cfg["rademacher.features"]))
        else:
            phi = SplitMix64(seed).spawn(_FEATURE_STREAM).normal((cfg["rademacher.n"], cfg["rademacher.f"]))
    rows = []
    with run.stage("estimate"):
        for K in cfg["rademacher.K"]:
            feats = phi
            if cfg["rademacher.layout"] == "single_block":
                feats = phi.copy()
                feats[:, phi.shape[1] // K :] = 0.0
            r = rademacher_group_ratio(feats, K, float(cfg["rademacher.bound"]), cfg["rademacher.trials"], seed)
            lo, hi = 1.0 / K, 1.0 / np.sqrt(K)
            rows.append({
                "K": K, "full": r.full.value, "full_std": r.full.mc_std, "group": r.group.value,
                "group_std": r.group.mc_std, "ratio": r.ratio, "ratio_std": r.ratio_std,
                "lower": lo, "upper": hi,
                "within": bool(lo - 3 * r.ratio_std <= r.ratio <= hi + 3 * r.ratio_std),
            })
        header = list(rows[0])
        write_csv(run.path("rademacher.csv"), header, [[row[h] for h in header] for row in rows])
    if run.figures:
        with run.stage("figures"):
            from .plotting import plot_rademacher

            plot_rademacher(rows, run.path("rademacher.png"))
    return {"rows": rows}


def _header_rows(path) -> int:
    with open(path, newline="") as fh:
        first = next(csv.reader(fh), [])
    try:
        [float(c) for c in first]
    except ValueError:
        return 1
    return 0


def run_gen_data(cfg: dict, run: Run) -> dict:
    with run.stage("generate"):
        if cfg["gen.kind"] == "spirals":
            ds = gen_spirals(spirals_spec(cfg, cfg["seed"]))
            ds.to_csv(run.path("spirals.csv"))
            return {"rows": len(ds)}
        spec = toy_spec(cfg)
        _, init = gen_scalar_toy(spec)
        write_csv(run.path("toy_init.csv"), ["regressor", "init", "target"],
                  [(k, v, spec.target) for k, v in enumerate(init)])
        return {"rows": len(init)}


RUNNERS = {
    "dynamics": run_dynamics,
    "surface": run_surface,
    "train": run_pipeline,
    "eval": run_eval,
    "decompose": run_decompose,
    "rademacher": run_rademacher,
    "gen-data": run_gen_data,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dncl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dncl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "dynamics": "scalar convergence toy, conventional vs NCL",
        "surface": "spirals decision surfaces and held-out accuracy",
        "train": "train ensembles, evaluate, decompose, measure diversity",
        "eval": "evaluate a checkpoint on a dataset",
        "decompose": "bias-variance-covariance split of a prediction dump",
        "rademacher": "Monte-Carlo Rademacher complexity of grouped heads",
        "gen-data": "write a synthetic dataset to CSV",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    return parser


def run_experiment(experiment: str, user: dict | None = None, seed: int | None = None,
                   out: str | None = None, figures: bool | None = None) -> tuple[dict, dict]:
    """Resolve the config, run one subcommand and write its manifest.

    Returns ``(summary, manifest)``.  Raises :class:`ConfigError` before any
    output is written, or :class:`StageError` after writing a manifest
    flagged as partial.
    """
    cfg = cfgmod.resolve(experiment, user, seed, out)
    run = Run(cfg, cfg["report.figures"] if figures is None else figures)
    try:
        summary = RUNNERS[experiment](cfg, run)
    except StageError as exc:
        run.manifest("failed", exc.stage)
        raise
    except (ConfigError, DataError) as exc:
        run.manifest("failed", "setup")
        raise StageError("setup", exc) from exc
    return summary, run.manifest()


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("NCL_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        user = cfgmod.load(args.config) if args.config else {}
        summary, manifest = run_experiment(args.command, user, args.seed, args.out,
                                           False if args.no_figures else None)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"out": manifest["config"]["out"], "summary": summary}, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())

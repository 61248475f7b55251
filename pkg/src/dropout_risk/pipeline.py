"""Stage functions behind the command line.

Every stage reads what earlier stages left under the output directory,
writes its own artifacts and a manifest recording the config hash, the
stage seed and the SHA-256 of every input and output file. Wall-clock
times go to ``timings.jsonl`` so that manifests stay byte-identical
across reruns.

Layout::

    measurements.csv            synth
    ingest.json                 ingest
    states/<ST>/...             per-state stages
    report/...                  report
    manifests/<stage>.json      global stages
    manifests/<stage>/<ST>.json per-state stages
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import analysis, bayesreg, featsel, preprocess
from .config import PipelineConfig
from .datamodel import (
    ConfigError,
    Standardizer,
    StateDataset,
    SyntheticConfig,
    generate_synthetic,
    load_csv,
    make_specs,
    fit_standardizer,
    split_train_test,
    write_csv,
)
from .dspp import DsppArchitecture, TrainConfig, build_dspp, load_model, save_model, train

log = logging.getLogger(__name__)

GLOBAL_STAGES = ("synth", "ingest", "report")
STATE_STAGES = ("featsel", "preprocess", "train-dspp", "train-bayes", "evaluate", "ablate",
                "retrain-reduced", "triggers")
STAGES = ("synth", "ingest", "featsel", "preprocess", "train-dspp", "train-bayes", "evaluate",
          "ablate", "retrain-reduced", "triggers", "report")

TABLE_COLUMNS = ("State", "DSPP", "DSPP_1", "DSPP_2", "Bayesian", "a_1", "a_2", "a_3")
SHORT_NAMES = {"temperature": "T", "wind_speed": "W", "precipitation": "P"}


class DependencyError(RuntimeError):
    pass


def stage_seed(root: int, stage: str, state: str = "") -> int:
    """Seed of the named substream ``(root, stage, state)``."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(stage.encode()), zlib.crc32(state.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_json(path: Path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


@dataclass(frozen=True)
class Run:
    cfg: PipelineConfig
    out: Path

    @classmethod
    def create(cls, cfg: PipelineConfig, out=None) -> "Run":
        return cls(cfg, Path(out if out is not None else cfg.out))

    def state_dir(self, state: str) -> Path:
        return self.out / "states" / state

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise DependencyError(f"missing {path.relative_to(self.out)}; run the `{stage}` subcommand first")
        return path

    def seed(self, stage: str, state: str = "") -> int:
        return stage_seed(self.cfg.seed, stage, state)

    def states(self) -> list[str]:
        ingest = _read_json(self.require(self.out / "ingest.json", "ingest"))
        return list(ingest["states"])

    def dataset(self, state: str) -> StateDataset:
        path = self.require(self.state_dir(state) / "measurements.csv", "ingest")
        data, _ = load_csv(path, make_specs(self.cfg.columns), states=[state])
        if state not in data:
            raise DependencyError(f"{path} holds no rows for {state}")
        return data[state]

    def write_manifest(self, stage: str, state: str, seed: int, inputs: Sequence[Path],
                       outputs: Sequence[Path], wall: float) -> Path:
        rel = lambda p: Path(p).relative_to(self.out).as_posix()  # noqa: E731
        manifest = {
            "stage": stage,
            "state": state,
            "config_hash": self.cfg.config_hash(),
            "seed": seed,
            "inputs": {rel(p): sha256_file(p) for p in sorted(inputs)},
            "outputs": {rel(p): sha256_file(p) for p in sorted(outputs)},
        }
        path = self.out / "manifests" / (f"{stage}.json" if not state else f"{stage}/{state}.json")
        _write_json(path, manifest)
        with open(self.out / "timings.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"stage": stage, "state": state, "wall_time_s": round(wall, 3)}) + "\n")
        return path


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _selection(run: Run, state: str) -> list[str]:
    if run.cfg.featsel.use_selection:
        payload = _read_json(run.require(run.state_dir(state) / "featsel.json", "featsel"))
        return list(payload["representatives"])
    return list(run.cfg.preprocess.params)


def _preprocessed(run: Run, state: str):
    d = run.state_dir(state)
    meta = _read_json(run.require(d / "preprocess.json", "preprocess"))
    return meta, Standardizer.from_dict(meta["standardizer"])


def _arch(cfg: PipelineConfig, input_dim: int) -> DsppArchitecture:
    c = cfg.dspp
    return DsppArchitecture(input_dim=input_dim, layer_dims=c.layer_dims, n_inducing=c.n_inducing,
                            n_sites=c.n_sites, nu=c.nu, dtype=c.dtype, target=c.target)


def dspp_train_fn(cfg: PipelineConfig) -> Callable:
    """``(x_raw, y, standardizer, seed) -> DsppModel`` with the configured recipe."""
    c = cfg.dspp

    def fit(x_raw, y, std: Standardizer, seed: int):
        x_raw = np.atleast_2d(x_raw)
        model = build_dspp(std.standardize(x_raw), _arch(cfg, x_raw.shape[1]), std, seed=seed)
        tc = TrainConfig(epochs=c.epochs, lr=c.lr, decay_epochs=c.decay_epochs,
                         decay_factor=c.decay_factor, batch_size=c.batch_size, seed=seed % 2**63)
        torch.manual_seed(seed)
        model, _ = train(model, x_raw, y, tc)
        return model

    return fit


def _load_dspp(run: Run, state: str, name: str = "dspp.json"):
    return load_model(run.require(run.state_dir(state) / name,
                                  "train-dspp" if name == "dspp.json" else "retrain-reduced"))


def _load_bayes(run: Run, state: str) -> bayesreg.BayesRegModel:
    path = run.require(run.state_dir(state) / "bayes_posterior.csv", "train-bayes")
    _, std = _preprocessed(run, state)
    return bayesreg.BayesRegModel(bayesreg.read_posterior_csv(path), std)


def _train_test(run: Run, state: str):
    d = run.state_dir(state)
    train_s = preprocess.read_binned_csv(run.require(d / "train.csv", "preprocess"))
    test_s = preprocess.read_binned_csv(run.require(d / "test.csv", "preprocess"))
    return train_s, test_s


# ---------------------------------------------------------------------------
# global stages
# ---------------------------------------------------------------------------

def stage_synth(run: Run) -> tuple[list[Path], list[Path], int]:
    s = run.cfg.synthetic
    specs = tuple(make_specs(s.columns))
    datasets = []
    for state in s.states:
        sc = SyntheticConfig(ground_truth=s.ground_truth, n_measurements=s.n_measurements,
                             noise_scale=s.noise_scale, heavy_tail_fraction=s.heavy_tail_fraction,
                             seed=run.seed("synth", state), state=state, specs=specs,
                             tail_mass=s.tail_mass, tail_span=s.tail_span)
        datasets.append(generate_synthetic(sc))
    run.out.mkdir(parents=True, exist_ok=True)
    path = run.out / "measurements.csv"
    write_csv(path, datasets)
    return [], [path], run.cfg.seed


def stage_ingest(run: Run) -> tuple[list[Path], list[Path], int]:
    cfg = run.cfg
    src = Path(cfg.data.input) if cfg.data.input else run.require(run.out / "measurements.csv", "synth")
    if not src.exists():
        raise DependencyError(f"input file {src} not found")
    datasets, rejections = load_csv(src, make_specs(cfg.columns), states=cfg.data.states or None)
    if not datasets:
        raise DependencyError(f"{src} holds no valid rows")
    outputs = []
    summary = {"source": src.name, "rejections": dict(sorted(rejections.items())), "states": {}}
    for state in sorted(datasets):
        ds = datasets[state]
        path = run.state_dir(state) / "measurements.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_csv(path, [ds])
        outputs.append(path)
        summary["states"][state] = {"n_measurements": len(ds),
                                    "param_ranges": {n: list(r) for n, r in zip(ds.names, ds.param_ranges)}}
    _write_json(run.out / "ingest.json", summary)
    outputs.append(run.out / "ingest.json")
    return [src], outputs, cfg.seed


def _table_rows(run: Run, states: Sequence[str], metric: str) -> list[list]:
    rows = []
    for state in states:
        d = run.state_dir(state)
        ev = {r["model_id"]: r for r in _read_json(run.require(d / "eval.json", "evaluate"))["reports"]}
        red = {r["model_id"]: r for r in _read_json(run.require(d / "reduced.json", "retrain-reduced"))["reports"]}
        imp = analysis.ImportanceReport.from_dict(_read_json(run.require(d / "importance.json", "ablate")))
        ranks = [SHORT_NAMES.get(n, n) for n in imp.ranking] + [""] * (3 - len(imp.ranking))
        rows.append([state, ev["DSPP"][metric], red.get("DSPP_1", {}).get(metric, ""),
                     red.get("DSPP_2", {}).get(metric, ""), ev["Bayesian"][metric], *ranks[:3]])
    return rows


def _write_table(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in r])


def stage_report(run: Run, states: Sequence[str]) -> tuple[list[Path], list[Path], int]:
    rep = run.out / "report"
    rep.mkdir(parents=True, exist_ok=True)
    outputs = [rep / "table_mape.csv", rep / "table_r2.csv"]
    _write_table(outputs[0], _table_rows(run, states, "mape"))
    _write_table(outputs[1], _table_rows(run, states, "r_squared"))

    a1 = {}
    inputs = []
    fig = run.cfg.figures
    for state in states:
        d = run.state_dir(state)
        imp = analysis.ImportanceReport.from_dict(_read_json(d / "importance.json"))
        a1[state] = imp.ranking[0]
        meta, _ = _preprocessed(run, state)
        train_s, _ = _train_test(run, state)
        X, _ = preprocess.binned_arrays(train_s)
        names = meta["params"]
        grid = FigureGrid.from_training(names, X, fig.cells_per_axis)
        models = {"DSPP": (_load_dspp(run, state), names), "Bayesian": (_load_bayes(run, state), names)}
        reduced = _read_json(d / "reduced.json")
        for r in reduced["reports"]:
            models[r["model_id"]] = (_load_dspp(run, state, r["snapshot"]), r["params"])
        outputs += emit_figure_data(models, grid, rep / "figures", state, fig.n_errorbar_points,
                                    seed=run.seed("report", state))
        inputs += [d / "importance.json", d / "eval.json", d / "reduced.json"]
    a1_path = rep / "a1_map.json"
    _write_json(a1_path, a1)
    outputs.append(a1_path)
    return inputs, outputs, run.seed("report")


# ---------------------------------------------------------------------------
# figure data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FigureGrid:
    """Plot-grid ranges and slice values per parameter name."""

    ranges: Mapping[str, tuple[float, float]]
    slice_values: Mapping[str, float]
    cells: int = 50

    @classmethod
    def from_training(cls, names: Sequence[str], X: np.ndarray, cells: int = 50) -> "FigureGrid":
        """Span the training bin centres; pin unplotted parameters at their median."""
        X = np.atleast_2d(X)
        if X.shape[1] != len(names):
            raise ValueError(f"{len(names)} names for {X.shape[1]} columns")
        ranges = {n: (float(X[:, i].min()), float(X[:, i].max())) for i, n in enumerate(names)}
        med = {n: float(np.median(X[:, i])) for i, n in enumerate(names)}
        return cls(ranges, med, cells)


def _fmt(v: float) -> str:
    return repr(float(v))


def emit_figure_data(models: Mapping[str, tuple[analysis.Predictor, Sequence[str]]], grid: FigureGrid,
                     out_dir, state: str, n_errorbar_points: int = 20, seed: int = 0) -> list[Path]:
    """Write plot-ready grids and error-bar samples for each model.

    ``models`` maps a label to ``(predictor, input names)``. Models with two
    or more inputs get a ``cells x cells`` grid over their first two inputs
    with the rest pinned at ``grid.slice_values``; models with three or more
    inputs also get ``n_errorbar_points`` uniformly drawn points.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for label, (model, names) in models.items():
        names = list(names)
        if model.input_dim != len(names):
            raise ValueError(f"{label}: model has {model.input_dim} inputs, grid names {names}")
        missing = [n for n in names if n not in grid.ranges]
        if missing:
            raise ValueError(f"{label}: no grid range for {missing}")
        if len(names) >= 2:
            spec = [(*grid.ranges[n], grid.cells) for n in names[:2]]
            pts2 = analysis.grid_points(spec)
            pts = np.column_stack([pts2] + [np.full(len(pts2), grid.slice_values[n]) for n in names[2:]])
            mean, var = model.predict(pts)
            path = out_dir / f"{state}_{label}_grid.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow([names[0], names[1], "mean", "std"])
                for p, m, v in zip(pts2, mean, var):
                    w.writerow([_fmt(p[0]), _fmt(p[1]), _fmt(m), _fmt(np.sqrt(v))])
            written.append(path)
        if len(names) >= 3 and n_errorbar_points > 0:
            rng = np.random.default_rng(seed)
            lo = np.array([grid.ranges[n][0] for n in names])
            hi = np.array([grid.ranges[n][1] for n in names])
            pts = lo + rng.random((n_errorbar_points, len(names))) * (hi - lo)
            mean, var = model.predict(pts)
            path = out_dir / f"{state}_{label}_errorbars.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow([*names, "mean", "std"])
                for p, m, v in zip(pts, mean, var):
                    w.writerow([*map(_fmt, p), _fmt(m), _fmt(np.sqrt(v))])
            written.append(path)
    return written


# ---------------------------------------------------------------------------
# per-state stages
# ---------------------------------------------------------------------------

def stage_featsel(run: Run, state: str):
    ds = run.dataset(state)
    corr = featsel.pearson_matrix(ds)
    names = corr.parameter_labels
    dend = featsel.upgma(corr.parameter_distances())
    k = min(run.cfg.featsel.n_clusters, len(names))
    reps = featsel.select_representatives(corr, dend, k)
    path = run.state_dir(state) / "featsel.json"
    featsel.write_featsel_json(path, corr, dend, reps)
    return [run.state_dir(state) / "measurements.csv"], [path], run.seed("featsel", state)


def stage_preprocess(run: Run, state: str):
    cfg, d = run.cfg, run.state_dir(state)
    ds = run.dataset(state)
    names = _selection(run, state)
    selected = [ds.index_of(n) for n in names]
    seed = run.seed("preprocess", state)
    bins = preprocess.build_binned_dataset(ds, selected, cfg.preprocess.n_bins_target, seed=seed,
                                           min_members=cfg.preprocess.min_members,
                                           max_attempts=cfg.preprocess.max_attempts or None)
    n_test = cfg.evaluation.n_test
    if len(bins) <= n_test:
        raise ConfigError(f"{state}: only {len(bins)} bins accepted, need more than n_test={n_test}; "
                          "raise preprocess.max_attempts or lower evaluation.n_test")
    train_s, test_s = split_train_test(bins, n_test, seed=run.seed("split", state))
    std = fit_standardizer(ds, selected)
    preprocess.write_binned_csv(d / "bins.csv", bins, len(selected))
    preprocess.write_binned_csv(d / "train.csv", train_s, len(selected))
    preprocess.write_binned_csv(d / "test.csv", test_s, len(selected))
    _write_json(d / "preprocess.json", {"params": names, "standardizer": std.to_dict(),
                                        "n_bins": len(bins), "n_train": len(train_s), "n_test": len(test_s)})
    inputs = [d / "measurements.csv"] + ([d / "featsel.json"] if cfg.featsel.use_selection else [])
    outputs = [d / "bins.csv", d / "train.csv", d / "test.csv", d / "preprocess.json"]
    return inputs, outputs, seed


def stage_train_dspp(run: Run, state: str):
    d = run.state_dir(state)
    _, std = _preprocessed(run, state)
    train_s, _ = _train_test(run, state)
    X, y = preprocess.binned_arrays(train_s)
    seed = run.seed("train-dspp", state)
    model = dspp_train_fn(run.cfg)(X, y, std, seed)
    save_model(d / "dspp.json", model, run.cfg.config_hash())
    return [d / "train.csv", d / "preprocess.json"], [d / "dspp.json"], seed


def stage_train_bayes(run: Run, state: str):
    d, b = run.state_dir(state), run.cfg.bayes
    _, std = _preprocessed(run, state)
    train_s, _ = _train_test(run, state)
    X, y = preprocess.binned_arrays(train_s)
    seed = run.seed("train-bayes", state)
    model = bayesreg.fit_bayes(X, y, std, chains=b.chains, draws=b.draws, warmup=b.warmup, seed=seed)
    bayesreg.write_posterior_csv(d / "bayes_posterior.csv", model.posterior)
    bayesreg.write_summary_json(d / "bayes_summary.json", model.posterior)
    return ([d / "train.csv", d / "preprocess.json"],
            [d / "bayes_posterior.csv", d / "bayes_summary.json"], seed)


def _report_dict(r: analysis.EvalReport) -> dict:
    return {"state": r.state, "model_id": r.model_id, "mape": r.mape, "r_squared": r.r_squared,
            "n_test": r.n_test}


def stage_evaluate(run: Run, state: str):
    d = run.state_dir(state)
    dspp_model = _load_dspp(run, state)
    bayes_model = _load_bayes(run, state)
    _, test_s = _train_test(run, state)
    reports = [analysis.evaluate(dspp_model, test_s, state, "DSPP"),
               analysis.evaluate(bayes_model, test_s, state, "Bayesian")]
    _write_json(d / "eval.json", {"reports": [_report_dict(r) for r in reports]})
    return [d / "dspp.json", d / "bayes_posterior.csv", d / "test.csv"], [d / "eval.json"], run.seed("evaluate", state)


def stage_ablate(run: Run, state: str):
    d = run.state_dir(state)
    meta, _ = _preprocessed(run, state)
    model = _load_dspp(run, state)
    _, test_s = _train_test(run, state)
    report = analysis.ablate_importance(model, test_s, meta["params"])
    _write_json(d / "importance.json", report.to_dict())
    return [d / "dspp.json", d / "test.csv", d / "preprocess.json"], [d / "importance.json"], run.seed("ablate", state)


def stage_retrain_reduced(run: Run, state: str):
    cfg, d = run.cfg, run.state_dir(state)
    meta, _ = _preprocessed(run, state)
    importance = analysis.ImportanceReport.from_dict(_read_json(run.require(d / "importance.json", "ablate")))
    ds = run.dataset(state)
    seed = run.seed("retrain-reduced", state)
    pipe = analysis.StatePipeline(ds, [ds.index_of(n) for n in meta["params"]], dspp_train_fn(cfg),
                                  n_bins_target=cfg.preprocess.n_bins_target,
                                  max_attempts=cfg.preprocess.max_attempts or None,
                                  n_test=cfg.evaluation.n_test, seed=seed,
                                  bin_kwargs={"min_members": cfg.preprocess.min_members})
    reports, outputs = [], []
    variants = [("DSPP_1", ["second"]), ("DSPP_2", ["second", "third"])]
    for label, drop in variants:
        if len(importance.ranking) <= len(drop):
            continue
        model, names, _, test_s = analysis.retrain_reduced(pipe, importance, drop)
        snap = f"{label.lower()}.json"
        save_model(d / snap, model, cfg.config_hash())
        r = _report_dict(analysis.evaluate(model, test_s, state, label))
        reports.append({**r, "params": names, "snapshot": snap})
        outputs.append(d / snap)
    _write_json(d / "reduced.json", {"reports": reports})
    outputs.append(d / "reduced.json")
    return [d / "measurements.csv", d / "importance.json", d / "preprocess.json"], outputs, seed


def trigger_grid_spec(X: np.ndarray, cells: int) -> list[tuple[float, float, int]]:
    X = np.atleast_2d(X)
    return [(float(lo), float(hi), int(cells)) for lo, hi in zip(X.min(0), X.max(0))]


def stage_triggers(run: Run, state: str):
    cfg, d = run.cfg, run.state_dir(state)
    meta, _ = _preprocessed(run, state)
    model = _load_dspp(run, state)
    train_s, _ = _train_test(run, state)
    X, _ = preprocess.binned_arrays(train_s)
    spec = trigger_grid_spec(X, cfg.triggers.cells_per_axis)
    payload = {"params": meta["params"], "grid_spec": [list(s) for s in spec], "regions": {}}
    for t in cfg.triggers.thresholds:
        regions = analysis.trigger_regions(model, spec, t)
        payload["regions"][repr(float(t))] = [r.to_dict() for r in regions]
    _write_json(d / "triggers.json", payload)
    return [d / "dspp.json", d / "train.csv"], [d / "triggers.json"], run.seed("triggers", state)


STATE_STAGE_FUNCS = {
    "featsel": stage_featsel,
    "preprocess": stage_preprocess,
    "train-dspp": stage_train_dspp,
    "train-bayes": stage_train_bayes,
    "evaluate": stage_evaluate,
    "ablate": stage_ablate,
    "retrain-reduced": stage_retrain_reduced,
    "triggers": stage_triggers,
}


def _run_state_stage(cfg: PipelineConfig, out: str, stage: str, state: str) -> tuple[str, float]:
    run = Run(cfg, Path(out))
    t0 = time.perf_counter()
    inputs, outputs, seed = STATE_STAGE_FUNCS[stage](run, state)
    wall = time.perf_counter() - t0
    run.write_manifest(stage, state, seed, inputs, outputs, wall)
    return state, wall


def run_stage(run: Run, stage: str, states: Sequence[str] | None = None, jobs: int = 1) -> list[str]:
    """Run one stage; per-state stages fan out over ``jobs`` worker processes."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; choose from {STAGES}")
    if stage in GLOBAL_STAGES:
        t0 = time.perf_counter()
        if stage == "synth":
            inputs, outputs, seed = stage_synth(run)
        elif stage == "ingest":
            inputs, outputs, seed = stage_ingest(run)
        else:
            inputs, outputs, seed = stage_report(run, _resolve_states(run, states))
        run.write_manifest(stage, "", seed, inputs, outputs, time.perf_counter() - t0)
        return []
    todo = _resolve_states(run, states)
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(todo))) as pool:
            list(pool.map(_run_state_stage, [run.cfg] * len(todo), [str(run.out)] * len(todo),
                          [stage] * len(todo), todo))
    else:
        for state in todo:
            _run_state_stage(run.cfg, str(run.out), stage, state)
    return todo


def _resolve_states(run: Run, states: Sequence[str] | None) -> list[str]:
    available = run.states()
    if not states:
        return available
    unknown = [s for s in states if s not in available]
    if unknown:
        raise DependencyError(f"states {unknown} were not ingested; have {available}")
    return list(states)


def run_all(run: Run, states: Sequence[str] | None = None, jobs: int = 1) -> None:
    """Every stage in order; ``synth`` is skipped when a real input file is configured."""
    for stage in STAGES:
        if stage == "synth" and run.cfg.data.input:
            continue
        log.info("stage %s", stage)
        run_stage(run, stage, states, jobs)

"""Command-line driver: ``atlas interpolate|panel|estimate|simulate|validate``.

Every command reads one YAML (or JSON) config, writes its outputs to an output
directory and a ``manifest_<command>.json`` describing the run. Wall-clock
timings go to ``timings_<command>.txt`` so that the manifest and all CSV/JSON
outputs are byte-identical across reruns with the same config and seed.
Relative paths in the config are resolved against the config file's folder.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__
from ._validation import ConfigurationError
from .geo import read_geojson, read_points_csv
from .interpolate import PopulationWeightedInterpolator, read_totals_csv, write_totals_csv
from .market import (
    MarketConfig, bridge_estimate, simulate, write_asymmetry_json, write_simulation_csv,
)
from .ols import _jsonable, equal_slopes_test, fit as ols_fit, format_table, margins
from .panel import SpecConfig, build_panel, crowding_validation, design_matrix
from .presets import LABELS, PRESETS
from .qdgmm import QuasiDifferencedGMM, format_qd_table
from .shiftshare import (
    bartik_panel, build_instruments, fit_iv_panel, iv_spec, read_eta_csv, read_growth_csv,
    read_shares_csv,
)

COMMANDS = ("interpolate", "panel", "estimate", "simulate", "validate")


# --- run bookkeeping -------------------------------------------------------------

def sha256(path):
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Config access, input digests, stage records and output writing for one command."""

    def __init__(self, command, config_path, out=None, seed=None, jobs=1, preset=None):
        self.command = command
        self.config_path = Path(config_path)
        if not self.config_path.exists():
            raise FileNotFoundError(f"config file not found: {self.config_path}")
        raw = self.config_path.read_bytes()
        self.config_hash = hashlib.sha256(raw).hexdigest()
        self.config = yaml.safe_load(raw.decode("utf-8")) or {}
        if not isinstance(self.config, dict):
            raise ConfigurationError(f"{self.config_path}: top level must be a mapping")
        self.root = self.config_path.parent
        if out is None:
            out = self.root / self.config.get("output_dir", "atlas_out")
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.seed = int(seed if seed is not None else self.config.get("seed", 0))
        self.jobs = max(int(jobs), 1)
        self.preset = preset
        self.inputs = {}
        self.stages = []
        self.outputs = []
        self.timings = []

    def section(self, name):
        sec = self.config.get(name)
        if not isinstance(sec, dict):
            raise ConfigurationError(f"{self.config_path}: missing section {name!r}")
        return sec

    def path(self, value, what):
        """Resolve a config path, check it exists and record its digest."""
        if value is None:
            raise ConfigurationError(f"{self.config_path}: no path given for {what}")
        p = Path(value)
        p = p if p.is_absolute() else self.root / p
        if not p.exists():
            raise FileNotFoundError(f"{what} not found: {p}")
        self.inputs[str(value)] = sha256(p)
        return p

    def stage(self, name, rows_in=None, rows_out=None, drop_log=None, **extra):
        rec = {"stage": name, "rows_in": rows_in, "rows_out": rows_out}
        if drop_log is not None:
            rec["drops"] = drop_log.summary()
            rec["dropped"] = drop_log.to_records()
        rec.update(extra)
        self.stages.append(rec)

    def timed(self, label):
        run = self

        class _Timer:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.timings.append((label, time.perf_counter() - self.t))

        return _Timer()

    def file(self, name):
        self.outputs.append(name)
        return self.out / name

    def write_json(self, name, payload):
        with self.file(name).open("w", encoding="utf-8") as fh:
            json.dump(_jsonable(payload), fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")

    def write_text(self, name, text):
        self.file(name).write_text(text, encoding="utf-8")

    def write_frame(self, name, frame):
        frame.to_csv(self.file(name), index=False, lineterminator="\n")

    def finish(self):
        import scipy
        import sklearn

        manifest = {
            "schema_version": 1,
            "command": self.command,
            "preset": self.preset,
            "config_sha256": self.config_hash,
            "seed": self.seed,
            "inputs": dict(sorted(self.inputs.items())),
            "versions": {"homeless_atlas": __version__, "numpy": np.__version__,
                         "scipy": scipy.__version__, "pandas": pd.__version__,
                         "scikit-learn": sklearn.__version__},
            "stages": self.stages,
            "outputs": sorted(set(self.outputs)),
        }
        path = self.out / f"manifest_{self.command}.json"
        with path.open("w", encoding="utf-8") as fh:
            json.dump(_jsonable(manifest), fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
        lines = [f"{label}\t{secs:.3f}s" for label, secs in self.timings]
        (self.out / f"timings_{self.command}.txt").write_text("\n".join(lines) + "\n",
                                                             encoding="utf-8")


# --- interpolate ---------------------------------------------------------------

def cmd_interpolate(run):
    """Reallocate CoC counts onto MSAs, one fitted assignment per geometry vintage."""
    cfg = run.section("interpolate")
    totals = read_totals_csv(run.path(cfg.get("counts"), "counts file"))
    years = sorted(int(y) for y in cfg.get("years", totals))
    missing = [y for y in years if y not in totals]
    if missing:
        raise ConfigurationError(f"counts file has no rows for years {missing}")
    src_prop = cfg.get("source_id_property", cfg.get("id_property", "GEOID"))
    tgt_prop = cfg.get("target_id_property", cfg.get("id_property", "GEOID"))
    vintages = {int(k): v for k, v in (cfg.get("vintages") or {}).items()}
    exclude = {int(k): list(v) for k, v in (cfg.get("exclude") or {}).items()}

    groups = {}
    for y in years:
        v = vintages.get(y, {})
        key = (v.get("source", cfg.get("source")), v.get("target", cfg.get("target")),
               v.get("points", cfg.get("points")))
        groups.setdefault(key, []).append(y)

    results, vintage_diag = {}, []
    for (src, tgt, pts), yrs in groups.items():
        with run.timed(f"assign {src} -> {tgt}"):
            source = read_geojson(run.path(src, "source geometry"), id_property=src_prop)
            target = read_geojson(run.path(tgt, "target geometry"), id_property=tgt_prop)
            points = read_points_csv(run.path(pts, "points file"))
            model = PopulationWeightedInterpolator(n_jobs=run.jobs, exclude=exclude,
                                                   check_overlap=bool(cfg.get("check_overlap")))
            model.fit(points, source, target)
        with run.timed(f"interpolate {yrs}"):
            for y in yrs:
                results[y] = model.transform(totals[y], year=y)
        diag = model.diagnostics_.to_dict()
        vintage_diag.append({"years": yrs, "source": src, "target": tgt, "points": pts,
                             "diagnostics": diag})
        run.stage(f"interpolate {src} -> {tgt}", rows_in=len(points),
                  rows_out=sum(len(results[y].totals) for y in yrs), years=yrs,
                  unassigned_source_points=int((model.source_assign_.region_index < 0).sum()),
                  unassigned_target_points=int((model.target_assign_.region_index < 0).sum()))

    write_totals_csv(results, run.file("msa_counts.csv"))
    run.write_json("interpolation_diagnostics.json", {
        "schema_version": 1,
        "vintages": vintage_diag,
        "excluded_mass": {str(y): results[y].excluded_mass for y in sorted(results)},
        "source_mass": {str(y): math.fsum(v for k, v in totals[y].items()
                                          if k not in exclude.get(y, ())) for y in sorted(results)},
    })


# --- panel and estimation --------------------------------------------------------

def _specs(run, section="estimate"):
    """Presets selected by ``--preset`` or listed in the config, plus custom specs."""
    sec = run.config.get(section) or {}
    custom = {name: SpecConfig.from_dict({"name": name, **d})
              for name, d in (sec.get("specs") or {}).items()}
    lookup = {**PRESETS, **custom}
    if run.preset:
        names = [run.preset]
    else:
        names = list(sec.get("presets") or []) + [n for n in custom if n not in (sec.get("presets") or [])]
    if not names:
        raise ConfigurationError("no preset selected: pass --preset or list presets in the config")
    out = []
    for n in names:
        if n not in lookup:
            raise ConfigurationError(f"unknown preset {n!r}; choose from {sorted(lookup)}")
        out.append(lookup[n])
    return out


def _deflator(run, cfg):
    d = cfg.get("deflator")
    if d is None or isinstance(d, dict):
        return d
    frame = pd.read_csv(run.path(d, "deflator table"))
    if not {"year", "deflator"} <= set(frame.columns):
        raise ConfigurationError(f"{d}: deflator table needs year,deflator columns")
    return dict(zip(frame["year"].astype(int), frame["deflator"].astype(float)))


def _series(run):
    cfg = run.section("panel")
    series = pd.read_csv(run.path(cfg.get("variables"), "panel variables file"),
                         dtype={"msa_id": str})
    if cfg.get("counts"):
        counts = pd.read_csv(run.path(cfg["counts"], "interpolated counts file"),
                             dtype={"target_id": str})
        col = cfg.get("count_column", "chronic_count")
        counts = counts.rename(columns={"target_id": "msa_id", "count": col})
        series = series.drop(columns=[col], errors="ignore").merge(
            counts[["msa_id", "year", col]], on=["msa_id", "year"], how="left")
    return series, _deflator(run, cfg), cfg


def _panel_for(run, spec, series, deflator, cfg):
    overrides = {}
    if cfg.get("rate_denominator"):
        overrides["rate_denominator"] = cfg["rate_denominator"]
    if cfg.get("outcome_scale"):
        overrides["outcome_scale"] = float(cfg["outcome_scale"])
    spec = replace(spec, **overrides) if overrides else spec
    built = iv_spec(spec) if spec.estimator == "iv" else spec
    try:
        frame, log = build_panel(series, built, deflator)
    except ConfigurationError as exc:
        raise ConfigurationError(f"preset {spec.name}: {exc}") from None
    run.stage(f"panel {spec.name}", rows_in=len(series), rows_out=len(frame), drop_log=log)
    if frame.empty:
        raise ConfigurationError(f"preset {spec.name}: every observation was dropped")
    return spec, built, frame, log


def cmd_panel(run):
    series, deflator, cfg = _series(run)
    section = "panel" if (run.config.get("panel") or {}).get("presets") else "estimate"
    for spec in _specs(run, section):
        _, _, frame, log = _panel_for(run, spec, series, deflator, cfg)
        run.write_frame(f"panel_{spec.name}.csv", frame)
        run.write_frame(f"droplog_{spec.name}.csv",
                        pd.DataFrame(log.to_records(), columns=["msa_id", "period", "reason"]))


def _ols_outputs(run, spec, frame, log):
    rep = ols_fit(design_matrix(frame, spec), label=spec.label or spec.name)
    rep.drop_summary = log.summary()
    rep.extra["n_periods"] = len(spec.periods)
    rows = []
    if spec.split:
        plus, minus = f"{spec.split.column}_plus", f"{spec.split.column}_minus"
        w = equal_slopes_test(rep, plus, minus)
        rep.extra["equal_slopes"] = w.to_dict()
        rows.append(["Chi2 (+) = (-)", f"{w.statistic:.2f}"])
        rows.append(["Prob > Chi2", f"{w.pvalue:.4f}"])
        raw = frame[f"{spec.split.column}_raw"].to_numpy()
        grid = np.linspace(min(raw.min(), 0.0), max(raw.max(), 0.0), 41)
        base = {c: float(frame[c].mean()) for c in spec.design_columns
                if c not in (plus, minus, "intercept")}
        m = margins(rep, grid, plus, minus, base=base)
        run.write_frame(f"{spec.name}_margins.csv",
                        pd.DataFrame(m, columns=["delta", "fit", "lo", "hi"]))
    run.write_json(f"{spec.name}.json", rep.to_dict())
    run.write_text(f"{spec.name}.txt", format_table([rep], LABELS, extra_rows=rows))


def _qd_outputs(run, spec, frame, log):
    cols = spec.design_columns
    model = QuasiDifferencedGMM(init="ols", label=spec.label or spec.name).fit(
        frame[cols].to_numpy(dtype=np.float64), frame["y_curr"].to_numpy(dtype=np.float64),
        y_prev=frame["y_prev"].to_numpy(dtype=np.float64), groups=frame["cluster"].to_numpy(),
        feature_names=cols)
    rep = model.estimate_.to_report(spec.label or spec.name, log.summary())
    if spec.split:
        w = equal_slopes_test(rep, f"{spec.split.column}_plus", f"{spec.split.column}_minus")
        rep.extra["equal_slopes"] = w.to_dict()
    run.write_json(f"{spec.name}.json", rep.to_dict())
    run.write_text(f"{spec.name}.txt", format_qd_table([rep], LABELS))


def _instruments(run, spec):
    cfg = run.section("shiftshare")
    shares = read_shares_csv(run.path(cfg.get("shares"), "industry shares file"))
    growth = read_growth_csv(run.path(cfg.get("growth"), "national growth file"))
    eta = read_eta_csv(run.path(cfg.get("eta"), "supply constraints file"))
    import warnings

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        b = bartik_panel(shares, growth, spec.periods)
    inst = build_instruments(b, eta)
    run.stage(f"instruments {spec.name}", rows_in=len(b), rows_out=len(inst.frame),
              drop_log=inst.drop_log, renormalised=len(caught))
    return inst


def _iv_outputs(run, spec, frame, log):
    inst = _instruments(run, spec)
    system, ivlog = fit_iv_panel(frame, spec, inst, n_jobs=run.jobs)
    run.stage(f"iv {spec.name}", rows_in=len(frame), rows_out=system.n, drop_log=ivlog)
    drops = {**log.summary()}
    for k, v in ivlog.summary().items():
        drops[k] = drops.get(k, 0) + v
    for rep in system.reports():
        rep.drop_summary = drops
    run.write_json(f"{spec.name}.json", system.to_dict())
    main = system.main.report_
    j = system.main.hansen_j_
    rows = [["Hansen J", "not testable" if not j.testable else f"{j.statistic:.2f} (p={j.pvalue:.3f})"]]
    text = ["Second stage", format_table([main], LABELS, extra_rows=rows), "First stages"]
    fs_rows = [["Partial F"] + [("inf (perfect fit)" if fs.perfect_fit else f"{fs.partial_f:.2f}")
                                for fs in system.first_stages]]
    text.append(format_table([fs.report for fs in system.first_stages], LABELS, extra_rows=fs_rows))
    text.append("Leave one instrument out")
    text.append(format_table([m.report_ for m in system.leave_one_out], LABELS))
    run.write_text(f"{spec.name}.txt", "\n".join(text))


def cmd_estimate(run):
    series, deflator, cfg = _series(run)
    for spec in _specs(run):
        spec, built, frame, log = _panel_for(run, spec, series, deflator, cfg)
        with run.timed(f"estimate {spec.name}"):
            if spec.estimator == "ols":
                _ols_outputs(run, spec, frame, log)
            elif spec.estimator == "qd":
                _qd_outputs(run, spec, frame, log)
            else:
                _iv_outputs(run, spec, frame, log)


# --- simulate ---------------------------------------------------------------

def cmd_simulate(run):
    cfg = run.config.get("simulate") or {}
    market = dict(cfg.get("market") or {})
    market["seed"] = run.seed
    config = MarketConfig.from_dict(market)
    shocks = {int(k): float(v) for k, v in (cfg.get("shocks") or {}).items()}
    T = int(cfg.get("T", 10))
    shift = cfg.get("asymmetry_shift", 0.1)
    with run.timed("simulate"):
        result = simulate(config, shocks, T, asymmetry_shift=shift)
    run.stage("simulate", rows_out=len(result.states), n_agents=config.n_agents,
              degenerate=[s.degenerate for s in result.states if s.degenerate])
    write_simulation_csv(result, run.file("simulation.csv"))
    if result.asymmetry is not None:
        write_asymmetry_json(result.asymmetry, run.file("asymmetry.json"))
    bridge = cfg.get("bridge")
    if bridge:
        bridge = dict(bridge) if isinstance(bridge, dict) else {}
        n_markets = int(bridge.pop("n_markets", 200))
        with run.timed("bridge"):
            rep = bridge_estimate(config, n_markets, seed=run.seed, **bridge)
        run.stage("bridge", rows_out=rep.n)
        run.write_json("bridge.json", rep.to_dict())
        run.write_text("bridge.txt", format_table([rep], LABELS))


# --- validate -----------------------------------------------------------------

def cmd_validate(run):
    series, _, cfg = _series(run)
    vcfg = run.config.get("validate") or {}
    years = [int(y) for y in vcfg.get("years", sorted(series["year"].unique()))]
    corr, means = crowding_validation(series, years, cfg.get("rate_denominator", "population"))
    rows = []
    for c in corr:
        for kind in ("raw", "log"):
            r = c[kind]
            rows.append({"year": c["year"], "measure": kind, "r": r.r, "t": r.t, "p": r.p,
                         "stars": r.stars, "n": r.n, "n_dropped": r.n_dropped})
    table = pd.DataFrame(rows)
    run.write_frame("validation_correlations.csv", table)
    run.write_frame("validation_means.csv", means)
    run.stage("validate", rows_in=len(series), rows_out=len(table))
    lines = ["Correlation tests between crowding and chronic homelessness", ""]
    lines.append(f"{'Year':<6}{'Raw r':>10}{'t':>9}{'Log r':>10}{'t':>9}")
    for c in corr:
        lines.append(f"{c['year']:<6}{c['raw'].r:>7.3f}{c['raw'].stars:<3}{c['raw'].t:>9.2f}"
                     f"{c['log'].r:>7.3f}{c['log'].stars:<3}{c['log'].t:>9.2f}")
    lines += ["", "* p<.05, ** p<.01, *** p<.001", "", "Means by year", means.to_string(index=False)]
    run.write_text("validation.txt", "\n".join(lines) + "\n")


HANDLERS = {"interpolate": cmd_interpolate, "panel": cmd_panel, "estimate": cmd_estimate,
            "simulate": cmd_simulate, "validate": cmd_validate}


def build_parser():
    parser = argparse.ArgumentParser(prog="atlas", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__doc__ or name)
        p.add_argument("--config", required=True, help="YAML or JSON config file")
        p.add_argument("--preset", help="run a single named specification")
        p.add_argument("--out", help="output directory (default: config output_dir)")
        p.add_argument("--jobs", type=int, default=1, help="worker threads")
        p.add_argument("--seed", type=int, help="override the config seed")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        run = Run(args.command, args.config, out=args.out, seed=args.seed, jobs=args.jobs,
                  preset=args.preset)
        with run.timed("total"):
            HANDLERS[args.command](run)
        run.finish()
    except (OSError, ValueError, KeyError, ArithmeticError, RuntimeError,
            np.linalg.LinAlgError, yaml.YAMLError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"atlas {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Simulation-study harness: run scenarios, fit all methods, tabulate metrics.

Each run simulates a switching track on a shared landscape realisation,
builds case-control data for every requested number of controls, fits the
requested methods, aligns fitted states to the truth by the permutation
minimising Viterbi misclassification, and records natural-scale estimates,
p-values, misclassification, information criteria and degeneracy flags.
Aggregation produces bias/RMSE, significance rates, misclassification
summaries and AIC/BIC selection rates, written as deterministic CSV/JSON.
"""

from __future__ import annotations

import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from switchssa._rng import _label_entropy, substream
from switchssa.kernels import Gamma, MovementKernelSpec, VonMises, natural_to_coef
from switchssa.landscape import GrfSpec, simulate_grf
from switchssa.likelihood import MsParams
from switchssa.models import CaseControlHMM, MarkovSwitchingSSA, TwoStepSSA
from switchssa.sampling import fit_proposal, generate_choice_sets
from switchssa.simulate import MarkovChainSpec, StateModel, simulate_track

logger = logging.getLogger(__name__)

DEFAULT_SEED = 20240
PARAM_KEYS = ("b", "k", "r", "kap")

# movement and selection truth per scenario: selection coefficient, gamma
# shape/rate, von Mises concentration per state
SCENARIO_TRUTH = {
    1: {"b": (0.0, 2.0), "k": (1.2, 2.5), "r": (1.25, 0.29), "kap": (0.3, 1.0)},
    2: {"b": (-2.0, 2.0), "k": (2.5, 2.5), "r": (0.29, 0.29), "kap": (1.0, 1.0)},
    3: {"b": (0.0, 0.0), "k": (1.2, 2.5), "r": (1.25, 0.29), "kap": (0.3, 1.0)},
    4: {"b": (2.0,), "k": (2.5,), "r": (0.29,), "kap": (1.0,)},
}


@dataclass(frozen=True)
class ScenarioSpec:
    """Configuration of one simulation scenario."""

    scenario: int
    n_runs: int = 25
    n_locations: int = 1000
    m_controls: tuple = (20,)
    seed: int = DEFAULT_SEED
    grf_sill: float = 1.0
    grf_range: float = 10.0
    grid_rows: int = 200
    grid_cols: int = 200
    n_starts: int = 50
    issa_starts: int = 5
    methods: tuple = ("issa", "tsissa", "msissa", "cchmm")
    start_protocol: str = "random"  # scenario 4: "random", "truth", or "both"

    def __post_init__(self):
        if self.scenario not in SCENARIO_TRUTH:
            raise ValueError(f"unknown scenario {self.scenario}")
        if self.start_protocol not in ("random", "truth", "both"):
            raise ValueError(f"unknown start protocol {self.start_protocol!r}")

    @property
    def n_states_true(self) -> int:
        return len(SCENARIO_TRUTH[self.scenario]["b"])

    @property
    def kernel(self) -> MovementKernelSpec:
        return MovementKernelSpec("gamma", "vonmises")

    def truth(self) -> dict:
        return SCENARIO_TRUTH[self.scenario]

    def true_chain(self) -> MarkovChainSpec:
        n = self.n_states_true
        if n == 1:
            return MarkovChainSpec(tpm=np.eye(1))
        tpm = np.full((n, n), 0.1 / max(n - 1, 1))
        np.fill_diagonal(tpm, 0.9)
        return MarkovChainSpec(tpm=tpm)

    def true_state_models(self) -> list:
        truth = self.truth()
        return [
            StateModel(
                Gamma(truth["k"][i], truth["r"][i]),
                VonMises(truth["kap"][i]),
                np.array([truth["b"][i]]),
            )
            for i in range(self.n_states_true)
        ]

    def grf_spec(self) -> GrfSpec:
        return GrfSpec(
            sill=self.grf_sill,
            range_=self.grf_range,
            n_rows=self.grid_rows,
            n_cols=self.grid_cols,
        )


def scenario_spec(scenario: int, profile: str = "scaled", **overrides) -> ScenarioSpec:
    """Scenario presets: the scaled profile runs 25 replicates at M=20, the
    full profile the complete 100-replicate, M in {20, 100, 500} design."""
    if profile == "scaled":
        base = dict(n_runs=25, m_controls=(20,))
    elif profile == "full":
        base = dict(n_runs=100, m_controls=(20, 100, 500))
    else:
        raise ValueError(f"unknown profile {profile!r}")
    if scenario == 4:
        base["methods"] = ("issa", "msissa")
        base["start_protocol"] = "both"
    base.update(overrides)
    return ScenarioSpec(scenario=scenario, **base)


def derived_seed(spec: ScenarioSpec, *labels) -> int:
    return _label_entropy((spec.seed, spec.scenario, labels)) % (2**63)


def _align_permutation(decoded, true_states, n_states):
    """Permutation of fitted states minimising Viterbi misclassification."""
    best_perm = None
    best_mis = np.inf
    for perm in itertools.permutations(range(n_states)):
        mapped = np.asarray(perm)[decoded]
        mis = float(np.mean(mapped != true_states))
        if mis < best_mis:
            best_mis = mis
            best_perm = perm
    return np.asarray(best_perm, dtype=np.int64), best_mis


def _natural_values(params: MsParams, state: int) -> dict:
    step_dist, turn_dist = params.natural_states()[state]
    return {
        "b": float(params.sel_coef[state, 0]),
        "k": float(step_dist.shape),
        "r": float(step_dist.rate),
        "kap": float(turn_dist.concentration),
    }


def _record_states(row, params, pvals, truth_slots, n_slots):
    """Write aligned per-state estimates into the record row.

    ``truth_slots[j]`` is the truth index receiving fitted state j's values.
    """
    for j in range(params.n_states):
        slot = truth_slots[j] + 1
        vals = _natural_values(params, j)
        for key in PARAM_KEYS:
            row[f"{key}{slot}"] = vals[key]
        if pvals is not None:
            row[f"p{slot}"] = float(pvals[j, 0])
    row["gamma11"] = float(params.tpm[0, 0])
    if params.n_states > 1:
        row["gamma22"] = float(params.tpm[1, 1])


def _truth_start(spec: ScenarioSpec, data) -> MsParams:
    """Two-state start at the single-state truth (scenario 4 protocol)."""
    truth = spec.truth()
    theta = natural_to_coef(
        spec.kernel, data.scheme, Gamma(truth["k"][0], truth["r"][0]), VonMises(truth["kap"][0])
    )
    return MsParams(
        kernel=spec.kernel,
        scheme=data.scheme,
        tpm=np.array([[0.9, 0.1], [0.1, 0.9]]),
        move_coef=np.stack([theta, theta]),
        sel_coef=np.array([[truth["b"][0]], [truth["b"][0]]]),
        habitat_names=data.habitat_names,
    )


def run_one(spec: ScenarioSpec, run_idx: int, raster=None) -> list:
    """Execute one replicate; returns a list of long-format record rows."""
    if raster is None:
        raster = simulate_grf(spec.grf_spec(), substream(spec.seed, "landscape", spec.scenario, spec.grf_range))
    start_xy = (
        raster.x0 + raster.n_cols * raster.cell_size / 2.0,
        raster.y0 + raster.n_rows * raster.cell_size / 2.0,
    )
    track, states = simulate_track(
        spec.true_chain(),
        spec.true_state_models(),
        raster,
        spec.n_locations,
        start_xy,
        substream(spec.seed, "track", spec.scenario, run_idx),
    )
    kernel = spec.kernel
    rows = []
    for m in spec.m_controls:
        scheme = fit_proposal(track, kernel)
        data = generate_choice_sets(
            track,
            raster,
            scheme,
            m,
            substream(spec.seed, "controls", spec.scenario, run_idx, m),
            kernel,
        )
        # true state generating the step of stratum (burst 0, t): states[t]
        true_strata = states[data.t]
        fits = {}

        def base_row(method):
            return {"run": run_idx, "m": m, "method": method}

        if "issa" in spec.methods:
            issa = MarkovSwitchingSSA(
                n_states=1,
                n_starts=spec.issa_starts,
                seed=derived_seed(spec, "issa", run_idx, m),
            ).fit(data)
            fits["issa"] = issa
            row = base_row("issa")
            vals = _natural_values(issa.params_, 0)
            p = float(issa.result_.sel_pvalues()[0, 0])
            # a single-state fit is compared against every true state
            for slot in range(1, spec.n_states_true + 1):
                for key in PARAM_KEYS:
                    row[f"{key}{slot}"] = vals[key]
                row[f"p{slot}"] = p
            row.update(ll=issa.loglik_, aic=issa.aic_, bic=issa.bic_, converged=issa.converged_)
            rows.append(row)

        if "msissa" in spec.methods and spec.start_protocol in ("random", "both"):
            ms = MarkovSwitchingSSA(
                n_states=2,
                n_starts=spec.n_starts,
                seed=derived_seed(spec, "msissa", run_idx, m),
            ).fit(data)
            fits["msissa"] = ms
            rows.append(_switching_row(base_row("msissa"), ms, true_strata, spec))

        if "msissa" in spec.methods and spec.start_protocol in ("truth", "both"):
            ms_truth = MarkovSwitchingSSA(
                n_states=2, start_params=_truth_start(spec, data)
            ).fit(data)
            rows.append(_switching_row(base_row("msissa_truth"), ms_truth, true_strata, spec))

        if "cchmm" in spec.methods:
            cc = CaseControlHMM(
                n_states=2,
                n_starts=spec.n_starts,
                seed=derived_seed(spec, "cchmm", run_idx, m),
            ).fit(data)
            fits["cchmm"] = cc
            rows.append(_switching_row(base_row("cchmm"), cc, true_strata, spec, pvalues=False))

        if "tsissa" in spec.methods:
            ts = TwoStepSSA(
                n_states=2,
                m_controls=m,
                kernel=kernel,
                n_starts=spec.n_starts,
                seed=derived_seed(spec, "tsissa", run_idx, m),
            ).fit(track, raster)
            rows.extend(_two_step_rows(base_row, ts, true_strata, spec))

        selectable = {
            name: fits[name].result_ for name in ("issa", "cchmm", "msissa") if name in fits
        }
        if len(selectable) > 1:
            from switchssa.models import select_model

            chosen = select_model(selectable)
            row = base_row("selection")
            row["aic_best"] = chosen["aic"]["best"]
            row["bic_best"] = chosen["bic"]["best"]
            rows.append(row)
    return rows


def _switching_row(row, estimator, true_strata, spec, pvalues=True):
    res = estimator.result_
    decoded = estimator.states_
    if spec.n_states_true > 1:
        perm, mis = _align_permutation(decoded, true_strata, res.params.n_states)
        row["mis"] = 100.0 * mis
    else:
        perm = np.arange(res.params.n_states)
        occupancy = np.bincount(decoded, minlength=res.params.n_states) / decoded.size
        row["occ2"] = float(occupancy[1]) if res.params.n_states > 1 else 0.0
    pv = res.sel_pvalues() if pvalues else None
    _record_states(row, res.params, pv, perm, res.params.n_states)
    row.update(
        ll=res.loglik,
        aic=res.aic,
        bic=res.bic,
        converged=res.converged,
        n_best_starts=sum(
            1 for v in res.ll_per_start if v >= max(res.ll_per_start) - 1e-4
        )
        if res.ll_per_start
        else 1,
    )
    for name, value in res.diagnostics.items():
        row[f"flag_{name}"] = bool(value)
    return row


def _two_step_rows(base_row, ts, true_strata, spec):
    decoded = ts.states_
    n_states = ts.n_states
    if spec.n_states_true > 1:
        perm, mis = _align_permutation(decoded, true_strata, n_states)
    else:
        perm, mis = np.arange(n_states), np.nan
    hmm_row = base_row("hmm")
    hmm_row["mis"] = 100.0 * mis if np.isfinite(mis) else np.nan
    for j, (sd, td) in enumerate(ts.hmm_.params_.states):
        slot = perm[j] + 1
        hmm_row[f"k{slot}"] = float(sd.shape)
        hmm_row[f"r{slot}"] = float(sd.rate)
        hmm_row[f"kap{slot}"] = float(td.concentration)
    hmm_row["gamma11"] = float(ts.hmm_.params_.tpm[0, 0])
    hmm_row["gamma22"] = float(ts.hmm_.params_.tpm[1, 1])
    hmm_row["converged"] = ts.hmm_.converged_
    rows = [hmm_row]

    ts_row = base_row("tsissa")
    ts_row["mis"] = hmm_row["mis"]
    fitted = [res for res in ts.state_results_ if res is not None]
    single = len(fitted) == 1 and n_states > 1
    for j, res in enumerate(ts.state_results_):
        if res is None:
            continue
        vals = _natural_values(res.params, 0)
        p = float(res.sel_pvalues()[0, 0])
        if single:
            # one surviving regression: like a single-state fit, compare it
            # against every true state
            slots = range(1, spec.n_states_true + 1)
        else:
            slots = [perm[j] + 1]
        for slot in slots:
            for key in PARAM_KEYS:
                ts_row[f"{key}{slot}"] = vals[key]
            ts_row[f"p{slot}"] = p
    ts_row["n_states_fitted"] = len(fitted)
    rows.append(ts_row)
    return rows


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def summarize(records: list, spec: ScenarioSpec) -> dict:
    """Aggregate per-run records into study metrics."""
    frame = pd.DataFrame([r for r in records if "error" not in r])
    errors = [r for r in records if "error" in r]
    truth = spec.truth()
    metrics = {
        "scenario": spec.scenario,
        "n_runs": spec.n_runs,
        "n_completed": int(frame["run"].nunique()) if len(frame) else 0,
        "n_failed": len(errors),
        "bias": {},
        "rmse": {},
        "significance": {},
        "misclassification": {},
        "selection": {},
        "degeneracy": {},
    }
    if not len(frame):
        return metrics
    methods = [m for m in frame["method"].unique() if m != "selection"]
    for method in sorted(methods):
        for m in spec.m_controls:
            sub = frame[(frame["method"] == method) & (frame["m"] == m)]
            if not len(sub):
                continue
            key_m = str(m)
            bias = {}
            rmse = {}
            for slot in range(1, spec.n_states_true + 1):
                for key in PARAM_KEYS:
                    col = f"{key}{slot}"
                    if col not in sub.columns:
                        continue
                    est = sub[col].to_numpy(dtype=float)
                    diff = est - truth[key][slot - 1]
                    if np.all(np.isnan(diff)):
                        continue
                    bias[col] = float(np.nanmean(diff))
                    rmse[col] = float(np.sqrt(np.nanmean(diff**2)))
            if bias:
                metrics["bias"].setdefault(method, {})[key_m] = bias
                metrics["rmse"].setdefault(method, {})[key_m] = rmse
            sig = {}
            for slot in range(1, spec.n_states_true + 1):
                col = f"p{slot}"
                if col in sub.columns:
                    p = sub[col].to_numpy(dtype=float)
                    if not np.all(np.isnan(p)):
                        sig[col.replace("p", "b")] = float(
                            100.0 * np.nanmean(p < 0.05)
                        )
            if sig:
                metrics["significance"].setdefault(method, {})[key_m] = sig
            if "mis" in sub.columns:
                mis = sub["mis"].to_numpy(dtype=float)
                if not np.all(np.isnan(mis)):
                    metrics["misclassification"].setdefault(method, {})[key_m] = {
                        "mean": float(np.nanmean(mis)),
                        "sd": float(np.nanstd(mis, ddof=1)),
                    }
            flags = {c: float(sub[c].mean()) for c in sub.columns if c.startswith("flag_")}
            if flags:
                metrics["degeneracy"].setdefault(method, {})[key_m] = flags
    chosen = frame[frame["method"] == "selection"]
    for m in spec.m_controls:
        sub = chosen[chosen["m"] == m]
        if not len(sub):
            continue
        out = {}
        for criterion in ("aic", "bic"):
            counts = sub[f"{criterion}_best"].value_counts(normalize=True) * 100.0
            out[criterion] = {k: float(v) for k, v in sorted(counts.items())}
        metrics["selection"][str(m)] = out
    return metrics


def degeneracy_report(records: list, method: str = "msissa") -> pd.DataFrame:
    """Per-run degeneracy flags for the requested method."""
    frame = pd.DataFrame([r for r in records if r.get("method") == method])
    cols = ["run", "m"] + [c for c in frame.columns if c.startswith("flag_")]
    if "n_best_starts" in frame.columns:
        cols.append("n_best_starts")
    if "occ2" in frame.columns:
        cols.append("occ2")
    return frame[cols].sort_values(["run", "m"]).reset_index(drop=True)


# ---------------------------------------------------------------------------
# execution and reporting
# ---------------------------------------------------------------------------


def _run_worker(args):
    spec, run_idx = args
    try:
        return run_one(spec, run_idx)
    except Exception as err:  # noqa: BLE001 - study runs record failures
        logger.exception("run %d failed", run_idx)
        return [{"run": run_idx, "error": f"{type(err).__name__}: {err}"}]


def run_study(spec: ScenarioSpec, out_dir=None, n_workers: int = 1) -> dict:
    """Run all replicates of a scenario and aggregate the metrics.

    Results are independent of ``n_workers``: every run draws from its own
    named random substream and rows are collected in run order.
    """
    raster = simulate_grf(
        spec.grf_spec(), substream(spec.seed, "landscape", spec.scenario, spec.grf_range)
    )
    records = []
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for rows in pool.map(_run_worker, [(spec, i) for i in range(spec.n_runs)]):
                records.extend(rows)
    else:
        for i in range(spec.n_runs):
            try:
                records.extend(run_one(spec, i, raster))
            except Exception as err:  # noqa: BLE001
                logger.exception("run %d failed", i)
                records.append({"run": i, "error": f"{type(err).__name__}: {err}"})
    metrics = summarize(records, spec)
    if out_dir is not None:
        report_tables(metrics, records, spec, out_dir)
    return {"spec": spec, "records": records, "metrics": metrics}


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def report_tables(metrics: dict, records: list, spec: ScenarioSpec, out_dir) -> list:
    """Write significance/misclassification/selection/bias/RMSE tables.

    CSV layouts mirror the study's reporting tables; a JSON mirror carries the
    same numbers, and the long-format per-run records support external
    plotting.  Output is deterministic for a fixed spec.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = spec.scenario
    written = []

    rows = []
    for method in sorted(metrics["significance"]):
        for m in sorted(metrics["significance"][method], key=int):
            vals = metrics["significance"][method][m]
            rows.append(
                [method, m, vals.get("b1", float("nan")), vals.get("b2", float("nan"))]
            )
    path = out / f"scen{n}_table2.csv"
    _write_csv(path, ["method", "n_controls", "beta1_sig_pct", "beta2_sig_pct"], rows)
    written.append(path)

    rows = []
    for method in sorted(metrics["misclassification"]):
        for m in sorted(metrics["misclassification"][method], key=int):
            vals = metrics["misclassification"][method][m]
            rows.append([method, m, vals["mean"], vals["sd"]])
    path = out / f"scen{n}_table3.csv"
    _write_csv(path, ["method", "n_controls", "misclass_mean_pct", "misclass_sd_pct"], rows)
    written.append(path)

    rows = []
    for m in sorted(metrics["selection"], key=int):
        for criterion in ("aic", "bic"):
            vals = metrics["selection"][m][criterion]
            for model in ("issa", "cchmm", "msissa"):
                rows.append([m, criterion, model, vals.get(model, 0.0)])
    path = out / f"scen{n}_table4.csv"
    _write_csv(path, ["n_controls", "criterion", "model", "selected_pct"], rows)
    written.append(path)

    param_cols = [
        f"{key}{slot}" for slot in range(1, spec.n_states_true + 1) for key in PARAM_KEYS
    ]
    for table, name in (("bias", "tableS3"), ("rmse", "tableS4")):
        rows = []
        for method in sorted(metrics[table]):
            for m in sorted(metrics[table][method], key=int):
                vals = metrics[table][method][m]
                rows.append([method, m] + [vals.get(c, float("nan")) for c in param_cols])
        path = out / f"scen{n}_{name}.csv"
        _write_csv(path, ["method", "n_controls"] + param_cols, rows)
        written.append(path)

    frame = pd.DataFrame([r for r in records if "error" not in r])
    frame = frame.sort_values(["run", "m", "method"], kind="mergesort").reset_index(drop=True)
    frame = frame.reindex(sorted(frame.columns), axis=1)
    path = out / f"scen{n}_runs.csv"
    formatted = frame.map(lambda v: _fmt(v) if isinstance(v, float) else v)
    formatted.to_csv(path, index=False)
    written.append(path)

    path = out / f"scen{n}_tables.json"
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True, default=_fmt)
    written.append(path)
    return written

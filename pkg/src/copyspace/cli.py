"""Command-line entry point: ``copyspace <subcommand> [options]``.

Every subcommand writes into a staging directory and moves the files to
``--out`` only on success, so a failed run leaves no partial output. Each
output directory receives a ``manifest.json``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 I/O failure.
"""

import argparse
import json
import logging
import shutil
import sys
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd

from copyspace import io as cio
from copyspace import rng as rngmod
from copyspace.demand import DemandError, DemandParams, InversionError, aggregate_div_by_distance, invert_shares, recover_xi
from copyspace.estimation import EstimationError, GmmConfig, build_instruments, gmm_rcnl, ols_fixed_coef, tsls_fixed_coef
from copyspace.geometry import GeometryError, perturb_locations
from copyspace.panel import PanelError, event_study, first_treatment_periods, imputation_event_study, spatial_regression
from copyspace.policy import (
    PolicyConfig,
    PolicyError,
    ScenarioCost,
    make_candidates,
    run_entry_game,
    run_relocation,
    run_removal,
    scenario_cost_fn,
    welfare_heatmap,
)
from copyspace.supply import (
    CostParams,
    PricingError,
    SlopeEstimationError,
    cost_gradient_regressors,
    cost_ivs,
    estimate_cost_slopes,
    entry_bound,
    expected_marginal_profit,
    fixed_costs,
    foc_residual,
    recover_marginal_costs,
)
from copyspace.synth import ConfigError, SyntheticConfig, generate_market

log = logging.getLogger("copyspace")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3
COUNTERFACTUAL_MODES = ("removal", "relocate", "entry-game", "heatmap")
NUMERICAL_ERRORS = (
    PricingError,
    InversionError,
    EstimationError,
    SlopeEstimationError,
    PanelError,
    PolicyError,
    DemandError,
    GeometryError,
    np.linalg.LinAlgError,
    FloatingPointError,
    ArithmeticError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ------------------------------------------------------------------ config

CONFIG_DEFAULTS = {
    "estimate-demand": {
        "method": "both",
        "which_ivs": ["exchange_rate", "blp", "diff_own", "diff_rival"],
        "gmm": {"rc_dims": [0, 1], "method": "bfgs"},
    },
    "estimate-supply": {
        "n_shock_draws": 10,
        "n_bound_shocks": 20,
        "max_bounds": None,
        "h": 1e-4,
        "slopes": ["ols", "iv"],
        "local_scale": 0.5,
    },
    "counterfactual": {
        "start_period": 1,
        "distance_space": "full",
        "cs_mode": "nested",
        "d_bar": 0.05,
        "d_bars": [0.0, 0.025, 0.05, 0.1, 0.15],
        "scenario": "assistant",
        "cost_level": 0.0,
        "cost_levels": [0.0, 5000.0],
        "cost_level_basis": "shift",
        "c_levels": [1, 2, 3, 4, 5, 10, 20, 30],
        "n_per_level": 50,
        "n_entry_firms": 40,
        "random_removal_seed": None,
    },
    "spatial-reg": {"outcomes": ["revenue", "quantity", "list_price"], "fe": ["product_id", "license", "country"], "cluster": "product_id"},
    "event-study": {"outcomes": ["revenue"], "estimators": ["twfe", "imputation"], "k": 5, "window": [-5, 9]},
    "diversion-curve": {"bin_width": 0.02, "d_max": 1.0, "period": None},
}


def _load_config(path, command):
    """Merge the JSON document at ``path`` over the command defaults."""
    defaults = json.loads(json.dumps(CONFIG_DEFAULTS.get(command, {})))
    if path is None:
        return defaults
    doc = cio.read_json(path)
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    if command == "gen-data":
        return doc
    doc = {k: v for k, v in doc.items() if k != "schema_version"}
    unknown = set(doc) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(sorted(unknown))}")
    defaults.update(doc)
    return defaults


def _threads(args):
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be positive")
        return args.threads
    try:
        return cio.env_threads(1)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _require_data(args):
    if args.data is None:
        raise UsageError(f"{args.command} needs --data")
    return cio.load_dataset(args.data)


def _params(args, data):
    if getattr(args, "params", None):
        return cio.read_params(args.params), str(args.params)
    if data.true_params is None:
        raise UsageError("no --params given and the data directory has no true_params.json")
    return data.true_params, "data:true_params.json"


def _cost(args, data):
    path = getattr(args, "cost", None)
    doc = cio.read_json(path) if path else data.true_cost
    if doc is None:
        raise UsageError("no --cost given and the data directory has no true_cost.json")
    if "coef" in doc:
        base = data.true_cost or {}
        k = len(doc["coef"])
        return CostParams(
            np.asarray(doc["coef"], dtype=float),
            float(base.get("nu_intercept_mean", 0.0)),
            float(base.get("nu_intercept_sd", 0.0)),
            np.zeros(k),
        ), str(path)
    return CostParams.from_dict(doc), (str(path) if path else "data:true_cost.json")


# --------------------------------------------------------------- commands


def cmd_gen_data(args, cfg, out, ctx):
    if args.seed is not None:
        cfg = dict(cfg, seed=args.seed)
    if "seed" not in cfg:
        raise UsageError("gen-data needs --seed or a seed in the config")
    config = SyntheticConfig.from_dict(cfg)
    ctx["config"] = config.to_dict()
    ctx["seed"] = config.seed
    ds = generate_market(config)
    cio.save_dataset(ds, out)


def cmd_estimate_demand(args, cfg, out, ctx):
    data = _require_data(args)
    method = cfg["method"]
    if method not in ("2sls", "gmm", "both"):
        raise UsageError("method must be 2sls, gmm or both")
    markets = data.markets
    ivs = build_instruments(markets, data.shifter)
    which = tuple(cfg["which_ivs"])
    ols = ols_fixed_coef(markets)
    cio.write_json(out / "ols.json", ols.to_dict())
    primary = None
    if method in ("2sls", "both"):
        res = tsls_fixed_coef(markets, ivs, which=which)
        cio.write_json(out / "tsls.json", res.to_dict())
        res.table().to_csv(out / "tsls_table.csv", float_format=cio.FLOAT_FORMAT)
        primary = res
    if method in ("gmm", "both"):
        gcfg = dict(cfg["gmm"])
        gcfg.setdefault("which_ivs", which)
        known = {f.name for f in fields(GmmConfig)}
        unknown = set(gcfg) - known
        if unknown:
            raise UsageError(f"unknown gmm settings: {', '.join(sorted(unknown))}")
        res = gmm_rcnl(markets, ivs, GmmConfig(**gcfg))
        cio.write_json(out / "gmm.json", res.to_dict())
        res.table().to_csv(out / "gmm_table.csv", float_format=cio.FLOAT_FORMAT)
        primary = res
    cio.write_params(out / "params.json", primary.params)
    ctx["flags"]["params_source"] = primary.metadata.get("estimator", "gmm")


def _recovered(markets, params):
    """Markets with xi and mc recovered from observed shares and prices."""
    out, rows = [], []
    for m in markets:
        delta = invert_shares(m.shares, m, params, newton=True)
        mm = m.replace(xi=recover_xi(m, params, delta))
        mc = recover_marginal_costs(mm, params)
        mm = mm.replace(mc=mc)
        resid = foc_residual(mm, params)
        out.append(mm)
        rows.append(pd.DataFrame({"market_id": m.market_id, "product_id": m.product_ids, "xi": mm.xi, "mc": mc, "foc_residual": resid}))
    return out, pd.concat(rows, ignore_index=True)


def cmd_estimate_supply(args, cfg, out, ctx):
    data = _require_data(args)
    params, src = _params(args, data)
    ctx["flags"]["params_source"] = src
    markets, frame = _recovered(data.markets, params)
    frame.to_csv(out / "mc.csv", index=False, float_format=cio.FLOAT_FORMAT)
    ent = data.entrants
    if ent.empty:
        raise UsageError("the data set has no entrants")
    if ctx["seed"] is None:
        raise UsageError("estimate-supply needs --seed")
    rng = rngmod.stream(ctx["seed"], "estimate_supply")
    by_period = {}
    for m in markets:
        by_period.setdefault(m.period, []).append(m)
    pool = np.concatenate([m.xi for m in markets])
    sd = np.vstack([m.x_emb for m in markets]).std(axis=0, ddof=1)
    mp_rows, regs, ivs, ties = [], [], [], []
    for pid, t in zip(ent["product_id"].to_numpy(), ent["entry_period"].to_numpy()):
        snap = sorted(by_period[t], key=lambda m: str(m.country))
        draws = pool[rng.integers(0, pool.size, size=cfg["n_shock_draws"])]
        mp = expected_marginal_profit(pid, snap, params, draws, h=cfg["h"])
        m0 = snap[0]
        idx = m0.index_of(pid)
        x_k = m0.x_emb[idx]
        inc = np.delete(m0.x_emb, idx, axis=0)
        reg, n_tie = cost_gradient_regressors(x_k, inc)
        regs.append(reg)
        ties.append(n_tie)
        ivs.append(np.stack([cost_ivs(inc, x_k, sd, ell, cfg["local_scale"]) for ell in range(x_k.size)]))
        mp_rows.append(mp.mean)
    mp_all = np.vstack(mp_rows)
    pd.DataFrame(mp_all, columns=[f"mp{i + 1}" for i in range(mp_all.shape[1])]).assign(product_id=ent["product_id"].to_numpy()).to_csv(
        out / "marginal_profit.csv", index=False, float_format=cio.FLOAT_FORMAT
    )
    for mode in cfg["slopes"]:
        if mode not in ("ols", "iv"):
            raise UsageError("slopes entries must be 'ols' or 'iv'")
        fit = estimate_cost_slopes(mp_all, np.stack(regs), mode=mode, instruments=np.stack(ivs) if mode == "iv" else None, n_ties=np.stack(ties))
        cio.write_json(out / f"cost_slopes_{mode}.json", fit.to_dict())
    n_bounds = len(ent) if cfg["max_bounds"] is None else min(int(cfg["max_bounds"]), len(ent))
    rows = []
    for i in range(n_bounds):
        pid, t = ent["product_id"].iloc[i], ent["entry_period"].iloc[i]
        snap = sorted(by_period[t], key=lambda m: str(m.country))
        b = entry_bound(pid, snap, params, pool, n_shocks=cfg["n_bound_shocks"], rng=rngmod.stream(ctx["seed"], "entry_bound", i))
        rows.append({"product_id": pid, "entry_period": t, "upper_bound": b.upper_bound, "profit_with": b.profit_with, "profit_without": b.profit_without})
    pd.DataFrame(rows).to_csv(out / "entry_bounds.csv", index=False, float_format=cio.FLOAT_FORMAT)


@dataclass
class EntryCell:
    """Picklable heatmap cell: one entry game at ``(d_bar, cost_level)``."""

    markets: list
    params: DemandParams
    cost: CostParams
    candidates: object
    firms: np.ndarray
    policy: PolicyConfig
    scenario: str
    basis: str
    median_cost: float
    seed: int

    def shift(self, level):
        if self.basis == "median_cost":
            return max(self.median_cost - float(level), 0.0)
        return float(level)

    def __call__(self, d_bar, level, rng):
        shift = self.shift(level)
        assist = ScenarioCost(kind="assistant", shift_C=shift)
        if self.scenario == "assistant":
            fn = scenario_cost_fn(self.cost, assist)
        else:
            ref = (self.candidates.reduced, self.markets[0].x_emb, None)
            fn = scenario_cost_fn(self.cost, ScenarioCost(kind="substitute", shift_C=shift), reference=ref)
            # common location-cost noise across cells keeps levels comparable
            rng = rngmod.stream(self.seed, "location_costs")
        return run_entry_game(self.policy.replace(d_bar=d_bar, response_mode="endogenous_entry"), self.markets, self.params, fn, self.firms, self.candidates, rng)


def _entry_setup(cfg, data, params, cost, seed):
    snap = data.snapshot()
    m0 = snap[0]
    seeds = m0.x_full if m0.x_full is not None else m0.x_emb
    pl = perturb_locations(seeds, cfg["c_levels"], cfg["n_per_level"], rngmod.substream_seed(seed, "candidates"))
    cand = make_candidates(pl.points, data.reducer if m0.x_full is not None else None)
    firms = np.unique(m0.firm_ids)
    n = min(int(cfg["n_entry_firms"]), firms.size)
    firms = rngmod.stream(seed, "entry_firms").choice(firms, size=n, replace=False)
    med = float(np.median(fixed_costs(cand.reduced, m0.x_emb, cost)))
    if cfg["scenario"] not in ("assistant", "substitute"):
        raise UsageError("scenario must be 'assistant' or 'substitute'")
    if cfg["cost_level_basis"] not in ("shift", "median_cost"):
        raise UsageError("cost_level_basis must be 'shift' or 'median_cost'")
    policy = PolicyConfig(start_period=cfg["start_period"], distance_space=cfg["distance_space"], cs_mode=cfg["cs_mode"])
    return EntryCell(snap, params, cost, cand, firms, policy, cfg["scenario"], cfg["cost_level_basis"], med, seed)


def _report_rows(report, **keys):
    return [{**keys, "metric": k, "value": float(v)} for k, v in report.metrics().items()]


def cmd_counterfactual(args, cfg, out, ctx):
    data = _require_data(args)
    params, src = _params(args, data)
    ctx["flags"].update(params_source=src, averaging="cs and sw per product, ps per firm")
    seed = ctx["seed"]
    if seed is None:
        raise UsageError("counterfactual needs --seed")
    try:
        policy = PolicyConfig(start_period=cfg["start_period"], distance_space=cfg["distance_space"], cs_mode=cfg["cs_mode"])
    except PolicyError as exc:
        raise UsageError(str(exc)) from exc
    mode = args.mode
    snap = data.snapshot()
    if mode == "removal":
        rows, reports = [], []
        rseed = seed if cfg["random_removal_seed"] is None else cfg["random_removal_seed"]
        for d in cfg["d_bars"]:
            for rm in ("remove", "remove_random"):
                rep = run_removal(policy.replace(d_bar=float(d), response_mode=rm), snap, params, random_seed=rseed)
                rows += _report_rows(rep, d_bar=float(d), response_mode=rm)
                reports.append({"d_bar": float(d), "response_mode": rm, **rep.to_dict()})
        pd.DataFrame(rows).to_csv(out / "removal.csv", index=False, float_format=cio.FLOAT_FORMAT)
        cio.write_json(out / "removal_reports.json", reports)
        return
    cost, csrc = _cost(args, data)
    ctx["flags"]["cost_source"] = csrc
    if mode == "relocate":
        cell = _entry_setup(cfg, data, params, cost, seed)
        fn = scenario_cost_fn(cost, ScenarioCost())
        rows, reports = [], []
        for d in cfg["d_bars"]:
            rep = run_relocation(policy.replace(d_bar=float(d), response_mode="relocate"), snap, params, cell.candidates, cost=fn)
            rows += _report_rows(rep, d_bar=float(d))
            reports.append({"d_bar": float(d), **rep.to_dict()})
        pd.DataFrame(rows).to_csv(out / "relocation.csv", index=False, float_format=cio.FLOAT_FORMAT)
        cio.write_json(out / "relocation_reports.json", reports)
        return
    cell = _entry_setup(cfg, data, params, cost, seed)
    ctx["flags"].update(scenario=cfg["scenario"], cost_level_basis=cfg["cost_level_basis"], median_location_cost=cell.median_cost)
    if mode == "entry-game":
        rep = cell(float(cfg["d_bar"]), cfg["cost_level"], rngmod.stream(seed, "heatmap_cell", 0))
        pd.DataFrame(_report_rows(rep, d_bar=float(cfg["d_bar"]), cost_level=cfg["cost_level"])).to_csv(
            out / "entry_game.csv", index=False, float_format=cio.FLOAT_FORMAT
        )
        cio.write_json(out / "entry_game_report.json", rep.to_dict())
        return
    table = welfare_heatmap(cfg["d_bars"], cfg["cost_levels"], cell, seed, n_workers=ctx["threads"])
    table.to_csv(out / "heatmap.csv", index=False, float_format=cio.FLOAT_FORMAT)


def cmd_spatial_reg(args, cfg, out, ctx):
    data = _require_data(args)
    panel = data.panel
    rings = [c for c in panel.columns if c.startswith("ring_")]
    if not rings:
        raise UsageError("panel has no ring_* columns")
    frames = []
    for outcome in cfg["outcomes"]:
        fit = spatial_regression(panel, rings, outcome=outcome, fe=tuple(cfg["fe"]), cluster=cfg["cluster"])
        tab = fit.table().reset_index().rename(columns={"index": "term"})
        tab.insert(0, "outcome", outcome)
        frames.append(tab)
    res = pd.concat(frames, ignore_index=True)
    res.to_csv(out / "spatial_reg.csv", index=False, float_format=cio.FLOAT_FORMAT)
    cio.write_json(out / "spatial_reg.json", res.to_dict(orient="records"))


def cmd_event_study(args, cfg, out, ctx):
    data = _require_data(args)
    panel = data.panel.copy()
    k = int(cfg["k"])
    if k != 5:
        prod = data.products
        ids, emb = data.embeddings
        lookup = pd.Series(np.arange(len(ids)), index=ids)
        first = first_treatment_periods(prod["product_id"].to_numpy(), prod["entry_period"].to_numpy(), emb[lookup.loc[prod["product_id"]].to_numpy()], k=k)
        panel["first_treat"] = panel["product_id"].map(pd.Series(first, index=prod["product_id"].to_numpy()))
    ctx["flags"]["nearest_k"] = k
    frames = []
    for outcome in cfg["outcomes"]:
        for est in cfg["estimators"]:
            if est == "twfe":
                tab = event_study(panel, outcome, window=tuple(cfg["window"])).table
            elif est == "imputation":
                tab = imputation_event_study(panel, outcome, horizon=int(cfg["window"][1])).table
            else:
                raise UsageError(f"unknown estimator {est!r}")
            tab = tab.copy()
            tab.insert(0, "estimator", est)
            tab.insert(0, "outcome", outcome)
            frames.append(tab)
    pd.concat(frames, ignore_index=True).to_csv(out / "event_study.csv", index=False, float_format=cio.FLOAT_FORMAT)


def cmd_diversion_curve(args, cfg, out, ctx):
    data = _require_data(args)
    params, src = _params(args, data)
    ctx["flags"]["params_source"] = src
    markets = data.markets if cfg["period"] is None else data.snapshot(cfg["period"])
    curve = aggregate_div_by_distance(markets, params, bin_width=cfg["bin_width"], d_max=cfg["d_max"])
    curve.to_csv(out / "diversion_curve.csv", index=False, float_format=cio.FLOAT_FORMAT)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "estimate-demand": cmd_estimate_demand,
    "estimate-supply": cmd_estimate_supply,
    "counterfactual": cmd_counterfactual,
    "spatial-reg": cmd_spatial_reg,
    "event-study": cmd_event_study,
    "diversion-curve": cmd_diversion_curve,
}

HELP = {
    "gen-data": "simulate a marketplace data set",
    "estimate-demand": "fixed-coefficient 2SLS and random-coefficient nested logit GMM",
    "estimate-supply": "marginal cost recovery, fixed-cost slopes and entry bounds",
    "counterfactual": "protection-radius counterfactuals",
    "spatial-reg": "fixed-effects regressions on ring competitor counts",
    "event-study": "event study around nearest-neighbour entry",
    "diversion-curve": "mean diversion by embedding distance",
}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config document")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("--threads", type=int, help="worker cap (default: CML_THREADS or 1)")
    parser = _Parser(prog="copyspace", description="Product differentiation in embedding space.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=HELP[name])
        if name != "gen-data":
            p.add_argument("--data", type=Path, help="data directory written by gen-data")
        if name in ("estimate-supply", "counterfactual", "diversion-curve"):
            p.add_argument("--params", type=Path, help="demand parameters JSON (default: the data set's true parameters)")
        if name == "counterfactual":
            p.add_argument("--mode", choices=COUNTERFACTUAL_MODES, required=True)
            p.add_argument("--cost", type=Path, help="cost parameters or slope-fit JSON (default: true costs)")
    return parser


def _validate_seed(seed):
    if seed is not None and not 0 <= seed < 2**64:
        raise UsageError("--seed must be an unsigned 64-bit integer")


def _commit(stage, out):
    out.mkdir(parents=True, exist_ok=True)
    for p in sorted(stage.iterdir()):
        target = out / p.name
        if target.is_dir():
            shutil.rmtree(target)
        shutil.move(str(p), str(target))


def run(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    _validate_seed(args.seed)
    threads = _threads(args)
    cfg = _load_config(args.config, args.command)
    if args.command != "gen-data" and getattr(args, "data", None) is None:
        raise UsageError(f"{args.command} needs --data")
    ctx = {"seed": args.seed, "threads": threads, "config": cfg, "flags": {"threads": threads}}
    if args.command == "counterfactual":
        ctx["flags"]["mode"] = args.mode
    stage = Path(tempfile.mkdtemp(prefix="copyspace-"))
    try:
        manifest = cio.RunManifest.start(args.command, argv, cfg, args.seed)
        COMMANDS[args.command](args, cfg, stage, ctx)
        manifest.config_hash = cio.config_hash(ctx["config"])
        manifest.seed = ctx["seed"]
        manifest.flags = ctx["flags"]
        manifest.finish(stage)
        _commit(stage, args.out)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return EXIT_OK


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(argv)
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, json.JSONDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``dtrmon simulate|estimate|oracle-check|diagnose``.

Exit codes: 0 success, 1 I/O error, 2 configuration error, 3 a propensity
model failed to converge, 4 every regime lost support before ``t0``,
5 an oracle identity failed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .cohort import CohortError, write_cohort
from .estimator import frame_to_csv
from .pipeline import AnalysisSpec, SpecError, run_analysis, write_outputs
from .propensity import PropensityError
from .regimes import DEFAULT_SKIPS, DEFAULT_THRESHOLDS, KIND_FOR_MODE, RegimeError, regime_grid
from .simulator import (InvalidConfig, PositivityViolation, StateSpaceTooLarge, enumerate_truth,
                        ipw_population_value, load_scenario, observed_law, simulate_cohort)
from .weights import MODES, bin_weights, follower_frame

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_SUPPORT, EXIT_ORACLE = 0, 1, 2, 3, 4, 5
DEFAULT_TOLERANCE = 1e-10


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _cap(text: str):
    if text.lower() == "none":
        return "none"
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid truncation cap {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError("truncation cap must be positive")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtrmon", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="draw a cohort from a scenario")
    s.add_argument("--config", required=True, help="scenario JSON (path or bundled name)")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--out", required=True, help="output directory")

    e = sub.add_parser("estimate", help="run the IPW analysis described by a spec")
    e.add_argument("--config", required=True, help="analysis spec JSON")
    e.add_argument("--seed", type=_seed)
    e.add_argument("--out", help="output directory (overrides the analysis spec)")
    e.add_argument("--truncate", type=_cap, help="weight cap or 'none'")
    e.add_argument("--bootstrap", type=int, help="bootstrap replicates (0 disables)")
    e.add_argument("--mode", choices=MODES)
    e.add_argument("--adjust-monitoring", choices=("on", "off"))

    o = sub.add_parser("oracle-check", help="compare population IPW values with exact enumeration")
    o.add_argument("--config", required=True, help="discrete scenario JSON")
    o.add_argument("--tolerance", type=float, default=None)
    o.add_argument("--out", help="optional directory for the result table")

    d = sub.add_parser("diagnose", help="weight bins and follower counts from a saved weights CSV")
    d.add_argument("--config", required=True, help="weights CSV written by 'estimate'")
    d.add_argument("--out", required=True, help="output directory")
    return p


def _read_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"file not found: {path}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"malformed JSON in {path}: {exc}") from None


def _scenario(ref: str):
    try:
        return load_scenario(ref)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"file not found: {ref}") from None
    except InvalidConfig as exc:
        raise CliError(EXIT_CONFIG, f"invalid scenario: {exc}") from None


def _write(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from None


def cmd_simulate(args) -> int:
    scenario = _scenario(args.config)
    if args.n < 1:
        raise CliError(EXIT_CONFIG, "--n must be positive")
    cohort = simulate_cohort(scenario, args.n, np.random.SeedSequence(args.seed))
    head = f"config_sha256={scenario.sha256} seed={args.seed}"
    out = Path(args.out)
    _write(out / "cohort.csv", write_cohort(cohort, header_comment=head))
    prov = {"config_sha256": scenario.sha256, "seed": args.seed, "scenario": scenario.name,
            "n": args.n, "horizon": scenario.horizon,
            "cohort_sha256": hashlib.sha256((out / "cohort.csv").read_bytes()).hexdigest()}
    _write(out / "provenance.json", json.dumps(prov, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_estimate(args) -> int:
    raw = _read_json(args.config)
    if not isinstance(raw, dict):
        raise CliError(EXIT_CONFIG, "analysis spec must be a JSON object")
    raw = dict(raw)
    if args.mode is not None:
        raw["mode"] = args.mode
        if "regimes" not in raw:
            raw.setdefault("thresholds", list(DEFAULT_THRESHOLDS))
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.truncate is not None:
        raw["truncate"] = None if args.truncate == "none" else args.truncate
    if args.bootstrap is not None:
        raw["bootstrap"] = args.bootstrap
    if args.adjust_monitoring is not None:
        raw["adjust_monitoring"] = args.adjust_monitoring == "on"
    try:
        spec = AnalysisSpec.from_dict(raw, base_dir=str(Path(args.config).parent))
    except (SpecError, RegimeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid analysis spec: {exc}") from None
    out = args.out or (spec.resolve(spec.out) if spec.out else None)
    if out is None:
        raise CliError(EXIT_CONFIG, "no output directory: give --out or 'out' in the analysis spec")
    try:
        result = run_analysis(spec)
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"file not found: {exc}") from None
    except (CohortError, InvalidConfig, SpecError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    except PropensityError as exc:
        raise CliError(EXIT_NONCONVERGENCE, f"propensity model failed: {exc}") from None
    try:
        write_outputs(result, out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write outputs: {exc}") from None
    if not result.converged:
        bad = [k for k, f in result.estimate.fits.items() if not f.converged]
        raise CliError(EXIT_NONCONVERGENCE, f"model(s) did not converge: {', '.join(bad)}")
    if result.all_support_lost:
        raise CliError(EXIT_SUPPORT, f"every regime lost support before t0 = {spec.t0}")
    return EXIT_OK


def oracle_rows(scenario, tolerance: float | None = None) -> list[dict]:
    """Run the identity and equality checks declared in the scenario's oracle section."""
    oracle = dict(scenario.oracle)
    tol = tolerance if tolerance is not None else float(oracle.get("tolerance", DEFAULT_TOLERANCE))
    thresholds = oracle.get("thresholds", list(DEFAULT_THRESHOLDS))
    skips = oracle.get("skips", list(DEFAULT_SKIPS))
    checks = oracle.get("checks") or [{"kind": "identity", "mode": m} for m in MODES]
    law = observed_law(scenario)
    rows = []
    for check in checks:
        kind = check.get("kind")
        if kind == "identity":
            mode = check["mode"]
            for reg in regime_grid(thresholds, KIND_FOR_MODE[mode], skips):
                truth = enumerate_truth(scenario, reg)
                for h in range(1, scenario.horizon + 1):
                    value = ipw_population_value(scenario, reg, mode, t0=h - 1, law=law)
                    delta = value - truth.at(h)
                    rows.append({"check": "identity", "mode": mode, "regime": reg.regime_id, "h": h,
                                 "ipw": value, "reference": truth.at(h), "delta": delta,
                                 "pass": abs(delta) <= tol})
        elif kind == "mode-equality":
            m1, m2 = check.get("modes", ["joint-static", "nde-relaxed"])
            regs1 = regime_grid(thresholds, KIND_FOR_MODE[m1], skips)
            regs2 = regime_grid(thresholds, KIND_FOR_MODE[m2], skips)
            for r1, r2 in zip(regs1, regs2):
                for h in range(1, scenario.horizon + 1):
                    v1 = ipw_population_value(scenario, r1, m1, t0=h - 1, law=law)
                    v2 = ipw_population_value(scenario, r2, m2, t0=h - 1, law=law)
                    rows.append({"check": "mode-equality", "mode": f"{m1}|{m2}",
                                 "regime": f"{r1.regime_id}|{r2.regime_id}", "h": h, "ipw": v1,
                                 "reference": v2, "delta": v1 - v2, "pass": abs(v1 - v2) <= tol})
        else:
            raise InvalidConfig(f"unknown oracle check kind {kind!r}")
    return rows


def cmd_oracle_check(args) -> int:
    scenario = _scenario(args.config)
    if not scenario.discrete:
        raise CliError(EXIT_CONFIG, "oracle-check needs a discrete scenario")
    try:
        rows = oracle_rows(scenario, args.tolerance)
    except (StateSpaceTooLarge, InvalidConfig, KeyError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot run oracle: {exc}") from None
    except PositivityViolation as exc:
        raise CliError(EXIT_ORACLE, f"positivity violation: {exc}") from None
    df = pd.DataFrame(rows, columns=["check", "mode", "regime", "h", "ipw", "reference", "delta", "pass"])
    table = df.assign(delta=df["delta"].map(lambda v: f"{v:+.3e}"),
                      ipw=df["ipw"].map(lambda v: f"{v:.12f}"),
                      reference=df["reference"].map(lambda v: f"{v:.12f}"),
                      **{"pass": df["pass"].map({True: "PASS", False: "FAIL"})})
    print(table.to_string(index=False))
    if args.out:
        _write(Path(args.out) / "oracle.csv", frame_to_csv(df, f"config_sha256={scenario.sha256} seed=none"))
    failed = df[~df["pass"]]
    if len(failed):
        for _, row in failed.iterrows():
            print(f"oracle failure: {row['check']} mode={row['mode']} regime={row['regime']} "
                  f"h={row['h']} delta={row['delta']:+.3e}", file=sys.stderr)
        return EXIT_ORACLE
    return EXIT_OK


def cmd_diagnose(args) -> int:
    path = Path(args.config)
    if not path.exists():
        raise CliError(EXIT_IO, f"file not found: {path}")
    head = ""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("#"):
        head = first[1:].strip()
    try:
        df = pd.read_csv(path, comment="#", dtype={"id": str}, float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from None
    missing = {"id", "regime", "t", "weight"} - set(df.columns)
    if missing:
        raise CliError(EXIT_CONFIG, f"weights file lacks column(s): {sorted(missing)}")
    bins = bin_weights(df["weight"].to_numpy(dtype=float))
    nz = df[df["weight"] > 0]
    counts = nz.groupby(["regime", "t"], sort=False).size()
    followers = {(r, int(t)): 0 for r, t in df[["regime", "t"]].drop_duplicates().itertuples(index=False)}
    followers.update({(r, int(t)): int(c) for (r, t), c in counts.items()})
    out = Path(args.out)
    _write(out / "weight_bins.csv", bins.to_csv(header_comment=head or None))
    _write(out / "followers.csv", frame_to_csv(follower_frame(followers), head or None))
    print(bins.to_frame().to_string(index=False))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate,
            "oracle-check": cmd_oracle_check, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"dtrmon: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())

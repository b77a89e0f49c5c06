"""Command-line front end.

    kamknob run --config <path> --out <dir> [--no-verify] [-v]
    kamknob presets
    kamknob check-freq --config <path>

Exit codes of ``run``: 0 when the perturbation lies below the theoretical
threshold and every certificate passed, 2 when the run completed but is only
empirically supported (above threshold, verification skipped, or a failed
certificate), 1 on errors including a failed Diophantine check.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .estimates import (
    ScheduleInvalid,
    compare_predicted_observed,
    compute_constants,
    epsilon_threshold,
    predicted_schedule,
    size_constant,
)
from .homological import RESONANCE_GUARD, DiophantineFrequency, check_diophantine
from .jsonio import dumps, write_csv, write_json
from .normalizer import RunParams, run_normalization, state_from_series
from .presets import PRESETS, preset_names
from .series import DomainParams, SeriesError, TruncationPolicy
from .verification import deformation_check, torus_residual

log = logging.getLogger("kamknob")

EXIT_OK, EXIT_ERROR, EXIT_UNCERTIFIED = 0, 1, 2

RESIDUAL_HEADER = ["step", "residual_h0", "residual_h1", "detuning_increment_norm", "predicted_eps_k", "trunc_loss"]


class DiophantineFailure(RuntimeError):
    def __init__(self, report, resonances):
        self.report = report
        self.resonances = resonances
        if resonances:
            k = resonances[0]
            msg = f"omega is resonant: k={k} gives k.omega = 0"
        else:
            k, v = report.violations[0]
            msg = f"Diophantine bound fails at k={k} (|k.omega| = {v:.3e})"
        super().__init__(msg)


@dataclass
class RunOutcome:
    exit_code: int
    report: dict
    result: object = None
    files: list[str] = field(default_factory=list)


def _frequency(cfg: RunConfig) -> DiophantineFrequency:
    return DiophantineFrequency(cfg.omega, cfg.gamma, cfg.tau)


def _policy(cfg: RunConfig) -> TruncationPolicy:
    t = cfg.truncation
    return TruncationPolicy(t.p_degree, t.fourier_order, t.lie_order, t.tail_tol, t.coeff_floor)


def frequency_report(cfg: RunConfig):
    """Diophantine scan at the configured horizon plus the list of exact resonances."""
    freq = _frequency(cfg)
    K = cfg.check_horizon or cfg.truncation.fourier_order
    rep = check_diophantine(freq, K)
    res = [list(k) for k, v in rep.violations if v < RESONANCE_GUARD * sum(abs(x) for x in k)]
    return rep, res


def execute(cfg: RunConfig, verify: bool = True) -> RunOutcome:
    """Diophantine check, ledger, normalization, comparison and certificates."""
    freq = _frequency(cfg)
    dom0 = DomainParams(cfg.rho0, cfg.sigma0)
    half = DomainParams(cfg.rho0 / 2, cfg.sigma0 / 2)
    report: dict = {
        "tool": "kamknob",
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "config": cfg.to_json(),
    }
    rep, resonances = frequency_report(cfg)
    report["diophantine"] = {**rep.to_json(), "resonances": resonances}
    if not rep.passed:
        raise DiophantineFailure(rep, resonances)

    h = cfg.series()
    state = state_from_series(h, freq, dom0)

    # theoretical ledger at the limiting domain (rho0/2, sigma0/2)
    E0 = size_constant(h, cfg.omega, cfg.epsilon, dom0)
    ledger = compute_constants(E0, freq.n, freq, half, eps=cfg.epsilon, delta=1.0 / cfg.alpha)
    eps_star = epsilon_threshold(ledger, cfg.alpha, cfg.tau) if cfg.alpha >= 9 else None
    schedule_note = None
    try:
        schedule = predicted_schedule(cfg.epsilon, max(cfg.alpha, 9.0), dom0, cfg.steps, tau=cfg.tau, K5=ledger.K[4])
    except ScheduleInvalid as exc:
        schedule_note = str(exc)
        schedule = predicted_schedule(cfg.epsilon, max(cfg.alpha, 9.0), dom0, cfg.steps, tau=cfg.tau)
    certified_regime = eps_star is not None and cfg.epsilon <= eps_star and schedule_note is None
    report["estimates"] = {
        "ledger": ledger.to_json(),
        "epsilon": cfg.epsilon,
        "epsilon_star": eps_star,
        "regime": "certified" if certified_regime else "empirical",
        "schedule": schedule.to_json(),
        "schedule_note": schedule_note,
    }

    params = RunParams(
        steps=cfg.steps,
        alpha=cfg.alpha,
        policy=_policy(cfg),
        max_outer=cfg.outer.max_iters,
        tol_outer=cfg.outer.tol,
    )
    result = run_normalization(state, params)
    fin = result.final_state
    r0, r1 = fin.residuals()
    report["normalization"] = {
        "omega": list(freq.omega),
        "detuning0": result.detuning0,
        "omega0": result.omega0,
        "outer_iterations": result.outer_iterations,
        "outer_converged": result.converged,
        "outer_history": result.outer_history,
        "outer_updates": result.outer_updates,
        "steps_run": len(result.steps),
        "steps": [s.to_json() for s in result.steps],
        "tails": result.tails,
        "final": {
            "norm_h0": r0,
            "norm_h1_offavg": r1,
            "rho": fin.dom.rho,
            "sigma": fin.dom.sigma,
            "detuning_tail": fin.detuning_tail,
            "energy_shift": fin.energy_shift,
        },
        "total_truncation_loss": result.total_loss,
        "numerical_floor": result.numerical_floor,
    }
    comparison = compare_predicted_observed(schedule, result, ledger)
    report["comparison"] = comparison
    if certified_regime and not comparison.get("hypotheses_verified", True):
        certified_regime = False
        report["estimates"]["regime"] = "empirical"

    torus = deform = None
    if verify:
        cmap = result.coordinate_map()
        torus = torus_residual(
            state,
            result,
            samples=cfg.verify.samples,
            T=cfg.verify.horizon,
            dt=cfg.verify.dt,
            columns=cfg.verify.columns,
            symplectic=cfg.verify.symplectic,
            cmap=cmap,
        )
        deform = deformation_check(
            result, half, schedule.delta_k[: len(result.steps)], certified=certified_regime, cmap=cmap
        )
        report["verification"] = {"torus": torus.to_json(), "deformation": deform.to_json()}
    else:
        report["verification"] = None

    certificates = []
    if torus is not None:
        certificates.append(torus.passed)
    if deform is not None and deform.passed is not None:
        certificates.append(deform.passed)
    if verify and certified_regime and all(certificates):
        code = EXIT_OK
    else:
        code = EXIT_UNCERTIFIED
    report["status"] = {
        "exit_code": code,
        "regime": "certified" if certified_regime else "empirical",
        "verified": verify,
        "certificates_passed": bool(certificates) and all(certificates),
        "hypotheses": "verified" if certified_regime else "theorem hypotheses not verified",
    }
    out = RunOutcome(code, report, result)
    out.torus = torus
    out.schedule = schedule
    return out


def residual_rows(outcome: RunOutcome) -> list[list]:
    """Rows of ``residuals.csv``: the initial state as step 0, then one row per step."""
    res = outcome.result
    eps = outcome.report["config"]["epsilon"]
    r0, r1 = res.initial_state.residuals()
    rows = [[0, r0, r1, 0.0, float(eps), 0.0]]
    for s in res.steps:
        rows.append([s.step, s.residual_h0, s.residual_h1, s.detuning_increment_norm, float(eps) ** (s.step + 1), s.trunc_loss])
    return rows


def write_outputs(outcome: RunOutcome, out: Path) -> list[str]:
    out.mkdir(parents=True, exist_ok=True)
    res = outcome.result
    write_json(out / "report.json", outcome.report)
    write_csv(out / "residuals.csv", RESIDUAL_HEADER, residual_rows(outcome))
    pol = res.params.policy
    write_json(
        out / "generators.json",
        {
            "n": res.initial_state.n,
            "omega": list(res.initial_state.freq.omega),
            "detuning0": res.detuning0,
            "omega0": res.omega0,
            "domain": {"rho": res.initial_state.dom.rho, "sigma": res.initial_state.dom.sigma},
            "truncation": {
                "p_degree": pol.p_degree,
                "fourier_order": pol.fourier_order,
                "lie_order": pol.lie_order,
                "tail_tol": pol.tail_tol,
                "coeff_floor": pol.coeff_floor,
            },
            "generators": [g.to_json() for g in res.generators],
        },
    )
    torus = outcome.report.get("verification")
    write_json(out / "torus.json", torus["torus"] if torus else {"skipped": True})
    return ["report.json", "residuals.csv", "generators.json", "torus.json"]


# -- commands ----------------------------------------------------------------------------

def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except (OSError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    out = Path(args.out)
    t0 = time.perf_counter()
    try:
        outcome = execute(cfg, verify=not args.no_verify)
    except DiophantineFailure as exc:
        out.mkdir(parents=True, exist_ok=True)
        write_json(
            out / "report.json",
            {
                "tool": "kamknob",
                "version": __version__,
                "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
                "config": cfg.to_json(),
                "diophantine": {**exc.report.to_json(), "resonances": exc.resonances},
                "error": str(exc),
                "status": {"exit_code": EXIT_ERROR},
            },
        )
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (SeriesError, ValueError, ArithmeticError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    write_outputs(outcome, out)
    rep = outcome.report
    norm = rep["normalization"]
    print(f"omega0 = {dumps(norm['omega0']).strip()}  detuning0 = {dumps(norm['detuning0']).strip()}")
    print(f"steps run: {norm['steps_run']}  final residual: {max(norm['final']['norm_h0'], norm['final']['norm_h1_offavg']):.3e}")
    if rep["verification"]:
        tor = rep["verification"]["torus"]
        print(f"torus max deviation {tor['max_deviation']:.3e} (bound {tor['bound']:.3e}), pass={tor['pass']}")
    print(f"regime: {rep['status']['regime']}  exit {outcome.exit_code}  ({time.perf_counter() - t0:.1f} s)")
    return outcome.exit_code


def cmd_presets(args) -> int:
    for name in preset_names():
        p = PRESETS[name]
        d = p.defaults
        print(f"{name}: n={p.n}  {p.description}")
        print(f"    omega={d['omega']} gamma={d['gamma']} tau={d['tau']} epsilon={d['epsilon']} rho0={d['rho0']} sigma0={d['sigma0']}")
    return EXIT_OK


def cmd_check_freq(args) -> int:
    try:
        cfg = load_config(args.config)
    except (OSError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    rep, res = frequency_report(cfg)
    sys.stdout.write(dumps({**rep.to_json(), "resonances": res}))
    if not rep.passed:
        worst = res[0] if res else list(rep.violations[0][0])
        print(f"fail: k={worst}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kamknob", description="Kolmogorov normal form with a frequency knob.")
    ap.add_argument("--version", action="version", version=f"kamknob {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="normalize, estimate and verify one configuration")
    r.add_argument("--config", required=True, help="JSON configuration file")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--no-verify", action="store_true", help="skip the orbit and deformation certificates")
    r.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    r.set_defaults(func=cmd_run)
    p = sub.add_parser("presets", help="list the built-in Hamiltonians")
    p.set_defaults(func=cmd_presets)
    c = sub.add_parser("check-freq", help="Diophantine scan of the configured frequency")
    c.add_argument("--config", required=True, help="JSON configuration file")
    c.set_defaults(func=cmd_check_freq)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(getattr(args, "verbose", 0), logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command line: synthesis report, certification, simulation and the reference study.

Exit codes: 0 success, 2 configuration error, 3 synthesis failure,
4 certification failure, 5 acceptance failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys as _sys
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from smpc import config as cfgmod
from smpc.config import ConfigError, Experiment
from smpc.issp import (
    CertificationError,
    IsspCertificate,
    autonomous_lyapunov,
    calibrate_issp_bound,
    certify,
    certify_empty_feasible_set,
    issp_empirical_check,
    lyapunov_ingredients,
    recurrence_stats,
)
from smpc.linalg import (
    DareDivergenceError,
    NotPositiveDefiniteError,
    UnstableMatrixError,
    spectral_radius,
    sym_eig,
)
from smpc.model import propagate_covariance
from smpc.mpc import MpcProblemData, assemble, solve_mpc
from smpc.sim import (
    CombinedController,
    SimConfig,
    TrajectoryRecord,
    ZeroController,
    monte_carlo,
    one_step_violations,
    violation_stats,
)
from smpc.tightening import (
    TerminalSetEmptyError,
    TighteningError,
    first_empty_step,
    normal_cdf,
    tightening_factor,
)

EXIT_OK, EXIT_CONFIG, EXIT_SYNTH, EXIT_CERT, EXIT_ACCEPT = 0, 2, 3, 4, 5

REFERENCE_QF = np.array([[14.250, 1.213], [1.213, 28.339]])
REFERENCE_PSI_GAUSS = 1.7805
REFERENCE_PSI_AMBIGUITY = 5.0663


class SynthesisError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


def _fmt(v) -> str:
    if isinstance(v, np.ndarray):
        v = v.tolist()
    if isinstance(v, float):
        return repr(v)
    return json.dumps(v)


def flat_report(pairs: dict) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in pairs.items())


# ----------------------------------------------------------------------
# steps shared by the commands

def synthesize(exp: Experiment) -> MpcProblemData:
    try:
        return assemble(exp.sys, exp.cost, exp.X, exp.U, exp.noise, exp.N, exp.delta, exp.terminal_facets)
    except TighteningError as exc:
        raise SynthesisError("tightening", str(exc)) from None
    except TerminalSetEmptyError as exc:
        raise SynthesisError("terminal", str(exc)) from None
    except (DareDivergenceError, NotPositiveDefiniteError) as exc:
        raise SynthesisError("linalg", str(exc)) from None


def synth_report(exp: Experiment, data: MpcProblemData) -> dict:
    rep: dict = {
        "N": data.N,
        "delta": data.tightened.delta,
        "noise_mode": exp.noise.mode,
        "spectral_radius_A": spectral_radius(exp.sys.A),
        "Qf": data.terminal.Qf,
        "Kf": data.terminal.Kf,
        "alpha": data.terminal.alpha,
        "terminal_facets": data.terminal_polytope.n_constraints,
        "psi": data.tightened.psi,
        "c": data.c,
    }
    for i, Z in enumerate(data.tightened.sets):
        rep[f"tightened_offsets[{i}]"] = Z.h
    rep[f"tightened_offsets[{data.N}]"] = data.tightened.terminal_box.h
    try:
        stability_gate(exp)
        ing = lyapunov_ingredients(exp.sys.A, exp.noise.sigma_w, exp.P, exp.Q_lyap)
        rep.update({"P": ing.P, "kappa_coeff": ing.kappa_coeff, "rho": ing.rho, "gamma_min": ing.gamma_min})
    except CertificationError as exc:
        rep["issp"] = f"unavailable: {exc}"
    return rep


def _certificate(exp: Experiment, data: MpcProblemData) -> IsspCertificate:
    iss = exp.doc["issp"]
    try:
        return certify(
            data, P=exp.P, Q_lyap=exp.Q_lyap, gamma_factor=iss["gamma_factor"], n_samples=iss["sublevel_samples"],
        )
    except (UnstableMatrixError, NotPositiveDefiniteError) as exc:
        raise CertificationError(str(exc)) from None


def stability_gate(exp: Experiment) -> None:
    """Certification checks that do not need the MPC; raises :class:`CertificationError`."""
    try:
        lyapunov_ingredients(exp.sys.A, exp.noise.sigma_w, exp.P, exp.Q_lyap)
    except (UnstableMatrixError, NotPositiveDefiniteError) as exc:
        raise CertificationError(str(exc)) from None


def empty_set_certificate(exp: Experiment) -> Optional[tuple[int, IsspCertificate]]:
    """If some tightened set is provably empty, the failing certificate and that step."""
    covs = propagate_covariance(exp.sys, exp.noise, exp.N)
    i = first_empty_step(exp.X, covs, exp.delta, exp.noise.mode, exp.N)
    if i is None:
        return None
    cert = certify_empty_feasible_set(
        exp.sys.A, exp.noise.sigma_w, exp.cost.Q, exp.N, exp.P, exp.Q_lyap, exp.doc["issp"]["gamma_factor"],
    )
    return i, cert


def simulate(exp: Experiment, data: MpcProblemData, mode: str, P) -> list[TrajectoryRecord]:
    if mode == "mpc_combined":
        controller = CombinedController(data, candidate=True)
    else:
        controller = ZeroController(exp.sys.nu, data)
    return monte_carlo(exp.sim, exp.sys, controller, exp.noise, exp.X, P)


def lyapunov_matrix(exp: Experiment) -> Optional[np.ndarray]:
    if exp.P is not None:
        return exp.P
    try:
        return autonomous_lyapunov(exp.sys.A, np.eye(exp.sys.nx) if exp.Q_lyap is None else exp.Q_lyap)
    except (CertificationError, UnstableMatrixError):
        return None


# ----------------------------------------------------------------------
# output files

def _num(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_csvs(out: str, ensemble: Sequence[TrajectoryRecord], exp: Experiment, mode: str, doc_hash: str) -> dict:
    os.makedirs(out, exist_ok=True)
    nx, nu = exp.sys.nx, exp.sys.nu
    files = {}

    path = os.path.join(out, "trajectories.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "k"] + [f"x{i + 1}" for i in range(nx)] + [f"u{i + 1}" for i in range(nu)]
                   + ["branch", "feasible", "violated"])
        for rec in ensemble:
            for k in range(rec.steps + 1):
                u = [repr(float(v)) for v in rec.inputs[k]] if k < rec.steps else [""] * nu
                branch = rec.branch_flags[k] if k < rec.steps else ""
                feas = rec.feasible_flags[k] if rec.feasible_flags is not None else ""
                w.writerow([rec.run_id, k] + [repr(float(v)) for v in rec.states[k]] + u
                           + [branch, feas, int(rec.violation_flags[k])])
    files["trajectories"] = "trajectories.csv"

    path = os.path.join(out, "lyapunov.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "k", "V", "candidate_V"])
        for rec in ensemble:
            for k in range(rec.steps + 1):
                V = _num(rec.lyapunov_V[k]) if rec.lyapunov_V is not None else ""
                cand = _num(rec.candidate_V[k]) if rec.candidate_V is not None else ""
                w.writerow([rec.run_id, k, V, cand])
    files["lyapunov"] = "lyapunov.csv"

    viol = violation_stats(ensemble, exp.X)
    outside = None
    if all(r.feasible_flags is not None for r in ensemble):
        outside = np.mean([[f != "inside" for f in r.feasible_flags] for r in ensemble], axis=0)
    path = os.path.join(out, "summary.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "violation_frequency", "outside_feasible_frequency"])
        for k, v in enumerate(viol):
            w.writerow([k, repr(float(v)), "" if outside is None else repr(float(outside[k]))])
    files["summary"] = "summary.csv"

    manifest: dict = {
        "config_sha256": doc_hash,
        "master_seed": exp.sim.master_seed,
        "mode": mode,
        "n_runs": exp.sim.n_runs,
        "steps": exp.sim.steps,
        "files": files,
        "violation_frequency_max": float(viol.max()),
    }
    if outside is not None:
        st = recurrence_stats(ensemble)
        path = os.path.join(out, "excursions.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["hitting_time", "count"])
            for t, n in st.histogram.items():
                w.writerow([t, n])
            w.writerow(["unreturned", st.unreturned])
        files["excursions"] = "excursions.csv"
        manifest["recurrence"] = {
            "excursions": st.excursions,
            "unreturned": st.unreturned,
            "max_hitting_time": st.max_hitting_time,
        }
    if mode == "mpc_combined":
        hits, pairs = one_step_violations(ensemble, exp.X)
        manifest["one_step_violations"] = {"violations": hits, "mpc_steps": pairs}
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


# ----------------------------------------------------------------------
# acceptance summary for the reference study

@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    expected: str
    actual: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: expected {self.expected}, got {self.actual}"


def reference_checks(exp: Experiment, data: MpcProblemData, cert: IsspCertificate,
                     mpc_ens: Sequence[TrajectoryRecord], issp_bound_result) -> list[Check]:
    out = []
    err = float(np.abs(data.terminal.Qf - REFERENCE_QF).max())
    out.append(Check("terminal cost", err <= 5e-3, f"{REFERENCE_QF.tolist()} within 5e-3",
                     f"{np.round(data.terminal.Qf, 4).tolist()} (max error {err:.4f})"))
    P = exp.P if exp.P is not None else cert.P
    lmax = float(sym_eig(exp.sys.A.T @ P @ exp.sys.A - P)[0][-1])
    out.append(Check("Lyapunov matrix", lmax < 0, "max eigenvalue of A'PA - P < 0", f"{lmax:.6g}"))
    n_c = exp.X.n_constraints
    psi_g = tightening_factor("exact_gaussian", exp.delta, n_c)
    cdf_err = abs(normal_cdf(psi_g) - (1 - exp.delta / n_c))
    out.append(Check("Gaussian tightening factor", abs(psi_g - REFERENCE_PSI_GAUSS) <= 1e-3 and cdf_err <= 1e-10,
                     f"{REFERENCE_PSI_GAUSS} +- 1e-3", f"{psi_g:.6f} (cdf error {cdf_err:.1e})"))
    psi_a = tightening_factor("moment_ambiguity", exp.delta, n_c)
    out.append(Check("ambiguity tightening factor", abs(psi_a - REFERENCE_PSI_AMBIGUITY) <= 1e-4,
                     f"{REFERENCE_PSI_AMBIGUITY} +- 1e-4", f"{psi_a:.6f}"))
    x0 = exp.sim.initial_state(0)
    st = solve_mpc(data, x0).status
    out.append(Check("initial state feasible", st == "optimal", "optimal", st))
    out.append(Check("sublevel set inside feasible set", cert.certified, "certified",
                     "certified" if cert.certified else f"witness {None if cert.witness is None else cert.witness.tolist()}"))
    hits, pairs = one_step_violations(mpc_ens, exp.X)
    freq = hits / max(pairs, 1)
    bound = exp.delta + 3 * math.sqrt(exp.delta * (1 - exp.delta) / max(pairs, 1))
    out.append(Check("one-step violation frequency", freq <= bound, f"<= {bound:.4f}", f"{freq:.4f} over {pairs} steps"))
    rs = recurrence_stats(mpc_ens)
    out.append(Check("excursions return", rs.all_returned, "0 unreturned",
                     f"{rs.unreturned} unreturned of {rs.excursions}, max hitting time {rs.max_hitting_time}"))
    res = issp_bound_result
    eps = exp.doc["issp"]["eps"]
    out.append(Check("empirical stability in probability", res.passed, f"fraction >= {1 - eps}", f"{res.fraction:.4f}"))
    return out


def empirical_issp(exp: Experiment):
    """Calibrate on one autonomous ensemble, evaluate on an independent one."""
    iss = exp.doc["issp"]
    s = exp.sim
    M = min(iss["M"], s.steps)
    zero = ZeroController(exp.sys.nu)
    cal_cfg = SimConfig("autonomous", iss["calibration_runs"], M, s.master_seed, s.initial_states[:1])
    ev_cfg = SimConfig("autonomous", iss["evaluation_runs"], M, s.master_seed + 1, s.initial_states[:1])
    cal = monte_carlo(cal_cfg, exp.sys, zero, exp.noise)
    bound = calibrate_issp_bound(cal, exp.sys.A, iss["eps"], M)
    ev = monte_carlo(ev_cfg, exp.sys, zero, exp.noise)
    return bound, issp_empirical_check(ev, iss["eps"], M, (bound.C, bound.lam), bound.rho)


# ----------------------------------------------------------------------
# argument handling

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smpc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_config=True):
        sp.add_argument("--config", required=need_config, help="experiment JSON document")
        sp.add_argument("--mode", choices=["autonomous", "mpc"], help="simulation mode")
        sp.add_argument("--seed", type=int, help="master seed (u64)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--runs", type=int, help="number of runs")
        sp.add_argument("--steps", type=int, help="steps per run")

    common(sub.add_parser("synth", help="terminal ingredients, tightening and certificate constants"))
    common(sub.add_parser("certify", help="stability-in-probability certificate"))
    common(sub.add_parser("simulate", help="Monte Carlo ensemble to CSV"))
    common(sub.add_parser("reproduce-paper", help="run the embedded reference study"), need_config=False)
    return p


def _load(args) -> Experiment:
    doc = cfgmod.load(args.config) if args.config else json.loads(json.dumps(cfgmod.REFERENCE_CONFIG))
    sim = doc["sim"]
    if args.mode is not None:
        sim["mode"] = "mpc_combined" if args.mode == "mpc" else "autonomous"
    if args.seed is not None:
        sim["master_seed"] = args.seed
    if args.runs is not None:
        sim["n_runs"] = args.runs
        if len(sim["initial_states"]) not in (1, args.runs):
            sim["initial_states"] = sim["initial_states"][:1]
    if args.steps is not None:
        sim["steps"] = args.steps
    return cfgmod.build(cfgmod.normalize(doc))


def _emit(text: str, out: Optional[str], name: str) -> None:
    _sys.stdout.write(text)
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        exp = _load(args)
    except ConfigError as exc:
        print(str(exc), file=_sys.stderr)
        return EXIT_CONFIG
    if args.command in ("certify", "reproduce-paper"):
        try:
            stability_gate(exp)
        except CertificationError as exc:
            print(f"certification failure [issp]: {exc}", file=_sys.stderr)
            return EXIT_CERT
    try:
        data = synthesize(exp)
    except SynthesisError as exc:
        print(f"synthesis failure [{exc}]", file=_sys.stderr)
        if args.command == "certify" and exc.stage == "tightening":
            found = empty_set_certificate(exp)
            if found is not None:
                step, cert = found
                report = dict(cert.as_dict(), empty_tightened_step=step)
                _emit(flat_report(report), args.out, "certificate.txt")
                print(f"certification failure [issp]: feasible set empty (tightened set {step} is empty)",
                      file=_sys.stderr)
                return EXIT_CERT
        return EXIT_SYNTH
    doc_hash = cfgmod.config_hash(exp.doc)

    if args.command == "synth":
        _emit(flat_report(synth_report(exp, data)), args.out, "synth.txt")
        return EXIT_OK

    if args.command == "certify":
        try:
            cert = _certificate(exp, data)
        except CertificationError as exc:
            print(f"certification failure [issp]: {exc}", file=_sys.stderr)
            return EXIT_CERT
        _emit(flat_report(cert.as_dict()), args.out, "certificate.txt")
        return EXIT_OK if cert.certified else EXIT_CERT

    if args.command == "simulate":
        out = args.out or "."
        ens = simulate(exp, data, exp.sim.mode, lyapunov_matrix(exp))
        manifest = write_csvs(out, ens, exp, exp.sim.mode, doc_hash)
        print(json.dumps(manifest, sort_keys=True))
        return EXIT_OK

    # reproduce-paper
    out = args.out or "reference_output"
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(cfgmod.serialize(exp.doc))
    _emit(flat_report(synth_report(exp, data)), out, "synth.txt")
    try:
        cert = _certificate(exp, data)
    except CertificationError as exc:
        print(f"certification failure [issp]: {exc}", file=_sys.stderr)
        return EXIT_CERT
    _emit(flat_report(cert.as_dict()), out, "certificate.txt")
    P = lyapunov_matrix(exp)
    write_csvs(os.path.join(out, "autonomous"), simulate(exp, data, "autonomous", P), exp, "autonomous", doc_hash)
    mpc_ens = simulate(exp, data, "mpc_combined", P)
    write_csvs(os.path.join(out, "mpc"), mpc_ens, exp, "mpc_combined", doc_hash)
    _, issp_res = empirical_issp(exp)
    checks = reference_checks(exp, data, cert, mpc_ens, issp_res)
    _emit("".join(c.line() + "\n" for c in checks), out, "acceptance.txt")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_ACCEPT


if __name__ == "__main__":
    raise SystemExit(main())

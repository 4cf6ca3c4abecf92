"""Command-line front end: ``cos2phi <subcommand> [options]``.

Every output file starts with ``#`` lines carrying the tool version and a
SHA-256 hash of the resolved configuration, so reruns with the same
configuration and seed reproduce the files byte for byte.

Exit codes: 2 configuration error, 3 numerical failure, 4 bad input data.
The thread cap for sweeps is ``--threads`` or the ``COS2PHI_THREADS``
environment variable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import re
import shutil
import sys
import tempfile
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import calibration as cal
from . import decoherence as dec
from . import dephasing as dph
from . import jumps as jmp
from . import paramfit as pf
from .hamiltonians import Model, Truncation, default_phi_zpf
from .spectrum import (
    THREADS_ENV,
    ConvergenceError,
    SolverError,
    fmt,
    sensitivity,
    sweep,
    write_sweep_csv,
)
from .units import BiasPoint, CircuitParams, NoiseEnvironment, ParameterError, QPParity, load_parameters

log = logging.getLogger("cos2phi")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_DATA = 2, 3, 4
DEFAULT_PARAMS = "tableI.toml"


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument helpers

_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"


def parse_angle(text: str) -> float:
    """'pi', '0.5pi', '0.5*pi', '3.1' -> radians."""
    t = text.strip().replace(" ", "").lower().replace("π", "pi")
    m = re.fullmatch(rf"([-+]?)({_NUM})?\*?pi", t)
    if m:
        mag = float(m.group(2)) if m.group(2) else 1.0
        return (-mag if m.group(1) == "-" else mag) * math.pi
    if re.fullmatch(_NUM, t):
        return float(t)
    raise ConfigError(f"cannot parse angle {text!r}")


def parse_range(text: str, angle: bool) -> tuple[float, float]:
    """'lo:hi' or 'centre±half' (also '+-'); angles accept 'pi' multiples."""
    conv = parse_angle if angle else _float
    t = text.strip().replace("+-", "±").replace("+/-", "±")
    if "±" in t:
        c, h = t.split("±", 1)
        c, h = conv(c), conv(h)
        if h < 0:
            raise ConfigError("half-width must be non-negative")
        return c - h, c + h
    if ":" in t:
        lo, hi = t.split(":", 1)
        return conv(lo), conv(hi)
    raise ConfigError(f"range {text!r} must look like 'lo:hi' or 'centre±half'")


def _float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"not a number: {text!r}") from None


def _existing(path: str | None) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"file not found: {path}")
    return p


def _params_path(arg: str | None) -> Path:
    if arg is None:
        return Path(str(resources.files("cos2phi").joinpath("data", DEFAULT_PARAMS)))
    return _existing(arg)


def _file_digest(path: Path | None) -> str | None:
    if path is None:
        return None
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# run context


class Run:
    """Resolved configuration plus an output directory written in one move."""

    def __init__(self, args: argparse.Namespace, inputs: dict[str, Path | None]):
        self.args = args
        self.params_path = _params_path(args.params)
        try:
            self.params = load_parameters(self.params_path)
        except (OSError, ParameterError) as exc:
            raise ConfigError(str(exc)) from exc
        self.inputs = inputs
        self._apply_epsilon(getattr(args, "epsilon", None))
        config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose", "out", "threads")}
        config["params_sha256"] = _file_digest(self.params_path)
        for k, p in inputs.items():
            config[f"{k}_sha256"] = _file_digest(p)
        self.config_json = json.dumps(config, sort_keys=True, default=str)
        self.config_hash = hashlib.sha256(self.config_json.encode()).hexdigest()
        self.out = Path(args.out)
        self._tmp = Path(tempfile.mkdtemp(prefix=".cos2phi-", dir=self.out.parent if self.out.parent.exists() else None))
        self.files: list[str] = []

    @property
    def header(self) -> list[str]:
        return [
            f"cos2phi {__version__} {self.args.command}",
            f"config_sha256 {self.config_hash}",
            f"config {self.config_json}",
        ]

    def open(self, name: str):
        self.files.append(name)
        return open(self._tmp / name, "w", newline="\n", encoding="utf-8")

    def write_text(self, name: str, body: str) -> None:
        with self.open(name) as fh:
            for h in self.header:
                fh.write(f"# {h}\n")
            fh.write(body)

    def commit(self) -> None:
        if not self.out.exists():
            self.out.parent.mkdir(parents=True, exist_ok=True)
            os.replace(self._tmp, self.out)
            return
        if not self.out.is_dir():
            raise ConfigError(f"--out {self.out} exists and is not a directory")
        for name in self.files:
            os.replace(self._tmp / name, self.out / name)
        shutil.rmtree(self._tmp, ignore_errors=True)

    def abort(self) -> None:
        shutil.rmtree(self._tmp, ignore_errors=True)

    # parameter access --------------------------------------------------

    def _apply_epsilon(self, eps: float | None) -> None:
        """Override the junction asymmetry; the single-pair term E_J1 scales with it."""
        if eps is None:
            return
        c, e = self.params.circuit, self.params.effective
        new_c = new_e = None
        if c is not None:
            eps0 = c.epsilon
            new_c = CircuitParams.with_asymmetry(c.E_J, c.E_CJ, c.E_L, c.E_CS, eps)
        else:
            eps0 = None
        if e is not None:
            if eps0 is None or eps0 == 0:
                if eps != 0:
                    raise ConfigError("--epsilon needs a non-zero asymmetry in [circuit] to rescale E_J1")
                new_e = replace(e, E_J1=0.0)
            else:
                new_e = replace(e, E_J1=e.E_J1 * abs(eps / eps0))
        self.params = replace(self.params, circuit=new_c or c, effective=new_e or e)

    def need(self, section: str):
        obj = getattr(self.params, section)
        if obj is None:
            raise ConfigError(f"parameter file lacks a [{section}] table")
        return obj

    @property
    def noise(self) -> NoiseEnvironment:
        return self.params.noise or NoiseEnvironment()

    @property
    def bias(self) -> BiasPoint:
        b = self.params.bias or BiasPoint()
        a = self.args
        phi = parse_angle(a.phi_ext) if getattr(a, "phi_ext", None) is not None else b.phi_ext
        ng = a.N_g if getattr(a, "N_g", None) is not None else b.N_g
        qp = a.qp_parity if getattr(a, "qp_parity", None) is not None else b.qp_parity
        return BiasPoint(phi, ng, QPParity(qp))

    def model_params(self, model: Model):
        return self.need("circuit") if model is Model.three_mode else self.need("effective")

    def truncation(self, model: Model) -> Truncation:
        a = self.args
        if model is Model.three_mode:
            return Truncation(a.n_max or 10, a.n_fock or 14)
        return Truncation(a.n_max or 16)


def _threads(args) -> int:
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env is None:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return n


def _grid(args, default_flux: tuple[float, float] | None) -> list[BiasPoint]:
    n = args.n
    if n < 1:
        raise ConfigError("--n must be >= 1")
    qp = QPParity(args.qp_parity or "even")
    if args.flux_sweep and args.charge_sweep:
        raise ConfigError("give either --flux-sweep or --charge-sweep")
    if args.charge_sweep:
        lo, hi = parse_range(args.charge_sweep, angle=False)
        phi = parse_angle(args.phi_ext) if args.phi_ext else math.pi
        return [BiasPoint(phi, float(g), qp) for g in np.linspace(lo, hi, n)]
    if args.flux_sweep:
        lo, hi = parse_range(args.flux_sweep, angle=True)
    elif default_flux is not None:
        lo, hi = default_flux
        if n == 1:
            lo = hi = 0.5 * (lo + hi)
    else:
        lo = hi = parse_angle(args.phi_ext) if args.phi_ext else math.pi
        n = 1
    ng = args.N_g if args.N_g is not None else 0.0
    return [BiasPoint(float(phi), ng, qp) for phi in np.linspace(lo, hi, n)]


# ---------------------------------------------------------------------------
# subcommands


def cmd_spectrum(run: Run) -> None:
    a = run.args
    model = Model(a.model)
    biases = _grid(a, None)
    pts = sweep(model, run.model_params(model), biases, k=a.levels, truncation=run.truncation(model),
                workers=_threads(a))
    failed = [p for p in pts if p.error is not None]
    if len(failed) == len(pts):
        raise SolverError(f"all {len(pts)} sweep points failed: {failed[0].error}")
    with run.open("spectrum.csv") as fh:
        write_sweep_csv(pts, fh, run.header + [f"model {model.value}"]
                        + [f"failed point {p.index}: {p.error}" for p in failed])


def cmd_rates(run: Run) -> None:
    a = run.args
    biases = _grid(a, (math.pi * (1 - 0.004), math.pi * (1 + 0.004)))
    grid = [b.phi_ext for b in biases]
    ng = biases[0].N_g
    for model in (Model.one_mode, Model.three_mode):
        budgets = dec.budget_sweep(model, run.model_params(model), run.noise, grid, N_g=ng,
                                   truncation=run.truncation(model), k=8, workers=_threads(a))
        tag = model.value.replace("-", "_")
        with run.open(f"rates_{tag}.csv") as fh:
            dec.write_budget_csv(budgets, fh, run.header + [f"model {model.value}"])


def cmd_dephase(run: Run) -> None:
    a = run.args
    kernel = dph.EchoKernel(tau_pi=a.tau_pi)
    if a.data:
        tau, f = _read_envelope(run.inputs["data"])
        fit = dph.fit_envelope(tau, f, Gamma_nu=a.gamma_nu)
        run.write_text("dephase_report.txt", fit.report())
        return
    model = Model(a.model)
    bias = run.bias
    params = run.model_params(model)
    tr = run.truncation(model)
    tau = np.geomspace(max(a.tau_min, kernel.tau_pi * 1.0001), a.tau_max, a.n)
    f = np.ones_like(tau)
    sens = {}
    if a.kind in ("flux", "both"):
        sens["flux"] = sensitivity(model, params, bias, "phi_ext", truncation=tr)
        f = f * dph.envelope_flux(tau, sens["flux"], run.noise, kernel, exact=False)
    if a.kind in ("charge", "both"):
        sens["charge"] = sensitivity(model, params, bias, "N_g", truncation=tr)
        f = f * dph.envelope_charge(tau, sens["charge"], run.noise, kernel, exact=False)
    # eigensolver noise in a symmetry-protected slope leaves |1 - f| ~ 1e-13
    f = np.where(np.abs(f - 1.0) < 1e-12, 1.0, f)
    with run.open("envelope.csv") as fh:
        dph.write_envelope_csv(tau, f, fh, run.header + [f"sensitivity_rad_per_s {k}={fmt(v)}" for k, v in sens.items()])
    if np.all(f == 1.0):
        body = "Gamma_nu_per_s=0\nGamma_phi_per_s=0\nT2_echo_s=inf\nresidual=0\n"
    else:
        body = dph.fit_envelope(tau, f, Gamma_nu=a.gamma_nu).report()
    run.write_text("dephase_report.txt", body)


def _read_envelope(path: Path):
    rows = [ln for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not rows or rows[0].replace(" ", "") != ",".join(dph.ENVELOPE_COLUMNS):
        raise pf.DataError(f"{path}: expected header {','.join(dph.ENVELOPE_COLUMNS)}")
    try:
        vals = np.array([[float(x) for x in r.split(",")] for r in rows[1:]])
    except ValueError as exc:
        raise pf.DataError(f"{path}: {exc}") from exc
    if vals.ndim != 2 or vals.shape[1] != 2:
        raise pf.DataError(f"{path}: expected two columns")
    return vals[:, 0], vals[:, 1]


def cmd_jumps(run: Run) -> None:
    a = run.args
    if a.record:
        with open(run.inputs["record"]) as fh:
            try:
                rec = jmp.read_record_csv(fh)
            except ValueError as exc:
                raise pf.DataError(str(exc)) from exc
    else:
        Q = jmp.generator(a.gamma_d, a.gamma_up, a.gamma_down)
        F = jmp.fidelity_matrix(a.e_d, a.e_p)
        rec = jmp.simulate_telegraph(Q, F, a.shots, a.dt, a.seed)
        with run.open("record.csv") as fh:
            jmp.write_record_csv(rec, fh, run.header)
    if a.bootstrap > 0:
        est = jmp.estimate_with_ci(rec, n_resamples=a.bootstrap, seed=a.seed)
    else:
        est = jmp.estimate_rates(rec)
    run.write_text("jumps_report.txt", est.report())


def cmd_calibrate(run: Run) -> None:
    a = run.args
    if not (a.dispersive or a.stark or a.charge):
        raise ConfigError("calibrate needs at least one of --dispersive, --stark, --charge")
    lines = []
    chi = a.chi
    if a.dispersive:
        with open(run.inputs["dispersive"]) as fh:
            x, y, st = cal.read_dispersive_csv(fh)
        rp = cal.fit_dispersive(x, y, st)
        chi = rp.chi
        lines += [f"omega0_GHz={fmt(rp.omega0)}", f"chi_plus_GHz={fmt(rp.chi_plus)}",
                  f"chi_minus_GHz={fmt(rp.chi_minus)}", f"chi_GHz={fmt(rp.chi)}",
                  f"K_plus_GHz={fmt(rp.K_plus)}", f"K_minus_GHz={fmt(rp.K_minus)}"]
    if a.stark:
        if chi is None:
            raise ConfigError("--stark needs --chi or --dispersive")
        with open(run.inputs["stark"]) as fh:
            pw, d = cal.read_stark_csv(fh)
        sc = cal.photon_calibration(pw, d, chi)
        lines += [f"stark_slope_GHz_per_power={fmt(sc.slope)}", f"nbar_per_power={fmt(sc.nbar_per_power)}"]
    if a.charge:
        with open(run.inputs["charge"]) as fh:
            ng, sig = cal.read_charge_csv(fh)
        co = cal.fit_charge_offset(ng, sig)
        lines += [f"charge_offset={fmt(co.delta)}", f"charge_amplitude={fmt(co.amplitude)}",
                  f"charge_background={fmt(co.offset)}", f"charge_residual={fmt(co.residual)}"]
    run.write_text("calibration.txt", "\n".join(lines) + "\n")


def cmd_fit(run: Run) -> None:
    a = run.args
    if a.data:
        with open(run.inputs["data"]) as fh:
            data = pf.read_dataset_csv(fh)
    else:
        data = pf.load_fixture()
    p0 = run.need("circuit")
    if a.perturb:
        p0 = pf.perturb(p0, a.perturb)
    tr = None
    if a.n_max or a.n_fock:
        tr = Truncation(a.n_max or 10, a.n_fock or 14, default_phi_zpf(p0))
    res = pf.fit(data, p0, truncation=tr, max_iter=a.max_iter, gradient=a.gradient)
    run.write_text("fit_report.txt", res.report(data))
    p = res.params
    run.write_text("fit_params.toml", "[circuit]\n" + "".join(
        f"{k} = {fmt(float(v))}\n" for k, v in
        (("E_J", p.E_J), ("E_CJ", p.E_CJ), ("E_L", p.E_L), ("E_CS", p.E_CS), ("epsilon", p.epsilon))))
    if not res.converged:
        raise ArithmeticError(f"fit did not converge: {res.message}; best iterate written")


COMMANDS = {
    "spectrum": cmd_spectrum,
    "rates": cmd_rates,
    "dephase": cmd_dephase,
    "jumps": cmd_jumps,
    "calibrate": cmd_calibrate,
    "fit": cmd_fit,
}

INPUT_FILES = {
    "dephase": ("data",),
    "jumps": ("record",),
    "calibrate": ("dispersive", "stark", "charge"),
    "fit": ("data",),
}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--params", help="TOML parameter file (default: bundled device parameters)")
    g.add_argument("--out", default=".", help="output directory (default: current directory)")
    g.add_argument("--seed", type=int, default=0, help="random seed")
    g.add_argument("--n-max", type=int, help="charge cutoff")
    g.add_argument("--n-fock", type=int, help="oscillator Fock cutoff (three-mode model)")
    g.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or 1)")
    g.add_argument("-v", "--verbose", action="store_true")

    bias = argparse.ArgumentParser(add_help=False)
    b = bias.add_argument_group("bias")
    b.add_argument("--phi-ext", help="external flux phase, e.g. 'pi' or '0.99pi'")
    b.add_argument("--N-g", dest="N_g", type=float, help="offset charge in units of 2e")
    b.add_argument("--qp-parity", choices=[q.value for q in QPParity])

    grid = argparse.ArgumentParser(add_help=False)
    gg = grid.add_argument_group("grid")
    gg.add_argument("--flux-sweep", help="'lo:hi' or 'centre±half' in rad, 'pi' allowed (e.g. 'pi±0.05')")
    gg.add_argument("--charge-sweep", help="'lo:hi' in units of 2e")
    gg.add_argument("--n", type=int, default=21, help="grid points")

    over = argparse.ArgumentParser(add_help=False)
    over.add_argument_group("overrides").add_argument(
        "--epsilon", type=float, help="junction asymmetry; E_J1 of the one-mode model is rescaled with it")

    models = [Model.one_mode.value, Model.three_mode.value]
    parser = argparse.ArgumentParser(prog="cos2phi", description="Spectra, decoherence budgets and fits for the cos(2 phi) qubit.")
    parser.add_argument("--version", action="version", version=f"cos2phi {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spectrum", parents=[common, bias, grid, over], help="transition table over a bias grid")
    p.add_argument("--model", choices=models + [Model.cos2phi.value], default=Model.one_mode.value)
    p.add_argument("--levels", type=int, default=6, help="eigenpairs per bias point")

    p = sub.add_parser("rates", parents=[common, bias, grid, over], help="T1 budgets for both models")

    p = sub.add_parser("dephase", parents=[common, bias, over], help="echo envelope and its Gaussian fit")
    p.add_argument("--model", choices=models, default=Model.one_mode.value)
    p.add_argument("--kind", choices=["flux", "charge", "both"], default="both")
    p.add_argument("--tau-pi", type=float, default=dph.TAU_PI, help="pi-pulse length [s]")
    p.add_argument("--tau-min", type=float, default=1e-6)
    p.add_argument("--tau-max", type=float, default=1e-3)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--gamma-nu", type=float, default=None, help="fix the exponential rate [1/s]")
    p.add_argument("--data", help="measured envelope CSV (tau_s,f) to fit instead of simulating")

    p = sub.add_parser("jumps", parents=[common], help="simulate and/or estimate the jump generator")
    p.add_argument("--record", help="telegraph record CSV (t_s,outcome); skips simulation")
    p.add_argument("--gamma-d", type=float, default=1 / 140e-6)
    p.add_argument("--gamma-up", type=float, default=3000.0)
    p.add_argument("--gamma-down", type=float, default=1 / 120e-6)
    p.add_argument("--e-d", type=float, default=0.05)
    p.add_argument("--e-p", type=float, default=0.03)
    p.add_argument("--shots", type=int, default=100_000)
    p.add_argument("--dt", type=float, default=10e-6)
    p.add_argument("--bootstrap", type=int, default=0, help="bootstrap resamples for CIs (0: none)")

    p = sub.add_parser("calibrate", parents=[common], help="dispersive, Stark and offset-charge fits")
    p.add_argument("--dispersive", help="CSV nbar_proxy,freq_GHz,state")
    p.add_argument("--stark", help="CSV power_arb,delta_wq_GHz")
    p.add_argument("--charge", help="CSV N_g,signal")
    p.add_argument("--chi", type=float, help="dispersive shift [GHz] when --dispersive is absent")

    p = sub.add_parser("fit", parents=[common], help="fit circuit parameters to spectroscopy")
    p.add_argument("--data", help="dataset CSV (default: bundled synthetic fixture)")
    p.add_argument("--perturb", type=float, default=0.0, help="start from energies scaled by 1 +/- this")
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--gradient", choices=["analytic", "fd"], default="analytic")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    run = None
    try:
        inputs = {k: _existing(getattr(args, k)) for k in INPUT_FILES.get(args.command, ())}
        run = Run(args, inputs)
        COMMANDS[args.command](run)
        run.commit()
        return 0
    except (ConfigError, ParameterError) as exc:
        code, msg = EXIT_CONFIG, f"configuration error: {exc}"
    except (pf.DataError, cal.CalibrationError, jmp.IdentifiabilityError, dph.FitError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except (SolverError, ConvergenceError, dph.QuadratureError, ArithmeticError, np.linalg.LinAlgError) as exc:
        code, msg = EXIT_NUMERIC, f"numerical failure: {exc}"
        if run is not None and args.command == "fit":
            run.commit()
            run = None
    except ValueError as exc:
        code, msg = EXIT_CONFIG, f"invalid option value: {exc}"
    if run is not None:
        run.abort()
    print(f"cos2phi: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

"""Command-line driver: ``artifact {spectra,raytransform,gocheck,bridge,reconstruct,sweep,all}``.

Runs are described by a YAML file with sections geometry, potentials,
spectral, fan, go, dtn, reconstruct and output. Unknown keys are rejected
and the resolved configuration is echoed into ``manifest.json`` together
with the SHA-256 of every output file.

Exit codes: 0 success, 2 configuration error, 3 numerical error,
4 acceptance failure under ``--strict``.
"""

import argparse
import copy
import hashlib
import json
import logging
import os
import sys

import numpy as np
import yaml

log = logging.getLogger("artifact")

DEFAULTS = {
    "geometry": {"kind": "euclidean", "lambda": None, "radius_M": 1.0, "radius_M1": 1.2, "mesh_h": 0.05},
    "potentials": {"A1": None, "q1": None, "A2": None, "q2": None},
    "spectral": {"K": 64, "mass": "lumped", "shift": 0.0},
    "fan": {"n_y": 64, "n_theta": 64, "ds": 0.01},
    "go": {"y": [-1.2, 0.0], "T": 4.8, "h_list": [0.2, 0.1, 0.05, 0.025], "remainder_h": [0.2, 0.1, 0.05],
           "control_amplitude": 3.0},
    "dtn": {"T": 3.2, "dt": 0.02, "K": 64, "mode": 1, "n": 2},
    "reconstruct": {"mesh_h": 0.035, "T": 4.8, "h": None, "reg": 1e-6, "calibrate": True,
                    "amplitudes": [0.0016, 0.0056, 0.02, 0.08], "seeds": [0, 1, 2], "direction": "A"},
    "output": {"dir": "out"},
}

THRESHOLDS = {"lambda1_rel": 0.01, "go_slope": 0.2, "bridge_rel": 0.05, "A_rel": 0.20, "q_rel": 0.25}


class ConfigError(ValueError):
    pass


# -- configuration ---------------------------------------------------------------------------------

def _merge(base, user, path=""):
    out = copy.deepcopy(base)
    for k, v in (user or {}).items():
        if k not in base:
            raise ConfigError(f"unknown key {path + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"section {path + k!r} must be a mapping")
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def load_config(path=None, seed=None):
    user = {}
    if path is not None:
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(str(exc)) from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a mapping")
    seed_cfg = user.pop("seed", 0)
    cfg = _merge(DEFAULTS, user)
    cfg["seed"] = int(seed if seed is not None else seed_cfg)
    _validate(cfg)
    return cfg


def _validate(cfg):
    g = cfg["geometry"]
    if g["kind"] not in ("euclidean", "conformal"):
        raise ConfigError("geometry.kind must be 'euclidean' or 'conformal'")
    if g["kind"] == "conformal" and not g["lambda"]:
        raise ConfigError("conformal geometry needs geometry.lambda")
    if not 0 < g["radius_M"] < g["radius_M1"]:
        raise ConfigError("need 0 < radius_M < radius_M1")
    if g["mesh_h"] <= 0 or cfg["reconstruct"]["mesh_h"] <= 0:
        raise ConfigError("mesh_h must be positive")
    if cfg["spectral"]["mass"] not in ("lumped", "averaged"):
        raise ConfigError("spectral.mass must be 'lumped' or 'averaged'")
    for k in ("K",):
        if int(cfg["spectral"][k]) < 1:
            raise ConfigError("spectral.K must be positive")
    if cfg["reconstruct"]["direction"] not in ("A", "q"):
        raise ConfigError("reconstruct.direction must be 'A' or 'q'")


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


# -- builders ------------------------------------------------------------------------------------

def build_metric(cfg):
    from .geometry import MetricField
    g = cfg["geometry"]
    return MetricField(g["kind"], g["lambda"], radius_M=g["radius_M"], radius_M1=g["radius_M1"])


def _potential(spec, kind):
    """None, an expression (string or pair of strings) or a phantom mapping."""
    from .fields import _as_callable
    from .reconstruct import scalar_phantom, solenoidal_phantom
    if spec is None:
        return None
    if isinstance(spec, dict):
        name = spec.get("phantom")
        amp = float(spec.get("amplitude", 0.05))
        seed = spec.get("seed")
        if name == "solenoidal" and kind == "A":
            return solenoidal_phantom(amp, seed)
        if name == "scalar" and kind == "q":
            return scalar_phantom(amp, seed)
        raise ConfigError(f"unknown phantom {spec!r} for {kind}")
    from .geometry import as_expr
    exprs = spec if isinstance(spec, (list, tuple)) else [spec]
    for e in exprs:
        try:
            free = {s.name for s in as_expr(str(e)).free_symbols}
        except Exception as exc:
            raise ConfigError(f"cannot parse potential {e!r}: {exc}") from exc
        if free - {"x1", "x2"}:
            raise ConfigError(f"potential {e!r} may only use x1, x2")
    if kind == "A":
        if not (isinstance(spec, (list, tuple)) and len(spec) == 2):
            raise ConfigError("one-form potentials need two component expressions")
        f1, f2 = (_as_callable(str(e)) for e in spec)
        return lambda x: np.stack([f1(x), f2(x)], axis=-1)
    return _as_callable(str(spec))


def potentials(cfg):
    p = cfg["potentials"]
    return {k: _potential(p[k], k[0]) for k in ("A1", "q1", "A2", "q2")}


def _operator(cfg, mesh, metric, which=1, mass=None):
    from .fields import OneFormField, ScalarField
    from .spectral import assemble
    pots = potentials(cfg)
    A, q = pots[f"A{which}"], pots[f"q{which}"]
    Af = OneFormField.from_function(mesh, A) if A else None
    qf = ScalarField.from_function(mesh, q) if q else None
    return assemble(mesh, metric, Af, qf, shift=cfg["spectral"]["shift"], mass=mass or cfg["spectral"]["mass"])


# -- output ---------------------------------------------------------------------------------------

class Run:
    def __init__(self, cfg, out):
        self.cfg = cfg
        self.out = out
        self.hash = config_hash(cfg)
        self.files = []
        self.checks = {}
        os.makedirs(out, exist_ok=True)

    def path(self, name):
        return os.path.join(self.out, name)

    def write_json(self, name, doc):
        with open(self.path(name), "w") as fh:
            json.dump(_plain(doc), fh, indent=1, sort_keys=True)
        self.add(name)

    def add(self, name):
        if name not in self.files:
            self.files.append(name)

    def manifest(self):
        entries = []
        for name in self.files:
            with open(self.path(name), "rb") as fh:
                entries.append({"file": name, "sha256": hashlib.sha256(fh.read()).hexdigest(),
                                "config_hash": self.hash})
        doc = {"config": self.cfg, "config_hash": self.hash, "outputs": entries, "checks": self.checks}
        with open(self.path("manifest.json"), "w") as fh:
            json.dump(_plain(doc), fh, indent=1, sort_keys=True)


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, complex):
        return [x.real, x.imag]
    return x


# -- commands ------------------------------------------------------------------------------------

def cmd_spectra(run):
    from scipy.special import jn_zeros
    from .mesh import DiskMesh
    from .spectral import dirichlet_eigs, weyl_constant
    cfg = run.cfg
    metric = build_metric(cfg)
    mesh = DiskMesh(cfg["geometry"]["radius_M"], cfg["geometry"]["mesh_h"])
    op = _operator(cfg, mesh, metric)
    S = dirichlet_eigs(op, int(cfg["spectral"]["K"]))
    S.to_json(run.path("spectra.json"))
    run.add("spectra.json")
    rep = {"K": S.K, "lambda": S.lambdas[:10], "weyl_constant": weyl_constant(S.lambdas),
           "max_residual": float(np.max(S.residuals)), "mesh_id": mesh.mesh_id}
    if cfg["geometry"]["kind"] == "euclidean" and not any(potentials(cfg)[k] for k in ("A1", "q1")):
        ref = jn_zeros(0, 1)[0] ** 2 / cfg["geometry"]["radius_M"] ** 2
        rep["lambda1_rel_err"] = abs(S.lambdas[0] - ref) / ref
        run.checks["spectra.lambda1"] = rep["lambda1_rel_err"] < THRESHOLDS["lambda1_rel"]
    run.write_json("spectra_report.json", rep)
    return rep


def cmd_raytransform(run):
    from .fields import OneFormField, ScalarField, helmholtz, l2_norm
    from .mesh import DiskMesh
    from .raytransform import I0, I1, FanSampling, adjoint0, adjoint1, invert_normal0, invert_normal1
    cfg = run.cfg
    metric = build_metric(cfg)
    mesh = DiskMesh(cfg["geometry"]["radius_M"], cfg["geometry"]["mesh_h"])
    fan = FanSampling(metric, cfg["fan"]["n_y"], cfg["fan"]["n_theta"], cfg["fan"]["ds"])
    pots = potentials(cfg)
    zero1 = lambda x: np.zeros(np.shape(x))
    zero0 = lambda x: np.zeros(np.shape(x)[:-1])
    A1, A2 = pots["A1"] or zero1, pots["A2"] or zero1
    q1, q2 = pots["q1"] or zero0, pots["q2"] or zero0
    dA = lambda x: A1(x) - A2(x)
    dq = lambda x: q1(x) - q2(x)
    r1, r0 = I1(dA, fan), I0(dq, fan)
    r1.to_csv(run.path("I1.csv"))
    r0.to_csv(run.path("I0.csv"))
    run.add("I1.csv")
    run.add("I0.csv")
    rep = {"max_abs_I1": float(np.max(np.abs(r1.values))), "max_abs_I0": float(np.max(np.abs(r0.values)))}
    Af = OneFormField.from_function(mesh, dA)
    As = helmholtz(Af, metric).solenoidal
    if l2_norm(As, metric) > 0:
        est, info = invert_normal1(adjoint1(I1(As, fan), fan, mesh), fan)
        rep["A_roundtrip_rel"] = float(l2_norm(OneFormField(mesh, est.values - As.values), metric)
                                       / l2_norm(As, metric))
    qf = ScalarField.from_function(mesh, dq)
    if l2_norm(qf, metric) > 0:
        est, info = invert_normal0(adjoint0(I0(qf, fan), fan, mesh), fan)
        rep["q_roundtrip_rel"] = float(l2_norm(ScalarField(mesh, est.values - qf.values), metric)
                                       / l2_norm(qf, metric))
    run.write_json("raytransform_report.json", rep)
    return rep


def cmd_gocheck(run):
    from .go_solutions import assemble_ansatz, remainder_solve, residual_scaling_check
    from .mesh import DiskMesh
    from .spectral import assemble
    cfg = run.cfg
    metric = build_metric(cfg)
    g = cfg["go"]
    y = np.asarray(g["y"], dtype=float)
    pots = potentials(cfg)
    rep = residual_scaling_check(metric, y, g["T"], g["h_list"], A=pots["A1"], q=pots["q1"], control=False)
    amp = g["control_amplitude"]

    def A_ctl(x):
        b = np.clip(1 - np.sum(x ** 2, axis=-1), 0.0, None) ** 3
        return amp * np.stack([-x[..., 1], x[..., 0]], axis=-1) * b[..., None]

    ctl = residual_scaling_check(metric, y, g["T"], g["h_list"], A=A_ctl)
    rep.update({k: v for k, v in ctl.items() if k.startswith("control")})
    mesh = DiskMesh(cfg["geometry"]["radius_M"], cfg["geometry"]["mesh_h"])
    op = assemble(mesh, metric, mass="averaged")
    scaled = []
    for h in g["remainder_h"]:
        _, r = remainder_solve(op, assemble_ansatz(metric, y, h, g["T"]))
        scaled.append(r["scaled_remainder"])
    rep["remainder_h"] = g["remainder_h"]
    rep["scaled_remainder"] = scaled
    rep["remainder_ratio"] = max(scaled) / min(scaled)
    run.checks["go.slope"] = abs(rep["slope"]) <= THRESHOLDS["go_slope"]
    run.checks["go.control"] = rep["control_slope"] <= -0.7
    run.checks["go.remainder"] = rep["remainder_ratio"] < 3
    run.write_json("gocheck_report.json", rep)
    return rep


def cmd_bridge(run):
    from .dtn import spectral_to_hyperbolic_bridge, time_window
    from .mesh import DiskMesh
    from .spectral import dirichlet_eigs
    cfg = run.cfg
    d = cfg["dtn"]
    metric = build_metric(cfg)
    mesh = DiskMesh(cfg["geometry"]["radius_M"], cfg["geometry"]["mesh_h"])
    op = _operator(cfg, mesh, metric, mass="averaged")
    S = dirichlet_eigs(op, int(d["K"]))
    hb = np.cos(d["mode"] * mesh.boundary_angle)
    w = time_window(d["T"], 2 * d["n"] + 4)
    rep = spectral_to_hyperbolic_bridge(S, op, w, hb, d["T"], d["dt"], n=d["n"])
    rep.to_json(run.path("bridge_report.json"))
    run.add("bridge_report.json")
    run.checks["bridge.error"] = rep.relative_error < THRESHOLDS["bridge_rel"]
    run.checks["bridge.ablation"] = rep.relative_error_without_remainder > rep.relative_error
    return {"relative_error": rep.relative_error,
            "relative_error_without_remainder": rep.relative_error_without_remainder}


def _spec(cfg, pots=None, seed=None):
    from .reconstruct import ExperimentSpec
    r = cfg["reconstruct"]
    pots = pots or potentials(cfg)
    return ExperimentSpec(build_metric(cfg), pots["A1"], pots["q1"], pots["A2"], pots["q2"], mesh_h=r["mesh_h"],
                          K=int(cfg["spectral"]["K"]), n_y=cfg["fan"]["n_y"], n_theta=cfg["fan"]["n_theta"],
                          T=r["T"], seed=cfg["seed"] if seed is None else seed, reg=r["reg"])


def cmd_reconstruct(run):
    from .fields import write_field_csv
    from .reconstruct import reconstruct_pair, write_records
    cfg = run.cfg
    spec = _spec(cfg)
    A_hat, q_hat, rec = reconstruct_pair(spec, h=cfg["reconstruct"]["h"], calibrate=cfg["reconstruct"]["calibrate"])
    write_field_csv(run.path("A_hat.csv"), A_hat)
    write_field_csv(run.path("q_hat.csv"), q_hat)
    path = run.path("stability_records.csv")
    if os.path.exists(path):
        os.remove(path)
    write_records(path, [rec], run_id=run.hash)
    for f in ("A_hat.csv", "q_hat.csv", "stability_records.csv"):
        run.add(f)
    rep = {"rec_A_rel": rec.rec_A_err / rec.true_A_diff if rec.true_A_diff > 0 else None,
           "rec_q_rel": rec.rec_q_err / rec.true_q_diff if rec.true_q_diff > 0 else None,
           "h": rec.h, "dtn_distance": rec.dtn_distance, "extraction": rec.extraction}
    if rep["rec_A_rel"] is not None:
        run.checks["reconstruct.A"] = rep["rec_A_rel"] < THRESHOLDS["A_rel"]
    if rep["rec_q_rel"] is not None:
        run.checks["reconstruct.q"] = rep["rec_q_rel"] < THRESHOLDS["q_rel"]
    run.checks["reconstruct.guard"] = bool(rec.extraction["guard_passed"])
    run.write_json("reconstruct_report.json", rep)
    return rep


def cmd_sweep(run):
    from .reconstruct import holder_sweep, scalar_phantom, solenoidal_phantom, write_records
    cfg = run.cfg
    r = cfg["reconstruct"]
    amps = sorted(float(a) for a in r["amplitudes"])
    if len(amps) < 4 or amps[-1] / amps[0] < 10 ** 1.5:
        raise ValueError("degenerate sweep: need >= 4 amplitudes spanning >= 1.5 decades")
    pots = potentials(cfg)
    kind = r["direction"]
    direction = (lambda a, s: solenoidal_phantom(a, s)) if kind == "A" else (lambda a, s: scalar_phantom(a, s))
    base = _spec(cfg)
    out = holder_sweep((pots["A1"], pots["q1"]), direction, amps, seeds=tuple(r["seeds"]), kind=kind,
                       metric=base.metric, mesh_h=base.mesh_h, K=base.K, n_y=base.n_y, n_theta=base.n_theta,
                       T=base.T, reg=base.reg)
    fits = out["fits"]
    flat = {f"{k}_slope": v["slope"] for k, v in fits.items()}
    path = run.path("sweep_records.csv")
    if os.path.exists(path):
        os.remove(path)
    write_records(path, out["records"], run_id=run.hash, fits=flat)
    run.add("sweep_records.csv")
    lo, hi = fits["error_vs_delta"]["ci"]
    run.checks["sweep.positive_exponent"] = lo > 0
    run.checks["sweep.rank_monotone"] = out["rank_correlation"] > 0.8
    rep = {"fits": fits, "rank_correlation": out["rank_correlation"],
           "delta": [rec.delta for rec in out["records"]], "error": [rec.rec_A_err + rec.rec_q_err
                                                                     for rec in out["records"]]}
    run.write_json("sweep_report.json", rep)
    return rep


COMMANDS = {"spectra": cmd_spectra, "raytransform": cmd_raytransform, "gocheck": cmd_gocheck,
            "bridge": cmd_bridge, "reconstruct": cmd_reconstruct, "sweep": cmd_sweep}


def main(argv=None):
    ap = argparse.ArgumentParser(prog="artifact", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS) + ["all"])
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--workers", type=int, default=1, help="accepted for compatibility; runs are sequential")
    ap.add_argument("--strict", action="store_true", help="exit 4 when an acceptance check fails")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
    except ConfigError as exc:
        log.error("config: %s", exc)
        return 2
    run = Run(cfg, args.out or cfg["output"]["dir"])
    names = list(COMMANDS) if args.command == "all" else [args.command]
    for name in names:
        try:
            rep = COMMANDS[name](run)
        except ConfigError as exc:
            log.error("[%s] config: %s", name, exc)
            return 2
        except ValueError as exc:
            # guards on user-chosen sizes (K, sweep amplitudes) are configuration errors
            if "guard" in str(exc) or "degenerate" in str(exc) or "exceeds" in str(exc):
                log.error("[%s] config: %s", name, exc)
                return 2
            log.error("[%s] numeric: %s", name, exc)
            return 3
        except (ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
            log.error("[%s] numeric: %s", name, exc)
            return 3
        except AssertionError as exc:
            # a failed stability assertion (non-positive fitted exponent)
            log.error("[%s] check: %s", name, exc)
            return 4
        log.info("%s: %s", name, json.dumps(_plain(rep), sort_keys=True, default=str)[:400])
    run.manifest()
    failed = [k for k, v in run.checks.items() if not v]
    if failed:
        log.warning("acceptance checks failed: %s", ", ".join(failed))
        if args.strict:
            return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())

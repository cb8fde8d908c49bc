"""Command-line front end.

Every subcommand accepts ``--config FILE`` (flat ``key = value`` lines, ``#``
comments); explicit flags override the file.  Exit codes: 0 success,
1 runtime failure, 2 invalid input.
"""
from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path


from hubblesde import models
from hubblesde._io import atomic_write_text, csv_table, fmt, to_json
from hubblesde.ensemble import (EnsembleConfig, asymptotic_slope, conjugation_gaps,
                                convergence_study, default_workers, estimate_blowup_fraction,
                                simulate_path, verify_bounds)
from hubblesde.models import CosmologyParams, OuParams
from hubblesde.passage import Barrier, DriftedBmSpec, blowup_probability, fpt_prob_finite, tabulate_density
from hubblesde.paths import TimeGrid
from hubblesde.sde import Interpretation, SolverScheme

SCHEMES = {s.value.lower(): s for s in SolverScheme} | {"em": SolverScheme.EULER_MARUYAMA,
                                                      "heun": SolverScheme.STRATONOVICH_HEUN}
SIMULATE_MODELS = ("det", "strat-H", "ito-H", "strat-x", "ito-x", "bessel3", "ou")

# type, default for every key a config file may set
PARAMS = {
    "h0": (float, 1.0),
    "lambda": (float, 1.0),
    "t_trunc": (float, 40.0),
    "dt": (float, None),
    "horizon": (float, None),
    "n_paths": (int, None),
    "seed": (int, 0),
    "scheme": (str, None),
    "output": (str, None),
    "format": (str, None),
    "workers": (int, None),
    "model": (str, None),
    "checkpoints": (str, None),
    "band": (float, 0.1),
    "quantity": (str, "Ht"),
    "tolerance_mult": (float, 5.0),
    "a": (float, None),
    "mu": (float, None),
    "dt_list": (str, None),
    "reference_factor": (int, 1024),
    "x0": (float, None),
    "schemes": (str, None),
    "bridge": (str, "true"),
}

COMMAND_DEFAULTS = {
    "simulate": {"model": "strat-x", "dt": 0.01, "horizon": 1.0, "n_paths": 1, "format": "csv"},
    "blowup": {"dt": 0.01, "horizon": 200.0, "n_paths": 200_000, "format": "json"},
    "asymptotics": {"model": "ito-x", "dt": 0.01, "horizon": 10_000.0, "n_paths": 1000, "format": "json"},
    "bounds": {"dt": 1e-4, "horizon": 1.0, "n_paths": 1000, "format": "json"},
    "density": {"dt": 0.1, "horizon": 20.0, "format": "csv"},
    "convergence": {"model": "ito-x", "horizon": 1.0, "n_paths": 200, "format": "csv",
                    "dt_list": ",".join(repr(2.0**-k) for k in range(6, 13)), "schemes": "EulerMaruyama"},
    "conjugate": {"dt": 1e-3, "horizon": 10.0, "n_paths": 100, "format": "json"},
}


class ValidationError(Exception):
    """Bad user input; reported with exit code 2."""


@dataclass
class RunConfig:
    command: str
    params: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.params[key]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def read_config_file(path: str | Path) -> dict:
    """Parse ``key = value`` lines; keys use underscores or dashes interchangeably."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in PARAMS:
            raise ValidationError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def _convert(key, value):
    typ = PARAMS[key][0]
    if value is None or isinstance(value, typ):
        return value
    try:
        if typ is int:
            f = float(value)
            if f != int(f):
                raise ValueError
            return int(f)
        return typ(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{key} must be {typ.__name__}, got {value!r}") from None


def resolve(command: str, flags: dict, config_path: str | None) -> RunConfig:
    params = {k: default for k, (_, default) in PARAMS.items()}
    params.update(COMMAND_DEFAULTS[command])
    if config_path:
        params.update(read_config_file(config_path))
    params.update({k: v for k, v in flags.items() if v is not None and k in PARAMS})
    params = {k: _convert(k, v) for k, v in params.items()}
    cfg = RunConfig(command, params, {k: v for k, v in flags.items() if k not in PARAMS})
    _validate(cfg)
    return cfg


def _float_list(text: str, name: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"{name} must be a comma-separated list of numbers") from None


def _positive(p, *keys):
    for k in keys:
        v = p[k]
        if v is None or not (math.isfinite(v) and v > 0):
            raise ValidationError(f"{k} must be positive and finite, got {v}")


def _validate(cfg: RunConfig) -> None:
    p = cfg.params
    _positive(p, "h0", "lambda", "t_trunc")
    if cfg.command != "convergence":
        _positive(p, "dt")
    if p["horizon"] is not None and p["dt"] is not None:
        _positive(p, "horizon")
        n = p["horizon"] / p["dt"]
        if abs(n - round(n)) > 1e-9 * max(1.0, n) or round(n) < 1:
            raise ValidationError(f"horizon {p['horizon']} must be a positive multiple of dt {p['dt']}")
    if p["n_paths"] is not None and p["n_paths"] < 1:
        raise ValidationError(f"n_paths must be >= 1, got {p['n_paths']}")
    if p["workers"] is not None and p["workers"] < 1:
        raise ValidationError(f"workers must be >= 1, got {p['workers']}")
    if p["format"] not in ("csv", "json"):
        raise ValidationError(f"format must be csv or json, got {p['format']!r}")
    if p["seed"] < 0:
        raise ValidationError("seed must be non-negative")
    if p["scheme"] is not None and p["scheme"].lower() not in SCHEMES:
        raise ValidationError(f"unknown scheme {p['scheme']!r}")
    if p["bridge"].lower() not in ("true", "false", "1", "0", "yes", "no"):
        raise ValidationError(f"bridge must be true or false, got {p['bridge']!r}")
    cmd = cfg.command
    if cmd == "simulate":
        if p["model"] not in SIMULATE_MODELS:
            raise ValidationError(f"model must be one of {', '.join(SIMULATE_MODELS)}, got {p['model']!r}")
        if p["n_paths"] > 1 and p["output"] is None:
            raise ValidationError("writing more than one path needs --output")
        if p["scheme"] is not None and p["model"] in ("strat-H", "ito-H", "strat-x", "ito-x", "bessel3"):
            sde = _simulate_sde(p["model"])
            if SCHEMES[p["scheme"].lower()].interpretation is not sde.interpretation:
                raise ValidationError(f"scheme {p['scheme']} does not fit the {sde.interpretation.value} "
                                      f"model {p['model']}")
    if cmd == "asymptotics":
        if p["model"] not in ("ito-x", "ito-H", "strat-x-exact", "strat-H", "strat-x", "det"):
            raise ValidationError(f"model {p['model']!r} is not supported by asymptotics")
        if p["quantity"] not in ("Ht", "x/t"):
            raise ValidationError("quantity must be Ht or x/t")
        _positive(p, "band")
        if p["checkpoints"]:
            cps = _float_list(p["checkpoints"], "checkpoints")
            if any(c <= 0 or c > p["horizon"] for c in cps):
                raise ValidationError("checkpoints must lie in (0, horizon]")
            grid = TimeGrid.from_horizon(p["horizon"], p["dt"])
            for c in cps:
                try:
                    grid.index_of(c)
                except ValueError:
                    raise ValidationError(f"checkpoint {c} is not on the dt grid") from None
    if cmd == "bounds":
        if not p["tolerance_mult"] >= 0:
            raise ValidationError("tolerance_mult must be non-negative")
    if cmd == "density":
        if p["a"] is not None and p["a"] == 0:
            raise ValidationError("barrier level a must be non-zero")
    if cmd == "convergence":
        if p["model"] not in ("ito-x", "ito-H", "strat-H", "strat-x", "strat-H-ito"):
            raise ValidationError(f"model {p['model']!r} is not supported by convergence")
        dts = _float_list(p["dt_list"], "dt_list")
        if not dts or any(d <= 0 for d in dts) or any(b >= a for a, b in zip(dts, dts[1:])):
            raise ValidationError("dt_list must be positive and strictly decreasing")
        if p["reference_factor"] < 2:
            raise ValidationError("reference_factor must be >= 2")
        ref = dts[0] / p["reference_factor"]
        if 4 * ref > dts[-1] * (1 + 1e-12):
            raise ValidationError("reference step must be at least 4x finer than the finest dt")
        for name in _float_or_names(p["schemes"]):
            if name.lower() not in SCHEMES:
                raise ValidationError(f"unknown scheme {name!r}")
            if SCHEMES[name.lower()].interpretation is not _convergence_model(p["model"]).interpretation:
                raise ValidationError(f"scheme {name} does not fit model {p['model']}")
        n = p["horizon"] / dts[0]
        if abs(n - round(n)) > 1e-9 * n or round(n) < 1:
            raise ValidationError("horizon must be a multiple of the largest dt")
    if cmd == "conjugate":
        n = p["t_trunc"] / p["dt"]
        if abs(n - round(n)) > 1e-9 * n:
            raise ValidationError("t_trunc must be a multiple of dt")


def _float_or_names(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _simulate_sde(name: str):
    return {
        "strat-H": models.stratonovich_hubble_sde,
        "ito-H": models.ito_hubble_sde,
        "strat-x": models.stratonovich_x_sde,
        "ito-x": models.ito_x_sde,
        "bessel3": models.bessel3_sde,
    }[name]()


def _convergence_model(name: str):
    if name == "strat-H-ito":
        from hubblesde.sde import convert_interpretation
        return convert_interpretation(models.stratonovich_hubble_sde(), Interpretation.ITO)
    return _simulate_sde(name)


def _bool(text: str) -> bool:
    return text.lower() in ("true", "1", "yes")


def _workers(p) -> int:
    return p["workers"] if p["workers"] is not None else default_workers()


# --- output ------------------------------------------------------------------

def _emit(cfg: RunConfig, text: str, out=None) -> None:
    target = cfg.params["output"] if out is None else out
    if target is None:
        sys.stdout.write(text)
    else:
        atomic_write_text(target, text)


def _kv_csv(d: dict) -> str:
    flat = {k: v for k, v in d.items() if not isinstance(v, (dict, list, tuple))}
    for k, v in d.items():
        if isinstance(v, (list, tuple)) and len(v) == 2 and k.startswith("ci"):
            flat[f"{k}_low"], flat[f"{k}_high"] = v
    return csv_table(["key", "value"], [list(flat), list(flat.values())])


# --- subcommands ---------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> int:
    p = cfg.params
    name = p["model"]
    grid = TimeGrid.from_horizon(p["horizon"], p["dt"])
    params = CosmologyParams(p["h0"])
    ens_name = {"bessel3": "bessel3-exact"}.get(name, name)
    scheme = SCHEMES[p["scheme"].lower()] if p["scheme"] else None
    ens = EnsembleConfig(ens_name, grid, p["n_paths"], p["seed"], scheme, params.H0, p["x0"],
                         ou=OuParams(p["lambda"], p["t_trunc"]))
    sols = [simulate_path(ens, i) for i in range(p["n_paths"])]
    column = "H" if name == "det" else "x"
    if p["format"] == "json":
        doc = {"config": ens.describe(), "column": column,
               "paths": [{"t": s.times, column: s.values, "status": s.status.to_dict()} for s in sols]}
        _emit(cfg, to_json(doc) + "\n")
        return 0
    texts = []
    for s in sols:
        if name == "det":
            texts.append(csv_table(["t", "H"], [s.times, s.values]))
        else:
            texts.append(s.to_csv_text("x"))
    if len(texts) == 1:
        _emit(cfg, texts[0])
    else:
        out = Path(p["output"])
        for i, text in enumerate(texts):
            atomic_write_text(out.with_name(f"{out.stem}_{i:05d}{out.suffix}"), text)
    return 0


def cmd_blowup(cfg: RunConfig) -> int:
    p = cfg.params
    params = CosmologyParams(p["h0"])
    if cfg.flags.get("analytic_only"):
        prob = blowup_probability(params)
        doc = {"H0": params.H0, "probability": prob, "exponent": -8.0 / (9.0 * params.H0)}
        if prob == 0.0:
            doc["note"] = f"exp({fmt(doc['exponent'])}) underflows double precision; reported as 0"
        text = to_json(doc) + "\n" if p["format"] == "json" else _kv_csv(doc)
        _emit(cfg, text)
        return 0
    est = estimate_blowup_fraction(params, p["horizon"], p["dt"], p["n_paths"], p["seed"],
                                   bridge=_bool(p["bridge"]), workers=_workers(p))
    doc = est.to_dict()
    _emit(cfg, to_json(doc) + "\n" if p["format"] == "json" else _kv_csv(doc))
    return 0


def cmd_asymptotics(cfg: RunConfig) -> int:
    p = cfg.params
    grid = TimeGrid.from_horizon(p["horizon"], p["dt"])
    model = p["model"]
    barrier = Barrier(0.0) if model == "strat-x-exact" else None
    cps = _float_list(p["checkpoints"], "checkpoints") if p["checkpoints"] else [grid.t_end]
    ens = EnsembleConfig(model, grid, p["n_paths"], p["seed"], None, p["h0"], p["x0"], barrier,
                         _bool(p["bridge"]))
    rep = asymptotic_slope(ens, cps, quantity=p["quantity"], band=p["band"], workers=_workers(p))
    if p["format"] == "json":
        _emit(cfg, to_json(rep.to_dict()) + "\n")
    else:
        cs = rep.checkpoints
        cols = [[c.t for c in cs], [c.n_alive for c in cs], [c.alive_fraction for c in cs], [c.mean for c in cs],
                [c.stderr for c in cs], [c.within_band for c in cs]] + \
               [[c.quantiles[i] for c in cs] for i in range(3)]
        _emit(cfg, csv_table(["t", "n_alive", "alive_fraction", "mean", "stderr", "within_band",
                              "q01", "q50", "q99"], cols))
    return 0


def cmd_bounds(cfg: RunConfig) -> int:
    p = cfg.params
    grid = TimeGrid.from_horizon(p["horizon"], p["dt"])
    rep = verify_bounds(CosmologyParams(p["h0"]), grid, p["n_paths"], p["seed"], p["tolerance_mult"],
                        workers=_workers(p))
    doc = rep.to_dict()
    _emit(cfg, to_json(doc) + "\n" if p["format"] == "json" else _kv_csv(doc))
    return 0


def cmd_density(cfg: RunConfig) -> int:
    p = cfg.params
    if p["a"] is None:
        spec = DriftedBmSpec(mu=2.0 / 3.0 if p["mu"] is None else p["mu"], a=-2.0 / (3.0 * p["h0"]))
    else:
        spec = DriftedBmSpec(mu=2.0 / 3.0 if p["mu"] is None else p["mu"], a=p["a"])
    times = TimeGrid.from_horizon(p["horizon"], p["dt"]).times[1:]
    t, dens, cdf = tabulate_density(spec, times)
    if p["format"] == "json":
        doc = {"mu": spec.mu, "a": spec.a, "prob_finite": fpt_prob_finite(spec), "t": t, "density": dens,
               "cdf": cdf}
        _emit(cfg, to_json(doc) + "\n")
    else:
        _emit(cfg, csv_table(["t", "density", "cdf"], [t, dens, cdf]))
    return 0


def cmd_convergence(cfg: RunConfig) -> int:
    p = cfg.params
    model = _convergence_model(p["model"])
    schemes = [SCHEMES[s.lower()] for s in _float_or_names(p["schemes"])]
    x0 = p["x0"]
    if x0 is None:
        x0 = p["h0"] if p["model"] in ("ito-H", "strat-H", "strat-H-ito") else 1.0 / p["h0"]
    rep = convergence_study(model, schemes, _float_list(p["dt_list"], "dt_list"), p["n_paths"], p["horizon"],
                            p["seed"], x0=x0, reference_factor=p["reference_factor"], workers=_workers(p))
    if p["format"] == "json":
        _emit(cfg, to_json(rep.to_dict()) + "\n")
    else:
        rows = list(rep.rows())
        cols = [list(c) for c in zip(*rows)]
        cols.append([rep.slopes[r[0]] for r in rows])
        _emit(cfg, csv_table(["scheme", "dt", "error", "stderr", "slope"], cols))
    return 0


def cmd_conjugate(cfg: RunConfig) -> int:
    p = cfg.params
    rep = conjugation_gaps(CosmologyParams(p["h0"]), OuParams(p["lambda"], p["t_trunc"]), p["horizon"], p["dt"],
                           p["n_paths"], p["seed"], workers=_workers(p))
    if p["format"] == "json":
        _emit(cfg, to_json(rep.to_dict()) + "\n")
    else:
        _emit(cfg, csv_table(["path", "gap"], [list(range(len(rep.gaps))), rep.gaps]))
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "blowup": cmd_blowup,
    "asymptotics": cmd_asymptotics,
    "bounds": cmd_bounds,
    "density": cmd_density,
    "convergence": cmd_convergence,
    "conjugate": cmd_conjugate,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value file; flags override it")
    common.add_argument("--h0", type=float, help="initial Hubble parameter H0")
    common.add_argument("--lambda", dest="lambda", type=float, help="OU mean-reversion rate")
    common.add_argument("--t-trunc", dest="t_trunc", type=float, help="OU truncation horizon")
    common.add_argument("--dt", type=float)
    common.add_argument("--horizon", type=float)
    common.add_argument("--n-paths", dest="n_paths", type=int)
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--scheme", help="EulerMaruyama, Milstein or StratonovichHeun")
    common.add_argument("-o", "--output", help="output file (default: stdout)")
    common.add_argument("--format", choices=("csv", "json"))
    common.add_argument("--workers", type=int, help="worker processes (default: CPU count)")
    common.add_argument("--x0", type=float, help="initial value override")

    parser = _Parser(prog="hubblesde", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="write sample paths")
    p.add_argument("--model", help=", ".join(SIMULATE_MODELS))

    p = sub.add_parser("blowup", parents=[common], help="Stratonovich blow-up fraction")
    p.add_argument("--analytic-only", action="store_true", help="print exp(-8/(9 H0)) without simulating")
    p.add_argument("--no-bridge", dest="bridge", action="store_const", const="false",
                   help="disable the Brownian-bridge crossing correction")

    p = sub.add_parser("asymptotics", parents=[common], help="distribution of H(t) t at checkpoints")
    p.add_argument("--model")
    p.add_argument("--checkpoints", help="comma-separated times")
    p.add_argument("--band", type=float)
    p.add_argument("--quantity", choices=("Ht", "x/t"))

    p = sub.add_parser("bounds", parents=[common], help="audit the pathwise comparison bounds")
    p.add_argument("--tolerance-mult", dest="tolerance_mult", type=float)

    p = sub.add_parser("density", parents=[common], help="first-passage density and CDF table")
    p.add_argument("--a", type=float, help="barrier level (default -2/(3 H0))")
    p.add_argument("--mu", type=float, help="drift (default 2/3)")

    p = sub.add_parser("convergence", parents=[common], help="strong error table")
    p.add_argument("--model")
    p.add_argument("--schemes", help="comma-separated scheme names")
    p.add_argument("--dt-list", dest="dt_list", help="comma-separated decreasing steps")
    p.add_argument("--reference-factor", dest="reference_factor", type=int)

    sub.add_parser("conjugate", parents=[common], help="conjugated reconstruction vs explicit solution")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
        cfg = resolve(args.command, flags, args.config)
    except ValidationError as exc:
        print(f"hubblesde: error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[cfg.command](cfg)
    except ValidationError as exc:
        print(f"hubblesde: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit code 1
        print(f"hubblesde: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

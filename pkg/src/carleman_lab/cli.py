"""Command-line driver: one subcommand per experiment, CSV outputs, exit codes 0/1/2.

Exit codes: 0 all checks passed, 1 a check failed (details in the CSV files), 2 usage or
configuration error.  Every run writes ``resolved_config.ini`` next to its CSV files.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, experiments
from .geometry import ParameterRegimeError
from .mesh import SpatialDomain

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


def _floats(text):
    return tuple(float(v) for v in text.replace(";", ",").split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _words(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _optional_float(text):
    return None if text.strip().lower() in ("", "auto", "none") else float(text)


def _bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _cases(text):
    out = []
    for item in _words(text):
        m, n = item.lower().split("x")
        out.append((int(m), int(n)))
    return tuple(out)


# section -> key -> (parser, default text, description)
SCHEMA = {
    "run": {
        "seed": (int, "0", "base random seed"),
        "output_dir": (str, "results", "directory for CSV files and the resolved config"),
    },
    "domain": {
        "bounds": (_floats, "1, 2", "interval lo, hi (four numbers for a box: x_lo, x_hi, y_lo, y_hi)"),
        "x0": (_floats, "0", "observation/weight centre, outside the closed domain"),
        "sigma": (float, "0.3", "collar width of omega"),
        "T": (float, "2.5", "time horizon; the cylinder is (-T, T)"),
    },
    "geometry": {
        "cases": (_cases, "2x1, 2x2, 2x3, 3x2", "(m, n) pairs as m x n"),
        "epsilons": (_floats, "0, 0.02, 0.05", "warping parameters"),
        "points": (int, "100", "random points per case"),
        "conformal_points": (int, "50", "random points per case for the conformal checks"),
        "fd_step": (float, "1e-3", "finite-difference step"),
        "tolerance": (float, "1e-4", "largest admissible identity residual"),
        "ratio_low": (float, "3.5", "lower end of the step-halving ratio band"),
        "ratio_high": (float, "4.5", "upper end of the step-halving ratio band"),
    },
    "carleman": {
        "R": (float, "2.0", "weight radius and two-time half-width"),
        "levels": (_ints, "41, 81", "spatial node counts"),
        "delta": (float, "0.1", "epsilon = delta^2/R, b = delta/R"),
        "a": (_optional_float, "auto", "weight exponent (auto: max(9, ceil(20 R)))"),
        "b": (_optional_float, "auto", "override of b"),
        "epsilon": (_optional_float, "auto", "override of epsilon"),
        "sigma": (float, "0.3", "collar width of omega"),
        "bumps": (int, "10", "bump fields in the test family"),
        "lifts": (int, "10", "two-time lifts of adjoint solutions in the test family"),
        "monotonicity_samples": (int, "10000", "sampled triples for the time monotonicity"),
        "gradient_points": (int, "1000", "points for the weight-gradient ratio"),
        "gradient_bound": (float, "50", "admissible weight-gradient ratio"),
        "stability_factor": (float, "2", "admissible max/min of the minimum ratios across levels"),
    },
    "observability": {
        "levels": (_ints, "101, 201", "spatial node counts"),
        "ensemble": (int, "50", "random samples per level"),
        "modes": (int, "10", "Dirichlet modes per data component"),
        "presets": (_words, "zero, timedep", "coefficient presets"),
        "stability": (float, "0.25", "admissible relative change across levels"),
        "interior": (_bool, "true", "also run the two-point interior setting"),
        "interior_bounds": (_floats, "-1, 1", "domain of the interior setting"),
        "interior_centers": (_floats, "-0.1, 0.1", "spatial positions of the two centres (t = 0)"),
        "probe_T": (float, "0.3", "short horizon of the negative probe"),
        "probe_levels": (_ints, "51, 101, 201", "node counts of the negative probe"),
        "probe_growth": (float, "5", "required growth of the probe estimate"),
        "probe_mode_divisor": (int, "25", "probe mode budget is (nodes - 1) // divisor"),
    },
    "control": {
        "preset": (str, "timedep", "coefficient preset"),
        "resolution": (int, "201", "spatial node count"),
        "tol": (float, "1e-2", "relative terminal error target"),
        "max_iter": (int, "200", "iteration cap"),
        "initial_y0": (_floats, "1", "sine-mode coefficients of y(-T)"),
        "initial_y1": (_floats, "0", "sine-mode coefficients of y_t(-T)"),
        "target_y0": (_floats, "", "sine-mode coefficients of y(T) (empty: zero)"),
        "target_y1": (_floats, "", "sine-mode coefficients of y_t(T) (empty: zero)"),
        "check_resolution": (int, "51", "node count for the dense Gramian checks"),
        "symmetry_tol": (float, "1e-8", "admissible symmetry and positivity defects"),
    },
    "energy": {
        "resolution": (int, "101", "spatial node count"),
        "ensemble": (int, "20", "random coefficient sets"),
        "pair_stride": (int, "10", "time-level stride for the pairwise Gronwall fit"),
        "windows": (int, "200", "random nested windows per member"),
        "output_stride": (int, "10", "time-level stride of energy.csv"),
        "drift_tol": (float, "1e-3", "admissible relative drift without lower-order terms"),
    },
}


def load_config(path=None, overrides=()):
    """Parse, validate and resolve a config file; returns (values, resolved ConfigParser)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, keys in SCHEMA.items():
        parser[section] = {k: entry[1] for k, entry in keys.items()}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        user = configparser.ConfigParser(interpolation=None)
        user.optionxform = str
        try:
            user.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        for section in user.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, value in user[section].items():
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                parser[section][key] = value
    for item in overrides:
        try:
            dotted, value = item.split("=", 1)
            section, key = dotted.strip().split(".", 1)
        except ValueError as exc:
            raise ConfigError(f"override must look like section.key=value, got {item!r}") from exc
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown override {dotted!r}")
        parser[section][key] = value.strip()
    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (convert, _, _) in keys.items():
            try:
                values[section][key] = convert(parser[section][key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
    return values, parser


def _domain(bounds, x0):
    if len(bounds) == 2:
        if len(x0) != 1:
            raise ConfigError("x0 needs one coordinate for an interval")
        return SpatialDomain.interval(bounds[0], bounds[1], x0[0])
    if len(bounds) == 4:
        if len(x0) != 2:
            raise ConfigError("x0 needs two coordinates for a box")
        return SpatialDomain.box(bounds[:2], bounds[2:], x0)
    raise ConfigError("bounds must have 2 or 4 numbers")


# ---------------------------------------------------------------------------
# Subcommands


def _verify_geometry(cfg):
    g = cfg["geometry"]
    return experiments.geometry_experiment(
        cases=g["cases"], epsilons=g["epsilons"], points=g["points"], fd_step=g["fd_step"],
        seed=cfg["run"]["seed"], tolerance=g["tolerance"], ratio_band=(g["ratio_low"], g["ratio_high"]),
        conformal_points=g["conformal_points"])


def _verify_carleman(cfg):
    c, d = cfg["carleman"], cfg["domain"]
    if len(d["bounds"]) != 2:
        raise ConfigError("the Carleman experiment runs on an interval")
    return experiments.carleman_experiment(
        _domain(d["bounds"], d["x0"]), R=c["R"], levels=c["levels"], delta=c["delta"], a=c["a"], b=c["b"],
        epsilon=c["epsilon"], sigma=c["sigma"], seed=cfg["run"]["seed"], bumps=c["bumps"], lifts=c["lifts"],
        monotonicity_samples=c["monotonicity_samples"], gradient_points=c["gradient_points"],
        gradient_bound=c["gradient_bound"], stability_factor=c["stability_factor"])


def _estimate_observability(cfg):
    o, d = cfg["observability"], cfg["domain"]
    interior = None
    if o["interior"]:
        bounds = o["interior_bounds"]
        interior = _domain(bounds, (0.0,) * (len(bounds) // 2))
    return experiments.observability_experiment(
        _domain(d["bounds"], d["x0"]), x0=d["x0"], sigma=d["sigma"], T=d["T"], levels=o["levels"],
        ensemble=o["ensemble"], modes=o["modes"], presets=o["presets"], stability=o["stability"],
        interior_domain=interior, interior_centers=o["interior_centers"], probe_T=o["probe_T"],
        probe_levels=o["probe_levels"], probe_growth=o["probe_growth"],
        probe_mode_divisor=o["probe_mode_divisor"], seed=cfg["run"]["seed"])


def _synthesize_control(cfg):
    c, d = cfg["control"], cfg["domain"]
    return experiments.control_experiment(
        _domain(d["bounds"], d["x0"]), x0=d["x0"], sigma=d["sigma"], T=d["T"], preset=c["preset"],
        resolution=c["resolution"], tol=c["tol"], max_iter=c["max_iter"], initial_y0=c["initial_y0"],
        initial_y1=c["initial_y1"], target_y0=c["target_y0"], target_y1=c["target_y1"],
        check_resolution=c["check_resolution"], symmetry_tol=c["symmetry_tol"])


def _energy_report(cfg):
    e, d = cfg["energy"], cfg["domain"]
    return experiments.energy_experiment(
        _domain(d["bounds"], d["x0"]), T=d["T"], resolution=e["resolution"], ensemble=e["ensemble"],
        seed=cfg["run"]["seed"], pair_stride=e["pair_stride"], windows=e["windows"],
        output_stride=e["output_stride"], drift_tol=e["drift_tol"])


COMMANDS = {
    "verify-geometry": _verify_geometry,
    "verify-carleman": _verify_carleman,
    "estimate-observability": _estimate_observability,
    "synthesize-control": _synthesize_control,
    "energy-report": _energy_report,
}


# ---------------------------------------------------------------------------
# Output


def _cell(value):
    if isinstance(value, float):
        return repr(value)
    if hasattr(value, "item"):
        return _cell(value.item())
    return str(value)


def write_table(path: Path, command: str, header, rows, final=None):
    """CSV with a '#' metadata block (the 'generated' line is the only non-deterministic one)."""
    buf = io.StringIO()
    buf.write(f"# generated: {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n")
    buf.write(f"# command: {command}\n# version: {__version__}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    if final:
        buf.write("# final\n")
        writer.writerow(("key", "value"))
        for key, value in final:
            writer.writerow((key, _cell(value)))
    path.write_text(buf.getvalue())


def write_outputs(result, command, out_dir: Path, resolved: configparser.ConfigParser):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.ini", "w") as fh:
        resolved.write(fh)
    for name, table in result.tables.items():
        header, rows = table[0], table[1]
        final = table[2] if len(table) > 2 else None
        write_table(out_dir / name, command, header, rows, final)
    checks = [("check." + k, "pass" if ok else "fail") for k, ok in result.checks.items()]
    write_table(out_dir / f"{result.name}_summary.csv", command, ("item", "value"),
                checks + [("metric." + k, _cell(v)) for k, v in result.metrics.items()])


def build_parser():
    parser = argparse.ArgumentParser(prog="carleman-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("-c", "--config", help="INI-style config file (all keys have defaults)")
        p.add_argument("-o", "--output", help="output directory (overrides run.output_dir)")
        p.add_argument("-s", "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value")
    sub.add_parser("show-config", help="print the default config with documentation")
    return parser


def default_config_text():
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (_, default, doc) in keys.items():
            lines.append(f"# {doc}")
            lines.append(f"{key} = {default}")
        lines.append("")
    return "\n".join(lines)


def run(command, config_path=None, output=None, overrides=(), stream=sys.stdout) -> int:
    try:
        cfg, resolved = load_config(config_path, overrides)
        if command not in COMMANDS:
            raise ConfigError(f"unknown subcommand {command!r}")
        result = COMMANDS[command](cfg)
    except (ConfigError, ParameterRegimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out_dir = Path(output or cfg["run"]["output_dir"])
    write_outputs(result, command, out_dir, resolved)
    status = "PASS" if result.passed else "FAIL"
    failed = result.failed_checks()
    detail = f" (failed: {', '.join(failed)})" if failed else ""
    print(f"{command}: {status} {sum(result.checks.values())}/{len(result.checks)} checks{detail} -> {out_dir}",
          file=stream)
    return EXIT_OK if result.passed else EXIT_FAILED


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.command == "show-config":
        print(default_config_text())
        return EXIT_OK
    return run(args.command, args.config, args.output, args.set)


if __name__ == "__main__":
    sys.exit(main())

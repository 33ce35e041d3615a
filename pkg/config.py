"""
Run configuration files.

A config is a dotenv-style ``key=value`` file (comments and quoting as in
``.env`` files). Every key is known in advance: misspelled keys are rejected
with a suggestion, and all value problems are collected before reporting.

Process-wide defaults come from the environment (``RDDMK_WORKERS``,
``RDDMK_OUT_DIR``); values in the file override them and CLI flags override
both.
"""

import difflib
import io
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from dotenv import load_dotenv
from dotenv.parser import parse_stream

from errors import ParseError, ValidationError
from field_simulator import FIELD_KINDS, CDomainSpec, FieldSpec
from manifolds import ManifoldKind
from rdd_service import RunConfig
from variography import FAMILIES, KERNELS, KernelConfig, LagBins

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "krige", "cv", "variogram", "mc-study")
DISTANCE_MODES = ("euclidean", "delaunay", "precomputed")


def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got '{text}'")


def _parse_int_list(text: str) -> Tuple[int, ...]:
    items = [item.strip() for item in text.replace(";", ",").split(",") if item.strip()]
    if not items:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(int(item) for item in items)


def _parse_optional_float(text: str) -> Optional[float]:
    return None if text.strip().lower() in ("", "auto", "none") else float(text)


# key -> (parser, default)
SCHEMA: Dict[str, Tuple[Callable[[str], Any], Any]] = {
    # run
    "k": (int, 4),
    "b": (int, 100),
    "kernel": (str, "gaussian"),
    "bandwidth": (float, 1.5),
    "variogram_family": (str, "spherical"),
    "manifold": (str, "spd"),
    "manifold_dim": (int, 2),
    "mean_strategy": (str, "extrinsic_fallback"),
    "master_seed": (int, 0),
    "min_tile_size": (int, 3),
    "max_partition_attempts": (int, 100),
    "n_bins": (int, 15),
    "h_max": (_parse_optional_float, None),
    "weight_cutoff": (float, 1e-6),
    "mean_tol": (float, 1e-9),
    "mean_max_iter": (int, 200),
    "keep_iterations": (_parse_bool, False),
    "dump_variograms": (_parse_bool, False),
    "workers": (int, None),
    # inputs / outputs
    "sites_path": (str, None),
    "matrices_path": (str, None),
    "targets_path": (str, None),
    "boundary_path": (str, None),
    "extra_vertices_path": (str, None),
    "distance_path": (str, None),
    "distance": (str, "euclidean"),
    "out_dir": (str, None),
    # simulation
    "phi_max": (float, 8.88),
    "r_min": (float, -0.5),
    "r_max": (float, 0.5),
    "centerline_radius": (float, 0.6),
    "arm_length": (float, 3.5),
    "n_phi": (int, 113),
    "n_r": (int, 14),
    "grf_range": (float, 10.0),
    "grf_sill": (float, 3.75 ** 2),
    "field_kind": (str, "spd"),
    # Monte Carlo
    "n_replicates": (int, 30),
    "n_sites": (int, 100),
    "k_values": (_parse_int_list, (1, 2, 4, 6, 8, 10)),
    "resimulate_field": (_parse_bool, False),
    "exclude_observed": (_parse_bool, False),
    "dump_spe": (_parse_bool, False),
}

PATH_KEYS = ("sites_path", "matrices_path", "targets_path", "boundary_path", "extra_vertices_path", "distance_path")

REQUIRED_KEYS = {
    "simulate": (),
    "krige": ("sites_path", "matrices_path"),
    "cv": ("sites_path", "matrices_path"),
    "variogram": ("sites_path", "matrices_path"),
    "mc-study": (),
}


@dataclass
class MonteCarloSettings:
    n_replicates: int = 30
    n_sites: int = 100
    k_values: Tuple[int, ...] = (1, 2, 4, 6, 8, 10)
    resimulate_field: bool = False
    exclude_observed: bool = False
    dump_spe: bool = False


@dataclass
class ConfigFile:
    run: RunConfig
    domain: CDomainSpec
    field_spec: FieldSpec
    monte_carlo: MonteCarloSettings
    paths: Dict[str, Optional[Path]]
    distance: str
    out_dir: Path
    source: Optional[Path] = None
    explicit_keys: List[str] = field(default_factory=list)

    def require(self, command: str) -> None:
        if command not in COMMANDS:
            raise ValidationError([f"unknown command '{command}', expected one of {COMMANDS}"])
        missing = [key for key in REQUIRED_KEYS[command] if self.paths.get(key) is None]
        if self.distance == "precomputed" and command in ("krige", "cv", "variogram") and self.paths.get("distance_path") is None:
            missing.append("distance_path")
        if missing:
            raise ValidationError(
                [f"'{key}' is required for the {command} command" for key in missing],
                {"command": command},
            )

    def with_overrides(self, seed: Optional[int] = None, workers: Optional[int] = None, out_dir: Optional[str] = None) -> "ConfigFile":
        run = self.run
        if seed is not None:
            run = replace(run, master_seed=int(seed))
        if workers is not None:
            run = replace(run, workers=int(workers))
        problems = run.violations()
        if problems:
            raise ValidationError(problems)
        return replace(self, run=run, out_dir=Path(out_dir) if out_dir else self.out_dir)


def _suggest(key: str) -> Optional[str]:
    close = difflib.get_close_matches(key, SCHEMA.keys(), n=1)
    return close[0] if close else None


def read_bindings(text: str, source: str = "<config>") -> Dict[str, Tuple[str, int]]:
    """Parse ``key=value`` lines; returns ``{key: (value, line)}``."""
    values: Dict[str, Tuple[str, int]] = {}
    for binding in parse_stream(io.StringIO(text)):
        line = binding.original.line
        if binding.error:
            raise ParseError(
                f"{source}:{line}: malformed line",
                {"line": line, "text": binding.original.string.strip()},
            )
        if binding.key is None:
            continue
        key = binding.key.strip().lower()
        if key not in SCHEMA:
            suggestion = _suggest(key)
            hint = f"; did you mean '{suggestion}'?" if suggestion else ""
            raise ParseError(
                f"{source}:{line}: unknown key '{binding.key}'{hint}",
                {"line": line, "key": binding.key, "suggestion": suggestion},
            )
        if key in values:
            raise ParseError(
                f"{source}:{line}: duplicate key '{key}' (first set on line {values[key][1]})",
                {"line": line, "key": key},
            )
        values[key] = ("" if binding.value is None else binding.value, line)
    return values


def build_config(values: Dict[str, Tuple[str, int]], base_dir: Optional[Path] = None, source: Optional[Path] = None) -> ConfigFile:
    violations: List[str] = []
    parsed: Dict[str, Any] = {}
    for key, (parser, default) in SCHEMA.items():
        if key not in values:
            parsed[key] = default
            continue
        text, line = values[key]
        try:
            parsed[key] = parser(text)
        except ValueError as e:
            violations.append(f"line {line}: {key}={text!r} is invalid ({e})")
            parsed[key] = default

    if parsed["workers"] is None:
        try:
            parsed["workers"] = int(os.getenv("RDDMK_WORKERS", "1"))
        except ValueError:
            violations.append(f"RDDMK_WORKERS={os.getenv('RDDMK_WORKERS')!r} is not an integer")
            parsed["workers"] = 1
    if parsed["out_dir"] is None:
        parsed["out_dir"] = os.getenv("RDDMK_OUT_DIR", "rddmk_output")

    for key, allowed in (
        ("kernel", KERNELS),
        ("variogram_family", FAMILIES),
        ("manifold", ManifoldKind.TAGS),
        ("distance", DISTANCE_MODES),
        ("field_kind", FIELD_KINDS),
    ):
        if parsed[key] not in allowed:
            violations.append(f"{key} must be one of {allowed}, got '{parsed[key]}'")
    if parsed["kernel"] == "gaussian" and not parsed["bandwidth"] > 0.0:
        violations.append(f"bandwidth must be positive, got {parsed['bandwidth']}")
    minimum_dim = 1 if parsed["manifold"] == "sphere" else 2
    if parsed["manifold_dim"] < minimum_dim:
        violations.append(f"manifold_dim must be at least {minimum_dim} for {parsed['manifold']}")
    if parsed["h_max"] is not None and not parsed["h_max"] > 0.0:
        violations.append("h_max must be positive (or 'auto')")
    if not parsed["weight_cutoff"] >= 0.0:
        violations.append("weight_cutoff must be nonnegative")
    if parsed["n_replicates"] < 1:
        violations.append("n_replicates must be at least 1")
    if parsed["n_sites"] < 1:
        violations.append("n_sites must be at least 1")
    if any(k < 1 for k in parsed["k_values"]):
        violations.append("k_values entries must satisfy 1 ≤ K ≤ n")

    domain = CDomainSpec(
        phi_max=parsed["phi_max"],
        r_min=parsed["r_min"],
        r_max=parsed["r_max"],
        centerline_radius=parsed["centerline_radius"],
        arm_length=parsed["arm_length"],
        n_phi=parsed["n_phi"],
        n_r=parsed["n_r"],
    )
    violations.extend(domain.violations())
    field_spec = FieldSpec(grf_range=parsed["grf_range"], grf_sill=parsed["grf_sill"], kind=parsed["field_kind"])
    violations.extend(field_spec.violations())
    if parsed["n_sites"] > parsed["n_phi"] * parsed["n_r"]:
        violations.append(f"n_sites={parsed['n_sites']} exceeds the grid size {parsed['n_phi'] * parsed['n_r']}")

    kernel_ok = parsed["kernel"] in KERNELS and (parsed["kernel"] != "gaussian" or parsed["bandwidth"] > 0.0)
    manifold_ok = parsed["manifold"] in ManifoldKind.TAGS and parsed["manifold_dim"] >= minimum_dim
    run = RunConfig(
        k=parsed["k"],
        b=parsed["b"],
        kernel=KernelConfig(parsed["kernel"], parsed["bandwidth"]) if kernel_ok else KernelConfig(),
        variogram_family=parsed["variogram_family"],
        manifold=ManifoldKind(parsed["manifold"], parsed["manifold_dim"]) if manifold_ok else ManifoldKind("spd", 2),
        mean_strategy=parsed["mean_strategy"],
        master_seed=parsed["master_seed"],
        min_tile_size=parsed["min_tile_size"],
        max_partition_attempts=parsed["max_partition_attempts"],
        bins=LagBins(parsed["n_bins"], parsed["h_max"], parsed["weight_cutoff"]),
        mean_tol=parsed["mean_tol"],
        mean_max_iter=parsed["mean_max_iter"],
        workers=parsed["workers"],
        keep_iterations=parsed["keep_iterations"],
        dump_variograms=parsed["dump_variograms"],
    )
    violations.extend(run.violations())

    if violations:
        # de-duplicate while keeping order
        unique = list(dict.fromkeys(violations))
        raise ValidationError(unique, {"source": str(source) if source else None})

    base_dir = base_dir or Path.cwd()
    paths = {
        key: (Path(parsed[key]) if Path(parsed[key]).is_absolute() else base_dir / parsed[key]) if parsed[key] else None
        for key in PATH_KEYS
    }
    return ConfigFile(
        run=run,
        domain=domain,
        field_spec=field_spec,
        monte_carlo=MonteCarloSettings(
            n_replicates=parsed["n_replicates"],
            n_sites=parsed["n_sites"],
            k_values=parsed["k_values"],
            resimulate_field=parsed["resimulate_field"],
            exclude_observed=parsed["exclude_observed"],
            dump_spe=parsed["dump_spe"],
        ),
        paths=paths,
        distance=parsed["distance"],
        out_dir=Path(parsed["out_dir"]),
        source=source,
        explicit_keys=sorted(values.keys()),
    )


def parse_config_text(text: str, base_dir: Optional[Path] = None, source: str = "<config>") -> ConfigFile:
    return build_config(read_bindings(text, source), base_dir=base_dir)


def parse_config(path) -> ConfigFile:
    """Read, parse and validate a config file; relative paths resolve against its directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"Cannot read config file {path}: {e}", {"path": str(path)})
    config = build_config(read_bindings(text, str(path)), base_dir=path.parent, source=path)
    logger.info(f"⚙️  Loaded config {path} ({len(config.explicit_keys)} keys set)")
    return config

"""
CSV and JSON readers/writers for datasets and results.

Every CSV starts with an id column; matrix-valued columns use the manifold's
row layout (upper triangle for SPD and correlation matrices, coordinates for
sphere points). Floats are written with 17 significant digits so files read
back bit-for-bit.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from domain_graph import SiteSet
from errors import InvalidMatrixError, OutputWriteError, ParseError, RDDMKError, RowCountMismatchError
from field_simulator import CDomainGrid, MonteCarloResult
from manifolds import Manifold, ManifoldKind
from rdd_service import CrossValidationResult, PredictionResult, TargetSet

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def _load_frame(path, converters=None) -> pd.DataFrame:
    path = Path(path)
    try:
        frame = pd.read_csv(path, converters=converters)
    except FileNotFoundError:
        raise ParseError(f"File not found: {path}", {"path": str(path)})
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise ParseError(f"Cannot parse {path}: {e}", {"path": str(path)})
    except OSError as e:
        raise ParseError(f"Cannot read {path}: {e}", {"path": str(path), "errno": e.errno})
    frame.columns = [str(c).strip() for c in frame.columns]
    return frame


def _read_csv(path, required: Sequence[str] = ()) -> pd.DataFrame:
    """Read a CSV whose first column is a string id; check the required columns exist."""
    frame = _load_frame(path, converters={0: str})
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise ParseError(
            f"{path} is missing column(s) {missing}",
            {"path": str(path), "missing": missing, "columns": list(frame.columns)},
        )
    return frame


def _numeric(frame: pd.DataFrame, columns: Sequence[str], path) -> np.ndarray:
    values = frame[list(columns)].apply(pd.to_numeric, errors="coerce")
    bad = values.isna().to_numpy()
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ParseError(
            f"{path}: non-numeric value in column '{columns[col]}' on data row {row + 1}",
            {"path": str(path), "row": int(row) + 1, "column": columns[col]},
        )
    return values.to_numpy(dtype=float)


def _write_frame(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    except OSError as e:
        raise OutputWriteError(f"Cannot write {path}: {e}", {"path": str(path), "errno": e.errno})
    logger.debug(f"Wrote {len(frame)} rows to {path}")
    return path


# ---------------------------------------------------------------- readers


def read_sites(path) -> SiteSet:
    """Site file ``id,x,y``."""
    frame = _read_csv(path, ["x", "y"])
    ids = frame.iloc[:, 0].astype(str).tolist()
    return SiteSet(ids, _numeric(frame, ["x", "y"], path))


def read_targets(path) -> TargetSet:
    frame = _read_csv(path, ["x", "y"])
    return TargetSet(frame.iloc[:, 0].astype(str).tolist(), _numeric(frame, ["x", "y"], path))


def read_points(path) -> np.ndarray:
    """Plain ``x,y`` vertex list (boundary polygons, extra triangulation vertices)."""
    frame = _load_frame(path)
    if "x" not in frame.columns or "y" not in frame.columns:
        raise ParseError(f"{path} needs columns x,y", {"path": str(path), "columns": list(frame.columns)})
    return _numeric(frame, ["x", "y"], path)


def read_distance_matrix(path, sites: SiteSet) -> np.ndarray:
    """
    Square distance matrix: first column holds row ids, the header holds
    column ids. Rows and columns are reordered to match ``sites``.
    """
    frame = _read_csv(path)
    row_ids = frame.iloc[:, 0].astype(str).tolist()
    col_ids = [str(c) for c in frame.columns[1:]]
    expected = set(sites.ids)
    if len(row_ids) != sites.n or set(row_ids) != expected or set(col_ids) != expected:
        raise RowCountMismatchError(
            "Distance matrix ids do not match the site ids",
            {"path": str(path), "rows": len(row_ids), "columns": len(col_ids), "sites": sites.n},
        )
    values = _numeric(frame, list(frame.columns[1:]), path)
    matrix = pd.DataFrame(values, index=row_ids, columns=col_ids)
    return matrix.loc[list(sites.ids), list(sites.ids)].to_numpy(dtype=float)


def read_matrices(path, manifold: Manifold) -> Tuple[List[str], np.ndarray]:
    """
    Manifold-valued rows ``id,<manifold columns>``. Columns other than the id
    and the manifold's own are ignored, so prediction files read back too.
    Each row is checked against the manifold's invariants.
    """
    columns = manifold.column_names()
    frame = _read_csv(path, columns)
    ids = frame.iloc[:, 0].astype(str).tolist()
    rows = _numeric(frame, columns, path)

    points = []
    for row_number, (site_id, row) in enumerate(zip(ids, rows), start=1):
        try:
            point = manifold.validate_point(manifold.from_rows(row))
        except RDDMKError as e:
            raise InvalidMatrixError(
                f"Row {row_number} (site '{site_id}') violates the {manifold.kind} invariants: {e.message}",
                {
                    "path": str(path),
                    "row": row_number,
                    "site_id": site_id,
                    "invariant": e.context.get("invariant", e.code),
                },
            )
        points.append(point)
    return ids, np.stack(points) if points else np.zeros((0,) + manifold.point_shape)


def ingest_dataset(sites_path, matrices_path, kind: ManifoldKind) -> Tuple[SiteSet, np.ndarray]:
    """
    Load sites and their observations. Row i of the matrices file is bound to
    site i; ids must agree (the matrices file may list them in another order).
    """
    manifold = kind.build()
    sites = read_sites(sites_path)
    ids, observations = read_matrices(matrices_path, manifold)
    if len(ids) != sites.n:
        raise RowCountMismatchError(
            f"{sites.n} sites but {len(ids)} observation rows",
            {"sites": sites.n, "observations": len(ids)},
        )
    if ids != list(sites.ids):
        position = {site_id: i for i, site_id in enumerate(ids)}
        unknown = [site_id for site_id in sites.ids if site_id not in position]
        if unknown:
            raise RowCountMismatchError(
                "Observation file has no row for some sites",
                {"missing_site_ids": unknown[:10], "missing": len(unknown)},
            )
        observations = observations[[position[site_id] for site_id in sites.ids]]
    logger.info(f"📥 Loaded {sites.n} sites with {kind} observations")
    return sites, observations


# ---------------------------------------------------------------- writers


def matrices_frame(ids: Sequence[str], points, manifold: Manifold, coords=None, id_column: str = "id") -> pd.DataFrame:
    frame = pd.DataFrame(manifold.to_rows(points), columns=manifold.column_names())
    if coords is not None:
        coords = np.asarray(coords, dtype=float)
        frame.insert(0, "y", coords[:, 1])
        frame.insert(0, "x", coords[:, 0])
    frame.insert(0, id_column, list(ids))
    return frame


def write_sites(path, sites: SiteSet) -> Path:
    return _write_frame(pd.DataFrame({"id": sites.ids, "x": sites.coords[:, 0], "y": sites.coords[:, 1]}), path)


def write_matrices(path, ids: Sequence[str], points, manifold: Manifold) -> Path:
    return _write_frame(matrices_frame(ids, points, manifold), path)


def write_points(path, points) -> Path:
    points = np.asarray(points, dtype=float)
    return _write_frame(pd.DataFrame({"x": points[:, 0], "y": points[:, 1]}), path)


def write_grid(path, grid: CDomainGrid) -> Path:
    return _write_frame(grid.to_frame(), path)


def write_subsamples(path, subsamples: Dict[int, np.ndarray], grid: CDomainGrid) -> Path:
    rows = [
        {"replicate": j, "index": int(i), "id": grid.ids[int(i)]}
        for j, indices in sorted(subsamples.items())
        for i in indices
    ]
    return _write_frame(pd.DataFrame(rows, columns=["replicate", "index", "id"]), path)


def write_predictions(path, result: PredictionResult, manifold: Manifold) -> Path:
    return _write_frame(
        matrices_frame(result.targets.ids, result.predictions, manifold, result.targets.coords, "target_id"), path
    )


def write_varsigma(path, result: PredictionResult) -> Path:
    targets = result.targets
    frame = pd.DataFrame(
        {
            "target_id": targets.ids,
            "x": targets.coords[:, 0],
            "y": targets.coords[:, 1],
            "varsigma2": result.varsigma2,
        }
    )
    return _write_frame(frame, path)


def write_iterations(path, result: PredictionResult, manifold: Manifold) -> Optional[Path]:
    """Per-iteration predictions in long form (one row per target and iteration)."""
    if result.iteration_predictions is None:
        logger.warning("⚠️  No per-iteration predictions were kept; skipping iteration dump")
        return None
    m, b = result.iteration_predictions.shape[:2]
    flat = result.iteration_predictions.reshape((m * b,) + manifold.point_shape)
    frame = pd.DataFrame(manifold.to_rows(flat), columns=manifold.column_names())
    frame.insert(0, "kriging_variance", result.iteration_kriging_variance.reshape(-1))
    frame.insert(0, "tile", result.iteration_tiles.reshape(-1).astype(int))
    frame.insert(0, "iteration", np.tile(np.arange(b), m))
    frame.insert(0, "target_id", np.repeat(np.asarray(result.targets.ids, dtype=object), b))
    return _write_frame(frame, path)


def ellipse_frame(ids: Sequence[str], coords, matrices, scale: float = 1.0) -> pd.DataFrame:
    """
    Plot-ready ellipses for 2x2 SPD matrices: semi-axes are ``scale`` times
    the square roots of the eigenvalues, ``angle`` (radians) is the
    direction of the major axis.
    """
    matrices = np.asarray(matrices, dtype=float)
    coords = np.asarray(coords, dtype=float)
    eigvals, eigvecs = np.linalg.eigh(matrices)
    major = eigvecs[..., :, 1]
    angle = np.arctan2(major[..., 1], major[..., 0])
    # fold into (-pi/2, pi/2] so the sign of the eigenvector does not matter
    angle = np.where(angle > np.pi / 2, angle - np.pi, angle)
    angle = np.where(angle <= -np.pi / 2, angle + np.pi, angle)
    return pd.DataFrame(
        {
            "id": list(ids),
            "x": coords[:, 0],
            "y": coords[:, 1],
            "semi_axis_major": scale * np.sqrt(np.maximum(eigvals[..., 1], 0.0)),
            "semi_axis_minor": scale * np.sqrt(np.maximum(eigvals[..., 0], 0.0)),
            "angle": angle,
        }
    )


def write_ellipses(path, ids: Sequence[str], coords, matrices, scale: float = 1.0) -> Path:
    return _write_frame(ellipse_frame(ids, coords, matrices, scale), path)


def write_variograms(path, frame: pd.DataFrame) -> Path:
    return _write_frame(frame, path)


def write_cv_summary(path, cv: CrossValidationResult) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(cv.to_dict(), f, indent=2)
    except OSError as e:
        raise OutputWriteError(f"Cannot write {path}: {e}", {"path": str(path), "errno": e.errno})
    return path


def read_cv_summary(path) -> Dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_mc_outputs(out_dir, result: MonteCarloResult) -> List[Path]:
    """Summary table (rows Mean/Median/SD, columns K), every metric in long form, the raw replicates and any SPE dumps."""
    out_dir = Path(out_dir)
    table = result.table()
    table.insert(0, "statistic", table.index)
    written = [
        _write_frame(table, out_dir / "mc_table.csv"),
        _write_frame(result.long_table(), out_dir / "mc_table_long.csv"),
        _write_frame(result.replicates, out_dir / "mc_replicates.csv"),
    ]
    for (j, k), spe in sorted(result.spe.items()):
        written.append(_write_frame(pd.DataFrame({"spe": spe}), out_dir / f"spe_replicate{j}_k{k}.csv"))
    return written

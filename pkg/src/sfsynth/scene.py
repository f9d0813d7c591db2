"""Physical setup: loudspeaker array, control/evaluation grids, primary source.

Scenes are stored as ``(num_points, 3)`` float arrays in meters. A scenario
file is YAML with the following layout (``format: 1``)::

    format: 1
    speed_of_sound: 343.0
    loudspeakers:                 # explicit list ...
      - [1.0, 0.25, 0.1]
    # ... or a generator
    # loudspeakers:
    #   ring_square: {side: 2.0, count: 16, z_levels: [0.1, -0.1], offset: 0.0}
    control_points:
      grid:
        origin: [-0.5, -0.5, -0.02]
        extent: [1.0, 1.0, 0.04]
        counts: [24, 24, 2]
        cell_centered: [true, true, false]
    eval_points: []               # same forms as control_points, optional
    desired: {kind: point_source, position: [2.0, 0.0, 0.0], gain: 1.0}
    solver: {rho: 1.0}            # optional solver defaults, see cli

Grid axes with ``cell_centered`` true place ``count`` points at the centers
of equal cells spanning ``[origin, origin + extent]``; otherwise the points
run from ``origin`` to ``origin + extent`` inclusive.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Mapping, NamedTuple

import numpy as np
import yaml
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import cdist

FORMAT_VERSION = 1
DEFAULT_SPEED_OF_SOUND = 343.0
MIN_SOURCE_DISTANCE = 1e-9
MIN_HULL_DISTANCE = 1e-6


class SceneError(ValueError):
    """Base class for scene problems."""


class SceneParseError(SceneError):
    """Scenario text does not follow the schema."""


class SceneValidationError(SceneError):
    """A scene violates one of its geometric invariants."""


class Point3(NamedTuple):
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class DesiredField:
    """Desired sound field, a monopole (point source) of given gain."""

    position: Point3
    gain: float = 1.0
    kind: str = "point_source"

    def __post_init__(self):
        if self.kind != "point_source":
            raise SceneValidationError(f"unsupported desired field kind {self.kind!r}")
        pos = Point3(*(float(c) for c in self.position))
        if not np.all(np.isfinite(pos)):
            raise SceneValidationError("desired source position must be finite")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "gain", float(self.gain))


def _points_array(points, name):
    arr = np.array(points, dtype=float)
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise SceneValidationError(f"{name} must have shape (n, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SceneValidationError(f"{name} contains non-finite coordinates")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Scene:
    """Immutable sound field synthesis setup.

    Parameters
    ----------
    loudspeakers : array_like of shape (L, 3)
    control_points : array_like of shape (N, 3)
    desired : DesiredField
    eval_points : array_like of shape (M, 3), optional
    speed_of_sound : float
    solver_defaults : mapping, optional
        Solver settings read from the scenario file; the CLI uses them when
        the corresponding flag is not given.
    """

    loudspeakers: np.ndarray
    control_points: np.ndarray
    desired: DesiredField
    eval_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    speed_of_sound: float = DEFAULT_SPEED_OF_SOUND
    solver_defaults: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "loudspeakers", _points_array(self.loudspeakers, "loudspeakers"))
        object.__setattr__(self, "control_points", _points_array(self.control_points, "control_points"))
        object.__setattr__(self, "eval_points", _points_array(self.eval_points, "eval_points"))
        object.__setattr__(self, "speed_of_sound", float(self.speed_of_sound))
        object.__setattr__(self, "solver_defaults", dict(self.solver_defaults))
        validate_scene(self)

    @property
    def num_loudspeakers(self) -> int:
        return self.loudspeakers.shape[0]

    @property
    def num_control_points(self) -> int:
        return self.control_points.shape[0]

    def points(self, target: str) -> np.ndarray:
        """Grid selected by ``target`` ("control" or "eval")."""
        if target in ("control", "control_points"):
            return self.control_points
        if target in ("eval", "eval_points"):
            return self.eval_points
        raise ValueError(f"unknown target grid {target!r}")

    def digest(self) -> str:
        """SHA-256 of the canonical serialization."""
        return hashlib.sha256(serialize_scene(self).encode()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            np.array_equal(self.loudspeakers, other.loudspeakers)
            and np.array_equal(self.control_points, other.control_points)
            and np.array_equal(self.eval_points, other.eval_points)
            and self.desired == other.desired
            and self.speed_of_sound == other.speed_of_sound
            and dict(self.solver_defaults) == dict(other.solver_defaults)
        )

    __hash__ = None


def _hull_margin(point, cloud):
    """Lower bound on the distance from ``point`` to the convex hull of ``cloud``.

    Returns a non-positive value when the point is inside (or on) the hull.
    Degenerate clouds are handled by projecting onto their affine span.
    """
    center = cloud.mean(axis=0)
    centered = cloud - center
    p = np.asarray(point, dtype=float) - center
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    scale = max(1.0, float(np.abs(centered).max(initial=0.0)))
    rank = int(np.sum(s > 1e-12 * scale * np.sqrt(len(cloud))))
    basis = vt[:rank]
    off_span = np.linalg.norm(p - basis.T @ (basis @ p)) if rank else np.linalg.norm(p)
    if off_span > MIN_HULL_DISTANCE or rank == 0:
        return off_span
    coords = centered @ basis.T
    q = basis @ p
    if rank == 1:
        lo, hi = coords[:, 0].min(), coords[:, 0].max()
        return max(lo - q[0], q[0] - hi)
    try:
        hull = ConvexHull(coords)
    except QhullError:
        return -np.inf
    return float(np.max(hull.equations[:, :-1] @ q + hull.equations[:, -1]))


def validate_scene(scene: Scene) -> None:
    """Check the geometric invariants of ``scene``.

    Raises
    ------
    SceneValidationError
        If a grid is empty, a loudspeaker coincides with a control or
        evaluation point, or the desired source is not clearly outside the
        convex hull of the control points.
    """
    if scene.num_loudspeakers < 1:
        raise SceneValidationError("scene needs at least one loudspeaker")
    if scene.num_control_points < 1:
        raise SceneValidationError("scene needs at least one control point")
    if not (np.isfinite(scene.speed_of_sound) and scene.speed_of_sound > 0):
        raise SceneValidationError("speed_of_sound must be positive")
    for name, pts in (("control point", scene.control_points), ("eval point", scene.eval_points)):
        if len(pts) == 0:
            continue
        dist = cdist(scene.loudspeakers, pts)
        bad = np.argwhere(dist <= MIN_SOURCE_DISTANCE)
        if len(bad):
            pairs = ", ".join(f"loudspeaker {l} / {name} {n}" for l, n in bad[:5])
            raise SceneValidationError(f"loudspeaker coincides with {name}: {pairs}")
    margin = _hull_margin(scene.desired.position, scene.control_points)
    if not margin >= MIN_HULL_DISTANCE:
        raise SceneValidationError(
            f"desired source {tuple(scene.desired.position)} lies within "
            f"{MIN_HULL_DISTANCE} m of the control-point convex hull"
        )


# ---------------------------------------------------------------- generators
def ring_square(side, count, z_levels, offset=0.0):
    """Loudspeakers on the border of an origin-centered square, one ring per height.

    ``count`` sources per ring sit at uniform arc-length spacing, running
    counter-clockwise from the corner ``(-side/2, -side/2)``. ``offset`` is the
    position of the first source in units of the spacing: 0 puts sources on
    the corners, 0.5 keeps every corner free.
    """
    side = float(side)
    count = int(count)
    offset = float(offset)
    if side <= 0 or count < 1:
        raise SceneValidationError("ring_square needs side > 0 and count >= 1")
    if not 0.0 <= offset < 1.0:
        raise SceneValidationError("ring_square offset must lie in [0, 1)")
    half = side / 2
    step = 4 * side / count
    corners = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
    directions = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    xy = np.empty((count, 2))
    for i in range(count):
        s = (i + offset) * step
        edge = min(int(s // side), 3)
        xy[i] = corners[edge] + directions[edge] * (s - edge * side)
    rings = [np.column_stack([xy, np.full(count, float(z))]) for z in z_levels]
    return np.concatenate(rings, axis=0)


def grid_points(origin, extent, counts, cell_centered=True):
    """Regular 3-D grid, x varying slowest. See the module docstring for the axis conventions."""
    origin = np.asarray(origin, dtype=float)
    extent = np.asarray(extent, dtype=float)
    counts = [int(c) for c in counts]
    if origin.shape != (3,) or extent.shape != (3,) or len(counts) != 3:
        raise SceneValidationError("grid origin, extent and counts need three entries each")
    if min(counts) < 1:
        raise SceneValidationError("grid counts must be >= 1")
    if isinstance(cell_centered, bool):
        cell_centered = [cell_centered] * 3
    axes = []
    for o, e, n, centered in zip(origin, extent, counts, cell_centered):
        if centered:
            axes.append(o + (np.arange(n) + 0.5) * (e / n))
        elif n == 1:
            axes.append(np.array([o]))
        else:
            axes.append(o + np.arange(n) * (e / (n - 1)))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


EXPERIMENT_LOUDSPEAKERS = {"side": 2.0, "count": 16, "z_levels": [0.1, -0.1], "offset": 0.0}
EXPERIMENT_CONTROL_GRID = {
    "origin": [-0.5, -0.5, -0.02],
    "extent": [1.0, 1.0, 0.04],
    "counts": [24, 24, 2],
    "cell_centered": [True, True, False],
}
EXPERIMENT_EVAL_GRID = {
    "origin": [-0.5, -0.5, 0.0],
    "extent": [1.0, 1.0, 0.0],
    "counts": [5, 5, 1],
    "cell_centered": [True, True, False],
}
EXPERIMENT_SOURCE = (2.0, 0.0, 0.0)


def build_experiment_scene() -> Scene:
    """Free-field experiment geometry: 32 loudspeakers, 1152 control points.

    Two rings of 16 loudspeakers on a 2 m square at z = +/-0.1 m, a 24x24x2
    control grid in the 1.0 x 1.0 x 0.04 m cuboid, a 5x5 evaluation grid at
    z = 0 and a point source at (2, 0, 0).
    """
    return Scene(
        loudspeakers=ring_square(**EXPERIMENT_LOUDSPEAKERS),
        control_points=grid_points(**EXPERIMENT_CONTROL_GRID),
        eval_points=grid_points(**EXPERIMENT_EVAL_GRID),
        desired=DesiredField(Point3(*EXPERIMENT_SOURCE)),
    )


def experiment_scene_config() -> str:
    """Scenario text that regenerates :func:`build_experiment_scene` via generators."""
    doc = {
        "format": FORMAT_VERSION,
        "speed_of_sound": DEFAULT_SPEED_OF_SOUND,
        "loudspeakers": {"ring_square": dict(EXPERIMENT_LOUDSPEAKERS)},
        "control_points": {"grid": dict(EXPERIMENT_CONTROL_GRID)},
        "eval_points": {"grid": dict(EXPERIMENT_EVAL_GRID)},
        "desired": {"kind": "point_source", "position": list(EXPERIMENT_SOURCE), "gain": 1.0},
    }
    return yaml.safe_dump(doc, sort_keys=False)


# ------------------------------------------------------------------- parsing
_TOP_KEYS = {"format", "speed_of_sound", "loudspeakers", "control_points",
             "eval_points", "desired", "solver"}


def _field_error(path, msg):
    return SceneParseError(f"{path}: {msg}")


def _require_keys(spec, required, optional, path):
    if not isinstance(spec, dict):
        raise _field_error(path, "expected a mapping")
    missing = [k for k in required if k not in spec]
    if missing:
        raise _field_error(path, f"missing key(s) {', '.join(missing)}")
    unknown = set(spec) - set(required) - set(optional)
    if unknown:
        raise _field_error(path, f"unknown key(s) {', '.join(sorted(unknown))}")


def _parse_vector(value, path, length=3):
    if not isinstance(value, (list, tuple)) or len(value) != length:
        raise _field_error(path, f"expected a list of {length} numbers")
    out = []
    for i, v in enumerate(value):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise _field_error(f"{path}[{i}]", f"expected a number, got {v!r}")
        out.append(float(v))
    return out


def _parse_point_set(value, path):
    if value is None:
        return np.zeros((0, 3))
    if isinstance(value, list):
        return np.array([_parse_vector(p, f"{path}[{i}]") for i, p in enumerate(value)]).reshape(-1, 3)
    if isinstance(value, dict) and len(value) == 1:
        (kind, spec), = value.items()
        gpath = f"{path}.{kind}"
        if kind == "ring_square":
            _require_keys(spec, ["side", "count", "z_levels"], ["offset"], gpath)
            if not isinstance(spec["z_levels"], list):
                raise _field_error(f"{gpath}.z_levels", "expected a list")
            z = _parse_vector(spec["z_levels"], f"{gpath}.z_levels", len(spec["z_levels"]))
            if not isinstance(spec["count"], int):
                raise _field_error(f"{gpath}.count", "expected an integer")
            offset = spec.get("offset", 0.0)
            if isinstance(offset, bool) or not isinstance(offset, (int, float)):
                raise _field_error(f"{gpath}.offset", "expected a number")
            return ring_square(spec["side"], spec["count"], z, offset)
        if kind == "grid":
            _require_keys(spec, ["origin", "extent", "counts"], ["cell_centered"], gpath)
            counts = spec["counts"]
            if not (isinstance(counts, list) and len(counts) == 3 and all(isinstance(c, int) for c in counts)):
                raise _field_error(f"{gpath}.counts", "expected three integers")
            centered = spec.get("cell_centered", True)
            if not (isinstance(centered, bool) or (isinstance(centered, list) and len(centered) == 3
                                                  and all(isinstance(c, bool) for c in centered))):
                raise _field_error(f"{gpath}.cell_centered", "expected a bool or three bools")
            return grid_points(_parse_vector(spec["origin"], f"{gpath}.origin"),
                               _parse_vector(spec["extent"], f"{gpath}.extent"), counts, centered)
        raise _field_error(path, f"unknown generator {kind!r}")
    raise _field_error(path, "expected a list of points or a generator mapping")


def parse_scene(config_text: str) -> Scene:
    """Parse and validate a scenario file.

    Raises
    ------
    SceneParseError
        Malformed YAML or schema violations; the message carries the line
        (for YAML errors) or the dotted field path.
    SceneValidationError
        The described geometry breaks a scene invariant.
    """
    try:
        doc = yaml.safe_load(config_text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}: " if mark else ""
        raise SceneParseError(f"{where}{getattr(exc, 'problem', exc)}") from exc
    if not isinstance(doc, dict):
        raise SceneParseError("top level must be a mapping")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise SceneParseError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    if doc.get("format") != FORMAT_VERSION:
        raise _field_error("format", f"expected {FORMAT_VERSION}, got {doc.get('format')!r}")
    for key in ("loudspeakers", "control_points", "desired"):
        if key not in doc:
            raise _field_error(key, "missing")

    desired = doc["desired"]
    _require_keys(desired, ["position"], ["kind", "gain"], "desired")
    kind = desired.get("kind", "point_source")
    if kind != "point_source":
        raise _field_error("desired.kind", f"unsupported kind {kind!r}")
    gain = desired.get("gain", 1.0)
    if isinstance(gain, bool) or not isinstance(gain, (int, float)):
        raise _field_error("desired.gain", "expected a number")

    c = doc.get("speed_of_sound", DEFAULT_SPEED_OF_SOUND)
    if isinstance(c, bool) or not isinstance(c, (int, float)):
        raise _field_error("speed_of_sound", "expected a number")
    solver = doc.get("solver") or {}
    if not isinstance(solver, dict):
        raise _field_error("solver", "expected a mapping")

    return Scene(
        loudspeakers=_parse_point_set(doc["loudspeakers"], "loudspeakers"),
        control_points=_parse_point_set(doc["control_points"], "control_points"),
        eval_points=_parse_point_set(doc.get("eval_points"), "eval_points"),
        desired=DesiredField(Point3(*_parse_vector(desired["position"], "desired.position")), gain),
        speed_of_sound=c,
        solver_defaults=solver,
    )


def serialize_scene(scene: Scene) -> str:
    """Scenario text with explicit coordinate lists; exact under :func:`parse_scene`."""
    doc = {
        "format": FORMAT_VERSION,
        "speed_of_sound": scene.speed_of_sound,
        "loudspeakers": scene.loudspeakers.tolist(),
        "control_points": scene.control_points.tolist(),
        "eval_points": scene.eval_points.tolist(),
        "desired": {
            "kind": scene.desired.kind,
            "position": list(scene.desired.position),
            "gain": scene.desired.gain,
        },
    }
    if scene.solver_defaults:
        doc["solver"] = dict(scene.solver_defaults)
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)


def load_scene(path) -> Scene:
    with open(path, encoding="utf-8") as fh:
        return parse_scene(fh.read())

"""Synthetic gland-like point sets with manufactured deformation fields.

Glands are ellipsoids. Surface points come from a rotated Fibonacci lattice,
internal points from rejection sampling. The upper part of the gland along
z is labelled rigid, the lower part soft. Targets are the source points
moved by an analytic displacement field, so the ground-truth displacement
and its gradient are known exactly everywhere.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import LandmarkPair, PointSet, deformation_magnitude

FIELD_TYPES = ("rigid", "affine", "probe-indentation", "uniform-strain")


class ScenarioError(ValueError):
    pass


# --- analytic fields -----------------------------------------------------------

def probe_indentation_field(point, amplitude: float, contact_center, falloff: float,
                            direction=None) -> np.ndarray:
    """Volume-preserving indentation with Gaussian falloff.

    ``d = A psi(r) [n + ((r.n) r - |r|^2 n) / f^2]`` with ``r = p - c`` and
    ``psi = exp(-|r|^2 / f^2)``. This is ``curl curl (psi n)`` rescaled, so
    ``div d = 0`` exactly and ``d(c) = A n``. ``n`` points from the contact
    into the gland (by default towards the origin). Accepts a single point
    or an (N, 3) array.
    """
    if not falloff > 0:
        raise ScenarioError("falloff must be positive")
    rel, n, psi = _probe_terms(point, contact_center, falloff, direction)
    s = rel @ n
    r2 = np.sum(rel * rel, axis=-1)
    bracket = n + (s[..., None] * rel - r2[..., None] * n) / falloff**2
    return amplitude * psi[..., None] * bracket


def probe_indentation_gradient(point, amplitude: float, contact_center, falloff: float,
                               direction=None) -> np.ndarray:
    """``[..., i, j] = d d_i / d p_j`` of :func:`probe_indentation_field`."""
    if not falloff > 0:
        raise ScenarioError("falloff must be positive")
    rel, n, psi = _probe_terms(point, contact_center, falloff, direction)
    f2 = falloff**2
    s = (rel @ n)[..., None, None]
    r2 = np.sum(rel * rel, axis=-1)[..., None, None]
    eye = np.eye(3)
    ri, rj = rel[..., :, None], rel[..., None, :]
    nn_i, nn_j = n[:, None], n[None, :]
    bracket_i = nn_i + (s * ri - r2 * nn_i) / f2
    d_bracket = (ri * nn_j + s * eye - 2.0 * nn_i * rj) / f2
    grad = bracket_i * (-2.0 * rj / f2) + d_bracket
    return amplitude * psi[..., None, None] * grad


def _probe_terms(point, contact_center, falloff, direction):
    p = np.asarray(point, dtype=np.float64)
    c = np.asarray(contact_center, dtype=np.float64)
    n = _push_direction(c, direction)
    rel = p - c
    psi = np.exp(-np.sum(rel * rel, axis=-1) / falloff**2)
    return rel, n, psi


def _push_direction(center, direction) -> np.ndarray:
    n = -np.asarray(center, dtype=np.float64) if direction is None else np.asarray(
        direction, dtype=np.float64)
    norm = np.linalg.norm(n)
    if norm == 0:
        raise ScenarioError("probe direction is undefined at the origin; give one explicitly")
    return n / norm


def rotation_matrix(angles_deg) -> np.ndarray:
    ax, ay, az = np.radians(np.asarray(angles_deg, dtype=np.float64))
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass(frozen=True)
class Field:
    """A displacement field ``d(p)`` with analytic gradient; ``scale`` multiplies it."""

    kind: str
    params: dict
    scale: float = 1.0

    def displacement(self, p) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        k, q = self.kind, self.params
        if k == "rigid":
            r = rotation_matrix(q.get("rotation_deg", (0, 0, 0)))
            return p @ r.T + np.asarray(q.get("translation", (0, 0, 0))) - p
        if k == "affine":
            return self.scale * (p @ np.asarray(q["matrix"], dtype=np.float64).T
                                 + np.asarray(q.get("translation", (0, 0, 0))))
        if k == "uniform-strain":
            return self.scale * (p @ np.asarray(q["gradient"], dtype=np.float64).T)
        if k == "probe-indentation":
            return probe_indentation_field(p, self.scale * q["amplitude"], q["contact_center"],
                                           q["falloff"], q.get("direction"))
        raise ScenarioError(f"unknown field type {k!r}")

    def gradient(self, p) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        k, q = self.kind, self.params
        n = len(p)
        if k == "rigid":
            r = rotation_matrix(q.get("rotation_deg", (0, 0, 0)))
            return np.broadcast_to(r - np.eye(3), (n, 3, 3)).copy()
        if k == "affine":
            return np.broadcast_to(self.scale * np.asarray(q["matrix"]), (n, 3, 3)).copy()
        if k == "uniform-strain":
            return np.broadcast_to(self.scale * np.asarray(q["gradient"]), (n, 3, 3)).copy()
        if k == "probe-indentation":
            return probe_indentation_gradient(p, self.scale * q["amplitude"],
                                              q["contact_center"], q["falloff"],
                                              q.get("direction"))
        raise ScenarioError(f"unknown field type {k!r}")


# --- scenarios -----------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    name: str = "custom"
    radii: tuple = (28.0, 24.0, 24.0)
    n_surface: int = 256
    n_internal: int = 256
    rigid_fraction: float = 2.0 / 3.0
    deformation: dict = field(default_factory=lambda: {"type": "rigid"})
    magnitude: float | None = None
    seed: int = 0

    def __post_init__(self):
        if len(self.radii) != 3 or min(self.radii) <= 0:
            raise ScenarioError("radii must be three positive semi-axes")
        if self.n_surface < 4 or self.n_internal < 4:
            raise ScenarioError("need at least 4 surface and 4 internal points")
        if not 0.0 < self.rigid_fraction < 1.0:
            raise ScenarioError("rigid_fraction must lie in (0, 1)")
        if self.deformation.get("type") not in FIELD_TYPES:
            raise ScenarioError(f"deformation type must be one of {FIELD_TYPES}")
        if self.deformation["type"] == "rigid" and self.magnitude:
            raise ScenarioError("a rigid field has zero deformation magnitude by definition")
        if self.magnitude is not None and self.magnitude < 0:
            raise ScenarioError("magnitude must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ScenarioError(f"unknown scenario keys: {sorted(extra)}")
        d = dict(d)
        if "radii" in d:
            d["radii"] = tuple(float(r) for r in d["radii"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ScenarioError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: malformed JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ScenarioError(f"{path}: scenario must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["radii"] = list(self.radii)
        return d


@dataclass
class GroundTruth:
    displacement_field: np.ndarray
    displacement_gradient: np.ndarray
    landmark_pairs: list[LandmarkPair]
    field: Field


def _fibonacci_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return pts @ q.T


def _inside(n: int, rng: np.random.Generator, shrink: float = 0.9) -> np.ndarray:
    out = np.empty((0, 3))
    while len(out) < n:
        cand = rng.uniform(-1.0, 1.0, size=(2 * n, 3))
        out = np.vstack([out, cand[np.sum(cand**2, axis=1) < shrink**2]])
    return out[:n]


def compartments_for(points, radii, rigid_fraction: float) -> np.ndarray:
    """Upper ``rigid_fraction`` of the gland height (z) is rigid, the rest soft."""
    c = radii[2]
    threshold = -c + (1.0 - rigid_fraction) * 2.0 * c
    return np.where(np.asarray(points)[:, 2] >= threshold, "rigid", "soft")


def _landmark_centres(radii, rng) -> list[tuple[str, np.ndarray]]:
    a, b, c = radii
    blobs = _inside(2, rng, shrink=0.5) * np.array([a, b, c])
    return [
        ("apex", np.array([0.0, 0.0, -0.7 * c])),
        ("base", np.array([0.0, 0.0, 0.7 * c])),
        ("blob1", blobs[0]),
        ("blob2", blobs[1]),
    ]


def _resolve_field(scenario: Scenario, source: np.ndarray) -> Field:
    params = dict(scenario.deformation)
    kind = params.pop("type")
    if kind == "probe-indentation":
        params.setdefault("amplitude", 1.0)
        params.setdefault("contact_center", [0.0, 0.0, -scenario.radii[2]])
        params.setdefault("falloff", 1.25 * float(scenario.radii[2]))
    fld = Field(kind, params)
    if scenario.magnitude is None or kind == "rigid":
        return fld
    return replace(fld, scale=_search_scale(fld, source, scenario.magnitude))


def _search_scale(fld: Field, source: np.ndarray, target_dm: float, tol: float = 1e-4) -> float:
    """Bisection on the field scale so the realised DM matches ``target_dm``."""
    def dm(scale):
        return deformation_magnitude(source, source + replace(fld, scale=scale).displacement(source))

    if target_dm == 0:
        return 0.0
    hi = 1.0
    while dm(hi) < target_dm:
        hi *= 2.0
        if hi > 1e6:
            raise ScenarioError("deformation magnitude is unattainable for this field")
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if dm(mid) < target_dm:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol * hi:
            break
    return 0.5 * (lo + hi)


def generate(scenario: Scenario) -> tuple[PointSet, PointSet, GroundTruth]:
    rng = np.random.default_rng(scenario.seed)
    radii = np.asarray(scenario.radii)
    surface = _fibonacci_sphere(scenario.n_surface, rng) * radii
    internal = _inside(scenario.n_internal, rng) * radii
    pts = np.vstack([surface, internal])
    region = np.array(["surface"] * len(surface) + ["internal"] * len(internal))
    compartment = compartments_for(pts, radii, scenario.rigid_fraction)
    centres = _landmark_centres(radii, rng)
    clusters = [(name, c + rng.normal(scale=1.0, size=(8, 3))) for name, c in centres]

    fld = _resolve_field(scenario, pts)
    disp = fld.displacement(pts)
    source = PointSet(pts, region, compartment, f"{scenario.name}-source")
    target = PointSet(pts + disp, region, compartment, f"{scenario.name}-target")
    landmarks = [LandmarkPair(name, cl, cl + fld.displacement(cl)) for name, cl in clusters]
    truth = GroundTruth(disp, fld.gradient(pts), landmarks, fld)
    return source, target, truth


# --- presets -------------------------------------------------------------------

def preset(name: str, seed: int | None = None, **overrides) -> Scenario:
    """Named scenarios S1..S5 used by the experiments.

    S2 is the two-compartment probe-indentation case (DM 6 mm, seed 7).
    """
    presets = {
        "S1": dict(deformation={"type": "uniform-strain",
                                "gradient": [[0.04, 0.01, 0.0], [0.01, -0.02, 0.0],
                                             [0.0, 0.0, -0.02]]},
                   magnitude=3.0, seed=1),
        "S2": dict(deformation={"type": "probe-indentation"}, magnitude=6.0, seed=7),
        "S3": dict(deformation={"type": "probe-indentation",
                                "contact_center": [12.0, 0.0, -21.0],
                                "falloff": 30.0},
                   magnitude=5.0, seed=3),
        "S4": dict(deformation={"type": "affine",
                                "matrix": [[0.0, 0.0, 0.06], [0.0, 0.03, 0.0],
                                           [0.02, 0.0, -0.05]],
                                "translation": [1.0, -2.0, 0.5]},
                   magnitude=4.0, seed=4),
        "S5": dict(deformation={"type": "probe-indentation", "falloff": 34.0},
                   magnitude=7.0, seed=5),
    }
    if name not in presets:
        raise ScenarioError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    kw = dict(presets[name], name=name)
    if seed is not None:
        kw["seed"] = seed
    kw.update(overrides)
    return Scenario(**kw)


def population(n_subjects: int, seed: int = 0, magnitude: float = 6.0,
               n_surface: int = 128, n_internal: int = 128) -> list[Scenario]:
    """Probe-indentation subjects with jittered anatomy, contact and magnitude."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_subjects):
        radii = np.array([28.0, 24.0, 24.0]) * rng.uniform(0.9, 1.1, size=3)
        contact = np.array([rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), -radii[2]])
        out.append(Scenario(
            name=f"P{seed}-{k}", radii=tuple(float(r) for r in radii),
            n_surface=n_surface, n_internal=n_internal,
            deformation={"type": "probe-indentation", "contact_center": contact.tolist(),
                         "direction": [0.0, 0.0, 1.0], "falloff": 1.25 * float(radii[2])},
            magnitude=float(magnitude * rng.uniform(0.9, 1.1)),
            seed=int(rng.integers(0, 2**31 - 1))))
    return out

"""Point-set data model and its CSV formats."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

REGIONS = ("surface", "internal")
COMPARTMENTS = ("rigid", "soft")


class GeometryError(ValueError):
    """Invalid or degenerate geometric input."""


def fmt(x: float) -> str:
    """Fixed 17-significant-digit rendering used by every numeric file."""
    return format(float(x), ".17g")


@dataclass
class PointSet:
    """Labelled 3D point cloud (mm)."""

    points: np.ndarray
    region: np.ndarray
    compartment: np.ndarray
    subject_id: str = ""

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise GeometryError(f"points must be (N, 3), got {self.points.shape}")
        n = len(self.points)
        self.region = np.asarray(self.region, dtype="<U8")
        self.compartment = np.asarray(self.compartment, dtype="<U8")
        if self.region.shape != (n,) or self.compartment.shape != (n,):
            raise GeometryError("every point needs exactly one region and one compartment label")
        if not np.isin(self.region, REGIONS).all():
            raise GeometryError(f"region labels must be in {REGIONS}")
        if not np.isin(self.compartment, COMPARTMENTS).all():
            raise GeometryError(f"compartment labels must be in {COMPARTMENTS}")
        if n < 4:
            raise GeometryError("a point set needs at least 4 points")
        centred = self.points - self.points.mean(axis=0)
        sv = np.linalg.svd(centred, compute_uv=False)
        if sv[-1] <= 1e-9 * max(sv[0], 1e-300):
            raise GeometryError("points are coplanar")

    @classmethod
    def unlabeled(cls, points, subject_id: str = "") -> "PointSet":
        n = len(points)
        return cls(points, np.full(n, "surface"), np.full(n, "rigid"), subject_id)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def surface(self) -> np.ndarray:
        return self.region == "surface"

    @property
    def internal(self) -> np.ndarray:
        return self.region == "internal"

    @property
    def rigid(self) -> np.ndarray:
        return self.compartment == "rigid"

    @property
    def soft(self) -> np.ndarray:
        return self.compartment == "soft"

    def with_points(self, points) -> "PointSet":
        return PointSet(points, self.region.copy(), self.compartment.copy(), self.subject_id)

    def permuted(self, order) -> "PointSet":
        order = np.asarray(order)
        return PointSet(self.points[order], self.region[order], self.compartment[order],
                        self.subject_id)


@dataclass
class LandmarkPair:
    name: str
    source_cluster: np.ndarray
    target_cluster: np.ndarray

    def __post_init__(self):
        self.source_cluster = np.atleast_2d(np.asarray(self.source_cluster, dtype=np.float64))
        self.target_cluster = np.atleast_2d(np.asarray(self.target_cluster, dtype=np.float64))
        if len(self.source_cluster) == 0 or len(self.target_cluster) == 0:
            raise GeometryError(f"landmark {self.name!r} has an empty cluster")


@dataclass
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation


# --- CSV formats -------------------------------------------------------------

def write_pointset(path, ps: PointSet) -> None:
    lines = ["x,y,z,region,compartment"]
    for p, r, c in zip(ps.points, ps.region, ps.compartment):
        lines.append(f"{fmt(p[0])},{fmt(p[1])},{fmt(p[2])},{r},{c}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_pointset(path, subject_id: str | None = None) -> PointSet:
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.DictReader(io.StringIO(text)))
    need = {"x", "y", "z", "region", "compartment"}
    if not rows or not need.issubset(rows[0]):
        raise GeometryError(f"{path}: expected header x,y,z,region,compartment")
    try:
        pts = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows])
    except (TypeError, ValueError) as exc:
        raise GeometryError(f"{path}: bad coordinate ({exc})") from None
    return PointSet(pts, [r["region"] for r in rows], [r["compartment"] for r in rows],
                    subject_id if subject_id is not None else Path(path).stem)


def write_landmarks(path, pairs: list[LandmarkPair]) -> None:
    lines = ["landmark_name,side,x,y,z"]
    for pair in pairs:
        for side, cluster in (("source", pair.source_cluster), ("target", pair.target_cluster)):
            for p in cluster:
                lines.append(f"{pair.name},{side},{fmt(p[0])},{fmt(p[1])},{fmt(p[2])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_landmarks(path) -> list[LandmarkPair]:
    text = Path(path).read_text(encoding="utf-8")
    clusters: dict[str, dict[str, list]] = {}
    for r in csv.DictReader(io.StringIO(text)):
        side = r.get("side")
        if side not in ("source", "target"):
            raise GeometryError(f"{path}: side must be source or target, got {side!r}")
        entry = clusters.setdefault(r["landmark_name"], {"source": [], "target": []})
        entry[side].append([float(r["x"]), float(r["y"]), float(r["z"])])
    if not clusters:
        raise GeometryError(f"{path}: no landmarks")
    return [LandmarkPair(name, np.array(c["source"]), np.array(c["target"]))
            for name, c in clusters.items()]


def write_vectors(path, points, vectors, header=("x", "y", "z", "dx", "dy", "dz")) -> None:
    lines = [",".join(header)]
    for p, d in zip(points, vectors):
        lines.append(",".join(fmt(v) for v in (*p, *d)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_vectors(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an ``x,y,z,dx,dy,dz`` file; returns (points, displacements)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 6:
        raise GeometryError(f"{path}: expected 6 columns")
    return data[:, :3].copy(), data[:, 3:].copy()

"""PointNet-style registration network with a displacement head and a stress head.

Data flow for a source/target pair::

    source, target --(centre on source centroid, / coord_scale)--> q_S, q_T
    q -> TNet(4x4) -> transformed xyz -> shared MLP -> max pool -> phi (1024)
    [phi(S) | phi(T) | q_s]  (2051 wide, per source point)
        -> MLP(1024, 512, 256, 128, 64) (ReLU) -> MLP(256) (linear)
        -> MLP(3) displacement head, 6 x MLP(1) stress heads

Spatial derivatives of both heads come from forward Jacobian propagation
through the per-point coordinate channel only; the pooled features are held
fixed for that purpose. Displacements are returned in mm and stresses in
kPa, with the Jacobians rescaled to physical units.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DualBatch, Tensor

CHECKPOINT_FORMAT = "elastoreg-model"
CHECKPOINT_VERSION = 1
_TNET_IDENTITY = np.array([1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0], dtype=np.float64)


class CheckpointVersionError(RuntimeError):
    pass


_TRUNK_ACT = {"relu": (ad.relu, ad.dual_relu), "tanh": (ad.tanh, ad.dual_tanh)}


@dataclass(frozen=True)
class Arch:
    tnet_point: tuple = (64, 128, 1024)
    tnet_fc: tuple = (512, 256)
    encoder: tuple = (64, 64, 64, 128, 1024)
    trunk: tuple = (1024, 512, 256, 128, 64)
    hidden: int = 256
    coord_scale_mm: float = 100.0
    stress_scale_kpa: float = 1.0
    concat_transformed_coords: bool = False
    trunk_activation: str = "relu"

    def __post_init__(self):
        if self.trunk_activation not in _TRUNK_ACT:
            raise ValueError(f"trunk_activation must be one of {sorted(_TRUNK_ACT)}")

    @property
    def global_width(self) -> int:
        return self.encoder[-1]

    @property
    def trunk_input_width(self) -> int:
        return 2 * self.global_width + 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Arch":
        d = dict(d)
        for key in ("tnet_point", "tnet_fc", "encoder", "trunk"):
            if key in d:
                d[key] = tuple(int(v) for v in d[key])
        return cls(**d)


def _layer_shapes(arch: Arch) -> list[tuple[str, int, int]]:
    """(slot prefix, fan_out, fan_in) for every affine layer, in init order."""
    shapes = []
    width = 4
    for i, w in enumerate(arch.tnet_point):
        shapes.append((f"tnet.conv{i}", w, width))
        width = w
    for i, w in enumerate(arch.tnet_fc):
        shapes.append((f"tnet.fc{i}", w, width))
        width = w
    shapes.append(("tnet.out", 12, width))
    width = 3
    for i, w in enumerate(arch.encoder):
        shapes.append((f"encoder.conv{i}", w, width))
        width = w
    width = arch.trunk_input_width
    for i, w in enumerate(arch.trunk):
        shapes.append((f"trunk.{i}", w, width))
        width = w
    shapes.append(("hidden", arch.hidden, width))
    shapes.append(("disp_head", 3, arch.hidden))
    for k in range(6):
        shapes.append((f"stress_head.{k}", 1, arch.hidden))
    return shapes


@dataclass
class RegModel:
    arch: Arch
    seed: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self) -> dict[str, Tensor]:
        return {name: ad.parameter(p, name) for name, p in self.params.items()}

    def copy(self) -> "RegModel":
        return RegModel(self.arch, self.seed, {k: v.copy() for k, v in self.params.items()})

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def init_model(seed: int = 0, arch: Arch | None = None, zero_heads: bool = False) -> RegModel:
    """Seeded uniform(+-1/sqrt(fan_in)) initialisation.

    The TNet output layer starts at zero weights with an identity bias, so a
    fresh model applies the identity transform.
    """
    arch = arch or Arch()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for prefix, fan_out, fan_in in _layer_shapes(arch):
        bound = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        if prefix == "tnet.out":
            w[:] = 0.0
            b = _TNET_IDENTITY.copy()
        elif zero_heads and prefix.startswith(("disp_head", "stress_head")):
            w[:] = 0.0
            b[:] = 0.0
        params[f"{prefix}.weight"] = w
        params[f"{prefix}.bias"] = b
    return RegModel(arch, seed, params)


# --- forward pieces ----------------------------------------------------------

def _tnet(p: dict[str, Tensor], arch: Arch, q: Tensor) -> Tensor:
    """4x4 homogeneous transform predicted from a cloud (bottom row fixed)."""
    n = q.shape[0]
    h = ad.concat([q, np.ones((n, 1))], axis=1)
    for i in range(len(arch.tnet_point)):
        h = ad.relu(ad.linear(h, p[f"tnet.conv{i}.weight"], p[f"tnet.conv{i}.bias"]))
    h = ad.max_pool(h).reshape(1, -1)
    for i in range(len(arch.tnet_fc)):
        h = ad.relu(ad.linear(h, p[f"tnet.fc{i}.weight"], p[f"tnet.fc{i}.bias"]))
    top = ad.linear(h, p["tnet.out.weight"], p["tnet.out.bias"]).reshape(3, 4)
    return ad.concat([top, np.array([[0.0, 0.0, 0.0, 1.0]])], axis=0)


def _apply_transform(q: Tensor, transform: Tensor) -> Tensor:
    rot = transform[:3, :3]
    return q @ rot.T + transform[:3, 3]


def _encode(p: dict[str, Tensor], arch: Arch, q: Tensor) -> tuple[Tensor, Tensor]:
    transform = _tnet(p, arch, q)
    h = _apply_transform(q, transform)
    last = len(arch.encoder) - 1
    for i in range(len(arch.encoder)):
        h = ad.linear(h, p[f"encoder.conv{i}.weight"], p[f"encoder.conv{i}.bias"])
        if i < last:
            h = ad.relu(h)
    return ad.max_pool(h).reshape(1, -1), transform


def tnet4(model: RegModel, coords) -> np.ndarray:
    """4x4 transform the model predicts for (normalised) coordinates."""
    with ad.no_tape():
        return _tnet(model.tensors(), model.arch, ad.as_tensor(coords)).data.copy()


def per_point_features(model: RegModel, coords) -> np.ndarray:
    """Encoder features before pooling, shape (N, global_width)."""
    p, arch = model.tensors(), model.arch
    with ad.no_tape():
        q = ad.as_tensor(coords)
        h = _apply_transform(q, _tnet(p, arch, q))
        for i in range(len(arch.encoder)):
            h = ad.linear(h, p[f"encoder.conv{i}.weight"], p[f"encoder.conv{i}.bias"])
            if i < len(arch.encoder) - 1:
                h = ad.relu(h)
        return h.data.copy()


def encode(model: RegModel, coords) -> np.ndarray:
    """Permutation-invariant global feature of a (normalised) cloud."""
    with ad.no_tape():
        g, _ = _encode(model.tensors(), model.arch, ad.as_tensor(coords))
    return g.data[0].copy()


@dataclass
class HeadOutput:
    """Network outputs row-aligned with the query points.

    ``disp_grad[n, i, j] = d d_i / d p_j`` (dimensionless) and
    ``stress_grad[n, v, j] = d sigma_v / d p_j`` (kPa/mm) when requested.
    """

    displacements: Tensor
    stresses: Tensor
    disp_grad: Tensor | None = None
    stress_grad: Tensor | None = None

    @property
    def has_gradients(self) -> bool:
        return self.disp_grad is not None and self.stress_grad is not None

    def numpy(self) -> dict[str, np.ndarray | None]:
        return {
            "displacements": self.displacements.data,
            "stresses": self.stresses.data,
            "disp_grad": None if self.disp_grad is None else self.disp_grad.data,
            "stress_grad": None if self.stress_grad is None else self.stress_grad.data,
        }


def _coords_of(x) -> np.ndarray:
    pts = getattr(x, "points", x)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ad.StructuralError(f"expected a non-empty (N, 3) cloud, got {pts.shape}")
    return pts


def predict(model: RegModel, source, target, want_gradients: bool = True,
            query=None, params: dict[str, Tensor] | None = None) -> HeadOutput:
    """Run the network on a pair.

    ``query`` (default: the source points) selects where the heads are
    evaluated; the global features always come from the full clouds.
    Pass ``params`` to reuse taped parameter tensors for backpropagation.
    """
    arch = model.arch
    p = params if params is not None else model.tensors()
    src, tgt = _coords_of(source), _coords_of(target)
    qry = src if query is None else _coords_of(query)
    centre = src.mean(axis=0)
    scale = arch.coord_scale_mm
    q_s = Tensor((src - centre) / scale)
    q_t = Tensor((tgt - centre) / scale)
    q_pts = q_s if query is None else Tensor((qry - centre) / scale)

    g_s, t_s = _encode(p, arch, q_s)
    g_t, _ = _encode(p, arch, q_t)
    g = ad.concat([g_s, g_t], axis=1)
    gw = 2 * arch.global_width
    w1 = p["trunk.0.weight"]
    if w1.shape[1] != gw + 3:
        raise ad.StructuralError(f"trunk input width {w1.shape[1]} != {gw + 3}")
    global_part = ad.linear(g, w1[:, :gw], p["trunk.0.bias"])
    w_coords = w1[:, gw:]
    stress_w = ad.concat([p[f"stress_head.{k}.weight"] for k in range(6)], axis=0)
    stress_b = ad.concat([p[f"stress_head.{k}.bias"] for k in range(6)], axis=0)
    n_trunk = len(arch.trunk)
    act, dual_act = _TRUNK_ACT[arch.trunk_activation]

    if want_gradients:
        h = DualBatch.from_points(q_pts)
        if arch.concat_transformed_coords:
            h = ad.dual_linear(h, t_s[:3, :3], t_s[:3, 3])
        h = dual_act(ad.dual_add_const(ad.dual_linear(h, w_coords), global_part))
        for i in range(1, n_trunk):
            h = dual_act(ad.dual_linear(h, p[f"trunk.{i}.weight"], p[f"trunk.{i}.bias"]))
        h = ad.dual_linear(h, p["hidden.weight"], p["hidden.bias"])
        disp = ad.dual_linear(h, p["disp_head.weight"], p["disp_head.bias"])
        stress = ad.dual_linear(h, stress_w, stress_b)
        # tangent slot k holds d(out)/d q_k; q = p / scale
        disp_grad = ad.permute(disp.jacobian_tensor(), (1, 2, 0))
        stress_grad = ad.permute(stress.jacobian_tensor(), (1, 2, 0)) * (
            arch.stress_scale_kpa / scale)
        return HeadOutput(disp.values * scale, stress.values * arch.stress_scale_kpa,
                          disp_grad, stress_grad)

    x = q_pts
    if arch.concat_transformed_coords:
        x = _apply_transform(x, t_s)
    h = act(ad.matmul(x, w_coords.T) + global_part)
    for i in range(1, n_trunk):
        h = act(ad.linear(h, p[f"trunk.{i}.weight"], p[f"trunk.{i}.bias"]))
    h = ad.linear(h, p["hidden.weight"], p["hidden.bias"])
    disp = ad.linear(h, p["disp_head.weight"], p["disp_head.bias"])
    stress = ad.linear(h, stress_w, stress_b)
    return HeadOutput(disp * scale, stress * arch.stress_scale_kpa)


def displacement_at(model: RegModel, source, target, points) -> np.ndarray:
    """Predicted displacement (mm) at arbitrary points, e.g. landmark clusters."""
    with ad.no_tape():
        out = predict(model, source, target, want_gradients=False, query=points)
    return out.displacements.data.copy()


# --- checkpoints ---------------------------------------------------------------

def _arrays_to_json(arrays: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in arrays.items()}


def _arrays_from_json(d: dict) -> dict[str, np.ndarray]:
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}


def save_model(model: RegModel, path, optimizer_state: dict | None = None,
               extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": model.arch.to_dict(),
        "seed": model.seed,
        "params": _arrays_to_json(model.params),
    }
    if optimizer_state is not None:
        state = {k: v for k, v in optimizer_state.items() if not isinstance(v, dict)}
        for key, val in optimizer_state.items():
            if isinstance(val, dict):
                state[key] = _arrays_to_json(val)
        doc["optimizer"] = state
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointVersionError(f"{path}: not an elastoreg model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {doc.get('version')} is not supported "
            f"(expected {CHECKPOINT_VERSION})")
    model = RegModel(Arch.from_dict(doc["arch"]), int(doc["seed"]),
                     _arrays_from_json(doc["params"]))
    expected = {f"{prefix}.{kind}" for prefix, _, _ in _layer_shapes(model.arch)
                for kind in ("weight", "bias")}
    if set(model.params) != expected:
        raise CheckpointVersionError(f"{path}: parameter slots do not match the architecture")
    opt = doc.get("optimizer")
    if opt is not None:
        opt = {k: (_arrays_from_json(v) if isinstance(v, dict) else v) for k, v in opt.items()}
    return {"model": model, "optimizer": opt, "extra": doc.get("extra", {})}


def load_model(path) -> RegModel:
    return load_checkpoint(path)["model"]

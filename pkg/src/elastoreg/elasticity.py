"""Linear elasticity in Voigt notation and the three PDE residual densities.

Units: mm for lengths, kPa for moduli and stress. Voigt ordering is
``(xx, yy, zz, xy, xz, yz)`` and shear strains are stored as tensor
components (not engineering strains).

The residual functions only use ``@``, elementwise arithmetic, ``abs``,
``reshape`` and ``sum``, so they accept numpy arrays as well as
:class:`elastoreg.autodiff.Tensor` inputs (for the training loss).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VOIGT = ("xx", "yy", "zz", "xy", "xz", "yz")
_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


class IncompressibleError(ValueError):
    """Poisson ratio at or beyond the incompressible limit 0.5."""


def _strain_matrix() -> np.ndarray:
    # flat displacement gradient (index 3*i + j) -> Voigt strain
    s = np.zeros((9, 6))
    for v, (i, j) in enumerate(_PAIRS):
        s[3 * i + j, v] += 0.5
        s[3 * j + i, v] += 0.5
    return s


def _divergence_matrix() -> np.ndarray:
    # flat stress gradient (index 3*v + j, v Voigt, j direction) -> div sigma
    voigt_of = {}
    for v, (i, j) in enumerate(_PAIRS):
        voigt_of[(i, j)] = voigt_of[(j, i)] = v
    d = np.zeros((18, 3))
    for i in range(3):
        for j in range(3):
            d[3 * voigt_of[(j, i)] + j, i] = 1.0
    return d


STRAIN_FROM_GRAD = _strain_matrix()
DIVERGENCE = _divergence_matrix()
TRACE = np.array([[1.0], [1.0], [1.0], [0.0], [0.0], [0.0]])
NORMAL_MASK = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
ENERGY_WEIGHTS = 0.5 * np.array([1.0, 1.0, 1.0, 2.0, 2.0, 2.0])


@dataclass(frozen=True)
class VoigtTensor6:
    components: np.ndarray
    kind: str = "strain"

    def __post_init__(self):
        object.__setattr__(self, "components", np.asarray(self.components, dtype=np.float64))
        if self.components.shape[-1] != 6:
            raise ValueError("Voigt tensors have 6 components")
        if self.kind not in ("strain", "stress"):
            raise ValueError(f"kind must be strain or stress, got {self.kind!r}")

    def __array__(self, dtype=None, copy=None):
        return self.components if dtype is None else self.components.astype(dtype)

    def matrix(self) -> np.ndarray:
        c = self.components
        m = np.empty(c.shape[:-1] + (3, 3))
        for v, (i, j) in enumerate(_PAIRS):
            m[..., i, j] = m[..., j, i] = c[..., v]
        return m

    @classmethod
    def from_matrix(cls, m, kind: str = "strain") -> "VoigtTensor6":
        m = np.asarray(m, dtype=np.float64)
        return cls(np.stack([m[..., i, j] for i, j in _PAIRS], axis=-1), kind)


def _raw(x, kind: str | None = None):
    if isinstance(x, VoigtTensor6):
        if kind is not None and x.kind != kind:
            raise ValueError(f"expected a {kind} tensor, got {x.kind}")
        return x.components
    return x


def lame_from_E_nu(E: float, nu: float) -> tuple[float, float]:
    """Lame parameters (lambda, mu) from Young's modulus and Poisson ratio."""
    if not E > 0:
        raise ValueError(f"Young's modulus must be positive, got {E}")
    if nu >= 0.5:
        raise IncompressibleError(f"Poisson ratio {nu} reaches the incompressible limit")
    if not nu > 0:
        raise ValueError(f"Poisson ratio must be in (0, 0.5), got {nu}")
    lam = E * nu / ((1.0 - 2.0 * nu) * (1.0 + nu))
    mu = E / (2.0 * (1.0 + nu))
    return lam, mu


def strain_from_grad(disp_grad):
    """Small strain from displacement gradients ``[..., i, j] = d d_i / d p_j``."""
    shape = disp_grad.shape
    flat = disp_grad.reshape(tuple(shape[:-2]) + (9,))
    eps = flat @ STRAIN_FROM_GRAD
    if isinstance(disp_grad, np.ndarray):
        if not np.all(np.isfinite(disp_grad)):
            raise ValueError("non-finite displacement gradient")
        return VoigtTensor6(eps, "strain") if len(shape) == 2 else eps
    return eps


def _material_columns(lam, mu):
    lam = np.asarray(lam, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if lam.ndim == 1:
        lam = lam[:, None]
    if mu.ndim == 1:
        mu = mu[:, None]
    return lam, mu


def hooke(strain, lam, mu):
    """Stress predicted by the isotropic constitutive law."""
    lam, mu = _material_columns(lam, mu)
    eps = strain
    tr = eps @ TRACE
    if isinstance(eps, np.ndarray) and eps.ndim == 1:
        tr = tr[0]
    return tr * (lam * NORMAL_MASK) + eps * (2.0 * mu)


def constitutive_stress(strain, lam, mu):
    eps = _raw(strain, "strain")
    sigma = hooke(eps, lam, mu)
    if isinstance(strain, VoigtTensor6):
        return VoigtTensor6(sigma, "stress")
    return sigma


def f1_equilibrium(stress_grad):
    """Sum of |div sigma| components; ``stress_grad[..., v, j] = d sigma_v / d p_j``."""
    shape = stress_grad.shape
    flat = stress_grad.reshape(tuple(shape[:-2]) + (18,))
    return abs(flat @ DIVERGENCE).sum(axis=-1)


def f2_constitutive(strain, stress, lam, mu):
    """Sum of absolute differences between Hooke stress and ``stress``."""
    eps, sigma = _raw(strain, "strain"), _raw(stress, "stress")
    return abs(hooke(eps, lam, mu) - sigma).sum(axis=-1)


def f3_energy(strain, stress):
    """Elastic energy density 0.5 * eps_ij sigma_ij (shear terms counted twice)."""
    eps, sigma = _raw(strain, "strain"), _raw(stress, "stress")
    prod = eps * sigma
    if isinstance(prod, np.ndarray) and prod.ndim == 1:
        return float(prod @ ENERGY_WEIGHTS)
    return prod @ ENERGY_WEIGHTS


@dataclass(frozen=True)
class MaterialConfig:
    E_rigid_kPa: float = 500.0
    E_soft_kPa: float = 5.0
    nu: float = 0.49

    @classmethod
    def from_dict(cls, d: dict) -> "MaterialConfig":
        known = {"E_rigid_kPa", "E_soft_kPa", "nu"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown material keys: {sorted(extra)}")
        cfg = cls(**{k: float(v) for k, v in d.items()})
        lame_from_E_nu(cfg.E_rigid_kPa, cfg.nu)
        lame_from_E_nu(cfg.E_soft_kPa, cfg.nu)
        return cfg

    @classmethod
    def load(cls, path) -> "MaterialConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"E_rigid_kPa": self.E_rigid_kPa, "E_soft_kPa": self.E_soft_kPa, "nu": self.nu}


@dataclass(frozen=True)
class MaterialField:
    """Piecewise-constant per-point material."""

    young_modulus: np.ndarray
    poisson_ratio: np.ndarray

    def __post_init__(self):
        E = np.asarray(self.young_modulus, dtype=np.float64)
        nu = np.asarray(self.poisson_ratio, dtype=np.float64)
        if np.any(E <= 0):
            raise ValueError("Young's modulus must be positive")
        if np.any(nu >= 0.5):
            raise IncompressibleError("Poisson ratio reaches the incompressible limit")
        if np.any(nu <= 0):
            raise ValueError("Poisson ratio must be in (0, 0.5)")
        object.__setattr__(self, "young_modulus", E)
        object.__setattr__(self, "poisson_ratio", nu)

    @classmethod
    def from_compartments(cls, compartment, config: MaterialConfig) -> "MaterialField":
        rigid = np.asarray(compartment) == "rigid"
        E = np.where(rigid, config.E_rigid_kPa, config.E_soft_kPa)
        return cls(E, np.full(len(E), config.nu))

    @property
    def lame_lambda(self) -> np.ndarray:
        nu, E = self.poisson_ratio, self.young_modulus
        return E * nu / ((1.0 - 2.0 * nu) * (1.0 + nu))

    @property
    def lame_mu(self) -> np.ndarray:
        return self.young_modulus / (2.0 * (1.0 + self.poisson_ratio))

"""Loss assembly, patient-specific and population training, and inference."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import elasticity as el
from .geometry import (LandmarkPair, PointSet, chamfer_distance_metric, chamfer_loss,
                       deformation_magnitude, nearest_neighbors, rmse, tre)
from .network import Arch, HeadOutput, RegModel, init_model, predict
from .optim import make_optimizer

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NumericalError(FloatingPointError):
    def __init__(self, step: int, terms: dict):
        super().__init__(f"non-finite loss at step {step}: {terms}")
        self.step = step
        self.terms = terms


@dataclass(frozen=True)
class TrainConfig:
    weight_w: float = 1e3
    pde_weights: tuple = (1.0, 1.0, 1.0)
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    steps: int = 3000
    epochs: int = 200
    batch_subjects: int = 1
    seed: int = 0
    chamfer_subset: str = "all"
    material: el.MaterialConfig = field(default_factory=el.MaterialConfig)
    supervised: bool = False
    zero_init_heads: bool = True
    arch: Arch = field(default_factory=Arch)
    workers: int = 1

    def __post_init__(self):
        if not self.weight_w > 0:
            raise ConfigError("weight_w must be positive")
        if self.steps < 1 or self.epochs < 1:
            raise ConfigError("steps and epochs must be at least 1")
        if self.batch_subjects < 1:
            raise ConfigError("batch_subjects must be at least 1")
        if self.chamfer_subset not in ("all", "surface"):
            raise ConfigError("chamfer_subset must be 'all' or 'surface'")
        if len(self.pde_weights) != 3 or min(self.pde_weights) < 0:
            raise ConfigError("pde_weights must be three non-negative numbers")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")

    @property
    def physics(self) -> bool:
        return any(w > 0 for w in self.pde_weights)

    def without_physics(self) -> "TrainConfig":
        return replace(self, pde_weights=(0.0, 0.0, 0.0))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pde_weights"] = list(self.pde_weights)
        d["material"] = self.material.to_dict()
        d["arch"] = self.arch.to_dict()
        for key in ("tnet_point", "tnet_fc", "encoder", "trunk"):
            d["arch"][key] = list(d["arch"][key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            if "material" in d:
                d["material"] = el.MaterialConfig.from_dict(d["material"])
            if "arch" in d:
                d["arch"] = Arch.from_dict(d["arch"])
            if "pde_weights" in d:
                d["pde_weights"] = tuple(float(w) for w in d["pde_weights"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)


@dataclass
class LossBreakdown:
    """The four loss terms and their weighted total.

    PDE terms are ``None`` when spatial gradients were not computed (a run
    without physics).
    """

    l_r: float
    l_s: float | None
    l_c: float | None
    l_e: float | None
    total: float
    weight_w: float
    total_tensor: ad.Tensor | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {"l_r": self.l_r, "l_s": self.l_s, "l_c": self.l_c, "l_e": self.l_e,
                "total": self.total, "weight_w": self.weight_w}


@dataclass
class RegistrationResult:
    warped_points: PointSet
    displacement_field: np.ndarray
    loss_history: list[LossBreakdown]
    metrics: dict
    stresses: np.ndarray | None = None
    model: RegModel | None = None


@dataclass
class Subject:
    source: PointSet
    target: PointSet
    material: el.MaterialConfig | None = None
    ground_truth: np.ndarray | None = None


# --- loss ------------------------------------------------------------------------

def _chamfer_tensor(warped: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    wd = warped.data
    nn_wt, _ = nearest_neighbors(wd, target)
    nn_tw, _ = nearest_neighbors(target, wd)
    d_wt = warped - target[nn_wt]
    d_tw = warped[nn_tw] - target
    return (d_tw * d_tw).sum() * (1.0 / len(target)) + (d_wt * d_wt).sum() * (1.0 / len(wd))


def supervised_loss(displacements, ground_truth) -> ad.Tensor | float:
    """Sum of squared displacement errors."""
    gt = np.asarray(ground_truth, dtype=np.float64)
    if displacements.shape != gt.shape:
        raise ConfigError(f"ground truth shape {gt.shape} != prediction {displacements.shape}")
    diff = displacements - gt
    if isinstance(diff, ad.Tensor):
        return (diff * diff).sum()
    return float(np.sum(diff * diff))


def material_for(source: PointSet, config: TrainConfig) -> el.MaterialField:
    return el.MaterialField.from_compartments(source.compartment, config.material)


def assemble_loss(output: HeadOutput, source: PointSet, target: PointSet,
                  material: el.MaterialField, config: TrainConfig,
                  ground_truth=None) -> LossBreakdown:
    if output.displacements.shape[0] != len(source):
        raise ContractError("network output is not row-aligned with the source points")
    warped = output.displacements + source.points
    if config.supervised:
        if ground_truth is None:
            raise ContractError("supervised loss needs a ground-truth displacement field")
        l_r = supervised_loss(output.displacements, ground_truth)
    elif config.chamfer_subset == "surface":
        idx = np.flatnonzero(source.surface)
        l_r = _chamfer_tensor(warped[idx], target.points[target.surface])
    else:
        l_r = _chamfer_tensor(warped, target.points)

    total = l_r * config.weight_w
    terms: list[float | None] = [None, None, None]
    if output.has_gradients:
        strain = el.strain_from_grad(output.disp_grad)
        lam, mu = material.lame_lambda, material.lame_mu
        pde = [
            el.f1_equilibrium(output.stress_grad).sum(),
            el.f2_constitutive(strain, output.stresses, lam, mu).sum(),
            el.f3_energy(strain, output.stresses).sum(),
        ]
        for k, (term, w) in enumerate(zip(pde, config.pde_weights)):
            terms[k] = term.item()
            if w > 0:
                total = total + (term if w == 1.0 else term * w)
    elif config.physics:
        raise ContractError("PDE terms requested but the output carries no spatial gradients")

    return LossBreakdown(l_r.item(), terms[0], terms[1], terms[2], total.item(),
                         config.weight_w, total)


def _forward_loss(model: RegModel, subject: Subject, config: TrainConfig, with_grad: bool,
                  step: int = 0):
    material = material_for(subject.source, config)
    tape = ad.Tape()
    with tape:
        params = model.tensors()
        out = predict(model, subject.source, subject.target, config.physics, params=params)
        lb = assemble_loss(out, subject.source, subject.target, material, config,
                           subject.ground_truth)
    grads = None
    if with_grad:
        _check_finite(lb, step)
        grads = ad.backward(tape, lb.total_tensor, params.values())
    lb.total_tensor = None
    return lb, grads


def _check_finite(lb: LossBreakdown, step: int) -> None:
    vals = [lb.l_r, lb.l_s, lb.l_c, lb.l_e, lb.total]
    if not all(v is None or np.isfinite(v) for v in vals):
        raise NumericalError(step, lb.to_dict())


# --- metrics -----------------------------------------------------------------------

def _dm_subset(source: PointSet, comp_mask: np.ndarray) -> np.ndarray:
    inner = comp_mask & source.internal
    return inner if inner.any() else comp_mask


def evaluate(source: PointSet, warped: np.ndarray, target: PointSet,
             landmarks: Sequence[LandmarkPair] | None = None,
             warp: Callable[[np.ndarray], np.ndarray] | None = None,
             truth=None) -> dict:
    """CD, DM per compartment (internal points), and TRE / rmse when available."""
    s, w = source.points, np.asarray(warped)
    m = {
        "cd": chamfer_distance_metric(w, target.points),
        "cd_before": chamfer_distance_metric(s, target.points),
        "cd_surface": chamfer_distance_metric(w[source.surface], target.points[target.surface])
        if source.surface.any() and target.surface.any() else None,
        "dm_all": deformation_magnitude(s, w),
    }
    rig, soft = _dm_subset(source, source.rigid), _dm_subset(source, source.soft)
    m["dm_rigid"] = deformation_magnitude(s, w, rig) if rig.any() else None
    m["dm_soft"] = deformation_magnitude(s, w, soft) if soft.any() else None
    if m["dm_rigid"] is not None and m["dm_soft"]:
        m["dm_ratio"] = m["dm_rigid"] / m["dm_soft"]
    else:
        m["dm_ratio"] = None
    if landmarks:
        m["tre"] = tre(landmarks, warp)
        m["tre_before"] = tre(landmarks)
    if truth is not None:
        disp = w - s
        m["rmse"] = rmse(disp, truth)
        if source.surface.any():
            m["rmse_surface"] = rmse(disp[source.surface], np.asarray(truth)[source.surface])
    return m


def pair_loss_before(source: PointSet, target: PointSet, config: TrainConfig) -> float:
    """Total loss of the identity warp with zero stress, where the PDE terms vanish."""
    if config.chamfer_subset == "surface":
        return config.weight_w * chamfer_loss(source.points[source.surface],
                                              target.points[target.surface])
    return config.weight_w * chamfer_loss(source, target)


# --- single pair --------------------------------------------------------------------

def register(model: RegModel, source: PointSet, target: PointSet,
             config: TrainConfig | None = None,
             landmarks: Sequence[LandmarkPair] | None = None,
             truth=None) -> RegistrationResult:
    """Forward-only registration; parameters are not modified."""
    config = config or TrainConfig(arch=model.arch)
    material = material_for(source, config)
    with ad.no_tape():
        out = predict(model, source, target, want_gradients=True)
        eval_cfg = replace(config, supervised=False)
        lb = assemble_loss(out, source, target, material, eval_cfg)
    lb.total_tensor = None
    disp = out.displacements.data.copy()
    warped = source.points + disp

    def warp(points):
        from .network import displacement_at
        return points + displacement_at(model, source, target, points)

    metrics = evaluate(source, warped, target, landmarks, warp if landmarks else None, truth)
    metrics["pair_loss"] = lb.to_dict()
    metrics["pair_loss_before"] = pair_loss_before(source, target, eval_cfg)
    return RegistrationResult(source.with_points(warped), disp, [lb], metrics,
                              out.stresses.data.copy(), model)


def train_single_pair(source: PointSet, target: PointSet, config: TrainConfig,
                      ground_truth=None, landmarks=None, truth=None,
                      callback: Callable[[int, LossBreakdown], None] | None = None
                      ) -> RegistrationResult:
    """Fit a freshly seeded model to one pair by minimising the weighted loss."""
    if config.supervised and ground_truth is None:
        raise ConfigError("supervised training needs ground_truth")
    model = init_model(config.seed, config.arch, zero_heads=config.zero_init_heads)
    opt = make_optimizer(config.optimizer, config.lr, config.beta1, config.beta2,
                         config.eps, config.momentum)
    subject = Subject(source, target, None, ground_truth)
    history: list[LossBreakdown] = []
    for step in range(config.steps):
        lb, grads = _forward_loss(model, subject, config, with_grad=True, step=step)
        history.append(lb)
        if callback is not None:
            callback(step, lb)
        opt.step(model.params, grads)
    result = register(model, source, target, config, landmarks,
                      truth if truth is not None else ground_truth)
    result.loss_history = history
    result.metrics["final_loss"] = result.metrics.pop("pair_loss")
    return result


# --- population ---------------------------------------------------------------------

def _as_subjects(subjects) -> list[Subject]:
    out = []
    for s in subjects:
        if isinstance(s, Subject):
            out.append(s)
        else:
            out.append(Subject(*s))
    return out


def _check_materials(subjects: list[Subject], config: TrainConfig) -> TrainConfig:
    mats = {s.material for s in subjects if s.material is not None}
    if len(mats) > 1:
        raise ConfigError("subjects carry inconsistent material configurations")
    if mats:
        mat = mats.pop()
        if mat != config.material:
            config = replace(config, material=mat)
    return config


def population_loss(model: RegModel, subjects, config: TrainConfig) -> float:
    """Mean per-subject total loss at fixed parameters."""
    subjects = _as_subjects(subjects)
    config = _check_materials(subjects, config)
    with ad.no_tape():
        totals = [_forward_loss(model, s, config, with_grad=False)[0].total for s in subjects]
    return float(np.mean(totals))


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("ELASTOREG_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class PopulationResult:
    model: RegModel
    epoch_history: list[dict]
    optimizer_state: dict
    epochs_done: int


def train_population(subjects, config: TrainConfig, model: RegModel | None = None,
                     optimizer_state: dict | None = None, start_epoch: int = 0,
                     callback: Callable[[int, dict], None] | None = None) -> PopulationResult:
    """Amortised training of one shared model over many subjects.

    Each epoch visits the subjects in a seeded shuffled order, in batches of
    ``config.batch_subjects``; a batch loss is the mean of per-subject
    losses. Passing ``model``/``optimizer_state``/``start_epoch`` from an
    earlier run continues it exactly.
    """
    subjects = _as_subjects(subjects)
    if len(subjects) < 2:
        raise ConfigError("population training needs at least 2 subjects")
    config = _check_materials(subjects, config)
    if model is None:
        model = init_model(config.seed, config.arch, zero_heads=config.zero_init_heads)
    opt = make_optimizer(config.optimizer, config.lr, config.beta1, config.beta2,
                         config.eps, config.momentum)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    workers = max(1, config.workers)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    history = []
    try:
        for epoch in range(start_epoch, config.epochs):
            order = np.random.default_rng([config.seed, epoch]).permutation(len(subjects))
            batch_totals, terms = [], []
            for lo in range(0, len(order), config.batch_subjects):
                batch = [subjects[i] for i in order[lo:lo + config.batch_subjects]]
                run = lambda s: _forward_loss(model, s, config, with_grad=True, step=epoch)
                results = list(pool.map(run, batch)) if pool else [run(s) for s in batch]
                grads = {k: np.zeros_like(v) for k, v in model.params.items()}
                for lb, g in results:
                    for k in grads:
                        grads[k] += g[k]
                    terms.append(lb)
                scale = 1.0 / len(batch)
                for k in grads:
                    grads[k] *= scale
                batch_totals.append(np.mean([lb.total for lb, _ in results]))
                opt.step(model.params, grads)
            rec = {"epoch": epoch, "loss": float(np.mean(batch_totals))}
            for key in ("l_r", "l_s", "l_c", "l_e"):
                vals = [getattr(lb, key) for lb in terms]
                rec[key] = None if vals[0] is None else float(np.mean(vals))
            history.append(rec)
            if callback is not None:
                callback(epoch, rec)
    finally:
        if pool is not None:
            pool.shutdown()
    return PopulationResult(model, history, opt.state_dict(), config.epochs)

"""Losses, the two-phase schedule, training loops and the QP fine-tune chain."""

from __future__ import annotations

import dataclasses
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from .blocks import MotionCompensationNet, warp
from .bundle import ModelBundle
from .exceptions import ConfigurationError, NumericError, ValidationError
from .filters import IfNet, MifNet
from .frames import PatchSample
from .rfs import RfsNet, rfs_loss_tensor
from .validation import check_plane, check_same_shape

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# losses


class Phase(enum.Enum):
    MC_FIRST = "mc_first"
    GLOBAL = "global"


_PHASE_WEIGHTS = {Phase.MC_FIRST: (0.99, 0.01), Phase.GLOBAL: (0.01, 0.99)}


@dataclass(frozen=True)
class LossWeights:
    phase: Phase = Phase.MC_FIRST

    @property
    def alpha(self) -> float:
        return _PHASE_WEIGHTS[Phase(self.phase)][0]

    @property
    def beta(self) -> float:
        return _PHASE_WEIGHTS[Phase(self.phase)][1]


def loss_intermediate(compensated: Sequence, urf) -> float:
    """Mean over references of the summed squared error to the URF."""
    u = check_plane(urf, "urf")
    if not compensated:
        raise ValidationError("need at least one compensated plane")
    planes = [check_plane(c, "compensated") for c in compensated]
    check_same_shape(u, *planes)
    return float(sum(np.sum((c - u) ** 2) for c in planes) / len(planes))


def loss_global(enhanced, raw) -> float:
    e = check_plane(enhanced, "enhanced")
    r = check_plane(raw, "raw")
    check_same_shape(e, r, names=("enhanced", "raw"))
    return float(np.sum((e - r) ** 2))


def loss_total(l_int: float, l_glo: float, weights: LossWeights) -> float:
    if l_int < 0 or l_glo < 0:
        raise ValidationError("losses must be non-negative")
    return weights.alpha * l_int + weights.beta * l_glo


def intermediate_loss_tensor(comp: torch.Tensor, urf: torch.Tensor) -> torch.Tensor:
    """Batch sum of per-sample intermediate losses; comp (B,M,H,W), urf (B,1,H,W)."""
    return ((comp - urf) ** 2).sum() / comp.shape[1]


def global_loss_tensor(enhanced: torch.Tensor, raw: torch.Tensor) -> torch.Tensor:
    return ((enhanced - raw) ** 2).sum()


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    iterations: int = 20_000
    finetune_iterations: int = 4_000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patch: int = 64
    qp: int = 37
    init_from: Optional[str] = None
    seed: int = 0
    num_refs: int = 2
    growth: int = 12
    convergence_window: int = 1_000
    convergence_tol: float = 0.005
    max_phase1_fraction: float = 0.5
    log_every: int = 1

    def __post_init__(self):
        for name in ("batch_size", "iterations", "patch", "num_refs", "growth", "convergence_window", "log_every"):
            if getattr(self, name) < 1 and not (name == "iterations" and self.iterations == 0):
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate < 0:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 < self.max_phase1_fraction <= 1:
            raise ConfigurationError("max_phase1_fraction must lie in (0, 1]")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
            values[key] = _coerce(key, raw, types[key])
        values.update(overrides)
        return cls(**values)


def _coerce(key: str, raw: str, typ) -> object:
    # annotations are strings under postponed evaluation
    try:
        if typ.startswith("Optional"):
            return None if raw.lower() in ("", "none") else raw
        if typ == "int":
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {typ}") from None
    return raw


@dataclass
class TrainingLog:
    iterations: list = field(default_factory=list)
    l_int: list = field(default_factory=list)
    l_glo: list = field(default_factory=list)
    phase: list = field(default_factory=list)
    phase2_start: Optional[int] = None

    def record(self, it: int, l_int: float, l_glo: float, phase: Phase) -> None:
        self.iterations.append(it)
        self.l_int.append(l_int)
        self.l_glo.append(l_glo)
        self.phase.append(phase.value)


# ---------------------------------------------------------------------------
# data


class PatchBatcher:
    """Uniform sampling without replacement, reshuffled every epoch."""

    def __init__(self, dataset: Sequence[PatchSample], batch_size: int, seed: int, with_refs: bool):
        if not dataset:
            raise ValidationError("training dataset is empty")
        if batch_size > len(dataset):
            raise ConfigurationError(f"batch_size {batch_size} exceeds dataset size {len(dataset)}")
        self.rng = np.random.default_rng(seed)
        self.batch_size = batch_size
        self.raw = np.stack([s.raw_patch for s in dataset]).astype(np.float32)[:, None]
        self.urf = np.stack([s.urf_patch for s in dataset]).astype(np.float32)[:, None]
        self.maps = np.stack([np.stack([s.cu_patch, s.tu_patch]) for s in dataset]).astype(np.float32)
        self.refs = None
        if with_refs:
            self.refs = np.stack([np.stack(s.ref_patches) for s in dataset]).astype(np.float32)
        self._order = np.empty(0, dtype=np.int64)

    def __len__(self):
        return len(self.raw)

    def next(self) -> dict:
        if len(self._order) < self.batch_size:
            self._order = self.rng.permutation(len(self))
        idx, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        batch = {"raw": self.raw[idx], "urf": self.urf[idx], "maps": self.maps[idx]}
        if self.refs is not None:
            batch["refs"] = self.refs[idx]
        return {k: torch.from_numpy(v) for k, v in batch.items()}


def _check_dataset(dataset: Sequence[PatchSample], num_refs: int, patch: int) -> None:
    if not dataset:
        raise ValidationError("training dataset is empty")
    for k, s in enumerate(dataset):
        if s.num_refs != num_refs:
            raise ValidationError(f"sample {k} has {s.num_refs} reference patches, expected {num_refs}")
        if s.raw_patch.shape != (patch, patch):
            raise ValidationError(f"sample {k} patch shape {s.raw_patch.shape} != {(patch, patch)}")


def _adam(module: torch.nn.Module, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(module.parameters(), lr=config.learning_rate,
                            betas=(config.beta1, config.beta2), eps=config.eps)


def _init_module(factory: Callable[[], torch.nn.Module], config: TrainConfig, kind: str):
    torch.manual_seed(config.seed)
    module = factory()
    if config.init_from:
        donor = ModelBundle.load(config.init_from)
        if donor.kind != kind:
            raise ValidationError(f"cannot initialise a {kind} network from a {donor.kind} bundle")
        donor.load_into(module)
    return module


def _finite(value: float, it: int, what: str, **context) -> float:
    if not math.isfinite(value):
        detail = ", ".join(f"{k}={v:.6g}" for k, v in context.items())
        raise NumericError(f"non-finite {what} at iteration {it} ({detail})")
    return value


def _metadata(config: TrainConfig, iterations: int, **extra) -> dict:
    meta = {
        "qp": config.qp,
        "iterations": iterations,
        "learning_rate": config.learning_rate,
        "lr_schedule": "constant",
        "batch_size": config.batch_size,
        "seed": config.seed,
        "init_from": config.init_from,
        "adam": [config.beta1, config.beta2, config.eps],
    }
    meta.update(extra)
    return meta


class _Phase1Monitor:
    """Ends phase 1 once the windowed mean intermediate loss stops improving."""

    def __init__(self, window: int, tol: float, limit: int):
        self.window, self.tol, self.limit = window, tol, limit
        self.buffer: list = []
        self.previous: Optional[float] = None

    def update(self, it: int, l_int: float) -> bool:
        if it + 1 >= self.limit:
            return True
        self.buffer.append(l_int)
        if len(self.buffer) < self.window:
            return False
        mean = float(np.mean(self.buffer))
        self.buffer = []
        prev, self.previous = self.previous, mean
        return prev is not None and (prev - mean) < self.tol * prev


def train_mif(dataset: Sequence[PatchSample], config: TrainConfig,
              net: Optional[MifNet] = None) -> tuple:
    """Two-phase training: emphasise the intermediate loss, then the global one.

    Returns ``(bundle, log)``.
    """
    _check_dataset(dataset, config.num_refs, config.patch)
    batcher = PatchBatcher(dataset, config.batch_size, config.seed, with_refs=True)
    if net is None:
        net = _init_module(lambda: MifNet(num_refs=config.num_refs, growth=config.growth), config, "mif")
    net.train()
    opt = _adam(net, config)
    limit = max(1, int(config.iterations * config.max_phase1_fraction))
    monitor = _Phase1Monitor(config.convergence_window, config.convergence_tol, limit)
    phase = Phase.MC_FIRST
    train_log = TrainingLog()
    for it in range(config.iterations):
        b = batcher.next()
        out = net(b["urf"], b["refs"], b["maps"])
        l_int = intermediate_loss_tensor(out.compensated, b["urf"])
        l_glo = global_loss_tensor(out.enhanced, b["raw"])
        w = LossWeights(phase)
        loss = w.alpha * l_int + w.beta * l_glo
        li, lg = float(l_int.detach()), float(l_glo.detach())
        _finite(float(loss.detach()), it, "MIF-Net loss", l_int=li, l_glo=lg)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if it % config.log_every == 0:
            train_log.record(it, li, lg, phase)
        if phase is Phase.MC_FIRST and monitor.update(it, li):
            phase = Phase.GLOBAL
            train_log.phase2_start = it + 1
            log.info("MIF-Net: switching to global phase at iteration %d", it + 1)
    net.eval()
    meta = _metadata(config, config.iterations, num_refs=config.num_refs, phase2_start=train_log.phase2_start)
    return ModelBundle.from_module(net, "mif", **meta), train_log


def train_if(dataset: Sequence[PatchSample], config: TrainConfig, net: Optional[IfNet] = None) -> tuple:
    """Single-phase minimisation of the global loss. Returns ``(bundle, log)``."""
    _check_dataset(dataset, 0, config.patch)
    batcher = PatchBatcher(dataset, config.batch_size, config.seed, with_refs=False)
    if net is None:
        net = _init_module(lambda: IfNet(growth=config.growth), config, "if")
    net.train()
    opt = _adam(net, config)
    train_log = TrainingLog(phase2_start=0)
    for it in range(config.iterations):
        b = batcher.next()
        enhanced, _ = net(b["urf"], b["maps"])
        loss = global_loss_tensor(enhanced, b["raw"])
        lg = float(loss.detach())
        _finite(lg, it, "IF-Net loss", l_glo=lg)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if it % config.log_every == 0:
            train_log.record(it, 0.0, lg, Phase.GLOBAL)
    net.eval()
    return ModelBundle.from_module(net, "if", **_metadata(config, config.iterations)), train_log


def train_mc(references, targets, config: TrainConfig, shifts=None, supervision: float = 0.0,
             net: Optional[MotionCompensationNet] = None) -> tuple:
    """Train the motion-compensation network on its own.

    ``references`` and ``targets`` are (N, H, W) stacks. The loss is the
    mean squared error between the warped reference and the target at
    every pyramid level (in the network's normalised sample domain). When
    true per-pair displacements ``shifts`` (N x 2) are known, ``supervision``
    weights an extra mean endpoint-error term at full resolution.

    Returns ``(bundle, log)``; the log stores the photometric loss as
    ``l_int`` and the endpoint term as ``l_glo``.
    """
    refs = torch.tensor(np.asarray(references, dtype=np.float32))[:, None]
    tgts = torch.tensor(np.asarray(targets, dtype=np.float32))[:, None]
    if refs.dim() != 4 or refs.shape != tgts.shape or len(refs) == 0:
        raise ValidationError(f"references {tuple(refs.shape)} and targets {tuple(tgts.shape)} must be equal "
                              "non-empty (N, H, W) stacks")
    if config.batch_size > len(refs):
        raise ConfigurationError(f"batch_size {config.batch_size} exceeds dataset size {len(refs)}")
    truth = None
    if supervision:
        if shifts is None:
            raise ValidationError("supervision needs the true shifts")
        truth = torch.tensor(np.asarray(shifts, dtype=np.float32))
        if truth.shape != (len(refs), 2):
            raise ValidationError(f"shifts must be N x 2, got {tuple(truth.shape)}")
    if net is None:
        net = _init_module(MotionCompensationNet, config, "mc")
    net.train()
    opt = _adam(net, config)
    rng = np.random.default_rng(config.seed)
    h, w = refs.shape[2:]
    train_log = TrainingLog(phase2_start=0)
    for it in range(config.iterations):
        idx = torch.from_numpy(rng.integers(0, len(refs), config.batch_size))
        levels = net.pyramid(refs[idx], tgts[idx])
        photo = sum(((warp(r, f) - t) ** 2).mean() for f, r, t in levels)
        epe = torch.zeros(())
        if truth is not None:
            err = levels[-1][0][:, :, :h, :w] - truth[idx][:, :, None, None]
            epe = (err.pow(2).sum(1) + 1e-12).sqrt().mean()
        loss = photo + supervision * epe
        lp, le = float(photo.detach()), float(epe.detach())
        _finite(float(loss.detach()), it, "MC loss", photometric=lp, endpoint=le)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if it % config.log_every == 0:
            train_log.record(it, lp, le, Phase.MC_FIRST)
    net.eval()
    meta = _metadata(config, config.iterations, supervision=supervision)
    return ModelBundle.from_module(net, "mc", **meta), train_log


def endpoint_error(net: MotionCompensationNet, references, targets, shifts, margin: int = 0) -> float:
    """Mean Euclidean distance between estimated and true constant flows."""
    refs = torch.tensor(np.asarray(references, dtype=np.float32))[:, None]
    tgts = torch.tensor(np.asarray(targets, dtype=np.float32))[:, None]
    with torch.no_grad():
        flow, _ = net.eval()(refs, tgts)
    err = flow.double().numpy() - np.asarray(shifts, dtype=np.float64)[:, :, None, None]
    dist = np.sqrt((err ** 2).sum(1))
    if margin:
        dist = dist[:, margin:-margin, margin:-margin]
    return float(dist.mean())


@dataclass(frozen=True)
class RfsBatch:
    """Features (k x 6) and ground-truth potentials of one URF's valid references."""

    features: np.ndarray
    potentials: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        p = np.asarray(self.potentials, dtype=np.float64).ravel()
        if f.ndim != 2 or f.shape[1] != 6 or len(f) != len(p) or len(p) == 0:
            raise ValidationError(f"RFS batch needs k x 6 features and k potentials, got {f.shape}, {p.shape}")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "potentials", p)


def train_rfs(batches: Sequence[RfsBatch], config: TrainConfig, net: Optional[RfsNet] = None) -> tuple:
    """Adam on the per-URF ranking loss; each step consumes one URF's batch."""
    if not batches:
        raise ValidationError("RFS training needs at least one batch")
    if net is None:
        net = _init_module(RfsNet, config, "rfs")
    net.train()
    opt = _adam(net, config)
    rng = np.random.default_rng(config.seed)
    order: list = []
    train_log = TrainingLog(phase2_start=0)
    tensors = [(torch.tensor(b.features, dtype=torch.float32), torch.tensor(b.potentials, dtype=torch.float32))
               for b in batches]
    for it in range(config.iterations):
        if not order:
            order = list(rng.permutation(len(tensors)))
        x, r = tensors[order.pop()]
        loss = rfs_loss_tensor(r, net(x))
        value = float(loss.detach())
        _finite(value, it, "RFS loss", loss=value)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if it % config.log_every == 0:
            train_log.record(it, 0.0, value, Phase.GLOBAL)
    net.eval()
    return ModelBundle.from_module(net, "rfs", **_metadata(config, config.iterations)), train_log


def finetune_chain(qps: Sequence[int], base_config: TrainConfig, datasets: Mapping[int, Sequence[PatchSample]],
                   kind: str = "if", out_dir=None) -> dict:
    """Train the highest QP from scratch and fine-tune each lower QP from its predecessor.

    ``qps`` must be strictly descending. Returns ``{qp: bundle}``; with
    ``out_dir`` each bundle is also written as ``<kind>-qp<qp>.bundle``.
    """
    if kind not in ("if", "mif"):
        raise ValidationError(f"kind must be 'if' or 'mif', got {kind!r}")
    qps = list(qps)
    if not qps:
        raise ValidationError("empty QP list")
    if any(a <= b for a, b in zip(qps, qps[1:])):
        raise ValidationError(f"QPs must be strictly descending, got {qps}")
    if base_config.init_from and not Path(base_config.init_from).is_file():
        raise ValidationError(f"donor bundle {base_config.init_from} does not exist")
    trainer = train_mif if kind == "mif" else train_if
    bundles: dict = {}
    donor_path: Optional[str] = base_config.init_from
    donor_name: Optional[str] = None
    tmp_dir = None
    if out_dir is None:
        import tempfile
        tmp_dir = tempfile.TemporaryDirectory()
        out_dir = tmp_dir.name
    out_dir = Path(out_dir)
    try:
        for k, qp in enumerate(qps):
            if qp not in datasets:
                raise ValidationError(f"no training data for QP {qp}")
            scratch = k == 0 and donor_path is None
            cfg = base_config.replace(
                qp=qp, init_from=donor_path,
                iterations=base_config.iterations if scratch else base_config.finetune_iterations)
            bundle, _ = trainer(datasets[qp], cfg)
            name = f"{kind}-qp{qp}"
            bundle.manifest.update(name=name, init_from=None if scratch else (donor_name or donor_path),
                                   budget="scratch" if scratch else "finetune",
                                   budget_full=1_000_000 if scratch else 200_000)
            path = bundle.save(out_dir / f"{name}.bundle")
            bundles[qp] = bundle
            donor_path, donor_name = str(path), name
    finally:
        if tmp_dir is not None:
            tmp_dir.cleanup()
    return bundles

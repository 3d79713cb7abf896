"""scikit-learn style wrappers around the networks and the proxy codec.

Hyperparameters live in ``__init__`` untouched, fitted state ends in an
underscore, so ``get_params``/``set_params``/``clone`` behave as usual.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .bundle import ModelBundle
from .codec import ProxyCodecConfig, ProxyResult, proxy_encode
from .exceptions import ValidationError
from .filters import IfNet, MifNet, if_forward, mif_forward
from .frames import PartitionMaps
from .rfs import RfsNet
from .training import RfsBatch, TrainConfig, train_if, train_mif, train_rfs


class _NetEstimator(BaseEstimator):
    kind = ""

    def _train_config(self) -> TrainConfig:
        names = set(TrainConfig.__dataclass_fields__)
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def to_bundle(self) -> ModelBundle:
        check_is_fitted(self, "bundle_")
        return self.bundle_

    def save(self, path):
        return self.to_bundle().save(path)

    @classmethod
    def from_bundle(cls, bundle, **params):
        """Wrap an existing bundle (or a path to one) as a fitted estimator."""
        if not isinstance(bundle, ModelBundle):
            bundle = ModelBundle.load(bundle)
        if bundle.kind != cls.kind:
            raise ValidationError(f"expected a {cls.kind} bundle, got {bundle.kind}")
        est = cls(**params)
        est.bundle_ = bundle
        est.net_ = bundle.build().eval()
        est.log_ = None
        return est

    def _fitted(self, bundle, log):
        self.bundle_, self.log_ = bundle, log
        self.net_ = bundle.build().eval()
        return self


class RfsRanker(_NetEstimator):
    """Scores candidate references from their six features.

    ``fit`` takes a list of per-URF groups, each either an ``RfsBatch`` or a
    ``(features, potentials)`` pair.
    """

    kind = "rfs"

    def __init__(self, learning_rate=1e-3, iterations=10_000, seed=0, init_from=None):
        self.learning_rate = learning_rate
        self.iterations = iterations
        self.seed = seed
        self.init_from = init_from

    def fit(self, X, y=None):
        batches = [b if isinstance(b, RfsBatch) else RfsBatch(*b) for b in X]
        return self._fitted(*train_rfs(batches, self._train_config()))

    def predict(self, X) -> np.ndarray:
        """Z-scored scores for one group of candidates (k x 6)."""
        check_is_fitted(self, "net_")
        x = np.asarray(X, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != 6:
            raise ValidationError(f"expected k x 6 features, got shape {x.shape}")
        with torch.no_grad():
            return self.net_(torch.tensor(x, dtype=torch.float32)).double().numpy()

    def rank(self, X) -> np.ndarray:
        """Candidate positions, best first."""
        return np.argsort(-self.predict(X), kind="stable")


class IFNetFilter(_NetEstimator, TransformerMixin):
    """Single-frame filter. ``transform`` maps ``(urf, maps)`` pairs to enhanced luma."""

    kind = "if"

    def __init__(self, growth=12, learning_rate=1e-4, batch_size=16, iterations=20_000, patch=64, seed=0,
                 init_from=None):
        self.growth = growth
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.iterations = iterations
        self.patch = patch
        self.seed = seed
        self.init_from = init_from

    def fit(self, X, y=None):
        """Train on a list of ``PatchSample``; ``y`` is ignored (targets ride in the samples)."""
        return self._fitted(*train_if(list(X), self._train_config()))

    def transform(self, X) -> list:
        check_is_fitted(self, "net_")
        return [if_forward(self.net_, urf, _maps(maps)) for urf, maps in X]


class MIFNetFilter(_NetEstimator, TransformerMixin):
    """Multi-frame filter. ``transform`` maps ``(urf, refs, maps)`` triples to enhanced luma."""

    kind = "mif"

    def __init__(self, num_refs=2, growth=12, learning_rate=1e-4, batch_size=16, iterations=20_000, patch=64,
                 seed=0, max_phase1_fraction=0.5, convergence_window=1_000, init_from=None):
        self.num_refs = num_refs
        self.growth = growth
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.iterations = iterations
        self.patch = patch
        self.seed = seed
        self.max_phase1_fraction = max_phase1_fraction
        self.convergence_window = convergence_window
        self.init_from = init_from

    def fit(self, X, y=None):
        return self._fitted(*train_mif(list(X), self._train_config()))

    def transform(self, X) -> list:
        check_is_fitted(self, "net_")
        return [mif_forward(self.net_, urf, list(refs), _maps(maps)) for urf, refs, maps in X]


class ProxyCodec(BaseEstimator, TransformerMixin):
    """Stateless proxy encoder; ``transform`` turns a raw clip into a ``ProxyResult``."""

    def __init__(self, qp_base=37, gop_size=4, qp_offsets=(0, 4, 3, 4), min_cu=8, transform_size=8,
                 split_threshold=4.0, fps=30.0, bit_depth=8, seed=0):
        self.qp_base = qp_base
        self.gop_size = gop_size
        self.qp_offsets = qp_offsets
        self.min_cu = min_cu
        self.transform_size = transform_size
        self.split_threshold = split_threshold
        self.fps = fps
        self.bit_depth = bit_depth
        self.seed = seed

    def fit(self, X=None, y=None):
        self.config_ = ProxyCodecConfig(**self.get_params())
        return self

    def transform(self, X: Sequence) -> ProxyResult:
        check_is_fitted(self, "config_")
        return proxy_encode(list(X), self.config_)


def _maps(maps: Optional[object]) -> PartitionMaps:
    if isinstance(maps, PartitionMaps):
        return maps
    arr = np.asarray(maps, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ValidationError(f"partition maps must be PartitionMaps or a 2 x H x W array, got {arr.shape}")
    return PartitionMaps(arr[0], arr[1])

"""Scikit-learn style facades over the pipeline and the toy decoder.

`PseudoLabeler` is a stateless transformer: patch-feature maps in,
granularity-scored label sets out. `GranularityModel` is fit/predict
shaped: fit trains the toy decoder on a synthetic corpus (or a provided
one), predict answers (point, granularity) prompts. Both expose their
configuration through get_params/set_params so they compose with
sklearn pipelines and search utilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .conquer import DEFAULT_THETAS, ThresholdSchedule
from .divide import DivideConfig
from .features import PatchFeatureMap
from .hierarchy import HierarchyConfig, PseudoLabelSet, build_pseudolabels

__all__ = ["PseudoLabeler", "GranularityModel"]


class PseudoLabeler(BaseEstimator, TransformerMixin):
    """Divide-and-conquer pseudo-labeling as a stateless transformer."""

    def __init__(
        self,
        tau_sim: float = 0.15,
        eps_floor: float = 1e-6,
        max_instances: int = 8,
        tau_conf: float = 0.3,
        thetas: tuple[float, ...] = DEFAULT_THETAS,
        tau_area: float = 0.02,
        tau_overlap: float = 0.8,
        nms_iou: float = 0.9,
        patch_size: int = 16,
    ):
        self.tau_sim = tau_sim
        self.eps_floor = eps_floor
        self.max_instances = max_instances
        self.tau_conf = tau_conf
        self.thetas = thetas
        self.tau_area = tau_area
        self.tau_overlap = tau_overlap
        self.nms_iou = nms_iou
        self.patch_size = patch_size

    def fit(self, X=None, y=None):
        return self

    def transform(self, X) -> list[PseudoLabelSet]:
        """Label one feature map or a sequence of them."""
        single = isinstance(X, PatchFeatureMap)
        fmaps = [X] if single else list(X)
        out = [
            build_pseudolabels(
                fmap,
                DivideConfig(
                    tau_sim=self.tau_sim,
                    eps_floor=self.eps_floor,
                    max_instances=self.max_instances,
                    tau_conf=self.tau_conf,
                ),
                ThresholdSchedule(tuple(self.thetas)),
                HierarchyConfig(
                    tau_area=self.tau_area, tau_overlap=self.tau_overlap, nms_iou=self.nms_iou
                ),
                image_id=f"image{k:04d}",
                patch_size=self.patch_size,
            )
            for k, fmap in enumerate(fmaps)
        ]
        return out[0] if single else out


class GranularityModel(BaseEstimator):
    """Toy granularity-conditioned decoder behind a fit/predict interface."""

    def __init__(
        self,
        epochs: int = 60,
        batch: int = 32,
        lr: float = 2e-3,
        seed: int = 0,
        d_model: int = 64,
        d_fourier: int = 128,
        grid: int = 32,
        feature_dim: int = 16,
        corpus_images: int = 200,
    ):
        self.epochs = epochs
        self.batch = batch
        self.lr = lr
        self.seed = seed
        self.d_model = d_model
        self.d_fourier = d_fourier
        self.grid = grid
        self.feature_dim = feature_dim
        self.corpus_images = corpus_images

    def _train_config(self):
        from .decoder import TrainConfig

        return TrainConfig(
            epochs=self.epochs,
            batch=self.batch,
            lr=self.lr,
            seed=self.seed,
            d_model=self.d_model,
            d_fourier=self.d_fourier,
            grid=self.grid,
            feature_dim=self.feature_dim,
        )

    def fit(self, X=None, y=None):
        """Train on a list of TrainSample (or a fresh synthetic corpus)."""
        from .decoder import build_training_corpus, train_toy

        cfg = self._train_config()
        corpus = X if X is not None else build_training_corpus(self.corpus_images, cfg)
        self.model_, self.metrics_ = train_toy(corpus, cfg)
        return self

    def predict(self, fmap: PatchFeatureMap, point: tuple[int, int], g: float) -> np.ndarray:
        """Boolean mask for a (point, granularity) prompt on a feature map."""
        from .decoder import decode

        if not hasattr(self, "model_"):
            raise RuntimeError("GranularityModel must be fit (or loaded) before predict")
        return decode(fmap, point, g, self.model_) > 0.0

    def decision_function(self, fmap: PatchFeatureMap, point: tuple[int, int], g: float) -> np.ndarray:
        from .decoder import decode

        if not hasattr(self, "model_"):
            raise RuntimeError("GranularityModel must be fit (or loaded) before predict")
        return decode(fmap, point, g, self.model_)

    def save(self, path) -> None:
        from .decoder import save_checkpoint

        save_checkpoint(self.model_, path)

    @classmethod
    def load(cls, path, **params) -> "GranularityModel":
        from .decoder import load_checkpoint

        est = cls(**params)
        est.model_ = load_checkpoint(path)
        est.metrics_ = []
        return est

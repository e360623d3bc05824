"""scikit-learn style estimators over the transformer pipeline.

These follow the standard conventions (constructor params stored verbatim,
fitted state in trailing-underscore attributes, get_params/set_params via
BaseEstimator) so the models compose with pipelines, grid search and clone.
Desk-scale defaults are tuned for the 32-pixel presets; the CLI keeps the
published large-scale recipe values instead.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from . import data as dp
from . import distill as kdist
from . import heads as hd
from . import mae as mae_mod
from . import metrics as mx
from . import train as tr
from . import vit
from .validation import check_images, check_labels, train_val_split


class RandomFourierFeatures(TransformerMixin, BaseEstimator):
    """Random cosine feature map whose inner products approximate an RBF
    kernel with the given length scale.

    Parameters
    ----------
    n_features : output dimensionality M.
    length_scale : RBF length scale; the projection is drawn N(0, 1/scale^2).
    random_state : seed for the frozen projection.
    """

    def __init__(self, n_features=1024, length_scale=1.0, random_state=0):
        self.n_features = n_features
        self.length_scale = length_scale
        self.random_state = random_state

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValueError(f"expected 2-d input, got shape {X.shape}")
        self.n_features_in_ = X.shape[1]
        rng = np.random.default_rng(self.random_state)
        self.weights_, self.phases_ = hd.sample_rff_params(
            rng, self.n_features_in_, self.n_features, float(self.length_scale))
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected (n, {self.n_features_in_}) input, got "
                             f"shape {X.shape}")
        return hd.rff_transform(X, self.weights_, self.phases_)


class _EncoderParams:
    """Shared constructor-parameter plumbing for the transformer estimators."""

    def _vit_config(self, num_classes: int) -> vit.VitConfig:
        return vit.VitConfig(image_size=self.image_size,
                             patch_size=self.patch_size, dim=self.dim,
                             depth=self.depth, heads=self.n_heads,
                             mlp_ratio=self.mlp_ratio, num_classes=num_classes)

    def _head_config(self) -> hd.HeadConfig:
        return hd.HeadConfig(kind=self.head, features=self.rff_features,
                             length_scale=self.length_scale)

    def _train_config(self) -> tr.TrainConfig:
        return tr.TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                              lr=self.lr, weight_decay=self.weight_decay,
                              warmup_epochs=self.warmup_epochs)

    def _augment_config(self):
        return dp.AugmentConfig() if self.augment else None


class VitClassifier(ClassifierMixin, _EncoderParams, BaseEstimator):
    """Vision-transformer classifier with a GP (random-feature) or linear head.

    fit carves a deterministic validation subset out of the training data and
    keeps the best-validation weights, mirroring the training pipeline.

    Parameters mirror the config schema; ``head`` is "gp" or "linear".
    After fit: ``classes_``, ``model_``, ``history_`` (per-epoch rows).
    """

    def __init__(self, image_size=32, patch_size=4, dim=32, depth=2, n_heads=4,
                 mlp_ratio=4.0, head="gp", rff_features=1024, length_scale=None,
                 epochs=30, batch_size=32, lr=1e-3, weight_decay=0.05,
                 warmup_epochs=3, augment=True, val_fraction=0.1,
                 init_checkpoint=None, random_state=0):
        self.image_size = image_size
        self.patch_size = patch_size
        self.dim = dim
        self.depth = depth
        self.n_heads = n_heads
        self.mlp_ratio = mlp_ratio
        self.head = head
        self.rff_features = rff_features
        self.length_scale = length_scale
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.augment = augment
        self.val_fraction = val_fraction
        self.init_checkpoint = init_checkpoint
        self.random_state = random_state

    @classmethod
    def from_preset(cls, preset: str, **overrides) -> "VitClassifier":
        params = dict(vit.PRESETS[preset])
        params["n_heads"] = params.pop("heads")
        params.update(overrides)
        return cls(**params)

    def fit(self, X, y):
        X = check_images(X, self.image_size)
        y = check_labels(y, len(X))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")

        cfg = self._vit_config(len(self.classes_))
        if self.init_checkpoint:
            self.model_ = mae_mod.load_pretrained(self.init_checkpoint, cfg,
                                                  self._head_config(),
                                                  seed=self.random_state)
        else:
            self.model_ = vit.VitModel(cfg, self._head_config(),
                                       seed=self.random_state)

        tr_idx, val_idx = train_val_split(len(X), self.val_fraction,
                                          self.random_state, encoded)
        arrays = tr.SplitArrays(train=(X[tr_idx], encoded[tr_idx]),
                                val=(X[val_idx], encoded[val_idx]))
        self.history_, _ = tr.train(self.model_, arrays, self._train_config(),
                                    aug_cfg=self._augment_config(),
                                    seed=self.random_state)
        return self

    def decision_function(self, X):
        X = check_images(X, self.image_size)
        return tr.predict_logits(self.model_, X)

    def predict_proba(self, X):
        return mx.softmax_rows(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def save(self, path) -> None:
        vit.save_model(path, self.model_,
                       class_names=[str(c) for c in self.classes_])


class MaskedAutoencoderPretrainer(TransformerMixin, _EncoderParams, BaseEstimator):
    """Self-supervised encoder pretraining by masked-patch reconstruction.

    fit(X) needs no labels; transform(X) returns class embeddings from the
    pretrained encoder, and ``save_encoder`` emits a checkpoint that
    VitClassifier(init_checkpoint=...) can warm-start from.
    """

    def __init__(self, image_size=32, patch_size=4, dim=32, depth=2, n_heads=4,
                 mlp_ratio=4.0, mask_ratio=0.75, steps=300, batch_size=32,
                 lr=1e-3, weight_decay=0.05, warmup_steps=30, decoder_depth=2,
                 decoder_heads=2, random_state=0):
        self.image_size = image_size
        self.patch_size = patch_size
        self.dim = dim
        self.depth = depth
        self.n_heads = n_heads
        self.mlp_ratio = mlp_ratio
        self.mask_ratio = mask_ratio
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.decoder_depth = decoder_depth
        self.decoder_heads = decoder_heads
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_images(X, self.image_size)
        cfg = self._vit_config(num_classes=2)
        self.model_ = vit.VitModel(cfg, hd.HeadConfig(kind="linear"),
                                   seed=self.random_state)
        self.decoder_ = mae_mod.MaeDecoder(cfg, depth=self.decoder_depth,
                                           heads=self.decoder_heads,
                                           seed=self.random_state + 1)
        self.losses_ = mae_mod.pretrain(self.model_, self.decoder_, X,
                                        steps=self.steps,
                                        batch_size=self.batch_size, lr=self.lr,
                                        weight_decay=self.weight_decay,
                                        warmup_steps=self.warmup_steps,
                                        mask_ratio=self.mask_ratio,
                                        seed=self.random_state)
        return self

    def transform(self, X):
        X = check_images(X, self.image_size)
        out = []
        from . import autograd as ag
        with ag.no_grad():
            for start in range(0, len(X), self.batch_size):
                emb, _ = vit.encode(self.model_, dp.normalize(X[start:start + self.batch_size]))
                out.append(emb.data)
        return np.concatenate(out, axis=0)

    def save_encoder(self, path) -> None:
        mae_mod.save_encoder(path, self.model_)


class DistilledVitClassifier(ClassifierMixin, _EncoderParams, BaseEstimator):
    """Student classifier trained to match a frozen teacher.

    ``teacher`` is a fitted VitClassifier or a checkpoint path. The loss is
    the student's cross-entropy plus logit MSE plus alpha times the
    shallow-layer attention alignment.
    """

    def __init__(self, teacher=None, image_size=32, patch_size=4, dim=32,
                 depth=2, n_heads=4, mlp_ratio=4.0, head="gp",
                 rff_features=1024, length_scale=None, alpha=5e-5,
                 aligned_layers=(0, 1), include_ce=True, epochs=16,
                 batch_size=32, lr=1e-3, weight_decay=0.05, warmup_epochs=1,
                 augment=False, val_fraction=0.1, random_state=0):
        self.teacher = teacher
        self.image_size = image_size
        self.patch_size = patch_size
        self.dim = dim
        self.depth = depth
        self.n_heads = n_heads
        self.mlp_ratio = mlp_ratio
        self.head = head
        self.rff_features = rff_features
        self.length_scale = length_scale
        self.alpha = alpha
        self.aligned_layers = aligned_layers
        self.include_ce = include_ce
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.augment = augment
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _resolve_teacher(self) -> vit.VitModel:
        if isinstance(self.teacher, VitClassifier):
            return self.teacher.model_
        if isinstance(self.teacher, str):
            model, _ = vit.load_model(self.teacher)
            return model
        raise ValueError("teacher must be a fitted VitClassifier or a "
                         "checkpoint path")

    def fit(self, X, y):
        X = check_images(X, self.image_size)
        y = check_labels(y, len(X))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        teacher = self._resolve_teacher()

        cfg = self._vit_config(len(self.classes_))
        self.model_ = vit.VitModel(cfg, self._head_config(),
                                   seed=self.random_state)
        tr_idx, val_idx = train_val_split(len(X), self.val_fraction,
                                          self.random_state, encoded)
        arrays = tr.SplitArrays(train=(X[tr_idx], encoded[tr_idx]),
                                val=(X[val_idx], encoded[val_idx]))
        kd_cfg = kdist.KDConfig(alpha=self.alpha,
                                aligned_layers=tuple(self.aligned_layers),
                                include_ce=self.include_ce)
        self.log_ = kdist.distill(teacher, self.model_, arrays,
                                  self._train_config(), kd_cfg,
                                  aug_cfg=self._augment_config(),
                                  seed=self.random_state)
        return self

    def decision_function(self, X):
        X = check_images(X, self.image_size)
        return tr.predict_logits(self.model_, X)

    def predict_proba(self, X):
        return mx.softmax_rows(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

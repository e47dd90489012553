from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_labels
from .apr import AprConfig
from .attacks import AttackSpec
from .guided_filter import FilterConfig
from .objectives import MetricCombo
from .trainer import TrainPlan, train
from .vit import VitConfig, VitModel


class CAPClassifier(ClassifierMixin, BaseEstimator):
    """Vision transformer classifier trained with vanilla, TRADES or CAP updates.

    Parameters mirror the run configuration keys. ``X`` is a stack of square
    grayscale images in [0, 1]; any label values are accepted and mapped to
    ``classes_``.
    """

    def __init__(self, mode="cap", epochs=30, batch_size=64, lr=5e-4, beta=6.0, outer="se",
                 inner="kl", gamma=1e-4, lambda_soft=8 / 255, use_filter=True, window_size=5,
                 t=0.003, epsilon=8 / 255, step_size=2 / 255, train_steps=5, patch_size=4,
                 embed_dim=64, num_heads=4, depth=4, mlp_ratio=2, random_state=0):
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta = beta
        self.outer = outer
        self.inner = inner
        self.gamma = gamma
        self.lambda_soft = lambda_soft
        self.use_filter = use_filter
        self.window_size = window_size
        self.t = t
        self.epsilon = epsilon
        self.step_size = step_size
        self.train_steps = train_steps
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.depth = depth
        self.mlp_ratio = mlp_ratio
        self.random_state = random_state

    def to_plan(self) -> TrainPlan:
        return TrainPlan(
            mode=self.mode, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            beta=self.beta, combo=MetricCombo(self.outer, self.inner),
            attack=AttackSpec(method="pgd", epsilon=self.epsilon, step_size=self.step_size,
                              steps=self.train_steps, random_start=False),
            apr=AprConfig(gamma=self.gamma, lambda_soft=self.lambda_soft),
            filter=FilterConfig(self.window_size, self.t), use_filter=self.use_filter,
            seed=self.random_state,
        )

    def fit(self, X, y):
        X = check_images(X, dtype=np.float32, square=True)
        y = check_labels(y, len(X))
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit")
        cfg = VitConfig(image_size=X.shape[1], patch_size=self.patch_size, embed_dim=self.embed_dim,
                        num_heads=self.num_heads, depth=self.depth, mlp_ratio=self.mlp_ratio,
                        num_classes=len(self.classes_))
        self.model_ = VitModel(cfg, seed=self.random_state)
        _, self.history_ = train(self.model_, X, y_idx, self.to_plan())
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, dtype=np.float32, square=True)
        return self.model_.predict_proba(X)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

"""scikit-learn estimator wrapping the DFA trainer."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import from_dict
from .datasets import episode_from_arrays
from .trainer import predict_logits, train


class DFAClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Semi-supervised domain adaptation classifier.

    ``fit(X, y, domain)`` takes source and target rows together. ``domain``
    is 0 for source and 1 for target; target rows labeled ``unlabeled`` (-1
    by default) form the unlabeled split. Labeled target rows must be
    balanced across classes.

    ``transform`` returns unit-norm features; ``predict_proba`` the cosine
    classifier's probabilities.

    Parameters
    ----------
    mode : {"dfa", "s+t", "ent"}
    n_iterations : int
    batch_size : int
        Labeled batch size, half source and half target.
    gamma : float
        Bank pace.
    alpha1, alpha2, alpha3 : float
        Weights of the MMD, pseudo-label and perturbation losses.
    hidden, feature_dim, temperature, tau_p, eps_dist, eps_ent,
    perturb_radius, lr, momentum, weight_decay : see ``dfa.config``.
    random_state : int
    """

    def __init__(self, mode="dfa", n_iterations=1000, batch_size=32, unlabeled_batch_size=32,
                 gamma=0.1, alpha1=1.0, alpha2=1.0, alpha3=1.0, ent_weight=0.1, hidden=(64, 64),
                 feature_dim=16, temperature=0.05, tau_p=0.07, eps_dist=0.3, eps_ent=0.5,
                 perturb_radius=0.5, lr=0.01, momentum=0.9, weight_decay=5e-4, dtype="float32",
                 unlabeled=-1, random_state=0):
        self.mode = mode
        self.n_iterations = n_iterations
        self.batch_size = batch_size
        self.unlabeled_batch_size = unlabeled_batch_size
        self.gamma = gamma
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.alpha3 = alpha3
        self.ent_weight = ent_weight
        self.hidden = hidden
        self.feature_dim = feature_dim
        self.temperature = temperature
        self.tau_p = tau_p
        self.eps_dist = eps_dist
        self.eps_ent = eps_ent
        self.perturb_radius = perturb_radius
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.dtype = dtype
        self.unlabeled = unlabeled
        self.random_state = random_state

    def _config(self, n_classes, dim):
        return from_dict({
            "mode": self.mode,
            "seeds": [int(self.random_state)],
            "dataset": {"n_classes": int(n_classes), "dim": int(dim)},
            "model": {"hidden": [int(h) for h in self.hidden], "feature_dim": int(self.feature_dim),
                      "temperature": float(self.temperature), "dtype": self.dtype},
            "bank": {"gamma": float(self.gamma)},
            "pseudo": {"tau_p": float(self.tau_p), "eps_dist": float(self.eps_dist),
                       "eps_ent": float(self.eps_ent)},
            "perturb": {"radius": float(self.perturb_radius)},
            "loss": {"alpha1": float(self.alpha1), "alpha2": float(self.alpha2),
                     "alpha3": float(self.alpha3), "ent_weight": float(self.ent_weight)},
            "optim": {"lr": float(self.lr), "momentum": float(self.momentum),
                      "weight_decay": float(self.weight_decay), "iterations": int(self.n_iterations),
                      "batch_size": int(self.batch_size),
                      "unlabeled_batch_size": int(self.unlabeled_batch_size)},
            "eval": {"interval": int(self.n_iterations)},
        })

    def fit(self, X, y, domain=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        if domain is None:
            raise ValueError("fit needs `domain` (0 = source, 1 = target) for every row")
        domain = np.asarray(domain)
        if domain.shape[0] != X.shape[0]:
            raise ValueError("domain must have one entry per row of X")
        labeled = y != self.unlabeled
        self.classes_ = unique_labels(y[labeled])
        codes = np.full(len(y), -1, dtype=np.int64)
        codes[labeled] = np.searchsorted(self.classes_, y[labeled])
        episode = episode_from_arrays(X, codes, domain, len(self.classes_))
        self.config_ = self._config(len(self.classes_), X.shape[1])
        result = train(episode, self.config_, int(self.random_state))
        self.extractor_ = result.extractor
        self.classifier_ = result.classifier
        self.prototypes_ = result.bank.prototypes().numpy()
        self.history_ = result.history
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "extractor_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict_proba(self, X):
        X = self._check(X)
        return torch.softmax(predict_logits(self.extractor_, self.classifier_, X), 1).double().numpy()

    def predict(self, X):
        check_is_fitted(self, "extractor_")
        return self.classes_[self.predict_proba(X).argmax(1)]

    def transform(self, X):
        X = self._check(X)
        self.extractor_.eval()
        dtype = next(self.extractor_.parameters()).dtype
        with torch.no_grad():
            return self.extractor_(torch.tensor(X, dtype=dtype)).double().numpy()

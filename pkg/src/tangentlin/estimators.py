"""scikit-learn style wrappers around the network, trainer and kernel."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .analysis import jacobian
from .network import FullyConnected, NetworkSpec, forward, init_weights
from .training import Dataset, gradient_descent, line_search_lr


def _spec(est, input_dim, head, output_dim):
    layers = tuple(FullyConnected(est.width, est.activation, bias=est.bias) for _ in range(est.depth))
    return NetworkSpec(input_dim, layers, head=head, output_dim=output_dim, parameterization=est.parameterization)


class _NetworkMixin:
    def _check_hyper(self):
        if int(self.width) < 1 or int(self.depth) < 1:
            raise ValueError("width and depth must be positive")
        if self.lr is not None and self.lr <= 0:
            raise ValueError("lr must be positive")

    def _train(self, X, targets, C, head, loss, output_dim):
        self._check_hyper()
        self.spec_ = _spec(self, X.shape[1], head, output_dim)
        W0 = init_weights(self.spec_, seed=self.random_state)
        data = _RawData(X, targets, C)
        lr = self.lr if self.lr is not None else line_search_lr(self.spec_, W0, data, loss)
        self.trajectory_ = gradient_descent(self.spec_, W0, data, loss, lr, self.max_epochs, self.tol,
                                            self.snapshot_every)
        self.weights_ = self.trajectory_.W
        self.lr_ = lr
        self.n_features_in_ = X.shape[1]
        self.delta_k_ = self.trajectory_.delta_k()
        self.converged_ = self.trajectory_.converged
        return self

    def _raw(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return forward(self.spec_, self.weights_, X).output


class _RawData(Dataset):
    """Dataset whose targets are given directly rather than as class labels."""

    def __init__(self, x, targets, C):
        object.__setattr__(self, "x", np.asarray(x, dtype=float))
        object.__setattr__(self, "labels", np.zeros(len(x), dtype=int))
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "_targets", np.asarray(targets, dtype=float))

    @property
    def onehot(self):
        return self._targets


class WideNetworkRegressor(_NetworkMixin, RegressorMixin, BaseEstimator):
    """Fully connected network trained by full-batch gradient descent on the square loss.

    After ``fit``: ``weights_``, ``trajectory_``, ``delta_k_`` (relative
    kernel change along training) and ``lr_``. With ``lr=None`` the learning
    rate comes from a short line search.
    """

    def __init__(self, width=256, depth=1, activation="tanh", bias=False, parameterization="ntk", lr=None,
                 max_epochs=2000, tol=1e-4, snapshot_every=10, random_state=0):
        self.width = width
        self.depth = depth
        self.activation = activation
        self.bias = bias
        self.parameterization = parameterization
        self.lr = lr
        self.max_epochs = max_epochs
        self.tol = tol
        self.snapshot_every = snapshot_every
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True, multi_output=True)
        Y = y.reshape(len(y), -1).astype(float)
        self._single_output = y.ndim == 1
        return self._train(X, Y, Y.shape[1], "linear", "square", Y.shape[1])

    def predict(self, X):
        out = self._raw(X)
        return out[:, 0] if self._single_output else out


class WideNetworkClassifier(_NetworkMixin, ClassifierMixin, BaseEstimator):
    """Softmax-headed network trained with the cross-entropy loss."""

    def __init__(self, width=256, depth=1, activation="relu", bias=True, parameterization="ntk", lr=None,
                 max_epochs=5000, tol=1e-4, snapshot_every=10, random_state=0):
        self.width = width
        self.depth = depth
        self.activation = activation
        self.bias = bias
        self.parameterization = parameterization
        self.lr = lr
        self.max_epochs = max_epochs
        self.tol = tol
        self.snapshot_every = snapshot_every
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        idx = np.searchsorted(self.classes_, y)
        Y = np.eye(len(self.classes_))[idx]
        return self._train(X, Y, len(self.classes_), "softmax", "cross-entropy", len(self.classes_))

    def predict_proba(self, X):
        return self._raw(X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]


class TangentFeatures(TransformerMixin, BaseEstimator):
    """Maps inputs to gradient features at a random initialization.

    ``transform(X)`` has one row per (input, output) pair, ordered input-major,
    so ``Phi @ Phi.T`` is the tangent kernel at the initial weights.
    """

    def __init__(self, width=256, depth=1, activation="tanh", bias=False, head="linear", output_dim=1,
                 parameterization="ntk", random_state=0):
        self.width = width
        self.depth = depth
        self.activation = activation
        self.bias = bias
        self.head = head
        self.output_dim = output_dim
        self.parameterization = parameterization
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X)
        if int(self.width) < 1 or int(self.depth) < 1:
            raise ValueError("width and depth must be positive")
        self.spec_ = _spec(self, X.shape[1], self.head, self.output_dim)
        self.weights_ = init_weights(self.spec_, seed=self.random_state)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return jacobian(self.spec_, self.weights_, X)

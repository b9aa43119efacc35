"""Scikit-learn style wrapper around a full federated training run."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import parse_config
from .data import ClientDataset, ClientDatasetSpec, dice
from .fedcore.server import Federation
from .model import LayeredModel


def check_images(X, name: str = "X") -> np.ndarray:
    """Coerce to float32 [n, C, H, W]; a 3-D input is read as single-channel."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty [n, C, H, W] or [n, H, W] array, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return X


def check_masks(y, X: np.ndarray) -> np.ndarray:
    y = check_images(y, "y")
    if y.shape != (X.shape[0], 1) + X.shape[2:]:
        raise ValueError(f"y shape {y.shape} does not match X shape {X.shape} (expected one mask channel)")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("y must be a binary mask")
    return y


def check_client_ids(client_ids, n: int) -> np.ndarray:
    ids = np.asarray(client_ids)
    if ids.shape != (n,):
        raise ValueError(f"client_ids must have shape ({n},), got {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer) or ids.min() < 0 or ids.max() >= 2**16:
        raise ValueError("client_ids must be integers in [0, 65535]")
    return ids


class FederatedSegmenter(BaseEstimator):
    """Train one global segmentation model across clients defined by ``client_ids``.

    Each distinct id becomes a client holding its own samples; evaluation
    during training uses the client's training split.
    """

    def __init__(self, method: str = "fedsoda", rounds: int = 30, local_epochs: int = 2, seed: int = 0,
                 lam: float = 0.4, gamma: float = 0.25, epsilon: float = 0.1, lr: float = 1e-4,
                 batch_size: int = 4, transport: str = "inproc"):
        self.method = method
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.seed = seed
        self.lam = lam
        self.gamma = gamma
        self.epsilon = epsilon
        self.lr = lr
        self.batch_size = batch_size
        self.transport = transport

    def _config(self):
        params = self.get_params()
        params["lambda"] = params.pop("lam")
        return parse_config(params)

    def fit(self, X, y, client_ids):
        X = check_images(X)
        y = check_masks(y, X)
        ids = check_client_ids(client_ids, len(X))
        cfg = self._config()
        datasets = []
        for cid in np.unique(ids):
            sel = ids == cid
            spec = ClientDatasetSpec(int(cid), int(sel.sum()), tuple(X.shape[2:]))
            empty = X[:0]
            datasets.append(ClientDataset(spec, X[sel], y[sel], empty, y[:0]))
        fed = Federation(cfg.replace(num_clients=len(datasets)), datasets)
        with fed:
            fed.run()
        self.model_ = LayeredModel(fed.server.spec, fed.server.global_params)
        self.history_ = [
            {"round": r.round, "client_id": cid, **m} for r in fed.reports for cid, m in sorted(r.metrics.items())
        ]
        self.n_clients_ = len(datasets)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X)
        if X.shape[1] != self.model_.in_channels:
            raise ValueError(f"X has {X.shape[1]} channels, model expects {self.model_.in_channels}")
        _, y_hat = self.model_.forward_with_taps(X, training=False)
        return y_hat

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.float32)

    def score(self, X, y) -> float:
        """Mean per-image Dice of the predicted masks."""
        X = check_images(X)
        y = check_masks(y, X)
        pred = self.predict(X)
        return float(np.mean([dice(y[i], pred[i]) for i in range(len(y))]))


__all__ = ["FederatedSegmenter", "check_images", "check_masks", "check_client_ids"]

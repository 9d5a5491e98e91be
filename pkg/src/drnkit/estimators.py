"""Scikit-learn style estimators wrapping the network and training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .blocks import DrnNet, classify_config, sequence_config
from .ctc import AlphabetSpec, ctc_greedy_decode
from .data import DatasetSplit
from .tensor import Tensor
from .train import Sgd, SgdConfig, fit


def check_images(X, image_size=None) -> np.ndarray:
    """Validate and coerce input to (n, 1, H, W) float32 in [0, 1].

    Accepts (n, H, W), (n, 1, H, W), or flattened (n, H*W) when
    ``image_size`` pins H and W. uint8 input is scaled by 1/255.
    """
    arr = np.asarray(X)
    if arr.ndim == 0 or arr.shape[0] == 0:
        raise ValueError("X must contain at least one sample")
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32, copy=False)
    if arr.ndim == 2:
        if image_size is None:
            side = int(round(np.sqrt(arr.shape[1])))
            if side * side != arr.shape[1]:
                raise ValueError(
                    f"cannot infer image size from {arr.shape[1]} flat features"
                )
            image_size = (side, side)
        arr = arr.reshape(arr.shape[0], 1, *image_size)
    elif arr.ndim == 3:
        arr = arr[:, None, :, :]
    elif arr.ndim != 4:
        raise ValueError(f"X must have 2, 3, or 4 dimensions, got {arr.ndim}")
    if arr.shape[1] != 1:
        raise ValueError(f"images must be single-channel, got {arr.shape[1]} channels")
    if image_size is not None and arr.shape[2:] != tuple(image_size):
        raise ValueError(f"images are {arr.shape[2:]}, expected {tuple(image_size)}")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"pixel values must lie in [0, 1], got [{lo:g}, {hi:g}]")
    return np.ascontiguousarray(arr)


class DrnClassifier(BaseEstimator, ClassifierMixin):
    """Single-character classifier: GDB + down-sampling + soft-max head.

    Parameters mirror the network knobs (channel widths, block count B,
    inner layers L, growth rate k) and the SGD settings. ``fit`` trains
    from scratch; ``predict_proba`` runs inference in batches.
    """

    def __init__(
        self,
        shallow_channels: int = 16,
        num_rrdbs: int = 3,
        layers_per_block: int = 4,
        growth_rate: int = 12,
        conv_flavor: str = "depthwise_separable",
        dropout: tuple[float, float, float] = (0.0, 0.0, 0.0),
        learning_rate: float = 0.1,
        momentum: float = 0.9,
        weight_decay: float = 1e-4,
        schedule: str = "constant",
        epochs: int = 5,
        batch_size: int = 128,
        random_state: int = 0,
        verbose: bool = False,
    ):
        self.shallow_channels = shallow_channels
        self.num_rrdbs = num_rrdbs
        self.layers_per_block = layers_per_block
        self.growth_rate = growth_rate
        self.conv_flavor = conv_flavor
        self.dropout = dropout
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state
        self.verbose = verbose

    def fit(self, X, y):
        images = check_images(X)
        y = np.asarray(y)
        if y.shape[0] != images.shape[0]:
            raise ValueError(f"{images.shape[0]} samples but {y.shape[0]} labels")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.image_size_ = images.shape[2:]
        self.n_features_in_ = int(np.prod(self.image_size_))

        config = classify_config(
            image_size=self.image_size_,
            num_classes=len(self.classes_),
            shallow_channels=self.shallow_channels,
            num_rrdbs=self.num_rrdbs,
            layers_per_block=self.layers_per_block,
            growth_rate=self.growth_rate,
            conv_flavor=self.conv_flavor,
            dropout=self.dropout,
        )
        self.model_ = DrnNet(config, seed=self.random_state)
        self.optimizer_ = Sgd(self.model_, SgdConfig(
            base_lr=self.learning_rate, momentum=self.momentum,
            weight_decay=self.weight_decay, schedule=self.schedule,
        ))
        split = DatasetSplit(images, encoded.astype(np.int64), "classify")
        fit(
            self.model_, split, self.optimizer_,
            epochs=self.epochs, batch_size=self.batch_size, seed=self.random_state,
            log=print if self.verbose else None,
        )
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        images = check_images(X, self.image_size_)
        self.model_.eval()
        out = []
        for start in range(0, images.shape[0], 256):
            logits = self.model_(Tensor(images[start : start + 256])).data
            z = logits - logits.max(axis=1, keepdims=True)
            ez = np.exp(z)
            out.append(ez / ez.sum(axis=1, keepdims=True))
        return np.concatenate(out, axis=0)

    def predict(self, X) -> np.ndarray:
        probs = self.predict_proba(X)
        return self.classes_[probs.argmax(axis=1)]


class DrnSequenceRecognizer(BaseEstimator):
    """String transcriber: sequence-head network + CTC loss + greedy decode.

    ``fit`` expects images of a fixed canvas and string labels over
    ``alphabet``; ``predict`` returns decoded strings. ``score`` is
    whole-string accuracy: a sample counts only on exact match.
    """

    def __init__(
        self,
        alphabet: str = "0123456789",
        max_label_len: int = 5,
        shallow_channels: int = 32,
        num_rrdbs: int = 3,
        layers_per_block: int = 4,
        growth_rate: int = 16,
        conv_flavor: str = "depthwise_separable",
        dropout_down: float = 0.2,
        learning_rate: float = 0.1,
        momentum: float = 0.9,
        weight_decay: float = 1e-4,
        schedule: str = "constant",
        epochs: int = 5,
        batch_size: int = 64,
        early_stop_patience: int = 0,
        random_state: int = 0,
        verbose: bool = False,
    ):
        self.alphabet = alphabet
        self.max_label_len = max_label_len
        self.shallow_channels = shallow_channels
        self.num_rrdbs = num_rrdbs
        self.layers_per_block = layers_per_block
        self.growth_rate = growth_rate
        self.conv_flavor = conv_flavor
        self.dropout_down = dropout_down
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.epochs = epochs
        self.batch_size = batch_size
        self.early_stop_patience = early_stop_patience
        self.random_state = random_state
        self.verbose = verbose

    def fit(self, X, y, X_val=None, y_val=None):
        images = check_images(X)
        if len(y) != images.shape[0]:
            raise ValueError(f"{images.shape[0]} samples but {len(y)} labels")
        self.alphabet_ = AlphabetSpec(self.alphabet)
        self.image_size_ = images.shape[2:]
        labels = tuple(self.alphabet_.encode(text) for text in y)
        too_long = max((len(l) for l in labels), default=0)
        if too_long > self.max_label_len:
            raise ValueError(
                f"label of length {too_long} exceeds max_label_len {self.max_label_len}"
            )

        config = sequence_config(
            image_size=self.image_size_,
            alphabet_size=self.alphabet_.size,
            max_label_len=self.max_label_len,
            shallow_channels=self.shallow_channels,
            num_rrdbs=self.num_rrdbs,
            layers_per_block=self.layers_per_block,
            growth_rate=self.growth_rate,
            conv_flavor=self.conv_flavor,
            dropout_down=self.dropout_down,
        )
        self.model_ = DrnNet(config, seed=self.random_state)
        self.optimizer_ = Sgd(self.model_, SgdConfig(
            base_lr=self.learning_rate, momentum=self.momentum,
            weight_decay=self.weight_decay, schedule=self.schedule,
        ))
        split = DatasetSplit(images, labels, "sequence")
        val_split = None
        if X_val is not None:
            val_images = check_images(X_val, self.image_size_)
            val_labels = tuple(self.alphabet_.encode(text) for text in y_val)
            val_split = DatasetSplit(val_images, val_labels, "sequence")
        fit(
            self.model_, split, self.optimizer_,
            epochs=self.epochs, batch_size=self.batch_size, seed=self.random_state,
            test_split=val_split, early_stop_patience=self.early_stop_patience,
            log=print if self.verbose else None,
        )
        return self

    def predict(self, X) -> list[str]:
        check_is_fitted(self, "model_")
        images = check_images(X, self.image_size_)
        self.model_.eval()
        decoded = []
        for start in range(0, images.shape[0], 128):
            logits = self.model_(Tensor(images[start : start + 128])).data
            for row in logits:
                decoded.append(self.alphabet_.decode(ctc_greedy_decode(row)))
        return decoded

    def score(self, X, y) -> float:
        predictions = self.predict(X)
        hits = sum(1 for p, t in zip(predictions, y) if p == t)
        return hits / len(predictions)

"""Reference CNN for downstream accuracy: train on synthetic samples, test on real data."""

import logging
from typing import Optional

import numpy as np
from tqdm import tqdm

from core import tensor as T
from core.layers import Conv2d, Linear, Placement
from core.optim import SGD
from core.params import ParamStore
from core.tensor import Tape, Tensor, get_default_dtype
from utils.config import AppConfig
from utils.errors import DataError
from utils.helpers import ceil_div, make_rng, progress_disabled

logger = logging.getLogger(__name__)


class SmallCNN:
    def __init__(self, channels: int, size: int, num_classes: int, seed: int = 0):
        self.store = ParamStore()
        rng = make_rng(seed)
        place = Placement("classifier", location="classifier", block="classifier")
        self.conv1 = Conv2d(self.store, "conv1", channels, 8, 3, rng, place, stride=2, padding=1)
        self.conv2 = Conv2d(self.store, "conv2", 8, 16, 3, rng, place, stride=2, padding=1)
        side = ceil_div(ceil_div(size, 2), 2)
        self.flat = 16 * side * side
        self.head = Linear(self.store, "head", self.flat, num_classes, rng, place)

    def __call__(self, x) -> Tensor:
        h = T.relu(self.conv1(T.as_tensor(x)))
        h = T.relu(self.conv2(h))
        return self.head(T.reshape(h, (h.shape[0], self.flat)))

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        preds = [np.argmax(self(Tensor(images[i:i + batch_size], dtype=get_default_dtype())).data, axis=1)
                 for i in range(0, images.shape[0], batch_size)]
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _check_labels(labels: np.ndarray, what: str) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if (labels == AppConfig.UNLABELED).any():
        raise DataError(f"{what} contains unlabeled samples")
    return labels


def train_eval_classifier(train_images: np.ndarray, train_labels: np.ndarray,
                          test_images: np.ndarray, test_labels: np.ndarray,
                          num_classes: Optional[int] = None, epochs: int = 30,
                          batch_size: int = 32, lr: float = 0.05, momentum: float = 0.9,
                          seed: int = 0) -> float:
    """Accuracy on the real test set of a CNN trained non-privately on the synthetic set."""
    train_labels = _check_labels(train_labels, "training set")
    test_labels = _check_labels(test_labels, "test set")
    if np.unique(train_labels).size < 2:
        raise DataError("classifier training needs at least two classes")
    if test_images.shape[0] == 0:
        raise DataError("classifier evaluation needs a non-empty test set")
    k = num_classes or int(max(train_labels.max(), test_labels.max())) + 1
    model = SmallCNN(train_images.shape[1], train_images.shape[2], k, seed=seed)
    opt = SGD(model.store, lr=lr, momentum=momentum)
    rng = make_rng(seed + 1)
    n = train_images.shape[0]
    for _ in tqdm(range(epochs), desc="classifier", disable=progress_disabled()):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            with Tape() as tape:
                loss = T.cross_entropy(model(Tensor(train_images[idx], dtype=get_default_dtype())),
                                       train_labels[idx])
                grads = tape.backward(loss, model.store.trainable())
            opt.step(grads)
    accuracy = float(np.mean(model.predict(test_images) == test_labels))
    logger.info("classifier accuracy %.4f on %d test images", accuracy, test_images.shape[0])
    return accuracy

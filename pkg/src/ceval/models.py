"""Classifiers, training loops and the JSON weight format.

The three architectures are scikit-learn estimators (``fit``, ``predict``,
``predict_proba``, ``decision_function``, ``get_params``) whose forward and
backward passes run on :mod:`ceval.numerics` graphs. Besides the estimator
surface each classifier exposes :meth:`Classifier.input_gradient`, the one
primitive every explainer and attack needs.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .datasets import Dataset
from .numerics import Graph
from .optim import SGD, Adam

__all__ = [
    "AdversarialConfig",
    "TrainConfig",
    "Classifier",
    "AffineClassifier",
    "MLPClassifier",
    "ConvNetClassifier",
    "TrainingDivergedError",
    "ModelFormatError",
    "ModelVersionError",
    "predict",
    "train",
    "train_adversarial",
    "loss_component",
    "adversarial_accuracy",
    "accuracy",
    "save_model",
    "load_model",
    "make_classifier",
    "ARCHITECTURES",
    "FORMAT_VERSION",
]

FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """The training loss became NaN or infinite."""


class ModelFormatError(ValueError):
    """A model file could not be parsed."""


class ModelVersionError(ModelFormatError):
    """A model file declares an unsupported ``format_version``."""


@dataclass
class AdversarialConfig:
    """Adversarial training with iterative sign-gradient samples.

    ``epsilon`` bounds the normalized L2 distortion ``||delta||_2 / sqrt(n)``;
    the iterative attack also clips each coordinate to ``[x - epsilon,
    x + epsilon]`` and takes ``iters`` steps of size ``step * epsilon``.
    """

    epsilon: float
    alternate: bool = True
    iters: int = 10
    step: float = 0.25

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("adversarial epsilon must be positive")
        if self.iters < 1:
            raise ValueError("adversarial iters must be >= 1")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    adversarial: AdversarialConfig | None = None

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if isinstance(self.adversarial, dict):
            self.adversarial = AdversarialConfig(**self.adversarial)

    def make_optimizer(self):
        if self.optimizer == "sgd":
            return SGD(self.lr)
        return Adam(self.lr, self.beta1, self.beta2, self.eps_adam)

    def to_dict(self) -> dict:
        return asdict(self)


def _he_uniform(rng, fan_in, shape):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Classifier(ClassifierMixin, BaseEstimator):
    """Base class for differentiable multi-class classifiers.

    Subclasses define ``architecture``, :meth:`_init_weights` and
    :meth:`_build`. Fitted state lives in ``weights_`` (an ordered dict of
    named arrays), ``classes_`` and ``history_``.
    """

    architecture = "base"

    def __init__(self, input_shape=None, num_classes=None, config=None):
        self.input_shape = input_shape
        self.num_classes = num_classes
        self.config = config

    # ---------------------------------------------------------- construction
    def _shape(self) -> tuple[int, ...]:
        if self.input_shape is None:
            raise ValueError("input_shape is not set")
        return tuple(int(s) for s in np.atleast_1d(self.input_shape))

    @property
    def n_features(self) -> int:
        return int(np.prod(self._shape()))

    def _init_weights(self, rng) -> dict:
        raise NotImplementedError

    def _build(self, g: Graph, x):
        """Add parameter inputs and layers to ``g``; return the logits node."""
        raise NotImplementedError

    def _to_graph(self, weights: dict) -> dict:
        return weights

    def _from_graph(self, grads: dict) -> dict:
        return {name: grads[name] for name in self.weights_}

    def _graph(self):
        cache = self.__dict__.get("_graph_cache")
        if cache is None:
            g = Graph()
            x = g.input("x", (None,) + self._shape())
            logits = self._build(g, x)
            target = g.input("target", (None, int(self.num_classes)))
            loss = g.cross_entropy(logits, target, reduction="none", name="loss")
            cache = (g, logits, loss)
            self.__dict__["_graph_cache"] = cache
        return cache

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_graph_cache", None)
        return state

    def initialize(self, seed: int = 0) -> "Classifier":
        """Draw fresh weights without training."""
        self.weights_ = self._init_weights(np.random.default_rng(seed))
        self.classes_ = np.arange(int(self.num_classes))
        self.history_ = []
        self.__dict__.pop("_graph_cache", None)
        return self

    def set_weights(self, weights: dict) -> "Classifier":
        self.weights_ = {k: np.array(v, dtype=np.float64) for k, v in weights.items()}
        self.classes_ = np.arange(int(self.num_classes))
        if not hasattr(self, "history_"):
            self.history_ = []
        return self

    # ------------------------------------------------------------- evaluation
    def _as_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        shape = self._shape()
        if X.shape == shape:
            return X[None]
        if X.ndim == 2 and X.shape[1] == self.n_features and X.shape[1:] != shape:
            return X.reshape((X.shape[0],) + shape)
        if X.ndim == 1 and X.size == self.n_features:
            return X.reshape((1,) + shape)
        if X.shape[1:] != shape:
            raise ValueError(f"expected inputs of shape {shape}, got {X.shape}")
        return X

    def _feed(self, X, target=None) -> dict:
        feed = dict(self._to_graph(self.weights_))
        feed["x"] = X
        if target is not None:
            feed["target"] = target
        return feed

    def decision_function(self, X) -> np.ndarray:
        """Logits, shape ``(B, num_classes)``."""
        check_is_fitted(self, "weights_")
        g, logits, _ = self._graph()
        return g.forward(self._feed(self._as_batch(X)), logits).copy()

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        # np.argmax returns the lowest index on ties
        return self.decision_function(X).argmax(axis=1)

    def input_gradient(self, X, dlogits) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(logits, d <dlogits, logits> / dX)`` for a batch."""
        check_is_fitted(self, "weights_")
        g, logits, _ = self._graph()
        Xb = self._as_batch(X)
        z = g.forward(self._feed(Xb), logits).copy()
        grad = g.backward(np.asarray(dlogits, dtype=np.float64).reshape(z.shape))["x"]
        return z, grad

    def loss_gradient(self, X, labels) -> tuple[np.ndarray, np.ndarray]:
        """Per-row cross-entropy and its gradient with respect to the inputs."""
        check_is_fitted(self, "weights_")
        g, _, loss = self._graph()
        Xb = self._as_batch(X)
        target = np.eye(int(self.num_classes))[np.asarray(labels, dtype=np.int64).reshape(-1)]
        values = g.forward(self._feed(Xb, target), loss).copy()
        grad = g.backward(np.ones_like(values))["x"]
        return values, grad

    def _loss_and_weight_grads(self, X, labels):
        g, logits, loss = self._graph()
        target = np.eye(int(self.num_classes))[labels]
        values = g.forward(self._feed(X, target), loss)
        z = g.value(logits).copy()
        grads = g.backward(np.full_like(values, 1.0 / len(values)))
        return float(values.mean()), z, self._from_graph(grads)

    # --------------------------------------------------------------- training
    def fit(self, X, y, sample_weight=None):
        """Train on arrays ``X`` (``(N, *input_shape)``) and labels ``y``."""
        from sklearn.utils.validation import check_array

        X = check_array(np.asarray(X, dtype=np.float64).reshape(len(X), -1),
                        dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if self.input_shape is None:
            self.input_shape = (X.shape[1],)
        if self.num_classes is None:
            self.num_classes = int(y.max()) + 1
        X = X.reshape((len(X),) + self._shape())
        data = Dataset(X, y, num_classes=int(self.num_classes))
        cfg = self.config if self.config is not None else TrainConfig()
        if cfg.adversarial is not None:
            return train_adversarial(self, data, cfg)
        return train(self, data, cfg)

    def weight_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(v).tobytes() for v in self.weights_.values())


class AffineClassifier(Classifier):
    """``logits = W x + b`` with ``W`` of shape ``(num_classes, n_features)``."""

    architecture = "affine"

    @classmethod
    def from_params(cls, W, b, input_shape=None) -> "AffineClassifier":
        W = np.asarray(W, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        model = cls(input_shape=input_shape or (W.shape[1],), num_classes=W.shape[0])
        return model.set_weights({"W": W, "b": b})

    @property
    def coef_(self) -> np.ndarray:
        return self.weights_["W"]

    @property
    def intercept_(self) -> np.ndarray:
        return self.weights_["b"]

    def _init_weights(self, rng):
        m, n = int(self.num_classes), self.n_features
        return {"W": np.zeros((m, n)), "b": np.zeros(m)}

    def _build(self, g, x):
        Wt = g.input("Wt", (self.n_features, int(self.num_classes)))
        b = g.input("b", (int(self.num_classes),))
        return g.add(g.matmul(g.flatten(x), Wt), b, name="logits")

    def _to_graph(self, weights):
        return {"Wt": np.ascontiguousarray(weights["W"].T), "b": weights["b"]}

    def _from_graph(self, grads):
        return {"W": np.ascontiguousarray(grads["Wt"].T), "b": grads["b"]}


class MLPClassifier(Classifier):
    """Fully connected ReLU network."""

    architecture = "mlp"

    def __init__(self, hidden_layer_sizes=(128,), input_shape=None, num_classes=None,
                 config=None):
        super().__init__(input_shape=input_shape, num_classes=num_classes, config=config)
        self.hidden_layer_sizes = hidden_layer_sizes

    def _sizes(self):
        return [self.n_features, *[int(h) for h in self.hidden_layer_sizes], int(self.num_classes)]

    def _init_weights(self, rng):
        weights = {}
        sizes = self._sizes()
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            weights[f"fc{i}.weight"] = _he_uniform(rng, fan_in, (fan_in, fan_out))
            weights[f"fc{i}.bias"] = np.zeros(fan_out)
        return weights

    def _build(self, g, x):
        h = g.flatten(x)
        sizes = self._sizes()
        last = len(sizes) - 2
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            W = g.input(f"fc{i}.weight", (fan_in, fan_out))
            b = g.input(f"fc{i}.bias", (fan_out,))
            h = g.add(g.matmul(h, W), b)
            if i < last:
                h = g.relu(h)
        return h


class ConvNetClassifier(Classifier):
    """LeNet-lite: conv 8@5x5, relu, pool, conv 16@5x5, relu, pool, fc 128, fc m."""

    architecture = "lenet"

    def __init__(self, input_shape=(1, 28, 28), num_classes=10, config=None):
        super().__init__(input_shape=input_shape, num_classes=num_classes, config=config)

    def _dims(self):
        c, h, w = self._shape()
        h1, w1 = (h - 4) // 2, (w - 4) // 2
        h2, w2 = (h1 - 4) // 2, (w1 - 4) // 2
        if min(h2, w2) < 1 or (h - 4) % 2 or (w - 4) % 2 or (h1 - 4) % 2 or (w1 - 4) % 2:
            raise ValueError(f"input shape {self._shape()} does not fit LeNet-lite")
        return c, 16 * h2 * w2

    def _init_weights(self, rng):
        c, flat = self._dims()
        m = int(self.num_classes)
        return {
            "conv1.weight": _he_uniform(rng, c * 25, (8, c, 5, 5)),
            "conv1.bias": np.zeros((8, 1, 1)),
            "conv2.weight": _he_uniform(rng, 8 * 25, (16, 8, 5, 5)),
            "conv2.bias": np.zeros((16, 1, 1)),
            "fc1.weight": _he_uniform(rng, flat, (flat, 128)),
            "fc1.bias": np.zeros(128),
            "fc2.weight": _he_uniform(rng, 128, (128, m)),
            "fc2.bias": np.zeros(m),
        }

    def _build(self, g, x):
        c, flat = self._dims()
        m = int(self.num_classes)
        w1 = g.input("conv1.weight", (8, c, 5, 5))
        b1 = g.input("conv1.bias", (8, 1, 1))
        w2 = g.input("conv2.weight", (16, 8, 5, 5))
        b2 = g.input("conv2.bias", (16, 1, 1))
        f1 = g.input("fc1.weight", (flat, 128))
        fb1 = g.input("fc1.bias", (128,))
        f2 = g.input("fc2.weight", (128, m))
        fb2 = g.input("fc2.bias", (m,))
        h = g.maxpool2(g.relu(g.add(g.conv2d(x, w1), b1)))
        h = g.maxpool2(g.relu(g.add(g.conv2d(h, w2), b2)))
        h = g.relu(g.add(g.matmul(g.flatten(h), f1), fb1))
        return g.add(g.matmul(h, f2), fb2)


ARCHITECTURES = {
    "affine": AffineClassifier,
    "mlp": MLPClassifier,
    "lenet": ConvNetClassifier,
}


def make_classifier(arch: str, input_shape, num_classes: int, *, hidden=(128,),
                    config: TrainConfig | None = None) -> Classifier:
    """Unfitted classifier of architecture ``arch`` (a key of ``ARCHITECTURES``)."""
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    if arch == "mlp":
        return MLPClassifier(hidden_layer_sizes=tuple(hidden), input_shape=input_shape,
                             num_classes=num_classes, config=config)
    return ARCHITECTURES[arch](input_shape=input_shape, num_classes=num_classes, config=config)


# ----------------------------------------------------------------- functions
def predict(model: Classifier, x) -> tuple[np.ndarray, int]:
    """Logits and label (lowest index wins ties) for one input in ``[0, 1]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model._shape() and x.size != model.n_features:
        raise ValueError(f"expected input of shape {model._shape()}, got {x.shape}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("input entries must lie in [0, 1]")
    logits = model.decision_function(x)[0]
    return logits, int(np.argmax(logits))


def loss_component(model: Classifier, x, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy ``J_l`` of one input against ``label`` and its input gradient."""
    if not 0 <= label < int(model.num_classes):
        raise ValueError(f"label {label} outside [0, {model.num_classes})")
    x = np.asarray(x, dtype=np.float64)
    values, grad = model.loss_gradient(x, [label])
    return float(values[0]), grad[0].reshape(x.shape)


def accuracy(model: Classifier, data: Dataset, batch_size: int = 1000) -> float:
    correct = 0
    for start in range(0, len(data), batch_size):
        stop = start + batch_size
        correct += int((model.predict(data.images[start:stop]) == data.labels[start:stop]).sum())
    return correct / max(1, len(data))


def _check_training_inputs(model, data: Dataset):
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    m = int(model.num_classes)
    if data.labels.min() < 0 or data.labels.max() >= m:
        raise ValueError(f"labels must lie in [0, {m})")


def _train_loop(model: Classifier, data: Dataset, cfg: TrainConfig, make_adversarial=None):
    _check_training_inputs(model, data)
    if model.input_shape is None:
        model.input_shape = data.input_shape
    rng = np.random.default_rng(cfg.seed)
    model.initialize(cfg.seed)
    opt = cfg.make_optimizer()
    X = data.images.reshape((len(data),) + model._shape())
    y = data.labels
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        loss_sum, correct, seen = 0.0, 0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = X[idx], y[idx]
            if make_adversarial is not None and not cfg.adversarial.alternate:
                x_adv = make_adversarial(xb, yb)
                xb = np.concatenate([xb, x_adv])
                yb = np.concatenate([yb, yb])
            loss, z, grads = model._loss_and_weight_grads(xb, yb)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            opt.step(model.weights_, grads)
            loss_sum += loss * len(yb)
            correct += int((z.argmax(axis=1) == yb).sum())
            seen += len(yb)
            if make_adversarial is not None and cfg.adversarial.alternate:
                x_adv = make_adversarial(xb, yb)
                adv_loss, _, grads = model._loss_and_weight_grads(x_adv, yb)
                if not math.isfinite(adv_loss):
                    raise TrainingDivergedError(f"non-finite adversarial loss at epoch {epoch}")
                opt.step(model.weights_, grads)
        history.append({"epoch": epoch + 1, "loss": loss_sum / seen, "accuracy": correct / seen})
    model.history_ = history
    model.__dict__.pop("_graph_cache", None)
    return model


def train(model: Classifier, data: Dataset, cfg: TrainConfig) -> Classifier:
    """Minibatch training from a seeded initialization; returns ``model``.

    Per-epoch mean loss and training accuracy are stored in ``model.history_``.
    """
    return _train_loop(model, data, cfg)


def train_adversarial(model: Classifier, data: Dataset, cfg: TrainConfig) -> Classifier:
    """Alternate clean and adversarial minibatch steps.

    Adversarial samples come from the iterative sign-gradient attack against
    the true labels, rescaled so that ``||delta||_2 / sqrt(n) <= epsilon``.
    """
    if cfg.adversarial is None:
        raise ValueError("train_adversarial needs cfg.adversarial")
    from .attacks import bounded_iga

    adv = cfg.adversarial

    def make_adversarial(xb, yb):
        return bounded_iga(model, xb, yb, adv.epsilon, iters=adv.iters, step=adv.step)

    return _train_loop(model, data, cfg, make_adversarial)


def adversarial_accuracy(model: Classifier, data: Dataset, epsilon: float, *,
                         iters: int = 10, step: float = 0.25, batch_size: int = 500) -> float:
    """Accuracy on epsilon-bounded iterative sign-gradient samples."""
    from .attacks import bounded_iga

    correct = 0
    for start in range(0, len(data), batch_size):
        xb = data.images[start:start + batch_size]
        yb = data.labels[start:start + batch_size]
        x_adv = bounded_iga(model, xb, yb, epsilon, iters=iters, step=step)
        correct += int((model.predict(x_adv) == yb).sum())
    return correct / max(1, len(data))


# ------------------------------------------------------------- persistence
def save_model(model: Classifier, path) -> None:
    check_is_fitted(model, "weights_")
    doc = {
        "format_version": FORMAT_VERSION,
        "architecture": model.architecture,
        "input_shape": list(model._shape()),
        "num_classes": int(model.num_classes),
        "layers": [
            {"name": name, "shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in model.weights_.items()
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def _require(doc, key, kind, where="model file"):
    if key not in doc:
        raise ModelFormatError(f"{where}: missing field {key!r}")
    value = doc[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ModelFormatError(f"{where}: field {key!r} has wrong type {type(value).__name__}")
    return value


def load_model(path) -> Classifier:
    """Read a model written by :func:`save_model`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ModelFormatError(f"{path}: byte {exc.start}: not UTF-8") from exc
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: byte {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{path}: top level must be an object")
    version = _require(doc, "format_version", int)
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"{path}: unsupported format_version {version}, expected {FORMAT_VERSION}")
    arch = _require(doc, "architecture", str)
    if arch not in ARCHITECTURES:
        raise ModelFormatError(f"{path}: field 'architecture' has unknown value {arch!r}")
    input_shape = tuple(_require(doc, "input_shape", list))
    num_classes = _require(doc, "num_classes", int)
    layers = _require(doc, "layers", list)
    weights = {}
    for i, layer in enumerate(layers):
        where = f"{path}: layers[{i}]"
        if not isinstance(layer, dict):
            raise ModelFormatError(f"{where}: must be an object")
        name = _require(layer, "name", str, where)
        shape = tuple(_require(layer, "shape", list, where))
        data = _require(layer, "data", list, where)
        if len(data) != int(np.prod(shape, dtype=np.int64)):
            raise ModelFormatError(f"{where}: field 'data' has {len(data)} values for shape {shape}")
        arr = np.asarray(data, dtype=np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise ModelFormatError(f"{where}: field 'data' contains non-finite values")
        weights[name] = arr
    cls = ARCHITECTURES[arch]
    if arch == "mlp":
        hidden = []
        i = 0
        while f"fc{i}.weight" in weights:
            hidden.append(weights[f"fc{i}.weight"].shape[1])
            i += 1
        model = cls(hidden_layer_sizes=tuple(hidden[:-1]), input_shape=input_shape,
                    num_classes=num_classes)
    else:
        model = cls(input_shape=input_shape, num_classes=num_classes)
    expected = model._init_weights(np.random.default_rng(0))
    if set(expected) != set(weights):
        raise ModelFormatError(f"{path}: field 'layers' names {sorted(weights)} do not match {arch}")
    for name, arr in expected.items():
        if arr.shape != weights[name].shape:
            raise ModelFormatError(f"{path}: layer {name!r} has shape {weights[name].shape}, expected {arr.shape}")
    model.set_weights({name: weights[name] for name in expected})
    return model

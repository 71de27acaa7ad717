"""Transfer-learning age regressor.

A pretrained convolutional backbone feeds a global-average-pooling head
with one 1024-unit ReLU layer and a single linear output.  Backbone layers
are frozen except for a configurable trailing span.  Training is a plain
Adam-on-MSE loop over seed-shuffled mini-batches, bit-reproducible per
(seed, device class, library build).
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .preprocess import Dataset

log = logging.getLogger(__name__)

BACKBONE_NAMES = ("MobileNetV2", "ResNet50V2", "ResNet101V2", "Xception", "Stub")
WEIGHTS_CACHE_ENV = "BRAINAGE_WEIGHTS_CACHE"
INPUT_SHAPE = (224, 224, 3)

# The stub extractor's weights never vary: its draw is pinned here.
_STUB_SEED = 20240613

_tf_mod = None


def _tf():
    """Import TensorFlow once, with deterministic ops enabled."""
    global _tf_mod
    if _tf_mod is None:
        import tensorflow as tf

        tf.config.experimental.enable_op_determinism()
        _tf_mod = tf
    return _tf_mod


def _keras():
    _tf()
    import keras

    return keras


class ModelError(Exception):
    pass


class WeightsUnavailableError(ModelError):
    """Pretrained weights are not present in the local cache."""


class TrainingDivergedError(ModelError):
    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(
            f"non-finite training loss {loss} at epoch {epoch}, batch {batch}")


@dataclass(frozen=True)
class BackboneSpec:
    name: str = "ResNet101V2"
    weights: str = "imagenet"  # "imagenet" (local cache) or "random"
    trainable_tail_layers: int = 10

    def __post_init__(self):
        if self.name not in BACKBONE_NAMES:
            raise ValueError(f"unknown backbone {self.name!r}, expected one of {BACKBONE_NAMES}")
        if self.weights not in ("imagenet", "random"):
            raise ValueError(f"weights must be 'imagenet' or 'random', got {self.weights!r}")
        if self.trainable_tail_layers < 0:
            raise ValueError("trainable_tail_layers must be >= 0")


@dataclass(frozen=True)
class HeadConfig:
    pooling: str = "global_average"
    hidden_units: int = 1024
    hidden_activation: str = "relu"
    output_units: int = 1
    output_activation: str = "linear"


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "mse"
    optimizer: str = "adam"
    learning_rate: float = 0.001
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("learning_rate, epochs, and batch_size must be positive")
        if self.loss != "mse":
            raise ValueError(f"only mse loss is supported, got {self.loss!r}")
        if self.optimizer != "adam":
            raise ValueError(f"only the adam optimizer is supported, got {self.optimizer!r}")


def head_parameter_count(feature_depth: int, head: HeadConfig = HeadConfig()) -> int:
    """Parameters in the pooled -> hidden -> output head."""
    h, o = head.hidden_units, head.output_units
    return feature_depth * h + h + h * o + o


class RegressionModel:
    """Composed backbone + head with freeze bookkeeping."""

    def __init__(self, keras_model, backbone, spec: BackboneSpec,
                 head: HeadConfig, build_seed: int,
                 canonical_preprocessing: bool = False):
        self.keras_model = keras_model
        self.backbone = backbone
        self.spec = spec
        self.head = head
        self.build_seed = build_seed
        self.canonical_preprocessing = canonical_preprocessing

    def parameterized_backbone_layers(self) -> list:
        """Backbone layers carrying weights, in topological order."""
        return [l for l in self.backbone.layers if l.weights]

    def head_layers(self) -> list:
        return [self.keras_model.get_layer("head_hidden"),
                self.keras_model.get_layer("head_output")]

    def head_weight_count(self) -> int:
        return int(sum(int(np.prod(w.shape))
                       for l in self.head_layers() for w in l.weights))

    def backbone_weights(self) -> list[np.ndarray]:
        return [np.array(w) for w in self.backbone.get_weights()]

    def frozen_backbone_weights(self) -> list[np.ndarray]:
        out = []
        for layer in self.parameterized_backbone_layers():
            if not layer.trainable:
                out.extend(np.array(w) for w in layer.get_weights())
        return out

    def get_weights(self) -> list[np.ndarray]:
        return self.keras_model.get_weights()

    def set_weights(self, weights: Sequence[np.ndarray]) -> None:
        self.keras_model.set_weights(list(weights))


@dataclass
class TrainedModel:
    model: RegressionModel
    history: list[float]
    training_time_seconds: float


def weights_cache_dir() -> Path:
    return Path(os.environ.get(WEIGHTS_CACHE_ENV,
                               Path.home() / ".cache" / "brainage" / "weights"))


def _head_seeds(seed: int) -> tuple[int, int]:
    state = np.random.SeedSequence(seed).generate_state(2)
    return int(state[0]), int(state[1])


def _build_stub_backbone():
    """Three fixed-seed strided convolutions: 224x224x3 -> 7x7x32."""
    keras = _keras()
    layers = keras.layers
    init = keras.initializers.HeNormal
    inp = keras.Input(INPUT_SHAPE, name="stub_in")
    x = layers.Conv2D(16, 8, strides=8, activation="relu", name="stub_conv1",
                      kernel_initializer=init(seed=_STUB_SEED),
                      bias_initializer="zeros")(inp)
    x = layers.Conv2D(32, 3, strides=2, padding="same", activation="relu",
                      name="stub_conv2",
                      kernel_initializer=init(seed=_STUB_SEED + 1),
                      bias_initializer="zeros")(x)
    x = layers.Conv2D(32, 3, strides=2, padding="same", activation="relu",
                      name="stub_conv3",
                      kernel_initializer=init(seed=_STUB_SEED + 2),
                      bias_initializer="zeros")(x)
    return keras.Model(inp, x, name="stub_backbone")


def _build_named_backbone(spec: BackboneSpec, seed: int):
    tf = _tf()
    keras = _keras()
    factory = {
        "MobileNetV2": keras.applications.MobileNetV2,
        "ResNet50V2": keras.applications.ResNet50V2,
        "ResNet101V2": keras.applications.ResNet101V2,
        "Xception": keras.applications.Xception,
    }[spec.name]
    tf.random.set_seed(seed)
    backbone = factory(include_top=False, weights=None, input_shape=INPUT_SHAPE)
    if spec.weights == "imagenet":
        path = weights_cache_dir() / f"{spec.name}.weights.h5"
        if not path.is_file():
            raise WeightsUnavailableError(
                f"pretrained weights for {spec.name} not found at {path}; "
                f"place a Keras weights file there or point {WEIGHTS_CACHE_ENV} "
                f"at a directory containing {spec.name}.weights.h5")
        backbone.load_weights(path)
    return backbone


def build_model(spec: BackboneSpec, head: HeadConfig = HeadConfig(),
                seed: int = 0, canonical_preprocessing: bool = False) -> RegressionModel:
    """Compose backbone -> global average pool -> dense head.

    The model accepts batches of 224x224x3 inputs in [0, 1] and emits one
    real value per input.  Head initializers are seeded from ``seed``; the
    stub backbone always uses its own fixed draw.  The spec's trailing-layer
    freeze policy is applied before returning.
    """
    keras = _keras()
    layers = keras.layers

    if spec.name == "Stub":
        backbone = _build_stub_backbone()
    else:
        backbone = _build_named_backbone(spec, seed)

    s1, s2 = _head_seeds(seed)
    inp = keras.Input(INPUT_SHAPE, name="image_in")
    x = inp
    if canonical_preprocessing and spec.name != "Stub":
        # The supported backbones all expect inputs scaled to [-1, 1].
        x = layers.Rescaling(scale=2.0, offset=-1.0, name="canonical_rescale")(x)
    feats = backbone(x)
    pooled = layers.GlobalAveragePooling2D(name="head_pool")(feats)
    hidden = layers.Dense(head.hidden_units, activation=head.hidden_activation,
                          name="head_hidden",
                          kernel_initializer=keras.initializers.GlorotUniform(seed=s1),
                          bias_initializer="zeros")(pooled)
    out = layers.Dense(head.output_units, activation=head.output_activation,
                       name="head_output",
                       kernel_initializer=keras.initializers.GlorotUniform(seed=s2),
                       bias_initializer="zeros")(hidden)
    kmodel = keras.Model(inp, out, name=f"{spec.name.lower()}_age_regressor")

    model = RegressionModel(kmodel, backbone, spec, head, seed,
                            canonical_preprocessing)
    set_trainable_tail(model, spec.trainable_tail_layers)
    return model


def set_trainable_tail(model: RegressionModel, k: int) -> RegressionModel:
    """Freeze all backbone parameterized layers except the last ``k``.

    Head layers always stay trainable.  ``k`` may not exceed the backbone's
    parameterized layer count.
    """
    layers = model.parameterized_backbone_layers()
    if k < 0 or k > len(layers):
        raise ModelError(
            f"trainable tail of {k} out of range: backbone {model.spec.name} "
            f"has {len(layers)} parameterized layers")
    for layer in layers:
        layer.trainable = False
    for layer in layers[len(layers) - k:]:
        layer.trainable = True
    return model


def build_head_model(feature_dim: int, head: HeadConfig = HeadConfig(),
                     seed: int = 0, dtype: str = "float32"):
    """Standalone pooled-features -> hidden -> output head (for checks)."""
    keras = _keras()
    layers = keras.layers
    s1, s2 = _head_seeds(seed)
    inp = keras.Input((feature_dim,), dtype=dtype, name="features_in")
    hidden = layers.Dense(head.hidden_units, activation=head.hidden_activation,
                          name="head_hidden", dtype=dtype,
                          kernel_initializer=keras.initializers.GlorotUniform(seed=s1),
                          bias_initializer="zeros")(inp)
    out = layers.Dense(head.output_units, activation=head.output_activation,
                       name="head_output", dtype=dtype,
                       kernel_initializer=keras.initializers.GlorotUniform(seed=s2),
                       bias_initializer="zeros")(hidden)
    return keras.Model(inp, out)


def mse_forward(kmodel, x: np.ndarray, y: np.ndarray) -> float:
    """MSE of the model on (x, y), forward pass only."""
    tf = _tf()
    pred = kmodel(tf.constant(x), training=True)
    return float(tf.reduce_mean(tf.square(pred[:, 0] - tf.constant(y))))


def mse_loss_and_grads(kmodel, x: np.ndarray, y: np.ndarray):
    """Loss and analytic gradients w.r.t. the model's trainable variables.

    This is the same differentiation path the training loop uses.
    """
    tf = _tf()
    xs = tf.constant(x)
    ys = tf.constant(y)
    with tf.GradientTape() as tape:
        pred = kmodel(xs, training=True)
        loss = tf.reduce_mean(tf.square(pred[:, 0] - ys))
    grads = tape.gradient(loss, kmodel.trainable_variables)
    return float(loss), [np.array(g) for g in grads]


def train(model: RegressionModel, dataset: Dataset,
          config: TrainConfig = TrainConfig()) -> TrainedModel:
    """Adam-on-MSE over seed-shuffled mini-batches.

    Runs exactly ``config.epochs`` passes; the last batch of an epoch may be
    smaller than ``config.batch_size``.  Only trainable variables are
    updated, so frozen parameters come out bitwise unchanged.  A non-finite
    batch loss aborts with the offending epoch and batch in the error.
    """
    tf = _tf()
    keras = _keras()
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    x = np.ascontiguousarray(dataset.inputs, dtype=np.float32)
    y = np.ascontiguousarray(dataset.targets, dtype=np.float32)
    expected = tuple(model.keras_model.inputs[0].shape[1:])
    if tuple(x.shape[1:]) != expected:
        raise ValueError(f"inputs of shape {x.shape[1:]} do not match model "
                         f"input contract {expected}")

    optimizer = keras.optimizers.Adam(learning_rate=config.learning_rate)
    tvars = model.keras_model.trainable_variables
    rng = np.random.default_rng(config.seed)
    history: list[float] = []
    start = time.perf_counter()
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        sq_sum = 0.0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = perm[lo:lo + config.batch_size]
            xs = tf.constant(x[idx])
            ys = tf.constant(y[idx])
            with tf.GradientTape() as tape:
                pred = model.keras_model(xs, training=True)
                loss = tf.reduce_mean(tf.square(pred[:, 0] - ys))
            loss_val = float(loss)
            if not np.isfinite(loss_val):
                raise TrainingDivergedError(epoch=epoch, batch=b, loss=loss_val)
            grads = tape.gradient(loss, tvars)
            optimizer.apply_gradients(zip(grads, tvars))
            sq_sum += loss_val * len(idx)
        history.append(sq_sum / n)
        log.debug("epoch %d/%d loss %.6f", epoch + 1, config.epochs, history[-1])
    elapsed = time.perf_counter() - start
    return TrainedModel(model=model, history=history, training_time_seconds=elapsed)


def predict(model: Union[RegressionModel, TrainedModel], inputs,
            batch_size: int = 256) -> np.ndarray:
    """One predicted age per input row; no clamping applied."""
    tf = _tf()
    if isinstance(model, TrainedModel):
        model = model.model
    if isinstance(inputs, Dataset):
        inputs = inputs.inputs
    x = np.asarray(inputs, dtype=np.float32)
    if x.ndim == len(INPUT_SHAPE):
        x = x[None]
    expected = tuple(model.keras_model.inputs[0].shape[1:])
    if tuple(x.shape[1:]) != expected:
        raise ValueError(f"inputs of shape {x.shape[1:]} do not match model "
                         f"input contract {expected}")
    chunks = []
    for lo in range(0, len(x), batch_size):
        pred = model.keras_model(tf.constant(x[lo:lo + batch_size]), training=False)
        chunks.append(np.asarray(pred)[:, 0])
    return np.concatenate(chunks).astype(np.float64)


def save_model(trained: TrainedModel, path_prefix: str | Path) -> None:
    """Persist weights (npz) plus a json sidecar describing the build."""
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    weights = trained.model.get_weights()
    np.savez(str(prefix) + ".weights.npz",
             **{f"w{i}": w for i, w in enumerate(weights)})
    sidecar = {
        "backbone": asdict(trained.model.spec),
        "head": asdict(trained.model.head),
        "build_seed": trained.model.build_seed,
        "canonical_preprocessing": trained.model.canonical_preprocessing,
        "history": trained.history,
        "training_time_seconds": trained.training_time_seconds,
    }
    with open(str(prefix) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path_prefix: str | Path) -> TrainedModel:
    """Rebuild the architecture and restore persisted weights."""
    prefix = Path(path_prefix)
    with open(str(prefix) + ".json", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    spec = BackboneSpec(**sidecar["backbone"])
    # Saved weights override initialization, so skip the pretrained cache.
    build_spec = BackboneSpec(name=spec.name, weights="random",
                              trainable_tail_layers=spec.trainable_tail_layers)
    model = build_model(build_spec, HeadConfig(**sidecar["head"]),
                        seed=sidecar["build_seed"],
                        canonical_preprocessing=sidecar["canonical_preprocessing"])
    model.spec = spec
    archive = np.load(str(prefix) + ".weights.npz")
    model.set_weights([archive[f"w{i}"] for i in range(len(archive.files))])
    return TrainedModel(model=model, history=list(sidecar["history"]),
                        training_time_seconds=sidecar["training_time_seconds"])

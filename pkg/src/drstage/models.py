"""Model graphs: layer specs, shape validation, the two architectures, and
explicit forward/backward execution.

A ModelGraph is a static DAG stored in topological build order; every layer
names its producer(s), so the forward pass is a single ordered walk and the
backward pass is the same walk reversed with gradient accumulation at fan-out
points. Shapes are validated once at build time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .errors import InvalidConfig, ShapeMismatch

INPUT = "input"

BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3
BIAS_INIT = 0.15


# ---------------------------------------------------------------------------
# layer specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    name: str
    inputs: tuple
    kh: int
    kw: int
    cin: int
    cout: int
    stride: int = 1
    padding: str = "same"
    activation: str = "none"  # none | relu


@dataclass(frozen=True)
class BatchNormSpec:
    name: str
    inputs: tuple
    channels: int


@dataclass(frozen=True)
class MaxPoolSpec:
    name: str
    inputs: tuple
    window: int
    stride: int
    padding: str = "same"


@dataclass(frozen=True)
class GlobalAvgPoolSpec:
    name: str
    inputs: tuple


@dataclass(frozen=True)
class FlattenSpec:
    name: str
    inputs: tuple


@dataclass(frozen=True)
class DenseSpec:
    name: str
    inputs: tuple
    din: int
    dout: int
    activation: str = "none"  # none | relu | softmax


@dataclass(frozen=True)
class DropoutSpec:
    name: str
    inputs: tuple
    rate: float


@dataclass(frozen=True)
class ConcatSpec:
    name: str
    inputs: tuple


LAYER_KINDS = {
    ConvSpec: "conv2d",
    BatchNormSpec: "batchnorm",
    MaxPoolSpec: "maxpool",
    GlobalAvgPoolSpec: "globalavgpool",
    FlattenSpec: "flatten",
    DenseSpec: "dense",
    DropoutSpec: "dropout",
    ConcatSpec: "concat",
}


def param_names(spec) -> list:
    """Trainable + tracked parameter names of one layer, in serialization order."""
    if isinstance(spec, ConvSpec):
        return [f"{spec.name}.kernel", f"{spec.name}.bias"]
    if isinstance(spec, DenseSpec):
        return [f"{spec.name}.weights", f"{spec.name}.bias"]
    if isinstance(spec, BatchNormSpec):
        return [
            f"{spec.name}.gamma",
            f"{spec.name}.beta",
            f"{spec.name}.running_mean",
            f"{spec.name}.running_var",
        ]
    return []


def trainable_param_names(spec) -> list:
    names = param_names(spec)
    return [n for n in names if not n.endswith((".running_mean", ".running_var"))]


# ---------------------------------------------------------------------------
# the graph
# ---------------------------------------------------------------------------

class ModelGraph:
    """Ordered layer specs plus a weight store; validated on construction."""

    def __init__(self, input_shape, specs, weights=None, mode="infer"):
        self.input_shape = tuple(int(v) for v in input_shape)
        if len(self.input_shape) not in (1, 3):
            raise InvalidConfig(f"input shape must be (d,) or (h, w, c), got {input_shape}")
        self.specs = list(specs)
        self.weights = weights if weights is not None else {}
        self.mode = mode
        self.shapes = self._infer_shapes()
        if weights is not None:
            self._check_weights()

    @property
    def output_name(self) -> str:
        return self.specs[-1].name

    @property
    def output_shape(self) -> tuple:
        return self.shapes[self.output_name]

    def _infer_shapes(self) -> dict:
        shapes = {INPUT: self.input_shape}
        for spec in self.specs:
            if spec.name in shapes:
                raise InvalidConfig(f"duplicate layer name {spec.name!r}")
            for producer in spec.inputs:
                if producer not in shapes:
                    raise InvalidConfig(f"layer {spec.name!r} consumes unknown {producer!r}")
            shapes[spec.name] = self._layer_shape(spec, [shapes[p] for p in spec.inputs])
        return shapes

    @staticmethod
    def _layer_shape(spec, in_shapes):
        if isinstance(spec, ConvSpec):
            (h, w, c), = in_shapes
            if c != spec.cin:
                raise ShapeMismatch(f"{spec.name}: expects {spec.cin} channels, gets {c}")
            oh = layers.out_extent(h, spec.kh, spec.stride, spec.padding)
            ow = layers.out_extent(w, spec.kw, spec.stride, spec.padding)
            return (oh, ow, spec.cout)
        if isinstance(spec, BatchNormSpec):
            (shape,) = in_shapes
            if shape[-1] != spec.channels:
                raise ShapeMismatch(f"{spec.name}: expects {spec.channels} channels, gets {shape[-1]}")
            return shape
        if isinstance(spec, MaxPoolSpec):
            (h, w, c), = in_shapes
            oh = layers.out_extent(h, spec.window, spec.stride, spec.padding)
            ow = layers.out_extent(w, spec.window, spec.stride, spec.padding)
            return (oh, ow, c)
        if isinstance(spec, GlobalAvgPoolSpec):
            (h, w, c), = in_shapes
            return (c,)
        if isinstance(spec, FlattenSpec):
            (shape,) = in_shapes
            return (int(np.prod(shape)),)
        if isinstance(spec, DenseSpec):
            (shape,) = in_shapes
            if len(shape) != 1 or shape[0] != spec.din:
                raise ShapeMismatch(f"{spec.name}: expects ({spec.din},), gets {shape}")
            return (spec.dout,)
        if isinstance(spec, DropoutSpec):
            (shape,) = in_shapes
            return shape
        if isinstance(spec, ConcatSpec):
            bases = {s[:2] for s in in_shapes}
            if len(bases) != 1:
                raise ShapeMismatch(f"{spec.name}: branches disagree on spatial extents")
            return in_shapes[0][:2] + (sum(s[2] for s in in_shapes),)
        raise InvalidConfig(f"unknown layer spec {type(spec).__name__}")

    def _check_weights(self):
        expected = expected_param_shapes(self)
        for name, shape in expected.items():
            if name not in self.weights:
                raise ShapeMismatch(f"missing parameter {name!r}")
            if self.weights[name].shape != shape:
                raise ShapeMismatch(
                    f"parameter {name!r} has shape {self.weights[name].shape}, wants {shape}"
                )


def expected_param_shapes(model: ModelGraph) -> dict:
    shapes = {}
    for spec in model.specs:
        if isinstance(spec, ConvSpec):
            shapes[f"{spec.name}.kernel"] = (spec.kh, spec.kw, spec.cin, spec.cout)
            shapes[f"{spec.name}.bias"] = (spec.cout,)
        elif isinstance(spec, DenseSpec):
            shapes[f"{spec.name}.weights"] = (spec.din, spec.dout)
            shapes[f"{spec.name}.bias"] = (spec.dout,)
        elif isinstance(spec, BatchNormSpec):
            for suffix in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"{spec.name}.{suffix}"] = (spec.channels,)
    return shapes


def count_trainable(model: ModelGraph) -> int:
    total = 0
    for spec in model.specs:
        for name in trainable_param_names(spec):
            total += int(np.prod(expected_param_shapes(model)[name]))
    return total


# ---------------------------------------------------------------------------
# weight initialization
# ---------------------------------------------------------------------------

def init_weights(model: ModelGraph, seed: int) -> ModelGraph:
    """Fill the weight store: He-uniform weights, constant 0.15 biases,
    batchnorm gamma 1 / beta 0 / running stats (0, 1). Pure in (specs, seed)."""
    rng = np.random.default_rng(seed)
    weights = {}
    for spec in model.specs:
        if isinstance(spec, ConvSpec):
            fan_in = spec.kh * spec.kw * spec.cin
            bound = np.sqrt(6.0 / fan_in)
            weights[f"{spec.name}.kernel"] = rng.uniform(
                -bound, bound, size=(spec.kh, spec.kw, spec.cin, spec.cout)
            ).astype(np.float32)
            weights[f"{spec.name}.bias"] = np.full(spec.cout, BIAS_INIT, dtype=np.float32)
        elif isinstance(spec, DenseSpec):
            bound = np.sqrt(6.0 / spec.din)
            weights[f"{spec.name}.weights"] = rng.uniform(
                -bound, bound, size=(spec.din, spec.dout)
            ).astype(np.float32)
            weights[f"{spec.name}.bias"] = np.full(spec.dout, BIAS_INIT, dtype=np.float32)
        elif isinstance(spec, BatchNormSpec):
            weights[f"{spec.name}.gamma"] = np.ones(spec.channels, dtype=np.float32)
            weights[f"{spec.name}.beta"] = np.zeros(spec.channels, dtype=np.float32)
            weights[f"{spec.name}.running_mean"] = np.zeros(spec.channels, dtype=np.float32)
            weights[f"{spec.name}.running_var"] = np.ones(spec.channels, dtype=np.float32)
    model.weights = weights
    model._check_weights()
    return model


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def _check_batch(model: ModelGraph, batch: np.ndarray):
    if batch.ndim != len(model.input_shape) + 1:
        raise ShapeMismatch(
            f"batch rank {batch.ndim} does not extend input shape {model.input_shape}"
        )
    if tuple(batch.shape[1:]) != model.input_shape:
        raise ShapeMismatch(f"batch extents {batch.shape[1:]} != {model.input_shape}")


def forward(model: ModelGraph, batch, mode=None, rng=None, record=False):
    """Evaluate the DAG in topological order.

    Train mode uses batch statistics (and updates the stored running stats)
    and applies dropout from `rng`; infer mode uses running stats and identity
    dropout. With record=True also returns the tape backward() consumes.
    """
    mode = mode or model.mode
    if mode not in ("train", "infer"):
        raise InvalidConfig(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "train" and rng is None and any(
        isinstance(s, DropoutSpec) and s.rate > 0 for s in model.specs
    ):
        raise InvalidConfig("train-mode forward with dropout needs an rng")
    _check_batch(model, np.asarray(batch))

    w = model.weights
    values = {INPUT: np.asarray(batch)}
    tape = [] if record else None
    for spec in model.specs:
        xs = [values[p] for p in spec.inputs]
        cache = {}
        if isinstance(spec, ConvSpec):
            z = layers.conv2d(
                xs[0], w[f"{spec.name}.kernel"], w[f"{spec.name}.bias"], spec.stride, spec.padding
            )
            out = layers.relu(z) if spec.activation == "relu" else z
            cache = {"x": xs[0], "z": z}
        elif isinstance(spec, BatchNormSpec):
            out, (rm, rv) = layers.batchnorm(
                xs[0],
                w[f"{spec.name}.gamma"],
                w[f"{spec.name}.beta"],
                w[f"{spec.name}.running_mean"],
                w[f"{spec.name}.running_var"],
                mode,
                BN_MOMENTUM,
                BN_EPSILON,
            )
            if mode == "train":
                # single-writer contract: training owns the running stats
                w[f"{spec.name}.running_mean"] = rm
                w[f"{spec.name}.running_var"] = rv
            cache = {"x": xs[0]}
        elif isinstance(spec, MaxPoolSpec):
            out = layers.maxpool2d(xs[0], spec.window, spec.stride, spec.padding)
            cache = {"x": xs[0]}
        elif isinstance(spec, GlobalAvgPoolSpec):
            out = layers.global_avg_pool(xs[0])
            cache = {"x": xs[0]}
        elif isinstance(spec, FlattenSpec):
            out = xs[0].reshape(xs[0].shape[0], -1)
            cache = {"shape": xs[0].shape}
        elif isinstance(spec, DenseSpec):
            z = layers.dense(xs[0], w[f"{spec.name}.weights"], w[f"{spec.name}.bias"])
            if spec.activation == "relu":
                out = layers.relu(z)
            elif spec.activation == "softmax":
                out = layers.softmax(z)
            else:
                out = z
            cache = {"x": xs[0], "z": z, "out": out}
        elif isinstance(spec, DropoutSpec):
            out, mask = layers.dropout(xs[0], spec.rate, mode, rng)
            cache = {"mask": mask}
        elif isinstance(spec, ConcatSpec):
            out = layers.concat_channels(xs)
            cache = {"sizes": [x.shape[3] for x in xs]}
        else:
            raise InvalidConfig(f"unknown layer spec {type(spec).__name__}")
        values[spec.name] = out
        if record:
            tape.append(cache)

    output = values[model.output_name]
    return (output, tape) if record else output


def backward(model: ModelGraph, tape, upstream, mode="train"):
    """Reverse walk over a recorded forward pass.

    Returns (param_grads, input_grad); gradients at fan-out points accumulate.
    """
    w = model.weights
    grads = {}
    flowing = {model.output_name: np.asarray(upstream)}

    def send(producer, grad):
        if producer in flowing:
            flowing[producer] = flowing[producer] + grad
        else:
            flowing[producer] = grad

    for spec, cache in zip(reversed(model.specs), reversed(tape)):
        up = flowing.pop(spec.name)
        if isinstance(spec, ConvSpec):
            if spec.activation == "relu":
                up = layers.relu_backward(cache["z"], up).input_grad
            g = layers.conv2d_backward(
                cache["x"], w[f"{spec.name}.kernel"], up, spec.stride, spec.padding
            )
            grads[f"{spec.name}.kernel"] = g.param_grads["kernel"]
            grads[f"{spec.name}.bias"] = g.param_grads["bias"]
            send(spec.inputs[0], g.input_grad)
        elif isinstance(spec, BatchNormSpec):
            g = layers.batchnorm_backward(
                cache["x"],
                w[f"{spec.name}.gamma"],
                up,
                mode,
                w[f"{spec.name}.running_mean"],
                w[f"{spec.name}.running_var"],
                BN_EPSILON,
            )
            grads[f"{spec.name}.gamma"] = g.param_grads["gamma"]
            grads[f"{spec.name}.beta"] = g.param_grads["beta"]
            send(spec.inputs[0], g.input_grad)
        elif isinstance(spec, MaxPoolSpec):
            g = layers.maxpool2d_backward(cache["x"], up, spec.window, spec.stride, spec.padding)
            send(spec.inputs[0], g.input_grad)
        elif isinstance(spec, GlobalAvgPoolSpec):
            g = layers.global_avg_pool_backward(cache["x"], up)
            send(spec.inputs[0], g.input_grad)
        elif isinstance(spec, FlattenSpec):
            send(spec.inputs[0], up.reshape(cache["shape"]))
        elif isinstance(spec, DenseSpec):
            if spec.activation == "relu":
                up = layers.relu_backward(cache["z"], up).input_grad
            elif spec.activation == "softmax":
                up = layers.softmax_backward(cache["out"], up).input_grad
            g = layers.dense_backward(cache["x"], w[f"{spec.name}.weights"], up)
            grads[f"{spec.name}.weights"] = g.param_grads["weights"]
            grads[f"{spec.name}.bias"] = g.param_grads["bias"]
            send(spec.inputs[0], g.input_grad)
        elif isinstance(spec, DropoutSpec):
            send(spec.inputs[0], layers.dropout_backward(up, cache["mask"], spec.rate).input_grad)
        elif isinstance(spec, ConcatSpec):
            for producer, part in zip(spec.inputs, layers.split_channels(up, cache["sizes"])):
                send(producer, part)
    return grads, flowing.get(INPUT)


def predict(model: ModelGraph, images, batch_size=64) -> np.ndarray:
    """Infer-mode forward over an array of samples, chunked to bound memory."""
    images = np.asarray(images, dtype=np.float32)
    outputs = []
    for start in range(0, images.shape[0], batch_size):
        outputs.append(forward(model, images[start : start + batch_size], mode="infer"))
    return np.concatenate(outputs, axis=0)


# ---------------------------------------------------------------------------
# architectures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InceptionModuleSpec:
    """Channel widths of the four parallel branches."""

    f1x1: int
    f3x3_reduce: int
    f3x3: int
    f5x5_reduce: int
    f5x5: int
    f_pool_proj: int

    def __post_init__(self):
        for fname, value in self.__dict__.items():
            if value < 1:
                raise InvalidConfig(f"inception width {fname} must be >= 1, got {value}")

    @property
    def output_channels(self) -> int:
        return self.f1x1 + self.f3x3 + self.f5x5 + self.f_pool_proj


INCEPTION_3A = InceptionModuleSpec(64, 40, 60, 16, 32, 32)
INCEPTION_3B = InceptionModuleSpec(60, 60, 80, 32, 64, 64)


def inception_module_specs(spec: InceptionModuleSpec, producer: str, cin: int, prefix: str):
    """Layer specs of one inception module fed by `producer` with cin channels.

    Branches: 1x1 conv + BN; 1x1 reduce then 3x3 conv + BN; 1x1 reduce then
    5x5 conv + BN; 3x3/1 max pool then 1x1 projection (no BN). All convs are
    stride-1 'same' with ReLU; outputs concatenate on channels.
    """
    p = prefix
    def conv(name, inputs, k, cin_, cout):
        return ConvSpec(name, (inputs,), k, k, cin_, cout, 1, "same", "relu")

    specs = [
        conv(f"{p}_1x1", producer, 1, cin, spec.f1x1),
        BatchNormSpec(f"{p}_1x1_bn", (f"{p}_1x1",), spec.f1x1),
        conv(f"{p}_3x3_reduce", producer, 1, cin, spec.f3x3_reduce),
        conv(f"{p}_3x3", f"{p}_3x3_reduce", 3, spec.f3x3_reduce, spec.f3x3),
        BatchNormSpec(f"{p}_3x3_bn", (f"{p}_3x3",), spec.f3x3),
        conv(f"{p}_5x5_reduce", producer, 1, cin, spec.f5x5_reduce),
        conv(f"{p}_5x5", f"{p}_5x5_reduce", 5, spec.f5x5_reduce, spec.f5x5),
        BatchNormSpec(f"{p}_5x5_bn", (f"{p}_5x5",), spec.f5x5),
        MaxPoolSpec(f"{p}_pool", (producer,), 3, 1, "same"),
        conv(f"{p}_pool_proj", f"{p}_pool", 1, cin, spec.f_pool_proj),
        ConcatSpec(
            f"{p}_concat",
            (f"{p}_1x1_bn", f"{p}_3x3_bn", f"{p}_5x5_bn", f"{p}_pool_proj"),
        ),
    ]
    return specs, f"{p}_concat", spec.output_channels


def build_inception_module(spec: InceptionModuleSpec, input_hw=(25, 25), channels=64) -> ModelGraph:
    """A standalone single-module graph, mainly for direct inspection."""
    specs, _, _ = inception_module_specs(spec, INPUT, channels, "inception")
    return ModelGraph((input_hw[0], input_hw[1], channels), specs)


def _scaled(c: int, width_scale: float) -> int:
    return max(1, int(np.floor(c * width_scale + 0.5)))


def build_small_inception(
    input_hw=(200, 200), channels=3, num_outputs=2, width_scale=1.0
) -> ModelGraph:
    """The small inception network.

    conv 5x5/2 -> pool 3x3/2 -> conv 3x3/1 -> pool 3x3/2 -> inception ->
    pool 3x3/2 -> inception -> global average pool -> dense 32 ReLU -> BN ->
    dropout 0.5 -> dense softmax. width_scale shrinks every channel width
    (for desk-scale experiments); 1.0 reproduces the published widths.
    """
    ws = width_scale
    c1, c2 = _scaled(32, ws), _scaled(64, ws)
    inc_a = InceptionModuleSpec(*(_scaled(v, ws) for v in
                                  (INCEPTION_3A.f1x1, INCEPTION_3A.f3x3_reduce, INCEPTION_3A.f3x3,
                                   INCEPTION_3A.f5x5_reduce, INCEPTION_3A.f5x5, INCEPTION_3A.f_pool_proj)))
    inc_b = InceptionModuleSpec(*(_scaled(v, ws) for v in
                                  (INCEPTION_3B.f1x1, INCEPTION_3B.f3x3_reduce, INCEPTION_3B.f3x3,
                                   INCEPTION_3B.f5x5_reduce, INCEPTION_3B.f5x5, INCEPTION_3B.f_pool_proj)))

    specs = [
        ConvSpec("conv1", (INPUT,), 5, 5, channels, c1, 2, "same", "relu"),
        BatchNormSpec("conv1_bn", ("conv1",), c1),
        MaxPoolSpec("pool1", ("conv1_bn",), 3, 2, "same"),
        ConvSpec("conv2", ("pool1",), 3, 3, c1, c2, 1, "same", "relu"),
        BatchNormSpec("conv2_bn", ("conv2",), c2),
        MaxPoolSpec("pool2", ("conv2_bn",), 3, 2, "same"),
    ]
    a_specs, a_out, a_channels = inception_module_specs(inc_a, "pool2", c2, "inc3a")
    specs += a_specs
    specs.append(MaxPoolSpec("pool3", (a_out,), 3, 2, "same"))
    b_specs, b_out, b_channels = inception_module_specs(inc_b, "pool3", a_channels, "inc3b")
    specs += b_specs
    specs += [
        GlobalAvgPoolSpec("gap", (b_out,)),
        DenseSpec("fc", ("gap",), b_channels, 32, "relu"),
        BatchNormSpec("fc_bn", ("fc",), 32),
        DropoutSpec("drop", ("fc_bn",), 0.5),
        DenseSpec("out", ("drop",), 32, num_outputs, "softmax"),
    ]
    return ModelGraph((input_hw[0], input_hw[1], channels), specs)


def build_binary_head(feature_dim: int) -> ModelGraph:
    """Transfer-learning classifier head over extracted features.

    flatten -> dense 32 -> ReLU -> dropout 0.5 -> batchnorm -> dense 2
    softmax, exactly in this order (batchnorm after dropout is deliberate).
    """
    if feature_dim < 1:
        raise InvalidConfig(f"feature_dim must be >= 1, got {feature_dim}")
    specs = [
        FlattenSpec("flatten", (INPUT,)),
        DenseSpec("fc", ("flatten",), feature_dim, 32, "relu"),
        DropoutSpec("drop", ("fc",), 0.5),
        BatchNormSpec("fc_bn", ("drop",), 32),
        DenseSpec("out", ("fc_bn",), 32, 2, "softmax"),
    ]
    return ModelGraph((feature_dim,), specs)


# ---------------------------------------------------------------------------
# feature extraction (stand-in for a frozen pretrained backbone)
# ---------------------------------------------------------------------------

class FeatureExtractor:
    """Interface: extract() maps an image batch to fixed-width features."""

    feature_dim: int
    descriptor: str

    def extract(self, images: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class StubFeatureExtractor(FeatureExtractor):
    """Deterministic seeded random projection standing in for a real backbone.

    Fixed-stride average pooling, 1/255 intensity normalization, flatten, a
    frozen seeded Gaussian matrix, ReLU. The normalization keeps features
    O(1) for 8-bit inputs so a softmax head trained on them does not
    saturate. Same seed, same image: bitwise-identical features.
    """

    def __init__(self, seed: int, input_hw=(299, 299), feature_dim: int = 2048):
        if feature_dim < 1:
            raise InvalidConfig(f"feature_dim must be >= 1, got {feature_dim}")
        self.seed = int(seed)
        self.input_hw = (int(input_hw[0]), int(input_hw[1]))
        self.feature_dim = int(feature_dim)
        h, w = self.input_hw
        self.pool_stride = max(1, min(h, w) // 16)
        ph, pw = h // self.pool_stride, w // self.pool_stride
        flat = ph * pw * 3
        rng = np.random.default_rng(self.seed)
        self._projection = (
            rng.standard_normal((flat, self.feature_dim)) / np.sqrt(flat)
        ).astype(np.float32)
        self.descriptor = f"stub:seed={self.seed}:in={h}x{w}:dim={self.feature_dim}"

    def extract(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        h, w = self.input_hw
        if images.ndim != 4 or images.shape[1:] != (h, w, 3):
            raise ShapeMismatch(f"extractor expects (n, {h}, {w}, 3), got {images.shape}")
        s = self.pool_stride
        ph, pw = h // s, w // s
        pooled = images[:, : ph * s, : pw * s, :].reshape(-1, ph, s, pw, s, 3).mean(axis=(2, 4))
        flat = pooled.reshape(images.shape[0], -1) / np.float32(255.0)
        return layers.relu(flat @ self._projection)


def stub_feature_extractor(seed: int, input_hw=(299, 299), feature_dim: int = 2048):
    return StubFeatureExtractor(seed, input_hw, feature_dim)

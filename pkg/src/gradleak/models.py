"""Model zoo, parameter handling, and the mixed input/parameter Jacobian.

Models are plain layer lists evaluated on a single sample with a flat
float64 parameter vector.  Everything second-order (mixed JVP/VJP,
dense Jacobian, finite-difference oracles) lives here because it only
needs the loss to be expressible in the autodiff engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var, grad

ACTIVATIONS = {"sigmoid": ad.sigmoid, "relu": ad.relu, "tanh": ad.tanh, "identity": lambda v: v}

LOSS_KINDS = ("cross_entropy", "squared_error", "sum_output")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 2
    padding: int = 2


@dataclass(frozen=True)
class Activation:
    kind: str


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass
class ModelSpec:
    """Layer list plus loss; call build_model to shape-check it."""

    layers: list
    loss: str
    input_shape: tuple
    num_classes: int = 0
    target: np.ndarray | None = None  # squared_error only

    d_x: int = field(default=0, init=False)
    d_theta: int = field(default=0, init=False)
    _built: bool = field(default=False, init=False)


def _layer_param_shape(layer):
    if isinstance(layer, Linear):
        return (layer.out_features, layer.in_features)
    if isinstance(layer, Conv2d):
        return (layer.out_channels, layer.in_channels * layer.kernel * layer.kernel)
    return None


def build_model(spec: ModelSpec) -> ModelSpec:
    """Validate layer composition and fill in d_x / d_theta."""
    if spec.loss not in LOSS_KINDS:
        raise ShapeError(f"unknown loss kind {spec.loss!r}")
    shape = tuple(spec.input_shape)
    d_theta = 0
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Linear):
            if len(shape) != 1 or shape[0] != layer.in_features:
                raise ShapeError(f"layer {i} ({layer}) expects a vector of length {layer.in_features}, got shape {shape}")
            shape = (layer.out_features,)
            d_theta += layer.out_features * layer.in_features
        elif isinstance(layer, Conv2d):
            if len(shape) != 3 or shape[0] != layer.in_channels:
                raise ShapeError(f"layer {i} ({layer}) expects (channels={layer.in_channels}, H, W), got shape {shape}")
            _, _, (oh, ow) = ad.conv_geometry(shape, layer.kernel, layer.stride, layer.padding)
            shape = (layer.out_channels, oh, ow)
            d_theta += layer.out_channels * layer.in_channels * layer.kernel * layer.kernel
        elif isinstance(layer, Activation):
            if layer.kind not in ACTIVATIONS:
                raise ShapeError(f"layer {i}: unknown activation {layer.kind!r}")
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        else:
            raise ShapeError(f"layer {i}: unknown layer type {type(layer).__name__}")
    if spec.loss == "cross_entropy":
        if len(shape) != 1 or shape[0] != spec.num_classes:
            raise ShapeError(f"cross_entropy expects final shape ({spec.num_classes},), model produces {shape}")
    elif spec.loss == "squared_error":
        if spec.target is None:
            raise ShapeError("squared_error loss needs a target vector")
        target = np.asarray(spec.target, dtype=np.float64).reshape(-1)
        if len(shape) != 1 or shape[0] != target.size:
            raise ShapeError(f"squared_error target has length {target.size}, model produces {shape}")
        spec.target = target
    spec.d_x = int(np.prod(spec.input_shape))
    spec.d_theta = d_theta
    spec._built = True
    return spec


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class ParameterSet:
    """Flat parameter vector plus per-layer (offset, shape) map."""

    theta: np.ndarray
    slots: tuple  # ((layer_index, offset, shape), ...)

    def with_theta(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != self.theta.shape:
            raise ShapeError(f"parameter vector length {theta.size} != {self.theta.size}")
        return ParameterSet(theta, self.slots)


def parameter_slots(spec: ModelSpec):
    slots = []
    off = 0
    for i, layer in enumerate(spec.layers):
        shape = _layer_param_shape(layer)
        if shape is not None:
            slots.append((i, off, shape))
            off += int(np.prod(shape))
    return tuple(slots)


@dataclass(frozen=True)
class InitScheme:
    kind: str  # uniform | normal | kaiming | xavier
    seed: int


def initialize_parameters(spec: ModelSpec, scheme: InitScheme) -> ParameterSet:
    _require_built(spec)
    rng = np.random.Generator(np.random.PCG64(scheme.seed))
    slots = parameter_slots(spec)
    theta = np.zeros(spec.d_theta)
    for _, off, shape in slots:
        n = int(np.prod(shape))
        fan_out, fan_in = shape
        if scheme.kind == "uniform":
            block = rng.uniform(-0.5, 0.5, size=n)
        elif scheme.kind == "normal":
            # variance 0.5, i.e. std sqrt(0.5)
            block = rng.normal(0.0, math.sqrt(0.5), size=n)
        elif scheme.kind == "kaiming":
            bound = math.sqrt(6.0 / fan_in)
            block = rng.uniform(-bound, bound, size=n)
        elif scheme.kind == "xavier":
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            block = rng.uniform(-bound, bound, size=n)
        else:
            raise ValueError(f"unknown init scheme {scheme.kind!r}")
        theta[off:off + n] = block
    return ParameterSet(theta, slots)


# ---------------------------------------------------------------------------
# forward / gradients


def _require_built(spec):
    if not spec._built:
        raise ShapeError("ModelSpec must pass through build_model first")


def _forward_var(spec, theta_var, x_var, y):
    h = x_var
    slot = {i: (off, shape) for i, off, shape in parameter_slots(spec)}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Linear):
            off, shape = slot[i]
            w = ad.reshape(ad.slice1d(theta_var, off, off + shape[0] * shape[1]), shape)
            h = ad.matmul(w, h)
        elif isinstance(layer, Conv2d):
            off, shape = slot[i]
            w = ad.reshape(ad.slice1d(theta_var, off, off + shape[0] * shape[1]), shape)
            cols = ad.im2col(h, layer.kernel, layer.stride, layer.padding)
            _, _, (oh, ow) = ad.conv_geometry(h.data.shape, layer.kernel, layer.stride, layer.padding)
            h = ad.reshape(ad.matmul(w, cols), (layer.out_channels, oh, ow))
        elif isinstance(layer, Activation):
            h = ACTIVATIONS[layer.kind](h)
        elif isinstance(layer, Flatten):
            h = ad.reshape(h, (h.size,))
        if not np.all(np.isfinite(h.data)):
            raise FloatingPointError(f"non-finite activation after layer {i} ({layer})")
    return _loss_var(spec, h, y)


def _loss_var(spec, out, y):
    if spec.loss == "cross_entropy":
        if y is None or not (0 <= int(y) < spec.num_classes):
            raise ShapeError(f"label {y} outside [0, {spec.num_classes})")
        shift = Var(float(out.data.max()))  # constant; cancels in the derivative
        lse = ad.add(ad.log(ad.sum_all(ad.exp(ad.sub(out, shift)))), shift)
        onehot = np.zeros(spec.num_classes)
        onehot[int(y)] = 1.0
        return ad.sub(lse, ad.dot(out, Var(onehot)))
    if spec.loss == "squared_error":
        r = ad.sub(out, Var(spec.target))
        return ad.mul(Var(0.5), ad.sum_all(ad.mul(r, r)))
    return ad.sum_all(out)  # sum_output: L = sum of model outputs


def _check_sample(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(spec.input_shape):
        raise ShapeError(f"sample shape {x.shape} != model input shape {tuple(spec.input_shape)}")
    return x


def forward_loss(spec: ModelSpec, params: ParameterSet, x, y=None) -> float:
    _require_built(spec)
    x = _check_sample(spec, x)
    loss = _forward_var(spec, Var(params.theta), Var(x), y)
    if not np.isfinite(loss.data):
        raise FloatingPointError("non-finite loss")
    return float(loss.data)


@dataclass(frozen=True)
class GradientBundle:
    g_theta: np.ndarray
    g_x: np.ndarray


def gradients(spec: ModelSpec, params: ParameterSet, x, y=None) -> GradientBundle:
    op = MixedJacobianOperator(spec, params, x, y)
    return GradientBundle(op.g_theta.copy(), op.g_x.copy())


class MixedJacobianOperator:
    """Matrix-free J = d^2 L / (dx dtheta), shape (d_x, d_theta).

    Builds the loss graph and the first-order gradient graph once, then
    answers J @ delta and J.T @ b by differentiating inner products of
    the retained gradient nodes.
    """

    def __init__(self, spec: ModelSpec, params: ParameterSet, x, y=None):
        _require_built(spec)
        self.spec = spec
        x = _check_sample(spec, x)
        self.x_var = Var(x)
        self.theta_var = Var(params.theta)
        self.loss_var = _forward_var(spec, self.theta_var, self.x_var, y)
        gt, gx = grad(self.loss_var, [self.theta_var, self.x_var])
        self._gt_var, self._gx_var = gt, ad.reshape(gx, (spec.d_x,))
        self.g_theta = gt.data.copy()
        self.g_x = self._gx_var.data.copy()
        self.d_x, self.d_theta = spec.d_x, spec.d_theta

    def jvp(self, delta):
        """J @ delta: the x-gradient of <g_theta, delta>."""
        delta = np.asarray(delta, dtype=np.float64).reshape(-1)
        if delta.size != self.d_theta:
            raise ShapeError(f"delta length {delta.size} != d_theta {self.d_theta}")
        s = ad.dot(self._gt_var, Var(delta))
        (gx,) = grad(s, [self.x_var])
        return gx.data.reshape(-1).copy()

    def vjp(self, b):
        """J.T @ b: the theta-gradient of <g_x, b>."""
        b = np.asarray(b, dtype=np.float64).reshape(-1)
        if b.size != self.d_x:
            raise ShapeError(f"vector length {b.size} != d_x {self.d_x}")
        s = ad.dot(self._gx_var, Var(b))
        (gt,) = grad(s, [self.theta_var])
        return gt.data.copy()


def mixed_jvp(spec, params, x, y, delta):
    return MixedJacobianOperator(spec, params, x, y).jvp(delta)


def mixed_vjp(spec, params, x, y, b):
    return MixedJacobianOperator(spec, params, x, y).vjp(b)


class BudgetError(ValueError):
    pass


def materialize_jacobian(spec, params, x, y=None, budget=10_000_000, by="rows"):
    """Dense J, built row-wise from VJPs (or column-wise from JVPs)."""
    _require_built(spec)
    entries = spec.d_x * spec.d_theta
    if entries > budget:
        raise BudgetError(f"dense Jacobian needs {entries} entries, budget is {budget}")
    op = MixedJacobianOperator(spec, params, x, y)
    if by == "rows":
        rows = [op.vjp(_basis(spec.d_x, i)) for i in range(spec.d_x)]
        return np.stack(rows, axis=0)
    if by == "columns":
        cols = [op.jvp(_basis(spec.d_theta, j)) for j in range(spec.d_theta)]
        return np.stack(cols, axis=1)
    raise ValueError("by must be 'rows' or 'columns'")


def _basis(n, i):
    e = np.zeros(n)
    e[i] = 1.0
    return e


# ---------------------------------------------------------------------------
# finite-difference oracle (test side of the dual-route checks)


def finite_difference_oracle(spec, params, x, y=None, what="grad_theta", step=None, delta=None):
    _require_built(spec)
    x = _check_sample(spec, x)
    if what == "grad_theta":
        h = 1e-5 if step is None else step
        out = np.zeros(spec.d_theta)
        for i in range(spec.d_theta):
            tp, tm = params.theta.copy(), params.theta.copy()
            tp[i] += h
            tm[i] -= h
            out[i] = (forward_loss(spec, params.with_theta(tp), x, y) - forward_loss(spec, params.with_theta(tm), x, y)) / (2 * h)
        return out
    if what == "grad_x":
        h = 1e-5 if step is None else step
        flat = x.reshape(-1)
        out = np.zeros(spec.d_x)
        for i in range(spec.d_x):
            xp, xm = flat.copy(), flat.copy()
            xp[i] += h
            xm[i] -= h
            out[i] = (forward_loss(spec, params, xp.reshape(x.shape), y) - forward_loss(spec, params, xm.reshape(x.shape), y)) / (2 * h)
        return out
    if what == "jvp":
        if delta is None:
            raise ValueError("jvp oracle needs delta")
        h = 1e-4 if step is None else step
        delta = np.asarray(delta, dtype=np.float64).reshape(-1)
        flat = x.reshape(-1)
        out = np.zeros(spec.d_x)
        for i in range(spec.d_x):
            xp, xm = flat.copy(), flat.copy()
            xp[i] += h
            xm[i] -= h
            gp = gradients(spec, params, xp.reshape(x.shape), y).g_theta
            gm = gradients(spec, params, xm.reshape(x.shape), y).g_theta
            out[i] = (gp @ delta - gm @ delta) / (2 * h)
        return out
    raise ValueError(f"unknown oracle target {what!r}")


# ---------------------------------------------------------------------------
# minimal per-sample SGD trainer


def train_model(spec, params, dataset, epochs, lr, snapshot_every=1):
    """Plain SGD, one sample at a time in dataset order; returns snapshots."""
    _require_built(spec)
    if lr < 0:
        raise ValueError("lr must be >= 0")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    theta = params.theta.copy()
    snapshots = []
    for epoch in range(epochs):
        for sample in dataset:
            cur = params.with_theta(theta)
            bundle = gradients(spec, cur, sample.image, sample.label)
            theta = theta - lr * bundle.g_theta
            if not np.all(np.isfinite(theta)):
                raise FloatingPointError(f"training diverged at epoch {epoch}")
        if (epoch + 1) % snapshot_every == 0 or epoch == epochs - 1:
            snapshots.append(params.with_theta(theta.copy()))
    return snapshots


# ---------------------------------------------------------------------------
# zoo constructors


def linear_dot_model(d):
    """L(x, theta) = theta . x, the identity-Jacobian reference model."""
    spec = ModelSpec(layers=[Linear(d, 1)], loss="sum_output", input_shape=(d,))
    return build_model(spec)


def one_layer_model(d, activation="sigmoid", target=0.0):
    """L = 0.5 * (act(theta . x) - target)^2."""
    spec = ModelSpec(
        layers=[Linear(d, 1), Activation(activation)],
        loss="squared_error",
        input_shape=(d,),
        target=np.array([float(target)]),
    )
    return build_model(spec)


def mlp_model(d_in, hidden, num_classes, activation="sigmoid"):
    spec = ModelSpec(
        layers=[Linear(d_in, hidden), Activation(activation), Linear(hidden, num_classes)],
        loss="cross_entropy",
        input_shape=(d_in,),
        num_classes=num_classes,
    )
    return build_model(spec)


def lenet_variant(in_channels=1, image_size=28, channels=12, kernel=5, stride=2,
                  padding=2, num_classes=10, activation="sigmoid"):
    """Four conv layers then one fully-connected classifier head."""
    layers = []
    shape = (in_channels, image_size, image_size)
    for i in range(4):
        c_in = in_channels if i == 0 else channels
        layers += [Conv2d(c_in, channels, kernel, stride, padding), Activation(activation)]
        _, _, (oh, ow) = ad.conv_geometry(shape, kernel, stride, padding)
        shape = (channels, oh, ow)
    layers += [Flatten(), Linear(int(np.prod(shape)), num_classes)]
    spec = ModelSpec(layers=layers, loss="cross_entropy",
                     input_shape=(in_channels, image_size, image_size), num_classes=num_classes)
    return build_model(spec)

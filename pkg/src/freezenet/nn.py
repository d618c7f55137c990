"""Network definitions and explicit forward/backward passes.

Two reference architectures are built in:

* lenet300100: flatten, 784-300-100-10 MLP with relu, log-softmax head
  (266,610 parameters, 410 of them biases)
* lenet5caffe: conv 1->20 5x5, pool, conv 20->50 5x5, pool, 800-500-10
  (431,080 parameters, 580 of them biases)

Convolutions are im2col + matmul with the reduction axis ordered
(channel, kernel row, kernel col) ascending, so the float64 path inherits the
strict-accumulation guarantee of tensor.matmul. Maxpool is non-overlapping
(kernel == stride) and routes gradient to the argmax element, ties broken
toward the lowest flat index. ReLU's derivative at exactly 0 is taken as 0.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError, ParameterError, StaleCacheError
from .rng import RngStream
from .tensor import matmul

DESCRIPTOR_VERSION = "v1"

INIT_SCHEMES = ("xavier_normal", "kaiming_uniform", "pm_sigma")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    n_in: int = 0
    n_out: int = 0
    c_in: int = 0
    c_out: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    pool: int = 0

    def token(self) -> str:
        if self.kind == "linear":
            return f"linear({self.n_in},{self.n_out})"
        if self.kind == "conv2d":
            return f"conv2d({self.c_in},{self.c_out},{self.kernel},{self.stride},{self.padding})"
        if self.kind == "maxpool2d":
            return f"maxpool2d({self.pool},{self.pool})"
        return self.kind


def linear(n_in, n_out):
    return LayerSpec("linear", n_in=n_in, n_out=n_out)


def conv2d(c_in, c_out, kernel=5, stride=1, padding=0):
    return LayerSpec("conv2d", c_in=c_in, c_out=c_out, kernel=kernel, stride=stride, padding=padding)


def relu():
    return LayerSpec("relu")


def maxpool2d(pool=2):
    return LayerSpec("maxpool2d", pool=pool)


def flatten():
    return LayerSpec("flatten")


def log_softmax():
    return LayerSpec("log_softmax")


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple
    layers: tuple
    class_count: int

    def shape_chain(self):
        """Per-layer output shapes (excluding batch); raises if layers do not compose."""
        shape = tuple(self.input_shape)
        chain = []
        for lay in self.layers:
            if lay.kind == "linear":
                if shape != (lay.n_in,):
                    raise DimensionError(f"linear({lay.n_in},..) fed with shape {shape}")
                shape = (lay.n_out,)
            elif lay.kind == "conv2d":
                if len(shape) != 3 or shape[0] != lay.c_in:
                    raise DimensionError(f"conv2d expects ({lay.c_in},H,W), got {shape}")
                h = (shape[1] + 2 * lay.padding - lay.kernel) // lay.stride + 1
                w = (shape[2] + 2 * lay.padding - lay.kernel) // lay.stride + 1
                if h <= 0 or w <= 0:
                    raise DimensionError(f"conv2d output collapses on input {shape}")
                shape = (lay.c_out, h, w)
            elif lay.kind == "maxpool2d":
                if len(shape) != 3 or shape[1] % lay.pool or shape[2] % lay.pool:
                    raise DimensionError(f"maxpool2d({lay.pool}) does not tile {shape}")
                shape = (shape[0], shape[1] // lay.pool, shape[2] // lay.pool)
            elif lay.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif lay.kind in ("relu", "log_softmax"):
                pass
            else:
                raise ParameterError(f"unknown layer kind {lay.kind!r}")
            chain.append(shape)
        if chain[-1] != (self.class_count,):
            raise DimensionError(f"head produces {chain[-1]}, expected ({self.class_count},)")
        return chain

    def weight_layout(self):
        """[(layer_idx, w_shape, w_start, b_shape, b_start, fan_in, fan_out)] in order."""
        out = []
        w_off = b_off = 0
        for i, lay in enumerate(self.layers):
            if lay.kind == "linear":
                w_shape, b_shape = (lay.n_out, lay.n_in), (lay.n_out,)
                fan_in, fan_out = lay.n_in, lay.n_out
            elif lay.kind == "conv2d":
                w_shape = (lay.c_out, lay.c_in, lay.kernel, lay.kernel)
                b_shape = (lay.c_out,)
                fan_in = lay.c_in * lay.kernel * lay.kernel
                fan_out = lay.c_out * lay.kernel * lay.kernel
            else:
                continue
            out.append((i, w_shape, w_off, b_shape, b_off, fan_in, fan_out))
            w_off += int(np.prod(w_shape))
            b_off += int(np.prod(b_shape))
        return out

    @property
    def weight_count(self):
        return sum(int(np.prod(e[1])) for e in self.weight_layout())

    @property
    def bias_count(self):
        return sum(int(np.prod(e[3])) for e in self.weight_layout())

    @property
    def param_count(self):
        return self.weight_count + self.bias_count

    def to_descriptor(self) -> str:
        toks = "|".join(l.token() for l in self.layers)
        inp = ",".join(str(d) for d in self.input_shape)
        return f"{DESCRIPTOR_VERSION};name={self.name};input={inp};classes={self.class_count};layers={toks}"


def from_descriptor(text: str) -> NetworkSpec:
    parts = text.split(";")
    if len(parts) != 5 or parts[0] != DESCRIPTOR_VERSION:
        raise ParameterError(f"unsupported architecture descriptor: {text!r}")
    fields = dict(p.split("=", 1) for p in parts[1:])
    layers = []
    for tok in fields["layers"].split("|"):
        if "(" in tok:
            kind, args = tok[:-1].split("(")
            nums = [int(a) for a in args.split(",")]
        else:
            kind, nums = tok, []
        if kind == "linear":
            layers.append(linear(*nums))
        elif kind == "conv2d":
            layers.append(conv2d(*nums))
        elif kind == "maxpool2d":
            layers.append(maxpool2d(nums[0]))
        elif kind in ("relu", "flatten", "log_softmax"):
            layers.append(LayerSpec(kind))
        else:
            raise ParameterError(f"unknown layer token {tok!r}")
    spec = NetworkSpec(
        name=fields["name"],
        input_shape=tuple(int(d) for d in fields["input"].split(",")),
        layers=tuple(layers),
        class_count=int(fields["classes"]),
    )
    spec.shape_chain()
    return spec


def lenet300100() -> NetworkSpec:
    spec = NetworkSpec(
        name="lenet300100",
        input_shape=(1, 28, 28),
        layers=(flatten(), linear(784, 300), relu(), linear(300, 100), relu(),
                linear(100, 10), log_softmax()),
        class_count=10,
    )
    spec.shape_chain()
    return spec


def lenet5caffe() -> NetworkSpec:
    spec = NetworkSpec(
        name="lenet5caffe",
        input_shape=(1, 28, 28),
        layers=(conv2d(1, 20, 5), relu(), maxpool2d(2),
                conv2d(20, 50, 5), relu(), maxpool2d(2),
                flatten(), linear(800, 500), relu(), linear(500, 10), log_softmax()),
        class_count=10,
    )
    spec.shape_chain()
    return spec


ARCHITECTURES = {"lenet300100": lenet300100, "lenet5caffe": lenet5caffe}


class ParamSet:
    """Flat weight/bias stores with per-layer reshaped views.

    Views alias the flat arrays: mutating a view mutates the store. The
    version counter tags activation caches; code that mutates parameters must
    call bump() so stale caches are rejected by backward().
    """

    def __init__(self, spec: NetworkSpec, weights: np.ndarray, biases: np.ndarray):
        if weights.shape != (spec.weight_count,) or biases.shape != (spec.bias_count,):
            raise DimensionError("flat parameter arrays do not match the architecture")
        self.spec = spec
        self.weights = weights
        self.biases = biases
        self.version = 0
        self._layout = {e[0]: e for e in spec.weight_layout()}

    @property
    def dtype(self):
        return self.weights.dtype

    def weight_view(self, layer_idx: int) -> np.ndarray:
        _, w_shape, w_off, _, _, _, _ = self._layout[layer_idx]
        n = int(np.prod(w_shape))
        return self.weights[w_off:w_off + n].reshape(w_shape)

    def bias_view(self, layer_idx: int) -> np.ndarray:
        _, _, _, b_shape, b_off, _, _ = self._layout[layer_idx]
        return self.biases[b_off:b_off + b_shape[0]]

    def bump(self):
        self.version += 1

    def copy(self) -> "ParamSet":
        dup = ParamSet(self.spec, self.weights.copy(), self.biases.copy())
        dup.version = self.version
        return dup


def layer_sigma(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(2.0 / (fan_in + fan_out)))


def init_params(spec: NetworkSpec, scheme: str, stream: RngStream,
                dtype=np.float32) -> ParamSet:
    """Draw weights layer-by-layer in architecture order; biases start at 0.

    Draws happen in float64 and are then cast to the requested dtype; the
    cast is part of the regeneration contract used by the checkpoint codec.
    """
    if scheme not in INIT_SCHEMES:
        raise ParameterError(f"unknown init scheme {scheme!r}")
    chunks = []
    for _, w_shape, _, _, _, fan_in, fan_out in spec.weight_layout():
        n = int(np.prod(w_shape))
        if scheme == "xavier_normal":
            w = stream.normal(0.0, layer_sigma(fan_in, fan_out), n)
        elif scheme == "kaiming_uniform":
            bound = float(np.sqrt(6.0 / fan_in))
            w = stream.uniform(-bound, bound, n)
        else:  # pm_sigma: +sigma or -sigma with equal probability
            sigma = layer_sigma(fan_in, fan_out)
            u = stream.uniform(0.0, 1.0, n)
            w = np.where(u < 0.5, sigma, -sigma)
        chunks.append(w)
    weights = (np.concatenate(chunks) if chunks else np.empty(0)).astype(dtype)
    biases = np.zeros(spec.bias_count, dtype=dtype)
    return ParamSet(spec, weights, biases)


class ActivationCache:
    def __init__(self, params_version, batch):
        self.params_version = params_version
        self.batch = batch
        self.saved = []
        self.logp = None


def _im2col(x, kernel, stride, padding):
    """(B,C,H,W) -> (B*OH*OW, C*K*K); reduction order (c, ki, kj) ascending."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    b, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kernel * kernel)
    return np.ascontiguousarray(cols), (oh, ow)


def _col2im(dcols, x_shape, kernel, stride, padding, oh, ow):
    """Adjoint of _im2col: scatter-add column gradients back to input layout."""
    b, c, h, w = x_shape
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    d6 = dcols.reshape(b, oh, ow, c, kernel, kernel).transpose(0, 3, 1, 2, 4, 5)
    for ki in range(kernel):
        for kj in range(kernel):
            dxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += d6[:, :, :, :, ki, kj]
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def forward(spec: NetworkSpec, params: ParamSet, x: np.ndarray):
    """Run the stack; returns (log-probabilities, cache for backward)."""
    if x.shape[1:] != tuple(spec.input_shape):
        raise DimensionError(f"input shape {x.shape[1:]} != spec {spec.input_shape}")
    x = np.ascontiguousarray(x, dtype=params.dtype)
    cache = ActivationCache(params.version, x.shape[0])
    for i, lay in enumerate(spec.layers):
        if lay.kind == "linear":
            w, b = params.weight_view(i), params.bias_view(i)
            cache.saved.append(x)
            x = matmul(x, w.T) + b
        elif lay.kind == "conv2d":
            w, b = params.weight_view(i), params.bias_view(i)
            cols, (oh, ow) = _im2col(x, lay.kernel, lay.stride, lay.padding)
            cache.saved.append((x.shape, cols, oh, ow))
            y = matmul(cols, w.reshape(lay.c_out, -1).T) + b
            x = y.reshape(x.shape[0], oh, ow, lay.c_out).transpose(0, 3, 1, 2)
        elif lay.kind == "relu":
            mask = x > 0
            cache.saved.append(mask)
            x = np.where(mask, x, params.dtype.type(0))
        elif lay.kind == "maxpool2d":
            b_, c, h, w_ = x.shape
            k = lay.pool
            win = x.reshape(b_, c, h // k, k, w_ // k, k).transpose(0, 1, 2, 4, 3, 5)
            flat = win.reshape(b_, c, h // k, w_ // k, k * k)
            # first-occurrence argmax over the window's row-major order is
            # exactly the lowest-flat-index tie-break
            arg = np.argmax(flat, axis=-1)
            cache.saved.append((x.shape, arg))
            x = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        elif lay.kind == "flatten":
            cache.saved.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        elif lay.kind == "log_softmax":
            s = x - x.max(axis=1, keepdims=True)
            x = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
            cache.saved.append(x)
        else:
            raise ParameterError(f"unknown layer kind {lay.kind!r}")
    cache.logp = x
    return x, cache


@dataclass
class Gradients:
    weights: np.ndarray
    biases: np.ndarray


def nll_loss(logp: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood."""
    return float(-logp[np.arange(len(labels)), labels].mean())


def accuracy(logp: np.ndarray, labels: np.ndarray) -> float:
    return float((logp.argmax(axis=1) == labels).mean())


def backward(spec: NetworkSpec, params: ParamSet, cache: ActivationCache,
             labels: np.ndarray) -> Gradients:
    """Gradient of mean NLL wrt every weight and bias."""
    if cache.params_version != params.version:
        raise StaleCacheError("activation cache predates a parameter update")
    if len(labels) != cache.batch:
        raise DimensionError("labels do not match the cached batch")
    dtype = params.dtype
    batch = cache.batch
    dW = np.zeros_like(params.weights)
    dB = np.zeros_like(params.biases)
    grads = Gradients(dW, dB)
    layout = {e[0]: e for e in spec.weight_layout()}

    dy: Optional[np.ndarray] = None
    for i in range(len(spec.layers) - 1, -1, -1):
        lay = spec.layers[i]
        saved = cache.saved[i]
        if lay.kind == "log_softmax":
            logp = saved
            if dy is None:
                # dL/dlogp for mean NLL: -1/batch at the label entry
                dy = np.zeros_like(logp)
                dy[np.arange(batch), labels] = dtype.type(-1.0 / batch)
            dy = dy - np.exp(logp) * dy.sum(axis=1, keepdims=True)
        elif lay.kind == "flatten":
            dy = dy.reshape(saved)
        elif lay.kind == "relu":
            dy = dy * saved
        elif lay.kind == "maxpool2d":
            x_shape, arg = saved
            b_, c, h, w_ = x_shape
            k = lay.pool
            dflat = np.zeros((b_, c, h // k, w_ // k, k * k), dtype=dtype)
            np.put_along_axis(dflat, arg[..., None], dy[..., None], axis=-1)
            dy = (dflat.reshape(b_, c, h // k, w_ // k, k, k)
                  .transpose(0, 1, 2, 4, 3, 5).reshape(x_shape))
        elif lay.kind == "linear":
            x_in = saved
            _, w_shape, w_off, b_shape, b_off, _, _ = layout[i]
            w = params.weight_view(i)
            n = int(np.prod(w_shape))
            dW[w_off:w_off + n] = matmul(dy.T, x_in).reshape(-1)
            dB[b_off:b_off + b_shape[0]] = dy.sum(axis=0)
            dy = matmul(dy, w)
        elif lay.kind == "conv2d":
            x_shape, cols, oh, ow = saved
            _, w_shape, w_off, b_shape, b_off, _, _ = layout[i]
            w = params.weight_view(i).reshape(lay.c_out, -1)
            dyc = dy.transpose(0, 2, 3, 1).reshape(-1, lay.c_out)
            n = int(np.prod(w_shape))
            dW[w_off:w_off + n] = matmul(dyc.T, cols).reshape(-1)
            dB[b_off:b_off + b_shape[0]] = dyc.sum(axis=0)
            dcols = matmul(dyc, w)
            dy = _col2im(dcols, x_shape, lay.kernel, lay.stride, lay.padding, oh, ow)
        else:
            raise ParameterError(f"unknown layer kind {lay.kind!r}")
    return grads

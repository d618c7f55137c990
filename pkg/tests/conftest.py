"""Shared oracles and fixtures: finite-difference gradients, explicit
finite-difference Hessians, random small architectures, synthetic IDX files.
All oracle randomness comes from numpy's own Generator, independent of the
package's stream implementation."""

import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from freezenet import nn

REPO_ROOT = Path(__file__).resolve().parent.parent
MNIST_DIR = REPO_ROOT / "data" / "mnist"


def loss_of(spec, params, x, labels):
    logp, _ = nn.forward(spec, params, x)
    return nn.nll_loss(logp, labels)


def fd_gradients(spec, params, x, labels, eps=1e-5):
    """Central finite differences over every weight and bias, float64."""
    dW = np.zeros_like(params.weights)
    dB = np.zeros_like(params.biases)
    for arr, out in ((params.weights, dW), (params.biases, dB)):
        for i in range(arr.size):
            orig = arr[i]
            arr[i] = orig + eps
            lp = loss_of(spec, params, x, labels)
            arr[i] = orig - eps
            lm = loss_of(spec, params, x, labels)
            arr[i] = orig
            out[i] = (lp - lm) / (2 * eps)
    return dW, dB


def fd_weight_hessian(spec, params, x, labels, eps=1e-5):
    """Explicit Hessian over weights only, via central differences of the
    analytic weight gradient."""
    n = params.weights.size
    h = np.zeros((n, n))
    for j in range(n):
        orig = params.weights[j]
        params.weights[j] = orig + eps
        params.bump()
        _, cache = nn.forward(spec, params, x)
        gp = nn.backward(spec, params, cache, labels).weights.copy()
        params.weights[j] = orig - eps
        params.bump()
        _, cache = nn.forward(spec, params, x)
        gm = nn.backward(spec, params, cache, labels).weights.copy()
        params.weights[j] = orig
        params.bump()
        h[:, j] = (gp - gm) / (2 * eps)
    return h


def rel_err(a, b, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.max(np.abs(a - b) / denom)


def random_small_net(r: np.random.Generator, max_params=200, conv_ok=True):
    """Random composable net (linear/conv/relu/maxpool mix) with <= max_params
    parameters; returns (spec, params_f64, x, labels)."""
    while True:
        classes = int(r.integers(2, 5))
        layers = []
        if conv_ok and r.random() < 0.5:
            c0 = int(r.integers(1, 3))
            hw = int(r.integers(4, 8))
            k = int(r.integers(2, 4))
            c1 = int(r.integers(1, 4))
            pad = int(r.integers(0, 2))
            input_shape = (c0, hw, hw)
            layers += [nn.conv2d(c0, c1, k, 1, pad), nn.relu()]
            out = hw + 2 * pad - k + 1
            if out % 2 == 0 and out >= 4 and r.random() < 0.5:
                layers.append(nn.maxpool2d(2))
                out //= 2
            layers.append(nn.flatten())
            feat = c1 * out * out
        else:
            feat = int(r.integers(2, 9))
            input_shape = (feat,)
        if r.random() < 0.5:
            hidden = int(r.integers(2, 9))
            layers += [nn.linear(feat, hidden), nn.relu()]
            feat = hidden
        layers += [nn.linear(feat, classes), nn.log_softmax()]
        spec = nn.NetworkSpec("custom", input_shape, tuple(layers), classes)
        try:
            spec.shape_chain()
        except Exception:
            continue
        if spec.param_count > max_params:
            continue
        weights = r.normal(0, 0.6, spec.weight_count)
        biases = r.normal(0, 0.3, spec.bias_count)
        params = nn.ParamSet(spec, weights, biases)
        batch = int(r.integers(2, 5))
        x = r.normal(0, 1, (batch,) + input_shape)
        labels = r.integers(0, classes, batch)
        return spec, params, x, labels


def write_idx_images(path, images: np.ndarray, compress=False):
    """images: (N, 28, 28) uint8."""
    n, h, w = images.shape
    payload = struct.pack(">IIII", 0x803, n, h, w) + images.tobytes()
    data = gzip.compress(payload) if compress else payload
    Path(path).write_bytes(data)


def write_idx_labels(path, labels: np.ndarray, compress=False):
    payload = struct.pack(">II", 0x801, len(labels)) + labels.astype(np.uint8).tobytes()
    data = gzip.compress(payload) if compress else payload
    Path(path).write_bytes(data)


@pytest.fixture(scope="session")
def mnist_dir():
    if not (MNIST_DIR / "train-images-idx3-ubyte.gz").exists():
        pytest.skip("MNIST files not present under data/mnist")
    return MNIST_DIR

"""
A small dense feed-forward network with hand-written reverse-mode gradients
and an Adam optimizer. TRIL, DSFN and the batch Q-solver are all built from
`DenseNet` instances.

Everything is computed in float64 so analytic gradients can be checked
tightly against finite differences.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Any, Callable, List, Sequence, Tuple

import numpy as np

from dsfn_irl.exceptions import ConfigurationError, NumericalError

ACTIVATIONS = ('tanh', 'identity')

# Bounds applied to the log-standard-deviation outputs of a `GaussianHead`.
LOG_STD_BOUNDS = (-5., 2.)

# A loss function maps the network outputs for a batch, plus whatever targets
# the batch carries, to a scalar loss and the gradient of that loss with
# respect to the outputs.
LossFunction = Callable[[np.ndarray, Any], Tuple[float, np.ndarray]]


def count_params(layer_sizes: Sequence[int]) -> int:
    return sum((n_in + 1) * n_out
               for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]))


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]
    outputs: List[np.ndarray]
    single: bool


@dataclass
class DenseNet:
    """
    A multilayer perceptron with tanh hidden layers. The output layer is the
    identity unless `output_activation` is 'tanh'. All weights and biases live
    in one flat `params` vector, laid out layer by layer as the row-major
    `(n_in, n_out)` weight matrix followed by the bias vector.
    """
    layer_sizes: Tuple[int, ...]
    params: np.ndarray
    output_activation: str = 'identity'

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) <= 0:
            raise ConfigurationError(
                f'Invalid layer sizes {self.layer_sizes}')
        if self.output_activation not in ACTIVATIONS:
            raise ConfigurationError(
                f'Unknown activation {self.output_activation}')
        self.params = np.asarray(self.params, dtype=np.float64)
        expected = count_params(self.layer_sizes)
        if self.params.shape != (expected,):
            raise ConfigurationError(
                f'Expected {expected} parameters for layers '
                f'{self.layer_sizes}, got {self.params.shape}')

    @classmethod
    def initialize(cls,
                   layer_sizes: Sequence[int],
                   rng: np.random.Generator,
                   output_activation: str = 'identity') -> DenseNet:
        """
        Weights are drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
        biases start at zero.
        """
        chunks = []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = 1. / np.sqrt(n_in)
            chunks.append(rng.uniform(-bound, bound, size=n_in * n_out))
            chunks.append(np.zeros(n_out))
        return cls(tuple(layer_sizes), np.concatenate(chunks),
                   output_activation)

    @classmethod
    def zeros(cls,
              layer_sizes: Sequence[int],
              output_activation: str = 'identity') -> DenseNet:
        return cls(tuple(layer_sizes), np.zeros(count_params(layer_sizes)),
                   output_activation)

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def num_params(self) -> int:
        return self.params.size

    def layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """
        Returns `(weights, bias)` views into `params` for every layer.
        """
        res = []
        offset = 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            weights = self.params[offset:offset + n_in * n_out]
            offset += n_in * n_out
            bias = self.params[offset:offset + n_out]
            offset += n_out
            res.append((weights.reshape(n_in, n_out), bias))
        return res

    def activation(self, layer: int) -> str:
        if layer < self.num_layers - 1:
            return 'tanh'
        return self.output_activation

    def forward(self, x: np.ndarray) -> np.ndarray:
        output, _ = self.forward_with_cache(x)
        return output

    def forward_with_cache(self, x: np.ndarray) -> Tuple[np.ndarray,
                                                         ForwardCache]:
        """
        Runs a forward pass on a single input vector or on a 2D batch of
        shape `(batch_size, input_size)` and keeps the intermediate
        activations needed by `backward()`.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        if h.ndim != 2 or h.shape[1] != self.input_size:
            raise ConfigurationError(
                f'Expected input of size {self.input_size}, '
                f'got shape {x.shape}')

        inputs, outputs = [], []
        for i, (weights, bias) in enumerate(self.layers()):
            inputs.append(h)
            h = h @ weights + bias
            if self.activation(i) == 'tanh':
                h = np.tanh(h)
            if not np.all(np.isfinite(h)):
                raise NumericalError('Non-finite activation', layer=i)
            outputs.append(h)
        return (h[0] if single else h), ForwardCache(inputs, outputs, single)

    def backward(self,
                 cache: ForwardCache,
                 d_output: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Back-propagates `d_output` (the gradient of a scalar loss with respect
        to the outputs of the forward pass that produced `cache`). Returns the
        flat parameter gradient and the gradient with respect to the input.
        """
        d = np.atleast_2d(np.asarray(d_output, dtype=np.float64))
        layers = self.layers()
        grads = [None] * self.num_layers
        for i in reversed(range(self.num_layers)):
            weights, _ = layers[i]
            if self.activation(i) == 'tanh':
                d = d * (1. - cache.outputs[i] ** 2)
            d_weights = cache.inputs[i].T @ d
            d_bias = d.sum(axis=0)
            if not (np.all(np.isfinite(d_weights))
                    and np.all(np.isfinite(d_bias))):
                raise NumericalError('Non-finite gradient', layer=i)
            grads[i] = np.concatenate([d_weights.ravel(), d_bias])
            d = d @ weights.T
        return np.concatenate(grads), (d[0] if cache.single else d)

    def with_params(self, params: np.ndarray) -> DenseNet:
        return replace(self, params=np.array(params, dtype=np.float64))

    def copy(self) -> DenseNet:
        return self.with_params(self.params)


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def value_and_gradient(net: DenseNet,
                       loss_fn: LossFunction,
                       batch: Tuple[np.ndarray, Any]) -> Tuple[float,
                                                               np.ndarray]:
    """
    Evaluates `loss_fn` on the outputs of `net` for `batch = (inputs,
    targets)` and returns the loss together with its gradient with respect to
    the network parameters.
    """
    inputs, targets = batch
    outputs, cache = net.forward_with_cache(inputs)
    loss, d_outputs = loss_fn(outputs, targets)
    if not np.isfinite(loss):
        raise NumericalError('Non-finite loss', layer=net.num_layers - 1)
    grad, _ = net.backward(cache, d_outputs)
    return float(loss), grad


def gradient(net: DenseNet,
             loss_fn: LossFunction,
             batch: Tuple[np.ndarray, Any]) -> np.ndarray:
    return value_and_gradient(net, loss_fn, batch)[1]


def mean_squared_error(outputs: np.ndarray,
                       targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Batch mean of `0.5 * ||output - target||^2`.
    """
    outputs = np.atleast_2d(outputs)
    residual = outputs - np.atleast_2d(targets)
    n = residual.shape[0]
    loss = 0.5 * np.sum(residual ** 2) / n
    return loss, residual / n


@dataclass
class AdamState:
    step: int
    first_moment: np.ndarray
    second_moment: np.ndarray
    learning_rate: float = 3e-4
    epsilon: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999

    @classmethod
    def zeros(cls,
              size: int,
              learning_rate: float = 3e-4,
              epsilon: float = 1e-4) -> AdamState:
        return cls(0, np.zeros(size), np.zeros(size), learning_rate, epsilon)


def adam_update(params: np.ndarray,
                state: AdamState,
                grad: np.ndarray) -> Tuple[np.ndarray, AdamState]:
    """
    One bias-corrected Adam update on a flat parameter vector. Neither
    `params` nor `state` is modified in place.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape or grad.shape != state.first_moment.shape:
        raise ConfigurationError(
            f'Gradient of shape {grad.shape} does not match parameters of '
            f'shape {params.shape}')
    step = state.step + 1
    m = state.beta1 * state.first_moment + (1. - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1. - state.beta2) * grad ** 2
    m_hat = m / (1. - state.beta1 ** step)
    v_hat = v / (1. - state.beta2 ** step)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat)
                                                         + state.epsilon)
    return new_params, replace(state, step=step, first_moment=m,
                               second_moment=v)


def polyak_update(target: DenseNet, online: DenseNet, tau: float) -> DenseNet:
    """
    Returns a target network with parameters `(1 - tau) * target + tau *
    online`.
    """
    if not 0. < tau <= 1.:
        raise ConfigurationError(f'tau must lie in (0, 1], got {tau}')
    return target.with_params((1. - tau) * target.params + tau * online.params)


@dataclass
class GaussianHead:
    """
    Diagonal Gaussian over the next state. The network emits means and
    log-standard-deviations; standard deviations are their exponentials and
    therefore strictly positive.
    """
    mean: np.ndarray
    log_std: np.ndarray

    @classmethod
    def from_output(cls, output: np.ndarray) -> GaussianHead:
        output = np.atleast_2d(output)
        half = output.shape[-1] // 2
        return cls(output[..., :half], output[..., half:])

    @property
    def clipped_log_std(self) -> np.ndarray:
        return np.clip(self.log_std, *LOG_STD_BOUNDS)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.clipped_log_std)

    def negative_log_likelihood(self, x: np.ndarray) -> np.ndarray:
        """
        Per-sample negative log-likelihood, averaged over dimensions.
        """
        z = (x - self.mean) / self.std
        nll = 0.5 * z ** 2 + self.clipped_log_std + 0.5 * np.log(2 * np.pi)
        return nll.mean(axis=-1)

    def gradients(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Gradients of `negative_log_likelihood(x)` (per sample) with respect
        to the raw mean and log-std outputs.
        """
        dim = self.mean.shape[-1]
        var = self.std ** 2
        d_mean = -(x - self.mean) / var / dim
        inside = (self.log_std >= LOG_STD_BOUNDS[0]) \
            & (self.log_std <= LOG_STD_BOUNDS[1])
        d_log_std = (1. - (x - self.mean) ** 2 / var) / dim * inside
        return d_mean, d_log_std


def snapshot_to_bytes(net: DenseNet) -> bytes:
    """
    Serializes `net` as a little-endian int64 header `[num_sizes, *sizes]`
    followed by the parameters as little-endian float64.
    """
    header = np.array([len(net.layer_sizes), *net.layer_sizes], dtype='<i8')
    return header.tobytes() + net.params.astype('<f8').tobytes()


def snapshot_from_bytes(data: bytes,
                        output_activation: str = 'identity') -> DenseNet:
    num_sizes = int(np.frombuffer(data[:8], dtype='<i8')[0])
    header_end = 8 * (num_sizes + 1)
    sizes = np.frombuffer(data[8:header_end], dtype='<i8')
    params = np.frombuffer(data[header_end:], dtype='<f8')
    return DenseNet(tuple(int(n) for n in sizes), params.astype(np.float64),
                    output_activation)


def save_snapshot(net: DenseNet, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as f:
        f.write(snapshot_to_bytes(net))


def load_snapshot(path: str, output_activation: str = 'identity') -> DenseNet:
    with open(path, 'rb') as f:
        return snapshot_from_bytes(f.read(), output_activation)

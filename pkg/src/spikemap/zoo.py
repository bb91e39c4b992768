"""Generated desk-scale models and datasets for correctness experiments.

The mapping holds for arbitrary weights, so random networks exercise it
fully without external datasets. Three architectures cover the corner
cases: a plain MLP, a LeNet-style CNN with batchnorm before the ReLU, and a
VGG-style block CNN with batchnorm after the ReLU, zero padding, and a max
pooling stage that ends up with at least one min-pool channel after fusion.

Evaluation labels come from a sibling network with perturbed weights, so a
model predicts them imperfectly and samples near its decision boundary are
right or wrong with roughly even odds; accuracy statistics under noise then
behave like those of a genuinely trained model. A tiny hill-climb-trained
MLP on Gaussian clusters is included as well.
"""

from __future__ import annotations

import copy

import numpy as np

from .layers import BN_AFTER_RELU, BN_BEFORE_RELU, BatchNorm, Conv2d, Dense, Flatten, Pool2d
from .modelio import Dataset
from .network import ReluNetwork, forward_batch, predict_batch

MODEL_KINDS = ("mlp", "lenet", "vgg", "trained-mlp")


def _dense(rng, n_in, n_out, sum_mean=0.8, sum_sd=0.5, b_scale=0.35, relu=True) -> Dense:
    """Weights drawn so the incoming sums average `sum_mean` +- `sum_sd`.

    A positive mean pushes plenty of rows past the 1 - delta bound, so the
    rescaling step does real work, while negative sums stay mild.
    """
    return Dense(
        weights=rng.normal(sum_mean / n_in, sum_sd / np.sqrt(n_in), (n_out, n_in)),
        bias=rng.normal(0.0, b_scale, n_out),
        relu=relu,
    )


def _conv(rng, c_in, c_out, k=3, padding=0, sum_mean=0.8, sum_sd=0.5, b_scale=0.3) -> Conv2d:
    fan = c_in * k * k
    pad = (padding,) * 4 if isinstance(padding, int) else padding
    return Conv2d(
        weights=rng.normal(sum_mean / fan, sum_sd / np.sqrt(fan), (c_out, c_in, k, k)),
        bias=rng.normal(0.0, b_scale, c_out),
        padding=pad,
    )


def _bn(rng, channels, position, force_negative=False) -> BatchNorm:
    gamma = rng.normal(1.0, 0.25, channels)
    if force_negative:
        gamma[rng.integers(channels)] = -0.5
    return BatchNorm(
        mu=rng.normal(0.0, 0.4, channels),
        sigma_sq=rng.uniform(0.7, 1.3, channels),
        gamma=gamma,
        beta=rng.normal(0.0, 0.3, channels),
        epsilon=1e-5,
        position=position,
    )

def _center_readout(net: ReluNetwork, rng) -> ReluNetwork:
    """Balance the readout so the argmax varies with the input.

    Random positive-mean features ride a large common mode; absorbing its
    projection into the readout bias (as training would) leaves the
    input-dependent fluctuations to decide the class.
    """
    p, q = net.input_range
    probe = rng.uniform(p, q, (256,) + net.input_shape)
    feats = forward_batch(net, probe).outputs[-2]
    readout = net.readout
    center = readout.weights @ feats.mean(axis=0)
    fluct = (feats - feats.mean(axis=0)) @ readout.weights.T
    spread = float(fluct.std(axis=0).mean())
    readout.bias = rng.normal(0.0, 0.4 * spread, readout.bias.shape) - center
    return net


def make_mlp(seed: int = 0) -> ReluNetwork:
    """Three hidden layers, inputs in [0, 1]; positive-mean weights push many
    incoming sums past the upper bound, so rescaling has real work to do."""
    rng = np.random.default_rng(seed)
    layers = [
        _dense(rng, 16, 24),
        _dense(rng, 24, 20),
        _dense(rng, 20, 16),
        _dense(rng, 16, 10, sum_mean=0.0, sum_sd=1.6, relu=False),
    ]
    net = ReluNetwork(layers, input_shape=(16,), input_range=(0.0, 1.0))
    return _center_readout(net, rng)


def make_lenet(seed: int = 2) -> ReluNetwork:
    """LeNet-style stack, batchnorm before every ReLU, inputs in [0, 1]."""
    rng = np.random.default_rng(seed)
    layers = [
        _conv(rng, 1, 4, k=3),                       # 14 -> 12
        _bn(rng, 4, BN_BEFORE_RELU),
        Pool2d(window=2, stride=2),                  # 12 -> 6
        _conv(rng, 4, 8, k=3),                       # 6 -> 4
        _bn(rng, 8, BN_BEFORE_RELU),
        Pool2d(window=2, stride=2),                  # 4 -> 2
        Flatten(),
        _dense(rng, 32, 24),
        _bn(rng, 24, BN_BEFORE_RELU),
        _dense(rng, 24, 10, sum_mean=0.0, sum_sd=1.6, relu=False),
    ]
    net = ReluNetwork(layers, input_shape=(1, 14, 14), input_range=(0.0, 1.0))
    return _center_readout(net, rng)


def make_vgg(seed: int = 2) -> ReluNetwork:
    """VGG-style block CNN: batchnorm after the ReLU, zero padding, pooling.

    Inputs live in [-3, 3]; the batchnorm ahead of the first pooling stage
    carries a negative scale on one channel, so fusion must switch that pool
    channel from max to min.
    """
    rng = np.random.default_rng(seed)
    layers = [
        _conv(rng, 3, 6, k=3, padding=1, sum_sd=0.35),   # 8 -> 8, padded
        _bn(rng, 6, BN_AFTER_RELU, force_negative=True),
        Pool2d(window=2, stride=2),                  # 8 -> 4
        _conv(rng, 6, 10, k=3, padding=1, sum_sd=0.35),  # 4 -> 4, padded
        _bn(rng, 10, BN_AFTER_RELU),
        Pool2d(window=2, stride=2),                  # 4 -> 2
        Flatten(),
        _dense(rng, 40, 16, sum_sd=0.4),
        _bn(rng, 16, BN_AFTER_RELU),
        _dense(rng, 16, 10, sum_mean=0.0, sum_sd=1.6, relu=False),
    ]
    net = ReluNetwork(layers, input_shape=(3, 8, 8), input_range=(-3.0, 3.0))
    return _center_readout(net, rng)


def make_trained_mlp(seed: int = 3, steps: int = 400) -> ReluNetwork:
    """Small MLP hill-climbed (no gradients) on three Gaussian clusters in 2-d."""
    rng = np.random.default_rng(seed)
    x, y = _cluster_data(rng, 600)
    net = ReluNetwork(
        [_dense(rng, 2, 12, sum_mean=0.5, sum_sd=1.0),
         _dense(rng, 12, 3, sum_mean=0.0, sum_sd=1.5, relu=False)],
        input_shape=(2,), input_range=(0.0, 1.0),
    )
    best = float(np.mean(predict_batch(net, x) == y))
    for _ in range(steps):
        trial = copy.deepcopy(net)
        for lay in trial.layers:
            lay.weights = lay.weights + rng.normal(0.0, 0.08, lay.weights.shape)
            lay.bias = lay.bias + rng.normal(0.0, 0.08, lay.bias.shape)
        acc = float(np.mean(predict_batch(trial, x) == y))
        if acc >= best:
            net, best = trial, acc
    return net


def _cluster_data(rng, n):
    centers = np.array([[0.25, 0.3], [0.7, 0.25], [0.5, 0.75]])
    y = rng.integers(0, 3, n)
    x = centers[y] + rng.normal(0.0, 0.09, (n, 2))
    return np.clip(x, 0.0, 1.0), y


def make_model(kind: str, seed: int = 0) -> ReluNetwork:
    if kind == "mlp":
        return make_mlp(seed)
    if kind == "lenet":
        return make_lenet(seed)
    if kind == "vgg":
        return make_vgg(seed)
    if kind == "trained-mlp":
        return make_trained_mlp(seed)
    raise ValueError(f"unknown model kind {kind!r}; pick one of {MODEL_KINDS}")


def label_teacher(net: ReluNetwork, seed: int, relative_sd: float = 0.2) -> ReluNetwork:
    """A sibling of `net` with weight noise, used to label generated data.

    The sibling's readout is rebalanced the same way as the original's, so
    its predictions stay class-diverse; near the original's decision
    boundaries the two nets agree about half the time, which gives accuracy
    statistics the same flavor as a genuinely trained model's.
    """
    rng = np.random.default_rng(seed)
    teacher = copy.deepcopy(net)
    for lay in teacher.layers:
        if isinstance(lay, (Dense, Conv2d)):
            scale = relative_sd * (np.abs(lay.weights).mean() + 1e-12)
            lay.weights = lay.weights + rng.normal(0.0, scale, lay.weights.shape)
    # keep the original bias offsets but recompute the common-mode centering,
    # otherwise the perturbed feature mean swamps the logits
    p, q = net.input_range
    probe = rng.uniform(p, q, (256,) + net.input_shape)
    center_orig = net.readout.weights @ forward_batch(net, probe).outputs[-2].mean(axis=0)
    center_new = teacher.readout.weights @ forward_batch(teacher, probe).outputs[-2].mean(axis=0)
    teacher.readout.bias = net.readout.bias + center_orig - center_new
    return teacher


def make_dataset(net: ReluNetwork, n: int, seed: int, labeled: bool = True) -> Dataset:
    """Uniform random inputs over the model's input range, teacher-labeled."""
    rng = np.random.default_rng(seed)
    p, q = net.input_range
    images = rng.uniform(p, q, (n,) + net.input_shape)
    labels = None
    if labeled:
        if net.input_shape == (2,):
            # the trained MLP gets its true cluster labels
            images, labels = _cluster_data(rng, n)
        else:
            teacher = label_teacher(net, seed + 7919)
            labels = predict_batch(teacher, images)
    return Dataset(images=images, labels=labels)

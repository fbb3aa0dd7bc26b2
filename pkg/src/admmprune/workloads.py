"""Desk-scale local objectives and the proximal SGD inner solver.

Each rank owns one disjoint, equally sized shard of synthetic data drawn
from a fixed-seed Gaussian source. Gradients are hand-derived (the conv net
uses an im2col forward/backward) so they can be validated against central
finite differences. The inner solver runs mini-batch SGD with momentum on
the local loss plus a quadratic pull toward the node consensus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensors import LayerKind, LayerSpec

_DATA_STREAM = 101
_INIT_STREAM = 211
_BATCH_STREAM = 307

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class Shard:
    features: np.ndarray
    targets: np.ndarray

    @property
    def rows(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class SolverConfig:
    lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be at least 1, got {self.batch_size}")


class Workload:
    """Base: a set of weight layers plus per-rank data shards.

    ``init_kind`` selects between a random start and a pretrained one (the
    generating teacher/planted parameters plus small noise), matching how
    pruning runs are usually started from an already trained model.
    """

    kind = "base"

    def __init__(self, layers: list[LayerSpec], shards: list[Shard], init_kind: str = "random"):
        self.layers = layers
        self.shards = shards
        self.init_kind = init_kind
        self.reference: Params | None = None  # teacher / planted parameters

    def init_params(self, rng: np.random.Generator) -> Params:
        if self.init_kind == "pretrained":
            if self.reference is None:
                raise ConfigError(f"workload {self.kind} has no reference parameters")
            return {
                name: arr + rng.normal(0.0, 0.02, size=arr.shape)
                for name, arr in self.reference.items()
            }
        return {
            ls.name: rng.normal(0.0, 0.1, size=ls.shape).astype(np.float64)
            for ls in self.layers
        }

    def loss_and_grad(self, params: Params, features: np.ndarray, targets: np.ndarray):
        raise NotImplementedError


class QuadraticWorkload(Workload):
    """Least squares: f(x) = 0.5 * ||A x - b||^2 summed over the batch rows."""

    kind = "quadratic"

    def __init__(self, layers, shards, planted: np.ndarray, init_kind: str = "random"):
        super().__init__(layers, shards, init_kind)
        self.planted = planted  # (1, dim) tensor the targets were generated from
        self.reference = {"x": planted}

    def loss_and_grad(self, params, features, targets):
        x = params["x"]
        if x.shape[1] != features.shape[1]:
            raise ShapeError(f"feature dim {features.shape[1]} vs parameter dim {x.shape[1]}")
        resid = features @ x[0] - targets
        loss = 0.5 * float(resid @ resid)
        grad = {"x": (features.T @ resid)[None, :]}
        return loss, grad


class LogisticWorkload(Workload):
    """Binary logistic regression with mean cross-entropy over the batch."""

    kind = "logistic"

    def loss_and_grad(self, params, features, targets):
        w = params["w"]
        logits = features @ w[0]
        # log(1 + exp(-z)) + (1-y) z, computed stably
        loss = float(np.mean(np.logaddexp(0.0, logits) - targets * logits))
        probs = 1.0 / (1.0 + np.exp(-logits))
        grad = {"w": ((features.T @ (probs - targets)) / features.shape[0])[None, :]}
        return loss, grad


class ConvNetWorkload(Workload):
    """One conv layer (im2col), tanh, one fc layer, softmax cross-entropy.

    Inputs are (batch, c_in, h, w) images; labels are class indices produced
    by a planted teacher with the same architecture.
    """

    kind = "tinyconv"

    def __init__(self, layers, shards, image_shape: tuple[int, int, int], classes: int,
                 init_kind: str = "random"):
        super().__init__(layers, shards, init_kind)
        self.image_shape = image_shape  # (c_in, h, w)
        self.classes = classes
        conv_shape = layers[0].shape
        self.kernel = (conv_shape[2], conv_shape[3])
        self.out_hw = (
            image_shape[1] - conv_shape[2] + 1,
            image_shape[2] - conv_shape[3] + 1,
        )

    def _im2col(self, images: np.ndarray) -> np.ndarray:
        b = images.shape[0]
        c_in, kh, kw = self.image_shape[0], self.kernel[0], self.kernel[1]
        oh, ow = self.out_hw
        cols = np.empty((b, oh, ow, c_in, kh, kw), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, :, i, j] = images[:, :, i : i + oh, j : j + ow].transpose(0, 2, 3, 1)
        return cols.reshape(b * oh * ow, c_in * kh * kw)

    def forward(self, params: Params, images: np.ndarray):
        b = images.shape[0]
        oh, ow = self.out_hw
        w_conv = params["conv1"]
        w_fc = params["fc"]
        cols = self._im2col(images)
        pre = cols @ w_conv.reshape(w_conv.shape[0], -1).T  # (b*oh*ow, c_out)
        act = np.tanh(pre)
        flat = act.reshape(b, oh * ow * w_conv.shape[0])
        logits = flat @ w_fc.T
        return cols, pre, act, flat, logits

    def loss_and_grad(self, params, features, targets):
        b = features.shape[0]
        oh, ow = self.out_hw
        w_conv = params["conv1"]
        w_fc = params["fc"]
        cols, _, act, flat, logits = self.forward(params, features)

        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        labels = targets.astype(np.intp)
        loss = -float(np.mean(log_probs[np.arange(b), labels]))

        d_logits = np.exp(log_probs)
        d_logits[np.arange(b), labels] -= 1.0
        d_logits /= b
        g_fc = d_logits.T @ flat
        d_flat = d_logits @ w_fc
        d_act = d_flat.reshape(b * oh * ow, w_conv.shape[0])
        d_pre = d_act * (1.0 - act * act)
        g_conv = (d_pre.T @ cols).reshape(w_conv.shape)
        return loss, {"conv1": g_conv, "fc": g_fc}

    def predict(self, params: Params, images: np.ndarray) -> np.ndarray:
        _, _, _, _, logits = self.forward(params, images)
        return logits.argmax(axis=1)


def _shard_rows(features: np.ndarray, targets: np.ndarray, world_size: int) -> list[Shard]:
    rows = features.shape[0]
    if rows % world_size != 0:
        raise ConfigError(f"{rows} rows are not divisible into {world_size} equal shards")
    per = rows // world_size
    return [
        Shard(features[r * per : (r + 1) * per].copy(), targets[r * per : (r + 1) * per].copy())
        for r in range(world_size)
    ]


def build_quadratic(
    dim: int, shard_rows: int, world_size: int, seed: int, noise: float = 0.0,
    init_kind: str = "random",
) -> QuadraticWorkload:
    rng = np.random.default_rng([seed, _DATA_STREAM])
    total = shard_rows * world_size
    features = rng.normal(size=(total, dim))
    planted = rng.normal(size=dim)
    targets = features @ planted
    if noise > 0:
        targets = targets + noise * rng.normal(size=total)
    layers = [LayerSpec("x", LayerKind.FULLY_CONNECTED, (1, dim))]
    return QuadraticWorkload(layers, _shard_rows(features, targets, world_size), planted[None, :], init_kind)


def build_logistic(dim: int, shard_rows: int, world_size: int, seed: int,
                   init_kind: str = "random") -> LogisticWorkload:
    rng = np.random.default_rng([seed, _DATA_STREAM])
    total = shard_rows * world_size
    features = rng.normal(size=(total, dim))
    teacher = rng.normal(size=dim)
    targets = (features @ teacher > 0).astype(np.float64)
    layers = [LayerSpec("w", LayerKind.FULLY_CONNECTED, (1, dim))]
    workload = LogisticWorkload(layers, _shard_rows(features, targets, world_size), init_kind)
    workload.reference = {"w": teacher[None, :]}
    return workload


def build_tinyconv(
    shard_rows: int,
    world_size: int,
    seed: int,
    input_channels: int = 3,
    image_size: int = 8,
    conv_filters: int = 8,
    kernel: int = 3,
    classes: int = 4,
    init_kind: str = "random",
) -> ConvNetWorkload:
    rng = np.random.default_rng([seed, _DATA_STREAM])
    total = shard_rows * world_size
    images = rng.normal(size=(total, input_channels, image_size, image_size))
    oh = image_size - kernel + 1
    layers = [
        LayerSpec("conv1", LayerKind.CONV, (conv_filters, input_channels, kernel, kernel), prunable=True),
        LayerSpec("fc", LayerKind.FULLY_CONNECTED, (classes, conv_filters * oh * oh)),
    ]
    workload = ConvNetWorkload(layers, [], (input_channels, image_size, image_size), classes, init_kind)
    teacher = {
        ls.name: rng.normal(0.0, 0.5, size=ls.shape).astype(np.float64) for ls in layers
    }
    # Graded channel/filter importance: later input channels and output
    # filters contribute geometrically less, so structured pruning has real
    # redundancy to find.
    teacher["conv1"] *= (0.5 ** np.arange(input_channels))[None, :, None, None]
    teacher["conv1"] *= (0.75 ** np.arange(conv_filters))[:, None, None, None]
    labels = workload.predict(teacher, images).astype(np.float64)
    workload.shards = _shard_rows(images, labels, world_size)
    workload.reference = teacher
    return workload


def load_csv_shards(path, world_size: int, target_columns: int = 1) -> list[Shard]:
    """Load a features/targets CSV and split it into contiguous row blocks.

    The last ``target_columns`` columns are targets (squeezed when a single
    column); rows must divide evenly across ranks.
    """
    data = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    if target_columns < 1 or target_columns >= data.shape[1]:
        raise ConfigError(f"target_columns {target_columns} invalid for {data.shape[1]} columns")
    features = data[:, :-target_columns]
    targets = data[:, -target_columns:]
    if target_columns == 1:
        targets = targets[:, 0]
    return _shard_rows(features, targets, world_size)


def batch_rng(seed: int, rank: int, outer_iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, _BATCH_STREAM, rank, outer_iteration])


def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, _INIT_STREAM])


def minibatches(rows: int, batch_size: int, rng: np.random.Generator):
    """Deterministic shuffled batch index blocks covering all rows once."""
    order = rng.permutation(rows)
    for start in range(0, rows, batch_size):
        yield order[start : start + batch_size]


def proximal_sgd(
    workload: Workload,
    shard: Shard,
    params: Params,
    z: Params,
    u: Params,
    rho1: dict[str, float],
    cfg: SolverConfig,
    rng: np.random.Generator,
) -> Params:
    """Run ``cfg.epochs`` of mini-batch SGD on the penalized local objective.

    Each step applies momentum to the combined gradient
    ``grad f + rho1 * (theta - z + u)`` so the iterates are pulled toward the
    node consensus while fitting the local shard. Inputs are not modified.
    """
    w = {name: arr.copy() for name, arr in params.items()}
    velocity = {name: np.zeros_like(arr) for name, arr in w.items()}
    batch = min(cfg.batch_size, shard.rows)
    for _ in range(cfg.epochs):
        for idx in minibatches(shard.rows, batch, rng):
            _, grads = workload.loss_and_grad(w, shard.features[idx], shard.targets[idx])
            for name in w:
                combined = grads[name] + rho1[name] * (w[name] - z[name] + u[name])
                velocity[name] = cfg.momentum * velocity[name] + combined
                w[name] -= cfg.lr * velocity[name]
    return w


def centralized_quadratic_optimum(workload: QuadraticWorkload, weight_decay: float) -> np.ndarray:
    """Normal-equations solution of the summed quadratic objective.

    Solves ``(sum_r A_r^T A_r + wd * I) x = sum_r A_r^T b_r`` over all shards,
    i.e. the stationary point the consensus fixed point must agree with.
    """
    dim = workload.layers[0].shape[1]
    gram = np.zeros((dim, dim))
    rhs = np.zeros(dim)
    for shard in workload.shards:
        gram += shard.features.T @ shard.features
        rhs += shard.features.T @ shard.targets
    gram += weight_decay * np.eye(dim)
    return np.linalg.solve(gram, rhs)[None, :]

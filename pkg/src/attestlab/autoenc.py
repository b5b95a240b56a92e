"""Denoising autoencoders trained from scratch with numpy.

Three architectures share one interface:
  M1  dense l -> 8(relu) -> dropout -> l(linear)
  M2  dense l -> 8(relu) -> 8(relu) -> dropout -> l(linear)
  M3  conv(16,w3,relu) -> pool2 -> conv(8,w3,relu) -> pool2 -> flatten
      -> dense 8(relu) -> dropout -> dense l(linear)

Training minimizes mean squared reconstruction error of clean targets from
noisy inputs with Adam. Dropout is inverted (scaled at train time) so
inference needs no rescaling. All gradients are analytic; see the tests for
the finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ARCHS = ("M1", "M2", "M3")


class TrainingDiverged(RuntimeError):
    pass


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "linear":
        return z
    raise ValueError("unknown activation: %r" % name)


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "linear":
        return np.ones_like(z)
    raise ValueError("unknown activation: %r" % name)


class DenseLayer:
    kind = "dense"

    def __init__(self, w: np.ndarray, b: np.ndarray, activation: str):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.activation = activation

    def forward(self, x):
        z = x @ self.w + self.b
        return _act(self.activation, z), (x, z)

    def backward(self, dout, cache):
        x, z = cache
        dz = dout * _act_grad(self.activation, z)
        return dz @ self.w.T, {"w": x.T @ dz, "b": dz.sum(axis=0)}

    def params(self):
        return {"w": self.w, "b": self.b}


class Conv1dLayer:
    """1-D convolution, stride 1, zero same-padding, odd filter width."""

    kind = "conv"

    def __init__(self, w: np.ndarray, b: np.ndarray, activation: str):
        self.w = np.asarray(w, dtype=np.float64)  # (k, c_in, c_out)
        self.b = np.asarray(b, dtype=np.float64)  # (c_out,)
        self.activation = activation
        if self.w.shape[0] % 2 == 0:
            raise ValueError("filter width must be odd for same padding")

    def _cols(self, x):
        k = self.w.shape[0]
        pad = (k - 1) // 2
        n, length, c_in = x.shape
        xp = np.zeros((n, length + 2 * pad, c_in), dtype=x.dtype)
        xp[:, pad:pad + length, :] = x
        cols = np.stack([xp[:, i:i + length, :] for i in range(k)], axis=2)
        return cols.reshape(n, length, k * c_in)

    def forward(self, x):
        k, c_in, c_out = self.w.shape
        cols = self._cols(x)
        z = cols @ self.w.reshape(k * c_in, c_out) + self.b
        return _act(self.activation, z), (x.shape, cols, z)

    def backward(self, dout, cache):
        x_shape, cols, z = cache
        k, c_in, c_out = self.w.shape
        n, length, _ = x_shape
        pad = (k - 1) // 2
        dz = dout * _act_grad(self.activation, z)
        flat = dz.reshape(-1, c_out)
        gw = (cols.reshape(-1, k * c_in).T @ flat).reshape(k, c_in, c_out)
        gb = flat.sum(axis=0)
        dcols = (dz @ self.w.reshape(k * c_in, c_out).T) \
            .reshape(n, length, k, c_in)
        dxp = np.zeros((n, length + 2 * pad, c_in), dtype=dz.dtype)
        for i in range(k):
            dxp[:, i:i + length, :] += dcols[:, :, i, :]
        return dxp[:, pad:pad + length, :], {"w": gw, "b": gb}

    def params(self):
        return {"w": self.w, "b": self.b}


class MaxPool1dLayer:
    kind = "pool"

    def __init__(self, width: int = 2):
        self.width = int(width)

    def forward(self, x):
        n, length, c = x.shape
        if length % self.width != 0:
            raise ValueError("pool input length %d not divisible by %d"
                             % (length, self.width))
        view = x.reshape(n, length // self.width, self.width, c)
        idx = view.argmax(axis=2)
        return view.max(axis=2), (x.shape, idx)

    def backward(self, dout, cache):
        x_shape, idx = cache
        n, length, c = x_shape
        dview = np.zeros((n, length // self.width, self.width, c),
                         dtype=dout.dtype)
        grid = np.ogrid[:n, :length // self.width, :c]
        dview[grid[0], grid[1], idx, grid[2]] = dout
        return dview.reshape(x_shape), {}

    def params(self):
        return {}


class FlattenLayer:
    kind = "flatten"

    def forward(self, x):
        n = x.shape[0]
        return x.reshape(n, -1), (x.shape,)

    def backward(self, dout, cache):
        return dout.reshape(cache[0]), {}

    def params(self):
        return {}


@dataclass
class TrainMeta:
    epochs: int
    batch_size: int
    learning_rate: float
    seed: int
    final_train_mse: float
    loss_history: list = field(default_factory=list)


@dataclass
class AutoencoderModel:
    arch: str
    input_dim: int
    layers: list
    dropout_rate: float = 0.2
    dropout_after: int = -1  # layer index; -1 disables dropout
    train_meta: TrainMeta | None = None


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-7
    seed: int = 0


def _glorot(g: np.random.Generator, shape, fan_in, fan_out) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return g.uniform(-limit, limit, size=shape)


def init_model(arch: str, input_dim: int, seed: int = 0,
               dropout_rate: float = 0.2) -> AutoencoderModel:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    if arch not in ARCHS:
        raise ValueError("arch must be one of %s" % (ARCHS,))
    if input_dim < 1:
        raise ValueError("input_dim must be positive")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError("dropout_rate must be in [0, 1)")
    g = np.random.default_rng(seed)
    l = input_dim

    def dense(n_in, n_out, act):
        return DenseLayer(_glorot(g, (n_in, n_out), n_in, n_out),
                          np.zeros(n_out), act)

    def conv(k, c_in, c_out, act):
        return Conv1dLayer(_glorot(g, (k, c_in, c_out), k * c_in, k * c_out),
                           np.zeros(c_out), act)

    if arch == "M1":
        layers = [dense(l, 8, "relu"), dense(8, l, "linear")]
        drop_after = 0
    elif arch == "M2":
        layers = [dense(l, 8, "relu"), dense(8, 8, "relu"),
                  dense(8, l, "linear")]
        drop_after = 1
    else:
        if l % 4 != 0:
            raise ValueError("M3 needs input_dim divisible by 4")
        layers = [conv(3, 1, 16, "relu"), MaxPool1dLayer(2),
                  conv(3, 16, 8, "relu"), MaxPool1dLayer(2), FlattenLayer(),
                  dense(8 * (l // 4), 8, "relu"), dense(8, l, "linear")]
        drop_after = 5
    return AutoencoderModel(arch=arch, input_dim=l, layers=layers,
                            dropout_rate=dropout_rate,
                            dropout_after=drop_after)


def _forward(model: AutoencoderModel, x: np.ndarray, train_mode: bool,
             dropout_rng: np.random.Generator | None):
    """Returns (output, caches, dropout_mask)."""
    h = x
    if model.layers and model.layers[0].kind == "conv":
        h = h[:, :, None]
    caches = []
    mask = None
    for i, layer in enumerate(model.layers):
        h, cache = layer.forward(h)
        caches.append(cache)
        if train_mode and i == model.dropout_after and model.dropout_rate > 0:
            keep = 1.0 - model.dropout_rate
            mask = (dropout_rng.random(h.shape) < keep) / keep
            h = h * mask
    return h, caches, mask


def _backward(model: AutoencoderModel, caches, dout, mask):
    grads = [None] * len(model.layers)
    g = dout
    for i in range(len(model.layers) - 1, -1, -1):
        if mask is not None and i == model.dropout_after:
            g = g * mask
        g, layer_grads = model.layers[i].backward(g, caches[i])
        grads[i] = layer_grads
    return grads


def reconstruct(model: AutoencoderModel, x) -> np.ndarray:
    """Inference pass (no dropout). Accepts (l,) or (n, l)."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.shape[1] != model.input_dim:
        raise ValueError("expected %d features, got %d"
                         % (model.input_dim, arr.shape[1]))
    out, _, _ = _forward(model, arr, train_mode=False, dropout_rng=None)
    return out[0] if single else out


def reconstruction_error(x, x_hat):
    """Mean squared error; per-sample vector for 2-D inputs."""
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(x_hat, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch: %s vs %s" % (a.shape, b.shape))
    se = (a - b) ** 2
    return se.mean(axis=-1) if a.ndim == 2 else float(se.mean())


def loss_and_grads(model: AutoencoderModel, x: np.ndarray, y: np.ndarray,
                   train_mode: bool = False,
                   dropout_rng: np.random.Generator | None = None):
    """MSE loss over the batch plus analytic per-layer parameter gradients."""
    out, caches, mask = _forward(model, x, train_mode, dropout_rng)
    diff = out - y
    loss = float((diff ** 2).mean())
    dout = 2.0 * diff / diff.size
    grads = _backward(model, caches, dout, mask)
    return loss, grads


def train(model: AutoencoderModel, x_noisy: np.ndarray, x_clean: np.ndarray,
          cfg: TrainConfig = TrainConfig()) -> AutoencoderModel:
    """Adam training with seeded epoch shuffles; mutates model in place."""
    x_noisy = np.asarray(x_noisy, dtype=np.float64)
    x_clean = np.asarray(x_clean, dtype=np.float64)
    if x_noisy.shape != x_clean.shape or x_noisy.ndim != 2:
        raise ValueError("training inputs must be matching (n, l) matrices")
    if x_noisy.shape[1] != model.input_dim:
        raise ValueError("feature width does not match model input_dim")
    if cfg.epochs < 1 or cfg.batch_size < 1 or cfg.learning_rate <= 0:
        raise ValueError("bad training configuration")

    shuffle_rng = np.random.default_rng(cfg.seed)
    dropout_rng = np.random.default_rng((cfg.seed, 0x5eed))
    n = len(x_noisy)

    m_state, v_state = {}, {}
    for i, layer in enumerate(model.layers):
        for name, p in layer.params().items():
            m_state[(i, name)] = np.zeros_like(p)
            v_state[(i, name)] = np.zeros_like(p)

    step = 0
    history = []
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(model, x_noisy[idx], x_clean[idx],
                                         train_mode=True,
                                         dropout_rng=dropout_rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    "loss became non-finite at epoch %d; lower the learning "
                    "rate (current %g) or reduce the noise factor"
                    % (epoch + 1, cfg.learning_rate))
            epoch_loss += loss
            batches += 1
            step += 1
            for i, layer in enumerate(model.layers):
                params = layer.params()
                for name, g in grads[i].items():
                    key = (i, name)
                    m_state[key] = cfg.beta1 * m_state[key] + (1 - cfg.beta1) * g
                    v_state[key] = cfg.beta2 * v_state[key] \
                        + (1 - cfg.beta2) * g * g
                    m_hat = m_state[key] / (1 - cfg.beta1 ** step)
                    v_hat = v_state[key] / (1 - cfg.beta2 ** step)
                    params[name] -= cfg.learning_rate * m_hat \
                        / (np.sqrt(v_hat) + cfg.adam_eps)
        history.append(epoch_loss / max(batches, 1))

    final = float(np.mean(reconstruction_error(
        x_clean, reconstruct(model, x_noisy))))
    model.train_meta = TrainMeta(epochs=cfg.epochs, batch_size=cfg.batch_size,
                                 learning_rate=cfg.learning_rate,
                                 seed=cfg.seed, final_train_mse=final,
                                 loss_history=history)
    return model

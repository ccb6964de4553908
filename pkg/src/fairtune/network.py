"""Minimal feed-forward network engine with manual backpropagation.

Architecture: a stack of hidden blocks (dense -> batch norm -> ReLU ->
dropout) followed by a single-unit dense layer with logistic squashing.
Everything the debiasing algorithms need is exposed: per-layer flat weight
views, the penultimate representation, and gradients with respect to both
parameters and intermediate inputs so a critic can be chained through the
representation.

All randomness flows through explicitly passed numpy Generators, so every
operation is reproducible bit for bit.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, NumericError, ShapeError, TrainingError

CHECKPOINT_VERSION = 1


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_from_logits(logits: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy, computed stably from logits."""
    z = np.asarray(logits, dtype=np.float64)
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(np.mean(losses))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class FlatWeights:
    """All trainable parameters as one vector plus the layout to rebuild them.

    Layout entries are (layer index, parameter kind, shape); each dense
    layer's entries (weight, bias, and its batch-norm scale/shift when
    present) are contiguous in the vector.
    """

    values: np.ndarray
    layout: tuple[tuple[int, str, tuple[int, ...]], ...]

    def layer_slice(self, layer: int) -> slice:
        start = None
        stop = 0
        offset = 0
        for (idx, _, shape) in self.layout:
            size = int(np.prod(shape))
            if idx == layer and start is None:
                start = offset
            if idx == layer:
                stop = offset + size
            offset += size
        if start is None:
            raise ShapeError(f"no layer {layer} in layout")
        return slice(start, stop)


class Network:
    """Feed-forward binary classifier with per-layer weight access.

    ``hidden`` lists the widths of the hidden blocks; the output layer is a
    single logistic unit.  ``n_layers`` counts dense layers including the
    output, indexed 0..n_layers-1.
    """

    def __init__(self, input_dim: int, hidden: tuple[int, ...] = (),
                 dropout_rate: float = 0.2, seed: int = 0,
                 bn_momentum: float = 0.9, bn_eps: float = 1e-5):
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        self.input_dim = int(input_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.dropout_rate = float(dropout_rate)
        self.bn_momentum = float(bn_momentum)
        self.bn_eps = float(bn_eps)

        rng = np.random.default_rng(seed)
        dims = [self.input_dim, *self.hidden, 1]
        self.weights: list[dict[str, np.ndarray]] = []
        self.bn: list[dict[str, np.ndarray]] = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.weights.append({"W": w, "b": np.zeros(fan_out)})
            if i < len(self.hidden):
                self.bn.append({
                    "gamma": np.ones(fan_out),
                    "beta": np.zeros(fan_out),
                    "mean": np.zeros(fan_out),
                    "var": np.ones(fan_out),
                })

    # -- basic structure ----------------------------------------------------

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def penultimate_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    def copy(self) -> "Network":
        dup = Network.__new__(Network)
        dup.input_dim = self.input_dim
        dup.hidden = self.hidden
        dup.dropout_rate = self.dropout_rate
        dup.bn_momentum = self.bn_momentum
        dup.bn_eps = self.bn_eps
        dup.weights = [{k: v.copy() for k, v in layer.items()} for layer in self.weights]
        dup.bn = [{k: v.copy() for k, v in layer.items()} for layer in self.bn]
        return dup

    def _check_input(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ShapeError(
                f"expected input of shape (n, {self.input_dim}), got {X.shape}"
            )
        return X

    # -- forward ------------------------------------------------------------

    def _hidden_forward(self, X, mode="eval", rng=None, update_stats=False):
        """Run the hidden blocks; returns (representation, caches)."""
        h = X
        caches = []
        train = mode == "train"
        if train and self.dropout_rate > 0.0 and rng is None:
            raise ValueError("training-mode forward with dropout requires an rng")
        for dense, bn in zip(self.weights, self.bn):
            z = h @ dense["W"] + dense["b"]
            if train:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                inv_std = 1.0 / np.sqrt(var + self.bn_eps)
                xc = z - mu
                xhat = xc * inv_std
                if update_stats:
                    m = self.bn_momentum
                    bn["mean"][:] = m * bn["mean"] + (1.0 - m) * mu
                    bn["var"][:] = m * bn["var"] + (1.0 - m) * var
            else:
                inv_std = 1.0 / np.sqrt(bn["var"] + self.bn_eps)
                xc = z - bn["mean"]
                xhat = xc * inv_std
            out = bn["gamma"] * xhat + bn["beta"]
            relu_mask = out > 0
            act = out * relu_mask
            drop_mask = None
            if train and self.dropout_rate > 0.0:
                drop_mask = rng.random(act.shape) >= self.dropout_rate
                act = act * drop_mask / (1.0 - self.dropout_rate)
            caches.append({
                "x_in": h, "xhat": xhat, "xc": xc, "inv_std": inv_std,
                "relu_mask": relu_mask, "drop_mask": drop_mask, "train_bn": train,
            })
            h = act
        return h, caches

    def logits(self, X, mode="eval", rng=None, update_stats=False):
        X = self._check_input(X)
        rep, _ = self._hidden_forward(X, mode, rng, update_stats)
        out = self.weights[-1]
        return (rep @ out["W"] + out["b"]).reshape(-1)

    def forward(self, X, mode: str = "eval", rng=None) -> np.ndarray:
        """Predicted probabilities in (0, 1).

        Evaluation mode is deterministic (dropout off, running batch-norm
        statistics) and has no side effects.  Training mode uses batch
        statistics and updates the running statistics.
        """
        X = self._check_input(X)
        rep, _ = self._hidden_forward(X, mode, rng, update_stats=(mode == "train"))
        out = self.weights[-1]
        return sigmoid((rep @ out["W"] + out["b"]).reshape(-1))

    def penultimate(self, X) -> np.ndarray:
        """Output of everything but the final dense layer (evaluation mode)."""
        X = self._check_input(X)
        rep, _ = self._hidden_forward(X, "eval")
        return rep

    def forward_from_penultimate(self, rep: np.ndarray) -> np.ndarray:
        out = self.weights[-1]
        return sigmoid((np.asarray(rep) @ out["W"] + out["b"]).reshape(-1))

    # -- backward -----------------------------------------------------------

    def _hidden_backward(self, drep, caches):
        """Backprop a gradient on the representation through the hidden blocks.

        Returns (grads, dX) where grads matches :meth:`zero_grads` layout.
        """
        grads = self.zero_grads()
        d = drep
        for i in reversed(range(len(self.bn))):
            c = caches[i]
            if c["drop_mask"] is not None:
                d = d * c["drop_mask"] / (1.0 - self.dropout_rate)
            d = d * c["relu_mask"]
            grads["gamma"][i] += (d * c["xhat"]).sum(axis=0)
            grads["beta"][i] += d.sum(axis=0)
            dxhat = d * self.bn[i]["gamma"]
            if c["train_bn"]:
                n = dxhat.shape[0]
                inv = c["inv_std"]
                dvar = np.sum(dxhat * c["xc"] * -0.5 * inv ** 3, axis=0)
                dmu = np.sum(-dxhat * inv, axis=0) + dvar * np.mean(-2.0 * c["xc"], axis=0)
                dz = dxhat * inv + dvar * 2.0 * c["xc"] / n + dmu / n
            else:
                dz = dxhat * c["inv_std"]
            grads["W"][i] += c["x_in"].T @ dz
            grads["b"][i] += dz.sum(axis=0)
            d = dz @ self.weights[i]["W"].T
        return grads, d

    def zero_grads(self) -> dict[str, list[np.ndarray]]:
        return {
            "W": [np.zeros_like(l["W"]) for l in self.weights],
            "b": [np.zeros_like(l["b"]) for l in self.weights],
            "gamma": [np.zeros_like(l["gamma"]) for l in self.bn],
            "beta": [np.zeros_like(l["beta"]) for l in self.bn],
        }

    def bce_gradients(self, X, y, loss_weight: float = 1.0, mode: str = "eval",
                      rng=None, update_stats: bool = False):
        """Analytic gradients of ``loss_weight *`` mean BCE w.r.t. every parameter.

        Returns ``(loss, grads, dX)``.  ``mode="train"`` differentiates
        through batch statistics (running statistics are only written when
        ``update_stats`` is set); evaluation mode treats batch norm as a
        fixed affine map.
        """
        X = self._check_input(X)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if len(y) == 0:
            raise ValueError("batch is empty")
        rep, caches = self._hidden_forward(X, mode, rng, update_stats)
        out = self.weights[-1]
        z = (rep @ out["W"] + out["b"]).reshape(-1)
        loss = loss_weight * bce_from_logits(z, y)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss on batch of size {len(y)}")
        dz = (loss_weight * (sigmoid(z) - y) / len(y)).reshape(-1, 1)
        grads, drep = self._final_backward(dz, rep)
        hidden_grads, dX = self._hidden_backward(drep, caches)
        for key in ("W", "b", "gamma", "beta"):
            for i, g in enumerate(hidden_grads[key]):
                if key in ("W", "b") and i == self.n_layers - 1:
                    continue
                grads[key][i] += g
        return loss, grads, dX

    def _final_backward(self, dz, rep):
        grads = self.zero_grads()
        out = self.weights[-1]
        grads["W"][-1] += rep.T @ dz
        grads["b"][-1] += dz.sum(axis=0)
        drep = dz @ out["W"].T
        return grads, drep

    # -- flat views ----------------------------------------------------------

    def _layout(self):
        entries = []
        for i, layer in enumerate(self.weights):
            entries.append((i, "W", layer["W"].shape))
            entries.append((i, "b", layer["b"].shape))
            if i < len(self.bn):
                entries.append((i, "gamma", self.bn[i]["gamma"].shape))
                entries.append((i, "beta", self.bn[i]["beta"].shape))
        return tuple(entries)

    def parameter_arrays(self) -> list[np.ndarray]:
        arrays = []
        for (i, kind, _) in self._layout():
            src = self.weights[i] if kind in ("W", "b") else self.bn[i]
            arrays.append(src[kind])
        return arrays

    def grad_arrays(self, grads) -> list[np.ndarray]:
        arrays = []
        for (i, kind, _) in self._layout():
            arrays.append(grads[kind][i])
        return arrays


def get_flat(net: Network) -> FlatWeights:
    layout = net._layout()
    values = np.concatenate([a.ravel() for a in net.parameter_arrays()])
    return FlatWeights(values=values, layout=layout)


def set_flat(net: Network, values: np.ndarray) -> Network:
    """Network with all trainable parameters replaced; buffers untouched."""
    values = np.asarray(values, dtype=np.float64).ravel()
    layout = net._layout()
    total = sum(int(np.prod(s)) for (_, _, s) in layout)
    if values.size != total:
        raise ShapeError(f"expected {total} values, got {values.size}")
    dup = net.copy()
    offset = 0
    for (i, kind, shape) in layout:
        size = int(np.prod(shape))
        chunk = values[offset:offset + size].reshape(shape)
        target = dup.weights[i] if kind in ("W", "b") else dup.bn[i]
        target[kind] = chunk.copy()
        offset += size
    return dup


def get_layer_flat(net: Network, layer: int) -> np.ndarray:
    """Flat view of one dense layer's parameters (weight, bias, and its
    batch-norm scale/shift when present)."""
    if not 0 <= layer < net.n_layers:
        raise ShapeError(f"layer index {layer} out of range [0, {net.n_layers})")
    flat = get_flat(net)
    return flat.values[flat.layer_slice(layer)].copy()


def set_layer_flat(net: Network, layer: int, values: np.ndarray) -> Network:
    """Network with one layer's parameters replaced; other layers untouched."""
    if not 0 <= layer < net.n_layers:
        raise ShapeError(f"layer index {layer} out of range [0, {net.n_layers})")
    flat = get_flat(net)
    sl = flat.layer_slice(layer)
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size != sl.stop - sl.start:
        raise ShapeError(f"layer {layer} expects {sl.stop - sl.start} values, got {values.size}")
    merged = flat.values.copy()
    merged[sl] = values
    return set_flat(net, merged)


# ---------------------------------------------------------------------------
# Optimizer and training loop
# ---------------------------------------------------------------------------

class Adam:
    """Standard Adam with bias correction; state per parameter array."""

    def __init__(self, params: list[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(train_ds, valid_ds, hidden: tuple[int, ...], cfg: TrainConfig,
          dropout_rate: float = 0.2) -> Network:
    """Train with Adam and early stopping on validation cross-entropy.

    Returns the parameters from the epoch with the best validation loss.
    Deterministic given the seed: initialization, batch order, and dropout
    masks all come from one seeded generator.
    """
    if train_ds.d != valid_ds.d:
        raise ShapeError("train and valid feature dimensions differ")
    net = Network(train_ds.d, hidden, dropout_rate=dropout_rate, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    params = net.parameter_arrays()
    opt = Adam(params, lr=cfg.learning_rate)

    X, y = train_ds.features, train_ds.labels.astype(np.float64)
    Xv, yv = valid_ds.features, valid_ds.labels.astype(np.float64)

    best_loss = np.inf
    best_state = _snapshot(net)
    bad_epochs = 0
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(train_ds.n)
        for start in range(0, train_ds.n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue  # batch statistics are undefined on singletons
            try:
                _, grads, _ = net.bce_gradients(
                    X[idx], y[idx], mode="train", rng=rng, update_stats=True
                )
            except NumericError as exc:
                raise TrainingError(f"diverged at epoch {epoch}: {exc}") from exc
            opt.step(params, net.grad_arrays(grads))
        val_loss = bce_from_logits(net.logits(Xv), yv)
        if not np.isfinite(val_loss):
            raise TrainingError(f"diverged at epoch {epoch}: non-finite validation loss")
        history.append(val_loss)
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = _snapshot(net)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > cfg.patience:
                break
    _restore(net, best_state)
    net.val_history = history
    if not all(np.all(np.isfinite(p)) for p in net.parameter_arrays()):
        raise TrainingError("non-finite parameters after training")
    return net


def _snapshot(net: Network):
    return (
        [{k: v.copy() for k, v in l.items()} for l in net.weights],
        [{k: v.copy() for k, v in l.items()} for l in net.bn],
    )


def _restore(net: Network, state) -> None:
    weights, bn = state
    net.weights = [{k: v.copy() for k, v in l.items()} for l in weights]
    net.bn = [{k: v.copy() for k, v in l.items()} for l in bn]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: Network, path) -> None:
    """Self-describing binary dump; round-trips bit-exactly."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "input_dim": net.input_dim,
        "hidden": list(net.hidden),
        "dropout_rate": net.dropout_rate,
        "bn_momentum": net.bn_momentum,
        "bn_eps": net.bn_eps,
    }
    arrays = {}
    for i, layer in enumerate(net.weights):
        arrays[f"W{i}"] = layer["W"]
        arrays[f"b{i}"] = layer["b"]
    for i, layer in enumerate(net.bn):
        arrays[f"gamma{i}"] = layer["gamma"]
        arrays[f"beta{i}"] = layer["beta"]
        arrays[f"mean{i}"] = layer["mean"]
        arrays[f"var{i}"] = layer["var"]
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> Network:
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise CheckpointError(
                    f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}"
                )
            net = Network(
                meta["input_dim"], tuple(meta["hidden"]),
                dropout_rate=meta["dropout_rate"], bn_momentum=meta["bn_momentum"],
                bn_eps=meta["bn_eps"],
            )
            for i in range(net.n_layers):
                net.weights[i]["W"] = data[f"W{i}"].copy()
                net.weights[i]["b"] = data[f"b{i}"].copy()
            for i in range(len(net.bn)):
                net.bn[i]["gamma"] = data[f"gamma{i}"].copy()
                net.bn[i]["beta"] = data[f"beta{i}"].copy()
                net.bn[i]["mean"] = data[f"mean{i}"].copy()
                net.bn[i]["var"] = data[f"var{i}"].copy()
            return net
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Plain dense stack (used by the adversarial critics)
# ---------------------------------------------------------------------------

class DenseStack:
    """Small plain MLP: dense layers with ReLU between, linear output."""

    def __init__(self, input_dim: int, hidden: tuple[int, ...], output_dim: int = 1,
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        dims = [int(input_dim), *[int(h) for h in hidden], int(output_dim)]
        self.layers = [
            {
                "W": rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)),
                "b": np.zeros(fan_out),
            }
            for fan_in, fan_out in zip(dims[:-1], dims[1:])
        ]
        self.input_dim = dims[0]

    def parameter_arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer["W"], layer["b"]))
        return out

    def forward(self, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ShapeError(f"expected (n, {self.input_dim}), got {X.shape}")
        caches = []
        h = X
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            z = h @ layer["W"] + layer["b"]
            mask = None
            if i < last:
                mask = z > 0
                z = z * mask
            caches.append({"x_in": h, "mask": mask})
            h = z
        return h, caches

    def backward(self, dout: np.ndarray, caches):
        """Returns (grads aligned with parameter_arrays(), dX)."""
        grads = []
        d = np.asarray(dout, dtype=np.float64)
        for i in reversed(range(len(self.layers))):
            c = caches[i]
            if c["mask"] is not None:
                d = d * c["mask"]
            grads.append(d.sum(axis=0))          # db
            grads.append(c["x_in"].T @ d)        # dW
            d = d @ self.layers[i]["W"].T
        grads.reverse()
        return grads, d

"""From-scratch feedforward network with batch norm, skips, and AdamW.

Architecture: an input layer, depth-1 residual hidden layers and a linear
head,

    f_1(x) = act(BN_1(W_1 x))
    f_i(x) = act(BN_i(W_i x)) + x      (square hidden layers)
    f_L(x) = W_L x                     (no normalization, no activation)

Linear layers carry no bias; the batch-norm shift beta plays that role, which
is what makes the trainable-parameter count

    n_in*n_h + (depth-1)*n_h^2 + n_h*n_out + 2*depth*n_h.

Everything is float64 numpy; gradients are exact reverse-mode derivatives of
the mean squared l2 loss over the batch, including the batch-statistic terms
of train-mode batch norm.  The l2 (Tikhonov) penalty on the weights is
realized as AdamW's decoupled weight decay and never enters the loss
gradient.
"""

import struct
import numpy as np
from dataclasses import dataclass, field


@dataclass(frozen=True)
class Architecture:
    n_in: int
    n_hidden: int
    depth: int
    n_out: int


def param_count(arch):
    """Closed-form trainable parameter count (weights + batch-norm affine)."""
    a = arch
    return (a.n_in * a.n_hidden + (a.depth - 1) * a.n_hidden ** 2
            + a.n_hidden * a.n_out + 2 * a.depth * a.n_hidden)


def _relu(z):
    return np.maximum(z, 0.0)


def _drelu(z):
    return (z > 0.0).astype(float)


ACTIVATIONS = {"relu": (_relu, _drelu),
               "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2)}


class MlpModel:
    """Weights, batch-norm state and input normalization of one network."""

    def __init__(self, arch, activation="relu", seed=0, bn_eps=1e-5, bn_momentum=0.1):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{activation}'")
        self.arch = arch
        self.activation = activation
        self.bn_eps = bn_eps
        self.bn_momentum = bn_momentum
        self.mode = "train"
        rng = np.random.default_rng(seed)
        dims = [arch.n_in] + [arch.n_hidden] * arch.depth
        self.W = []
        for i in range(arch.depth):
            lim = np.sqrt(6.0 / dims[i])
            self.W.append(rng.uniform(-lim, lim, size=(dims[i], dims[i + 1])))
        self.W.append(rng.uniform(-0.01, 0.01, size=(arch.n_hidden, arch.n_out))
                      / np.sqrt(arch.n_hidden))
        self.gamma = [np.ones(arch.n_hidden) for _ in range(arch.depth)]
        self.beta = [np.zeros(arch.n_hidden) for _ in range(arch.depth)]
        self.running_mean = [np.zeros(arch.n_hidden) for _ in range(arch.depth)]
        self.running_var = [np.ones(arch.n_hidden) for _ in range(arch.depth)]
        self.input_mean = np.zeros(arch.n_in)
        self.input_std = np.ones(arch.n_in)

    # -- bookkeeping -------------------------------------------------------------

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def set_input_norm(self, mean, std):
        mean = np.asarray(mean, dtype=float).copy()
        std = np.asarray(std, dtype=float).copy()
        # effectively constant features are left unscaled
        floor = 1e-8 * np.maximum(1.0, np.abs(mean))
        std[std < floor] = 1.0
        self.input_mean = mean
        self.input_std = std

    def parameters(self):
        """(name, index, array) triples of all trainable tensors."""
        for i, W in enumerate(self.W):
            yield ("W", i, W)
        for i in range(self.arch.depth):
            yield ("gamma", i, self.gamma[i])
            yield ("beta", i, self.beta[i])

    def copy(self):
        import copy
        return copy.deepcopy(self)

    def n_parameters(self):
        return param_count(self.arch)


def zero_weights(model):
    """Zero all weight matrices (the zero-correction reference model)."""
    for W in model.W:
        W[:] = 0.0
    return model


# -- forward / backward -----------------------------------------------------------

def _forward(model, X, train, cache=None):
    arch = model.arch
    if X.ndim != 2 or X.shape[1] != arch.n_in:
        raise ValueError(f"batch width {X.shape} does not match n_in={arch.n_in}")
    if train and X.shape[0] < 2:
        raise ValueError("train-mode forward needs at least 2 rows")
    act, _ = ACTIVATIONS[model.activation]
    h = (X - model.input_mean) / model.input_std
    if cache is not None:
        cache["x0"] = h
    for i in range(arch.depth):
        z = h @ model.W[i]
        if train:
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            B = z.shape[0]
            model.running_mean[i] = ((1 - model.bn_momentum) * model.running_mean[i]
                                     + model.bn_momentum * mu)
            model.running_var[i] = ((1 - model.bn_momentum) * model.running_var[i]
                                    + model.bn_momentum * var * B / max(B - 1, 1))
        else:
            mu = model.running_mean[i]
            var = model.running_var[i]
        invstd = 1.0 / np.sqrt(var + model.bn_eps)
        zhat = (z - mu) * invstd
        pre = zhat * model.gamma[i] + model.beta[i]
        a = act(pre)
        out = a + h if i >= 1 else a
        if cache is not None:
            cache.setdefault("layers", []).append(
                {"h_in": h, "zhat": zhat, "invstd": invstd, "pre": pre})
        h = out
    y = h @ model.W[-1]
    if cache is not None:
        cache["h_last"] = h
    return y


def forward(model, X):
    """Network output for a batch; train mode updates the running statistics."""
    return _forward(model, np.asarray(X, dtype=float), model.mode == "train")


def loss_mse(Y, T):
    """Mean over rows of the squared l2 distance."""
    d = Y - T
    return float(np.sum(d * d) / Y.shape[0])


def backward(model, X, T):
    """Gradients of the mean squared l2 loss over the batch.

    Returns (grads, loss) with grads = {"W": [...], "gamma": [...],
    "beta": [...]}.  Weight decay is not part of the gradient (decoupled).
    """
    X = np.asarray(X, dtype=float)
    T = np.asarray(T, dtype=float)
    train = model.mode == "train"
    cache = {}
    Y = _forward(model, X, train, cache)
    B = X.shape[0]
    _, dact = ACTIVATIONS[model.activation]
    dW = [None] * len(model.W)
    dgamma = [None] * model.arch.depth
    dbeta = [None] * model.arch.depth
    dY = 2.0 * (Y - T) / B
    dW[-1] = cache["h_last"].T @ dY
    dh = dY @ model.W[-1].T
    for i in reversed(range(model.arch.depth)):
        lay = cache["layers"][i]
        dpre = dh * dact(lay["pre"])
        dgamma[i] = np.sum(dpre * lay["zhat"], axis=0)
        dbeta[i] = np.sum(dpre, axis=0)
        dzhat = dpre * model.gamma[i]
        if train:
            zhat = lay["zhat"]
            dz = (lay["invstd"] / B) * (B * dzhat - dzhat.sum(axis=0)
                                        - zhat * np.sum(dzhat * zhat, axis=0))
        else:
            dz = dzhat * lay["invstd"]
        dW[i] = lay["h_in"].T @ dz
        dh_new = dz @ model.W[i].T
        if i >= 1:
            dh_new = dh_new + dh      # skip connection
        dh = dh_new
    return {"W": dW, "gamma": dgamma, "beta": dbeta}, loss_mse(Y, T)


# -- AdamW --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-5      # Tikhonov factor, applied decoupled
    batch_size: int = 1024
    max_epochs: int = 1000
    seed: int = 0
    patience: int = 0               # 0 = run all epochs


class AdamW:
    """Decoupled-weight-decay Adam; decay touches weight matrices only."""

    def __init__(self, model, cfg=None):
        self.cfg = cfg or TrainConfig()
        self.t = 0
        self.m = {"W": [np.zeros_like(W) for W in model.W],
                  "gamma": [np.zeros_like(g) for g in model.gamma],
                  "beta": [np.zeros_like(b) for b in model.beta]}
        self.v = {k: [np.zeros_like(a) for a in lst] for k, lst in self.m.items()}

    def step(self, model, grads):
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.betas
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        params = {"W": model.W, "gamma": model.gamma, "beta": model.beta}
        for key in ("W", "gamma", "beta"):
            for i, (p, g) in enumerate(zip(params[key], grads[key])):
                m = self.m[key][i]
                v = self.v[key][i]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
                if key == "W" and cfg.weight_decay:
                    p *= 1.0 - cfg.lr * cfg.weight_decay
        return model


def adamw_step(model, grads, t, cfg):
    """Single functional AdamW step at step index t (fresh moments if t==1).

    Thin wrapper used by tests; training keeps an AdamW instance instead.
    """
    opt = getattr(model, "_opt", None)
    if opt is None or t == 1:
        opt = AdamW(model, cfg)
        model._opt = opt
    opt.t = t - 1
    return opt.step(model, grads)


# -- training loop --------------------------------------------------------------------

def train(model, train_set, val_set, cfg=None, log_every=0):
    """Fit on (X, T) pairs and return (best_model, history).

    Minibatches are reshuffled each epoch from a seeded generator; the model
    with the lowest validation loss (eval-mode forward) is returned.  history
    holds per-epoch train/validation losses.
    """
    cfg = cfg or TrainConfig()
    Xtr, Ttr = [np.asarray(a, dtype=float) for a in train_set]
    Xva, Tva = [np.asarray(a, dtype=float) for a in val_set]
    if Xtr.shape[0] == 0 or Xva.shape[0] == 0:
        raise ValueError("empty dataset")
    if Xtr.shape[1] != model.arch.n_in:
        raise ValueError(f"dataset width {Xtr.shape[1]} does not match "
                         f"model n_in={model.arch.n_in}")
    if np.all(model.input_mean == 0.0) and np.all(model.input_std == 1.0):
        model.set_input_norm(Xtr.mean(axis=0), Xtr.std(axis=0))
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model, cfg)
    history = {"train": [], "val": []}
    best = (np.inf, None, -1)
    n = Xtr.shape[0]
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        model.train()
        tot, cnt = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if idx.size < 2:
                continue
            grads, loss = backward(model, Xtr[idx], Ttr[idx])
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, batch {s // cfg.batch_size} "
                    f"(lr={cfg.lr}, batch_size={cfg.batch_size})")
            opt.step(model, grads)
            tot += loss * idx.size
            cnt += idx.size
        model.eval()
        vl = evaluate(model, Xva, Tva)
        history["train"].append(tot / max(cnt, 1))
        history["val"].append(vl)
        if vl < best[0]:
            best = (vl, model.copy(), epoch)
        if log_every and (epoch + 1) % log_every == 0:
            print(f"epoch {epoch + 1:4d}  train {history['train'][-1]:.6e}  "
                  f"val {vl:.6e}")
        if cfg.patience and epoch - best[2] >= cfg.patience:
            break
    out = best[1] if best[1] is not None else model
    out.eval()
    return out, history


def evaluate(model, X, T, batch_size=8192):
    """Eval-mode mean squared l2 loss over a dataset."""
    tot = 0.0
    for s in range(0, X.shape[0], batch_size):
        Y = _forward(model, X[s:s + batch_size], False)
        d = Y - T[s:s + batch_size]
        tot += float(np.sum(d * d))
    return tot / X.shape[0]


# -- model file ("DNMG") ----------------------------------------------------------------

_MAGIC = b"DNMG"
_VERSION = 1


def save_model(model, path):
    """Versioned little-endian binary model file."""
    a = model.arch
    tag = model.activation.encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IIIIII", _VERSION, a.n_in, a.n_hidden, a.depth,
                            a.n_out, len(tag)))
        f.write(tag)
        f.write(struct.pack("<dd", model.bn_eps, model.bn_momentum))
        def tensor(x):
            f.write(np.ascontiguousarray(x, dtype="<f8").tobytes())
        tensor(model.input_mean)
        tensor(model.input_std)
        for W in model.W:
            tensor(W)
        for i in range(a.depth):
            tensor(model.gamma[i])
            tensor(model.beta[i])
            tensor(model.running_mean[i])
            tensor(model.running_var[i])


def load_model(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a model file: bad magic {magic!r}")
        version, n_in, n_h, depth, n_out, taglen = struct.unpack("<IIIIII", f.read(24))
        if version != _VERSION:
            raise ValueError(f"unsupported model file version {version}")
        tag = f.read(taglen).decode()
        bn_eps, bn_mom = struct.unpack("<dd", f.read(16))
        arch = Architecture(n_in, n_h, depth, n_out)
        model = MlpModel(arch, activation=tag, bn_eps=bn_eps, bn_momentum=bn_mom)
        def tensor(shape):
            n = int(np.prod(shape))
            return np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape).copy()
        model.input_mean = tensor((n_in,))
        model.input_std = tensor((n_in,))
        dims = [n_in] + [n_h] * depth
        model.W = [tensor((dims[i], dims[i + 1])) for i in range(depth)]
        model.W.append(tensor((n_h, n_out)))
        for i in range(depth):
            model.gamma[i] = tensor((n_h,))
            model.beta[i] = tensor((n_h,))
            model.running_mean[i] = tensor((n_h,))
            model.running_var[i] = tensor((n_h,))
    model.eval()
    return model

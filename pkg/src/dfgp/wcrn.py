"""Wide contextual residual network on pixel-centred patches.

Layout (valid convolutions inside the patch, channel-last)::

    patch P x P x C
      -> [3x3 conv || 1x1 conv, centre-cropped]  concat, F = 2 * width channels
      -> BN -> ReLU = a1                         (P-2) x (P-2)
      -> 3x3 conv -> BN -> ReLU -> 3x3 conv = r  (P-6) x (P-6)
      -> centre-crop(a1) + r
      -> centre pixel = deep feature (F)
      -> sigmoid(w_fc . feature + b)

The default 7 x 7 patch leaves exactly one output pixel. Gradients are
written out by hand; the loss is the batch-summed absolute error.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BatchTooSmall, NumericalDivergence, ShapeError, StateError
from .numeric import Adam, Schedule, make_rng, minibatches
from .serialize import load_model, save_model

PARAM_ORDER = ("w3", "w1", "bn1_gamma", "bn1_beta", "wa", "bn2_gamma", "bn2_beta", "wb", "fc_w", "fc_b")
BUFFER_ORDER = ("bn1_mean", "bn1_var", "bn2_mean", "bn2_var")


def default_cnn_schedule() -> Schedule:
    return Schedule([(100, 0.01), (50, 0.001)])


@dataclass
class WcrnConfig:
    in_channels: int
    patch_size: int = 7
    width: int = 64
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    batch_size: int = 32
    dtype: str = "float32"

    def __post_init__(self):
        if self.patch_size < 7 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd and at least 7 (three valid 3x3 stages)")
        if self.width < 1 or self.in_channels < 1:
            raise ValueError("width and in_channels must be positive")

    @property
    def feature_dim(self) -> int:
        return 2 * self.width

    def to_dict(self) -> dict:
        return asdict(self)


class WcrnModel:
    def __init__(self, config: WcrnConfig, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffers = buffers

    @classmethod
    def init(cls, config: WcrnConfig, seed: int) -> "WcrnModel":
        """He-uniform convolutions, uniform FC weights, zero FC bias."""
        rng = make_rng(seed)
        c, w, f = config.in_channels, config.width, config.feature_dim
        dt = np.dtype(config.dtype)

        def he(fan_in, shape):
            bound = np.sqrt(6.0 / fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(dt)

        params = {
            "w3": he(9 * c, (9 * c, w)),
            "w1": he(c, (c, w)),
            "bn1_gamma": np.ones(f, dt),
            "bn1_beta": np.zeros(f, dt),
            "wa": he(9 * f, (9 * f, f)),
            "bn2_gamma": np.ones(f, dt),
            "bn2_beta": np.zeros(f, dt),
            "wb": he(9 * f, (9 * f, f)),
            "fc_w": rng.uniform(-1.0, 1.0, size=f).astype(dt) / np.sqrt(f).astype(dt),
            "fc_b": np.zeros(1, dt),
        }
        buffers = {"bn1_mean": np.zeros(f, dt), "bn1_var": np.ones(f, dt),
                   "bn2_mean": np.zeros(f, dt), "bn2_var": np.ones(f, dt)}
        return cls(config, params, buffers)

    def copy(self) -> "WcrnModel":
        return WcrnModel(WcrnConfig(**self.config.to_dict()),
                         {k: v.copy() for k, v in self.params.items()},
                         {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype: str) -> "WcrnModel":
        cfg = WcrnConfig(**{**self.config.to_dict(), "dtype": dtype})
        return WcrnModel(cfg, {k: v.astype(dtype) for k, v in self.params.items()},
                         {k: v.astype(dtype) for k, v in self.buffers.items()})

    def save(self, path, extra: dict | None = None) -> None:
        header = {"kind": "wcrn", "config": self.config.to_dict(), **(extra or {})}
        arrays = {k: self.params[k] for k in PARAM_ORDER}
        arrays.update({k: self.buffers[k] for k in BUFFER_ORDER})
        save_model(path, header, arrays, dtype="<f4")

    @classmethod
    def load(cls, path) -> tuple["WcrnModel", dict]:
        header, arrays = load_model(path)
        if header.get("kind") != "wcrn":
            raise StateError(f"{path} is not a WCRN checkpoint")
        cfg = WcrnConfig(**header["config"])
        params = {k: arrays[k].astype(cfg.dtype) for k in PARAM_ORDER}
        buffers = {k: arrays[k].astype(cfg.dtype) for k in BUFFER_ORDER}
        return cls(cfg, params, buffers), header


# ---------------------------------------------------------------------------
# patches


def _as_image(stack) -> np.ndarray:
    vals = getattr(stack, "values", stack)
    vals = np.asarray(vals)
    return vals[:, :, None] if vals.ndim == 2 else vals


class PatchSource:
    """Reflect-padded image from which centred patches are gathered."""

    def __init__(self, image: np.ndarray, patch_size: int, dtype: str = "float32"):
        image = _as_image(image)
        self.shape = image.shape[:2]
        self.patch_size = patch_size
        pad = patch_size // 2
        padded = np.pad(np.asarray(image, dtype=dtype), ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
        # (H, W, C, P, P) view
        self._windows = sliding_window_view(padded, (patch_size, patch_size), axis=(0, 1))

    def patches(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        h, w = self.shape
        if np.any((rows < 0) | (rows >= h) | (cols < 0) | (cols >= w)):
            raise IndexError("patch centre outside the raster")
        return np.ascontiguousarray(self._windows[rows, cols].transpose(0, 2, 3, 1))

    def from_pixels(self, pixels: np.ndarray) -> np.ndarray:
        rows, cols = np.divmod(np.asarray(pixels), self.shape[1])
        return self.patches(rows, cols)


def extract_patch(stack, row: int, col: int, patch_size: int) -> np.ndarray:
    """Single ``patch_size x patch_size x C`` window, reflect-padded at borders."""
    image = _as_image(stack)
    h, w = image.shape[:2]
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"centre ({row}, {col}) outside a {h}x{w} raster")
    return PatchSource(image, patch_size, dtype=image.dtype).patches(np.array([row]), np.array([col]))[0]


# ---------------------------------------------------------------------------
# forward / backward


def _mm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` over the last axis, as one 2-D GEMM."""
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(*x.shape[:-1], w.shape[-1])


def _im2col(x: np.ndarray) -> np.ndarray:
    s = x.shape[1] - 2
    return np.concatenate([x[:, i:i + s, j:j + s, :] for i in range(3) for j in range(3)], axis=-1)


def _col2im(dcols: np.ndarray, in_size: int) -> np.ndarray:
    b, s, _, k = dcols.shape
    c = k // 9
    dx = np.zeros((b, in_size, in_size, c), dtype=dcols.dtype)
    for n, (i, j) in enumerate((i, j) for i in range(3) for j in range(3)):
        dx[:, i:i + s, j:j + s, :] += dcols[..., n * c:(n + 1) * c]
    return dx


def _bn_forward(x, gamma, beta, mean, var, eps, train, momentum, buffers, key):
    if train:
        axes = (0, 1, 2)
        mu = x.mean(axis=axes)
        v = x.var(axis=axes)
        n = x.size // x.shape[-1]
        buffers[key + "_mean"] = ((1 - momentum) * mean + momentum * mu).astype(mean.dtype)
        buffers[key + "_var"] = ((1 - momentum) * var + momentum * v * n / max(n - 1, 1)).astype(var.dtype)
    else:
        mu, v = mean, var
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv)


def _bn_backward(dz, xhat, inv, gamma):
    axes = (0, 1, 2)
    n = dz.size // dz.shape[-1]
    dgamma = np.sum(dz * xhat, axis=axes)
    dbeta = np.sum(dz, axis=axes)
    dxhat = dz * gamma
    dx = (inv / n) * (n * dxhat - dxhat.sum(axis=axes) - xhat * np.sum(dxhat * xhat, axis=axes))
    return dx, dgamma, dbeta


def _sigmoid(z):
    # |z| <= 36 keeps the output strictly inside (0, 1) in float64
    return 0.5 * (1.0 + np.tanh(0.5 * np.clip(z, -36.0, 36.0)))


def forward(model: WcrnModel, patches: np.ndarray, train: bool = False):
    """Returns ``(features, predictions, cache)``.

    In train mode batch statistics normalize the activations and the running
    statistics are updated; eval mode uses the running statistics only.
    """
    cfg = model.config
    p = model.params
    x = np.asarray(patches, dtype=cfg.dtype)
    if x.ndim != 4 or x.shape[1] != cfg.patch_size or x.shape[2] != cfg.patch_size:
        raise ShapeError(f"expected patches of shape (B, {cfg.patch_size}, {cfg.patch_size}, C)")
    if x.shape[3] != cfg.in_channels:
        raise ShapeError(f"patches have {x.shape[3]} channels, model expects {cfg.in_channels}")
    b = x.shape[0]
    if train and b < 2:
        raise BatchTooSmall("batch normalization needs at least two samples in train mode")
    buf = model.buffers if train else dict(model.buffers)

    cols_x = _im2col(x)
    x_c = x[:, 1:-1, 1:-1, :]
    h0 = np.concatenate([_mm(cols_x, p["w3"]), _mm(x_c, p["w1"])], axis=-1)
    z1, bn1 = _bn_forward(h0, p["bn1_gamma"], p["bn1_beta"], buf["bn1_mean"], buf["bn1_var"],
                          cfg.bn_eps, train, cfg.bn_momentum, buf, "bn1")
    a1 = np.maximum(z1, 0)
    cols_a1 = _im2col(a1)
    r1 = _mm(cols_a1, p["wa"])
    z2, bn2 = _bn_forward(r1, p["bn2_gamma"], p["bn2_beta"], buf["bn2_mean"], buf["bn2_var"],
                          cfg.bn_eps, train, cfg.bn_momentum, buf, "bn2")
    a2 = np.maximum(z2, 0)
    s1, s3 = a1.shape[1], a2.shape[1] - 2
    off = (s1 - s3) // 2
    c = s3 // 2
    # only the centre pixel of the last conv reaches the output
    cols_a2 = a2[:, c:c + 3, c:c + 3, :].reshape(b, -1)
    feat = a1[:, off + c, off + c, :] + cols_a2 @ p["wb"]
    logit = feat.astype(np.float64) @ p["fc_w"].astype(np.float64) + float(p["fc_b"][0])
    pred = _sigmoid(logit)
    cache = {"id": id(model), "b": b, "x": x, "cols_x": cols_x, "x_c": x_c, "z1": z1, "bn1": bn1,
             "cols_a1": cols_a1, "z2": z2, "bn2": bn2, "cols_a2": cols_a2, "feat": feat,
             "pred": pred, "train": train, "s1": s1, "off": off, "c": c}
    return feat, pred, cache


def l1_loss(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ShapeError("predictions and targets differ in shape")
    return float(np.sum(np.abs(targets - predictions)))


def backward(model: WcrnModel, targets: np.ndarray, cache: dict) -> dict[str, np.ndarray]:
    """Gradients of the summed L1 loss for every parameter.

    ``cache`` must come from a train-mode :func:`forward` of ``model`` on the
    batch whose targets are given. The L1 subgradient at zero error is 0.
    """
    if cache.get("id") != id(model) or not cache.get("train"):
        raise StateError("backward needs the cache of a train-mode forward on this model")
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != (cache["b"],):
        raise StateError("targets do not match the cached batch")
    p = model.params
    dt = np.dtype(model.config.dtype)
    pred = cache["pred"]
    dlogit = (np.sign(pred - targets) * pred * (1.0 - pred))
    feat = cache["feat"]
    g = {"fc_w": (feat.astype(np.float64).T @ dlogit).astype(dt),
         "fc_b": np.array([dlogit.sum()], dtype=dt)}
    dfeat = (dlogit[:, None] * p["fc_w"].astype(np.float64)).astype(dt)

    b, s1, off, c = cache["b"], cache["s1"], cache["off"], cache["c"]
    f = feat.shape[1]
    # r2 only reaches the loss through its centre pixel
    g["wb"] = cache["cols_a2"].T @ dfeat
    z2 = cache["z2"]
    da2 = np.zeros(z2.shape, dtype=dt)
    da2[:, c:c + 3, c:c + 3, :] = (dfeat @ p["wb"].T).reshape(b, 3, 3, f)
    dz2 = da2 * (z2 > 0)
    xhat2, inv2 = cache["bn2"]
    dr1, g["bn2_gamma"], g["bn2_beta"] = _bn_backward(dz2, xhat2, inv2, p["bn2_gamma"])
    cols_a1 = cache["cols_a1"]
    g["wa"] = cols_a1.reshape(-1, cols_a1.shape[-1]).T @ dr1.reshape(-1, f)
    da1 = _col2im(_mm(dr1, p["wa"].T), s1)
    da1[:, off + c, off + c, :] += dfeat
    dz1 = da1 * (cache["z1"] > 0)
    xhat1, inv1 = cache["bn1"]
    dh0, g["bn1_gamma"], g["bn1_beta"] = _bn_backward(dz1, xhat1, inv1, p["bn1_gamma"])
    w = model.config.width
    cols_x = cache["cols_x"]
    g["w3"] = cols_x.reshape(-1, cols_x.shape[-1]).T @ dh0[..., :w].reshape(-1, w)
    x_c = cache["x_c"]
    g["w1"] = x_c.reshape(-1, x_c.shape[-1]).T @ dh0[..., w:].reshape(-1, w)
    return {k: g[k].astype(dt) for k in PARAM_ORDER}


# ---------------------------------------------------------------------------
# training and feature export


def train_cnn(image: np.ndarray, pixels: np.ndarray, targets: np.ndarray, config: WcrnConfig,
              schedule: Schedule | None = None, seed: int = 0) -> tuple[WcrnModel, list[float]]:
    """Minibatch Adam on the L1 loss over the given training pixels.

    ``image`` is the standardized ``H x W x C`` covariate raster, ``pixels``
    flat indices of training pixels and ``targets`` their scaled targets.
    Returns the model and the per-epoch mean loss per sample.
    """
    schedule = schedule or default_cnn_schedule()
    pixels = np.asarray(pixels)
    targets = np.asarray(targets, dtype=np.float64)
    if pixels.size < 2:
        raise BatchTooSmall("need at least two training samples")
    model = WcrnModel.init(config, seed)
    source = PatchSource(image, config.patch_size, config.dtype)
    rng = make_rng(seed + 1)
    opt = Adam(model.params)
    trace = []
    for lr in schedule:
        opt.lr = lr
        total = 0.0
        count = 0
        for idx in minibatches(pixels.size, config.batch_size, rng, min_size=2):
            _, pred, cache = forward(model, source.from_pixels(pixels[idx]), train=True)
            loss = l1_loss(pred, targets[idx])
            if not np.isfinite(loss):
                raise NumericalDivergence("CNN loss became non-finite")
            opt.step(backward(model, targets[idx], cache))
            total += loss
            count += idx.size
        trace.append(total / max(count, 1))
    return model, trace


def extract_features(model: WcrnModel, image: np.ndarray, pixels: np.ndarray,
                     block: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode deep features and head predictions for the given pixels."""
    source = PatchSource(image, model.config.patch_size, model.config.dtype)
    pixels = np.asarray(pixels)
    feats = np.empty((pixels.size, model.config.feature_dim), dtype=np.float64)
    preds = np.empty(pixels.size, dtype=np.float64)
    for start in range(0, pixels.size, block):
        sl = slice(start, start + block)
        f, p, _ = forward(model, source.from_pixels(pixels[sl]), train=False)
        feats[sl] = f
        preds[sl] = p
    return feats, preds

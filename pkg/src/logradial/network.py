"""Scale-steered CNN: three scale-invariant conv layers and two dense layers.

Forward and backward are written out by hand. Kernels are linear in the
complex coefficients, so the coefficient gradient is the kernel gradient
pushed back through the (real) steering design tensor of each scale.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .convengine import FFTCorrelator, ScaleBank, upsample
from .filterbank import BasisSpec

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


def geometric_scales(lo: float = 1.0, hi: float = 2.4, n: int = 5) -> tuple[float, ...]:
    if n == 1:
        return (float(lo),)
    return tuple(float(v) for v in np.geomspace(lo, hi, n))


@dataclass
class NetworkConfig:
    channel_widths: list = field(default_factory=lambda: [30, 60, 90])
    scales: list = field(default_factory=lambda: list(geometric_scales()))
    base_kernel_size: int = 7
    spatial_pool_sizes: list = field(default_factory=lambda: [2, 2, 8])
    upsample_factor: int = 2
    dense_widths: list = field(default_factory=lambda: [128, 10])
    input_shape: list = field(default_factory=lambda: [28, 28])
    layer_type: str = "steerable"  # or "plain": free-form single-scale kernels
    scale_normalize: bool = False
    precision: str = "double"  # "single" runs the correlations in float32
    basis: BasisSpec = field(default_factory=BasisSpec)
    learning_rate: float = 0.01
    momentum: float = 0.0
    optimizer: str = "sgd"  # or "adam"
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    init_gain: float = math.sqrt(2.0)

    def __post_init__(self):
        if isinstance(self.basis, dict):
            self.basis = BasisSpec.from_dict(self.basis)
        self.validate()

    def validate(self) -> None:
        if len(self.channel_widths) != 3:
            raise ValueError("channel_widths must list exactly 3 conv layers")
        if len(self.spatial_pool_sizes) != 3:
            raise ValueError("spatial_pool_sizes must list one window per conv layer")
        if not self.scales or list(self.scales) != sorted(self.scales):
            raise ValueError("scales must be nonempty and ascending")
        if self.base_kernel_size % 2 == 0 or self.base_kernel_size < 1:
            raise ValueError("base_kernel_size must be odd")
        if len(self.dense_widths) != 2:
            raise ValueError("dense_widths must hold (hidden, n_classes)")
        if self.layer_type not in ("steerable", "plain"):
            raise ValueError(f"unknown layer_type {self.layer_type!r}")
        if self.precision not in ("double", "single"):
            raise ValueError(f"precision must be 'double' or 'single', got {self.precision!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.upsample_factor < 1:
            raise ValueError("upsample_factor must be >= 1")

    @property
    def n_classes(self) -> int:
        return self.dense_widths[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["basis"] = self.basis.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


# --- config files: flat ``key = value`` text ---------------------------------

_LIST_INT = {"channel_widths", "spatial_pool_sizes", "dense_widths", "input_shape"}
_LIST_FLOAT = {"scales"}
_INT = {"base_kernel_size", "upsample_factor", "epochs", "batch_size", "seed",
        "n_train", "n_val", "n_test", "split_seed"}
_FLOAT = {"learning_rate", "momentum", "init_gain"}
_BOOL = {"scale_normalize"}
_BASIS = {"orders", "orientations", "sigma_phi", "beta", "m"}
# keys describing how to carve the dataset; not part of NetworkConfig
DATA_KEYS = ("n_train", "n_val", "n_test", "split_seed")


def parse_config_text(text: str) -> tuple[NetworkConfig, dict]:
    """Parse ``key = value`` lines into a config and the data-split settings."""
    values: dict = {}
    basis: dict = {}
    data: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key in _LIST_INT:
            parsed = [int(v) for v in val.split(",") if v.strip()]
        elif key in _LIST_FLOAT:
            parsed = [float(v) for v in val.split(",") if v.strip()]
        elif key in _INT:
            parsed = int(val)
        elif key in _FLOAT:
            parsed = float(val)
        elif key in _BOOL:
            parsed = val.lower() in ("1", "true", "yes", "on")
        elif key in ("layer_type", "precision", "optimizer"):
            parsed = val
        elif key == "n_scales":
            parsed = int(val)
        elif key in _BASIS:
            if key in ("orders", "orientations"):
                basis[key] = tuple(float(v) for v in val.split(",") if v.strip())
            else:
                basis[key] = float(val)
            continue
        else:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in DATA_KEYS:
            data[key] = parsed
        else:
            values[key] = parsed
    if "n_scales" in values:
        n = values.pop("n_scales")
        if "scales" not in values:
            values["scales"] = list(geometric_scales(n=n))
    if basis:
        values["basis"] = BasisSpec(**basis)
    return NetworkConfig(**values), data


def load_config(path) -> tuple[NetworkConfig, dict]:
    return parse_config_text(Path(path).read_text())


# --- parameters ----------------------------------------------------------------


@dataclass
class NetworkState:
    conv_theta: list  # per layer: real (C_out, C_in, n_params)
    conv_bias: list  # per layer: (C_out,)
    dense_w: list  # [(D, hidden), (hidden, classes)]
    dense_b: list

    def arrays(self) -> list[np.ndarray]:
        return [*self.conv_theta, *self.conv_bias, *self.dense_w, *self.dense_b]

    def copy(self) -> "NetworkState":
        return NetworkState(*[[a.copy() for a in group] for group in
                              (self.conv_theta, self.conv_bias, self.dense_w, self.dense_b)])

    def coefficients(self, layer: int) -> np.ndarray:
        """Complex coefficients (C_out, C_in, n_filters) of a steerable layer."""
        theta = self.conv_theta[layer]
        nb = theta.shape[-1] // 2
        return theta[..., :nb] + 1j * theta[..., nb:]

    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays())


class SSCNN:
    """Network structure derived from a config; holds no trainable state."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        cfg = config
        if cfg.layer_type == "steerable":
            bank = ScaleBank.steerable(cfg.basis, cfg.scales, cfg.base_kernel_size, cfg.scale_normalize)
        else:
            bank = ScaleBank.plain(cfg.base_kernel_size)
        self.bank = bank
        self.dtype = np.float32 if cfg.precision == "single" else np.float64
        h = cfg.input_shape[0] * cfg.upsample_factor
        w = cfg.input_shape[1] * cfg.upsample_factor
        self.layer_shapes = []
        self.correlators = []
        for pool in cfg.spatial_pool_sizes:
            self.correlators.append(FFTCorrelator(h, w, bank.size, self.dtype))
            self.layer_shapes.append((h, w))
            h, w = math.ceil(h / pool), math.ceil(w / pool)
        self.flat_dim = cfg.channel_widths[-1] * h * w

    def coefficient_step_scale(self) -> float:
        """Learning-rate multiplier for conv parameters.

        One coefficient moves every scale's kernel through its design row, so
        its gradient is larger than a pixel weight's by roughly the row's
        per-scale energy summed over scales (DC gain when larger). Dividing
        by that keeps kernel updates comparable to a plain layer (where it is 1).
        """
        d = self.bank.design
        l2 = (d**2).sum(axis=(0, 2, 3)).mean()
        dc = (d.sum(axis=(2, 3)) ** 2).sum(axis=0).mean()
        return 1.0 / float(max(l2, dc))

    def init_state(self, seed: Optional[int] = None) -> NetworkState:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        n_params = self.bank.n_params
        # Basis gain per scale: squared L2 norm, or squared DC gain when larger
        # (smooth kernels on smooth inputs respond with their sum). Both equal
        # the pixel count for plain layers.
        d = self.bank.design
        l2 = (d**2).sum(axis=(1, 2, 3))
        dc = (d.sum(axis=(2, 3)) ** 2).sum(axis=1)
        energy = float(np.maximum(l2, dc).mean())
        theta, bias = [], []
        c_in = 1
        for c_out in cfg.channel_widths:
            std = cfg.init_gain / math.sqrt(c_in * energy)
            theta.append(std * rng.standard_normal((c_out, c_in, n_params)))
            bias.append(np.zeros(c_out))
            c_in = c_out
        dims = [self.flat_dim, *cfg.dense_widths]
        dense_w = [rng.standard_normal((a, b)) * math.sqrt(2.0 / a) for a, b in zip(dims[:-1], dims[1:])]
        dense_b = [np.zeros(b) for b in dims[1:]]
        return NetworkState(theta, bias, dense_w, dense_b)

    # --- forward / backward ------------------------------------------------

    def preprocess(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=float)
        if images.ndim == 2:
            images = images[None]
        if list(images.shape[1:]) != list(self.config.input_shape):
            raise ValueError(f"expected images of shape {self.config.input_shape}, got {images.shape[1:]}")
        f = self.config.upsample_factor
        if f > 1:
            images = np.stack([upsample(im, f) for im in images])
        return images[:, None].astype(self.dtype)

    def forward(self, state: NetworkState, images: np.ndarray):
        """Class scores (N, classes) and the cache needed by :meth:`backward`."""
        x = self.preprocess(images)
        cache = {"state_id": id(state), "layers": []}
        for li, corr in enumerate(self.correlators):
            kernels = self.bank.kernels(state.conv_theta[li])
            resp, ccache = corr.forward(x, kernels)
            pooled, arg = _max_over_scales(resp)
            z = pooled + state.conv_bias[li][None, :, None, None]
            mask = z > 0
            a = np.where(mask, z, 0.0)
            x_next, pidx = _spatial_pool(a, self.config.spatial_pool_sizes[li])
            cache["layers"].append(dict(corr=ccache, arg=arg, mask=mask, pidx=pidx,
                                        shape=a.shape, pooled=pooled, act=a))
            x = x_next
        n = x.shape[0]
        flat = x.reshape(n, -1)
        h_pre = flat @ state.dense_w[0] + state.dense_b[0]
        h = np.maximum(h_pre, 0.0)
        scores = h @ state.dense_w[1] + state.dense_b[1]
        cache.update(flat=flat, h_pre=h_pre, h=h, feature_shape=x.shape)
        return scores, cache

    def backward(self, state: NetworkState, cache: dict, dscores: np.ndarray) -> NetworkState:
        """Gradients of every parameter given dL/dscores. Returned as a NetworkState."""
        if cache.get("state_id") != id(state) or cache.get("consumed"):
            raise RuntimeError("stale cache: backward needs the cache of a forward pass on this state")
        cache["consumed"] = True
        dscores = np.asarray(dscores, dtype=float)
        dw2 = cache["h"].T @ dscores
        db2 = dscores.sum(0)
        dh = dscores @ state.dense_w[1].T
        dh_pre = dh * (cache["h_pre"] > 0)
        dw1 = cache["flat"].T @ dh_pre
        db1 = dh_pre.sum(0)
        dx = (dh_pre @ state.dense_w[0].T).reshape(cache["feature_shape"])
        dtheta = [None] * 3
        dbias = [None] * 3
        for li in reversed(range(3)):
            lc = cache["layers"][li]
            da = _spatial_pool_backward(dx, lc["pidx"], lc["shape"], self.config.spatial_pool_sizes[li])
            dz = da * lc["mask"]
            dbias[li] = dz.sum(axis=(0, 2, 3))
            dresp = _max_over_scales_backward(dz, lc["arg"], len(self.bank.scales))
            dx, dk = self.correlators[li].backward(dresp, lc["corr"], need_dx=li > 0)
            dtheta[li] = self.bank.kernels_backward(dk)
        return NetworkState(dtheta, dbias, [dw1, dw2], [db1, db2])

    def loss_and_grad(self, state: NetworkState, images: np.ndarray, labels: np.ndarray):
        scores, cache = self.forward(state, images)
        loss, dscores = softmax_cross_entropy(scores, labels)
        grads = self.backward(state, cache, dscores)
        return loss, scores, grads

    def predict(self, state: NetworkState, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = []
        for i in range(0, len(images), batch_size):
            scores, _ = self.forward(state, images[i:i + batch_size])
            out.append(np.argmax(scores, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)

    def layer_responses(self, state: NetworkState, image: np.ndarray, layer: int):
        """Per-scale responses, pooled maps and argmax indices of one conv layer for one image."""
        x = self.preprocess(image)
        for li, corr in enumerate(self.correlators):
            kernels = self.bank.kernels(state.conv_theta[li])
            resp, _ = corr.forward(x, kernels)
            pooled, arg = _max_over_scales(resp)
            if li == layer:
                return resp[:, 0], pooled[0], arg[0]
            z = np.maximum(pooled + state.conv_bias[li][None, :, None, None], 0.0)
            x, _ = _spatial_pool(z, self.config.spatial_pool_sizes[li])
        raise IndexError(f"layer {layer} out of range")


def _max_over_scales(resp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    arg = np.argmax(resp, axis=0)
    pooled = np.take_along_axis(resp, arg[None], axis=0)[0]
    return pooled, arg


def _max_over_scales_backward(d: np.ndarray, arg: np.ndarray, n_scales: int) -> np.ndarray:
    out = np.zeros((n_scales,) + d.shape)
    np.put_along_axis(out, arg[None], d[None], axis=0)
    return out


def _spatial_pool(a: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k x k max-pool with stride k; ragged borders are padded with -inf."""
    n, c, h, w = a.shape
    oh, ow = math.ceil(h / k), math.ceil(w / k)
    padded = np.full((n, c, oh * k, ow * k), -np.inf)
    padded[..., :h, :w] = a
    win = padded.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _spatial_pool_backward(d: np.ndarray, idx: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    n, c, h, w = shape
    oh, ow = idx.shape[2:]
    win = np.zeros((n, c, oh, ow, k * k))
    np.put_along_axis(win, idx[..., None], d[..., None], axis=-1)
    full = win.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * k, ow * k)
    return full[..., :h, :w]


def softmax_cross_entropy(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the scores."""
    labels = np.asarray(labels, dtype=int)
    shifted = scores - scores.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = scores.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


# --- training ----------------------------------------------------------------


class TrainingError(RuntimeError):
    pass


@dataclass
class EpochMetrics:
    epoch: int
    step: int
    loss: float
    train_acc: float
    val_acc: float


def train(state: NetworkState, config: NetworkConfig, dataset, val_set=None,
          callback=None) -> tuple[NetworkState, list[EpochMetrics]]:
    """Minibatch training on softmax cross-entropy. Deterministic given ``config.seed``.

    ``config.optimizer`` picks SGD (with optional momentum; conv coefficients
    get a step scaled by the inverse design energy) or Adam (betas 0.9, 0.999,
    with ``momentum`` ignored).

    ``dataset``/``val_set`` are LabeledImageSets (or anything with ``images``
    and ``labels``). Returns the trained state and one metrics row per epoch.
    """
    images = np.asarray(dataset.images, dtype=float)
    labels = np.asarray(dataset.labels, dtype=int)
    if len(images) == 0:
        raise ValueError("training set is empty")
    if labels.min() < 0 or labels.max() >= config.n_classes:
        raise ValueError(f"labels must lie in [0, {config.n_classes})")
    net = SSCNN(config)
    state = state.copy()
    velocity = [np.zeros_like(a) for a in state.arrays()]
    second = [np.zeros_like(a) for a in state.arrays()]
    adam = config.optimizer == "adam"
    n_conv = len(state.conv_theta)
    conv_rate = config.learning_rate * (1.0 if adam else net.coefficient_step_scale())
    rates = [conv_rate] * n_conv
    rates += [config.learning_rate] * (len(velocity) - n_conv)
    rng = np.random.default_rng(config.seed)
    history = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(images))
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, scores, grads = net.loss_and_grad(state, images[idx], labels[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, step {step}; "
                                    f"max |theta| = {max(np.abs(t).max() for t in state.conv_theta):.3g}")
            step += 1
            for p, g, v, v2, lr in zip(state.arrays(), grads.arrays(), velocity, second, rates):
                if adam:
                    v *= 0.9
                    v += 0.1 * g
                    v2 *= 0.999
                    v2 += 0.001 * g * g
                    p -= lr * (v / (1 - 0.9**step)) / (np.sqrt(v2 / (1 - 0.999**step)) + 1e-8)
                elif config.momentum:
                    v *= config.momentum
                    v += g
                    p -= lr * v
                else:
                    p -= lr * g
            total_loss += loss * len(idx)
            correct += int((scores.argmax(1) == labels[idx]).sum())
        val_acc = float("nan")
        if val_set is not None and len(val_set.labels):
            val_acc = 1.0 - evaluate(state, config, val_set, net=net)
        row = EpochMetrics(epoch, step, total_loss / len(images), correct / len(images), val_acc)
        log.info("epoch %d loss %.4f train_acc %.4f val_acc %.4f", epoch, row.loss, row.train_acc, row.val_acc)
        history.append(row)
        if callback is not None:
            callback(row, state)
    return state, history


def evaluate(state: NetworkState, config: NetworkConfig, dataset, net: Optional[SSCNN] = None) -> float:
    """Error rate of argmax predictions."""
    net = net or SSCNN(config)
    labels = np.asarray(dataset.labels, dtype=int)
    if len(labels) == 0:
        return 0.0
    pred = net.predict(state, dataset.images)
    return float(np.mean(pred != labels))


def write_metrics_csv(path, history: Sequence[EpochMetrics]) -> None:
    lines = ["epoch,step,loss,train_acc,val_acc"]
    for r in history:
        lines.append(f"{r.epoch},{r.step},{r.loss!r},{r.train_acc!r},{r.val_acc!r}")
    Path(path).write_text("\n".join(lines) + "\n")


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, config: NetworkConfig, state: NetworkState, extra: Optional[dict] = None) -> None:
    """Write config and parameters to one ``.npz`` file.

    The archive carries a JSON header (format version, config, extra
    metadata) plus one named array per parameter; npy members record their
    own dtype and shape.
    """
    header = {"format_version": CHECKPOINT_FORMAT_VERSION, "config": config.to_dict(),
              "extra": extra or {}}
    arrays = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for name, group in (("conv_theta", state.conv_theta), ("conv_bias", state.conv_bias),
                        ("dense_w", state.dense_w), ("dense_b", state.dense_b)):
        for i, a in enumerate(group):
            arrays[f"{name}_{i}"] = a
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[NetworkConfig, NetworkState, dict]:
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode())
        version = header.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        config = NetworkConfig.from_dict(header["config"])
        groups = {}
        for name, count in (("conv_theta", 3), ("conv_bias", 3), ("dense_w", 2), ("dense_b", 2)):
            groups[name] = [z[f"{name}_{i}"].copy() for i in range(count)]
    state = NetworkState(**groups)
    net = SSCNN(config)
    reference = net.init_state(0)
    for got, want in zip(state.arrays(), reference.arrays()):
        if got.shape != want.shape:
            raise ValueError(f"checkpoint parameter shape {got.shape} does not match config {want.shape}")
    return config, state, header.get("extra", {})

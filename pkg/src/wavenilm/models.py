"""The three disaggregation networks: dilated WaveNet, 5-layer CNN and a
3-layer bidirectional GRU.

Every network maps a batch of aggregate windows ``[B, L + r - 1]`` to ``[B, r]``
outputs aligned to window indices ``L//2 ... L//2 + r - 1``. Output ``j`` only
ever sees the ``L`` input samples centred on its target index, so a model with
target field ``r`` gives, position by position, exactly what the ``r = 1``
model gives on the corresponding sub-window.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Conv1dParams, GruCellParams, Tensor
from .serialization import MODEL_MAGIC, from_bytes, to_bytes

if TYPE_CHECKING:
    from .pipeline import NormalizationStats

RECEPTIVE_FIELD_PRESETS = (15, 31, 63, 127, 255, 511, 1023, 2047)
TARGET_FIELD_PRESETS = (1, 10, 100, 1000)
CNN_RNN_MAX_RECEPTIVE_FIELD = 511
FAMILIES = ("cnn", "rnn", "wavenet")
HEADS = ("regression", "classification")
DEFAULT_CNN_FILTERS = ((30, 10), (30, 8), (40, 6), (50, 5), (50, 5))


def receptive_field(layers: int, filter_length: int = 3) -> int:
    """Receptive field of ``layers`` stacked dilated convolutions with
    dilations 1, 2, 4, ...: ``(2**layers - 1) * (filter_length - 1) + 1``."""
    if layers < 1:
        raise ValueError("layers must be >= 1")
    return (2 ** layers - 1) * (filter_length - 1) + 1


def layers_for_receptive_field(L: int, filter_length: int = 3) -> Optional[int]:
    s = 1
    while receptive_field(s, filter_length) < L:
        s += 1
    return s if receptive_field(s, filter_length) == L else None


@dataclass(frozen=True)
class ModelConfig:
    family: str = "wavenet"
    receptive_field: Optional[int] = None
    target_field: int = 1
    layers: Optional[int] = None
    filter_length: int = 3
    residual_channels: int = 32
    skip_channels: int = 64
    hidden_size: int = 64
    cnn_filters: Tuple[Tuple[int, int], ...] = DEFAULT_CNN_FILTERS
    cnn_dense_units: int = 1024
    head: str = "regression"
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.target_field < 1:
            raise ValueError("target_field must be >= 1")
        object.__setattr__(self, "cnn_filters", tuple(tuple(int(v) for v in f) for f in self.cnn_filters))
        if self.family == "wavenet":
            if self.filter_length != 3:
                raise ValueError("WaveNet filter length is fixed at 3")
            L, s = self.receptive_field, self.layers
            if s is None and L is None:
                raise ValueError("WaveNet needs layers or receptive_field")
            if s is not None:
                expected = receptive_field(s, self.filter_length)
                if L is not None and L != expected:
                    raise ValueError(
                        f"inconsistent WaveNet config: layers={s} gives L = (2^s - 1)*(m - 1) + 1 = "
                        f"{expected}, but receptive_field={L}"
                    )
                object.__setattr__(self, "receptive_field", expected)
            else:
                s = layers_for_receptive_field(L, self.filter_length)
                if s is None:
                    raise ValueError(
                        f"receptive_field={L} is not of the form L = (2^s - 1)*(m - 1) + 1 for m={self.filter_length}"
                    )
                object.__setattr__(self, "layers", s)
        else:
            if self.receptive_field is None:
                raise ValueError(f"{self.family} needs receptive_field")
            if self.receptive_field > CNN_RNN_MAX_RECEPTIVE_FIELD:
                raise ValueError(
                    f"{self.family} models support receptive fields up to {CNN_RNN_MAX_RECEPTIVE_FIELD}, "
                    f"got {self.receptive_field}"
                )
        if self.receptive_field < 1 or self.receptive_field % 2 == 0:
            raise ValueError(f"receptive_field must be a positive odd number, got {self.receptive_field}")

    @property
    def window_length(self) -> int:
        return self.receptive_field + self.target_field - 1

    @property
    def offset(self) -> int:
        """Index of the first target sample inside an input window."""
        return self.receptive_field // 2

    def replace(self, **changes) -> "ModelConfig":
        if "receptive_field" in changes and "layers" not in changes and self.family == "wavenet":
            changes["layers"] = None
        if "layers" in changes and "receptive_field" not in changes and self.family == "wavenet":
            changes["receptive_field"] = None
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, str]:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "cnn_filters":
                v = ";".join(f"{n}x{k}" for n, k in v)
            out[f.name] = "" if v is None else str(v)
        return out

    @classmethod
    def from_dict(cls, d: Dict[str, str]) -> "ModelConfig":
        kwargs = {}
        types = {f.name: f for f in dataclasses.fields(cls)}
        for k, v in d.items():
            if k not in types:
                raise ValueError(f"unknown model config key {k!r}")
            if k in ("family", "head", "dtype"):
                kwargs[k] = v
            elif k == "cnn_filters":
                kwargs[k] = tuple(tuple(int(x) for x in item.split("x")) for item in str(v).split(";") if item)
            elif k in ("receptive_field", "layers"):
                kwargs[k] = None if v in ("", None, "None") else int(v)
            else:
                kwargs[k] = int(v)
        return cls(**kwargs)


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> Tensor:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-a, a, size=shape).astype(dtype))


def _conv_params(rng, k_out, k_in, m, dilation, dtype) -> Conv1dParams:
    return Conv1dParams(
        _glorot(rng, (k_out, k_in, m), k_in * m, k_out * m, dtype),
        Tensor(np.zeros(k_out, dtype=dtype)),
        dilation,
    )


def _dense_params(rng, out, inp, dtype) -> Tuple[Tensor, Tensor]:
    return _glorot(rng, (out, inp), inp, out, dtype), Tensor(np.zeros(out, dtype=dtype))


class Network:
    """Common plumbing: named parameters, grads, windowed forward/backward."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self._cache = None

    # subclasses fill this, in a fixed creation order
    params: Dict[str, Tensor]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def n_parameters(self) -> int:
        return int(sum(p.values.size for p in self.params.values()))

    def load_parameters(self, values: Dict[str, np.ndarray]):
        missing = set(self.params) - set(values)
        extra = set(values) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in self.params.items():
            v = np.asarray(values[name])
            if v.shape != p.shape:
                raise ValueError(f"parameter {name!r} has shape {v.shape}, expected {p.shape}")
            p.values[...] = v

    def get_parameters(self) -> Dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self.params.items()}

    def _check_windows(self, windows) -> np.ndarray:
        w = np.asarray(windows, dtype=self.dtype)
        if w.ndim == 1:
            w = w[None]
        if w.ndim == 3 and w.shape[1] == 1:
            w = w[:, 0, :]
        if w.ndim != 2:
            raise ValueError(f"windows must be [B, L+r-1], got shape {w.shape}")
        if w.shape[1] != self.config.window_length:
            raise ValueError(
                f"window length {w.shape[1]} != L + r - 1 = {self.config.window_length}"
            )
        return np.ascontiguousarray(w)

    def forward(self, windows, train: bool = False) -> np.ndarray:
        """Outputs ``[B, r]``; sigmoid probabilities for a classification head.

        With ``train=True`` the intermediate activations are kept for
        :meth:`backward`.
        """
        w = self._check_windows(windows)
        out, cache = self._forward(w)
        if self.config.head == "classification":
            out = ad.sigmoid_forward(out)
        self._cache = (cache, out) if train else None
        return out

    def backward(self, grad_out: np.ndarray):
        """Accumulate parameter gradients for the last ``forward(train=True)``.
        ``grad_out`` is the gradient with respect to the returned outputs."""
        if self._cache is None:
            raise RuntimeError("backward() needs a preceding forward(..., train=True)")
        cache, out = self._cache
        g = np.asarray(grad_out, dtype=self.dtype)
        if g.shape != out.shape:
            raise ValueError(f"grad_out shape {g.shape} != output shape {out.shape}")
        if self.config.head == "classification":
            g = ad.sigmoid_backward(out, g)
        self._backward(cache, g)
        self._cache = None

    def predict(self, windows, chunk: int = 256) -> np.ndarray:
        w = self._check_windows(windows)
        if len(w) == 0:
            return np.zeros((0, self.config.target_field), dtype=self.dtype)
        return np.concatenate([self.forward(w[i:i + chunk]) for i in range(0, len(w), chunk)], axis=0)

    def _subwindows(self, w: np.ndarray) -> np.ndarray:
        """``[B, L+r-1]`` -> ``[B*r, L]``, one length-L window per target."""
        L = self.config.receptive_field
        return np.ascontiguousarray(sliding_window_view(w, L, axis=1)).reshape(-1, L)


class WaveNet(Network):
    """Stack of gated residual blocks with dilations 1, 2, 4, ... .

    Skip outputs of all blocks are centre-cropped to the target extent and
    summed, followed by ReLU, a time-pointwise convolution, ReLU and the
    output projection.
    """

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        dt = self.dtype
        R, S, m = config.residual_channels, config.skip_channels, config.filter_length
        self.input_conv = _conv_params(rng, R, 1, 1, 1, dt)
        self.blocks = []
        for k in range(config.layers):
            d = 2 ** k
            dilated = _conv_params(rng, 2 * R, R, m, d, dt)
            residual = _conv_params(rng, R, R, 1, 1, dt) if k < config.layers - 1 else None
            skip = _conv_params(rng, S, R, 1, 1, dt)
            self.blocks.append((dilated, residual, skip))
        self.post_conv = _conv_params(rng, S, S, 1, 1, dt)
        self.head_conv = _conv_params(rng, 1, S, 1, 1, dt)
        self.params = {"input.filters": self.input_conv.filters, "input.bias": self.input_conv.bias}
        for k, (dilated, residual, skip) in enumerate(self.blocks):
            self.params[f"block{k}.dilated.filters"] = dilated.filters
            self.params[f"block{k}.dilated.bias"] = dilated.bias
            if residual is not None:
                self.params[f"block{k}.residual.filters"] = residual.filters
                self.params[f"block{k}.residual.bias"] = residual.bias
            self.params[f"block{k}.skip.filters"] = skip.filters
            self.params[f"block{k}.skip.bias"] = skip.bias
        self.params.update({
            "post.filters": self.post_conv.filters, "post.bias": self.post_conv.bias,
            "head.filters": self.head_conv.filters, "head.bias": self.head_conv.bias,
        })

    def _forward(self, w):
        r = self.config.target_field
        R = self.config.residual_channels
        x = w[:, :, None]
        h = ad.conv_nlc_forward(x, self.input_conv)
        block_caches = []
        skip_sum = None
        for dilated, residual, skip in self.blocks:
            a, cols = ad.conv_nlc_forward(h, dilated, return_cols=True)
            f = np.tanh(a[:, :, :R])
            g = ad.sigmoid_forward(a[:, :, R:])
            z = f * g
            c = (z.shape[1] - r) // 2
            z_crop = z[:, c:c + r, :]
            s_out = ad.conv_nlc_forward(z_crop, skip)
            skip_sum = s_out if skip_sum is None else skip_sum + s_out
            block_caches.append((h, cols, f, g, z, c))
            if residual is not None:
                d = dilated.dilation
                h = h[:, d:h.shape[1] - d, :] + ad.conv_nlc_forward(z, residual)
        y1 = ad.relu_forward(skip_sum)
        y2 = ad.conv_nlc_forward(y1, self.post_conv)
        y3 = ad.relu_forward(y2)
        out = ad.conv_nlc_forward(y3, self.head_conv)
        return out[:, :, 0], (x, block_caches, skip_sum, y1, y2, y3)

    def _backward(self, cache, g):
        x, block_caches, skip_sum, y1, y2, y3 = cache
        R = self.config.residual_channels
        r = self.config.target_field
        g3 = ad.conv_nlc_backward(y3, self.head_conv, g[:, :, None])
        g2 = ad.relu_backward(y2, g3)
        g1 = ad.conv_nlc_backward(y1, self.post_conv, g2)
        g_skip = ad.relu_backward(skip_sum, g1)
        g_h = None
        for (dilated, residual, skip), bc in zip(reversed(self.blocks), reversed(block_caches)):
            h, cols, f, gate, z, c = bc
            g_z = np.zeros_like(z)
            if residual is not None:
                g_z += ad.conv_nlc_backward(z, residual, g_h)
                d = dilated.dilation
                g_h_in = np.zeros_like(h)
                g_h_in[:, d:h.shape[1] - d, :] = g_h
            else:
                g_h_in = np.zeros_like(h)
            g_z[:, c:c + r, :] += ad.conv_nlc_backward(z[:, c:c + r, :], skip, g_skip)
            g_f, g_g = g_z * gate, g_z * f
            g_a = np.concatenate([ad.tanh_backward(f, g_f), ad.sigmoid_backward(gate, g_g)], axis=2)
            g_h_in += ad.conv_nlc_backward(h, dilated, g_a, cols=cols)
            g_h = g_h_in
        ad.conv_nlc_backward(x, self.input_conv, g_h, need_input_grad=False)


def _same_pad(x: np.ndarray, m: int) -> np.ndarray:
    left = (m - 1) // 2
    return np.pad(x, ((0, 0), (left, m - 1 - left), (0, 0)))


class CNN(Network):
    """Sequence-to-point CNN: five 'same'-padded convolutions with ReLU, a
    dense ReLU layer and a linear output unit, applied to each of the ``r``
    length-``L`` sub-windows of the input."""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        dt = self.dtype
        self.convs: List[Conv1dParams] = []
        k_in = 1
        for n_filters, length in config.cnn_filters:
            self.convs.append(_conv_params(rng, n_filters, k_in, length, 1, dt))
            k_in = n_filters
        flat = k_in * config.receptive_field
        self.dense = _dense_params(rng, config.cnn_dense_units, flat, dt)
        self.out = _dense_params(rng, 1, config.cnn_dense_units, dt)
        self.params = {}
        for i, c in enumerate(self.convs):
            self.params[f"conv{i}.filters"] = c.filters
            self.params[f"conv{i}.bias"] = c.bias
        self.params.update({"dense.weight": self.dense[0], "dense.bias": self.dense[1],
                            "head.weight": self.out[0], "head.bias": self.out[1]})

    def _forward(self, w):
        B = w.shape[0]
        h = self._subwindows(w)[:, :, None]
        acts = []
        for conv in self.convs:
            padded = _same_pad(h, conv.m)
            pre = ad.conv_nlc_forward(padded, conv)
            acts.append((padded, pre))
            h = ad.relu_forward(pre)
        flat = h.reshape(h.shape[0], -1)
        d_pre = ad.dense_forward(flat, *self.dense)
        d = ad.relu_forward(d_pre)
        out = ad.dense_forward(d, *self.out)
        return out.reshape(B, self.config.target_field), (acts, flat, d_pre, d, h.shape)

    def _backward(self, cache, g):
        acts, flat, d_pre, d, h_shape = cache
        g = g.reshape(-1, 1)
        gd = ad.dense_backward(d, *self.out, g)
        gd = ad.relu_backward(d_pre, gd)
        gflat = ad.dense_backward(flat, *self.dense, gd)
        gh = gflat.reshape(h_shape)
        for i in range(len(self.convs) - 1, -1, -1):
            conv = self.convs[i]
            padded, pre = acts[i]
            gpre = ad.relu_backward(pre, gh)
            gpad = ad.conv_nlc_backward(padded, conv, gpre, need_input_grad=i > 0)
            if i > 0:
                left = (conv.m - 1) // 2
                gh = gpad[:, left:left + pre.shape[1], :]


class BiGRUNet(Network):
    """Three stacked bidirectional GRU layers (directions concatenated) read
    over each length-``L`` sub-window; the hidden state at the sub-window
    midpoint feeds a linear output unit."""

    n_layers = 3

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        rng = np.random.default_rng(config.seed)
        dt = self.dtype
        H = config.hidden_size
        self.layers: List[Tuple[GruCellParams, GruCellParams]] = []
        self.params = {}
        inp = 1
        for li in range(self.n_layers):
            pair = []
            for direction in ("fwd", "bwd"):
                cell = GruCellParams(
                    w_r=_glorot(rng, (H, inp), inp, H, dt),
                    w_z=_glorot(rng, (H, inp), inp, H, dt),
                    w_h=_glorot(rng, (H, inp), inp, H, dt),
                    u_r=_glorot(rng, (H, H), H, H, dt),
                    u_z=_glorot(rng, (H, H), H, H, dt),
                    u_h=_glorot(rng, (H, H), H, H, dt),
                    b_r=Tensor(np.zeros(H, dtype=dt)),
                    b_z=Tensor(np.zeros(H, dtype=dt)),
                    b_h=Tensor(np.zeros(H, dtype=dt)),
                )
                for name, t in cell.tensors().items():
                    self.params[f"gru{li}.{direction}.{name}"] = t
                pair.append(cell)
            self.layers.append(tuple(pair))
            inp = 2 * H
        self.out = _dense_params(rng, 1, 2 * H, dt)
        self.params["head.weight"], self.params["head.bias"] = self.out

    def _forward(self, w):
        B = w.shape[0]
        L = self.config.receptive_field
        mid = L // 2
        H = self.config.hidden_size
        x = self._subwindows(w)[:, :, None]
        h0 = np.zeros(H, dtype=self.dtype)
        caches = []
        for li, (fwd, bwd) in enumerate(self.layers):
            if li < self.n_layers - 1:
                of, cf = ad.gru_forward_cached(x, h0, fwd, "forward")
                ob, cb = ad.gru_forward_cached(x, h0, bwd, "backward")
                caches.append((cf, cb))
                x = np.concatenate([of, ob], axis=2)
            else:
                # only the midpoint is read out: the forward pass needs steps
                # 0..mid, the backward pass steps mid..L-1
                of, cf = ad.gru_forward_cached(x[:, :mid + 1], h0, fwd, "forward")
                ob, cb = ad.gru_forward_cached(x[:, mid:], h0, bwd, "backward")
                caches.append((cf, cb))
                feat = np.concatenate([of[:, -1], ob[:, 0]], axis=1)
        out = ad.dense_forward(feat, *self.out)
        return out.reshape(B, self.config.target_field), (caches, feat, x.shape)

    def _backward(self, cache, g):
        caches, feat, x_shape = cache
        L = self.config.receptive_field
        mid = L // 2
        H = self.config.hidden_size
        gfeat = ad.dense_backward(feat, *self.out, g.reshape(-1, 1))
        n = gfeat.shape[0]
        fwd, bwd = self.layers[-1]
        cf, cb = caches[-1]
        gof = np.zeros((n, mid + 1, H), dtype=self.dtype)
        gof[:, -1] = gfeat[:, :H]
        gob = np.zeros((n, L - mid, H), dtype=self.dtype)
        gob[:, 0] = gfeat[:, H:]
        gxf, _ = ad.gru_backward_cached(cf, fwd, gof)
        gxb, _ = ad.gru_backward_cached(cb, bwd, gob)
        gx = np.zeros(x_shape, dtype=self.dtype)
        gx[:, :mid + 1] += gxf
        gx[:, mid:] += gxb
        for li in range(self.n_layers - 2, -1, -1):
            fwd, bwd = self.layers[li]
            cf, cb = caches[li]
            gxf, _ = ad.gru_backward_cached(cf, fwd, gx[:, :, :H])
            gxb, _ = ad.gru_backward_cached(cb, bwd, gx[:, :, H:])
            gx = gxf + gxb


def build_wavenet(config: ModelConfig) -> WaveNet:
    if config.family != "wavenet":
        raise ValueError(f"build_wavenet needs family='wavenet', got {config.family!r}")
    return WaveNet(config)


def build_cnn(config: ModelConfig) -> CNN:
    if config.family != "cnn":
        raise ValueError(f"build_cnn needs family='cnn', got {config.family!r}")
    return CNN(config)


def build_rnn(config: ModelConfig) -> BiGRUNet:
    if config.family != "rnn":
        raise ValueError(f"build_rnn needs family='rnn', got {config.family!r}")
    return BiGRUNet(config)


def build_model(config: ModelConfig) -> Network:
    return {"wavenet": build_wavenet, "cnn": build_cnn, "rnn": build_rnn}[config.family](config)


def forward(model: Network, window) -> np.ndarray:
    """Single window ``[L + r - 1]`` (or ``[1, L + r - 1]``) -> ``[r]``."""
    w = np.asarray(window)
    if w.ndim == 2 and w.shape[0] != 1:
        raise ValueError(f"forward() takes one window, got shape {w.shape}")
    return model.forward(w.reshape(1, -1))[0]


# ---------------------------------------------------------------------------
# trained models on disk


@dataclass
class TrainedModel:
    """A network together with the normalisation it was trained with."""

    network: Network
    aggregate_stats: "NormalizationStats"
    appliance_stats: Optional["NormalizationStats"] = None
    appliance: str = "appliance"
    threshold: Optional[float] = None

    @property
    def config(self) -> ModelConfig:
        return self.network.config

    def to_bytes(self) -> bytes:
        meta = {f"model.{k}": v for k, v in self.config.to_dict().items()}
        meta.update(self.aggregate_stats.to_dict("normalizer.aggregate."))
        if self.appliance_stats is not None:
            meta.update(self.appliance_stats.to_dict("normalizer.appliance."))
        meta["appliance"] = self.appliance
        meta["threshold"] = "" if self.threshold is None else repr(float(self.threshold))
        return to_bytes(MODEL_MAGIC, meta, {k: p.values for k, p in self.network.params.items()})

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "TrainedModel":
        from .pipeline import NormalizationStats

        meta, arrays = from_bytes(raw, MODEL_MAGIC)
        config = ModelConfig.from_dict({k[6:]: v for k, v in meta.items() if k.startswith("model.")})
        network = build_model(config)
        network.load_parameters(arrays)
        app_stats = (NormalizationStats.from_dict(meta, "normalizer.appliance.")
                     if "normalizer.appliance.mean" in meta else None)
        threshold = float(meta["threshold"]) if meta.get("threshold") else None
        return cls(network, NormalizationStats.from_dict(meta, "normalizer.aggregate."), app_stats,
                   meta.get("appliance", "appliance"), threshold)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        return cls.from_bytes(Path(path).read_bytes())


save_model = TrainedModel.save
load_model = TrainedModel.load

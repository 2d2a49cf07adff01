"""The four enhancement architectures plus an identity model.

Every hidden layer is linear/conv -> batch norm -> PReLU; output layers are
linear. Waveform models take 512-sample frames, the LPS baseline takes
257-bin log power spectra.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .signal import FrameSet, Waveform, frame, reconstruct

FRAME_LEN = 512
LPS_DIM = 257
HIDDEN = 1024
CONV_FILTERS = 15
KERNEL = 11
PRELU_INIT = 0.25
MAGIC = b"WFCN1"


class Arch(str, enum.Enum):
    WAVE_DNN = "wave-dnn"
    WAVE_CNN = "wave-cnn"
    WAVE_FCN = "wave-fcn"
    LPS_DNN = "lps-dnn"
    IDENTITY = "identity"

    @property
    def is_waveform(self) -> bool:
        return self is not Arch.LPS_DNN


@dataclass(frozen=True)
class ModelSpec:
    architecture: Arch
    frame_len: int = FRAME_LEN
    seed: int = 0
    # number of conv layers in WaveFCN; only varied by receptive-field studies
    fcn_depth: int = 6

    def __post_init__(self):
        object.__setattr__(self, "architecture", Arch(self.architecture))
        if self.architecture is not Arch.IDENTITY and self.frame_len != FRAME_LEN:
            raise ValueError(f"{self.architecture.value} requires frame_len={FRAME_LEN}, got {self.frame_len}")
        if self.frame_len < 1:
            raise ValueError(f"frame_len must be positive, got {self.frame_len}")
        if self.fcn_depth < 1:
            raise ValueError(f"fcn_depth must be >= 1, got {self.fcn_depth}")

    @property
    def input_dim(self) -> int:
        return LPS_DIM if self.architecture is Arch.LPS_DNN else self.frame_len

    @property
    def tag(self) -> str:
        if self.architecture is Arch.WAVE_FCN and self.fcn_depth != 6:
            return f"{Arch.WAVE_FCN.value}-d{self.fcn_depth}"
        return self.architecture.value

    @classmethod
    def from_tag(cls, tag: str, seed: int = 0, frame_len: int = FRAME_LEN) -> "ModelSpec":
        prefix = Arch.WAVE_FCN.value + "-d"
        if tag.startswith(prefix):
            return cls(Arch.WAVE_FCN, FRAME_LEN, seed, int(tag[len(prefix):]))
        arch = Arch(tag)
        return cls(arch, frame_len if arch is Arch.IDENTITY else FRAME_LEN, seed)


# ----------------------------------------------------------------------- layers


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Dense:
    def __init__(self, n_in: int, n_out: int, rng, name: str):
        self.weight = nn.Parameter(_glorot(rng, (n_out, n_in), n_in, n_out), f"{name}.weight")
        self.bias = nn.Parameter(np.zeros(n_out), f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x, training):
        return nn.dense(x, self.weight, self.bias)


class Conv1d:
    def __init__(self, in_ch: int, out_ch: int, k: int, rng, name: str):
        shape = (out_ch, in_ch, k)
        self.filters = nn.Parameter(_glorot(rng, shape, in_ch * k, out_ch * k), f"{name}.filters")
        self.bias = nn.Parameter(np.zeros(out_ch), f"{name}.bias")

    def params(self):
        return [self.filters, self.bias]

    def __call__(self, x, training):
        return nn.conv1d(x, self.filters, self.bias, padding="same")


class BatchNorm:
    def __init__(self, features: int, name: str):
        self.gamma = nn.Parameter(np.ones(features), f"{name}.gamma")
        self.beta = nn.Parameter(np.zeros(features), f"{name}.beta")
        self.state = nn.BatchNormState.fresh(features)
        self.name = name

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.state.running_mean,
                f"{self.name}.running_var": self.state.running_var}

    def set_buffer(self, key: str, values: np.ndarray) -> None:
        attr = key.rsplit(".", 1)[1]
        setattr(self.state, attr, values.astype(np.float64))

    def __call__(self, x, training):
        return nn.batchnorm(x, self.gamma, self.beta, self.state, training)


class PReLU:
    def __init__(self, channels: int, name: str):
        self.slope = nn.Parameter(np.full(channels, PRELU_INIT), f"{name}.slope")

    def params(self):
        return [self.slope]

    def __call__(self, x, training):
        return nn.prelu(x, self.slope)


class Reshape:
    def __init__(self, shape):
        self.shape = shape

    def params(self):
        return []

    def __call__(self, x, training):
        x = nn.as_tensor(x)
        return nn.reshape(x, (x.shape[0],) + self.shape)


class Flatten:
    def params(self):
        return []

    def __call__(self, x, training):
        return nn.flatten(x)


# ------------------------------------------------------------------------ model


class Model:
    """A layer stack built from a :class:`ModelSpec`.

    LPS models also carry per-bin feature statistics used to standardize
    inputs and targets (mean 0, std 1 until fitted by :func:`train`).
    """

    def __init__(self, spec: ModelSpec, layers: list):
        self.spec = spec
        self.layers = layers
        self.feature_mean = np.zeros(spec.input_dim)
        self.feature_std = np.ones(spec.input_dim)

    @property
    def arch(self) -> Arch:
        return self.spec.architecture

    def parameters(self) -> list[nn.Parameter]:
        return [p for layer in self.layers for p in layer.params()]

    def named_parameters(self) -> dict[str, nn.Parameter]:
        return {p.name: p for p in self.parameters()}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                out.update(layer.buffers())
        if self.arch is Arch.LPS_DNN:
            out["features.mean"] = self.feature_mean
            out["features.std"] = self.feature_std
        return out

    def set_buffer(self, key: str, values: np.ndarray) -> None:
        if key == "features.mean":
            self.feature_mean = values.astype(np.float64)
            return
        if key == "features.std":
            self.feature_std = values.astype(np.float64)
            return
        for layer in self.layers:
            if isinstance(layer, BatchNorm) and key.startswith(layer.name + "."):
                layer.set_buffer(key, values)
                return
        raise KeyError(key)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x, training: bool = False) -> nn.Tensor:
        """Run the network on (batch, dim) inputs in the model's own feature domain."""
        h = nn.as_tensor(x)
        for layer in self.layers:
            h = layer(h, training)
        return h

    def normalize(self, x: np.ndarray) -> np.ndarray:
        if self.arch is not Arch.LPS_DNN:
            return x
        return (x - self.feature_mean) / self.feature_std

    def denormalize(self, y: np.ndarray) -> np.ndarray:
        if self.arch is not Arch.LPS_DNN:
            return y
        return y * self.feature_std + self.feature_mean

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        """Inference-mode output for raw features (LPS standardization applied)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ValueError(f"{self.spec.tag} expects inputs of dimension {self.spec.input_dim}, "
                             f"got shape {x.shape}")
        if x.shape[0] == 0:
            return x.copy()
        xn = self.normalize(x)
        parts = [self.forward(xn[i:i + batch_size]).values for i in range(0, xn.shape[0], batch_size)]
        out = self.denormalize(np.concatenate(parts))
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{self.spec.tag} produced non-finite outputs")
        return out


def build(spec: ModelSpec) -> Model:
    """Instantiate the layer stack with parameters drawn from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    arch = spec.architecture
    layers: list = []

    def dense_block(n_in, n_out, i):
        layers.extend([Dense(n_in, n_out, rng, f"dense{i}"), BatchNorm(n_out, f"bn_dense{i}"),
                       PReLU(1, f"prelu_dense{i}")])

    def conv_block(c_in, i):
        layers.extend([Conv1d(c_in, CONV_FILTERS, KERNEL, rng, f"conv{i}"),
                       BatchNorm(CONV_FILTERS, f"bn_conv{i}"), PReLU(CONV_FILTERS, f"prelu_conv{i}")])

    if arch in (Arch.WAVE_DNN, Arch.LPS_DNN):
        dim = spec.input_dim
        n_in = dim
        for i in range(4):
            dense_block(n_in, HIDDEN, i)
            n_in = HIDDEN
        layers.append(Dense(HIDDEN, dim, rng, "dense4"))
    elif arch is Arch.WAVE_CNN:
        layers.append(Reshape((1, spec.frame_len)))
        for i in range(4):
            conv_block(1 if i == 0 else CONV_FILTERS, i)
        layers.append(Flatten())
        n_in = CONV_FILTERS * spec.frame_len
        for i in range(2):
            dense_block(n_in, HIDDEN, i)
            n_in = HIDDEN
        layers.append(Dense(HIDDEN, spec.frame_len, rng, "dense2"))
    elif arch is Arch.WAVE_FCN:
        layers.append(Reshape((1, spec.frame_len)))
        depth = spec.fcn_depth
        for i in range(depth - 1):
            conv_block(1 if i == 0 else CONV_FILTERS, i)
        c_in = 1 if depth == 1 else CONV_FILTERS
        layers.append(Conv1d(c_in, 1, KERNEL, rng, f"conv{depth - 1}"))
        layers.append(Reshape((spec.frame_len,)))
    return Model(spec, layers)


def param_count(model: Model) -> int:
    """Trainable scalars: weights, biases, PReLU slopes, batch-norm scale/offset."""
    return sum(p.values.size for p in model.parameters())


def final_dense(model: Model) -> Dense:
    """The fully connected output layer (DNN/CNN models only)."""
    last = [layer for layer in model.layers if isinstance(layer, (Dense, Conv1d))][-1]
    if not isinstance(last, Dense):
        raise ValueError(f"{model.spec.tag} has no fully connected output layer")
    return last


# --------------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    shuffle: bool = True
    validation_fraction: float = 0.1
    # when set, each epoch trains on this many examples drawn without
    # replacement from the training split (bounds cost of shift-1 frame sets)
    samples_per_epoch: int | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 for batch normalization, got {self.batch_size}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError(f"validation_fraction must be in [0, 1), got {self.validation_fraction}")
        if self.samples_per_epoch is not None and self.samples_per_epoch < 2:
            raise ValueError(f"samples_per_epoch must be >= 2, got {self.samples_per_epoch}")


@dataclass
class LossHistory:
    train: list[float] = field(default_factory=list)
    validation: list[float] = field(default_factory=list)


def fit_feature_stats(model: Model, features: np.ndarray) -> None:
    """Per-dimension mean/std standardization fitted on the training inputs (LPS only)."""
    if model.arch is not Arch.LPS_DNN:
        return
    model.feature_mean = features.mean(axis=0)
    std = features.std(axis=0)
    model.feature_std = np.where(std > 1e-8, std, 1.0)


def train(model: Model, noisy: np.ndarray, clean: np.ndarray, config: TrainingConfig) -> LossHistory:
    """Minimize the MSE between model(noisy) and clean with Adam.

    Batch order in each epoch is a pure function of (seed, epoch). A trailing
    batch of a single example is dropped (batch norm needs two).
    """
    noisy = np.asarray(noisy, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    if noisy.shape != clean.shape:
        raise ValueError(f"noisy/clean shape mismatch: {noisy.shape} vs {clean.shape}")
    if noisy.ndim != 2 or noisy.shape[0] == 0:
        raise ValueError("training set is empty")
    if noisy.shape[1] != model.spec.input_dim:
        raise ValueError(f"{model.spec.tag} expects dimension {model.spec.input_dim}, got {noisy.shape[1]}")
    history = LossHistory()
    if model.arch is Arch.IDENTITY:
        return history

    n = noisy.shape[0]
    split_rng = np.random.default_rng([config.seed, 0x5EED])
    order = split_rng.permutation(n) if config.validation_fraction > 0 else np.arange(n)
    n_val = int(math.floor(config.validation_fraction * n))
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    if config.batch_size > min(train_idx.size, config.samples_per_epoch or train_idx.size):
        raise ValueError(f"batch_size {config.batch_size} exceeds training set size {train_idx.size}")

    fit_feature_stats(model, noisy[train_idx])
    x_all = model.normalize(noisy)
    y_all = model.normalize(clean)
    x_tr, y_tr = x_all[train_idx], y_all[train_idx]
    x_val, y_val = x_all[val_idx], y_all[val_idx]

    opt = nn.Adam(model.parameters(), lr=config.learning_rate)
    for epoch in range(config.epochs):
        if config.shuffle:
            perm = np.random.default_rng([config.seed, epoch + 1]).permutation(train_idx.size)
        else:
            perm = np.arange(train_idx.size)
        if config.samples_per_epoch is not None:
            perm = perm[:config.samples_per_epoch]
        losses = []
        for start in range(0, perm.size, config.batch_size):
            idx = perm[start:start + config.batch_size]
            if idx.size < 2:
                continue
            opt.zero_grad()
            loss = nn.mse_loss(model.forward(x_tr[idx], training=True), y_tr[idx])
            if not np.isfinite(loss.values):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch + 1}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.train.append(float(np.mean(losses)))
        if n_val:
            pred = np.concatenate([model.forward(x_val[i:i + 256]).values
                                   for i in range(0, n_val, 256)])
            history.validation.append(float(np.mean((pred - y_val) ** 2)))
        else:
            history.validation.append(float("nan"))
    return history


# -------------------------------------------------------------------- inference


def forward_frames(model: Model, frames):
    """Enhance every frame (inference mode); returns the same container type."""
    if isinstance(frames, FrameSet):
        if not model.arch.is_waveform:
            raise ValueError(f"{model.spec.tag} takes LPS features, not waveform frames")
        if frames.frame_len != model.spec.input_dim:
            raise ValueError(f"frame length {frames.frame_len} does not match model input {model.spec.input_dim}")
        return frames.with_frames(model.predict(frames.frames))
    return model.predict(frames)


def _require_waveform_model(model: Model) -> None:
    if not model.arch.is_waveform:
        raise ValueError(f"{model.spec.tag} works on LPS features; use enhance_lps")


def enhance_waveform(model: Model, wave: Waveform, shift: int = FRAME_LEN) -> Waveform:
    """Frame with hop ``shift``, enhance each frame, overlap-average back."""
    _require_waveform_model(model)
    m = model.spec.frame_len
    if len(wave) < m:
        raise ValueError(f"waveform has {len(wave)} samples, needs at least {m}")
    return reconstruct(forward_frames(model, frame(wave, m, shift)))


def enhance_lps_spectrogram(model: Model, wave: Waveform):
    """Enhanced STFT of ``wave``: model magnitudes on the noisy phase."""
    from .spectral import lps, lps_invert, stft

    if model.arch is not Arch.LPS_DNN:
        raise ValueError(f"enhance_lps needs an lps-dnn model, got {model.spec.tag}")
    spec = stft(wave)
    return lps_invert(model.predict(lps(spec).values), spec)


def enhance_lps(model: Model, wave: Waveform) -> Waveform:
    """LPS-domain enhancement; the noisy phase is reused for resynthesis."""
    from .spectral import istft

    return istft(enhance_lps_spectrogram(model, wave))


def filter_mode_apply(model: Model, wave: Waveform, chunk: int = 256) -> Waveform:
    """Slide a frame model one sample at a time, keeping its first output node.

    output[t] is node 0 of the model applied to samples [t, t + M); the last
    M - 1 samples come from nodes 1..M-1 of the final window.
    """
    if model.arch not in (Arch.WAVE_DNN, Arch.IDENTITY):
        raise ValueError(f"filter mode applies to wave-dnn models, got {model.spec.tag}")
    m = model.spec.frame_len
    n = len(wave)
    if n < m:
        raise ValueError(f"waveform has {n} samples, needs at least {m}")
    windows = np.lib.stride_tricks.sliding_window_view(wave.samples, m)
    out = np.empty(n)
    count = windows.shape[0]
    for start in range(0, count, chunk):
        block = model.predict(windows[start:start + chunk])
        out[start:start + block.shape[0]] = block[:, 0]
        if start + block.shape[0] == count:
            out[count:] = block[-1, 1:]
    return Waveform(wave.sample_rate, out)


# ---------------------------------------------------------------- serialization


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_model(model: Model, path) -> None:
    """Write a WFCN1 checkpoint: parameters then buffers, values as float32 LE."""
    chunks = [MAGIC, _pack_str(model.spec.tag), struct.pack("<q", model.spec.seed)]
    if model.arch is Arch.IDENTITY:
        chunks.append(struct.pack("<I", model.spec.frame_len))
    entries = [(p.name, p.values) for p in model.parameters()] + list(model.buffers().items())
    for name, values in entries:
        values = np.asarray(values)
        chunks.append(_pack_str(name))
        chunks.append(struct.pack("<I", values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}I", *values.shape))
        chunks.append(values.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    @property
    def done(self) -> bool:
        return self.pos >= len(self.data)


def load_model(path, spec: ModelSpec | None = None) -> Model:
    """Read a WFCN1 checkpoint.

    With ``spec`` the values are loaded into that architecture and the first
    parameter whose name or shape disagrees is reported.
    """
    path = Path(path)
    data = path.read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (missing WFCN1 magic)")
    rd = _Reader(data, path)
    rd.take(len(MAGIC))
    tag = rd.string()
    seed = struct.unpack("<q", rd.take(8))[0]
    frame_len = rd.u32() if tag == Arch.IDENTITY.value else FRAME_LEN
    try:
        stored = ModelSpec.from_tag(tag, seed, frame_len)
    except ValueError as exc:
        raise ValueError(f"{path}: unknown architecture tag {tag!r}") from exc
    model = build(spec if spec is not None else stored)

    entries: dict[str, np.ndarray] = {}
    while not rd.done:
        name = rd.string()
        rank = rd.u32()
        dims = struct.unpack(f"<{rank}I", rd.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        entries[name] = np.frombuffer(rd.take(4 * count), dtype="<f4").reshape(dims).astype(np.float64)

    params = model.named_parameters()
    buffers = model.buffers()
    for name, target in list(params.items()) + list(buffers.items()):
        expected = target.shape if isinstance(target, nn.Parameter) else np.shape(target)
        if name not in entries:
            raise ValueError(f"{path}: shape mismatch at parameter {name!r}: missing from checkpoint "
                             f"(stored architecture {tag})")
        if entries[name].shape != tuple(expected):
            raise ValueError(f"{path}: shape mismatch at parameter {name!r}: checkpoint "
                             f"{entries[name].shape}, model {tuple(expected)}")
    extra = set(entries) - set(params) - set(buffers)
    if extra:
        raise ValueError(f"{path}: architecture mismatch: unexpected entries {sorted(extra)[:3]}")
    if spec is not None and spec.tag != tag:
        raise ValueError(f"{path}: architecture mismatch: checkpoint is {tag}, requested {spec.tag}")
    for name, p in params.items():
        p.values[...] = entries[name]
    for name in buffers:
        model.set_buffer(name, entries[name])
    return model

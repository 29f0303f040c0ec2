"""Plain conv+relu teacher/student networks exposing the spatial logit map."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import serialize
from .errors import ConfigurationError, DimensionError, FormatError
from .tensor import Tensor, conv2d, matmul, relu, transpose


@dataclass(frozen=True)
class ConvNetSpec:
    """``stages`` is a list of (out_channels, stride); every stage is a 3x3 conv + relu."""

    stages: tuple[tuple[int, int], ...]
    num_classes: int
    image_size: int = 32
    in_channels: int = 3

    def __post_init__(self):
        if not self.stages:
            raise ConfigurationError("at least one stage is required")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        w = self.spatial_size
        if w < 1 or w & (w - 1):
            raise ConfigurationError(f"output width {w} is not a power of two")

    @property
    def feature_channels(self) -> int:
        return self.stages[-1][0]

    @property
    def spatial_size(self) -> int:
        size = self.image_size
        for _, stride in self.stages:
            size = (size - 1) // stride + 1
        return size


def _strides(n_stages: int, image_size: int, map_width: int) -> list[int]:
    ratio = image_size // map_width
    if ratio * map_width != image_size or ratio & (ratio - 1):
        raise ConfigurationError(f"image size {image_size} is not map width {map_width} times a power of two")
    downs = int(math.log2(ratio))
    if downs > n_stages:
        raise ConfigurationError(f"{n_stages} stages cannot downsample {image_size} to {map_width}")
    return [2] * downs + [1] * (n_stages - downs)


def teacher_spec(num_classes: int, image_size: int = 32, map_width: int = 4) -> ConvNetSpec:
    """Four stages ending in 128 feature channels."""
    chans = (16, 32, 64, 128)
    return ConvNetSpec(tuple(zip(chans, _strides(4, image_size, map_width))), num_classes, image_size)


def student_spec(num_classes: int, image_size: int = 32, map_width: int = 4) -> ConvNetSpec:
    """Three stages ending in 64 feature channels."""
    chans = (16, 32, 64)
    return ConvNetSpec(tuple(zip(chans, _strides(3, image_size, map_width))), num_classes, image_size)


@dataclass
class LogitMap:
    """Per-position class scores, shape [batch, K, w, w]."""

    values: Tensor

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ConvNet:
    def __init__(self, spec: ConvNetSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, Tensor] = {}
        cin = spec.in_channels
        for i, (cout, _) in enumerate(spec.stages):
            self.params[f"stage{i}.weight"] = Tensor(kaiming_uniform(rng, (cout, cin, 3, 3), cin * 9), True)
            self.params[f"stage{i}.bias"] = Tensor(np.zeros(cout), True)
            cin = cout
        self.params["classifier.weight"] = Tensor(
            kaiming_uniform(rng, (cin, spec.num_classes), cin), True)

    # canonical order: stage0.weight, stage0.bias, ..., classifier.weight
    def param_names(self) -> list[str]:
        return list(self.params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def classifier(self) -> Tensor:
        return self.params["classifier.weight"]

    def forward_features(self, images: Tensor) -> Tensor:
        return forward_features(self, images)

    def logit_map(self, images: Tensor) -> LogitMap:
        return project_logit_map(self.forward_features(images), self.classifier)

    def __call__(self, images: Tensor) -> LogitMap:
        return self.logit_map(images)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        if list(state) != self.param_names():
            raise FormatError(f"parameter names {list(state)} do not match {self.param_names()}")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise FormatError(f"{k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float64)


def forward_features(net: ConvNet, images: Tensor) -> Tensor:
    spec = net.spec
    if images.ndim != 4 or images.shape[1] != spec.in_channels or \
            images.shape[2] != spec.image_size or images.shape[3] != spec.image_size:
        raise DimensionError(
            f"expected images [batch,{spec.in_channels},{spec.image_size},{spec.image_size}], got {images.shape}")
    x = images
    for i, (_, stride) in enumerate(spec.stages):
        x = relu(conv2d(x, net.params[f"stage{i}.weight"], net.params[f"stage{i}.bias"],
                        stride=stride, padding=1))
    return x


def project_logit_map(features: Tensor, W: Tensor) -> LogitMap:
    """Apply the classifier at every spatial position (a shared 1x1 conv)."""
    if features.ndim != 4 or W.ndim != 2 or features.shape[1] != W.shape[0]:
        raise DimensionError(f"project_logit_map: features {features.shape} vs W {W.shape}")
    B, c, h, w = features.shape
    flat = transpose(features, (0, 2, 3, 1)).reshape(B * h * w, c)
    logits = matmul(flat, W).reshape(B, h, w, W.shape[1])
    return LogitMap(transpose(logits, (0, 3, 1, 2)))


def global_logits(lmap: LogitMap) -> Tensor:
    return lmap.values.mean(axis=(2, 3))


def predict(net: ConvNet, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Global logits for a stack of images, without recording a graph."""
    from .tensor import no_grad
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(global_logits(net(Tensor(images[i:i + batch_size]))).data)
    return np.concatenate(out) if out else np.zeros((0, net.spec.num_classes))


def accuracy(net: ConvNet, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(net, images, batch_size).argmax(axis=1) == labels))


# -- checkpoints -------------------------------------------------------------

def _fmt_stages(stages) -> str:
    return ",".join(f"{c}:{s}" for c, s in stages)


def _parse_stages(text: str) -> tuple[tuple[int, int], ...]:
    return tuple(tuple(int(v) for v in item.split(":")) for item in text.split(","))


def save_checkpoint(path, net: ConvNet, **manifest) -> Path:
    """Write ``manifest.txt`` (key=value) and ``params.bin`` (ICDT blobs in canonical order)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    spec = net.spec
    fields = {
        "stages": _fmt_stages(spec.stages),
        "feature_channels": spec.feature_channels,
        "map_width": spec.spatial_size,
        "num_classes": spec.num_classes,
        "image_size": spec.image_size,
        "in_channels": spec.in_channels,
        "param_names": ",".join(net.param_names()),
    }
    fields.update(manifest)
    with open(path / "manifest.txt", "w") as fh:
        for k, v in fields.items():
            fh.write(f"{k}={v}\n")
    with open(path / "params.bin", "wb") as fh:
        for t in net.parameters():
            serialize.write_tensor(fh, t.data)
    return path


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in (Path(path) / "manifest.txt").read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def load_checkpoint(path) -> tuple[ConvNet, dict[str, str]]:
    path = Path(path)
    manifest = read_manifest(path)
    spec = ConvNetSpec(_parse_stages(manifest["stages"]), int(manifest["num_classes"]),
                       int(manifest["image_size"]), int(manifest.get("in_channels", 3)))
    net = ConvNet(spec)
    names = manifest["param_names"].split(",")
    state = {}
    with open(path / "params.bin", "rb") as fh:
        for name in names:
            state[name] = serialize.read_tensor(fh)
        if fh.read(1):
            raise FormatError("trailing bytes in params.bin")
    net.load_state_dict(state)
    return net, manifest

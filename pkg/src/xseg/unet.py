"""U-Net encoder/decoder with skip connections built on :mod:`xseg.tensor`."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    out_channels: int = 1
    base_width: int = 32
    depth: int = 4
    input_size: int = 256

    def __post_init__(self):
        if self.base_width < 1 or self.depth < 1:
            raise ValueError(f"base_width and depth must be >= 1: {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"channel counts must be >= 1: {self}")
        if self.input_size < 1 or self.input_size % (2**self.depth):
            raise ValueError(
                f"input_size {self.input_size} must be divisible by 2**depth = {2**self.depth}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: int(v) for k, v in d.items()})


def layer_specs(cfg: ModelConfig) -> list[tuple[str, str, tuple[int, ...]]]:
    """Ordered (name, kind, shape) list for every stored array of the model.

    kind is one of ``param`` (trainable) or ``stat`` (batchnorm running stats).
    """
    specs: list[tuple[str, str, tuple[int, ...]]] = []

    def double_conv(prefix, cin, cout):
        for i, c in ((1, cin), (2, cout)):
            specs.append((f"{prefix}.conv{i}.kernel", "param", (cout, c, 3, 3)))
            specs.append((f"{prefix}.conv{i}.bias", "param", (cout,)))
            specs.append((f"{prefix}.bn{i}.gamma", "param", (cout,)))
            specs.append((f"{prefix}.bn{i}.beta", "param", (cout,)))
            specs.append((f"{prefix}.bn{i}.running_mean", "stat", (cout,)))
            specs.append((f"{prefix}.bn{i}.running_var", "stat", (cout,)))

    b = cfg.base_width
    cin = cfg.in_channels
    for level in range(cfg.depth):
        double_conv(f"enc{level + 1}", cin, b * 2**level)
        cin = b * 2**level
    double_conv("bottleneck", cin, b * 2**cfg.depth)
    for level in reversed(range(cfg.depth)):
        w = b * 2**level
        specs.append((f"dec{level + 1}.up.kernel", "param", (2 * w, w, 2, 2)))
        specs.append((f"dec{level + 1}.up.bias", "param", (w,)))
        double_conv(f"dec{level + 1}", 2 * w, w)
    specs.append(("head.kernel", "param", (cfg.out_channels, b, 1, 1)))
    specs.append(("head.bias", "param", (cfg.out_channels,)))
    return specs


def parameter_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, kind, s in layer_specs(cfg) if kind == "param")


def _checked(config: ModelConfig, arrays: dict[str, np.ndarray]):
    specs = layer_specs(config)
    known = {name for name, _, _ in specs}
    extra = sorted(set(arrays) - known)
    missing = [name for name in known if name not in arrays]
    if extra or missing:
        raise ValueError(f"state mismatch: unknown {extra}, missing {sorted(missing)}")
    for name, kind, shape in specs:
        arr = np.array(arrays[name], dtype=np.float64)
        if arr.shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
        yield name, kind, arr


class UNet:
    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray], momentum=0.1, eps=1e-5):
        self.config = config
        self.params: dict[str, T.Tensor] = {}
        self.bn: dict[str, T.BatchNormState] = {}
        for name, kind, arr in _checked(config, arrays):
            if kind == "param":
                self.params[name] = T.Tensor(arr, requires_grad=True)
            else:
                layer = name.rsplit(".", 1)[0]
                st = self.bn.setdefault(layer, T.BatchNormState(momentum=momentum, eps=eps))
                if name.endswith("running_mean"):
                    st.mean = arr
                else:
                    st.var = arr

    # -- state ------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, kind, _ in layer_specs(self.config):
            if kind == "param":
                out[name] = self.params[name].data.copy()
            else:
                st = self.bn[name.rsplit(".", 1)[0]]
                out[name] = (st.mean if name.endswith("running_mean") else st.var).copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, kind, arr in _checked(self.config, state):
            if kind == "param":
                self.params[name].data = arr
            else:
                st = self.bn[name.rsplit(".", 1)[0]]
                if name.endswith("running_mean"):
                    st.mean = arr
                else:
                    st.var = arr

    def parameters(self) -> dict[str, T.Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "UNet":
        return UNet(self.config, self.state_dict())

    # -- forward ----------------------------------------------------------

    def _block(self, prefix: str, x: T.Tensor, train: bool) -> T.Tensor:
        p = self.params
        for i in (1, 2):
            x = T.conv2d(x, p[f"{prefix}.conv{i}.kernel"], p[f"{prefix}.conv{i}.bias"])
            x = T.batchnorm2d(
                x, p[f"{prefix}.bn{i}.gamma"], p[f"{prefix}.bn{i}.beta"], self.bn[f"{prefix}.bn{i}"], train
            )
            x = T.relu(x)
        return x

    def forward(self, batch, train: bool = False) -> T.Tensor:
        """Probability map N x out_channels x S x S.

        Eval mode (``train=False``) uses running batchnorm statistics and records no graph.
        """
        x = batch if isinstance(batch, T.Tensor) else T.Tensor(batch)
        cfg = self.config
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.data.ndim != 4 or x.shape[1:] != expected:
            raise T.ShapeError(f"UNet.forward: expected N x {'x'.join(map(str, expected))}, got {x.shape}")
        if train:
            return self._forward(x, True)
        with T.no_grad():
            return self._forward(x, False)

    __call__ = forward

    def _forward(self, x: T.Tensor, train: bool) -> T.Tensor:
        skips = []
        for level in range(self.config.depth):
            x = self._block(f"enc{level + 1}", x, train)
            skips.append(x)
            x = T.maxpool2d(x)
        x = self._block("bottleneck", x, train)
        for level in reversed(range(self.config.depth)):
            x = T.conv_transpose2d(x, self.params[f"dec{level + 1}.up.kernel"], self.params[f"dec{level + 1}.up.bias"])
            x = T.concat_channels(x, skips[level])
            x = self._block(f"dec{level + 1}", x, train)
        x = T.conv2d(x, self.params["head.kernel"], self.params["head.bias"])
        return T.sigmoid(x)

    def predict(self, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
        outs = [self.forward(images[i : i + batch_size]).data for i in range(0, len(images), batch_size)]
        return np.concatenate(outs, axis=0)


def build(config: ModelConfig, seed: int) -> UNet:
    """Fresh model: He-style uniform fan-in kernels, zero biases, unit gamma."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, kind, shape in layer_specs(config):
        if name.endswith(".kernel"):
            fan_in = shape[0] if ".up." in name else int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(("gamma", "running_var")):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    return UNet(config, arrays)


def state_hash(state: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name], dtype=np.float64).tobytes())
    return h.hexdigest()


def model_hash(model: UNet) -> str:
    return state_hash(model.state_dict())

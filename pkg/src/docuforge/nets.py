"""CycleGAN generator, 70x70 PatchGAN, conditional-GAN generator/discriminator.

Networks are torch modules wrapped in a :class:`NetHandle` that carries the
declarative :class:`NetSpec` they were built from.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .errors import InvalidArgument, UnsupportedGraph

ROLES = ("cycle_generator", "patch_discriminator", "cgan_generator", "cgan_discriminator")
INIT_STD = 0.02


@dataclass(frozen=True)
class NetSpec:
    role: str
    base_width: int = 64
    res_blocks: int = 9
    input_channels: int = 1
    output_channels: int = 1
    depth: int = 8  # cgan_generator only
    norm: str = "instance"  # "none" drops every normalization layer

    def validate(self, role: str | None = None) -> "NetSpec":
        if self.role not in ROLES:
            raise InvalidArgument(f"unknown role {self.role!r}")
        if role is not None and self.role != role:
            raise InvalidArgument(f"expected role {role}, got {self.role}")
        if self.base_width < 4:
            raise InvalidArgument("base_width must be >= 4")
        if self.role == "cycle_generator" and self.res_blocks < 1:
            raise InvalidArgument("res_blocks must be >= 1")
        if self.role == "cgan_generator" and self.depth < 2:
            raise InvalidArgument("depth must be >= 2")
        if self.input_channels < 1 or self.output_channels < 1:
            raise InvalidArgument("channel counts must be positive")
        if self.norm not in ("instance", "none"):
            raise InvalidArgument(f"unknown norm {self.norm!r}")
        return self


class NetHandle:
    """A built network: its spec plus the torch module computing the forward map."""

    def __init__(self, spec: NetSpec, module: nn.Module):
        self.spec = spec
        self.module = module

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.module(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.module(x)

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.module.state_dict().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        state = self.module.state_dict()
        if set(arrays) != set(state):
            raise InvalidArgument("parameter names do not match the network")
        self.module.load_state_dict({k: torch.from_numpy(np.asarray(arrays[k])).to(state[k].dtype) for k in state})

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.module.parameters())

    def to(self, dtype) -> "NetHandle":
        self.module.to(dtype)
        return self


def _norm(spec: NetSpec, ch: int) -> list[nn.Module]:
    return [nn.InstanceNorm2d(ch)] if spec.norm == "instance" else []


class ResidualBlock(nn.Module):
    def __init__(self, ch: int, spec: NetSpec):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), *_norm(spec, ch), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), *_norm(spec, ch),
        )

    def forward(self, x):
        return x + self.body(x)


class SkipGenerator(nn.Module):
    """Same-resolution trunk added to its input, then clipped to [-1, 1]."""

    def __init__(self, trunk: nn.Module):
        super().__init__()
        self.trunk = trunk

    def forward(self, x):
        return torch.clamp(x + self.trunk(x), -1.0, 1.0)


def init_weights(module: nn.Module, seed: int | None = None) -> None:
    """Zero-mean Gaussian weights (std 0.02), zero biases."""
    gen = None
    if seed is not None:
        gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=m.weight.dtype) * INIT_STD)
                if m.bias is not None:
                    m.bias.zero_()


def build_cycle_generator(spec: NetSpec, seed: int | None = None) -> NetHandle:
    spec.validate("cycle_generator")
    b, cin, cout = spec.base_width, spec.input_channels, spec.output_channels
    layers = [nn.ReflectionPad2d(3), nn.Conv2d(cin, b, 7), *_norm(spec, b), nn.ReLU(True)]
    for m in (1, 2):
        layers += [nn.Conv2d(b * m, b * m * 2, 3, stride=2, padding=1), *_norm(spec, b * m * 2), nn.ReLU(True)]
    layers += [ResidualBlock(4 * b, spec) for _ in range(spec.res_blocks)]
    for m in (4, 2):
        layers += [
            nn.ConvTranspose2d(b * m, b * m // 2, 3, stride=2, padding=1, output_padding=1),
            *_norm(spec, b * m // 2), nn.ReLU(True),
        ]
    layers += [nn.ReflectionPad2d(3), nn.Conv2d(b, cout, 7), nn.Tanh()]
    net = nn.Sequential(*layers)
    init_weights(net, seed)
    return NetHandle(spec, net)


def _patch_stack(spec: NetSpec, cin: int, strides) -> nn.Sequential:
    b = spec.base_width
    widths = [b, 2 * b, 4 * b, 8 * b]
    layers: list[nn.Module] = []
    prev = cin
    for i, (w, s) in enumerate(zip(widths, strides)):
        layers.append(nn.Conv2d(prev, w, 4, stride=s, padding=1))
        if i > 0:
            layers += _norm(spec, w)
        layers.append(nn.LeakyReLU(0.2, True))
        prev = w
    layers.append(nn.Conv2d(prev, 1, 4, stride=strides[-1], padding=1))
    return nn.Sequential(*layers)


def build_patch_discriminator(spec: NetSpec, seed: int | None = None) -> NetHandle:
    spec.validate("patch_discriminator")
    net = _patch_stack(spec, spec.input_channels, (2, 2, 2, 1, 1))
    init_weights(net, seed)
    return NetHandle(spec, net)


def build_cgan_generator(spec: NetSpec, seed: int | None = None) -> NetHandle:
    spec.validate("cgan_generator")
    b = spec.base_width
    layers: list[nn.Module] = [nn.Conv2d(spec.input_channels, b, 3, 1, 1), nn.ReLU(True)]
    for _ in range(spec.depth - 2):
        layers += [nn.Conv2d(b, b, 3, 1, 1), *_norm(spec, b), nn.ReLU(True)]
    layers.append(nn.Conv2d(b, spec.output_channels, 3, 1, 1))
    if spec.input_channels != spec.output_channels:
        raise InvalidArgument("cgan generator skip needs input_channels == output_channels")
    net = SkipGenerator(nn.Sequential(*layers))
    init_weights(net, seed)
    return NetHandle(spec, net)


def build_cgan_discriminator(spec: NetSpec, seed: int | None = None) -> NetHandle:
    """Discriminator over the channel concatenation (condition, candidate).

    ``spec.input_channels`` is the channel count of one image; the first layer
    takes twice that.
    """
    spec.validate("cgan_discriminator")
    net = _patch_stack(spec, 2 * spec.input_channels, (2, 2, 2, 1, 1))
    init_weights(net, seed)
    return NetHandle(spec, net)


BUILDERS = {
    "cycle_generator": build_cycle_generator,
    "patch_discriminator": build_patch_discriminator,
    "cgan_generator": build_cgan_generator,
    "cgan_discriminator": build_cgan_discriminator,
}


def build(spec: NetSpec, seed: int | None = None) -> NetHandle:
    spec.validate()
    return BUILDERS[spec.role](spec, seed)


# -- closed forms ------------------------------------------------------------


def _conv_params(k, cin, cout):
    return k * k * cin * cout + cout


def parameter_count(spec: NetSpec) -> int:
    """Trainable parameter count per role; instance norm carries no parameters."""
    spec.validate()
    b, cin, cout = spec.base_width, spec.input_channels, spec.output_channels
    if spec.role == "cycle_generator":
        return (_conv_params(7, cin, b) + _conv_params(3, b, 2 * b) + _conv_params(3, 2 * b, 4 * b)
                + spec.res_blocks * 2 * _conv_params(3, 4 * b, 4 * b)
                + _conv_params(3, 4 * b, 2 * b) + _conv_params(3, 2 * b, b) + _conv_params(7, b, cout))
    if spec.role == "cgan_generator":
        return _conv_params(3, cin, b) + (spec.depth - 2) * _conv_params(3, b, b) + _conv_params(3, b, cout)
    first = cin if spec.role == "patch_discriminator" else 2 * cin
    widths = [first, b, 2 * b, 4 * b, 8 * b, 1]
    return sum(_conv_params(4, a, c) for a, c in zip(widths[:-1], widths[1:]))


PATCH_LAYERS = ((4, 2, 1), (4, 2, 1), (4, 2, 1), (4, 1, 1), (4, 1, 1))


def output_size(n: int, layers=PATCH_LAYERS) -> list[int]:
    """Spatial size after each (kernel, stride, padding) layer."""
    sizes = []
    for k, s, p in layers:
        n = (n - k + 2 * p) // s + 1
        sizes.append(n)
    return sizes


def receptive_field(layers=PATCH_LAYERS) -> int:
    r = 1
    for k, s, _ in reversed(layers):
        r = r * s + (k - s)
    return r


# -- gradients ---------------------------------------------------------------


def gradients(net: NetHandle, loss: Callable[[NetHandle], torch.Tensor] | torch.Tensor) -> dict[str, np.ndarray]:
    """d(loss)/d(parameter) for every named parameter of ``net``.

    ``loss`` is either a scalar tensor already computed from ``net`` or a
    callable taking the handle and returning one. Constant losses give zero
    gradients.
    """
    value = loss(net) if callable(loss) else loss
    if not isinstance(value, torch.Tensor) or value.numel() != 1:
        raise UnsupportedGraph("loss must be a scalar tensor")
    named = list(net.module.named_parameters())
    if not value.requires_grad:
        return {k: np.zeros(tuple(p.shape)) for k, p in named}
    try:
        grads = torch.autograd.grad(value.reshape(()), [p for _, p in named], allow_unused=True)
    except RuntimeError as exc:
        raise UnsupportedGraph(str(exc)) from exc
    return {
        k: (np.zeros(tuple(p.shape)) if g is None else g.detach().cpu().numpy().copy())
        for (k, p), g in zip(named, grads)
    }


# -- checkpoint files -----------------------------------------------------------


def write_npz(path, arrays: dict[str, np.ndarray]) -> None:
    """Like ``np.savez`` but with fixed zip timestamps, so equal arrays give equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(arrays[name]), allow_pickle=False)


def save_nets(nets: dict[str, NetHandle], directory, extra: dict | None = None) -> Path:
    """Write ``params.npz`` (keys ``<role name>/<param>``) and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays, entries = {}, {}
    for name, h in nets.items():
        named = h.named_arrays()
        for k, v in named.items():
            arrays[f"{name}/{k}"] = v
        entries[name] = {
            "role": h.spec.role,
            "spec": asdict(h.spec),
            "parameters": {k: list(v.shape) for k, v in named.items()},
            "dtype": str(next(iter(named.values())).dtype),
        }
    write_npz(directory / "params.npz", arrays)
    created = {"torch": torch.__version__, "numpy": np.__version__}
    manifest = {"nets": entries, "created_with": created, **(extra or {})}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_nets(directory) -> dict[str, NetHandle]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    nets = {}
    with np.load(directory / "params.npz") as data:
        for name, entry in manifest["nets"].items():
            spec = NetSpec(**entry["spec"])
            h = build(spec).to(getattr(torch, entry["dtype"]))
            h.load_arrays({k: data[f"{name}/{k}"] for k in entry["parameters"]})
            nets[name] = h
    return nets

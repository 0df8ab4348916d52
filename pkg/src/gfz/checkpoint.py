"""Binary model checkpoints (magic "GFZC").

Layout, little-endian throughout: magic, version u16, architecture tag,
class_count u16, in_channels u8, input_dim u32 (0 for conv nets), width
list, then a layer manifest (name + per-parameter shapes) followed by the
raw float32 parameter arrays in manifest order. Save/load round-trips
bit-exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .nn import ConfigError, Model, build_mini_resnet, build_mlp

_MAGIC = b"GFZC"
_VERSION = 1


def _write_str(fh, text: str) -> None:
    raw = text.encode("ascii")
    if len(raw) > 255:
        raise ConfigError(f"checkpoint: string too long: {text!r}")
    fh.write(struct.pack("<B", len(raw)))
    fh.write(raw)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<B", fh.read(1))
    return fh.read(n).decode("ascii")


def save_checkpoint(path, model: Model) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        _write_str(fh, model.arch)
        input_dim = int(model.meta.get("input_dim", 0))
        in_channels = int(model.meta.get("in_channels", 0))
        fh.write(struct.pack("<HBI", model.class_count, in_channels, input_dim))
        widths = model.meta["widths"]
        fh.write(struct.pack("<B", len(widths)))
        fh.write(struct.pack(f"<{len(widths)}H", *widths))
        fh.write(struct.pack("<H", len(model.layers)))
        for layer in model.layers:
            _write_str(fh, layer.name)
            fh.write(struct.pack("<B", len(layer.params)))
            for p in layer.params:
                fh.write(struct.pack("<B", p.data.ndim))
                fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        for layer in model.layers:
            for p in layer.params:
                fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ConfigError(f"checkpoint: bad magic {magic!r}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != _VERSION:
            raise ConfigError(f"checkpoint: unsupported version {version}")
        arch = _read_str(fh)
        class_count, in_channels, input_dim = struct.unpack("<HBI", fh.read(7))
        (n_widths,) = struct.unpack("<B", fh.read(1))
        widths = list(struct.unpack(f"<{n_widths}H", fh.read(2 * n_widths)))

        if arch == "mini-resnet":
            model = build_mini_resnet(class_count, widths, seed=0, in_channels=in_channels)
        elif arch == "mlp":
            model = build_mlp(class_count, widths, input_dim=input_dim, seed=0)
        else:
            raise ConfigError(f"checkpoint: unknown architecture '{arch}'")

        (n_layers,) = struct.unpack("<H", fh.read(2))
        if n_layers != len(model.layers):
            raise ConfigError(f"checkpoint: layer count {n_layers} does not match "
                              f"rebuilt {arch} ({len(model.layers)})")
        manifest = []
        for layer in model.layers:
            name = _read_str(fh)
            (n_params,) = struct.unpack("<B", fh.read(1))
            if name != layer.name or n_params != len(layer.params):
                raise ConfigError(f"checkpoint: manifest mismatch at layer '{name}'")
            shapes = []
            for p in layer.params:
                (ndim,) = struct.unpack("<B", fh.read(1))
                shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
                if tuple(shape) != p.data.shape:
                    raise ConfigError(
                        f"checkpoint: shape {shape} does not match {p.data.shape} for '{p.name}'")
                shapes.append(shape)
            manifest.append(shapes)
        for layer, shapes in zip(model.layers, manifest):
            for p, shape in zip(layer.params, shapes):
                count = int(np.prod(shape))
                buf = fh.read(4 * count)
                if len(buf) != 4 * count:
                    raise ConfigError("checkpoint: truncated parameter data")
                p.data = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)
    return model

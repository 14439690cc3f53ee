"""Self-describing model container.

Layout: magic line "GAMINMDL1", a textual header (one line of global fields,
then one line per layer, then "end"), followed by raw little-endian float32
parameter arrays in layer order, weights before biases, row-major.
"""

from __future__ import annotations

import io
import numpy as np

from .model import Model
from .spec import ArchitectureSpec, LayerSpec

MAGIC = b"GAMINMDL1"


class ContainerError(ValueError):
    """Malformed, truncated or mislabeled model container."""


def _layer_line(layer: LayerSpec) -> str:
    fields = [layer.kind]
    if layer.kind == "dense":
        fields.append(f"units={layer.units}")
    elif layer.kind == "conv2d":
        fields += [f"filters={layer.filters}", f"kernel={layer.kernel}",
                   f"padding={layer.padding}"]
    elif layer.kind == "maxpool2d":
        fields.append(f"window={layer.window}")
    elif layer.kind == "dropout":
        fields.append(f"rate={layer.rate!r}")
    elif layer.kind == "reshape":
        fields.append("shape=" + "x".join(str(s) for s in layer.shape))
    fields.append(f"activation={layer.activation}")
    return " ".join(fields)


def _parse_layer_line(line: str, lineno: int) -> LayerSpec:
    parts = line.split()
    kind = parts[0]
    kw = {}
    for tok in parts[1:]:
        if "=" not in tok:
            raise ContainerError(f"header line {lineno}: bad token {tok!r}")
        key, val = tok.split("=", 1)
        if key in ("units", "filters", "kernel", "window"):
            kw[key] = int(val)
        elif key == "rate":
            kw[key] = float(val)
        elif key == "shape":
            kw[key] = tuple(int(s) for s in val.split("x"))
        elif key in ("activation", "padding"):
            kw[key] = val
        else:
            raise ContainerError(f"header line {lineno}: unknown field {key!r}")
    try:
        return LayerSpec(kind, **kw)
    except (ValueError, TypeError) as exc:
        raise ContainerError(f"header line {lineno}: {exc}") from exc


def to_bytes(model: Model) -> bytes:
    """Serialize a float32 model; round-trips bit-exactly."""
    if model.dtype != np.float32:
        raise ContainerError(
            f"container stores float32 parameters; model is {model.dtype} "
            "(convert with model.astype(np.float32))")
    spec = model.spec
    lines = [MAGIC.decode(),
             f"input_dim={spec.input_dim} output_dim={spec.output_dim} "
             f"seed={model.seed} layers={len(spec.layers)}"]
    lines += [_layer_line(l) for l in spec.layers]
    lines.append("end")
    buf = io.BytesIO()
    buf.write(("\n".join(lines) + "\n").encode())
    for p in model.params:
        if p is None:
            continue
        buf.write(np.ascontiguousarray(p[0], dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(p[1], dtype="<f4").tobytes())
    return buf.getvalue()


def from_bytes(data: bytes) -> Model:
    """Reconstruct a model; rejects corrupt streams with a position."""
    if not data:
        raise ContainerError("empty stream (expected magic 'GAMINMDL1' at offset 0)")
    if not data.startswith(MAGIC + b"\n"):
        got = data[:len(MAGIC)]
        raise ContainerError(
            f"bad magic {got!r} at offset 0, expected {MAGIC.decode()!r}")
    end = data.find(b"\nend\n")
    if end < 0:
        raise ContainerError("unterminated header: no 'end' line found")
    header = data[:end].decode()
    body_off = end + len(b"\nend\n")
    lines = header.split("\n")
    globals_kw = {}
    for tok in lines[1].split():
        key, val = tok.split("=", 1)
        globals_kw[key] = int(val)
    for key in ("input_dim", "output_dim", "seed", "layers"):
        if key not in globals_kw:
            raise ContainerError(f"header line 2: missing field {key!r}")
    n_layers = globals_kw["layers"]
    layer_lines = lines[2:]
    if len(layer_lines) != n_layers:
        raise ContainerError(
            f"header declares {n_layers} layers but lists {len(layer_lines)}")
    layers = [_parse_layer_line(l, i + 3) for i, l in enumerate(layer_lines)]
    try:
        spec = ArchitectureSpec(globals_kw["input_dim"], globals_kw["output_dim"],
                                tuple(layers))
    except ValueError as exc:
        raise ContainerError(f"inconsistent architecture in header: {exc}") from exc

    params = []
    off = body_off
    for pshape in spec.param_shapes():
        if pshape is None:
            params.append(None)
            continue
        wshape, bshape = pshape
        arrs = []
        for shape in (wshape, bshape):
            nbytes = int(np.prod(shape)) * 4
            chunk = data[off:off + nbytes]
            if len(chunk) != nbytes:
                raise ContainerError(
                    f"truncated stream: expected {nbytes} bytes at offset {off}, "
                    f"got {len(chunk)}")
            arrs.append(np.frombuffer(chunk, dtype="<f4").reshape(shape).copy())
            off += nbytes
        params.append((arrs[0], arrs[1]))
    if off != len(data):
        raise ContainerError(f"{len(data) - off} trailing bytes at offset {off}")
    return Model(spec, seed=globals_kw["seed"], dtype=np.float32, params=params)


def save(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(model))


def load(path) -> Model:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())

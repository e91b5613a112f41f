"""Self-contained ONNX graph loader and evaluator.

Parses the protobuf wire format directly (no onnx/onnxruntime dependency)
and evaluates the operator subset that image-classification feature
extractors use: Conv, BatchNormalization, Relu, MaxPool, AveragePool,
GlobalAveragePool, Add, Flatten, Reshape, Gemm, MatMul, Constant and
Identity.  Inference runs in float32 on NumPy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import BackendError, FormatError

# Protobuf wire types
_VARINT, _I64, _LEN, _I32 = 0, 1, 2, 5

# TensorProto.DataType values we support
_FLOAT, _INT64 = 1, 7


def _read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise FormatError("truncated varint", offset=pos)
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise FormatError("malformed varint", offset=pos)


def _signed(value: int) -> int:
    value &= (1 << 64) - 1
    return value - (1 << 64) if value >= (1 << 63) else value


def _fields(buf: bytes) -> dict[int, list[tuple[int, object]]]:
    """Decode one message into {field_number: [(wire_type, payload), ...]}."""
    out: dict[int, list[tuple[int, object]]] = {}
    pos = 0
    while pos < len(buf):
        key, pos = _read_varint(buf, pos)
        field, wtype = key >> 3, key & 7
        if wtype == _VARINT:
            value, pos = _read_varint(buf, pos)
        elif wtype == _I64:
            value, pos = buf[pos:pos + 8], pos + 8
        elif wtype == _LEN:
            length, pos = _read_varint(buf, pos)
            if pos + length > len(buf):
                raise FormatError("truncated length-delimited field", offset=pos)
            value, pos = buf[pos:pos + length], pos + length
        elif wtype == _I32:
            value, pos = buf[pos:pos + 4], pos + 4
        else:
            raise FormatError(f"unsupported wire type {wtype}", offset=pos)
        out.setdefault(field, []).append((wtype, value))
    return out


def _ints(entries) -> list[int]:
    """Repeated int64 field, packed or not, as signed Python ints."""
    values = []
    for wtype, payload in entries:
        if wtype == _VARINT:
            values.append(_signed(payload))
        else:  # packed
            pos = 0
            while pos < len(payload):
                v, pos = _read_varint(payload, pos)
                values.append(_signed(v))
    return values


def _floats(entries) -> np.ndarray:
    values = []
    for wtype, payload in entries:
        if wtype == _I32:
            values.append(np.frombuffer(payload, "<f4"))
        else:  # packed
            values.append(np.frombuffer(payload, "<f4"))
    return np.concatenate(values) if values else np.zeros(0, np.float32)


def _tensor(buf: bytes) -> np.ndarray:
    f = _fields(buf)
    dims = _ints(f.get(1, []))
    dtype = f[2][0][1] if 2 in f else _FLOAT
    if 9 in f:  # raw_data
        raw = b"".join(v for _, v in f[9])
        if dtype == _FLOAT:
            arr = np.frombuffer(raw, "<f4")
        elif dtype == _INT64:
            arr = np.frombuffer(raw, "<i8")
        else:
            raise FormatError(f"unsupported tensor data type {dtype}")
    elif dtype == _FLOAT:
        arr = _floats(f.get(4, []))
    elif dtype == _INT64:
        arr = np.array(_ints(f.get(7, [])), dtype=np.int64)
    else:
        raise FormatError(f"unsupported tensor data type {dtype}")
    return arr.reshape(dims) if dims else arr.reshape(())


def _string(entries) -> str:
    return entries[0][1].decode("utf-8")


@dataclass
class _Node:
    op: str
    inputs: list[str]
    outputs: list[str]
    attrs: dict[str, object]


def _attr_value(buf: bytes):
    f = _fields(buf)
    if 2 in f:  # f
        return float(np.frombuffer(f[2][0][1], "<f4")[0])
    if 3 in f:  # i
        return _signed(f[3][0][1])
    if 5 in f:  # t
        return _tensor(f[5][0][1])
    if 7 in f:  # floats
        return [float(x) for x in _floats(f[7])]
    if 8 in f:  # ints
        return _ints(f[8])
    if 4 in f:  # s
        return f[4][0][1].decode("utf-8", "replace")
    return None


def _node(buf: bytes) -> _Node:
    f = _fields(buf)
    attrs = {}
    for _, a in f.get(5, []):
        af = _fields(a)
        if 1 in af:
            attrs[_string(af[1])] = _attr_value(a)
    return _Node(
        op=_string(f[4]) if 4 in f else "",
        inputs=[v.decode() for _, v in f.get(1, [])],
        outputs=[v.decode() for _, v in f.get(2, [])],
        attrs=attrs,
    )


def _value_info_dims(buf: bytes) -> tuple[str, list[int]]:
    """(name, dims) from a ValueInfoProto; symbolic dims come back as 0."""
    f = _fields(buf)
    name = _string(f[1]) if 1 in f else ""
    dims: list[int] = []
    if 2 in f:
        tf = _fields(f[2][0][1])
        if 1 in tf:  # tensor_type
            tt = _fields(tf[1][0][1])
            if 2 in tt:  # shape
                sh = _fields(tt[2][0][1])
                for _, dim_buf in sh.get(1, []):
                    df = _fields(dim_buf)
                    dims.append(_signed(df[1][0][1]) if 1 in df else 0)
    return name, dims


class OnnxGraph:
    """Parsed graph: ordered nodes, initializers, single input and output."""

    def __init__(self, nodes, initializers, input_name, input_dims, output_name):
        self.nodes = nodes
        self.initializers = initializers
        self.input_name = input_name
        self.input_dims = input_dims  # (C, H, W), batch axis dropped
        self.output_name = output_name

    def run(self, x: np.ndarray) -> np.ndarray:
        values = dict(self.initializers)
        values[self.input_name] = np.asarray(x, dtype=np.float32)
        for node in self.nodes:
            _EVALUATORS.get(node.op, _unsupported)(node, values)
        try:
            return values[self.output_name]
        except KeyError:
            raise BackendError(
                f"graph produced no value named {self.output_name!r}"
            ) from None


def load_graph(path) -> OnnxGraph:
    """Parse an ONNX model file into an executable :class:`OnnxGraph`."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read model file {path}: {exc}") from None
    model = _fields(data)
    if 7 not in model:
        raise FormatError(f"{path}: not an ONNX model (no graph present)", offset=0)
    graph = _fields(model[7][0][1])
    initializers = {}
    for _, tbuf in graph.get(5, []):
        tf = _fields(tbuf)
        name = _string(tf[8]) if 8 in tf else ""
        initializers[name] = _tensor(tbuf)
    inputs = [_value_info_dims(buf) for _, buf in graph.get(11, [])]
    inputs = [(n, d) for n, d in inputs if n not in initializers]
    outputs = [_value_info_dims(buf) for _, buf in graph.get(12, [])]
    if len(inputs) != 1 or len(outputs) != 1:
        raise FormatError(
            f"{path}: expected exactly one graph input and output, "
            f"found {len(inputs)} and {len(outputs)}"
        )
    name, dims = inputs[0]
    if len(dims) == 4:
        dims = dims[1:]  # drop the batch axis
    nodes = [_node(buf) for _, buf in graph.get(1, [])]
    return OnnxGraph(nodes, initializers, name, tuple(dims), outputs[0][0])


def _unsupported(node: _Node, values) -> None:
    raise BackendError(f"unsupported ONNX operator {node.op!r}")


def _pool_view(x, kernel, strides, pads, fill):
    kh, kw = kernel
    sh, sw = strides
    pt, pl, pb, pr = pads
    if any(pads):
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)),
                   constant_values=fill)
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return view[:, :, ::sh, ::sw]


def _op_conv(node, values):
    x = values[node.inputs[0]]
    w = values[node.inputs[1]]
    bias = values[node.inputs[2]] if len(node.inputs) > 2 else None
    if node.attrs.get("group", 1) != 1:
        raise BackendError("grouped convolution is not supported")
    if any(d != 1 for d in node.attrs.get("dilations", [1, 1])):
        raise BackendError("dilated convolution is not supported")
    kh, kw = node.attrs.get("kernel_shape", w.shape[2:])
    strides = node.attrs.get("strides", [1, 1])
    pads = node.attrs.get("pads", [0, 0, 0, 0])
    view = _pool_view(x, (kh, kw), strides, pads, 0.0)
    out = np.tensordot(view, w, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)).astype(np.float32)
    if bias is not None:
        out += bias[None, :, None, None]
    values[node.outputs[0]] = out


def _op_batchnorm(node, values):
    x, scale, b, mean, var = (values[name] for name in node.inputs[:5])
    eps = node.attrs.get("epsilon", 1e-5)
    shape = (1, -1) + (1,) * (x.ndim - 2)
    inv = (scale / np.sqrt(var + eps)).astype(np.float32)
    values[node.outputs[0]] = x * inv.reshape(shape) + \
        (b - mean * inv).astype(np.float32).reshape(shape)


def _op_maxpool(node, values):
    x = values[node.inputs[0]]
    kernel = node.attrs["kernel_shape"]
    strides = node.attrs.get("strides", [1, 1])
    pads = node.attrs.get("pads", [0, 0, 0, 0])
    view = _pool_view(x, kernel, strides, pads, -np.inf)
    values[node.outputs[0]] = view.max(axis=(4, 5)).astype(np.float32)


def _op_avgpool(node, values):
    x = values[node.inputs[0]]
    if any(node.attrs.get("pads", [0, 0, 0, 0])):
        raise BackendError("padded AveragePool is not supported")
    kernel = node.attrs["kernel_shape"]
    strides = node.attrs.get("strides", [1, 1])
    view = _pool_view(x, kernel, strides, [0, 0, 0, 0], 0.0)
    values[node.outputs[0]] = view.mean(axis=(4, 5)).astype(np.float32)


def _op_gemm(node, values):
    a = values[node.inputs[0]]
    b = values[node.inputs[1]]
    if node.attrs.get("transA", 0):
        a = a.T
    if node.attrs.get("transB", 0):
        b = b.T
    out = node.attrs.get("alpha", 1.0) * (a @ b)
    if len(node.inputs) > 2:
        out = out + node.attrs.get("beta", 1.0) * values[node.inputs[2]]
    values[node.outputs[0]] = out.astype(np.float32)


def _op_reshape(node, values):
    x = values[node.inputs[0]]
    shape = [int(s) for s in values[node.inputs[1]]]
    shape = [x.shape[i] if s == 0 else s for i, s in enumerate(shape)]
    values[node.outputs[0]] = x.reshape(shape)


_EVALUATORS = {
    "Conv": _op_conv,
    "BatchNormalization": _op_batchnorm,
    "Relu": lambda n, v: v.__setitem__(n.outputs[0], np.maximum(v[n.inputs[0]], 0)),
    "MaxPool": _op_maxpool,
    "AveragePool": _op_avgpool,
    "GlobalAveragePool": lambda n, v: v.__setitem__(
        n.outputs[0], v[n.inputs[0]].mean(axis=(2, 3), keepdims=True)),
    "Add": lambda n, v: v.__setitem__(
        n.outputs[0], v[n.inputs[0]] + v[n.inputs[1]]),
    "Flatten": lambda n, v: v.__setitem__(
        n.outputs[0], v[n.inputs[0]].reshape(v[n.inputs[0]].shape[0], -1)),
    "Reshape": _op_reshape,
    "Gemm": _op_gemm,
    "MatMul": lambda n, v: v.__setitem__(
        n.outputs[0], (v[n.inputs[0]] @ v[n.inputs[1]]).astype(np.float32)),
    "Constant": lambda n, v: v.__setitem__(n.outputs[0], n.attrs["value"]),
    "Identity": lambda n, v: v.__setitem__(n.outputs[0], v[n.inputs[0]]),
}

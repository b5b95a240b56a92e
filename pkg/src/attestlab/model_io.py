"""Binary model container.

Layout (all little-endian):

    magic "LAM1" | u16 format_version | u16 n_sections
    section := u8 tag | u64 payload_len | payload

Section tags: 1 = float model, 2 = quantized model, 3 = calibration record
(UTF-8 key=value lines), 4 = run metadata (UTF-8 key=value lines).

Float payload: arch, input_dim, dropout, optional training metadata, then
per-layer dims and row-major float32 weight/bias blobs. Quantized payload:
int8 weights, float32 scales, int32 biases, per-boundary activation scale and
zero-point, and the sha256 digest of the source float payload. Quantized
tensors and scales round-trip bit-identically.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .autoenc import (AutoencoderModel, Conv1dLayer, DenseLayer, FlattenLayer,
                      MaxPool1dLayer, TrainMeta)
from .quantize import (ActivationQuant, QConv, QDense, QFlatten, QPool,
                       QuantizedModel)
from .threshold import CalibrationResult

MAGIC = b"LAM1"
FORMAT_VERSION = 1

SEC_FLOAT = 1
SEC_QUANT = 2
SEC_CALIBRATION = 3
SEC_META = 4

_ARCH_CODE = {"M1": 1, "M2": 2, "M3": 3}
_ARCH_NAME = {v: k for k, v in _ARCH_CODE.items()}
_KIND_CODE = {"dense": 1, "conv": 2, "pool": 3, "flatten": 4}
_ACT_CODE = {"linear": 0, "relu": 1}
_ACT_NAME = {v: k for k, v in _ACT_CODE.items()}


class ContainerError(ValueError):
    pass


def _pack(fmt: str, *vals) -> bytes:
    return struct.pack("<" + fmt, *vals)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize("<" + fmt)
        if self.pos + size > len(self.buf):
            raise ContainerError("truncated container payload")
        vals = struct.unpack_from("<" + fmt, self.buf, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]

    def blob(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ContainerError("truncated container payload")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, dtype, count: int) -> np.ndarray:
        raw = self.blob(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).copy()


def float_payload(model: AutoencoderModel) -> bytes:
    out = io.BytesIO()
    out.write(_pack("BIfb", _ARCH_CODE[model.arch], model.input_dim,
                    model.dropout_rate, model.dropout_after))
    meta = model.train_meta
    out.write(_pack("B", 1 if meta is not None else 0))
    if meta is not None:
        out.write(_pack("IIfQd", meta.epochs, meta.batch_size,
                        meta.learning_rate, meta.seed, meta.final_train_mse))
    out.write(_pack("H", len(model.layers)))
    for layer in model.layers:
        if layer.kind == "dense":
            out.write(_pack("BB", _KIND_CODE["dense"],
                            _ACT_CODE[layer.activation]))
            n_in, n_out = layer.w.shape
            out.write(_pack("II", n_in, n_out))
            out.write(np.ascontiguousarray(layer.w, dtype="<f4").tobytes())
            out.write(np.ascontiguousarray(layer.b, dtype="<f4").tobytes())
        elif layer.kind == "conv":
            out.write(_pack("BB", _KIND_CODE["conv"],
                            _ACT_CODE[layer.activation]))
            k, c_in, c_out = layer.w.shape
            out.write(_pack("III", k, c_in, c_out))
            out.write(np.ascontiguousarray(layer.w, dtype="<f4").tobytes())
            out.write(np.ascontiguousarray(layer.b, dtype="<f4").tobytes())
        elif layer.kind == "pool":
            out.write(_pack("B", _KIND_CODE["pool"]))
            out.write(_pack("I", layer.width))
        elif layer.kind == "flatten":
            out.write(_pack("B", _KIND_CODE["flatten"]))
        else:
            raise ContainerError("unsupported layer kind %r" % layer.kind)
    return out.getvalue()


def parse_float_payload(buf: bytes) -> AutoencoderModel:
    r = _Reader(buf)
    arch_code, input_dim, dropout, drop_after = r.take("BIfb")
    if arch_code not in _ARCH_NAME:
        raise ContainerError("unknown architecture code %d" % arch_code)
    meta = None
    if r.take("B"):
        epochs, batch, lr, seed, final_mse = r.take("IIfQd")
        meta = TrainMeta(epochs=epochs, batch_size=batch,
                         learning_rate=float(lr), seed=seed,
                         final_train_mse=float(final_mse))
    layers = []
    for _ in range(r.take("H")):
        kind = r.take("B")
        if kind == _KIND_CODE["dense"]:
            act = _ACT_NAME[r.take("B")]
            n_in, n_out = r.take("II")
            w = r.array("<f4", n_in * n_out).astype(np.float64) \
                .reshape(n_in, n_out)
            b = r.array("<f4", n_out).astype(np.float64)
            layers.append(DenseLayer(w, b, act))
        elif kind == _KIND_CODE["conv"]:
            act = _ACT_NAME[r.take("B")]
            k, c_in, c_out = r.take("III")
            w = r.array("<f4", k * c_in * c_out).astype(np.float64) \
                .reshape(k, c_in, c_out)
            b = r.array("<f4", c_out).astype(np.float64)
            layers.append(Conv1dLayer(w, b, act))
        elif kind == _KIND_CODE["pool"]:
            layers.append(MaxPool1dLayer(r.take("I")))
        elif kind == _KIND_CODE["flatten"]:
            layers.append(FlattenLayer())
        else:
            raise ContainerError("unknown layer kind code %d" % kind)
    return AutoencoderModel(arch=_ARCH_NAME[arch_code], input_dim=input_dim,
                            layers=layers, dropout_rate=float(dropout),
                            dropout_after=drop_after, train_meta=meta)


def quant_payload(qmodel: QuantizedModel) -> bytes:
    out = io.BytesIO()
    out.write(_pack("BI", _ARCH_CODE[qmodel.arch], qmodel.input_dim))
    if len(qmodel.source_digest) != 32:
        raise ContainerError("source digest must be 32 bytes")
    out.write(qmodel.source_digest)
    out.write(_pack("fb", qmodel.input_q.scale, qmodel.input_q.zero_point))
    out.write(_pack("H", len(qmodel.layers)))
    for layer in qmodel.layers:
        if layer.kind in ("dense", "conv"):
            out.write(_pack("BB", _KIND_CODE[layer.kind],
                            _ACT_CODE[layer.activation]))
            if layer.kind == "dense":
                n_in, n_out = layer.wq.shape
                out.write(_pack("II", n_in, n_out))
            else:
                k, c_in, c_out = layer.wq.shape
                out.write(_pack("III", k, c_in, c_out))
            out.write(np.ascontiguousarray(layer.wq, dtype=np.int8).tobytes())
            out.write(_pack("f", layer.w_scale))
            out.write(np.ascontiguousarray(layer.bq, dtype="<i4").tobytes())
            out.write(_pack("f", layer.b_scale))
            out.write(_pack("fb", layer.out_q.scale, layer.out_q.zero_point))
        elif layer.kind == "pool":
            out.write(_pack("B", _KIND_CODE["pool"]))
            out.write(_pack("I", layer.width))
        elif layer.kind == "flatten":
            out.write(_pack("B", _KIND_CODE["flatten"]))
        else:
            raise ContainerError("unsupported layer kind %r" % layer.kind)
    return out.getvalue()


def parse_quant_payload(buf: bytes) -> QuantizedModel:
    r = _Reader(buf)
    arch_code, input_dim = r.take("BI")
    digest = r.blob(32)
    in_scale, in_zp = r.take("fb")
    input_q = ActivationQuant(scale=float(np.float32(in_scale)),
                              zero_point=int(in_zp))
    layers = []
    for _ in range(r.take("H")):
        kind = r.take("B")
        if kind in (_KIND_CODE["dense"], _KIND_CODE["conv"]):
            act = _ACT_NAME[r.take("B")]
            if kind == _KIND_CODE["dense"]:
                n_in, n_out = r.take("II")
                wq = r.array(np.int8, n_in * n_out).reshape(n_in, n_out)
                nb = n_out
            else:
                k, c_in, c_out = r.take("III")
                wq = r.array(np.int8, k * c_in * c_out).reshape(k, c_in, c_out)
                nb = c_out
            w_scale = float(np.float32(r.take("f")))
            bq = r.array("<i4", nb)
            b_scale = float(np.float32(r.take("f")))
            o_scale, o_zp = r.take("fb")
            out_q = ActivationQuant(scale=float(np.float32(o_scale)),
                                    zero_point=int(o_zp))
            cls = QDense if kind == _KIND_CODE["dense"] else QConv
            layers.append(cls(wq=wq, w_scale=w_scale, bq=bq, b_scale=b_scale,
                              activation=act, out_q=out_q))
        elif kind == _KIND_CODE["pool"]:
            layers.append(QPool(width=r.take("I")))
        elif kind == _KIND_CODE["flatten"]:
            layers.append(QFlatten())
        else:
            raise ContainerError("unknown layer kind code %d" % kind)
    return QuantizedModel(arch=_ARCH_NAME[arch_code], input_dim=input_dim,
                          input_q=input_q, layers=layers,
                          source_digest=digest)


def _kv_text(pairs: dict) -> bytes:
    lines = ["%s=%s" % (k, v) for k, v in pairs.items()]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_kv_text(buf: bytes) -> dict:
    out = {}
    for line in buf.decode("utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ContainerError("bad key=value line: %r" % line)
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def calibration_payload(result: CalibrationResult) -> bytes:
    return _kv_text({
        "gamma": repr(result.gamma), "p95": repr(result.p95),
        "p99": repr(result.p99), "tnr_target": repr(result.tnr_target),
        "t_opt": repr(result.t_opt),
        "achieved_tnr": repr(result.achieved_tnr),
        "exact": int(result.exact), "n_val": result.n_val,
        "iterations": result.iterations,
    })


def parse_calibration_payload(buf: bytes) -> CalibrationResult:
    d = _parse_kv_text(buf)
    try:
        return CalibrationResult(
            gamma=float(d["gamma"]), p95=float(d["p95"]), p99=float(d["p99"]),
            tnr_target=float(d["tnr_target"]), t_opt=float(d["t_opt"]),
            achieved_tnr=float(d["achieved_tnr"]),
            exact=bool(int(d["exact"])), n_val=int(d["n_val"]),
            iterations=int(d["iterations"]))
    except KeyError as e:
        raise ContainerError("calibration record missing %s" % e) from None


@dataclass
class Container:
    model: AutoencoderModel | None = None
    qmodel: QuantizedModel | None = None
    calibration: CalibrationResult | None = None
    meta: dict | None = None


def container_bytes(model: AutoencoderModel | None = None,
                    qmodel: QuantizedModel | None = None,
                    calibration: CalibrationResult | None = None,
                    meta: dict | None = None) -> bytes:
    sections = []
    if model is not None:
        sections.append((SEC_FLOAT, float_payload(model)))
    if qmodel is not None:
        sections.append((SEC_QUANT, quant_payload(qmodel)))
    if calibration is not None:
        sections.append((SEC_CALIBRATION, calibration_payload(calibration)))
    if meta is not None:
        sections.append((SEC_META, _kv_text(meta)))
    if not sections:
        raise ContainerError("refusing to write an empty container")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(_pack("HH", FORMAT_VERSION, len(sections)))
    for tag, payload in sections:
        out.write(_pack("BQ", tag, len(payload)))
        out.write(payload)
    return out.getvalue()


def parse_container(buf: bytes) -> Container:
    if buf[:4] != MAGIC:
        raise ContainerError("not a model container (bad magic)")
    r = _Reader(buf[4:])
    version, n_sections = r.take("HH")
    if version != FORMAT_VERSION:
        raise ContainerError("unsupported container version %d" % version)
    c = Container()
    for _ in range(n_sections):
        tag, length = r.take("BQ")
        payload = r.blob(length)
        if tag == SEC_FLOAT:
            c.model = parse_float_payload(payload)
        elif tag == SEC_QUANT:
            c.qmodel = parse_quant_payload(payload)
        elif tag == SEC_CALIBRATION:
            c.calibration = parse_calibration_payload(payload)
        elif tag == SEC_META:
            c.meta = _parse_kv_text(payload)
        else:
            raise ContainerError("unknown section tag %d" % tag)
    return c


def save_container(path, **kwargs) -> None:
    data = container_bytes(**kwargs)
    with open(path, "wb") as f:
        f.write(data)


def load_container(path) -> Container:
    with open(path, "rb") as f:
        return parse_container(f.read())

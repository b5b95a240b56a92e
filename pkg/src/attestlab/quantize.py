"""Post-training int8 quantization of the autoencoders.

Weights are per-tensor symmetric int8 (zero-point 0, range [-127, 127]);
activations are asymmetric int8 with scale and zero-point calibrated from
forward passes of the float model, ranges widened to include 0 so zero is
exactly representable; biases are int32 at scale input_scale * weight_scale.
Inference accumulates in int32/int64 and applies relu in the integer domain
by clamping at the zero-point. Rounding is half-away-from-zero throughout.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autoenc import AutoencoderModel, _forward

INT8_MIN, INT8_MAX = -128, 127
INT32_MIN, INT32_MAX = -(2 ** 31), 2 ** 31 - 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round halves away from zero (0.5 -> 1, -0.5 -> -1)."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class ActivationQuant:
    scale: float
    zero_point: int

    def quantize(self, x: np.ndarray) -> np.ndarray:
        q = round_half_away(np.asarray(x, dtype=np.float64) / self.scale) \
            + self.zero_point
        return np.clip(q, INT8_MIN, INT8_MAX).astype(np.int64)

    def dequantize(self, q: np.ndarray) -> np.ndarray:
        return (np.asarray(q, dtype=np.float64) - self.zero_point) * self.scale


@dataclass
class QDense:
    kind = "dense"
    wq: np.ndarray          # int8 (in, out)
    w_scale: float
    bq: np.ndarray          # int32 (out,)
    b_scale: float
    activation: str
    out_q: ActivationQuant


@dataclass
class QConv:
    kind = "conv"
    wq: np.ndarray          # int8 (k, c_in, c_out)
    w_scale: float
    bq: np.ndarray          # int32 (c_out,)
    b_scale: float
    activation: str
    out_q: ActivationQuant


@dataclass
class QPool:
    kind = "pool"
    width: int


@dataclass
class QFlatten:
    kind = "flatten"


@dataclass
class QuantizedModel:
    arch: str
    input_dim: int
    input_q: ActivationQuant
    layers: list
    source_digest: bytes  # sha256 of the float model payload


def _f32(x: float) -> float:
    return float(np.float32(x))


def _weight_scale(w: np.ndarray) -> float:
    m = float(np.max(np.abs(w))) if w.size else 0.0
    return _f32(m / 127.0) if m > 0.0 else 1.0


def _activation_quant(rmin: float, rmax: float) -> ActivationQuant:
    rmin = min(rmin, 0.0)
    rmax = max(rmax, 0.0)
    if rmax - rmin < 1e-12:
        return ActivationQuant(scale=1.0, zero_point=0)
    scale = _f32((rmax - rmin) / 255.0)
    zp = int(np.clip(round_half_away(INT8_MIN - rmin / scale),
                     INT8_MIN, INT8_MAX))
    return ActivationQuant(scale=scale, zero_point=zp)


def _quantize_params(w: np.ndarray, b: np.ndarray, in_scale: float):
    w_scale = _weight_scale(w)
    wq = np.clip(round_half_away(w / w_scale), -127, 127).astype(np.int8)
    b_scale = _f32(in_scale * w_scale)
    bq = np.clip(round_half_away(b / b_scale), INT32_MIN, INT32_MAX) \
        .astype(np.int32)
    return wq, w_scale, bq, b_scale


def quantize_model(model: AutoencoderModel,
                   calibration: np.ndarray) -> QuantizedModel:
    """Calibrate activation ranges on the given samples and quantize."""
    calibration = np.asarray(calibration, dtype=np.float64)
    if calibration.ndim != 2 or len(calibration) == 0:
        raise ValueError("calibration set must be a non-empty (n, l) matrix")
    if calibration.shape[1] != model.input_dim:
        raise ValueError("calibration width does not match model input_dim")
    if not np.isfinite(calibration).all():
        raise ValueError("calibration set contains non-finite values")

    # capture per-layer float activations
    h = calibration
    if model.layers and model.layers[0].kind == "conv":
        h = h[:, :, None]
    outputs = []
    for layer in model.layers:
        h, _ = layer.forward(h)
        outputs.append(h)

    input_q = _activation_quant(float(calibration.min()),
                                float(calibration.max()))
    qlayers = []
    cur = input_q
    for layer, out in zip(model.layers, outputs):
        if layer.kind == "dense" or layer.kind == "conv":
            out_q = _activation_quant(float(out.min()), float(out.max()))
            wq, w_scale, bq, b_scale = _quantize_params(layer.w, layer.b,
                                                        cur.scale)
            cls = QDense if layer.kind == "dense" else QConv
            qlayers.append(cls(wq=wq, w_scale=w_scale, bq=bq, b_scale=b_scale,
                               activation=layer.activation, out_q=out_q))
            cur = out_q
        elif layer.kind == "pool":
            qlayers.append(QPool(width=layer.width))
        elif layer.kind == "flatten":
            qlayers.append(QFlatten())
        else:
            raise ValueError("cannot quantize layer kind %r" % layer.kind)

    from . import model_io
    digest = hashlib.sha256(model_io.float_payload(model)).digest()
    return QuantizedModel(arch=model.arch, input_dim=model.input_dim,
                          input_q=input_q, layers=qlayers,
                          source_digest=digest)


def _requantize(acc: np.ndarray, in_scale: float, w_scale: float,
                out_q: ActivationQuant, activation: str) -> np.ndarray:
    mult = (in_scale * w_scale) / out_q.scale
    q = round_half_away(acc * mult) + out_q.zero_point
    q = np.clip(q, INT8_MIN, INT8_MAX)
    if activation == "relu":
        q = np.maximum(q, out_q.zero_point)
    return q.astype(np.int64)


def q_reconstruct(qmodel: QuantizedModel, x) -> np.ndarray:
    """Integer-domain inference; returns dequantized float output."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.shape[1] != qmodel.input_dim:
        raise ValueError("expected %d features, got %d"
                         % (qmodel.input_dim, arr.shape[1]))

    q = qmodel.input_q.quantize(arr)
    cur = qmodel.input_q
    if qmodel.layers and qmodel.layers[0].kind == "conv":
        q = q[:, :, None]
    for layer in qmodel.layers:
        if layer.kind == "dense":
            acc = (q - cur.zero_point) @ layer.wq.astype(np.int64) \
                + layer.bq.astype(np.int64)
            q = _requantize(acc, cur.scale, layer.w_scale, layer.out_q,
                            layer.activation)
            cur = layer.out_q
        elif layer.kind == "conv":
            k, c_in, c_out = layer.wq.shape
            pad = (k - 1) // 2
            n, length, _ = q.shape
            centered = q - cur.zero_point
            colsp = np.zeros((n, length + 2 * pad, c_in), dtype=np.int64)
            colsp[:, pad:pad + length, :] = centered
            cols = np.stack([colsp[:, i:i + length, :] for i in range(k)],
                            axis=2).reshape(n, length, k * c_in)
            acc = cols @ layer.wq.reshape(k * c_in, c_out).astype(np.int64) \
                + layer.bq.astype(np.int64)
            q = _requantize(acc, cur.scale, layer.w_scale, layer.out_q,
                            layer.activation)
            cur = layer.out_q
        elif layer.kind == "pool":
            n, length, c = q.shape
            if length % layer.width != 0:
                raise ValueError("pool input length not divisible")
            q = q.reshape(n, length // layer.width, layer.width, c).max(axis=2)
        elif layer.kind == "flatten":
            q = q.reshape(q.shape[0], -1)
        else:
            raise ValueError("unknown quantized layer kind %r" % layer.kind)

    out = cur.dequantize(q)
    return out[0] if single else out


@dataclass
class SizeReport:
    n_weights: int
    n_biases: int
    float_bytes: int
    quant_bytes: int
    reduction_factor: float


def size_report(model: AutoencoderModel, qmodel: QuantizedModel) -> SizeReport:
    """Serialized parameter payload sizes: float32 params vs int8 weights
    with int32 biases plus scale/zero-point metadata."""
    from . import model_io
    n_w = sum(layer.params().get("w", np.empty(0)).size
              for layer in model.layers)
    n_b = sum(layer.params().get("b", np.empty(0)).size
              for layer in model.layers)
    float_bytes = len(model_io.float_payload(model))
    quant_bytes = len(model_io.quant_payload(qmodel))
    return SizeReport(n_weights=int(n_w), n_biases=int(n_b),
                      float_bytes=float_bytes, quant_bytes=quant_bytes,
                      reduction_factor=float_bytes / quant_bytes)

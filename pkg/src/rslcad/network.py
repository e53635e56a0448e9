"""Layer stack description, whole-image passes, training step and checkpoints."""
from __future__ import annotations

import enum
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import ops
from .ops import ConvParams, FcParams, ShapeError

log = logging.getLogger(__name__)

Params = Union[ConvParams, FcParams, None]

CHECKPOINT_MAGIC = b"RSLCKPT\x00"
CHECKPOINT_VERSION = 1


class LayerKind(str, enum.Enum):
    CONV = "conv"
    POOL = "pool"
    FC = "fc"
    LOSS = "loss"


@dataclass(frozen=True)
class LayerSpec:
    """One row of the stack.

    ``dims`` is ``(kH, kW, out_channels)`` for conv, ``(pH, pW)`` for pool,
    ``(out_dim,)`` for fc and ``()`` for loss. ``padding`` only applies to conv.
    """

    kind: LayerKind
    dims: Tuple[int, ...] = ()
    padding: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        expected = {LayerKind.CONV: 3, LayerKind.POOL: 2, LayerKind.FC: 1, LayerKind.LOSS: 0}[self.kind]
        if len(self.dims) != expected or any(d < 1 for d in self.dims):
            raise ValueError(f"{self.kind.value} layer needs {expected} positive dims, got {self.dims}")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    def label(self) -> str:
        if self.kind is LayerKind.CONV:
            kh, kw, c = self.dims
            return f"C {kh}x{kw}x{c}" + (f" pad {self.padding}" if self.padding else "")
        if self.kind is LayerKind.POOL:
            return "S {}x{}".format(*self.dims)
        if self.kind is LayerKind.FC:
            return f"F ->{self.dims[0]}"
        return "L"


@dataclass(frozen=True)
class NetworkSpec:
    layers: Tuple[LayerSpec, ...]
    input_size: Tuple[int, int]
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        kinds = [layer.kind for layer in self.layers]
        if kinds.count(LayerKind.LOSS) != 1 or kinds[-1] is not LayerKind.LOSS:
            raise ValueError("the loss layer must appear exactly once, last")
        self.trace()

    def trace(self) -> List[Tuple[int, ...]]:
        """Propagate the input shape through every layer.

        Returns the output shape after each layer (loss layer excluded).
        Raises ShapeError naming the first layer whose input is too small.
        """
        shape: Tuple[int, ...] = (self.in_channels,) + self.input_size
        shapes = []
        for i, layer in enumerate(self.layers, start=1):
            where = f"layer {i} ({layer.label()}) receives {'x'.join(map(str, shape))}"
            if layer.kind is LayerKind.CONV:
                if len(shape) != 3:
                    raise ShapeError(f"{where}: convolution needs a feature map")
                kh, kw, c = layer.dims
                h, w = shape[1] + 2 * layer.padding, shape[2] + 2 * layer.padding
                if h < kh or w < kw:
                    raise ShapeError(f"{where}: extent smaller than kernel {kh}x{kw}")
                shape = (c, h - kh + 1, w - kw + 1)
            elif layer.kind is LayerKind.POOL:
                if len(shape) != 3:
                    raise ShapeError(f"{where}: pooling needs a feature map")
                ph, pw = layer.dims
                if shape[1] < ph or shape[2] < pw:
                    raise ShapeError(f"{where}: extent smaller than window {ph}x{pw}")
                shape = (shape[0], shape[1] // ph, shape[2] // pw)
            elif layer.kind is LayerKind.FC:
                shape = (layer.dims[0],)
            else:
                if shape != (2,):
                    raise ShapeError(f"{where}: loss layer needs 2 logits")
                continue
            shapes.append(shape)
        return shapes

    @property
    def flat_size(self) -> int:
        """Length of the vector entering the fully connected head."""
        shape: Tuple[int, ...] = (self.in_channels,) + self.input_size
        for layer, out in zip(self.layers, self.trace()):
            if layer.kind is LayerKind.FC:
                return int(np.prod(shape))
            shape = out
        raise ValueError("no fully connected layer")


def build_table1_network(input_size: Tuple[int, int] = (64, 64), conv_padding: str = "same") -> NetworkSpec:
    """The ten-row stack C5x5x32 S3 C5x5x32 S3 C5x5x64 S2 C5x5x64 S3 F2 L.

    ``conv_padding="same"`` pads every 5x5 convolution by 2 so a 64x64 input
    survives all four pooling stages; ``"valid"`` needs at least 178x178.
    """
    if conv_padding not in ("same", "valid"):
        raise ValueError("conv_padding must be 'same' or 'valid'")
    pad = 2 if conv_padding == "same" else 0
    rows = [
        LayerSpec(LayerKind.CONV, (5, 5, 32), pad),
        LayerSpec(LayerKind.POOL, (3, 3)),
        LayerSpec(LayerKind.CONV, (5, 5, 32), pad),
        LayerSpec(LayerKind.POOL, (3, 3)),
        LayerSpec(LayerKind.CONV, (5, 5, 64), pad),
        LayerSpec(LayerKind.POOL, (2, 2)),
        LayerSpec(LayerKind.CONV, (5, 5, 64), pad),
        LayerSpec(LayerKind.POOL, (3, 3)),
        LayerSpec(LayerKind.FC, (2,)),
        LayerSpec(LayerKind.LOSS),
    ]
    spec = NetworkSpec(tuple(rows), input_size)
    for layer, shape in zip(spec.layers, spec.trace()):
        log.debug("%-16s -> %s", layer.label(), "x".join(map(str, shape)))
    return spec


def build_tiny_network(input_size: Tuple[int, int] = (12, 12), channels: int = 4) -> NetworkSpec:
    """Small stack with the same layer kinds, used for whole-network gradient checks."""
    rows = [
        LayerSpec(LayerKind.CONV, (3, 3, channels), 1),
        LayerSpec(LayerKind.POOL, (2, 2)),
        LayerSpec(LayerKind.CONV, (3, 3, channels), 1),
        LayerSpec(LayerKind.POOL, (2, 2)),
        LayerSpec(LayerKind.CONV, (3, 3, channels), 1),
        LayerSpec(LayerKind.POOL, (3, 3)),
        LayerSpec(LayerKind.FC, (2,)),
        LayerSpec(LayerKind.LOSS),
    ]
    return NetworkSpec(tuple(rows), input_size)


@dataclass
class Model:
    spec: NetworkSpec
    params: List[Params]
    seed: int = 0

    def param_arrays(self) -> List[np.ndarray]:
        """Every parameter array in layer order (kernel/weights, then bias)."""
        out = []
        for p in self.params:
            if isinstance(p, ConvParams):
                out += [p.kernel, p.bias]
            elif isinstance(p, FcParams):
                out += [p.weights, p.bias]
        return out

    def copy(self) -> "Model":
        params: List[Params] = []
        for p in self.params:
            if isinstance(p, ConvParams):
                params.append(ConvParams(p.kernel.copy(), p.bias.copy()))
            elif isinstance(p, FcParams):
                params.append(FcParams(p.weights.copy(), p.bias.copy()))
            else:
                params.append(None)
        return Model(self.spec, params, self.seed)


def init_model(spec: NetworkSpec, seed: int = 0) -> Model:
    """Glorot-uniform weights, zero biases, drawn from ``default_rng(seed)``."""
    rng = np.random.default_rng(seed)
    params: List[Params] = []
    channels = spec.in_channels
    flat = spec.flat_size
    for layer in spec.layers:
        if layer.kind is LayerKind.CONV:
            kh, kw, out_c = layer.dims
            limit = np.sqrt(6.0 / (channels * kh * kw + out_c * kh * kw))
            kernel = rng.uniform(-limit, limit, size=(out_c, channels, kh, kw))
            params.append(ConvParams(kernel, np.zeros(out_c)))
            channels = out_c
        elif layer.kind is LayerKind.FC:
            out_dim = layer.dims[0]
            limit = np.sqrt(6.0 / (flat + out_dim))
            params.append(FcParams(rng.uniform(-limit, limit, size=(out_dim, flat)), np.zeros(out_dim)))
        else:
            params.append(None)
    return Model(spec, params, seed)


def _check_images(model: Model, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    expected = (model.spec.in_channels,) + model.spec.input_size
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError(f"image shape {images.shape[-3:]} does not match network input {expected}")
    return images


def _forward(model: Model, xb: np.ndarray, keep: bool):
    """Forward pass; returns ``(logits (N, 2), caches)``.

    Activations are channel-major ``(C, N, H, W)`` between layers. A conv
    directly followed by a pool is evaluated as conv -> pool -> +bias -> relu,
    which equals conv -> +bias -> relu -> pool exactly (max commutes with a
    per-channel shift and with relu) but touches 1/window as much memory.
    """
    layers, params = model.spec.layers, model.params
    caches = [None] * len(layers)
    x = np.ascontiguousarray(xb.transpose(1, 0, 2, 3))
    i = 0
    while i < len(layers):
        layer, p = layers[i], params[i]
        if layer.kind is LayerKind.CONV:
            fused = i + 1 < len(layers) and layers[i + 1].kind is LayerKind.POOL
            z, cols = ops.conv_forward_cm(x, p, layer.padding, add_bias=not fused)
            if fused:
                z, index = ops.pool_forward(z, layers[i + 1].dims)
                z += p.bias[:, None, None, None]
                caches[i + 1] = index
            caches[i] = (x.shape, cols, z, fused) if keep else None
            x = ops.relu(z)
            i += 2 if fused else 1
            continue
        if layer.kind is LayerKind.POOL:
            x, caches[i] = ops.pool_forward(x, layer.dims)
        elif layer.kind is LayerKind.FC:
            flat = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(x.shape[1], -1)
            caches[i] = (x.shape, flat)
            x = ops.fc_forward(flat, p)
        i += 1
    return x, caches


def _backward(model: Model, caches, dlogits: np.ndarray) -> List[Params]:
    layers, params = model.spec.layers, model.params
    grads: List[Params] = [None] * len(params)
    g = dlogits
    for i in range(len(layers) - 1, -1, -1):
        layer, p, cache = layers[i], params[i], caches[i]
        if layer.kind is LayerKind.CONV:
            x_shape, cols, z, fused = cache
            g = ops.relu_backward(z, g)
            if fused:
                g = ops.pool_backward(caches[i + 1], g)
            g, grads[i] = ops.conv_backward_cm(x_shape, p, g, cols, layer.padding, need_input_grad=i > 0)
        elif layer.kind is LayerKind.POOL:
            if not (i > 0 and layers[i - 1].kind is LayerKind.CONV):
                g = ops.pool_backward(cache, g)
        elif layer.kind is LayerKind.FC:
            (c, n, h, w), flat = cache
            g, grads[i] = ops.fc_backward(flat, p, g)
            g = np.ascontiguousarray(g.reshape(n, c, h, w).transpose(1, 0, 2, 3))
    return grads


def activation_pattern(model: Model, images: np.ndarray) -> Tuple[np.ndarray, ...]:
    """ReLU on/off masks and pool winner indices of a forward pass.

    Within a region where this pattern is constant the network is smooth in
    its parameters, so finite differences there are a valid oracle.
    """
    _, caches = _forward(model, _check_images(model, images), keep=True)
    parts = []
    for layer, cache in zip(model.spec.layers, caches):
        if layer.kind is LayerKind.CONV:
            parts.append(cache[2] > 0)
        elif layer.kind is LayerKind.POOL:
            parts.append(cache.flat_index)
    return tuple(parts)


def forward(model: Model, image: np.ndarray) -> np.ndarray:
    """Logits for one ``(1, H, W)`` image, or ``(N, 2)`` for a batch."""
    single = np.ndim(image) == 3
    logits, _ = _forward(model, _check_images(model, image), keep=False)
    return logits[0] if single else logits


CHUNK = 20


def _add_grads(total: List[Params], part: List[Params]) -> List[Params]:
    for i, g in enumerate(part):
        if g is None:
            continue
        if total[i] is None:
            total[i] = g
        elif isinstance(g, ConvParams):
            total[i].kernel += g.kernel
            total[i].bias += g.bias
        else:
            total[i].weights += g.weights
            total[i].bias += g.bias
    return total


def loss_and_gradients(model: Model, images: np.ndarray, labels: Sequence[int], chunk: int = CHUNK):
    """Mean softmax cross-entropy over the batch and its parameter gradients.

    Returns ``(mean_loss, grads, logits)`` where ``grads`` aligns with
    ``model.params``. The batch is processed ``chunk`` images at a time so the
    intermediates stay cache-resident; per-chunk gradients are summed in a
    fixed order, so results are deterministic for a given ``chunk``.
    """
    xb = _check_images(model, images)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ValueError("empty batch")
    if len(xb) != n:
        raise ShapeError(f"{len(xb)} images but {n} labels")
    grads: List[Params] = [None] * len(model.params)
    losses, all_logits = [], []
    for start in range(0, n, chunk):
        logits, caches = _forward(model, xb[start:start + chunk], keep=True)
        part_losses, dlogits = ops.softmax_cross_entropy(logits, labels[start:start + chunk])
        _add_grads(grads, _backward(model, caches, dlogits / n))
        losses.append(part_losses)
        all_logits.append(logits)
    return float(np.concatenate(losses).mean()), grads, np.concatenate(all_logits)


def train_step(model: Model, images: np.ndarray, labels: Sequence[int], learning_rate: float):
    """One forward/backward/SGD update on a batch, gradients averaged.

    The model is updated in place. Returns ``(model, batch_error_rate, mean_loss)``;
    the error rate uses the logits computed before the update.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty batch")
    if np.any((labels != 0) & (labels != 1)):
        raise ValueError(f"labels must be 0 or 1, got {sorted(set(labels.tolist()))}")
    loss, grads, logits = loss_and_gradients(model, images, labels)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    error_rate = float(np.count_nonzero(_argmax(logits) != labels)) / len(labels)
    for p, g in zip(model.params, grads):
        if isinstance(p, ConvParams):
            p.kernel = ops.sgd_update(p.kernel, g.kernel, learning_rate)
            p.bias = ops.sgd_update(p.bias, g.bias, learning_rate)
        elif isinstance(p, FcParams):
            p.weights = ops.sgd_update(p.weights, g.weights, learning_rate)
            p.bias = ops.sgd_update(p.bias, g.bias, learning_rate)
    if not all(np.isfinite(a).all() for a in model.param_arrays()):
        raise FloatingPointError("parameters became non-finite after the update")
    return model, error_rate, loss


def _argmax(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to class 0
    return np.argmax(logits, axis=-1)


def predict_logits(logits: np.ndarray) -> int:
    return int(_argmax(np.asarray(logits)))


def predict(model: Model, image: np.ndarray) -> int:
    """Class index of the larger logit; an exact tie predicts 0 (benign)."""
    return predict_logits(forward(model, image))


def predict_batch(model: Model, images: np.ndarray, chunk: int = 64) -> np.ndarray:
    images = _check_images(model, images)
    out = []
    for i in range(0, len(images), chunk):
        logits = _forward(model, images[i:i + chunk], keep=False)[0]
        if not np.isfinite(logits).all():
            raise FloatingPointError("non-finite logits")
        out.append(_argmax(logits))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# checkpoint container
#
#   8 bytes   magic  b"RSLCKPT\0"
#   1 byte    version
#   4 bytes   header length L (uint32, little endian)
#   L bytes   UTF-8 JSON header: input_size, in_channels, layers, seed
#   rest      float64 little endian, row-major: per parameterized layer,
#             kernel/weights then bias, in layer order
# ---------------------------------------------------------------------------


def save_checkpoint(model: Model, path: Union[str, Path]) -> None:
    header = {
        "input_size": list(model.spec.input_size),
        "in_channels": model.spec.in_channels,
        "layers": [
            {"kind": layer.kind.value, "dims": list(layer.dims), "padding": layer.padding}
            for layer in model.spec.layers
        ],
        "seed": model.seed,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(bytes([CHECKPOINT_VERSION]))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for arr in model.param_arrays():
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: Union[str, Path]) -> Model:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    if data[8] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {data[8]}")
    (hlen,) = struct.unpack("<I", data[9:13])
    header = json.loads(data[13:13 + hlen].decode("utf-8"))
    spec = NetworkSpec(
        tuple(LayerSpec(d["kind"], tuple(d["dims"]), d["padding"]) for d in header["layers"]),
        tuple(header["input_size"]),
        header["in_channels"],
    )
    model = init_model(spec, header["seed"])
    offset = 13 + hlen
    for arr in model.param_arrays():
        nbytes = arr.size * 8
        if offset + nbytes > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        arr[...] = np.frombuffer(data, dtype="<f8", count=arr.size, offset=offset).reshape(arr.shape)
        offset += nbytes
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return model

"""A small 3D convolutional segmenter with hand-written forward/backward passes.

Two 3x3x3 same-padded conv layers with ReLU feed a 1x1x1 head that emits
per-class logits at full resolution.  Internally activations live in a
zero-padded, voxel-major layout (flat voxel index, channel), where a
neighbor offset is a constant shift of the flat index; each kernel tap is
then one accumulating BLAS matrix product over contiguous views, and the
backward pass applies the exact adjoints, so parameter gradients match
finite differences to float64 accuracy.  ReLU passes gradient only where the
pre-activation is strictly positive (derivative 0 at exactly 0).
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np
from scipy.linalg.blas import dgemm

from .grid import ClassVolume, LabelVolume, ScalarVolume, Shape3, argmax_labels

__all__ = [
    "ConvLayer",
    "SegNet",
    "GradientSet",
    "Tape",
    "Workspace",
    "forward",
    "backward",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"BMAPNET1"


@dataclass
class ConvLayer:
    kernel: np.ndarray  # (out_c, in_c, k, k, k), k in {1, 3}
    bias: np.ndarray    # (out_c,)

    def __post_init__(self):
        if self.kernel.ndim != 5 or self.kernel.shape[2] not in (1, 3):
            raise ValueError(f"bad kernel shape {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ValueError("bias length must equal out-channel count")


def _glorot(rng: np.random.Generator, out_c: int, in_c: int, k: int) -> np.ndarray:
    vol = k * k * k
    limit = np.sqrt(6.0 / (in_c * vol + out_c * vol))
    return rng.uniform(-limit, limit, size=(out_c, in_c, k, k, k))


@dataclass
class SegNet:
    conv1: ConvLayer  # 1 -> C
    conv2: ConvLayer  # C -> C
    head: ConvLayer   # C -> K, 1x1x1
    hidden_channels: int
    num_classes: int
    rng_seed: int | None = None

    @classmethod
    def initialize(cls, num_classes: int, hidden_channels: int = 8, rng_seed: int = 0) -> "SegNet":
        if num_classes < 2:
            raise ValueError("need at least two classes")
        rng = np.random.default_rng(rng_seed)
        c = hidden_channels
        return cls(
            conv1=ConvLayer(_glorot(rng, c, 1, 3), np.zeros(c)),
            conv2=ConvLayer(_glorot(rng, c, c, 3), np.zeros(c)),
            head=ConvLayer(_glorot(rng, num_classes, c, 1), np.zeros(num_classes)),
            hidden_channels=c,
            num_classes=num_classes,
            rng_seed=rng_seed,
        )

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Named parameter tensors in checkpoint order."""
        return [
            ("conv1.kernel", self.conv1.kernel),
            ("conv1.bias", self.conv1.bias),
            ("conv2.kernel", self.conv2.kernel),
            ("conv2.bias", self.conv2.bias),
            ("head.kernel", self.head.kernel),
            ("head.bias", self.head.bias),
        ]


@dataclass
class GradientSet:
    conv1_kernel: np.ndarray
    conv1_bias: np.ndarray
    conv2_kernel: np.ndarray
    conv2_bias: np.ndarray
    head_kernel: np.ndarray
    head_bias: np.ndarray

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        return [
            ("conv1.kernel", self.conv1_kernel),
            ("conv1.bias", self.conv1_bias),
            ("conv2.kernel", self.conv2_kernel),
            ("conv2.bias", self.conv2_bias),
            ("head.kernel", self.head_kernel),
            ("head.bias", self.head_bias),
        ]

    def add(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(*[a + b for (_, a), (_, b) in zip(self.arrays(), other.arrays())])

    def scale(self, factor: float) -> "GradientSet":
        return GradientSet(*[a * factor for _, a in self.arrays()])


class _Geometry:
    """Padded-volume bookkeeping: flat size and the 27 neighbor shifts."""

    def __init__(self, shape: Shape3):
        self.shape = shape
        nz, ny, nx = shape.zyx
        self.zp, self.yp, self.xp = nz + 2, ny + 2, nx + 2
        self.m = self.zp * self.yp * self.xp
        self.taps = [
            ((dz + 1, dy + 1, dx + 1), (dz * self.yp + dy) * self.xp + dx)
            for dz in (-1, 0, 1)
            for dy in (-1, 0, 1)
            for dx in (-1, 0, 1)
        ]

    def zero_ring(self, buf: np.ndarray) -> None:
        v = buf.reshape(self.zp, self.yp, self.xp, buf.shape[1])
        v[0] = 0.0
        v[-1] = 0.0
        v[:, 0] = 0.0
        v[:, -1] = 0.0
        v[:, :, 0] = 0.0
        v[:, :, -1] = 0.0

    def embed(self, field: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """(C, nz, ny, nx) -> padded voxel-major (M, C)."""
        c = field.shape[0]
        if out is None:
            out = np.empty((self.m, c))
        buf = out.reshape(self.zp, self.yp, self.xp, c)
        buf[:] = 0.0
        buf[1:-1, 1:-1, 1:-1] = np.moveaxis(field, 0, -1)
        return out

    def extract(self, buf: np.ndarray) -> np.ndarray:
        """Padded voxel-major (M, C) -> contiguous (C, nz, ny, nx)."""
        c = buf.shape[1]
        v = buf.reshape(self.zp, self.yp, self.xp, c)[1:-1, 1:-1, 1:-1]
        return np.ascontiguousarray(np.moveaxis(v, -1, 0))


class Workspace:
    """Opt-in scratch reuse for repeated forward/backward at one volume shape.

    Freshly touched pages are the dominant cost of a pass at desk scale, so
    the training loop reuses one workspace across iterations.  A workspace
    hands out the same buffer for the same role every call: running a second
    forward with the same workspace invalidates the tape of the first, so use
    one workspace per in-flight forward/backward pair.
    """

    def __init__(self):
        self._slots: dict[str, np.ndarray] = {}

    def take(self, tag: str, shape: tuple[int, int], dtype=np.float64) -> np.ndarray:
        arr = self._slots.get(tag)
        if arr is None or arr.shape != shape or arr.dtype != dtype:
            arr = np.empty(shape, dtype=dtype)
            self._slots[tag] = arr
        return arr



# Flat voxel rows per block; source, gradient, and accumulator slabs stay
# cache-resident across the 27 kernel taps of one block.
_CHUNK = 8192


def _tap_matrices(layer: ConvLayer, geom: _Geometry):
    return [
        (np.ascontiguousarray(layer.kernel[:, :, kz, ky, kx]), (kz, ky, kx), d)
        for (kz, ky, kx), d in geom.taps
    ]


def _conv3_fwd(x: np.ndarray, layer: ConvLayer, geom: _Geometry, out: np.ndarray) -> np.ndarray:
    out[:] = layer.bias
    taps = _tap_matrices(layer, geom)
    for a in range(0, geom.m, _CHUNK):
        b = min(a + _CHUNK, geom.m)
        for w, _, d in taps:
            lo = max(a, max(0, -d))
            hi = min(b, geom.m - max(0, d))
            if lo >= hi:
                continue
            # out[lo:hi] += x[lo+d : hi+d] @ w.T on contiguous views
            dgemm(1.0, w.T, x[lo + d : hi + d].T, beta=1.0, c=out[lo:hi].T,
                  overwrite_c=1, trans_a=1)
    geom.zero_ring(out)
    return out


def _conv3_bwd(x, layer, dout, geom, dx):
    """dx is the preallocated input-gradient buffer, or None to skip it."""
    dkernel = np.zeros_like(layer.kernel)
    if dx is not None:
        dx[:] = 0.0
    taps = _tap_matrices(layer, geom)
    for a in range(0, geom.m, _CHUNK):
        b = min(a + _CHUNK, geom.m)
        for w, (kz, ky, kx), d in taps:
            lo = max(a, max(0, -d))
            hi = min(b, geom.m - max(0, d))
            if lo >= hi:
                continue
            dkernel[:, :, kz, ky, kx] += dout[lo:hi].T @ x[lo + d : hi + d]
            if dx is not None:
                # dx[lo+d : hi+d] += dout[lo:hi] @ w
                dgemm(1.0, w.T, dout[lo:hi].T, beta=1.0, c=dx[lo + d : hi + d].T, overwrite_c=1)
    if dx is not None:
        geom.zero_ring(dx)
    dbias = dout.sum(axis=0)
    return dkernel, dbias, dx


def _head_fwd(x: np.ndarray, layer: ConvLayer, geom: _Geometry, out: np.ndarray) -> np.ndarray:
    w = layer.kernel.reshape(layer.kernel.shape[:2])
    out[:] = layer.bias
    dgemm(1.0, np.ascontiguousarray(w).T, x.T, beta=1.0, c=out.T, overwrite_c=1, trans_a=1)
    geom.zero_ring(out)
    return out


def _head_bwd(x, layer, dout, dx):
    w = layer.kernel.reshape(layer.kernel.shape[:2])
    dkernel = (dout.T @ x).reshape(layer.kernel.shape)
    dbias = dout.sum(axis=0)
    np.matmul(dout, w, out=dx)
    return dkernel, dbias, dx


@dataclass
class Tape:
    """Activations recorded by forward, consumed by backward (padded layout).

    Post-activation values plus boolean masks of strictly positive
    pre-activations are enough for the exact ReLU adjoint.
    """

    net: SegNet
    geom: _Geometry
    x: np.ndarray
    h1: np.ndarray
    mask1: np.ndarray
    h2: np.ndarray
    mask2: np.ndarray


def forward(net: SegNet, image: ScalarVolume, ws: Workspace | None = None) -> tuple[ClassVolume, Tape]:
    """Run the network; returns logits plus the tape backward needs."""
    ws = ws if ws is not None else Workspace()
    geom = _Geometry(image.shape)
    c, k = net.hidden_channels, net.num_classes
    x = geom.embed(image.data[None], ws.take("x", (geom.m, 1)))
    h1 = _conv3_fwd(x, net.conv1, geom, ws.take("h1", (geom.m, c)))
    mask1 = np.greater(h1, 0.0, out=ws.take("mask1", (geom.m, c), bool))
    np.maximum(h1, 0.0, out=h1)
    h2 = _conv3_fwd(h1, net.conv2, geom, ws.take("h2", (geom.m, c)))
    mask2 = np.greater(h2, 0.0, out=ws.take("mask2", (geom.m, c), bool))
    np.maximum(h2, 0.0, out=h2)
    logits = geom.extract(_head_fwd(h2, net.head, geom, ws.take("out", (geom.m, k))))
    tape = Tape(net=net, geom=geom, x=x, h1=h1, mask1=mask1, h2=h2, mask2=mask2)
    return ClassVolume(image.shape, net.num_classes, logits), tape


def backward(net: SegNet, tape: Tape, loss_grad: ClassVolume, ws: Workspace | None = None) -> GradientSet:
    """Chain the loss's logits-gradient back to every parameter."""
    if tape.net is not net:
        raise ValueError("tape does not belong to this network")
    if loss_grad.num_classes != net.num_classes or loss_grad.shape != tape.geom.shape:
        raise ValueError("loss gradient shape does not match the taped forward pass")
    ws = ws if ws is not None else Workspace()
    geom = tape.geom
    c, k = net.hidden_channels, net.num_classes
    dlogits = geom.embed(loss_grad.data, ws.take("dlogits", (geom.m, k)))
    dwh, dbh, dh2 = _head_bwd(tape.h2, net.head, dlogits, ws.take("dh2", (geom.m, c)))
    dh2 *= tape.mask2
    dw2, db2, dh1 = _conv3_bwd(tape.h1, net.conv2, dh2, geom, ws.take("dh1", (geom.m, c)))
    dh1 *= tape.mask1
    dw1, db1, _ = _conv3_bwd(tape.x, net.conv1, dh1, geom, None)
    return GradientSet(dw1, db1, dw2, db2, dwh, dbh)


def predict(net: SegNet, image: ScalarVolume, ws: Workspace | None = None) -> LabelVolume:
    """Per-voxel argmax class of the network output."""
    logits, _ = forward(net, image, ws)
    return argmax_labels(logits)


def save_checkpoint(net: SegNet, path: str) -> None:
    """Write parameters: magic, then per tensor its dims (u64 LE) and float64 LE values."""
    chunks = [CHECKPOINT_MAGIC]
    for _, arr in net.parameters():
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    blob = b"".join(chunks)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str) -> SegNet:
    """Rebuild a SegNet from a checkpoint written by save_checkpoint."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    ndims = (5, 1, 5, 1, 5, 1)  # kernel/bias alternation, fixed architecture
    tensors = []
    for nd in ndims:
        need = nd * 8
        if off + need > len(blob):
            raise ValueError(f"{path}: truncated checkpoint header")
        dims = struct.unpack_from(f"<{nd}Q", blob, off)
        off += need
        count = int(np.prod(dims))
        need = count * 8
        if off + need > len(blob):
            raise ValueError(f"{path}: truncated checkpoint payload")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims).copy()
        off += need
        tensors.append(arr)
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes after checkpoint payload")
    w1, b1, w2, b2, wh, bh = tensors
    c = w1.shape[0]
    k = wh.shape[0]
    if w1.shape != (c, 1, 3, 3, 3) or w2.shape != (c, c, 3, 3, 3) or wh.shape != (k, c, 1, 1, 1):
        raise ValueError(f"{path}: unexpected tensor shapes in checkpoint")
    return SegNet(
        conv1=ConvLayer(w1, b1),
        conv2=ConvLayer(w2, b2),
        head=ConvLayer(wh, bh),
        hidden_channels=c,
        num_classes=k,
    )

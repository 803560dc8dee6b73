"""Dense tensors with reverse-mode differentiation.

Only the layers the segmentation networks need are implemented: strided
convolution, 2x2 max pooling, 2x2/stride-2 transposed convolution, batch
normalization, ReLU, channel concatenation and a class-weighted softmax
cross-entropy. Forward/backward run in float32; ``grad_check`` expects float64
copies (see ``LayerParams.astype``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

IGNORE_LABEL = 255
DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical seeds give identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


class Tensor:
    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None,
        name: str = "",
    ):
        data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(data)
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents = parents
        self._backward = backward

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _walk(self) -> List["Tensor"]:
        order: List[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        pending = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(self._walk()):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


@dataclass
class LayerParams:
    """Learnable state of one conv, transposed-conv or batchnorm layer.

    Conv weights are (out, in, kH, kW); transposed-conv weights are
    (in, out, 2, 2).
    """

    kind: str
    weight: Optional[Tensor] = None
    bias: Optional[Tensor] = None
    gamma: Optional[Tensor] = None
    beta: Optional[Tensor] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = 0.9
    eps: float = 1e-5

    def __post_init__(self):
        if self.kind in ("conv", "transposed-conv"):
            if self.weight is None or self.weight.ndim != 4:
                raise ShapeError(f"{self.kind} needs a 4-d weight tensor")
            out_channels = self.out_channels
            if self.bias is not None and self.bias.shape != (out_channels,):
                raise ShapeError(
                    f"{self.kind} bias has shape {self.bias.shape}, expected ({out_channels},)"
                )
            if self.kind == "transposed-conv" and self.weight.shape[2:] != (2, 2):
                raise ShapeError("only 2x2 stride-2 transposed convolutions are supported")
        elif self.kind == "batchnorm":
            channels = self.gamma.shape[0] if self.gamma is not None else -1
            for name in ("gamma", "beta"):
                value = getattr(self, name)
                if value is None or value.shape != (channels,):
                    raise ShapeError(f"batchnorm {name} must have length {channels}")
            for name in ("running_mean", "running_var"):
                value = getattr(self, name)
                if value is None or value.shape != (channels,):
                    raise ShapeError(f"batchnorm {name} must have length {channels}")
            if np.any(self.running_var < 0):
                raise ShapeError("batchnorm running variance must be non-negative")
        else:
            raise ShapeError(f"Unknown layer kind: {self.kind!r}")

    @classmethod
    def conv(
        cls,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        bias: bool = True,
        dtype=DEFAULT_DTYPE,
    ) -> "LayerParams":
        fan_in = in_channels * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        weight = rng.normal(0.0, std, size=(out_channels, in_channels, kernel, kernel))
        return cls(
            kind="conv",
            weight=parameter(weight.astype(dtype)),
            bias=parameter(np.zeros(out_channels, dtype=dtype)) if bias else None,
        )

    @classmethod
    def transposed(
        cls,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        dtype=DEFAULT_DTYPE,
    ) -> "LayerParams":
        std = np.sqrt(2.0 / in_channels)
        weight = rng.normal(0.0, std, size=(in_channels, out_channels, 2, 2))
        return cls(
            kind="transposed-conv",
            weight=parameter(weight.astype(dtype)),
            bias=parameter(np.zeros(out_channels, dtype=dtype)),
        )

    @classmethod
    def batchnorm(cls, channels: int, dtype=DEFAULT_DTYPE) -> "LayerParams":
        return cls(
            kind="batchnorm",
            gamma=parameter(np.ones(channels, dtype=dtype)),
            beta=parameter(np.zeros(channels, dtype=dtype)),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    @property
    def in_channels(self) -> int:
        if self.kind == "conv":
            return self.weight.shape[1]
        if self.kind == "transposed-conv":
            return self.weight.shape[0]
        return self.gamma.shape[0]

    @property
    def out_channels(self) -> int:
        if self.kind == "conv":
            return self.weight.shape[0]
        if self.kind == "transposed-conv":
            return self.weight.shape[1]
        return self.gamma.shape[0]

    def learnable(self) -> List[Tuple[str, Tensor]]:
        names = ("gamma", "beta") if self.kind == "batchnorm" else ("weight", "bias")
        return [(name, getattr(self, name)) for name in names if getattr(self, name) is not None]

    def buffers(self) -> List[Tuple[str, np.ndarray]]:
        if self.kind != "batchnorm":
            return []
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def astype(self, dtype) -> "LayerParams":
        def cast(t: Optional[Tensor]) -> Optional[Tensor]:
            return None if t is None else parameter(t.data.astype(dtype))

        return LayerParams(
            kind=self.kind,
            weight=cast(self.weight),
            bias=cast(self.bias),
            gamma=cast(self.gamma),
            beta=cast(self.beta),
            running_mean=None if self.running_mean is None else self.running_mean.astype(dtype),
            running_var=None if self.running_var is None else self.running_var.astype(dtype),
            momentum=self.momentum,
            eps=self.eps,
        )


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects an (N, C, H, W) tensor, got shape {x.shape}")


def conv2d(x: Tensor, params: LayerParams, stride: int = 1, padding: int = 0) -> Tensor:
    _require_4d(x, "conv2d")
    if params.kind != "conv":
        raise ShapeError(f"conv2d needs conv params, got {params.kind}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    weight, bias = params.weight, params.bias
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if c != ic:
        raise ShapeError(f"conv2d expects {ic} input channels, got {c}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d output would be empty: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g: np.ndarray):
        dx = dw = db = None
        if x.requires_grad:
            cols = np.tensordot(g, weight.data, axes=([1], [0]))  # n, ho, wo, c, kh, kw
            dxp = np.zeros(xp.shape, dtype=np.result_type(g, weight.data))
            span_h = stride * (ho - 1) + 1
            span_w = stride * (wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
        if weight.requires_grad:
            dw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return (dx, dw, db)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor(out, parents=parents, backward=backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties go to the first element in row-major order."""
    _require_4d(x, "maxpool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        gwin = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        return (gwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return Tensor(out, parents=(x,), backward=backward)


def upsample2(x: Tensor, params: LayerParams) -> Tensor:
    """Learned 2x upsampling (transposed convolution, 2x2 kernel, stride 2)."""
    _require_4d(x, "upsample2")
    if params.kind != "transposed-conv" or params.weight.shape[2:] != (2, 2):
        raise ShapeError("upsample2 needs 2x2 stride-2 transposed-conv params")
    weight, bias = params.weight, params.bias
    n, c, h, w = x.shape
    ic, oc = weight.shape[:2]
    if c != ic:
        raise ShapeError(f"upsample2 expects {ic} input channels, got {c}")
    out = np.tensordot(x.data, weight.data, axes=([1], [0]))  # n, h, w, oc, 2, 2
    out = out.transpose(0, 3, 1, 4, 2, 5).reshape(n, oc, 2 * h, 2 * w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g: np.ndarray):
        g6 = g.reshape(n, oc, h, 2, w, 2)
        dx = dw = db = None
        if x.requires_grad:
            dx = np.tensordot(g6, weight.data, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            dw = np.tensordot(x.data, g6, axes=([0, 2, 3], [0, 2, 4]))
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return (dx, dw, db)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor(out, parents=parents, backward=backward)


def batchnorm(x: Tensor, params: LayerParams, mode: str = "train") -> Tensor:
    _require_4d(x, "batchnorm")
    if params.kind != "batchnorm":
        raise ShapeError(f"batchnorm needs batchnorm params, got {params.kind}")
    n, c, h, w = x.shape
    if c != params.gamma.shape[0]:
        raise ShapeError(f"batchnorm expects {params.gamma.shape[0]} channels, got {c}")
    if n == 0:
        raise ShapeError("batchnorm got an empty batch")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    gamma, beta = params.gamma, params.beta

    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        keep = params.momentum
        params.running_mean = (keep * params.running_mean + (1 - keep) * mean).astype(params.running_mean.dtype)
        params.running_var = (keep * params.running_var + (1 - keep) * var).astype(params.running_var.dtype)
    else:
        mean = params.running_mean
        var = params.running_var
    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g: np.ndarray):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if mode == "train":
                m = n * h * w
                dx = (inv_std[None, :, None, None] / m) * (
                    m * dxhat
                    - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                )
            else:
                dx = dxhat * inv_std[None, :, None, None]
        return (dx, dgamma, dbeta)

    return Tensor(out, parents=(x, gamma, beta), backward=backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g: np.ndarray):
        return (g * mask,)

    return Tensor(x.data * mask, parents=(x,), backward=backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_4d(a, "concat_channels")
    _require_4d(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}: batch/spatial dims differ")
    split = a.shape[1]

    def backward(g: np.ndarray):
        return (g[:, :split], g[:, split:])

    return Tensor(np.concatenate([a.data, b.data], axis=1), parents=(a, b), backward=backward)


def weighted_sum(x: Tensor, weights: Optional[np.ndarray] = None) -> Tensor:
    """Scalar sum(weights * x); the projection loss used by gradient checks."""
    w = np.ones_like(x.data) if weights is None else np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise ShapeError(f"weights shape {w.shape} does not match {x.shape}")

    def backward(g: np.ndarray):
        return (g.reshape(()) * w,)

    return Tensor(np.asarray((x.data * w).sum(), dtype=x.dtype), parents=(x,), backward=backward)


def softmax_weighted_ce(
    logits: np.ndarray,
    targets: np.ndarray,
    class_weights: Sequence[float],
    ignore_label: int = IGNORE_LABEL,
) -> Tuple[float, np.ndarray]:
    """Mean over non-ignored pixels of w[t] * -log softmax(logits)[t].

    Returns the loss and its exact gradient on the logits.
    """
    logits = np.asarray(logits)
    if logits.ndim != 4:
        raise ShapeError(f"logits must be (N, C, h, w), got {logits.shape}")
    n, c, h, w = logits.shape
    targets = np.asarray(targets).astype(np.int64)
    if targets.shape != (n, h, w):
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (c,) or np.any(weights < 0):
        raise ValueError(f"class_weights must be {c} non-negative values")
    valid = targets != ignore_label
    bad = valid & ((targets < 0) | (targets >= c))
    if bad.any():
        raise ValueError(f"target label {int(targets[bad][0])} is outside [0, {c})")

    count = int(valid.sum())
    if count == 0:
        return 0.0, np.zeros_like(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    safe = np.where(valid, targets, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    pixel_weight = weights[safe] * valid
    loss = float(-(pixel_weight * picked).sum() / count)

    grad = np.exp(logp)
    np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
    grad *= (pixel_weight / count)[:, None].astype(grad.dtype)
    return loss, grad.astype(logits.dtype)


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    class_weights: Sequence[float],
    ignore_label: int = IGNORE_LABEL,
) -> Tensor:
    loss, grad = softmax_weighted_ce(logits.data, targets, class_weights, ignore_label)

    def backward(g: np.ndarray):
        return (grad * g.reshape(()),)

    return Tensor(np.asarray(loss, dtype=logits.dtype), parents=(logits,), backward=backward)


def sgd_step(params: Iterable[LayerParams], lr: float) -> None:
    """Plain SGD on every learnable tensor; running statistics are left alone."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    tensors = []
    for layer in params:
        for name, tensor in layer.learnable():
            if tensor.grad is None:
                raise ValueError(f"missing gradient for {layer.kind} {name}")
            tensors.append(tensor)
    for tensor in tensors:
        tensor.data -= (lr * tensor.grad).astype(tensor.data.dtype)
        tensor.grad = None


@dataclass(frozen=True)
class GradCheckResult:
    max_error: float
    tolerance: float
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def grad_check(
    fn: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    tolerance: float = 1e-3,
    samples: int = 16,
    seed: int = 0,
    step: float = 1e-6,
    floor: float = 1e-6,
) -> GradCheckResult:
    """Compare backprop against central differences on sampled coordinates.

    ``fn`` rebuilds the scalar loss from the float64 tensors in ``wrt``.
    Coordinates with an analytic gradient above ``floor`` are sampled first;
    the relative error is taken against ``floor`` at least, so a bias ahead
    of batchnorm (exact gradient 0, numeric one at rounding level) passes.
    """
    for t in wrt:
        if t.data.dtype != np.float64:
            raise ValueError("grad_check needs float64 tensors")
        t.grad = None
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]

    rng = make_rng(seed)
    worst = 0.0
    checked = 0
    for t, a in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        coords = _sample_coordinates(rng, np.abs(a.reshape(-1)), samples, floor)
        for i in coords:
            original = flat[i]
            flat[i] = original + step
            plus = float(fn().data)
            flat[i] = original - step
            minus = float(fn().data)
            flat[i] = original
            numeric = (plus - minus) / (2 * step)
            exact = float(a.reshape(-1)[i])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, error)
            checked += 1
    for t in wrt:
        t.grad = None
    return GradCheckResult(max_error=worst, tolerance=tolerance, checked=checked)


def _sample_coordinates(rng: np.random.Generator, magnitude: np.ndarray, samples: int, floor: float) -> np.ndarray:
    live = np.flatnonzero(magnitude > floor)
    dead = np.flatnonzero(magnitude <= floor)
    picked = rng.choice(live, size=min(samples, live.size), replace=False)
    rest = samples - picked.size
    if rest > 0 and dead.size:
        picked = np.concatenate([picked, rng.choice(dead, size=min(rest, dead.size), replace=False)])
    return picked


def receptive_field(config) -> Tuple[int, int]:
    """Receptive field and output stride of ``config.layer_sequence()``.

    r <- r + (k - 1) * j, j <- j * s; a 2x2 transposed conv halves j.
    """
    rf, jump = 1, 1.0
    for kind, kernel, stride in config.layer_sequence():
        if kind == "upsample":
            jump /= 2
            continue
        rf += int(round((kernel - 1) * jump))
        jump *= stride
    if jump != int(jump):
        raise ShapeError(f"fractional output stride {jump}")
    return rf, int(jump)


def count_parameters(config) -> int:
    """Learnable element count over ``config.parameter_shapes()``."""
    return int(sum(int(np.prod(shape)) for shape in config.parameter_shapes()))

"""Dense float64 tensors and the forward numeric kernels built on them.

All arithmetic is binary64. Convolution is cross-correlation (no kernel
flip). Operations are pure: tensors are immutable values once constructed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import InvariantError, ShapeError


class Tensor:
    """Immutable dense N-dimensional float64 array, row-major.

    Construction rejects NaN/Inf. `data` is the backing numpy array and
    must not be written to.
    """

    __slots__ = ("data",)

    def __init__(self, data, *, _checked: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not _checked and not np.isfinite(arr).all():
            raise InvariantError("tensor contains non-finite elements")
        object.__setattr__(self, "data", arr)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        """Wrap an array produced internally from finite inputs (no re-check)."""
        return cls(arr, _checked=True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def tolist(self):
        return self.data.tolist()

    def item(self) -> float:
        return self.data.item()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")


def as_array(x) -> np.ndarray:
    """Coerce a Tensor or array-like to a validated float64 ndarray."""
    if isinstance(x, Tensor):
        return x.data
    return Tensor(x).data


@dataclass(frozen=True)
class ConvSpec:
    """Stride and symmetric zero-padding of a 2-D convolution."""

    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise InvariantError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise InvariantError(f"padding must be non-negative, got {self.padding}")

    def output_hw(self, h: int, w: int, kh: int, kw: int) -> tuple[int, int]:
        oh, ow = kernels.conv_output_hw(h, w, kh, kw, self.stride, self.padding)
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv output dims ({oh},{ow}) not positive for input ({h},{w}), "
                f"kernel ({kh},{kw}), stride {self.stride}, padding {self.padding}")
        return oh, ow


def conv2d(x, k, bias, spec: ConvSpec = ConvSpec()) -> Tensor:
    """Cross-correlation of x [N,C,H,W] with kernels k [O,C,Kh,Kw] plus bias [O]."""
    xa, ka, ba = as_array(x), as_array(k), as_array(bias)
    if xa.ndim != 4 or ka.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D x and k, got {xa.shape} and {ka.shape}")
    if xa.shape[1] != ka.shape[1]:
        raise ShapeError(f"channel mismatch: x axis 1 is {xa.shape[1]}, k axis 1 is {ka.shape[1]}")
    if ba.shape != (ka.shape[0],):
        raise ShapeError(f"bias shape {ba.shape} does not match {ka.shape[0]} output channels")
    spec.output_hw(xa.shape[2], xa.shape[3], ka.shape[2], ka.shape[3])
    y, _ = kernels.conv2d_forward(xa, ka, ba, spec.stride, spec.padding)
    return Tensor._wrap(y)


def global_avg_pool(x) -> Tensor:
    """Per-channel mean over spatial positions: [N,C,H,W] -> [N,C]."""
    xa = as_array(x)
    if xa.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got {xa.shape}")
    return Tensor._wrap(kernels.gap_forward(xa))


def batchnorm_infer(x, mu, var, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-channel (x-mu)/sqrt(var+eps)*gamma + beta with running statistics."""
    xa = as_array(x)
    mua, vara, ga, ba = (as_array(t) for t in (mu, var, gamma, beta))
    c = xa.shape[1]
    for name, t in (("mu", mua), ("var", vara), ("gamma", ga), ("beta", ba)):
        if t.shape != (c,):
            raise ShapeError(f"{name} shape {t.shape} does not match {c} channels")
    if eps <= 0:
        raise InvariantError(f"eps must be positive, got {eps}")
    if (vara < 0).any():
        raise InvariantError("running variance has negative elements")
    return Tensor._wrap(kernels.batchnorm_eval_forward(xa, mua, vara, ga, ba, eps))


def channel_mul(x, v) -> Tensor:
    """Scale channel c of x by v_c across batch and spatial dims."""
    xa, va = as_array(x), as_array(v)
    if xa.ndim not in (2, 4):
        raise ShapeError(f"channel_mul expects 2-D or 4-D input, got {xa.shape}")
    if va.shape != (xa.shape[1],):
        raise ShapeError(f"vector shape {va.shape} does not match {xa.shape[1]} channels")
    return Tensor._wrap(kernels.channel_scale(xa, va))


def sigmoid(x) -> Tensor:
    return Tensor._wrap(kernels.sigmoid(as_array(x)))


def relu(x) -> Tensor:
    return Tensor._wrap(kernels.relu(as_array(x)))


def linear(x, w, b) -> Tensor:
    """Affine map x W^T + b: [N,D] x [M,D] -> [N,M]."""
    xa, wa, ba = as_array(x), as_array(w), as_array(b)
    if xa.ndim != 2 or wa.ndim != 2:
        raise ShapeError(f"linear expects 2-D x and W, got {xa.shape} and {wa.shape}")
    if xa.shape[1] != wa.shape[1]:
        raise ShapeError(f"inner dim mismatch: x axis 1 is {xa.shape[1]}, W axis 1 is {wa.shape[1]}")
    if ba.shape != (wa.shape[0],):
        raise ShapeError(f"bias shape {ba.shape} does not match {wa.shape[0]} outputs")
    return Tensor._wrap(kernels.linear_forward(xa, wa, ba))


class MatrixOperator:
    """Explicit matrix as a linear operator."""

    def __init__(self, w):
        self.w = as_array(w)
        if self.w.ndim != 2:
            raise ShapeError(f"matrix operator expects 2-D array, got {self.w.shape}")

    @property
    def input_size(self) -> int:
        return self.w.shape[1]

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.w @ v

    def apply_transpose(self, v: np.ndarray) -> np.ndarray:
        return self.w.T @ v


class ConvOperator:
    """A convolution as an implicit linear map at a fixed input shape.

    The bias is excluded: the operator is the linear part only.
    """

    def __init__(self, k, spec: ConvSpec, input_hw: tuple[int, int]):
        self.k = as_array(k)
        self.spec = spec
        self.h, self.w = input_hw
        self.oh, self.ow = spec.output_hw(self.h, self.w, self.k.shape[2], self.k.shape[3])

    @property
    def input_size(self) -> int:
        return self.k.shape[1] * self.h * self.w

    def apply(self, v: np.ndarray) -> np.ndarray:
        x = v.reshape(1, self.k.shape[1], self.h, self.w)
        y, _ = kernels.conv2d_forward(x, self.k, np.zeros(self.k.shape[0]),
                                      self.spec.stride, self.spec.padding)
        return y.reshape(-1)

    def apply_transpose(self, v: np.ndarray) -> np.ndarray:
        o = self.k.shape[0]
        dy = v.reshape(1, o, self.oh, self.ow)
        dy_mat = dy.transpose(0, 2, 3, 1).reshape(-1, o)
        dcols = dy_mat @ self.k.reshape(o, -1)
        dx = kernels.col2im(dcols, (1, self.k.shape[1], self.h, self.w),
                            self.k.shape[2], self.k.shape[3],
                            self.spec.stride, self.spec.padding)
        return dx.reshape(-1)


def spectral_norm(op, iters: int = 100, tol: float = 1e-8, seed: int = 0) -> float:
    """Largest singular value of a linear operator by power iteration.

    Iterates v <- A^T A v with normalization from a seeded start vector;
    stops early when successive estimates differ by less than `tol`.
    Returns 0 for the zero operator.
    """
    if iters < 1:
        raise InvariantError(f"iters must be >= 1, got {iters}")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.input_size)
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        av = op.apply(v)
        nav = np.linalg.norm(av)
        if nav == 0.0:
            return 0.0
        new_est = nav  # ||A v|| with ||v|| == 1
        w = op.apply_transpose(av)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return float(new_est)
        v = w / nw
        if abs(new_est - est) < tol:
            return float(new_est)
        est = new_est
    return float(est)

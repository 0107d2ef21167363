"""Learnable Gabor filters (real part) and their use as convolution banks.

A filter is rendered on the integer grid centred on the kernel:

    K(x, y) = exp(-(x'^2 + gamma^2 y'^2) / (2 sigma^2)) * cos(2 pi x' / lambda + phi)
    x' =  x cos(theta) + y sin(theta)
    y' = -x sin(theta) + y cos(theta)

with ``x`` the column offset and ``y`` the row offset from the centre.
Wavelength, spread and ellipticity are trained through an unconstrained
"raw" value mapped by softplus; orientation and phase stay fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, _result, as_tensor, channel_sum, conv2d


def softplus(raw):
    return np.logaddexp(0.0, raw)


def softplus_grad(raw):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(raw)))


def inverse_softplus(value):
    value = np.asarray(value, dtype=np.float64)
    if np.any(value <= 0):
        raise ValueError("softplus only produces positive values")
    # log(exp(v) - 1) rewritten to stay finite for large v
    return value + np.log(-np.expm1(-value))


@dataclass
class GaborFilterParams:
    lambda_raw: float
    sigma_raw: float
    gamma_raw: float
    theta: float
    phi: float = 0.0

    @classmethod
    def from_effective(cls, lam, sigma, gamma, theta, phi=0.0):
        raw = inverse_softplus([lam, sigma, gamma])
        return cls(float(raw[0]), float(raw[1]), float(raw[2]), theta, phi)

    @property
    def effective(self):
        lam, sigma, gamma = softplus(np.array([self.lambda_raw, self.sigma_raw, self.gamma_raw]))
        return float(lam), float(sigma), float(gamma)


def _grid(k):
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"kernel size must be a positive odd integer, got {k}")
    half = (k - 1) // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    y, x = np.meshgrid(offsets, offsets, indexing="ij")
    return x, y


def _terms(lam, sigma, gamma, theta, phi, k):
    """Broadcast helper: parameter arrays of shape (F,) -> pieces of shape (F, k, k)."""
    lam, sigma, gamma, theta, phi = (np.asarray(v, dtype=np.float64)[..., None, None]
                                     for v in (lam, sigma, gamma, theta, phi))
    if np.any(lam <= 0) or np.any(sigma <= 0) or np.any(gamma <= 0):
        raise ValueError("wavelength, spread and ellipticity must be positive")
    x, y = _grid(k)
    xr = x * np.cos(theta) + y * np.sin(theta)
    yr = -x * np.sin(theta) + y * np.cos(theta)
    quad = xr ** 2 + gamma ** 2 * yr ** 2
    envelope = np.exp(-quad / (2.0 * sigma ** 2))
    arg = 2.0 * np.pi * xr / lam + phi
    return xr, yr, quad, envelope, arg


def render_kernels(lam, sigma, gamma, theta, phi, k):
    """Kernels for arrays of effective parameters, shape (F, k, k)."""
    _, _, _, envelope, arg = _terms(lam, sigma, gamma, theta, phi, k)
    return envelope * np.cos(arg)


def kernel_grads(lam, sigma, gamma, theta, phi, k):
    """dK/dlambda, dK/dsigma, dK/dgamma for arrays of effective parameters."""
    xr, yr, quad, envelope, arg = _terms(lam, sigma, gamma, theta, phi, k)
    lam, sigma, gamma = (np.asarray(v, dtype=np.float64)[..., None, None] for v in (lam, sigma, gamma))
    kern = envelope * np.cos(arg)
    d_lam = envelope * np.sin(arg) * (2.0 * np.pi * xr / lam ** 2)
    d_sigma = kern * quad / sigma ** 3
    d_gamma = -kern * gamma * yr ** 2 / sigma ** 2
    return d_lam, d_sigma, d_gamma


def render_kernel(params: GaborFilterParams, k: int) -> np.ndarray:
    lam, sigma, gamma = params.effective
    return render_kernels(lam, sigma, gamma, params.theta, params.phi, k)


def kernel_param_grads(params: GaborFilterParams, k: int):
    """Partial derivatives w.r.t. the effective (not raw) parameters."""
    lam, sigma, gamma = params.effective
    return kernel_grads(lam, sigma, gamma, params.theta, params.phi, k)


@dataclass
class GaborBank:
    """A bank of filters sharing one kernel size.

    The trainable raw values are stored as rank-1 tensors so the bank can be
    dropped straight into an optimizer's parameter dictionary.
    """

    kernel_size: int
    theta: np.ndarray
    phi: np.ndarray
    lambda_raw: Tensor
    sigma_raw: Tensor
    gamma_raw: Tensor

    @property
    def num_filters(self):
        return len(self.theta)

    @property
    def filters(self):
        return [GaborFilterParams(float(self.lambda_raw.data[f]), float(self.sigma_raw.data[f]),
                                  float(self.gamma_raw.data[f]), float(self.theta[f]), float(self.phi[f]))
                for f in range(self.num_filters)]

    def effective(self):
        return (softplus(self.lambda_raw.data), softplus(self.sigma_raw.data),
                softplus(self.gamma_raw.data))

    def parameters(self):
        return {"lambda_raw": self.lambda_raw, "sigma_raw": self.sigma_raw, "gamma_raw": self.gamma_raw}


def orientations(num_filters):
    return np.arange(num_filters) * np.pi / num_filters


def nominal_params(kernel_size):
    return kernel_size / 2.0, kernel_size / 4.0, 1.0


def make_bank(kernel_size, num_filters, seed, dtype=np.float32):
    if num_filters < 1:
        raise ConfigError(f"a bank needs at least one filter, got {num_filters}")
    _grid(kernel_size)
    rng = np.random.default_rng(seed)
    nominal = np.array(nominal_params(kernel_size))
    jitter = rng.uniform(-0.05, 0.05, size=(3, num_filters))
    raw = inverse_softplus(nominal[:, None] * (1.0 + jitter))
    return GaborBank(
        kernel_size=kernel_size,
        theta=orientations(num_filters),
        phi=np.zeros(num_filters),
        lambda_raw=Tensor(raw[0].astype(dtype), requires_grad=True),
        sigma_raw=Tensor(raw[1].astype(dtype), requires_grad=True),
        gamma_raw=Tensor(raw[2].astype(dtype), requires_grad=True),
    )


def gabor_kernels(bank: GaborBank) -> Tensor:
    """Differentiable rendering of the whole bank as (F, 1, k, k) conv kernels."""
    raws = (bank.lambda_raw, bank.sigma_raw, bank.gamma_raw)
    dtype = bank.lambda_raw.dtype
    eff = [softplus(r.data.astype(np.float64)) for r in raws]
    k = bank.kernel_size
    kern = render_kernels(*eff, bank.theta, bank.phi, k)

    def _bw(g):
        g = g[:, 0].astype(np.float64)
        partials = kernel_grads(*eff, bank.theta, bank.phi, k)
        out = []
        for raw, d in zip(raws, partials):
            chain = softplus_grad(raw.data.astype(np.float64))
            out.append(((g * d).sum(axis=(1, 2)) * chain).astype(raw.dtype))
        return tuple(out)

    return _result(kern[:, None].astype(dtype), raws, _bw, "gabor_kernels")


def lgf_forward(bank: GaborBank, x) -> Tensor:
    """Apply every filter of the bank to ``x`` (N, Cin, H, W) -> (N, F, H, W).

    One kernel per filter is shared by all input channels and the channel
    responses are summed, which is the same as filtering the channel sum.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"lgf_forward expects (N,C,H,W), got {x.shape}")
    k = bank.kernel_size
    if k > min(x.shape[2:]):
        raise ConfigError(f"kernel size {k} exceeds the {x.shape[2]}x{x.shape[3]} input")
    return conv2d(channel_sum(x), gabor_kernels(bank))

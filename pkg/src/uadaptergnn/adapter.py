"""Bottleneck adapters: the deterministic baseline and the Gaussian adapter.

Both sit beside a frozen GIN layer. The layer input ``x`` feeds the adapter,
the frozen layer output ``y`` is normalized by an adapter-owned batch norm,
and the two are summed:

    deterministic:  x_hat = BN_y(y) + BN(W_up relu(W_down x))
    gaussian:       mu    = BN(W_up relu(W_down x))
                    sigma = softplus(BN(W~_up relu(W~_down x))) + floor
                    z     = mu + eps * sigma,   eps ~ N(0, I)
                    x_hat = BN_y(y) + s * z

Weights are stored input-major (``x @ w_down``), i.e. as the transpose of
the usual column-vector convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import BatchNormState, Tensor, ShapeError, add, batchnorm, matmul, mul, relu, softplus
from .rng import stream

SIGMA_FLOOR = 1e-6


class NoiseSource:
    """Standard-normal draws for the reparameterization, or exact zeros.

    The stream is a pure function of ``seed``; the i-th draw is the same on
    every run.
    """

    def __init__(self, seed: int = 0, mode: str = "sample"):
        if mode not in ("sample", "zero"):
            raise ValueError(f"noise mode must be 'sample' or 'zero', got {mode!r}")
        self.seed = seed
        self.mode = mode
        self.draws = 0
        self._rng = stream(seed, "noise")

    @classmethod
    def zero(cls) -> "NoiseSource":
        return cls(0, "zero")

    def draw(self, shape: tuple[int, ...]) -> np.ndarray:
        self.draws += 1
        if self.mode == "zero":
            return np.zeros(shape)
        return self._rng.standard_normal(shape)


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, int], gain: float = 1.0) -> np.ndarray:
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Bottleneck:
    """``BN(relu(x @ w_down) @ w_up)``, the shared shape of every adapter branch."""

    def __init__(self, d_in: int, d_mid: int, d_out: int, rng: np.random.Generator,
                 name: str, up_gain: float = 1.0):
        if d_mid < 1:
            raise ValueError(f"bottleneck width must be >= 1, got {d_mid}")
        self.w_down = Tensor(_uniform(rng, d_in, (d_in, d_mid)), requires_grad=True, name=f"{name}.w_down")
        self.w_up = Tensor(_uniform(rng, d_mid, (d_mid, d_out), up_gain), requires_grad=True,
                           name=f"{name}.w_up")
        self.bn = BatchNormState.fresh(d_out, name=f"{name}.bn")

    @property
    def d_in(self) -> int:
        return self.w_down.shape[0]

    def pre_norm(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"adapter expects width {self.d_in}, got input {x.shape}")
        return matmul(relu(matmul(x, self.w_down)), self.w_up)

    def __call__(self, x: Tensor) -> Tensor:
        return batchnorm(self.pre_norm(x), self.bn)

    def parameters(self) -> list[Tensor]:
        return [self.w_down, self.w_up, self.bn.gamma, self.bn.beta]

    def named_state(self, prefix: str) -> dict:
        return {f"{prefix}.w_down": self.w_down, f"{prefix}.w_up": self.w_up, f"{prefix}.bn": self.bn}

    def copy_from(self, other: "Bottleneck") -> None:
        self.w_down.data = other.w_down.data.copy()
        self.w_up.data = other.w_up.data.copy()
        self.bn = other.bn.copy(trainable=self.bn.gamma.requires_grad, name=self.bn.gamma.name.rsplit(".", 1)[0])


class DeterministicAdapter:
    def __init__(self, d: int, d_mid: int, rng: np.random.Generator, bn_y: BatchNormState, name: str = "adapter"):
        self.branch = Bottleneck(d, d_mid, d, rng, f"{name}.mean")
        self.bn_y = bn_y

    def forward(self, x: Tensor, y: Tensor, noise: NoiseSource | None = None) -> Tensor:
        z = self.branch(x)
        if z.shape != y.shape:
            raise ShapeError(f"adapter output {z.shape} vs layer output {y.shape}")
        return add(batchnorm(y, self.bn_y), z)

    def bns(self) -> list[BatchNormState]:
        return [self.branch.bn, self.bn_y]

    def parameters(self) -> list[Tensor]:
        return self.branch.parameters() + [self.bn_y.gamma, self.bn_y.beta]

    def named_state(self, prefix: str) -> dict:
        return {**self.branch.named_state(f"{prefix}.mean"), f"{prefix}.bn_y": self.bn_y}


class GaussianAdapter:
    """Mean and std bottlenecks, reparameterized sampling, scaled integration.

    ``scale_mode='learnable'`` makes ``s`` a trainable scalar; ``'fixed'``
    keeps it a constant that never receives a gradient.
    """

    def __init__(self, d: int, d_mid: int, rng_mean: np.random.Generator, rng_std: np.random.Generator,
                 bn_y: BatchNormState, scale_mode: str = "learnable", scale_init: float = 0.01,
                 name: str = "adapter"):
        if scale_mode not in ("learnable", "fixed"):
            raise ValueError(f"scale_mode must be 'learnable' or 'fixed', got {scale_mode!r}")
        self.mean_branch = Bottleneck(d, d_mid, d, rng_mean, f"{name}.mean")
        # near-zero std up-projection keeps the initial pre-activation small
        self.std_branch = Bottleneck(d, d_mid, d, rng_std, f"{name}.std", up_gain=1e-2)
        self.bn_y = bn_y
        self.scale_mode = scale_mode
        self.scale = Tensor(scale_init, requires_grad=scale_mode == "learnable", name=f"{name}.scale")

    def gauss_mean(self, x: Tensor) -> Tensor:
        return self.mean_branch(x)

    def gauss_std(self, x: Tensor) -> Tensor:
        return add(softplus(self.std_branch(x)), SIGMA_FLOOR)

    def integrate(self, y: Tensor, z: Tensor) -> Tensor:
        if y.shape != z.shape:
            raise ShapeError(f"integrate: y {y.shape} vs z {z.shape}")
        return add(batchnorm(y, self.bn_y), mul(self.scale, z))

    def forward(self, x: Tensor, y: Tensor, noise: NoiseSource | None = None) -> Tensor:
        mu = self.gauss_mean(x)
        if noise is None or noise.mode == "zero":
            z = mu
        else:
            z = sample_z(mu, self.gauss_std(x), noise)
        return self.integrate(y, z)

    def bns(self) -> list[BatchNormState]:
        return [self.mean_branch.bn, self.std_branch.bn, self.bn_y]

    def parameters(self) -> list[Tensor]:
        params = self.mean_branch.parameters() + self.std_branch.parameters()
        params += [self.bn_y.gamma, self.bn_y.beta]
        if self.scale_mode == "learnable":
            params.append(self.scale)
        return params

    def named_state(self, prefix: str) -> dict:
        return {
            **self.mean_branch.named_state(f"{prefix}.mean"),
            **self.std_branch.named_state(f"{prefix}.std"),
            f"{prefix}.bn_y": self.bn_y,
            f"{prefix}.scale": self.scale,
        }


def det_adapter_forward(a: DeterministicAdapter, x: Tensor) -> Tensor:
    """The adapter output ``z`` alone, without the residual branch."""
    return a.branch(x)


def gauss_mean(a: GaussianAdapter, x: Tensor) -> Tensor:
    return a.gauss_mean(x)


def gauss_std(a: GaussianAdapter, x: Tensor) -> Tensor:
    return a.gauss_std(x)


def sample_z(mu: Tensor, sigma: Tensor, noise: NoiseSource) -> Tensor:
    """Reparameterized draw ``mu + eps * sigma``; exact ``mu`` in zero mode."""
    if mu.shape != sigma.shape:
        raise ShapeError(f"sample_z: mu {mu.shape} vs sigma {sigma.shape}")
    if noise.mode == "zero":
        noise.draw(mu.shape)
        return mu
    eps = noise.draw(mu.shape)
    return add(mu, mul(Tensor(eps), sigma))


def integrate(y: Tensor, z: Tensor, a: GaussianAdapter) -> Tensor:
    return a.integrate(y, z)


@dataclass
class AdapterSpec:
    kind: str              # "deterministic" or "gaussian"
    d_mid: int = 15
    scale_mode: str = "learnable"
    scale_init: float = 0.01


def build_adapters(spec: AdapterSpec, d: int, bn_ys: list[BatchNormState], seed: int) -> list:
    """One adapter per layer. ``bn_ys`` are the per-layer BN_y states to own.

    The mean branch of a Gaussian adapter is drawn from the same stream as a
    deterministic adapter's branch, so equal seeds give equal mean weights.
    """
    out = []
    for l, bn_y in enumerate(bn_ys):
        rng_mean = stream(seed, f"init/adapter/{l}")
        name = f"adapter.{l}"
        if spec.kind == "deterministic":
            out.append(DeterministicAdapter(d, spec.d_mid, rng_mean, bn_y, name=name))
        elif spec.kind == "gaussian":
            out.append(GaussianAdapter(d, spec.d_mid, rng_mean, stream(seed, f"init/adapter/{l}/std"), bn_y,
                                       spec.scale_mode, spec.scale_init, name=name))
        else:
            raise ValueError(f"unknown adapter kind {spec.kind!r}")
    return out

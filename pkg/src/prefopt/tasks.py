"""Synthetic latent-utility functions for pre-training.

Two families: random GP draws conditioned on a planted optimum, and a small
zoo of classical test functions (maximization orientation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

KERNEL_FAMILIES = ("rbf", "matern12", "matern32", "matern52")

SIGMA_RANGE = (0.1, 2.0)
LENGTHSCALE_RANGE = (0.05, 2.0)
LENGTHSCALE_MEAN = 1.0 / 3.0
LENGTHSCALE_STD = 0.75

# Number of normal draws whose maximum defines the GP prior mean.
MEAN_DRAWS = 20
HIGH_MEAN_PROB = 0.1

OFFSET_RANGE = (-5.0, 5.0)
BOWL_COEFF = 0.125

JITTER_START_FACTOR = 1e-6
JITTER_MAX_FACTOR = 1e-2


@dataclass(frozen=True)
class KernelSpec:
    family: str
    sigma: float
    lengthscales: np.ndarray

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"unknown kernel family: {self.family!r}")
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=np.float64))
        object.__setattr__(self, "lengthscales", ls)
        if self.sigma <= 0 or np.any(ls <= 0):
            raise ValueError("sigma and lengthscales must be positive")

    @property
    def dimension(self) -> int:
        return self.lengthscales.shape[0]


def sample_kernel(rng: np.random.Generator, dimension: int = 1) -> KernelSpec:
    """Draw a kernel spec: family uniform over four options, sigma uniform,
    per-dimension lengthscales from a truncated normal (rejection sampling)."""
    family = KERNEL_FAMILIES[rng.integers(len(KERNEL_FAMILIES))]
    sigma = rng.uniform(*SIGMA_RANGE)
    ls = np.empty(dimension)
    lo, hi = LENGTHSCALE_RANGE
    for d in range(dimension):
        while True:
            draw = rng.normal(LENGTHSCALE_MEAN, LENGTHSCALE_STD)
            if lo <= draw <= hi:
                ls[d] = draw
                break
    return KernelSpec(family=family, sigma=sigma, lengthscales=ls)


def kernel_matrix(spec: KernelSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Covariance between two point sets under ``spec``.

    Entry (i, j) is sigma^2 * rho(r_ij) with r the lengthscale-scaled
    Euclidean distance and rho the family's correlation function.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    d = spec.dimension
    if a.shape[1] != d or b.shape[1] != d:
        raise ValueError(
            f"point dimension mismatch: kernel is {d}-dimensional, "
            f"got {a.shape[1]} and {b.shape[1]}"
        )
    diff = (a[:, None, :] - b[None, :, :]) / spec.lengthscales
    r2 = np.sum(diff * diff, axis=-1)
    r = np.sqrt(np.maximum(r2, 0.0))
    if spec.family == "rbf":
        rho = np.exp(-0.5 * r2)
    elif spec.family == "matern12":
        rho = np.exp(-r)
    elif spec.family == "matern32":
        s = math.sqrt(3.0) * r
        rho = (1.0 + s) * np.exp(-s)
    else:  # matern52
        s = math.sqrt(5.0) * r
        rho = (1.0 + s + s * s / 3.0) * np.exp(-s)
    return spec.sigma**2 * rho


def _chol_with_jitter(cov: np.ndarray, sigma2: float) -> np.ndarray:
    """Cholesky with escalating diagonal jitter; raises after the ceiling."""
    jitter = JITTER_START_FACTOR * sigma2
    eye = np.eye(cov.shape[0])
    while jitter <= JITTER_MAX_FACTOR * sigma2 * (1 + 1e-12):
        try:
            return np.linalg.cholesky(cov + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise np.linalg.LinAlgError(
        f"Cholesky failed up to jitter {JITTER_MAX_FACTOR * sigma2:g}"
    )


def apply_bowl_and_offset(
    raw: np.ndarray, x_opt: np.ndarray, x: np.ndarray, delta_y: float
) -> np.ndarray:
    """y_out = -(|y| + 1/8 * ||x* - x||^2 + delta_y), pointwise."""
    raw = np.asarray(raw, dtype=np.float64)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    bowl = BOWL_COEFF * np.sum((x_opt[None, :] - x) ** 2, axis=-1)
    return -(np.abs(raw) + bowl + delta_y)


@dataclass
class SampledFunction:
    """A GP draw conditioned so that its global maximum sits at ``x_opt``.

    ``x`` holds the support grid (the optimum is row 0), ``y_raw`` the GP
    values before the bowl-and-offset transform, ``y`` the transformed
    utilities. Off-grid evaluation extends the draw with the exact posterior
    mean conditioned on the support set, then applies the transform.
    """

    dimension: int
    kernel: KernelSpec
    mean: float
    x: np.ndarray
    y_raw: np.ndarray
    x_opt: np.ndarray
    delta_y: float
    y: np.ndarray = field(init=False)
    _alpha: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.y = apply_bowl_and_offset(self.y_raw, self.x_opt, self.x, self.delta_y)

    @property
    def y_opt(self) -> float:
        return -self.delta_y

    @property
    def n_support(self) -> int:
        return self.x.shape[0]

    def _solve_alpha(self) -> np.ndarray:
        if self._alpha is None:
            cov = kernel_matrix(self.kernel, self.x, self.x)
            chol = _chol_with_jitter(cov, self.kernel.sigma**2)
            resid = self.y_raw - self.mean
            self._alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, resid))
        return self._alpha

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Utility at arbitrary points via posterior-mean interpolation."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        cross = kernel_matrix(self.kernel, x, self.x)
        raw = self.mean + cross @ self._solve_alpha()
        return apply_bowl_and_offset(raw, self.x_opt, x, self.delta_y)

    def extend(self, x_new: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Draw utilities at fresh points from the posterior conditioned on
        the support set, without growing the support set itself."""
        raw = _conditional_draw(
            self.kernel, self.mean, np.atleast_2d(x_new), self.x, self.y_raw, rng
        )
        return apply_bowl_and_offset(raw, self.x_opt, np.atleast_2d(x_new), self.delta_y)


def _conditional_draw(
    spec: KernelSpec,
    mean: float,
    x_new: np.ndarray,
    x_obs: np.ndarray,
    y_obs: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Joint sample of the GP at ``x_new`` given observations at ``x_obs``."""
    sigma2 = spec.sigma**2
    k_oo = kernel_matrix(spec, x_obs, x_obs)
    chol = _chol_with_jitter(k_oo, sigma2)
    k_no = kernel_matrix(spec, x_new, x_obs)
    # solve K_oo^{-1} via the Cholesky factor
    tmp = np.linalg.solve(chol, k_no.T)
    post_mean = mean + tmp.T @ np.linalg.solve(chol, y_obs - mean)
    post_cov = kernel_matrix(spec, x_new, x_new) - tmp.T @ tmp
    chol_post = _chol_with_jitter(post_cov, sigma2)
    return post_mean + chol_post @ rng.standard_normal(x_new.shape[0])


def sample_gp_function(
    spec: KernelSpec, dimension: int, rng: np.random.Generator
) -> SampledFunction:
    """Sample one latent utility: a GP draw with a planted optimum at a
    uniform location, densified in two conditioning stages, then passed
    through the bowl-and-offset transform."""
    if not 1 <= dimension <= 6:
        raise ValueError(f"dimension must be in 1..6, got {dimension}")
    if spec.dimension != dimension:
        raise ValueError("kernel lengthscale count does not match dimension")

    mean = float(np.max(rng.normal(0.0, spec.sigma, size=MEAN_DRAWS)))
    if rng.random() < HIGH_MEAN_PROB:
        mean += math.e

    n_total = 100 * dimension
    n_first = 50 if dimension == 1 else 100

    x_opt = rng.uniform(-1.0, 1.0, size=dimension)
    x = np.empty((n_total, dimension))
    y_raw = np.empty(n_total)
    x[0] = x_opt
    y_raw[0] = 0.0

    x[1:n_first] = rng.uniform(-1.0, 1.0, size=(n_first - 1, dimension))
    y_raw[1:n_first] = _conditional_draw(
        spec, mean, x[1:n_first], x[:1], y_raw[:1], rng
    )
    if n_total > n_first:
        x[n_first:] = rng.uniform(-1.0, 1.0, size=(n_total - n_first, dimension))
        y_raw[n_first:] = _conditional_draw(
            spec, mean, x[n_first:], x[:n_first], y_raw[:n_first], rng
        )

    delta_y = rng.uniform(*OFFSET_RANGE)
    return SampledFunction(
        dimension=dimension,
        kernel=spec,
        mean=mean,
        x=x,
        y_raw=y_raw,
        x_opt=x_opt,
        delta_y=delta_y,
    )


# ---------------------------------------------------------------------------
# Classical test functions (maximization orientation: minima are negated)
# ---------------------------------------------------------------------------


def _forrester(x):
    return (6 * x[:, 0] - 2) ** 2 * np.sin(12 * x[:, 0] - 4)


def _branin(x):
    x1, x2 = x[:, 0], x[:, 1]
    a, b, c = 1.0, 5.1 / (4 * np.pi**2), 5 / np.pi
    r, s, t = 6.0, 10.0, 1 / (8 * np.pi)
    return a * (x2 - b * x1**2 + c * x1 - r) ** 2 + s * (1 - t) * np.cos(x1) + s


def _beale(x):
    x1, x2 = x[:, 0], x[:, 1]
    return (
        (1.5 - x1 + x1 * x2) ** 2
        + (2.25 - x1 + x1 * x2**2) ** 2
        + (2.625 - x1 + x1 * x2**3) ** 2
    )


def _ackley6(x):
    a, b, c = 20.0, 0.2, 2 * np.pi
    d = x.shape[1]
    term1 = -a * np.exp(-b * np.sqrt(np.mean(x**2, axis=1)))
    term2 = -np.exp(np.mean(np.cos(c * x), axis=1))
    return term1 + term2 + a + np.e


_HARTMANN6_A = np.array(
    [
        [10, 3, 17, 3.5, 1.7, 8],
        [0.05, 10, 17, 0.1, 8, 14],
        [3, 3.5, 1.7, 10, 17, 8],
        [17, 8, 0.05, 10, 0.1, 14],
    ]
)
_HARTMANN6_P = 1e-4 * np.array(
    [
        [1312, 1696, 5569, 124, 8283, 5886],
        [2329, 4135, 8307, 3736, 1004, 9991],
        [2348, 1451, 3522, 2883, 3047, 6650],
        [4047, 8828, 8732, 5743, 1091, 381],
    ]
)
_HARTMANN6_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])


def _hartmann6(x):
    inner = np.sum(_HARTMANN6_A[None] * (x[:, None, :] - _HARTMANN6_P[None]) ** 2, axis=2)
    return -np.sum(_HARTMANN6_ALPHA[None] * np.exp(-inner), axis=1)


_TEST_FUNCTIONS = {
    "forrester": (_forrester, [(0.0, 1.0)]),
    "branin": (_branin, [(-5.0, 10.0), (0.0, 15.0)]),
    "beale": (_beale, [(-4.5, 4.5)] * 2),
    "ackley6": (_ackley6, [(-32.768, 32.768)] * 6),
    "hartmann6": (_hartmann6, [(0.0, 1.0)] * 6),
}


@dataclass(frozen=True)
class TestFunction:
    """A named benchmark objective, negated so that larger is better."""

    __test__ = False  # not a pytest class despite the name

    name: str

    def __post_init__(self):
        if self.name not in _TEST_FUNCTIONS:
            raise ValueError(f"unknown test function: {self.name!r}")

    @property
    def bounds(self) -> np.ndarray:
        return np.asarray(_TEST_FUNCTIONS[self.name][1], dtype=np.float64)

    @property
    def dimension(self) -> int:
        return len(_TEST_FUNCTIONS[self.name][1])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        b = self.bounds
        if x.shape[1] != b.shape[0]:
            raise ValueError("point dimension does not match function domain")
        if np.any(x < b[:, 0] - 1e-12) or np.any(x > b[:, 1] + 1e-12):
            raise ValueError(f"point outside {self.name} domain")
        return -_TEST_FUNCTIONS[self.name][0](x)

    def eval_unit(self, u: np.ndarray) -> np.ndarray:
        """Evaluate at points given in model coordinates [-1, 1]^D."""
        return self(self.from_unit(u))

    def from_unit(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        b = self.bounds
        return b[:, 0] + (u + 1.0) / 2.0 * (b[:, 1] - b[:, 0])

    def to_unit(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        b = self.bounds
        return 2.0 * (x - b[:, 0]) / (b[:, 1] - b[:, 0]) - 1.0


def eval_test_function(f: TestFunction, x: np.ndarray) -> np.ndarray:
    return f(x)

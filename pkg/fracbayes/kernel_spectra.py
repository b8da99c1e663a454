"""
Stationary kernels on [0,1] and their Fourier eigensystems
"""

import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np
from scipy import integrate, linalg, special

from config import (
    EIGEN_QUAD_ABS_TOL, EIGEN_TRUNCATION, ENTROPY_CONSTANT, EVEN_KERNEL_TOL,
    GRAM_MIN_GRID, NEGATIVE_EIGEN_TOL,
)
from fracbayes.exceptions import (
    ArgumentError, DomainError, OracleError, QuadratureError, RangeError,
    UnsupportedKernelError,
)
from fracbayes.run_logger import run_logger

logger = logging.getLogger(__name__)

SQUARED_EXPONENTIAL = "squared-exponential"
MATERN = "matern"
USER_DEFINED = "user-defined"

FAMILY_ALIASES = {
    "se": SQUARED_EXPONENTIAL,
    "squared-exponential": SQUARED_EXPONENTIAL,
    "sqexp": SQUARED_EXPONENTIAL,
    "matern": MATERN,
}


@dataclass(frozen=True)
class StationaryKernel:
    """k(t) for t in [-1, 1] with inverse bandwidth a (and smoothness nu for Matern)"""

    family: str
    a: float
    nu: Optional[float] = None
    evaluator: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False)
    name: str = ""

    def __call__(self, t) -> np.ndarray:
        t = np.abs(np.asarray(t, dtype=float))
        if self.family == SQUARED_EXPONENTIAL:
            return np.exp(-(self.a * t) ** 2)
        if self.family == MATERN:
            return _matern(self.a * t, self.nu)
        return np.asarray(self.evaluator(np.asarray(t, dtype=float)), dtype=float)

    @property
    def k0(self) -> float:
        return float(self(0.0))

    @property
    def builtin(self) -> bool:
        return self.family in (SQUARED_EXPONENTIAL, MATERN)

    def label(self) -> str:
        if self.family == MATERN:
            return f"matern(a={self.a:g}, nu={self.nu:g})"
        if self.family == SQUARED_EXPONENTIAL:
            return f"se(a={self.a:g})"
        return self.name or "user-defined"


def _matern(x: np.ndarray, nu: float) -> np.ndarray:
    """Unit-variance Matern correlation as a function of x = a|t|"""
    if nu == 0.5:
        return np.exp(-x)
    if nu == 1.5:
        return (1.0 + x) * np.exp(-x)
    if nu == 2.5:
        return (1.0 + x + x ** 2 / 3.0) * np.exp(-x)
    x = np.asarray(x, dtype=float)
    flat = np.atleast_1d(x).astype(float)
    out = np.ones_like(flat)
    positive = flat > 0
    xp = flat[positive]
    out[positive] = 2.0 ** (1.0 - nu) / special.gamma(nu) * xp ** nu * special.kv(nu, xp)
    return out.reshape(x.shape)


def squared_exponential(a: float) -> StationaryKernel:
    if a <= 0:
        raise ArgumentError("inverse bandwidth a must be positive")
    return StationaryKernel(SQUARED_EXPONENTIAL, float(a))


def matern(a: float, nu: float) -> StationaryKernel:
    if a <= 0 or nu <= 0:
        raise ArgumentError("Matern needs a > 0 and nu > 0")
    if math.isinf(nu):
        logger.info(f"Matern with nu=inf taken as squared-exponential with a={a}")
        return squared_exponential(a)
    return StationaryKernel(MATERN, float(a), float(nu))


def user_kernel(evaluator: Callable[[np.ndarray], np.ndarray], name: str = "user-defined",
                a: float = 1.0) -> StationaryKernel:
    """Wrap an arbitrary even kernel; evenness is checked on a grid"""
    grid = np.linspace(0.0, 1.0, 201)
    gap = np.max(np.abs(np.asarray(evaluator(grid)) - np.asarray(evaluator(-grid))))
    if gap > EVEN_KERNEL_TOL:
        raise ArgumentError(f"kernel {name} is not even (max |k(t) - k(-t)| = {gap:.3g})")
    return StationaryKernel(USER_DEFINED, float(a), None, lambda t: evaluator(t), name)


def make_kernel(family: str, a: float, nu: Optional[float] = None) -> StationaryKernel:
    """Kernel from a family tag as used in configs and on the command line"""
    tag = FAMILY_ALIASES.get(str(family).lower())
    if tag == SQUARED_EXPONENTIAL:
        return squared_exponential(a)
    if tag == MATERN:
        if nu is None:
            raise ArgumentError("Matern kernel needs nu")
        return matern(a, nu)
    raise UnsupportedKernelError(f"unknown kernel family '{family}'")


@dataclass(frozen=True)
class EigenSystem:
    """Eigenvalues in the order constant, sin(pi x), cos(pi x), sin(2 pi x), ..."""

    kernel: StationaryKernel
    eigenvalues: np.ndarray
    clamped: int = 0
    indefinite: int = 0

    @property
    def m(self) -> int:
        return int(self.eigenvalues.size)

    @staticmethod
    def frequency(index: int) -> int:
        return (index + 1) // 2

    @staticmethod
    def eigenfunction_id(index: int) -> str:
        if index == 0:
            return "1"
        j = (index + 1) // 2
        return f"sin({j}*pi*x)" if index % 2 == 1 else f"cos({j}*pi*x)"

    def __getitem__(self, index: int) -> float:
        if not 0 <= index < self.m:
            raise RangeError(f"eigen index {index} beyond truncation m={self.m}")
        return float(self.eigenvalues[index])

    def mercer_eigenvalues(self) -> np.ndarray:
        """Operator eigenvalues under the uniform probability measure on one period"""
        return self.eigenvalues / 2.0

    def top(self, count: int) -> np.ndarray:
        """Largest Mercer eigenvalues, sorted descending"""
        return np.sort(self.mercer_eigenvalues())[::-1][:count]


@dataclass(frozen=True)
class TensorMultiIndex:
    """Per-coordinate eigen indices v_j for the coordinates of a model"""

    entries: Tuple[Tuple[int, int], ...]

    @classmethod
    def from_mapping(cls, mapping: Mapping[int, int]) -> "TensorMultiIndex":
        if any(v < 0 for v in mapping.values()):
            raise ArgumentError("tensor indices must be nonnegative")
        return cls(tuple(sorted((int(k), int(v)) for k, v in mapping.items())))

    @property
    def coordinates(self) -> Tuple[int, ...]:
        return tuple(c for c, _ in self.entries)

    @property
    def indices(self) -> Tuple[int, ...]:
        return tuple(v for _, v in self.entries)


class KernelSpectra:
    """Exact eigensystems, spectral densities and oracles for stationary kernels"""

    def __init__(self):
        self.truncation = EIGEN_TRUNCATION
        self.quad_abs_tol = EIGEN_QUAD_ABS_TOL
        self.negative_tol = NEGATIVE_EIGEN_TOL
        self.entropy_constant = ENTROPY_CONSTANT
        self.min_grid = GRAM_MIN_GRID

    def _cosine_integral(self, kernel: StationaryKernel, j: int) -> float:
        """Integral of k(t) cos(j pi t) over [-1, 1]"""
        fn = lambda t: float(kernel(t))
        if j == 0:
            result = integrate.quad(fn, 0.0, 1.0, epsabs=self.quad_abs_tol, epsrel=1e-12,
                                    limit=200, full_output=1)
        else:
            result = integrate.quad(fn, 0.0, 1.0, weight="cos", wvar=j * math.pi,
                                    epsabs=self.quad_abs_tol, epsrel=1e-12, limit=200,
                                    full_output=1)
        value, abserr, info = result[0], result[1], result[2]
        if abserr > 1e3 * self.quad_abs_tol + 1e-10 * abs(value):
            panels = info.get("last", "?") if isinstance(info, dict) else "?"
            raise QuadratureError(
                f"{kernel.label()} frequency {j}: error estimate {abserr:.3g} "
                f"after {panels} panels"
            )
        return 2.0 * value

    def eigensystem(self, kernel: StationaryKernel, m: Optional[int] = None) -> EigenSystem:
        """First m eigenvalues eta_0 = int k, eta_{2j-1} = eta_{2j} = int k cos(j pi t)"""
        m = self.truncation if m is None else int(m)
        if m < 1:
            raise ArgumentError("eigensystem needs m >= 1")

        n_freq = m // 2
        eigenvalues = np.empty(m)
        eigenvalues[0] = self._cosine_integral(kernel, 0)
        for j in range(1, n_freq + 1):
            value = self._cosine_integral(kernel, j)
            eigenvalues[2 * j - 1] = value
            if 2 * j < m:
                eigenvalues[2 * j] = value

        tiny = (eigenvalues < 0) & (eigenvalues >= -self.negative_tol)
        clamped = int(tiny.sum())
        eigenvalues[tiny] = 0.0
        indefinite = int((eigenvalues < 0).sum())

        if clamped:
            run_logger.log_numerical_warning(
                "eigensystem", f"{clamped} round-off negative eigenvalues clamped to 0",
                kernel=kernel.label(), clamped=clamped,
            )
        if indefinite:
            run_logger.log_numerical_warning(
                "eigensystem",
                f"{indefinite} eigenvalues below -{self.negative_tol:g}; "
                "the periodised kernel is not positive definite",
                kernel=kernel.label(), indefinite=indefinite,
                most_negative=float(eigenvalues.min()),
            )

        eigenvalues.setflags(write=False)
        return EigenSystem(kernel, eigenvalues, clamped, indefinite)

    def spectral_density(self, kernel: StationaryKernel, psi: float) -> float:
        """h(psi) = integral of exp(i psi t) k(t) dt over the real line"""
        if kernel.family == SQUARED_EXPONENTIAL:
            a = kernel.a
            return math.sqrt(math.pi) / a * math.exp(-psi ** 2 / (4.0 * a ** 2))
        if kernel.family == MATERN:
            a, nu = kernel.a, kernel.nu
            return matern_constant(nu) / a * (1.0 + psi ** 2 / a ** 2) ** (-(nu + 0.5))
        raise UnsupportedKernelError(f"no closed-form spectral density for {kernel.label()}")

    def spectral_comparator(self, kernel: StationaryKernel, j: int) -> float:
        """Spectral density at the mode's frequency j*pi"""
        if j < 0:
            raise RangeError("frequency must be nonnegative")
        return self.spectral_density(kernel, j * math.pi)

    def asymptotic_eigenvalue(self, kernel: StationaryKernel, j: int) -> float:
        """Constant-free comparator for eta_{2j}"""
        if j < 0:
            raise RangeError("frequency must be nonnegative")
        a = kernel.a
        if kernel.family == SQUARED_EXPONENTIAL:
            if j == 0:
                return 1.0 / a
            if j > a ** 2:
                raise RangeError(
                    f"squared-exponential comparator holds for j <= a^2 = {a ** 2:g}, got j={j}"
                )
            return math.exp(-j ** 2 / a ** 2) / a
        if kernel.family == MATERN:
            return (1.0 + j ** 2 / a ** 2) ** (-(kernel.nu + 0.5)) / a
        raise UnsupportedKernelError(f"no eigenvalue asymptotics for {kernel.label()}")

    def tensor_eigenvalue(self, eig: EigenSystem, v: TensorMultiIndex) -> float:
        """Product of one-dimensional eigenvalues over the coordinates of v"""
        value = 1.0
        for index in v.indices:
            value *= eig[index]
        return value

    def entropy_lower_bound(self, a: float, d: int, eps: float,
                            constant: Optional[float] = None) -> float:
        """C (a^d / d^d) [log(1 / (eps a^(d/2)))]^((d+2)/2)"""
        constant = self.entropy_constant if constant is None else constant
        if a < 2:
            raise DomainError(f"entropy bound needs a >= 2, got {a}")
        if d < 1:
            raise DomainError(f"entropy bound needs d >= 1, got {d}")
        ceiling = a ** (-d / 2.0)
        if not 0 < eps < ceiling:
            raise DomainError(f"entropy bound needs 0 < eps < a^(-d/2) = {ceiling:.6g}, got {eps}")
        log_term = math.log(1.0 / (eps * a ** (d / 2.0)))
        return constant * (a ** d / d ** d) * log_term ** ((d + 2) / 2.0)

    def gram_eigen_oracle(self, kernel: StationaryKernel, grid_size: int,
                          periodic: bool = True) -> np.ndarray:
        """Eigenvalues of the Gram matrix scaled by 1/grid_size, sorted descending.

        periodic=True uses a uniform grid over one period with wrapped lags
        and reproduces the Mercer eigenvalues of the circle eigensystem.
        periodic=False uses the midpoint grid on [0,1] with plain lags and
        approximates the integral operator of k(s - t) on L2(Uniform[0,1]).
        """
        if grid_size < self.min_grid:
            raise ArgumentError(f"grid_size must be at least {self.min_grid}")
        if periodic:
            x = 2.0 * np.arange(grid_size) / grid_size
            diff = np.mod(x[:, None] - x[None, :] + 1.0, 2.0) - 1.0
        else:
            x = (np.arange(grid_size) + 0.5) / grid_size
            diff = x[:, None] - x[None, :]
        gram = kernel(diff) / grid_size
        try:
            values = linalg.eigvalsh(gram)
        except linalg.LinAlgError as e:
            raise OracleError(f"Gram eigensolver failed for {kernel.label()}: {e}") from e
        return np.sort(values)[::-1]

    def eigen_table(self, kernel: StationaryKernel, m: int) -> List[Dict[str, object]]:
        """Rows of index, eigenvalue, eigenfunction id, comparator and ratio"""
        eig = self.eigensystem(kernel, m)
        rows = []
        for index in range(eig.m):
            j = eig.frequency(index)
            try:
                comparator = self.asymptotic_eigenvalue(kernel, j)
            except (RangeError, UnsupportedKernelError):
                comparator = math.nan
            value = eig[index]
            rows.append({
                "index": index,
                "eigenvalue": value,
                "eigenfunction": eig.eigenfunction_id(index),
                "comparator": comparator,
                "ratio": value / comparator if comparator and not math.isnan(comparator) else math.nan,
            })
        return rows


@functools.lru_cache(maxsize=64)
def matern_constant(nu: float) -> float:
    """C with total spectral mass 2 pi k(0), found by numerical integration.

    The spectral density is normalised like the squared exponential one,
    h(psi) = integral of k(t) exp(-i psi t) dt, so it integrates to 2 pi
    rather than 1; divide by 2 pi for a probability density.
    """
    shape = lambda u: (1.0 + u * u) ** (-(nu + 0.5))
    mass, _ = integrate.quad(shape, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-12, limit=400)
    return 2.0 * math.pi / mass


# Global kernel spectra instance
kernel_spectra = KernelSpectra()

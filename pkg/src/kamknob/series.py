"""Sparse Fourier-Taylor series in action-angle variables.

A series represents a real function

    f(p, q) = sum_{m, k} c_{m,k} p^m exp(i k.q)

with ``m`` a vector of non-negative powers of the actions and ``k`` an integer
wave vector.  Terms are stored as three parallel arrays ``(m, k, c)`` sorted
lexicographically by ``(m, k)``; zero coefficients are never stored and every
``(m, k)`` is accompanied by its Hermitian partner ``(m, -k)`` carrying the
conjugate coefficient.

The Lie derivative is oriented as ``L_chi f = {f, chi}`` with the bracket

    {f, g} = sum_j (df/dq_j dg/dp_j - df/dp_j dg/dq_j).

With that orientation ``chi = sum c_k / (i k.omega) exp(i k.q)`` solves
``L_chi(omega.p) + h = 0`` for a zero-average ``h``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "DomainParams",
    "TruncationPolicy",
    "FourierTaylor",
    "SeriesError",
    "DimensionMismatch",
    "SymmetryError",
    "LieSeries",
    "multiply",
    "poisson_bracket",
    "lie_derivative",
    "lie_series_terms",
    "lie_series_apply",
    "angle_average",
    "grade_project",
    "weighted_norm",
    "evaluate",
    "derivative_p",
    "derivative_q",
    "linear_form",
    "Evaluator",
]

_KEY_LIMIT = 2**62


class SeriesError(Exception):
    """Base class for series algebra errors."""


class DimensionMismatch(SeriesError, ValueError):
    pass


class SymmetryError(SeriesError):
    """A series lost its Hermitian symmetry (the function is no longer real)."""


@dataclass(frozen=True)
class DomainParams:
    """Complex domain radii: ``rho`` for the actions, ``sigma`` for the angles."""

    rho: float
    sigma: float

    def __post_init__(self) -> None:
        if not (self.rho > 0 and self.sigma > 0):
            raise ValueError(f"domain parameters must be positive, got rho={self.rho}, sigma={self.sigma}")

    def scaled(self, factor: float) -> "DomainParams":
        return DomainParams(self.rho * factor, self.sigma * factor)


@dataclass(frozen=True)
class TruncationPolicy:
    """Truncation caps shared by all series operations.

    ``p_degree`` and ``fourier_order`` bound ``|m|`` and ``|k|`` of every stored
    term.  ``coeff_floor`` drops coefficients whose modulus is below it.  The
    weighted norm of everything dropped is charged to the result's ``loss``,
    measured at ``loss_domain`` (plain coefficient moduli when unset).
    ``lie_order`` and ``tail_tol`` control Lie series summation.
    """

    p_degree: int = 4
    fourier_order: int = 32
    lie_order: int = 12
    tail_tol: float = 1e-16
    coeff_floor: float = 1e-40
    loss_domain: DomainParams | None = None

    def __post_init__(self) -> None:
        if self.p_degree < 0 or self.fourier_order < 0:
            raise ValueError("truncation caps must be non-negative")
        if self.lie_order < 1:
            raise ValueError("lie_order must be at least 1")

    def at(self, dom: DomainParams | None) -> "TruncationPolicy":
        """Copy of the policy measuring losses on ``dom``."""
        if dom == self.loss_domain:
            return self
        return TruncationPolicy(
            self.p_degree, self.fourier_order, self.lie_order, self.tail_tol, self.coeff_floor, dom
        )


def _as_int2d(a, n: int) -> np.ndarray:
    arr = np.asarray(a, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, n), dtype=np.int64)
    return arr.reshape(-1, n)


def _encode(m: np.ndarray, k: np.ndarray, dmax: int, kmax: int) -> np.ndarray | None:
    """Mixed-radix key preserving lexicographic (m, k) order, or None on overflow."""
    n = m.shape[1]
    bm, bk = dmax + 1, 2 * kmax + 1
    if float(bm) ** n * float(bk) ** n >= _KEY_LIMIT:
        return None
    key = np.zeros(m.shape[0], dtype=np.int64)
    for j in range(n):
        key = key * bm + m[:, j]
    for j in range(n):
        key = key * bk + (k[:, j] + kmax)
    return key


def _decode(key: np.ndarray, n: int, dmax: int, kmax: int) -> tuple[np.ndarray, np.ndarray]:
    bm, bk = dmax + 1, 2 * kmax + 1
    m = np.empty((key.size, n), dtype=np.int64)
    k = np.empty((key.size, n), dtype=np.int64)
    rest = key.copy()
    for j in range(n - 1, -1, -1):
        rest, k[:, j] = np.divmod(rest, bk)
    k -= kmax
    for j in range(n - 1, -1, -1):
        rest, m[:, j] = np.divmod(rest, bm)
    return m, k


def _combine(n: int, m: np.ndarray, k: np.ndarray, c: np.ndarray):
    """Sort by (m, k) and sum duplicate indices.  Summation order is the input order."""
    if c.size == 0:
        return m, k, c
    dmax = int(m.max(initial=0))
    kmax = int(np.abs(k).max(initial=0))
    key = _encode(m, k, dmax, kmax)
    if key is not None:
        uniq, inv = np.unique(key, return_inverse=True)
        if uniq.size == key.size:
            order = np.argsort(key, kind="stable")
            return m[order], k[order], c[order]
        re = np.bincount(inv, weights=c.real, minlength=uniq.size)
        im = np.bincount(inv, weights=c.imag, minlength=uniq.size)
        mm, kk = _decode(uniq, n, dmax, kmax)
        return mm, kk, re + 1j * im
    rows = np.concatenate([m, k], axis=1)
    uniq, inv = np.unique(rows, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    re = np.bincount(inv, weights=c.real, minlength=uniq.shape[0])
    im = np.bincount(inv, weights=c.imag, minlength=uniq.shape[0])
    return uniq[:, :n].copy(), uniq[:, n:].copy(), re + 1j * im


def _partner_index(m: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Index of (m, -k) for each sorted row, -1 when absent."""
    n = m.shape[1]
    dmax = int(m.max(initial=0))
    kmax = int(np.abs(k).max(initial=0))
    key = _encode(m, k, dmax, kmax)
    if key is None:
        lookup = {(tuple(a), tuple(b)): i for i, (a, b) in enumerate(zip(m.tolist(), k.tolist()))}
        return np.array([lookup.get((tuple(a), tuple(-np.asarray(b))), -1) for a, b in zip(m.tolist(), k.tolist())])
    pkey = _encode(m, -k, dmax, kmax)
    idx = np.searchsorted(key, pkey)
    idx = np.minimum(idx, key.size - 1)
    return np.where(key[idx] == pkey, idx, -1)


def _weights(m: np.ndarray, k: np.ndarray, dom: DomainParams | None) -> np.ndarray:
    if dom is None:
        return np.ones(m.shape[0])
    return dom.rho ** m.sum(axis=1) * np.exp(np.abs(k).sum(axis=1) * dom.sigma)


class FourierTaylor:
    """Immutable sparse Fourier-Taylor series in ``n`` action-angle pairs.

    Build series with :meth:`from_terms` or the small constructors
    (:meth:`constant`, :meth:`action`, :meth:`cos`, :meth:`sin`, ...).  Two
    series compare equal iff their term maps are equal.  ``loss`` carries the
    weighted norm of whatever truncation dropped while producing the series;
    it is metadata and does not take part in equality.
    """

    __slots__ = ("n", "m", "k", "c", "loss")

    def __init__(self, n: int, m=None, k=None, c=None, loss: float = 0.0, *, _trusted: bool = False):
        if n < 1:
            raise ValueError("dimension must be positive")
        self.n = int(n)
        if _trusted:
            self.m, self.k, self.c = m, k, c
        else:
            m = _as_int2d(m if m is not None else [], n)
            k = _as_int2d(k if k is not None else [], n)
            c = np.asarray(c if c is not None else [], dtype=np.complex128).reshape(-1)
            if not (m.shape[0] == k.shape[0] == c.shape[0]):
                raise ValueError("term arrays have inconsistent lengths")
            if (m < 0).any():
                raise ValueError("action powers must be non-negative")
            m, k, c = _combine(self.n, m, k, c)
            keep = c != 0
            self.m, self.k, self.c = m[keep], k[keep], c[keep]
            self._check_hermitian()
        for arr in (self.m, self.k, self.c):
            arr.setflags(write=False)
        self.loss = float(loss)

    # -- construction -------------------------------------------------
    @classmethod
    def zero(cls, n: int) -> "FourierTaylor":
        return cls(n)

    @classmethod
    def from_terms(cls, n: int, terms: Mapping[tuple[Sequence[int], Sequence[int]], complex]) -> "FourierTaylor":
        """Series from ``{(m, k): coefficient}``; both halves of every pair must be given."""
        items = list(terms.items())
        m = [tuple(key[0]) for key, _ in items]
        k = [tuple(key[1]) for key, _ in items]
        c = [complex(v) for _, v in items]
        return cls(n, m, k, c)

    @classmethod
    def real_terms(cls, n: int, terms: Iterable[tuple[Sequence[int], Sequence[int], complex]]) -> "FourierTaylor":
        """Series from terms given once per +/-k pair; partners are added as conjugates.

        A term with ``k = 0`` must carry a real coefficient.
        """
        m, k, c = [], [], []
        for mi, ki, ci in terms:
            ki = tuple(int(x) for x in ki)
            if not any(ki):
                m.append(tuple(mi)); k.append(ki); c.append(complex(ci).real)
                continue
            m.append(tuple(mi)); k.append(ki); c.append(complex(ci))
            m.append(tuple(mi)); k.append(tuple(-x for x in ki)); c.append(complex(ci).conjugate())
        return cls(n, m, k, c)

    @classmethod
    def constant(cls, n: int, value: float) -> "FourierTaylor":
        return cls(n, [[0] * n], [[0] * n], [value])

    @classmethod
    def action(cls, n: int, j: int, coeff: float = 1.0) -> "FourierTaylor":
        """The monomial ``coeff * p_j``."""
        m = [0] * n
        m[j] = 1
        return cls(n, [m], [[0] * n], [coeff])

    @classmethod
    def monomial(cls, n: int, m: Sequence[int], coeff: float = 1.0) -> "FourierTaylor":
        """Angle-independent monomial ``coeff * p^m``."""
        return cls(n, [list(m)], [[0] * n], [coeff])

    @classmethod
    def cos(cls, n: int, k: Sequence[int], amp: float = 1.0, m: Sequence[int] | None = None) -> "FourierTaylor":
        """``amp * p^m * cos(k.q)``."""
        m = list(m) if m is not None else [0] * n
        k = list(k)
        if not any(k):
            return cls(n, [m], [k], [amp])
        return cls(n, [m, m], [k, [-x for x in k]], [amp / 2, amp / 2])

    @classmethod
    def sin(cls, n: int, k: Sequence[int], amp: float = 1.0, m: Sequence[int] | None = None) -> "FourierTaylor":
        """``amp * p^m * sin(k.q)``."""
        m = list(m) if m is not None else [0] * n
        k = list(k)
        if not any(k):
            return cls(n)
        return cls(n, [m, m], [k, [-x for x in k]], [-0.5j * amp, 0.5j * amp])

    # -- basic protocol -----------------------------------------------
    def __len__(self) -> int:
        return int(self.c.size)

    def __bool__(self) -> bool:
        return self.c.size > 0

    def __iter__(self) -> Iterator[tuple[tuple[int, ...], tuple[int, ...], complex]]:
        for mi, ki, ci in zip(self.m.tolist(), self.k.tolist(), self.c.tolist()):
            yield tuple(mi), tuple(ki), ci

    @property
    def terms(self) -> dict[tuple[tuple[int, ...], tuple[int, ...]], complex]:
        return {(mi, ki): ci for mi, ki, ci in self}

    def coefficient(self, m: Sequence[int], k: Sequence[int]) -> complex:
        return self.terms.get((tuple(m), tuple(k)), 0j)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FourierTaylor):
            return NotImplemented
        return (
            self.n == other.n
            and self.c.size == other.c.size
            and np.array_equal(self.m, other.m)
            and np.array_equal(self.k, other.k)
            and np.array_equal(self.c, other.c)
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        if not self:
            return f"FourierTaylor(n={self.n}, 0)"
        shown = ", ".join(f"{c:.3g}*p^{m}*e^(i{k}.q)" for m, k, c in list(self)[:4])
        more = "" if len(self) <= 4 else f", ... ({len(self)} terms)"
        return f"FourierTaylor(n={self.n}, {shown}{more})"

    # -- properties -----------------------------------------------------
    @property
    def degree(self) -> int:
        """Largest ``|m|`` present, -1 for the zero series."""
        return int(self.m.sum(axis=1).max()) if self else -1

    @property
    def fourier_order(self) -> int:
        return int(np.abs(self.k).sum(axis=1).max()) if self else 0

    def grades(self) -> list[int]:
        return sorted(set(self.m.sum(axis=1).tolist()))

    def max_abs(self) -> float:
        return float(np.abs(self.c).max()) if self else 0.0

    def is_hermitian(self, tol: float = 0.0) -> bool:
        if not self:
            return True
        idx = _partner_index(self.m, self.k)
        if (idx < 0).any():
            return False
        return bool(np.all(np.abs(self.c - np.conj(self.c[idx])) <= tol * np.maximum(1.0, np.abs(self.c))))

    def _check_hermitian(self) -> None:
        if not self.is_hermitian(tol=1e-12):
            raise SymmetryError("series is not Hermitian: c(m,-k) must equal conj(c(m,k))")

    # -- arithmetic -----------------------------------------------------
    def _check(self, other: "FourierTaylor") -> None:
        if self.n != other.n:
            raise DimensionMismatch(f"dimension mismatch: {self.n} vs {other.n}")

    def __add__(self, other):
        if isinstance(other, (int, float)):
            other = FourierTaylor.constant(self.n, float(other))
        if not isinstance(other, FourierTaylor):
            return NotImplemented
        self._check(other)
        if not other:
            return self
        if not self:
            return other
        return _assemble(
            self.n,
            np.concatenate([self.m, other.m]),
            np.concatenate([self.k, other.k]),
            np.concatenate([self.c, other.c]),
            loss=self.loss + other.loss,
        )

    __radd__ = __add__

    def __neg__(self) -> "FourierTaylor":
        return FourierTaylor(self.n, self.m, self.k, -self.c, self.loss, _trusted=True)

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            other = FourierTaylor.constant(self.n, float(other))
        if not isinstance(other, FourierTaylor):
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, scalar):
        if isinstance(scalar, FourierTaylor):
            return multiply(self, scalar)
        if not isinstance(scalar, (int, float, np.floating, np.integer)):
            return NotImplemented
        scalar = float(scalar)
        loss = self.loss * abs(scalar)
        if scalar == 0.0 or not self:
            return FourierTaylor(self.n, loss=loss)
        return FourierTaylor(self.n, self.m, self.k, self.c * scalar, loss, _trusted=True)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if not isinstance(scalar, (int, float, np.floating, np.integer)):
            return NotImplemented
        return self * (1.0 / float(scalar))

    def without_loss(self) -> "FourierTaylor":
        return FourierTaylor(self.n, self.m, self.k, self.c, 0.0, _trusted=True)

    def select(self, mask: np.ndarray) -> "FourierTaylor":
        """Sub-series of the rows where ``mask`` holds.  The mask must respect +/-k pairing."""
        return FourierTaylor(self.n, self.m[mask], self.k[mask], self.c[mask], self.loss, _trusted=True)

    # -- serialization ------------------------------------------------
    def to_json(self) -> dict:
        return {
            "n": self.n,
            "terms": [
                {"m": list(mi), "k": list(ki), "re": ci.real, "im": ci.imag} for mi, ki, ci in self
            ],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "FourierTaylor":
        n = int(data["n"])
        terms = data.get("terms", [])
        m = [t["m"] for t in terms]
        k = [t["k"] for t in terms]
        for t in terms:
            if len(t["m"]) != n or len(t["k"]) != n:
                raise ValueError(f"term {t} does not match dimension n={n}")
        c = [complex(float(t.get("re", 0.0)), float(t.get("im", 0.0))) for t in terms]
        return cls(n, m, k, c)


def _assemble(
    n: int,
    m: np.ndarray,
    k: np.ndarray,
    c: np.ndarray,
    policy: TruncationPolicy | None = None,
    loss: float = 0.0,
    hermitize: bool = False,
) -> FourierTaylor:
    """Canonical series from raw (possibly duplicated) terms, applying truncation."""
    if c.size == 0:
        return FourierTaylor(n, loss=loss)
    if policy is not None:
        inside = (m.sum(axis=1) <= policy.p_degree) & (np.abs(k).sum(axis=1) <= policy.fourier_order)
        if not inside.all():
            dm, dk, dc = _combine(n, m[~inside], k[~inside], c[~inside])
            loss += float(np.sum(np.abs(dc) * _weights(dm, dk, policy.loss_domain)))
            m, k, c = m[inside], k[inside], c[inside]
    m, k, c = _combine(n, m, k, c)
    if hermitize and c.size:
        idx = _partner_index(m, k)
        if (idx < 0).any():
            miss = idx < 0
            m = np.concatenate([m, m[miss]])
            k = np.concatenate([k, -k[miss]])
            c = np.concatenate([c, np.zeros(int(miss.sum()), dtype=np.complex128)])
            m, k, c = _combine(n, m, k, c)
            idx = _partner_index(m, k)
        c = 0.5 * (c + np.conj(c[idx]))
    keep = c != 0
    if policy is not None and policy.coeff_floor > 0:
        small = keep & (np.abs(c) < policy.coeff_floor)
        if small.any():
            loss += float(np.sum(np.abs(c[small]) * _weights(m[small], k[small], policy.loss_domain)))
            keep &= ~small
    return FourierTaylor(n, m[keep], k[keep], c[keep], loss, _trusted=True)


# -- derivatives ----------------------------------------------------------

def derivative_p(f: FourierTaylor, j: int) -> FourierTaylor:
    """Exact ``df/dp_j`` by index shift."""
    sel = f.m[:, j] > 0
    if not sel.any():
        return FourierTaylor(f.n)
    m = f.m[sel].copy()
    c = f.c[sel] * m[:, j]
    m[:, j] -= 1
    return _assemble(f.n, m, f.k[sel], c)


def derivative_q(f: FourierTaylor, j: int) -> FourierTaylor:
    """Exact ``df/dq_j``: multiplies each coefficient by ``i k_j``."""
    sel = f.k[:, j] != 0
    if not sel.any():
        return FourierTaylor(f.n)
    return FourierTaylor(f.n, f.m[sel], f.k[sel], 1j * f.k[sel, j] * f.c[sel], _trusted=True)


# -- products ---------------------------------------------------------------

_PAIR_CHUNK = 2_000_000
# dense accumulation pays off once the key space is not much larger than the term count
_DENSE_LIMIT = 1 << 26


def _finish(n, m, k, c, policy: TruncationPolicy | None, loss: float) -> FourierTaylor:
    """Apply caps, Hermitian symmetrization and the coefficient floor to sorted unique terms."""
    if policy is not None and c.size:
        inside = (m.sum(axis=1) <= policy.p_degree) & (np.abs(k).sum(axis=1) <= policy.fourier_order)
        if not inside.all():
            out = ~inside
            loss += float(np.sum(np.abs(c[out]) * _weights(m[out], k[out], policy.loss_domain)))
            m, k, c = m[inside], k[inside], c[inside]
    if c.size:
        idx = _partner_index(m, k)
        if (idx < 0).any():
            return _assemble(n, m, k, c, policy, loss=loss, hermitize=True)
        c = 0.5 * (c + np.conj(c[idx]))
    keep = c != 0
    if policy is not None and policy.coeff_floor > 0:
        small = keep & (np.abs(c) < policy.coeff_floor)
        if small.any():
            loss += float(np.sum(np.abs(c[small]) * _weights(m[small], k[small], policy.loss_domain)))
            keep &= ~small
    return FourierTaylor(n, m[keep], k[keep], c[keep], loss, _trusted=True)


def _product_sum(pairs: list[tuple[FourierTaylor, FourierTaylor, float]], n: int, policy: TruncationPolicy | None) -> FourierTaylor:
    """``sum sign * a * b`` over ``pairs``.

    Every term is addressed by a mixed-radix integer key that is linear in
    ``(m, k)``, so the key of a product term is the sum of its factors' keys.
    Duplicates are accumulated with ``bincount`` in a fixed order, which keeps
    the result deterministic.
    """
    pairs = [(a, b, s) for a, b, s in pairs if a and b]
    if not pairs:
        return FourierTaylor(n)
    dmax = max(int(a.m.sum(axis=1).max()) + int(b.m.sum(axis=1).max()) for a, b, _ in pairs)
    kmax = max(int(np.abs(a.k).max()) + int(np.abs(b.k).max()) for a, b, _ in pairs)
    bm, bk = dmax + 1, 2 * kmax + 1
    if float(bm) ** n * float(bk) ** n >= _KEY_LIMIT:
        raw_m, raw_k, raw_c = [], [], []
        for a, b, sign in pairs:
            raw_m.append((a.m[:, None, :] + b.m[None, :, :]).reshape(-1, n))
            raw_k.append((a.k[:, None, :] + b.k[None, :, :]).reshape(-1, n))
            raw_c.append((sign * a.c[:, None] * b.c[None, :]).reshape(-1))
        return _assemble(n, np.concatenate(raw_m), np.concatenate(raw_k), np.concatenate(raw_c), policy, hermitize=True)

    V = np.array([bk ** (n - 1 - j) for j in range(n)], dtype=np.int64)
    W = np.array([bk**n * bm ** (n - 1 - j) for j in range(n)], dtype=np.int64)
    offset = int(kmax * V.sum())
    span = bm**n * bk**n
    total = sum(a.c.size * b.c.size for a, b, _ in pairs)
    dense = span <= min(_DENSE_LIMIT, 8 * total)
    if dense:
        acc_re = np.zeros(span)
        acc_im = np.zeros(span)
    keys_l, re_l, im_l = [], [], []
    for a, b, sign in pairs:
        ka = a.m @ W + a.k @ V
        kb = b.m @ W + b.k @ V + offset
        step = max(1, _PAIR_CHUNK // b.c.size)
        for start in range(0, a.c.size, step):
            sl = slice(start, start + step)
            key = (ka[sl, None] + kb[None, :]).reshape(-1)
            val = (sign * a.c[sl, None] * b.c[None, :]).reshape(-1)
            if dense:
                acc_re += np.bincount(key, weights=val.real, minlength=span)
                acc_im += np.bincount(key, weights=val.imag, minlength=span)
            else:
                keys_l.append(key); re_l.append(val.real); im_l.append(val.imag)
    if dense:
        uniq = np.flatnonzero((acc_re != 0) | (acc_im != 0))
        c = acc_re[uniq] + 1j * acc_im[uniq]
    else:
        key = np.concatenate(keys_l)
        uniq, inv = np.unique(key, return_inverse=True)
        c = np.bincount(inv, weights=np.concatenate(re_l), minlength=uniq.size) + 1j * np.bincount(
            inv, weights=np.concatenate(im_l), minlength=uniq.size
        )
        nz = c != 0
        uniq, c = uniq[nz], c[nz]
    m, k = _decode(uniq, n, dmax, kmax)
    return _finish(n, m, k, c, policy, 0.0)


def multiply(f: FourierTaylor, g: FourierTaylor, trunc: TruncationPolicy | None = None) -> FourierTaylor:
    """Truncated product ``f * g``; indices add componentwise."""
    f._check(g)
    return _product_sum([(f, g, 1.0)], f.n, trunc)


def poisson_bracket(f: FourierTaylor, g: FourierTaylor, trunc: TruncationPolicy | None = None) -> FourierTaylor:
    """``{f, g} = sum_j (df/dq_j dg/dp_j - df/dp_j dg/dq_j)``."""
    f._check(g)
    pairs = []
    for j in range(f.n):
        fq, gp = derivative_q(f, j), derivative_p(g, j)
        fp, gq = derivative_p(f, j), derivative_q(g, j)
        pairs.append((fq, gp, 1.0))
        pairs.append((fp, gq, -1.0))
    return _product_sum(pairs, f.n, trunc)


def lie_derivative(chi: FourierTaylor, f: FourierTaylor, trunc: TruncationPolicy | None = None) -> FourierTaylor:
    """``L_chi f = {f, chi}``."""
    return poisson_bracket(f, chi, trunc)


def linear_form(n: int, vec: Sequence[float]) -> FourierTaylor:
    """The series ``vec . p``."""
    vec = np.asarray(vec, dtype=float).reshape(-1)
    if vec.size != n:
        raise DimensionMismatch(f"vector of length {vec.size} for dimension {n}")
    nz = np.nonzero(vec)[0]
    m = np.zeros((nz.size, n), dtype=np.int64)
    m[np.arange(nz.size), nz] = 1
    return FourierTaylor(n, m, np.zeros((nz.size, n), dtype=np.int64), vec[nz].astype(np.complex128))


# -- projections and norms --------------------------------------------------

def angle_average(f: FourierTaylor) -> FourierTaylor:
    """The ``k = 0`` part of ``f``."""
    return f.select(~f.k.any(axis=1))


def grade_project(f: FourierTaylor, l: int) -> FourierTaylor:
    """The ``|m| = l`` part of ``f``; the zero series for ``l = -1``."""
    if l < -1:
        raise ValueError("grade must be >= -1")
    if l == -1:
        return FourierTaylor(f.n)
    return f.select(f.m.sum(axis=1) == l)


def weighted_norm(f: FourierTaylor, dom: DomainParams) -> float:
    """``sum_k |f_k|_rho exp(|k| sigma)`` with ``|f_k|_rho <= sum_m |c_{m,k}| rho^|m|``."""
    if not f:
        return 0.0
    return float(np.sum(np.abs(f.c) * _weights(f.m, f.k, dom)))


def evaluate(f: FourierTaylor, p, q, *, tol: float = 1e-12) -> float:
    """Real value of ``f`` at a real point ``(p, q)``."""
    p = np.asarray(p, dtype=float).reshape(-1)
    q = np.asarray(q, dtype=float).reshape(-1)
    if p.size != f.n or q.size != f.n:
        raise DimensionMismatch(f"point of size {p.size},{q.size} for dimension {f.n}")
    if not f:
        return 0.0
    vals = f.c * np.prod(p[None, :] ** f.m, axis=1) * np.exp(1j * (f.k @ q))
    total = vals.sum()
    scale = max(1.0, float(np.abs(vals).sum()))
    if abs(total.imag) > tol * scale:
        raise SymmetryError(f"imaginary residue {total.imag:.3e} while evaluating a real series")
    return float(total.real)


# -- Lie series ---------------------------------------------------------------

@dataclass
class LieSeries:
    """Result of summing ``exp(L_chi) f``.

    ``tail`` is the weighted norm of the last included term; ``converged`` is
    False when the term norms were still not decreasing at the last order.
    """

    value: FourierTaylor
    tail: float
    orders: int
    converged: bool
    term_norms: list[float] = field(default_factory=list)

    @property
    def loss(self) -> float:
        return self.value.loss


def lie_series_terms(
    chi: FourierTaylor,
    f: FourierTaylor,
    policy: TruncationPolicy,
    dom: DomainParams | None = None,
    start: int = 0,
) -> Iterator[tuple[int, FourierTaylor, float]]:
    """Yield ``(s, L_chi^s f / s!, norm)`` for ``s >= start`` until the series is exhausted.

    Stops after ``policy.lie_order`` or once a term's weighted norm falls below
    ``policy.tail_tol * ||f||``, or when a term vanishes exactly.
    """
    chi._check(f)
    dom = dom or policy.loss_domain or DomainParams(1.0, 1.0)
    pol = policy.at(dom)
    ref = weighted_norm(f, dom)
    cur = f
    for s in range(0, policy.lie_order + 1):
        if s > 0:
            cur = lie_derivative(chi, cur, pol) / s
        norm = weighted_norm(cur, dom)
        if s >= start:
            yield s, cur, norm
        if not cur or (s > 0 and norm <= policy.tail_tol * ref):
            return


def lie_series_apply(
    chi: FourierTaylor,
    f: FourierTaylor,
    policy: TruncationPolicy,
    dom: DomainParams | None = None,
) -> LieSeries:
    """``exp(L_chi) f = sum_s L_chi^s f / s!`` truncated per ``policy``."""
    total = f.without_loss()
    loss = f.loss
    norms: list[float] = []
    orders = 0
    last = 0.0
    for s, term, norm in lie_series_terms(chi, f, policy, dom):
        norms.append(norm)
        orders = s
        last = norm
        if s == 0:
            continue
        loss += term.loss
        total = total + term.without_loss()
    exhausted = last == 0.0 or (orders > 0 and last <= policy.tail_tol * (norms[0] if norms else 0.0))
    decreasing = len(norms) < 3 or norms[-1] <= norms[-2]
    value = FourierTaylor(total.n, total.m, total.k, total.c, loss, _trusted=True)
    return LieSeries(value, last if orders > 0 else 0.0, orders, exhausted or decreasing, norms)


class Evaluator:
    """Series compiled for repeated evaluation at batches of real points.

    Uses the Hermitian pairing to sum only one representative per ``+/-k``
    pair, so values and gradients are real by construction.  ``dtype`` may be
    ``np.float64`` or ``np.longdouble``.
    """

    def __init__(self, f: FourierTaylor, dtype=np.float64):
        self.n = f.n
        self.dtype = np.dtype(dtype)
        k = f.k
        nz = k != 0
        first = np.argmax(nz, axis=1)
        lead = k[np.arange(k.shape[0]), first] if k.shape[0] else np.zeros(0, dtype=np.int64)
        keep = (~nz.any(axis=1)) | (lead > 0)
        weight = np.where(nz.any(axis=1), 2, 1)[keep]
        self.m = f.m[keep]
        self.k = f.k[keep].astype(self.dtype)
        self.a = (f.c.real[keep] * weight).astype(self.dtype)
        self.b = (f.c.imag[keep] * weight).astype(self.dtype)
        self.maxdeg = int(self.m.max(initial=0))

    def _powers(self, P: np.ndarray) -> np.ndarray:
        """``(points, terms)`` array of ``p^m``."""
        out = np.ones((P.shape[0], self.m.shape[0]), dtype=self.dtype)
        for j in range(self.n):
            if self.maxdeg == 0:
                break
            table = np.ones((P.shape[0], self.maxdeg + 1), dtype=self.dtype)
            for e in range(1, self.maxdeg + 1):
                table[:, e] = table[:, e - 1] * P[:, j]
            out *= table[:, self.m[:, j]]
        return out

    def _split(self, P, Q):
        P = np.asarray(P, dtype=self.dtype)
        Q = np.asarray(Q, dtype=self.dtype)
        single = P.ndim == 1
        P = P.reshape(-1, self.n)
        Q = Q.reshape(-1, self.n)
        if P.shape != Q.shape:
            raise DimensionMismatch("p and q batches differ in shape")
        return P, Q, single

    def value(self, P, Q):
        """Values at points ``(P[i], Q[i])``."""
        P, Q, single = self._split(P, Q)
        if self.m.shape[0] == 0:
            out = np.zeros(P.shape[0], dtype=self.dtype)
        else:
            ang = Q @ self.k.T
            out = (self._powers(P) * (self.a * np.cos(ang) - self.b * np.sin(ang))).sum(axis=1)
        return out[0] if single else out

    def gradient(self, P, Q):
        """``(dF/dp, dF/dq)``, each shaped like the input batch."""
        P, Q, single = self._split(P, Q)
        gp = np.zeros_like(P)
        gq = np.zeros_like(Q)
        if self.m.shape[0]:
            ang = Q @ self.k.T
            cs, sn = np.cos(ang), np.sin(ang)
            pw = self._powers(P)
            re = self.a * cs - self.b * sn
            dq = -(self.a * sn + self.b * cs)
            gq = (pw * dq) @ self.k
            for j in range(self.n):
                mj = self.m[:, j]
                if not mj.any():
                    continue
                with np.errstate(divide="ignore", invalid="ignore"):
                    # p^(m - e_j) recomputed directly to stay exact at p_j = 0
                    shifted = self.m.copy()
                    shifted[:, j] = np.maximum(mj - 1, 0)
                    sub = _Pow(self.n, shifted, self.dtype)(P)
                gp[:, j] = (sub * (mj.astype(self.dtype) * re)).sum(axis=1)
        if single:
            return gp[0], gq[0]
        return gp, gq


class _Pow:
    def __init__(self, n, m, dtype):
        self.n, self.m, self.dtype, self.maxdeg = n, m, dtype, int(m.max(initial=0))

    __call__ = Evaluator._powers

"""Observations, datasets, and the term-based design language.

Every working model in the package (linear or logistic) is specified as a list
of :class:`Term` objects.  A term is a product of covariates and of the special
binary factors A, Z, S; the empty term is the intercept.  This gives one
uniform design algebra for all nuisance and structural models, including
interaction terms.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, SchemaError

_SPECIALS = ("a", "z", "s")


@dataclass(frozen=True)
class Term:
    """One multiplicative design term.

    Parameters
    ----------
    covariate_indices :
        Multiset (stored as a sorted tuple) of covariate positions in ``[0, p)``.
        A repeated index squares the covariate.
    special_factors :
        Subset of ``{"a", "z", "s"}`` multiplied into the term.

    Notes
    -----
    The design value of a term on a row is the product of the named covariates
    and special factors; the empty term has value 1 (intercept).
    """

    covariate_indices: tuple[int, ...] = ()
    special_factors: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "covariate_indices",
                           tuple(sorted(int(i) for i in self.covariate_indices)))
        specials = frozenset(str(f).lower() for f in self.special_factors)
        unknown = specials - set(_SPECIALS)
        if unknown:
            raise ConfigurationError(f"unknown special factors {sorted(unknown)}; "
                                     f"allowed: {_SPECIALS}")
        object.__setattr__(self, "special_factors", specials)

    @staticmethod
    def intercept() -> "Term":
        return Term()

    def with_special(self, factor: str) -> "Term":
        return Term(self.covariate_indices, self.special_factors | {factor.lower()})

    @property
    def is_intercept(self) -> bool:
        return not self.covariate_indices and not self.special_factors

    def max_index(self) -> int:
        return max(self.covariate_indices, default=-1)

    def __str__(self) -> str:
        factors = [f"c{i + 1}" for i in self.covariate_indices]
        factors += [f for f in _SPECIALS if f in self.special_factors]
        return ":".join(factors) if factors else "1"


def intercept() -> Term:
    return Term()


def term(*, c: Sequence[int] = (), special: Sequence[str] = ()) -> Term:
    """Convenience constructor: ``term(c=[0, 1], special=["z"])`` is c1:c2:z."""
    return Term(tuple(c), frozenset(special))


class Family(str, Enum):
    linear_identity = "linear_identity"
    binomial_logit = "binomial_logit"


@dataclass(frozen=True)
class GLMSpec:
    """Family plus term list for one working model."""

    family: Family
    terms: tuple[Term, ...]

    def __post_init__(self) -> None:
        terms = tuple(self.terms)
        if not terms:
            raise ConfigurationError("GLMSpec needs at least one term")
        if len(set(terms)) != len(terms):
            raise ConfigurationError("duplicate terms in GLMSpec")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "family", Family(self.family))

    @property
    def k(self) -> int:
        return len(self.terms)


@dataclass(frozen=True)
class Observation:
    """A single subject: outcome, treatment, instrument-candidate, population."""

    y: float
    a: int
    z: int
    s: int
    c: tuple[float, ...]


class Dataset:
    """Column-oriented container for a cross-sectional sample.

    Columns are stored as float64 arrays; ``a``, ``z``, ``s`` are validated to
    take values in {0, 1}.  Datasets are immutable after construction and safe
    to share read-only across parallel workers.
    """

    __slots__ = ("y", "a", "z", "s", "c")

    def __init__(self, y: np.ndarray, a: np.ndarray, z: np.ndarray,
                 s: np.ndarray, c: np.ndarray) -> None:
        y = np.asarray(y, dtype=float)
        a = np.asarray(a, dtype=float)
        z = np.asarray(z, dtype=float)
        s = np.asarray(s, dtype=float)
        c = np.asarray(c, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        n = y.shape[0]
        if n < 1:
            raise SchemaError("dataset needs at least one row")
        for name, col in (("a", a), ("z", z), ("s", s)):
            if col.shape != (n,):
                raise SchemaError(f"column {name} has shape {col.shape}, expected ({n},)")
            if not np.all((col == 0.0) | (col == 1.0)):
                raise SchemaError(f"column {name} must be coded 0/1")
        if c.shape[0] != n:
            raise SchemaError(f"covariate block has {c.shape[0]} rows, expected {n}")
        for name, col in (("y", y), ("c", c)):
            if not np.all(np.isfinite(col)):
                raise SchemaError(f"non-finite values in column {name}")
        self.y = y
        self.a = a
        self.z = z
        self.s = s
        self.c = c
        for arr in (self.y, self.a, self.z, self.s, self.c):
            arr.setflags(write=False)

    # -- basic shape -------------------------------------------------------
    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.c.shape[1]

    def cov(self, j: int) -> np.ndarray:
        return self.c[:, j]

    @property
    def observations(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield Observation(float(self.y[i]), int(self.a[i]), int(self.z[i]),
                              int(self.s[i]), tuple(self.c[i]))

    # -- construction ------------------------------------------------------
    @staticmethod
    def from_observations(obs: Sequence[Observation]) -> "Dataset":
        if not obs:
            raise SchemaError("dataset needs at least one row")
        p = len(obs[0].c)
        if any(len(o.c) != p for o in obs):
            raise SchemaError("inconsistent covariate length across observations")
        return Dataset(
            np.array([o.y for o in obs]),
            np.array([o.a for o in obs]),
            np.array([o.z for o in obs]),
            np.array([o.s for o in obs]),
            np.array([o.c for o in obs]),
        )

    @staticmethod
    def from_csv(path: str) -> "Dataset":
        """Read the ``y,a,z,s,c1,...,cp`` schema.  Strict: numeric, complete."""
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise SchemaError(f"{path}: empty file") from None
            header = [h.strip() for h in header]
            expected_fixed = ["y", "a", "z", "s"]
            if header[:4] != expected_fixed:
                raise SchemaError(f"{path}: header must start with y,a,z,s "
                                  f"(got {header[:4]})")
            cov_names = header[4:]
            for j, name in enumerate(cov_names):
                if name != f"c{j + 1}":
                    raise SchemaError(f"{path}: covariate columns must be named "
                                      f"c1..cp in order (got {name!r} at position {j})")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise SchemaError(f"{path}:{lineno}: expected {len(header)} "
                                      f"fields, got {len(row)}")
                try:
                    rows.append([float(v) for v in row])
                except ValueError as exc:
                    raise SchemaError(f"{path}:{lineno}: non-numeric value ({exc})") from None
        if not rows:
            raise SchemaError(f"{path}: no data rows")
        mat = np.array(rows, dtype=float)
        if not np.all(np.isfinite(mat)):
            raise SchemaError(f"{path}: non-finite values present")
        return Dataset(mat[:, 0], mat[:, 1], mat[:, 2], mat[:, 3], mat[:, 4:])

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["y", "a", "z", "s"] + [f"c{j + 1}" for j in range(self.p)])
            for i in range(self.n):
                writer.writerow(
                    [repr(float(self.y[i])), int(self.a[i]), int(self.z[i]),
                     int(self.s[i])] + [repr(float(v)) for v in self.c[i]])

    # -- derived datasets ---------------------------------------------------
    def subset(self, mask: np.ndarray) -> "Dataset":
        mask = np.asarray(mask, dtype=bool)
        return Dataset(self.y[mask], self.a[mask], self.z[mask], self.s[mask],
                       self.c[mask])

    def take(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset(self.y[idx], self.a[idx], self.z[idx], self.s[idx],
                       self.c[idx])


class PanelDataset:
    """Two outcome measurements per unit (wide layout: y0, y1), no S column.

    Used by the difference-in-differences estimators; the outcome difference
    is computed by the estimator, never stored.
    """

    __slots__ = ("y0", "y1", "a", "z", "c")

    def __init__(self, y0: np.ndarray, y1: np.ndarray, a: np.ndarray,
                 z: np.ndarray, c: np.ndarray) -> None:
        base = Dataset(np.asarray(y0, dtype=float), a, z,
                       np.zeros(np.asarray(y0).shape[0]), c)
        y1 = np.asarray(y1, dtype=float)
        if y1.shape != base.y.shape:
            raise SchemaError("y0 and y1 must have matching length")
        if not np.all(np.isfinite(y1)):
            raise SchemaError("non-finite values in column y1")
        self.y0 = base.y
        self.y1 = y1
        self.a = base.a
        self.z = base.z
        self.c = base.c
        self.y1.setflags(write=False)

    @property
    def n(self) -> int:
        return self.y0.shape[0]

    @property
    def p(self) -> int:
        return self.c.shape[1]


class CovariateFrame:
    """A bare covariate matrix posing as a dataset view.

    Lets fitted models and joint laws be evaluated on an arbitrary covariate
    grid; the special columns default to zero and can be set to constants
    (scalar) or per-row values.
    """

    __slots__ = ("c", "a", "z", "s")

    def __init__(self, c: np.ndarray, *, a=0.0, z=0.0, s=0.0) -> None:
        c = np.asarray(c, dtype=float)
        if c.ndim == 1:
            c = c[None, :]
        if c.ndim != 2:
            raise SchemaError("covariate matrix must be 2-dimensional")
        self.c = c
        n = c.shape[0]
        self.a = np.broadcast_to(np.asarray(a, dtype=float), (n,))
        self.z = np.broadcast_to(np.asarray(z, dtype=float), (n,))
        self.s = np.broadcast_to(np.asarray(s, dtype=float), (n,))

    @property
    def n(self) -> int:
        return self.c.shape[0]

    @property
    def p(self) -> int:
        return self.c.shape[1]


# ---------------------------------------------------------------------------
# design construction
# ---------------------------------------------------------------------------

def _special_column(dataset, factor: str) -> np.ndarray:
    if factor == "a":
        return dataset.a
    if factor == "z":
        return dataset.z
    if factor == "s":
        if not hasattr(dataset, "s"):
            raise ConfigurationError("term uses S but the dataset has no S column")
        return dataset.s
    raise ConfigurationError(f"unknown special factor {factor!r}")


def build_design(dataset, terms: Sequence[Term]) -> np.ndarray:
    """Evaluate each term on each row.

    Parameters
    ----------
    dataset :
        A :class:`Dataset` (or :class:`PanelDataset` for terms without S).
    terms :
        Term list; entry (i, j) of the result is term j evaluated on row i.

    Returns
    -------
    ndarray of shape (n, k)
    """
    n = dataset.n
    p = dataset.p
    cols = []
    for t in terms:
        if t.covariate_indices and t.max_index() >= p:
            raise ConfigurationError(
                f"term {t} refers to covariate index {t.max_index()} "
                f"but the dataset has p={p}")
        col = np.ones(n)
        for j in t.covariate_indices:
            col = col * dataset.c[:, j]
        for f in sorted(t.special_factors):
            col = col * _special_column(dataset, f)
        cols.append(col)
    return np.column_stack(cols)


def design_row(c: Sequence[float], terms: Sequence[Term], *,
               a: float = 0.0, z: float = 0.0, s: float = 0.0) -> np.ndarray:
    """Evaluate terms on a bare covariate vector with given special values."""
    c = np.asarray(c, dtype=float)
    vals = np.empty(len(terms))
    for j, t in enumerate(terms):
        if t.covariate_indices and t.max_index() >= c.shape[0]:
            raise ConfigurationError(
                f"term {t} refers to covariate index {t.max_index()} "
                f"but len(c)={c.shape[0]}")
        v = 1.0
        for i in t.covariate_indices:
            v *= c[i]
        for f in t.special_factors:
            v *= {"a": a, "z": z, "s": s}[f]
        vals[j] = v
    return vals


# ---------------------------------------------------------------------------
# validation diagnostics
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    treated_reference_rows: int = 0
    zs_counts: dict[tuple[int, int], int] = field(default_factory=dict)
    az_counts_target: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(dataset: Dataset) -> ValidationReport:
    """Diagnostics for the data-side preconditions of the design.

    Reports (never raises): rows with a=1 in the reference population,
    empty population strata, and a degenerate instrument within the target
    population, plus the (z, s) and (a, z | s=1) cell counts.
    """
    report = ValidationReport()
    a, z, s = dataset.a, dataset.z, dataset.s
    bad = int(np.sum((s == 0) & (a == 1)))
    report.treated_reference_rows = bad
    if bad:
        report.violations.append(
            f"{bad} reference-population rows (s=0) have a=1; the reference "
            "population must be structurally untreated")
    for zz in (0, 1):
        for ss in (0, 1):
            report.zs_counts[(zz, ss)] = int(np.sum((z == zz) & (s == ss)))
    for aa in (0, 1):
        for zz in (0, 1):
            report.az_counts_target[(aa, zz)] = int(
                np.sum((a == aa) & (z == zz) & (s == 1)))
    n_s1 = int(np.sum(s == 1))
    n_s0 = dataset.n - n_s1
    if n_s0 == 0:
        report.violations.append("no reference-population rows (s=0)")
    if n_s1 == 0:
        report.violations.append("no target-population rows (s=1)")
    if n_s1 > 0:
        z_in_target = z[s == 1]
        if np.all(z_in_target == 0) or np.all(z_in_target == 1):
            report.warnings.append(
                "z is constant within s=1: the instrument-candidate carries "
                "no variation in the target population")
    return report


# ---------------------------------------------------------------------------
# term-string parsing:  "1 + c1 + c2 + c1:c2",  "a + a:c1",  "z:c2"
# ---------------------------------------------------------------------------

def parse_terms(text: str, p: int) -> tuple[Term, ...]:
    """Parse the `+`/`:` term grammar against covariates c1..cp.

    ``1`` is the intercept; ``c<j>`` names covariate j (1-based); ``a``, ``z``,
    ``s`` are the special factors; ``:`` forms products.
    """
    out: list[Term] = []
    for chunk in text.split("+"):
        chunk = chunk.strip()
        if not chunk:
            raise ConfigurationError(f"empty term in {text!r}")
        factors = [f.strip() for f in chunk.split(":")]
        if factors == ["1"]:
            out.append(Term())
            continue
        cov: list[int] = []
        spec: list[str] = []
        for f in factors:
            low = f.lower()
            if low == "1":
                raise ConfigurationError(f"'1' cannot appear inside a product: {chunk!r}")
            if low in _SPECIALS:
                spec.append(low)
            elif low.startswith("c") and low[1:].isdigit():
                j = int(low[1:])
                if not 1 <= j <= p:
                    raise ConfigurationError(
                        f"unknown covariate {f!r} (dataset has c1..c{p})")
                cov.append(j - 1)
            else:
                raise ConfigurationError(f"unknown factor {f!r} in term {chunk!r}")
        out.append(Term(tuple(cov), frozenset(spec)))
    if len(set(out)) != len(out):
        raise ConfigurationError(f"duplicate terms in {text!r}")
    return tuple(out)

"""Base kernels, shared-variance products and additive kernel expressions.

Inputs are rows ``x = [r, c, t, d, s]``: zone row, zone column, interval
index, demand and supply.  A :class:`KernelExpr` is a sum of
:class:`ProductKernel` terms; each term carries one overall variance and a
list of unit-variance base kernels over disjoint covariate blocks.

Hyperparameters are held outside the structure in a flat ``theta`` vector
with a fixed layout: for each term ``[variance, <factor params>...]`` in
term/factor order, followed by the observation-noise variance.  Factor
parameters are ``SE: [l]``, ``PE: [l, period]``, ``OU: [l]`` and nothing for
``CA``/``BI``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "COVARIATES",
    "FAMILY_PARAMS",
    "PRESETS",
    "BaseKernel",
    "CovariateBlock",
    "KernelExpr",
    "KernelSpecError",
    "ProductKernel",
    "eval_base",
    "eval_expr",
    "grad_input",
    "grad_theta",
    "gram_diag",
    "gram_matrix",
    "input_gradient_matrix",
    "parse_kernel_spec",
    "term_grams",
]

COVARIATES = ("r", "c", "t", "d", "s")
N_INPUTS = len(COVARIATES)

FAMILY_PARAMS = {
    "SE": ("lengthscale",),
    "PE": ("lengthscale", "period"),
    "OU": ("lengthscale",),
    "CA": (),
    "BI": (),
}

PRESETS = {
    "AGPM1": "SE(r,c,t,d,s)",
    "AGPM2": "SE(r,c,t)*SE(d,s)",
    "AGPM3": "SE(r,c) + SE(t) + SE(d) + SE(s)",
    "AGPM4": "SE(r,c)*SE(s) + SE(t)*SE(d)",
    "AGPM5": "SE(r,c)*SE(t)*SE(d) + SE(r,c)*SE(t)*SE(s)",
}


class KernelSpecError(ValueError):
    """Raised for malformed kernel-spec strings; ``position`` is 0-based."""

    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


@dataclass(frozen=True)
class CovariateBlock:
    name: str
    dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims:
            raise ValueError("covariate block needs at least one dimension")
        if any(b <= a for a, b in zip(dims, dims[1:])):
            raise ValueError(f"block dims must be strictly increasing: {dims}")
        if dims[0] < 0 or dims[-1] >= N_INPUTS:
            raise ValueError(f"block dims out of range [0, {N_INPUTS}): {dims}")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def from_names(cls, names):
        dims = sorted(COVARIATES.index(n) for n in names)
        return cls(",".join(COVARIATES[d] for d in dims), tuple(dims))


@dataclass(frozen=True)
class BaseKernel:
    family: str
    block: CovariateBlock

    def __post_init__(self):
        if self.family not in FAMILY_PARAMS:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.family == "PE" and len(self.block.dims) != 1:
            raise ValueError("PE kernel is defined on a single covariate only")

    @property
    def n_params(self):
        return len(FAMILY_PARAMS[self.family])

    def __str__(self):
        return f"{self.family}({self.block.name})"


@dataclass(frozen=True)
class ProductKernel:
    factors: tuple[BaseKernel, ...]

    def __post_init__(self):
        factors = tuple(self.factors)
        if not factors:
            raise ValueError("product kernel needs at least one factor")
        seen = set()
        for f in factors:
            overlap = seen.intersection(f.block.dims)
            if overlap:
                names = ",".join(COVARIATES[d] for d in sorted(overlap))
                raise ValueError(f"factors of one product share covariates: {names}")
            seen.update(f.block.dims)
        object.__setattr__(self, "factors", factors)

    @property
    def n_params(self):
        return 1 + sum(f.n_params for f in self.factors)

    def __str__(self):
        return "*".join(str(f) for f in self.factors)


@dataclass(frozen=True)
class KernelExpr:
    terms: tuple[ProductKernel, ...]

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise ValueError("kernel expression needs at least one term")
        object.__setattr__(self, "terms", terms)

    @property
    def n_theta(self):
        """Length of the theta vector, noise slot included."""
        return sum(t.n_params for t in self.terms) + 1

    def __str__(self):
        return " + ".join(str(t) for t in self.terms)

    def layout(self):
        """Slot names of the theta vector, e.g. ``'term1.SE(t).lengthscale'``."""
        names = []
        for i, term in enumerate(self.terms, start=1):
            names.append(f"term{i}.variance")
            for f in term.factors:
                names.extend(f"term{i}.{f}.{p}" for p in FAMILY_PARAMS[f.family])
        names.append("noise")
        return names

    def slot_kinds(self):
        """Kind of every theta slot: 'variance', 'lengthscale', 'period' or 'noise'."""
        kinds = []
        for term in self.terms:
            kinds.append("variance")
            for f in term.factors:
                kinds.extend(FAMILY_PARAMS[f.family])
        kinds.append("noise")
        return kinds

    def split(self, theta):
        """Unpack theta into ``([(variance, [params per factor]), ...], noise)``."""
        theta = check_theta(self, theta)
        out = []
        i = 0
        for term in self.terms:
            var = theta[i]
            i += 1
            params = []
            for f in term.factors:
                params.append(theta[i:i + f.n_params])
                i += f.n_params
            out.append((var, params))
        return out, theta[-1]

    def uses_dim(self, dim):
        return any(dim in f.block.dims for t in self.terms for f in t.factors)


def check_theta(expr, theta):
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.shape[0] != expr.n_theta:
        raise ValueError(
            f"theta has length {theta.size}, kernel {expr} expects {expr.n_theta}"
        )
    if not np.all(theta > 0):
        raise ValueError("all theta entries must be strictly positive")
    return theta


def _check_params(family, params):
    params = np.atleast_1d(np.asarray(params, dtype=float))
    expected = len(FAMILY_PARAMS[family])
    if params.shape[0] != expected:
        raise ValueError(f"{family} expects {expected} parameters, got {params.shape[0]}")
    if expected and not np.all(params > 0):
        raise ValueError(f"{family} parameters must be strictly positive: {params}")
    return params


def eval_base(family, params, a, b):
    """Unit-variance base kernel between two block vectors."""
    if family not in FAMILY_PARAMS:
        raise ValueError(f"unknown kernel family {family!r}")
    params = _check_params(family, params)
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise ValueError(f"input vectors differ in length: {a.shape} vs {b.shape}")
    if family == "SE":
        return float(np.exp(-np.sum((a - b) ** 2) / (2.0 * params[0] ** 2)))
    if family == "OU":
        return float(np.exp(-np.sqrt(np.sum((a - b) ** 2)) / params[0]))
    if family == "PE":
        if a.shape[0] != 1:
            raise ValueError("PE kernel is defined on a single covariate only")
        lengthscale, period = params
        return float(np.exp(-2.0 * np.sin((a[0] - b[0]) / period) ** 2 / lengthscale**2))
    if family == "CA":
        return 1.0 if np.array_equal(a, b) else 0.0
    return 1.0 if np.all(a == 1) and np.all(b == 1) else 0.0


# -- vectorised factor evaluation ---------------------------------------------

def _sqdist(A, B):
    out = np.zeros((A.shape[0], B.shape[0]))
    for j in range(A.shape[1]):
        out += (A[:, j, None] - B[None, :, j]) ** 2
    return out


def _factor(family, params, A, B):
    """Unit-variance factor matrix between block columns A (n x k) and B (m x k)."""
    if family == "SE":
        return np.exp(-_sqdist(A, B) / (2.0 * params[0] ** 2))
    if family == "OU":
        return np.exp(-np.sqrt(_sqdist(A, B)) / params[0])
    if family == "PE":
        diff = A[:, 0, None] - B[None, :, 0]
        return np.exp(-2.0 * np.sin(diff / params[1]) ** 2 / params[0] ** 2)
    if family == "CA":
        eq = np.ones((A.shape[0], B.shape[0]), dtype=bool)
        for j in range(A.shape[1]):
            eq &= A[:, j, None] == B[None, :, j]
        return eq.astype(float)
    a1 = np.all(A == 1, axis=1)
    b1 = np.all(B == 1, axis=1)
    return (a1[:, None] & b1[None, :]).astype(float)


def _factor_param_grads(family, params, A, value):
    """Derivatives of a unit-variance factor gram (A vs A) w.r.t. its params."""
    if family == "SE":
        (l,) = params
        return [value * _sqdist(A, A) / l**3]
    if family == "OU":
        (l,) = params
        return [value * np.sqrt(_sqdist(A, A)) / l**2]
    if family == "PE":
        l, period = params
        diff = A[:, 0, None] - A[None, :, 0]
        u = diff / period
        d_l = value * 4.0 * np.sin(u) ** 2 / l**3
        d_p = value * 2.0 * np.sin(2.0 * u) * diff / (l**2 * period**2)
        return [d_l, d_p]
    return []


def _as_inputs(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != N_INPUTS:
        raise ValueError(f"inputs must have {N_INPUTS} columns, got shape {X.shape}")
    return X


def _term_factor_mats(expr, theta, X, X2):
    """Per-term list of (variance, [factor matrices])."""
    terms, _ = expr.split(theta)
    out = []
    for term, (var, params) in zip(expr.terms, terms):
        mats = []
        for f, p in zip(term.factors, params):
            dims = list(f.block.dims)
            mats.append(_factor(f.family, p, X[:, dims], X2[:, dims]))
        out.append((var, mats))
    return out


def _mirror(K):
    return np.triu(K) + np.triu(K, 1).T


def term_grams(expr, theta, X, X2=None):
    """One gram matrix per additive term (noise excluded)."""
    X = _as_inputs(X)
    same = X2 is None
    X2 = X if same else _as_inputs(X2)
    grams = []
    for var, mats in _term_factor_mats(expr, theta, X, X2):
        K = var * np.prod(mats, axis=0) if len(mats) > 1 else var * mats[0]
        grams.append(_mirror(K) if same else K)
    return grams


def gram_matrix(expr, theta, X, X2=None):
    """Covariance matrix ``K[i, j] = k(X_i, X2_j)``; noise excluded.

    With ``X2=None`` the result is built from the upper triangle and mirrored,
    so it is exactly symmetric.
    """
    grams = term_grams(expr, theta, X, X2)
    K = grams[0].copy()
    for G in grams[1:]:
        K += G
    return K


def eval_expr(expr, theta, x, x2):
    """Kernel value between two single input vectors (noise excluded)."""
    x = _as_inputs(x)
    x2 = _as_inputs(x2)
    if x.shape[0] != 1 or x2.shape[0] != 1:
        raise ValueError("eval_expr takes single input vectors")
    return float(gram_matrix(expr, theta, x, x2)[0, 0])


def gram_diag(expr, theta, X):
    """Prior variances ``k(x_i, x_i)`` without forming the full gram."""
    X = _as_inputs(X)
    terms, _ = expr.split(theta)
    out = np.zeros(X.shape[0])
    for term, (var, _params) in zip(expr.terms, terms):
        d = np.full(X.shape[0], var)
        for f in term.factors:
            if f.family == "BI":
                d = d * np.all(X[:, list(f.block.dims)] == 1, axis=1)
        out += d
    return out


def grad_theta(expr, theta, X):
    """Derivatives of ``K + noise * I`` w.r.t. every theta slot, in layout order."""
    X = _as_inputs(X)
    theta = check_theta(expr, theta)
    terms, _ = expr.split(theta)
    grads = []
    for term, (var, params) in zip(expr.terms, terms):
        mats = []
        for f, p in zip(term.factors, params):
            dims = list(f.block.dims)
            mats.append(_factor(f.family, p, X[:, dims], X[:, dims]))
        unit = np.prod(mats, axis=0) if len(mats) > 1 else mats[0]
        grads.append(_mirror(unit))
        for j, (f, p) in enumerate(zip(term.factors, params)):
            others = [m for k, m in enumerate(mats) if k != j]
            rest = var * np.prod(others, axis=0) if others else var
            for dF in _factor_param_grads(f.family, p, X[:, list(f.block.dims)], mats[j]):
                grads.append(_mirror(rest * dF))
    grads.append(np.eye(X.shape[0]))
    return grads


def input_gradient_matrix(expr, theta, Xstar, X, dim):
    """``G[a, i] = d k(Xstar_a, X_i) / d Xstar_a[dim]`` for a batch of query points."""
    Xstar = _as_inputs(Xstar)
    X = _as_inputs(X)
    dim = int(dim)
    if not 0 <= dim < N_INPUTS:
        raise ValueError(f"input dimension {dim} out of range")
    terms, _ = expr.split(theta)
    G = np.zeros((Xstar.shape[0], X.shape[0]))
    for term, (var, params) in zip(expr.terms, terms):
        owner = [j for j, f in enumerate(term.factors) if dim in f.block.dims]
        if not owner:
            continue
        j = owner[0]
        f = term.factors[j]
        if f.family not in ("SE", "OU"):
            raise ValueError(
                f"input gradient along {COVARIATES[dim]!r} unsupported for {f.family} kernels"
            )
        mats = []
        for g, p in zip(term.factors, params):
            dims = list(g.block.dims)
            mats.append(_factor(g.family, p, Xstar[:, dims], X[:, dims]))
        value = var * np.prod(mats, axis=0) if len(mats) > 1 else var * mats[0]
        diff = X[None, :, dim] - Xstar[:, dim, None]
        l = params[j][0]
        if f.family == "SE":
            G += diff / l**2 * value
        else:
            dims = list(f.block.dims)
            dist = np.sqrt(_sqdist(Xstar[:, dims], X[:, dims]))
            if np.any(dist == 0):
                raise ValueError("OU kernel is not differentiable at zero distance")
            G += diff / (l * dist) * value
    return G


def grad_input(expr, theta, xstar, X, dim):
    """Gradient of ``k(xstar, X_i)`` along input ``dim`` for every training row."""
    return input_gradient_matrix(expr, theta, xstar, X, dim)[0]


# -- kernel-spec grammar ------------------------------------------------------

def _preset_text(name):
    key = name.upper().replace("-", "").replace("_", "")
    if key in PRESETS:
        return PRESETS[key]
    # AGPMn:OU swaps every SE factor for OU, AGPMn:PE puts a periodic kernel on time
    for suffix, repl in ((":OU", "OU"), (":PE", "PE")):
        if key.endswith(suffix) and key[: -len(suffix)] in PRESETS:
            text = PRESETS[key[: -len(suffix)]]
            if repl == "OU":
                return text.replace("SE(", "OU(")
            return text.replace("SE(t)", "PE(t)")
    return None


def parse_kernel_spec(text):
    """Parse ``'SE(r,c)*SE(t) + OU(d)'`` or a preset name (``AGPM1``..``AGPM5``)."""
    preset = _preset_text(text.strip())
    if preset is not None:
        text = preset
    return _Parser(text).parse()


class _Parser:
    def __init__(self, text):
        self.text = text
        self.pos = 0

    def _skip(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def _peek(self):
        self._skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def _expect(self, ch):
        if self._peek() != ch:
            found = self._peek() or "end of input"
            raise KernelSpecError(f"expected {ch!r}, found {found!r}", self.pos)
        self.pos += 1

    def parse(self):
        terms = [self._product()]
        while self._peek() == "+":
            self.pos += 1
            terms.append(self._product())
        if self._peek():
            raise KernelSpecError(f"unexpected {self._peek()!r}", self.pos)
        return KernelExpr(tuple(terms))

    def _product(self):
        start = self.pos
        factors = [self._base()]
        while self._peek() == "*":
            self.pos += 1
            factors.append(self._base())
        try:
            return ProductKernel(tuple(factors))
        except ValueError as exc:
            raise KernelSpecError(str(exc), start) from None

    def _base(self):
        self._skip()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isalpha():
            self.pos += 1
        family = self.text[start:self.pos]
        if family not in FAMILY_PARAMS:
            raise KernelSpecError(f"unknown kernel family {family!r}", start)
        self._expect("(")
        names = []
        while True:
            self._skip()
            at = self.pos
            name = self.text[self.pos:self.pos + 1]
            if name not in COVARIATES or not name:
                raise KernelSpecError(f"unknown covariate {name!r}", at)
            if name in names:
                raise KernelSpecError(f"duplicate covariate {name!r}", at)
            names.append(name)
            self.pos += 1
            if self._peek() == ",":
                self.pos += 1
                continue
            self._expect(")")
            break
        if family == "PE" and len(names) > 1:
            raise KernelSpecError("PE kernel takes a single covariate", start)
        return BaseKernel(family, CovariateBlock.from_names(names))

"""Dense-matrix reverse-mode differentiation over an explicit expression graph.

Values are 2-D float64 numpy arrays throughout (row-major). The primitive set
is exactly what the attention encoder, the re-masking decoder and the two
training losses need; this is deliberately not a general framework. Gradients
are accumulated in reverse topological order, which here is simply reverse
construction order.

Broadcasting in ``add``/``mul`` is limited to a second operand that is a 1x1
scalar, a single row (1, c) or a single column (r, 1).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError, ValidationError

Array = np.ndarray

NORM_FLOOR = 1e-12


def tensor2(data) -> Array:
    """Coerce to a 2-D, C-contiguous float64 array."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if arr.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D tensor, got shape {arr.shape}")
    return arr


def _group_sums(groups: Array, weights: Array, n_groups: int) -> Array:
    return np.bincount(groups, weights=weights, minlength=n_groups)


class ExprGraph:
    """Append-only expression graph; node references are integer indices."""

    def __init__(self):
        self._ops: list[str] = []
        self._args: list[tuple[int, ...]] = []
        self._aux: list = []
        self._shapes: list[tuple[int, int]] = []
        self._names: list[str] = []
        self._fns: list[Callable[[list], Array]] = []
        self._leaf_values: dict[int, Array] = {}
        self._params: dict[str, int] = {}
        self._values: list | None = None

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    def _add_node(self, op: str, args: tuple[int, ...], aux, shape, fn, name=None) -> int:
        idx = len(self._ops)
        self._ops.append(op)
        self._args.append(args)
        self._aux.append(aux)
        self._shapes.append(shape)
        self._names.append(name or f"{op}#{idx}")
        self._fns.append(fn)
        self._values = None
        return idx

    def _describe(self, idx: int) -> str:
        return f"node {idx} ({self._names[idx]}, shape {self._shapes[idx]})"

    def _check_ref(self, ref: int) -> None:
        if not 0 <= ref < len(self._ops):
            raise ValidationError(f"unknown node reference {ref}")

    def shape(self, ref: int) -> tuple[int, int]:
        self._check_ref(ref)
        return self._shapes[ref]

    def param(self, name: str, value) -> int:
        if name in self._params:
            raise ValidationError(f"parameter {name!r} already declared")
        arr = tensor2(value)
        idx = self._add_node("param", (), None, arr.shape,
                             lambda vals, i=len(self._ops): self._leaf_values[i],
                             name=f"param {name!r}")
        self._leaf_values[idx] = arr
        self._params[name] = idx
        return idx

    def const(self, value) -> int:
        arr = tensor2(value)
        idx = self._add_node("const", (), None, arr.shape,
                             lambda vals, i=len(self._ops): self._leaf_values[i])
        self._leaf_values[idx] = arr
        return idx

    def bind(self, name: str, value) -> None:
        """Replace a leaf parameter's value; shape must be unchanged."""
        idx = self._params.get(name)
        if idx is None:
            raise ValidationError(f"unknown parameter {name!r}")
        arr = tensor2(value)
        if arr.shape != self._shapes[idx]:
            raise ShapeMismatchError(
                f"bind {name!r}: expected shape {self._shapes[idx]}, got {arr.shape}")
        self._leaf_values[idx] = arr
        self._values = None

    @property
    def parameters(self) -> dict[str, int]:
        return dict(self._params)

    def value(self, ref: int) -> Array:
        """Cached forward value of ``ref``; requires a prior evaluate."""
        self._check_ref(ref)
        if self._values is None or len(self._values) <= ref or self._values[ref] is None:
            raise ValidationError(f"node {ref} has no cached value; run evaluate first")
        return self._values[ref]

    def param_value(self, name: str) -> Array:
        return self._leaf_values[self._params[name]]

    # ------------------------------------------------------------------
    # primitives
    # ------------------------------------------------------------------

    def matmul(self, a: int, b: int) -> int:
        self._check_ref(a), self._check_ref(b)
        (ra, ca), (rb, cb) = self._shapes[a], self._shapes[b]
        if ca != rb:
            raise ShapeMismatchError(
                f"matmul: inner dims differ between {self._describe(a)} and {self._describe(b)}")
        return self._add_node("matmul", (a, b), None, (ra, cb),
                              lambda vals, a=a, b=b: vals[a] @ vals[b])

    def _broadcast_shape(self, op: str, a: int, b: int) -> tuple[int, int]:
        sa, sb = self._shapes[a], self._shapes[b]
        if sb == sa or sb == (1, 1) or sb == (1, sa[1]) or sb == (sa[0], 1):
            return sa
        raise ShapeMismatchError(
            f"{op}: {self._describe(b)} does not broadcast onto {self._describe(a)}")

    def add(self, a: int, b: int) -> int:
        self._check_ref(a), self._check_ref(b)
        shape = self._broadcast_shape("add", a, b)
        return self._add_node("add", (a, b), None, shape,
                              lambda vals, a=a, b=b: vals[a] + vals[b])

    def mul(self, a: int, b: int) -> int:
        self._check_ref(a), self._check_ref(b)
        shape = self._broadcast_shape("mul", a, b)
        return self._add_node("mul", (a, b), None, shape,
                              lambda vals, a=a, b=b: vals[a] * vals[b])

    def hconcat(self, *refs: int) -> int:
        if len(refs) < 2:
            raise ValidationError("hconcat needs at least two operands")
        for r in refs:
            self._check_ref(r)
        rows = {self._shapes[r][0] for r in refs}
        if len(rows) != 1:
            names = ", ".join(self._describe(r) for r in refs)
            raise ShapeMismatchError(f"hconcat: row counts differ among {names}")
        shape = (rows.pop(), sum(self._shapes[r][1] for r in refs))
        return self._add_node("hconcat", tuple(refs), None, shape,
                              lambda vals, refs=refs: np.concatenate([vals[r] for r in refs], axis=1))

    def leaky_relu(self, a: int, slope: float = 0.2) -> int:
        self._check_ref(a)
        return self._add_node("leaky_relu", (a,), float(slope), self._shapes[a],
                              lambda vals, a=a, s=float(slope): np.where(vals[a] >= 0.0, vals[a], s * vals[a]))

    def sigmoid(self, a: int) -> int:
        self._check_ref(a)

        def fn(vals, a=a):
            x = vals[a]
            out = np.empty_like(x)
            pos = x >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            out[~pos] = ex / (1.0 + ex)
            return out

        return self._add_node("sigmoid", (a,), None, self._shapes[a], fn)

    def log(self, a: int) -> int:
        self._check_ref(a)
        return self._add_node("log", (a,), None, self._shapes[a],
                              lambda vals, a=a: np.log(vals[a]))

    def clamp(self, a: int, lo: float, hi: float) -> int:
        self._check_ref(a)
        if not lo < hi:
            raise ValidationError("clamp: lo must be < hi")
        return self._add_node("clamp", (a,), (float(lo), float(hi)), self._shapes[a],
                              lambda vals, a=a, lo=float(lo), hi=float(hi): np.clip(vals[a], lo, hi))

    def power(self, a: int, exponent: float) -> int:
        """Elementwise power; non-integer exponents require positive operands."""
        self._check_ref(a)
        return self._add_node("power", (a,), float(exponent), self._shapes[a],
                              lambda vals, a=a, p=float(exponent): vals[a] ** p)

    def affine(self, a: int, scale: float, shift: float) -> int:
        self._check_ref(a)
        return self._add_node("affine", (a,), (float(scale), float(shift)), self._shapes[a],
                              lambda vals, a=a, s=float(scale), t=float(shift): s * vals[a] + t)

    def row_softmax(self, a: int, groups: Sequence[int]) -> int:
        """Softmax of a column vector within groups, with per-group max subtraction."""
        self._check_ref(a)
        shape = self._shapes[a]
        if shape[1] != 1:
            raise ShapeMismatchError(f"row_softmax expects a column vector, got {self._describe(a)}")
        grp = np.asarray(groups, dtype=np.int64)
        if grp.shape != (shape[0],):
            raise ShapeMismatchError(
                f"row_softmax: {len(grp)} group ids for {shape[0]} rows at {self._describe(a)}")
        n_groups = int(grp.max()) + 1 if grp.size else 0

        def fn(vals, a=a, grp=grp, k=n_groups):
            x = vals[a].ravel()
            gmax = np.full(k, -np.inf)
            np.maximum.at(gmax, grp, x)
            e = np.exp(x - gmax[grp])
            denom = _group_sums(grp, e, k)
            return (e / denom[grp]).reshape(-1, 1)

        return self._add_node("row_softmax", (a,), (grp, n_groups), shape, fn)

    def rowwise_cosine(self, a: int, b: int) -> int:
        """Cosine similarity per row; norms are floored at NORM_FLOOR so an
        all-zero row (possible with zero-initialized tokens) yields 0, not NaN."""
        self._check_ref(a), self._check_ref(b)
        if self._shapes[a] != self._shapes[b]:
            raise ShapeMismatchError(
                f"rowwise_cosine: {self._describe(a)} and {self._describe(b)} differ in shape")

        def fn(vals, a=a, b=b):
            x, y = vals[a], vals[b]
            nx = np.maximum(np.linalg.norm(x, axis=1), NORM_FLOOR)
            ny = np.maximum(np.linalg.norm(y, axis=1), NORM_FLOOR)
            return ((x * y).sum(axis=1) / (nx * ny)).reshape(-1, 1)

        return self._add_node("rowwise_cosine", (a, b), None, (self._shapes[a][0], 1), fn)

    def mean(self, a: int) -> int:
        self._check_ref(a)
        return self._add_node("mean", (a,), None, (1, 1),
                              lambda vals, a=a: np.array([[vals[a].mean()]]))

    def total(self, a: int) -> int:
        """Sum of all entries."""
        self._check_ref(a)
        return self._add_node("total", (a,), None, (1, 1),
                              lambda vals, a=a: np.array([[vals[a].sum()]]))

    # ------------------------------------------------------------------
    # execution
    # ------------------------------------------------------------------

    def _forward(self, upto: int, check_finite: bool) -> list:
        vals: list = [None] * (upto + 1)
        fns = self._fns
        # out-of-domain inputs surface as the NonFiniteError below, not as warnings
        with np.errstate(all="ignore"):
            for i in range(upto + 1):
                v = fns[i](vals)
                if check_finite and not np.isfinite(v).all():
                    raise NonFiniteError(f"non-finite value at {self._describe(i)}")
                vals[i] = v
        self._values = vals
        return vals

    def _children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in self._ops]
        for i, args in enumerate(self._args):
            for a in args:
                kids[a].append(i)
        return kids

    def _descendants(self, root: int, upto: int) -> list[int]:
        kids = self._children()
        seen = [False] * (upto + 1)
        seen[root] = True
        order = []
        for i in range(root, upto + 1):
            if seen[i]:
                order.append(i)
                for c in kids[i]:
                    if c <= upto:
                        seen[c] = True
        return order

    def _backward(self, out: int) -> dict[str, Array]:
        vals = self._values
        adj: list = [None] * (out + 1)
        adj[out] = np.ones((1, 1))

        def acc(i: int, g: Array) -> None:
            # accumulation always allocates, so sharing the first contribution is safe
            if adj[i] is None:
                adj[i] = g
            else:
                adj[i] = adj[i] + g

        for i in range(out, -1, -1):
            g = adj[i]
            if g is None:
                continue
            op = self._ops[i]
            args = self._args[i]
            if op in ("param", "const"):
                continue
            if op == "matmul":
                a, b = args
                acc(a, g @ vals[b].T)
                acc(b, vals[a].T @ g)
            elif op == "add":
                a, b = args
                acc(a, g)
                acc(b, _reduce_to(g, self._shapes[b]))
            elif op == "mul":
                a, b = args
                acc(a, g * vals[b])
                acc(b, _reduce_to(g * vals[a], self._shapes[b]))
            elif op == "hconcat":
                col = 0
                for r in args:
                    w = self._shapes[r][1]
                    acc(r, g[:, col:col + w])
                    col += w
            elif op == "leaky_relu":
                (a,) = args
                slope = self._aux[i]
                acc(a, g * np.where(vals[a] >= 0.0, 1.0, slope))
            elif op == "sigmoid":
                (a,) = args
                s = vals[i]
                acc(a, g * s * (1.0 - s))
            elif op == "log":
                (a,) = args
                acc(a, g / vals[a])
            elif op == "clamp":
                (a,) = args
                lo, hi = self._aux[i]
                x = vals[a]
                acc(a, g * ((x >= lo) & (x <= hi)))
            elif op == "power":
                (a,) = args
                p = self._aux[i]
                acc(a, g * p * vals[a] ** (p - 1.0))
            elif op == "affine":
                (a,) = args
                scale, _ = self._aux[i]
                acc(a, g * scale)
            elif op == "row_softmax":
                (a,) = args
                grp, k = self._aux[i]
                s = vals[i].ravel()
                gg = g.ravel()
                t = gg * s
                gsum = _group_sums(grp, t, k)
                acc(a, (t - s * gsum[grp]).reshape(-1, 1))
            elif op == "rowwise_cosine":
                a, b = args
                x, y = vals[a], vals[b]
                nx = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), NORM_FLOOR)
                ny = np.maximum(np.linalg.norm(y, axis=1, keepdims=True), NORM_FLOOR)
                c = vals[i]
                gc = g
                acc(a, gc * (y / (nx * ny) - c * x / (nx * nx)))
                acc(b, gc * (x / (nx * ny) - c * y / (ny * ny)))
            elif op == "mean":
                (a,) = args
                r, c = self._shapes[a]
                acc(a, np.full((r, c), g[0, 0] / (r * c)))
            elif op == "total":
                (a,) = args
                r, c = self._shapes[a]
                acc(a, np.full((r, c), g[0, 0]))
            else:  # pragma: no cover - every op is handled above
                raise ValidationError(f"no backward rule for {op}")

        return {
            name: (adj[idx] if adj[idx] is not None else np.zeros(self._shapes[idx]))
            for name, idx in self._params.items()
            if idx <= out
        }


def _reduce_to(g: Array, shape: tuple[int, int]) -> Array:
    """Sum gradient over axes that were broadcast on the forward pass."""
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def evaluate(g: ExprGraph, output: int, check_finite: bool = True) -> Array:
    """Forward value of ``output``; intermediates are cached for gradients."""
    g._check_ref(output)
    vals = g._forward(output, check_finite)
    return vals[output]


def gradients(g: ExprGraph, scalar_output: int) -> dict[str, Array]:
    """d(output)/d(param) for every leaf parameter, by reverse accumulation."""
    g._check_ref(scalar_output)
    if g.shape(scalar_output) != (1, 1):
        raise ValidationError(
            f"gradients: output must be 1x1, got {g.shape(scalar_output)}")
    if g._values is None or len(g._values) <= scalar_output or g._values[scalar_output] is None:
        evaluate(g, scalar_output)
    return g._backward(scalar_output)


def finite_difference_check(g: ExprGraph, scalar_output: int, eps: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error is |analytic - numeric| / max(1, |analytic|, |numeric|), taken
    over every entry of every leaf parameter.
    """
    if not 0.0 < eps <= 1e-3:
        raise ValidationError(f"eps must be in (0, 1e-3], got {eps}")
    evaluate(g, scalar_output)
    analytic = g._backward(scalar_output)

    worst = 0.0
    for name, idx in sorted(g._params.items()):
        if idx > scalar_output:
            continue
        desc = g._descendants(idx, scalar_output)
        base = g._leaf_values[idx]
        grad = analytic[name]
        flat = base.ravel()
        vals = g._values
        fns = g._fns
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            for d in desc:
                vals[d] = fns[d](vals)
            f_plus = vals[scalar_output][0, 0]
            flat[j] = orig - eps
            for d in desc:
                vals[d] = fns[d](vals)
            f_minus = vals[scalar_output][0, 0]
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = grad.ravel()[j]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
        for d in desc:
            vals[d] = fns[d](vals)
    return worst

"""FLOP accounting rules and the runtime operation counter.

One table of per-operation cost formulas is shared by two independent
consumers:

* the tensor ops in :mod:`dpp.autodiff`, which charge an active
  :class:`FlopCounter` as they execute (the "runtime" count), and
* the closed-form cost model in :mod:`dpp.operators`, which sums the same
  formulas over a hand-enumerated list of layers (the "analytic" count).

Because both sides use the same formulas, analytic and runtime counts agree
exactly whenever the enumerated layer list matches what actually executes;
a mismatch is a bug the test suite catches.

Counting conventions (all counts are integers):

* matmul (m,k)@(k,n): 2*m*k*n (multiply + add per fused term).
* per-row matmul of n vectors (d) against n matrices (d,h): 2*n*d*h.
* elementwise ops (add, mul, relu, exp, clamp, ...): 1 per output element,
  including transcendentals; broadcasting charges the output size.
* sum reduction: inputs - outputs; mean: inputs (adds plus one divide each).
* softmax over rows of width w: 4*w - 1 per row (shift, exp, sum, divide).
* log-softmax over rows of width w: 4*w per row.
* layer norm over rows of width w: 7*w + 3 per row.
* data movement (reshape, transpose, slicing, gather, concat) is free, as
  are comparisons (argmax, tie-breaking).

Only forward/inference work is counted; backward passes and random-noise
generation are never charged (the cost model describes deployed inference).
"""


def matmul(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


def row_matmul(n: int, d: int, h: int) -> int:
    return 2 * n * d * h


def elementwise(nelems: int) -> int:
    return nelems


def reduce_sum(in_elems: int, out_elems: int) -> int:
    return in_elems - out_elems


def reduce_mean(in_elems: int, out_elems: int) -> int:
    return in_elems


def softmax(rows: int, width: int) -> int:
    return rows * (4 * width - 1)


def log_softmax(rows: int, width: int) -> int:
    return rows * 4 * width


def layer_norm(rows: int, width: int) -> int:
    return rows * (7 * width + 3)


_ACTIVE: list["FlopCounter"] = []


def charge(op: str, count: int) -> None:
    """Add `count` FLOPs to every active counter (no-op when none)."""
    if _ACTIVE:
        for counter in _ACTIVE:
            counter._add(op, count)


class FlopCounter:
    """Context manager accumulating FLOPs charged by executed tensor ops.

    Counters nest; each active counter sees every charge in its scope.
    """

    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def _add(self, op: str, count: int) -> None:
        self.total += count
        self.by_op[op] = self.by_op.get(op, 0) + count

    def __enter__(self) -> "FlopCounter":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

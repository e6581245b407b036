"""Head complexity accounting and the exhaustive assignment oracle.

Costs come in two flavors built from the same :class:`~dpp.operators.CostModel`:

* ``equal_cost`` - every proposal runs the heavy operator at every stage
  (the equal-treatment baseline): per stage ``N*c_g0`` plus the shared
  attention terms.
* ``unequal_cost`` - a routed head: per stage the sum of each proposal's
  assigned-operator cost, selector evaluations at selector stages, plus the
  same shared attention terms.

Both formulas agree exactly with the runtime operation counter because they
are assembled from the counting rules the executing ops charge.

The oracle enumerates every possible operator assignment at the selector
stages (inheritance fills the rest), runs the head with each assignment
fixed, and reports the best reachable per-image precision under a budget.
Per-image average precision stands in for corpus-level precision because
only it decomposes over assignments; the learned policy's assignment always
lies inside the enumerated set, so the oracle dominates it by construction.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import boxgeo
from . import selector as sel
from .errors import OracleCapError
from .head import HeadConfig, HeadParams, predictions_from_record, run_head
from .operators import CostModel


@dataclass
class Assignment:
    """Operator choice per (selector stage, proposal), plus derived cost."""

    ops: np.ndarray                 # (num selector stages, N) values in {0,1,2}
    selector_stages: tuple
    num_stages: int
    total_cost: float | None = None

    def __post_init__(self):
        self.ops = np.asarray(self.ops, dtype=np.int64)
        expected = (len(self.selector_stages), self.ops.shape[-1] if self.ops.ndim else 0)
        if self.ops.ndim != 2 or self.ops.shape != expected:
            raise ValueError(
                f"assignment must be (selector stages, proposals); got {self.ops.shape}")
        if self.ops.size and (self.ops.min() < 0 or self.ops.max() > 2):
            raise ValueError("assignment entries must be operator indices 0..2")

    @property
    def num_proposals(self) -> int:
        return self.ops.shape[1]

    def expand(self) -> np.ndarray:
        """Per-stage executed operators (num_stages, N) under inheritance."""
        n = self.num_proposals
        rows = {k: i for i, k in enumerate(self.selector_stages)}
        out = np.zeros((self.num_stages, n), dtype=np.int64)
        current = np.zeros(n, dtype=np.int64)  # stage 1 is all-G0
        for k in range(1, self.num_stages + 1):
            if k in rows:
                current = self.ops[rows[k]]
            out[k - 1] = current
        return out

    def digest(self) -> str:
        """Stable content hash of the assignment matrix."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.ops, dtype=np.int8).tobytes())
        h.update(f"{self.ops.shape}{self.selector_stages}{self.num_stages}".encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class FrontierPoint:
    budget: float
    best_precision: float
    best_assignment: Assignment


def pair_count(n: int) -> int:
    return n * (n - 1) // 2


def equal_cost(num_proposals: int, stages: int, cost_model: CostModel) -> float:
    """Equal-treatment head cost: all proposals on g0 at every stage."""
    if num_proposals < 1:
        raise ValueError("need at least one proposal")
    n = num_proposals
    per_stage = (n * cost_model.c_g0 + n * cost_model.c_attn
                 + pair_count(n) * cost_model.c_pair)
    return stages * per_stage


def unequal_cost(assignment: Assignment, cost_model: CostModel) -> float:
    """Routed head cost under a fixed assignment (selector included)."""
    n = assignment.num_proposals
    per_stage_ops = assignment.expand()
    op_costs = np.array([cost_model.c_g0, cost_model.c_g1, cost_model.c_g2])
    shared = n * cost_model.c_attn + pair_count(n) * cost_model.c_pair
    total = 0.0
    for k in range(1, assignment.num_stages + 1):
        total += op_costs[per_stage_ops[k - 1]].sum() + shared
        if k in assignment.selector_stages:
            total += n * cost_model.c_selector
    return float(total)


def assignment_operator_cost(assignment: Assignment,
                             cost_model: CostModel) -> float:
    """Per-proposal work only (operators + selectors, no attention terms).

    This is the numerator of the equivalent proposal number: for an all-g0
    head with no selectors it equals N * num_stages * c_g0 exactly.
    """
    n = assignment.num_proposals
    op_costs = np.array([cost_model.c_g0, cost_model.c_g1, cost_model.c_g2])
    total = op_costs[assignment.expand()].sum()
    total += len(assignment.selector_stages) * n * cost_model.c_selector
    return float(total)


def equivalent_proposal_number(head_cost: float, cost_model: CostModel,
                               num_stages: int) -> float:
    """head FLOPs divided by the FLOPs of one always-g0 proposal."""
    denominator = num_stages * cost_model.c_g0
    if denominator <= 0:
        raise ValueError("per-proposal all-stage g0 cost must be positive")
    return head_cost / denominator


def all_g0_assignment(cfg: HeadConfig) -> Assignment:
    return Assignment(
        ops=np.zeros((len(cfg.selector_stages), cfg.num_proposals), dtype=np.int64),
        selector_stages=tuple(cfg.selector_stages),
        num_stages=cfg.num_stages,
    )


def trace_assignment(trace, cfg: HeadConfig) -> Assignment:
    """Assignment actually executed by a head trace."""
    return Assignment(ops=trace.op_matrix(cfg.selector_stages),
                      selector_stages=tuple(cfg.selector_stages),
                      num_stages=cfg.num_stages)


# ---------------------------------------------------------------------------
# exhaustive oracle


def _image_precision(embeddings, boxes, truth_boxes, truth_classes, params,
                     cfg, forced=None):
    trace = run_head(ad.constant(embeddings), boxes, params, cfg,
                     sel.INFERENCE, forced=forced)
    pb, pc, ps = predictions_from_record(trace.final(), cfg.num_classes)
    zeros_p = np.zeros(len(pc), dtype=np.intp)
    zeros_t = np.zeros(len(truth_classes), dtype=np.intp)
    ap = boxgeo.average_precision_pooled(
        pb, pc, ps, zeros_p, truth_boxes, truth_classes, zeros_t)
    return ap.mean, trace


def enumerate_assignments(embeddings, boxes, truth_boxes, truth_classes,
                          params: HeadParams, cfg: HeadConfig,
                          max_assignments: int = 3 ** 10):
    """All (cost, precision, assignment) triples, in lexicographic order."""
    s = len(cfg.selector_stages)
    n = cfg.num_proposals
    total = 3 ** (s * n)
    if total > max_assignments:
        raise OracleCapError(
            f"exhaustive enumeration needs {total} assignments "
            f"(cap {max_assignments}); shrink the instance or raise the cap",
            required_cap=total)
    cost_model = cfg.cost_model()
    results = []
    for combo in itertools.product((0, 1, 2), repeat=s * n):
        assignment = Assignment(
            ops=np.asarray(combo, dtype=np.int64).reshape(s, n),
            selector_stages=tuple(cfg.selector_stages),
            num_stages=cfg.num_stages)
        assignment.total_cost = unequal_cost(assignment, cost_model)
        precision, _ = _image_precision(embeddings, boxes, truth_boxes,
                                        truth_classes, params, cfg,
                                        forced=assignment.ops)
        results.append((assignment.total_cost, precision, assignment))
    return results


def oracle_frontier(embeddings, boxes, truth_boxes, truth_classes,
                    params: HeadParams, cfg: HeadConfig, budgets,
                    max_assignments: int = 3 ** 10):
    """Best reachable per-image precision under each budget.

    Returns one FrontierPoint per feasible budget (best precision, ties
    broken toward lower cost, then enumeration order); budgets below the
    cheapest possible head are skipped.
    """
    results = enumerate_assignments(embeddings, boxes, truth_boxes,
                                    truth_classes, params, cfg,
                                    max_assignments)
    points = []
    for budget in budgets:
        best = None
        for cost, precision, assignment in results:
            if cost > budget:
                continue
            if best is None or (precision, -cost) > (best[1], -best[0]):
                best = (cost, precision, assignment)
        if best is not None:
            points.append(FrontierPoint(budget=float(budget),
                                        best_precision=best[1],
                                        best_assignment=best[2]))
    return points


def policy_vs_oracle(embeddings, boxes, truth_boxes, truth_classes,
                     params: HeadParams, cfg: HeadConfig,
                     max_assignments: int = 3 ** 10,
                     results=None) -> dict:
    """Learned routing vs the oracle optimum at the same budget."""
    policy_precision, trace = _image_precision(
        embeddings, boxes, truth_boxes, truth_classes, params, cfg)
    assignment = trace_assignment(trace, cfg)
    policy_cost = unequal_cost(assignment, cfg.cost_model())
    if results is None:
        results = enumerate_assignments(embeddings, boxes, truth_boxes,
                                        truth_classes, params, cfg,
                                        max_assignments)
    best = max((p for c, p, _ in results if c <= policy_cost), default=0.0)
    return {
        "policy_cost": policy_cost,
        "policy_precision": policy_precision,
        "oracle_precision_at_policy_cost": best,
        "policy_assignment": assignment,
    }

"""The multi-stage detection head with learned unequal proposal processing.

Every stage first runs pairwise self-attention over all proposals, then
applies one operator per proposal. Stage 1 always applies the heavy operator
to everyone; at configured selector stages the routing function reassigns
operators; every other stage inherits each proposal's previous assignment.
Proposals processed by G0/G1 get fresh class logits and a refined box from
the shared per-stage heads; G2 proposals carry their predictions forward
untouched.

Boxes are detached between stages (each stage refines a constant copy of its
input box), so box-loss gradients reach exactly the stage that produced the
refinement; deep supervision applies the detection losses at every stage.

Routing supervision:

* the quality loss pushes the two non-trivial assignment strengths toward
  the proposal's current IoU side (coefficient 1 - 2u, so the gradient
  vanishes exactly at u = 0.5);
* the budget loss penalizes |sum of g0-strengths - T| per selector stage,
  with T clipped to per-selector lower bounds that decay geometrically from
  N to the configured last-stage bound.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import boxgeo
from . import selector as sel
from .autodiff import Tensor
from .errors import CheckpointError, DivergenceError
from .operators import (CostModel, OperatorKind, OperatorParams,
                        apply_operator_rows, derive_cost_model,
                        init_operator_params, pairwise_attend, predict,
                        refine_boxes)


@dataclass
class HeadConfig:
    num_stages: int = 6
    selector_stages: tuple = (2, 4, 6)
    num_proposals: int = 24
    embed_dim: int = 32
    dyconv_dim: int = 16
    ffn_dim: int = 64
    selector_dim: int = 12
    num_classes: int = 8
    selection_lambda: float = 10.0
    alpha: float = 2.0
    tmin_last: float = 1.0
    temperature: float = 1.0
    eos_weight: float = 0.1
    iou_target_mode: str = "max"  # "max" over truths, or "matched"

    def validate(self) -> None:
        ss = tuple(self.selector_stages)
        if len(set(ss)) != len(ss) or tuple(sorted(ss)) != ss:
            raise ValueError("selector stages must be sorted and unique")
        if 1 in ss:
            raise ValueError("stage 1 always runs g0; it cannot host a selector")
        if ss and (min(ss) < 2 or max(ss) > self.num_stages):
            raise ValueError("selector stages must lie in 2..num_stages")
        if self.num_stages < 1 or self.num_proposals < 1:
            raise ValueError("need at least one stage and one proposal")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not (0 < self.tmin_last <= self.num_proposals):
            raise ValueError("tmin_last must lie in (0, num_proposals]")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.iou_target_mode not in ("max", "matched"):
            raise ValueError("iou_target_mode must be 'max' or 'matched'")

    def cost_model(self) -> CostModel:
        return derive_cost_model(self.embed_dim, self.dyconv_dim, self.ffn_dim,
                                 self.num_classes, self.selector_dim)


@dataclass
class Proposal:
    """Per-proposal view of the head state (inspection/reporting)."""

    embedding: np.ndarray
    box: boxgeo.Box
    class_logits: np.ndarray
    assigned_op: OperatorKind
    iou_current: float = 0.0


@dataclass
class HeadParams:
    stages: list
    selectors: dict

    @classmethod
    def init(cls, cfg: HeadConfig, rng: np.random.Generator) -> "HeadParams":
        cfg.validate()
        stages = [init_operator_params(rng, cfg.embed_dim, cfg.dyconv_dim,
                                       cfg.ffn_dim, cfg.num_classes)
                  for _ in range(cfg.num_stages)]
        selectors = {k: sel.init_selector_params(rng, cfg.embed_dim,
                                                 cfg.selector_dim,
                                                 cfg.temperature)
                     for k in cfg.selector_stages}
        return cls(stages=stages, selectors=selectors)

    def named(self):
        for i, sp in enumerate(self.stages, start=1):
            yield from sp.named(f"stage{i:02d}")
        for k in sorted(self.selectors):
            yield from self.selectors[k].named(f"selector{k:02d}")

    def body_tensors(self):
        out = []
        for sp in self.stages:
            out.extend(sp.tensors())
        return out

    def selector_tensors(self):
        out = []
        for k in sorted(self.selectors):
            out.extend(self.selectors[k].tensors())
        return out

    def all_tensors(self):
        return self.body_tensors() + self.selector_tensors()

    @classmethod
    def from_named(cls, cfg: HeadConfig, arrays: dict) -> "HeadParams":
        params = cls.init(cfg, np.random.default_rng(0))
        expected = dict(params.named())
        missing = set(expected) - set(arrays)
        extra = set(arrays) - set(expected)
        if missing or extra:
            raise CheckpointError(
                f"tensor names do not match the configuration "
                f"(missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]})")
        for name, tensor in expected.items():
            arr = arrays[name]
            if tuple(arr.shape) != tensor.shape:
                raise CheckpointError(
                    f"tensor {name} has shape {arr.shape}, expected {tensor.shape}")
            tensor.data = np.ascontiguousarray(arr, dtype=np.float64)
        return params


@dataclass
class StageRecord:
    stage: int
    ops: np.ndarray               # executed operator index per proposal
    boxes: Tensor                 # (N, 4)
    logits: Tensor                # (N, num_classes + 1)
    eps: Tensor | None = None     # (N, 3) at selector stages
    u: np.ndarray | None = None   # routing IoU target at the stage input


@dataclass
class HeadTrace:
    stages: list

    def final(self) -> StageRecord:
        return self.stages[-1]

    def record(self, stage: int) -> StageRecord:
        return self.stages[stage - 1]

    def op_matrix(self, selector_stages) -> np.ndarray:
        """Executed operator choices at the selector stages, (S, N)."""
        return np.stack([self.record(k).ops for k in selector_stages])

    def proposals(self, stage: int, embeddings=None):
        rec = self.record(stage)
        out = []
        for i in range(rec.ops.shape[0]):
            b = rec.boxes.data[i]
            out.append(Proposal(
                embedding=None if embeddings is None else embeddings[i],
                box=boxgeo.Box(*b),
                class_logits=rec.logits.data[i].copy(),
                assigned_op=OperatorKind(int(rec.ops[i])),
                iou_current=0.0 if rec.u is None else float(rec.u[i]),
            ))
        return out


def routing_iou(boxes: np.ndarray, truths: np.ndarray, mode: str) -> np.ndarray:
    """Per-proposal quality signal u: IoU against ground truth.

    "max" takes each proposal's best IoU over all truths; "matched" assigns
    truths one-to-one by Hungarian matching on IoU and scores unmatched
    proposals zero.
    """
    n = boxes.shape[0]
    if truths.shape[0] == 0:
        return np.zeros(n)
    mat = boxgeo.iou_matrix(boxes, truths)
    if mode == "max":
        return mat.max(axis=1)
    result = boxgeo.hungarian(1.0 - mat)
    u = np.zeros(n)
    for p, t in result.pairs:
        u[p] = mat[p, t]
    return u


def run_head(embeddings: Tensor, boxes: np.ndarray, params: HeadParams,
             cfg: HeadConfig, mode: str, rng=None, truths=None,
             forced=None) -> HeadTrace:
    """Run the full head over one image's proposals.

    ``truths`` (M, 4) enables the per-stage routing IoU signal; ``forced``
    (num selector stages, N) overrides the routing decisions (the selector
    still runs, and is still charged, exactly as deployed). Raises
    DivergenceError if any stage produces non-finite embeddings.
    """
    selector_stages = tuple(cfg.selector_stages)
    n = embeddings.shape[0]
    if n != cfg.num_proposals:
        raise ValueError(f"expected {cfg.num_proposals} proposals, got {n}")
    box_t = ad.constant(boxes)
    logits_t = ad.constant(np.zeros((n, cfg.num_classes + 1)))
    assigned = np.zeros(n, dtype=np.int64)  # stage 1: everyone on G0
    records = []
    for k in range(1, cfg.num_stages + 1):
        sp = params.stages[k - 1]
        try:
            embeddings, _ = pairwise_attend(embeddings, sp)
        except FloatingPointError as err:
            raise DivergenceError(f"non-finite embeddings at stage {k}: {err}",
                                  stage=k) from err

        u = None
        eps = None
        if k in selector_stages:
            if truths is not None:
                u = routing_iou(box_t.data, np.asarray(truths, dtype=np.float64),
                                cfg.iou_target_mode)
            eps, kinds = sel.route_rows(embeddings, params.selectors[k],
                                        mode, rng)
            if forced is not None:
                kinds = np.asarray(forced[selector_stages.index(k)],
                                   dtype=np.int64)
            assigned = kinds.copy()
        elif k == 1:
            assigned = np.zeros(n, dtype=np.int64)
        # otherwise: inherit the previous assignment unchanged

        groups = [(kind, np.flatnonzero(assigned == kind))
                  for kind in (OperatorKind.G0, OperatorKind.G1, OperatorKind.G2)]
        groups = [(kind, idx) for kind, idx in groups if idx.size]
        try:
            if len(groups) == 1:
                kind = groups[0][0]
                embeddings, logits_t, box_t = _apply_group(
                    kind, embeddings, logits_t, box_t, sp)
            else:
                e_parts, l_parts, b_parts, order = [], [], [], []
                for kind, idx in groups:
                    e, l, b = _apply_group(
                        kind, ad.index_select(embeddings, idx),
                        ad.index_select(logits_t, idx),
                        ad.index_select(box_t, idx), sp)
                    e_parts.append(e)
                    l_parts.append(l)
                    b_parts.append(b)
                    order.append(idx)
                inv = np.argsort(np.concatenate(order))
                embeddings = ad.index_select(ad.concat(e_parts), inv)
                logits_t = ad.index_select(ad.concat(l_parts), inv)
                box_t = ad.index_select(ad.concat(b_parts), inv)
        except FloatingPointError as err:
            raise DivergenceError(f"non-finite values at stage {k}: {err}",
                                  stage=k) from err
        records.append(StageRecord(stage=k, ops=assigned.copy(), boxes=box_t,
                                   logits=logits_t, eps=eps, u=u))
    return HeadTrace(stages=records)


def _apply_group(kind, rows, logits_rows, box_rows, sp: OperatorParams):
    if kind == OperatorKind.G2:
        return rows, logits_rows, box_rows
    h = apply_operator_rows(kind, rows, sp)
    logits, deltas = predict(h, sp)
    new_boxes = refine_boxes(ad.constant(box_rows.data), deltas)
    return h, logits, new_boxes


def predictions_from_record(rec: StageRecord, num_classes: int):
    """Decode one stage's predictions: (boxes, class ids, scores).

    The score is the best real-class probability (the trailing logit is
    "no object"); the class is that argmax.
    """
    logits = rec.logits.data
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    real = probs[:, :num_classes]
    classes = real.argmax(axis=1)
    scores = real[np.arange(real.shape[0]), classes]
    return rec.boxes.data.copy(), classes.astype(np.intp), scores


# ---------------------------------------------------------------------------
# selection losses


def iou_loss(selections, ious, num_proposals: int) -> Tensor:
    """Quality-matching loss on the g0/g1 assignment strengths.

    Per proposal and selector stage this is, for j in {0, 1},
    (1-u) eps_j + u (1-eps_j), averaged by 1/N; implemented in the
    algebraically equal form 2u/N + ((1-2u)/N)(eps_0 + eps_1) so the
    gradient w.r.t. each eps_j is exactly (1 - 2u)/N.
    """
    if len(selections) != len(ious):
        raise ValueError("one IoU vector per selection tensor is required")
    total = None
    const_part = 0.0
    for eps, u in zip(selections, ious):
        u = np.asarray(u, dtype=np.float64)
        if eps.shape[0] != u.shape[0]:
            raise ValueError(
                f"selection/IoU shapes disagree: {eps.shape} vs {u.shape}")
        coeff = ad.constant(((1.0 - 2.0 * u) / num_proposals)[:, None])
        term = ad.tsum(ad.mul(coeff, ad.narrow(eps, 1, 0, 2)))
        total = term if total is None else ad.add(total, term)
        const_part += float(np.sum(2.0 * u)) / num_proposals
    if total is None:
        return ad.constant(0.0)
    return ad.add(total, ad.constant(const_part))


def complexity_loss(selections, targets, num_proposals: int) -> Tensor:
    """Budget loss: sum over selector stages of |sum_i eps_i0 - T| / N."""
    if len(selections) != len(targets):
        raise ValueError("one target per selection tensor is required")
    total = None
    for eps, target in zip(selections, targets):
        s0 = ad.tsum(ad.narrow(eps, 1, 0, 1))
        dev = ad.absolute(ad.sub(s0, ad.constant(float(target))))
        total = dev if total is None else ad.add(total, dev)
    if total is None:
        return ad.constant(0.0)
    return ad.div(total, ad.constant(float(num_proposals)))


def target_T(alpha: float, M: int, T_min: float, N: int) -> float:
    """Target number of g0 selections: alpha*M clipped to [T_min, N]."""
    if alpha <= 0 or M < 0 or not (0 < T_min <= N):
        raise ValueError("need alpha > 0, M >= 0, 0 < T_min <= N")
    return float(min(max(alpha * M, T_min), N))


def tmin_schedule(N: int, tmin_last: float, selector_count: int):
    """Per-selector lower bounds decaying geometrically from N to tmin_last."""
    if selector_count < 1:
        raise ValueError("need at least one selector stage")
    if not (0 < tmin_last <= N):
        raise ValueError("tmin_last must lie in (0, N]")
    out = [N * (tmin_last / N) ** (m / selector_count)
           for m in range(1, selector_count + 1)]
    out[-1] = float(tmin_last)
    return out


def selection_loss(iou_loss_value, complexity_loss_value, lam: float) -> Tensor:
    """Combined routing loss: quality term plus lam times budget term."""
    li = iou_loss_value if isinstance(iou_loss_value, Tensor) \
        else ad.constant(float(iou_loss_value))
    lc = complexity_loss_value if isinstance(complexity_loss_value, Tensor) \
        else ad.constant(float(complexity_loss_value))
    return ad.add(li, ad.scale(lc, float(lam)))


def selection_targets(cfg: HeadConfig, M: int):
    """Per-selector-stage T values for an image with M instances."""
    bounds = tmin_schedule(cfg.num_proposals, cfg.tmin_last,
                           len(cfg.selector_stages))
    return [target_T(cfg.alpha, M, b, cfg.num_proposals) for b in bounds]


def selection_loss_from_trace(trace: HeadTrace, cfg: HeadConfig, M: int,
                              use_iou: bool = True, use_c: bool = True):
    """(L_iou, L_c, L_s) for one image's trace (train-mode forward)."""
    eps_list, u_list = [], []
    for k in cfg.selector_stages:
        rec = trace.record(k)
        if rec.eps is None or rec.u is None:
            raise ValueError(f"stage {k} has no recorded selection state")
        eps_list.append(rec.eps)
        u_list.append(rec.u)
    li = iou_loss(eps_list, u_list, cfg.num_proposals) if use_iou \
        else ad.constant(0.0)
    lc = complexity_loss(eps_list, selection_targets(cfg, M),
                         cfg.num_proposals) if use_c else ad.constant(0.0)
    return li, lc, selection_loss(li, lc, cfg.selection_lambda)


# ---------------------------------------------------------------------------
# detection losses


_MATCH_W_CE, _MATCH_W_L1, _MATCH_W_GIOU = 2.0, 5.0, 2.0


def _giou_rows(pred: Tensor, tgt: np.ndarray) -> Tensor:
    """Differentiable GIoU between matched prediction rows and constants."""
    eps = 1e-9
    col = lambda t, j: ad.narrow(t, 1, j, 1)
    px0, py0, px1, py1 = (col(pred, j) for j in range(4))
    t = ad.constant(tgt)
    tx0, ty0, tx1, ty1 = (col(t, j) for j in range(4))
    iw = ad.relu(ad.sub(ad.minimum(px1, tx1), ad.maximum(px0, tx0)))
    ih = ad.relu(ad.sub(ad.minimum(py1, ty1), ad.maximum(py0, ty0)))
    inter = ad.mul(iw, ih)
    parea = ad.mul(ad.sub(px1, px0), ad.sub(py1, py0))
    tarea = ad.constant(((tgt[:, 2] - tgt[:, 0]) * (tgt[:, 3] - tgt[:, 1]))[:, None])
    union = ad.sub(ad.add(parea, tarea), inter)
    iou = ad.div(inter, ad.add(union, ad.constant(eps)))
    hx = ad.sub(ad.maximum(px1, tx1), ad.minimum(px0, tx0))
    hy = ad.sub(ad.maximum(py1, ty1), ad.minimum(py0, ty0))
    hull = ad.mul(hx, hy)
    return ad.sub(iou, ad.div(ad.sub(hull, union), ad.add(hull, ad.constant(eps))))


def match_stage(logits: np.ndarray, boxes: np.ndarray, truth_boxes: np.ndarray,
                truth_classes: np.ndarray) -> boxgeo.MatchResult:
    """Hungarian matching on the standard (2, 5, 2)-weighted set cost."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    class_cost = 1.0 - probs[:, truth_classes]
    l1 = np.abs(boxes[:, None, :] - truth_boxes[None, :, :]).sum(axis=2)
    giou_cost = 1.0 - boxgeo.giou_matrix(boxes, truth_boxes)
    cost = _MATCH_W_CE * class_cost + _MATCH_W_L1 * l1 + _MATCH_W_GIOU * giou_cost
    return boxgeo.hungarian(cost)


def detection_loss(trace: HeadTrace, truth_boxes, truth_classes,
                   cfg: HeadConfig) -> Tensor:
    """Deep-supervised set-prediction loss summed over all stages.

    Per stage: weighted cross entropy over all proposals (matched ones
    against their truth class, the rest against "no object", down-weighted
    by eos_weight), normalized by N, plus L1 and GIoU box terms over
    matched pairs normalized by max(M, 1); the (2, 5, 2) weights match the
    assignment cost.
    """
    truth_boxes = np.asarray(truth_boxes, dtype=np.float64).reshape(-1, 4)
    truth_classes = np.asarray(truth_classes, dtype=np.intp)
    n = cfg.num_proposals
    num_m = truth_boxes.shape[0]
    no_object = cfg.num_classes
    total = None
    for rec in trace.stages:
        if num_m > 0:
            match = match_stage(rec.logits.data, rec.boxes.data,
                                truth_boxes, truth_classes)
            pairs = match.pairs
        else:
            pairs = ()
        tgt = np.full(n, no_object, dtype=np.intp)
        weights = np.full(n, cfg.eos_weight)
        for p, t in pairs:
            tgt[p] = truth_classes[t]
            weights[p] = 1.0
        onehot = np.zeros((n, cfg.num_classes + 1))
        onehot[np.arange(n), tgt] = 1.0
        ce = ad.neg(ad.tsum(ad.mul(ad.log_softmax(rec.logits),
                                   ad.constant(onehot)), axis=1))
        ce = ad.div(ad.tsum(ad.mul(ce, ad.constant(weights))), ad.constant(float(n)))
        stage_loss = ad.scale(ce, _MATCH_W_CE)
        if pairs:
            pidx = np.array([p for p, _ in pairs])
            tidx = np.array([t for _, t in pairs])
            pred_rows = ad.index_select(rec.boxes, pidx)
            tgt_rows = truth_boxes[tidx]
            l1 = ad.tsum(ad.absolute(ad.sub(pred_rows, ad.constant(tgt_rows))))
            giou_term = ad.tsum(ad.sub(ad.constant(1.0),
                                       _giou_rows(pred_rows, tgt_rows)))
            box_term = ad.div(
                ad.add(ad.scale(l1, _MATCH_W_L1), ad.scale(giou_term, _MATCH_W_GIOU)),
                ad.constant(float(max(num_m, 1))))
            stage_loss = ad.add(stage_loss, box_term)
        total = stage_loss if total is None else ad.add(total, stage_loss)
    return total


# ---------------------------------------------------------------------------
# checkpoint container

_CKPT_MAGIC = "DPP-CHECKPOINT v1"


def save_checkpoint(path, params: HeadParams, config_items: dict) -> None:
    """Versioned checkpoint: config echo + tensor manifest + raw float64.

    Layout (text header, then binary): a magic line, a ``[config]`` section
    of key=value lines, a ``[tensors]`` section with one
    ``name dim0,dim1,... byte_offset`` line per tensor, a ``[data]`` marker,
    and the concatenated little-endian float64 tensor payloads.
    """
    header = io.StringIO()
    header.write(_CKPT_MAGIC + "\n")
    header.write("[config]\n")
    for key, value in config_items.items():
        header.write(f"{key}={value}\n")
    header.write("[tensors]\n")
    blobs = []
    offset = 0
    for name, tensor in params.named():
        dims = ",".join(str(s) for s in tensor.shape) or "scalar"
        header.write(f"{name} {dims} {offset}\n")
        raw = tensor.data.astype("<f8").tobytes()
        blobs.append(raw)
        offset += len(raw)
    header.write("[data]\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("utf-8"))
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Read a checkpoint; returns (config item dict, {name: float64 array})."""
    with open(path, "rb") as fh:
        payload = fh.read()
    marker = b"[data]\n"
    split = payload.find(marker)
    if split < 0:
        raise CheckpointError(f"{path}: missing data section")
    try:
        header = payload[:split].decode("utf-8").splitlines()
    except UnicodeDecodeError as err:
        raise CheckpointError(f"{path}: corrupt header") from err
    blob = payload[split + len(marker):]
    if not header or header[0] != _CKPT_MAGIC:
        raise CheckpointError(
            f"{path}: not a '{_CKPT_MAGIC}' checkpoint "
            f"(found {header[0][:40]!r})" if header else f"{path}: empty file")
    try:
        cfg_at = header.index("[config]")
        tensors_at = header.index("[tensors]")
    except ValueError as err:
        raise CheckpointError(f"{path}: missing header section") from err
    config_items = {}
    for line in header[cfg_at + 1:tensors_at]:
        key, _, value = line.partition("=")
        config_items[key] = value
    arrays = {}
    for line in header[tensors_at + 1:]:
        try:
            name, dims, offset = line.rsplit(" ", 2)
            shape = () if dims == "scalar" else tuple(int(s) for s in dims.split(","))
            start = int(offset)
        except ValueError as err:
            raise CheckpointError(f"{path}: bad tensor line {line!r}") from err
        count = int(np.prod(shape)) if shape else 1
        end = start + 8 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: tensor {name} overruns the payload")
        arrays[name] = np.frombuffer(blob[start:end], dtype="<f8").reshape(shape).copy()
    return config_items, arrays

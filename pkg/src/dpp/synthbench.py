"""Synthetic detection benchmark: scenes, encoding, training, evaluation.

Scenes are sets of non-crowded ground-truth boxes with class labels.
Proposals are synthesized per scene: a jittered copy of each truth (these
carry high IoU) plus uniform random boxes (junk), in a configurable mix.
Each proposal's embedding is a fixed random linear map of
``[box coords, noisy class vector, noise]``; jittered proposals embed their
truth's (noisy) one-hot class while random ones embed a flat class vector,
so embeddings carry a recoverable quality signal without leaking IoU.

Training runs in two phases: the head is first pretrained as an
equal-treatment all-g0 stack with detection losses only, then the selectors
are switched on and trained jointly with the routing losses at a 10x higher
learning rate than the body, with step decay at 75% and 92% of the
remaining schedule.
"""

from __future__ import annotations

import hashlib
import struct
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import boxgeo
from . import complexity as cx
from . import selector as sel
from .boxgeo import Box
from .config import RunConfig, head_config
from .errors import DataFormatError, DivergenceError
from .head import (HeadParams, detection_loss, predictions_from_record,
                   run_head, routing_iou, selection_loss_from_trace)
from .optim import AdamW

# independent seed streams, combined with the global seed
_STREAM_DATA = 1
_STREAM_INIT = 2
_STREAM_TRAIN = 3
_STREAM_ENCODE = 4

# the proposal encoder is a fixed map shared by every run (not trained)
_ENCODER_SEED = 0x0DDC0DE5
_ENCODER_CACHE: dict = {}


def derive_seed(*parts: int) -> int:
    """Deterministic 64-bit seed from a tuple of integers."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(ss.generate_state(1, np.uint64)[0])


def derive_rng(*parts: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


@dataclass(frozen=True)
class Scene:
    """Ground truth of one synthetic image."""

    truths: tuple
    seed: int

    @property
    def num_instances(self) -> int:
        return len(self.truths)

    def truth_arrays(self):
        boxes = np.array([t.as_array() for t in self.truths]).reshape(-1, 4)
        classes = np.array([t.class_id for t in self.truths], dtype=np.intp)
        return boxes, classes


@dataclass
class EncodedBatch:
    """Proposal set of one scene: fixed embeddings plus initial boxes."""

    embeddings: np.ndarray  # (N, d)
    boxes: np.ndarray       # (N, 4)
    scene: Scene
    truth_boxes: np.ndarray = field(default=None)
    truth_classes: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.truth_boxes is None:
            self.truth_boxes, self.truth_classes = self.scene.truth_arrays()


_MAX_PLACEMENT_TRIES = 10_000


def generate_scene(cfg: RunConfig, seed: int) -> Scene:
    """Sample 1..max_instances boxes with pairwise IoU capped at 0.7."""
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, cfg.max_instances + 1))
    placed: list[np.ndarray] = []
    truths = []
    for _ in range(m):
        for attempt in range(_MAX_PLACEMENT_TRIES):
            w = rng.uniform(cfg.min_box_size, cfg.max_box_size)
            h = rng.uniform(cfg.min_box_size, cfg.max_box_size)
            x0 = rng.uniform(0.0, 1.0 - w)
            y0 = rng.uniform(0.0, 1.0 - h)
            cand = np.array([x0, y0, x0 + w, y0 + h])
            if not placed or boxgeo.iou_matrix(
                    cand[None, :], np.array(placed)).max() <= 0.7:
                break
        else:
            raise RuntimeError("could not place a non-overlapping truth box")
        placed.append(cand)
        truths.append(Box(*cand, class_id=int(rng.integers(0, cfg.num_classes))))
    return Scene(truths=tuple(truths), seed=int(seed))


def _encoder_matrix(feat_dim: int, embed_dim: int) -> np.ndarray:
    key = (feat_dim, embed_dim)
    if key not in _ENCODER_CACHE:
        rng = np.random.default_rng(_ENCODER_SEED)
        _ENCODER_CACHE[key] = rng.normal(
            0.0, 1.0 / np.sqrt(feat_dim), (feat_dim, embed_dim))
    return _ENCODER_CACHE[key]


def encode_proposals(scene: Scene, rng: np.random.Generator,
                     cfg: RunConfig) -> EncodedBatch:
    """Synthesize the proposal set of one scene.

    The first (1 - fraction_random) * N proposals are jittered copies of the
    truths, cycling through them; the rest are uniform random boxes. With
    zero jitter and no random fraction every proposal reproduces a truth
    exactly.
    """
    n = cfg.num_proposals
    c = cfg.num_classes
    num_random = int(round(cfg.fraction_random * n))
    num_jitter = n - num_random
    m = scene.num_instances
    boxes = np.zeros((n, 4))
    class_feats = np.zeros((n, c))
    for i in range(num_jitter):
        truth = scene.truths[i % m]
        w = truth.x_max - truth.x_min
        h = truth.y_max - truth.y_min
        cx_ = 0.5 * (truth.x_min + truth.x_max) + rng.normal(0.0, cfg.jitter_sigma) * w
        cy_ = 0.5 * (truth.y_min + truth.y_max) + rng.normal(0.0, cfg.jitter_sigma) * h
        nw = w * np.exp(rng.normal(0.0, cfg.jitter_sigma))
        nh = h * np.exp(rng.normal(0.0, cfg.jitter_sigma))
        x0 = np.clip(cx_ - nw / 2, 0.0, 1.0)
        y0 = np.clip(cy_ - nh / 2, 0.0, 1.0)
        x1 = np.clip(cx_ + nw / 2, x0, 1.0)
        y1 = np.clip(cy_ + nh / 2, y0, 1.0)
        boxes[i] = (x0, y0, x1, y1)
        class_feats[i, truth.class_id] = 1.0
    for i in range(num_jitter, n):
        w = rng.uniform(0.05, 0.5)
        h = rng.uniform(0.05, 0.5)
        x0 = rng.uniform(0.0, 1.0 - w)
        y0 = rng.uniform(0.0, 1.0 - h)
        boxes[i] = (x0, y0, x0 + w, y0 + h)
        class_feats[i, :] = 1.0 / c  # junk carries no class evidence
    class_feats += rng.normal(0.0, cfg.class_noise, (n, c))
    feats = np.concatenate(
        [boxes, class_feats, rng.normal(0.0, 1.0, (n, 1))], axis=1)
    emb = feats @ _encoder_matrix(4 + c + 1, cfg.embed_dim)
    return EncodedBatch(embeddings=emb, boxes=boxes, scene=scene)


def encode_for_scene(scene: Scene, cfg: RunConfig) -> EncodedBatch:
    """Deterministic encoding: the rng derives from the scene's own seed."""
    return encode_proposals(scene, derive_rng(scene.seed, _STREAM_ENCODE), cfg)


def build_datasets(cfg: RunConfig):
    """(train scenes, val scenes) from the config's global seed."""
    train = [generate_scene(cfg, derive_seed(cfg.seed, _STREAM_DATA, i))
             for i in range(cfg.train_scenes)]
    val = [generate_scene(cfg, derive_seed(cfg.seed, _STREAM_DATA,
                                           cfg.train_scenes + i))
           for i in range(cfg.val_scenes)]
    return train, val


# ---------------------------------------------------------------------------
# dataset container

_DATA_MAGIC = b"DPPDSET1"
_DATA_VERSION = 1


def save_scenes(path, train_scenes, val_scenes) -> None:
    """Scene stream: magic, version, split counts, then per-scene records.

    Per scene: u64 seed, u32 instance count, then per instance four f64
    coordinates and a u32 class id. All little-endian.
    """
    with open(path, "wb") as fh:
        fh.write(_DATA_MAGIC)
        fh.write(struct.pack("<I", _DATA_VERSION))
        fh.write(struct.pack("<QQ", len(train_scenes), len(val_scenes)))
        for scene in list(train_scenes) + list(val_scenes):
            fh.write(struct.pack("<QI", scene.seed, scene.num_instances))
            for t in scene.truths:
                fh.write(struct.pack("<4dI", t.x_min, t.y_min, t.x_max,
                                     t.y_max, t.class_id))


def load_scenes(path):
    """Read a scene stream; returns (train scenes, val scenes)."""
    try:
        with open(path, "rb") as fh:
            payload = fh.read()
    except OSError as err:
        raise DataFormatError(f"cannot read dataset {path}: {err}") from err
    if payload[:8] != _DATA_MAGIC:
        raise DataFormatError(f"{path}: not a scene stream (bad magic)")
    (version,) = struct.unpack_from("<I", payload, 8)
    if version != _DATA_VERSION:
        raise DataFormatError(
            f"{path}: unsupported dataset version {version} "
            f"(expected {_DATA_VERSION})")
    n_train, n_val = struct.unpack_from("<QQ", payload, 12)
    offset = 28
    scenes = []
    try:
        for _ in range(n_train + n_val):
            seed, m = struct.unpack_from("<QI", payload, offset)
            offset += 12
            truths = []
            for _ in range(m):
                x0, y0, x1, y1, cls = struct.unpack_from("<4dI", payload, offset)
                offset += 36
                truths.append(Box(x0, y0, x1, y1, class_id=int(cls)))
            scenes.append(Scene(truths=tuple(truths), seed=int(seed)))
    except struct.error as err:
        raise DataFormatError(f"{path}: truncated scene stream") from err
    if offset != len(payload):
        raise DataFormatError(f"{path}: trailing bytes after scene stream")
    return scenes[:n_train], scenes[n_train:]


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: HeadParams
    log_rows: list
    diverged_at_step: int | None = None


def _snapshot(params: HeadParams) -> dict:
    return {name: tensor.data.copy() for name, tensor in params.named()}


def _restore(params: HeadParams, snapshot: dict) -> None:
    for name, tensor in params.named():
        tensor.data = snapshot[name].copy()


def _batch_iter(num_items: int, batch_size: int, epochs: int, seed: int):
    """Deterministic shuffled batches; yields (epoch, index array)."""
    for epoch in range(epochs):
        order = derive_rng(seed, _STREAM_TRAIN, 7000 + epoch).permutation(num_items)
        for start in range(0, num_items, batch_size):
            yield epoch, order[start:start + batch_size]


def _g0_count_last(trace, hcfg) -> float:
    stage = max(hcfg.selector_stages) if hcfg.selector_stages else hcfg.num_stages
    return float((trace.record(stage).ops == 0).sum())


def train_phase(params: HeadParams, cfg: RunConfig, batches,
                phase: int, log_rows: list, quiet: bool = True) -> int | None:
    """One training phase over pre-encoded batches; returns divergence step.

    Phase 1 runs the head with selectors disabled (equal treatment,
    detection losses only); phase 2 enables routing and adds the selection
    losses, with the selector parameters on a faster learning-rate group
    and step decay at 75%/92% of the phase.
    """
    hcfg_full = head_config(cfg)
    epochs = cfg.phase1_epochs if phase == 1 else cfg.phase2_epochs
    if phase == 1:
        hcfg = replace(hcfg_full, selector_stages=())
        opt = AdamW([{"params": params.body_tensors(), "lr": cfg.phase1_lr}],
                    weight_decay=cfg.weight_decay)
    else:
        hcfg = hcfg_full
        opt = AdamW([{"params": params.body_tensors(), "lr": cfg.phase2_lr_body},
                     {"params": params.selector_tensors(),
                      "lr": cfg.phase2_lr_selector}],
                    weight_decay=cfg.weight_decay)
    mode = sel.TRAIN_HARD if cfg.train_selection == "hard" else sel.TRAIN_SOFT
    steps_per_epoch = (len(batches) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = steps_per_epoch * epochs
    milestones = ({int(total_steps * 0.75), int(total_steps * 0.92)}
                  if phase == 2 else set())
    good = _snapshot(params)
    step = 0
    for epoch, idx in _batch_iter(len(batches), cfg.batch_size, epochs,
                                  cfg.seed + phase):
        step += 1
        if step in milestones:
            opt.scale_lr(0.1)
        rng = derive_rng(cfg.seed, _STREAM_TRAIN, phase, step)
        try:
            with ad.Tape() as tape:
                total = None
                det_v = iou_v = c_v = 0.0
                g0_v = 0.0
                for bi in idx:
                    batch = batches[bi]
                    trace = run_head(ad.constant(batch.embeddings), batch.boxes,
                                     params, hcfg, mode, rng=rng,
                                     truths=batch.truth_boxes)
                    loss = detection_loss(trace, batch.truth_boxes,
                                          batch.truth_classes, hcfg)
                    det_v += loss.item()
                    if phase == 2:
                        li, lc, ls = selection_loss_from_trace(
                            trace, hcfg, batch.scene.num_instances,
                            use_iou=cfg.use_iou_loss, use_c=cfg.use_c_loss)
                        iou_v += li.item()
                        c_v += lc.item()
                        loss = ad.add(loss, ls)
                        g0_v += _g0_count_last(trace, hcfg)
                    total = loss if total is None else ad.add(total, loss)
                total = ad.div(total, ad.constant(float(len(idx))))
                tape.backward(total)
            opt.step()
            opt.zero_grad()
        except (DivergenceError, FloatingPointError) as err:
            _restore(params, good)
            if not quiet:
                print(f"phase {phase} diverged at step {step}: {err}; "
                      f"restored last good snapshot", file=sys.stderr)
            return step
        b = float(len(idx))
        if step % cfg.log_every == 0 or step == total_steps:
            log_rows.append({
                "step": step,
                "phase": phase,
                "lr_body": opt.groups[0]["lr"],
                "lr_selector": opt.groups[1]["lr"] if phase == 2 else 0.0,
                "loss_total": total.item(),
                "loss_detection": det_v / b,
                "loss_iou": iou_v / b,
                "loss_complexity": c_v / b,
                "mean_g0_last": g0_v / b,
            })
        if step % steps_per_epoch == 0:
            good = _snapshot(params)
    return None


def train(cfg: RunConfig, train_scenes, params: HeadParams | None = None,
          phases=(1, 2), quiet: bool = True) -> TrainResult:
    """Two-phase training; pass ``params`` + ``phases=(2,)`` to reuse a
    pretrained equal-treatment head (shared across sweep points)."""
    hcfg = head_config(cfg)
    if params is None:
        params = HeadParams.init(hcfg, derive_rng(cfg.seed, _STREAM_INIT))
    batches = [encode_for_scene(s, cfg) for s in train_scenes]
    log_rows: list = []
    diverged = None
    for phase in phases:
        diverged = train_phase(params, cfg, batches, phase, log_rows,
                               quiet=quiet)
        if diverged is not None:
            break
    return TrainResult(params=params, log_rows=log_rows,
                       diverged_at_step=diverged)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class SceneEval:
    scene_index: int
    pred_boxes: np.ndarray
    pred_classes: np.ndarray
    pred_scores: np.ndarray
    stage_preds: list                 # per stage (boxes, classes, scores)
    selector_ops: np.ndarray          # (S, N) choices at selector stages
    selector_u: np.ndarray            # (S, N) routing IoU at those stages
    final_ops: np.ndarray             # executed ops at the last stage
    operator_flops: float
    total_flops: float


@dataclass
class EvalResult:
    mean_ap: float
    per_stage_ap: list
    mean_operator_flops: float
    mean_total_flops: float
    n_bar: float
    mean_op_counts_last: np.ndarray   # routed counts at the last selector
    scenes: list

    def metrics_row(self, hcfg) -> dict:
        row = {"map": self.mean_ap}
        for i, ap in enumerate(self.per_stage_ap, start=1):
            row[f"ap_stage_{i}"] = ap
        row.update({
            "mean_operator_flops": self.mean_operator_flops,
            "mean_total_flops": self.mean_total_flops,
            "n_bar": self.n_bar,
            "mean_g0_last": float(self.mean_op_counts_last[0]),
            "mean_g1_last": float(self.mean_op_counts_last[1]),
            "mean_g2_last": float(self.mean_op_counts_last[2]),
        })
        return row


def evaluate(params: HeadParams, cfg: RunConfig, scenes) -> EvalResult:
    """Inference-mode evaluation over a scene list.

    Head FLOPs are analytic per-image costs of the executed routing (they
    equal the runtime counter exactly); the equivalent proposal number
    divides per-proposal work (operators + selectors) by the cost of one
    always-g0 proposal, so an unrouted all-g0 head scores exactly N.
    """
    hcfg = head_config(cfg)
    cost_model = hcfg.cost_model()
    selector_stages = tuple(hcfg.selector_stages)
    evals = []
    for si, scene in enumerate(scenes):
        batch = encode_for_scene(scene, cfg)
        trace = run_head(ad.constant(batch.embeddings), batch.boxes, params,
                         hcfg, sel.INFERENCE, truths=batch.truth_boxes)
        assignment = cx.trace_assignment(trace, hcfg)
        stage_preds = [predictions_from_record(rec, hcfg.num_classes)
                       for rec in trace.stages]
        pb, pc, ps = stage_preds[-1]
        sel_u = (np.stack([trace.record(k).u for k in selector_stages])
                 if selector_stages else np.zeros((0, hcfg.num_proposals)))
        evals.append(SceneEval(
            scene_index=si,
            pred_boxes=pb, pred_classes=pc, pred_scores=ps,
            stage_preds=stage_preds,
            selector_ops=assignment.ops,
            selector_u=sel_u,
            final_ops=trace.final().ops.copy(),
            operator_flops=cx.assignment_operator_cost(assignment, cost_model),
            total_flops=cx.unequal_cost(assignment, cost_model),
        ))

    per_stage_ap = [
        _pooled_ap([e.stage_preds[k] for e in evals], scenes)
        for k in range(hcfg.num_stages)
    ]
    mean_operator = float(np.mean([e.operator_flops for e in evals]))
    mean_total = float(np.mean([e.total_flops for e in evals]))
    if selector_stages:
        counts = np.stack([
            [(e.selector_ops[-1] == op).sum() for op in range(3)]
            for e in evals]).mean(axis=0)
    else:
        counts = np.array([float(hcfg.num_proposals), 0.0, 0.0])
    return EvalResult(
        mean_ap=per_stage_ap[-1],
        per_stage_ap=per_stage_ap,
        mean_operator_flops=mean_operator,
        mean_total_flops=mean_total,
        n_bar=cx.equivalent_proposal_number(mean_operator, cost_model,
                                            hcfg.num_stages),
        mean_op_counts_last=counts,
        scenes=evals,
    )


def _pooled_ap(preds_per_scene, scenes, keep_masks=None) -> float:
    pb, pc, ps, pi = [], [], [], []
    tb, tcl, ti = [], [], []
    for si, ((boxes, classes, scores), scene) in enumerate(
            zip(preds_per_scene, scenes)):
        mask = (np.ones(len(classes), dtype=bool) if keep_masks is None
                else keep_masks[si])
        pb.append(boxes[mask])
        pc.append(classes[mask])
        ps.append(scores[mask])
        pi.append(np.full(int(mask.sum()), si, dtype=np.intp))
        boxes_t, classes_t = scene.truth_arrays()
        tb.append(boxes_t)
        tcl.append(classes_t)
        ti.append(np.full(len(classes_t), si, dtype=np.intp))
    result = boxgeo.average_precision_pooled(
        np.concatenate(pb), np.concatenate(pc), np.concatenate(ps),
        np.concatenate(pi), np.concatenate(tb), np.concatenate(tcl),
        np.concatenate(ti))
    return result.mean


# ---------------------------------------------------------------------------
# inspection reports

OPERATOR_GROUPS = (
    ("g0", (0,)),
    ("g1", (1,)),
    ("g2", (2,)),
    ("g0+g1", (0, 1)),
    ("g0+g1+g2", (0, 1, 2)),
)


def report_operator_groups(result: EvalResult, cfg: RunConfig, scenes):
    """AP and mean routed count per operator group at the last selector."""
    rows = []
    for name, ops in OPERATOR_GROUPS:
        masks = [np.isin(e.selector_ops[-1] if e.selector_ops.size
                         else e.final_ops, ops) for e in result.scenes]
        ap = _pooled_ap(
            [(e.pred_boxes, e.pred_classes, e.pred_scores)
             for e in result.scenes], scenes, keep_masks=masks)
        n_eval = float(np.mean([m.sum() for m in masks]))
        rows.append({"group": name, "ap": ap, "n_eval": n_eval})
    return rows


def report_iou_histograms(result: EvalResult, cfg: RunConfig):
    """Routing-IoU histogram rows per (selector stage, operator)."""
    hcfg = head_config(cfg)
    edges = np.linspace(0.0, 1.0, 11)
    rows = []
    for s, stage in enumerate(hcfg.selector_stages):
        for op in range(3):
            values = np.concatenate([
                e.selector_u[s][e.selector_ops[s] == op]
                for e in result.scenes]) if result.scenes else np.zeros(0)
            hist, _ = np.histogram(values, bins=edges)
            for b in range(10):
                rows.append({
                    "stage": stage,
                    "operator": f"g{op}",
                    "bin_lo": round(edges[b], 1),
                    "bin_hi": round(edges[b + 1], 1),
                    "count": int(hist[b]),
                })
    return rows

"""Downstream consumers of estimated scene flow.

Three tasks share the flow network's encoder vocabulary: sequence-level
activity classification, per-point body-segment classification, and
Kabsch-based body-part tracking.  Point features are selected by strategy:
"raw" uses intensity alone, "s1" appends per-point flow from a frozen flow
model, "s2" appends the flow network's per-point features and trains both
networks jointly on a summed loss.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._kernels import point_segment_distances
from .autodiff import Tensor
from .config import NetConfig, TaskConfig, TrainConfig, _coerce_tuples
from .dataio import _frame_seed, preprocess_indices
from .errors import (
    ConfigError,
    DegenerateInput,
    EmptyFrame,
    EmptyInput,
    LengthMismatch,
    MissingFlowModel,
    NoValidPoints,
    TaskMismatch,
)
from .flownet import FlowNet, flow_loss, infer_sequence
from .geometry import kabsch
from .labeling import ASSIGNMENT_RADIUS, N_SEGMENTS
from .layers import (
    MLP,
    Adam,
    GRUCell,
    LSTMCell,
    assign_params,
    farthest_point_sample,
    global_pool,
    load_checkpoint,
    save_checkpoint,
    set_abstraction,
)
from .metrics import mean_iou, mean_joint_error, overall_accuracy
from .radar import RadarFrame
from .skeleton import BONES, IN_SET_ACTIVITIES

STRATEGIES = ("raw", "s1", "s2")
TRACK_CLIP_LENGTH = 5  # one init frame plus four tracked steps

# bones tracked per activity: the moving limb segments, upper and lower
TRACK_TARGETS = {
    "ArmSwing": (3, 4, 5, 6),
    "LegSwing": (9, 10, 11, 12),
    "ArmLegSwing": (3, 4, 5, 6, 9, 10, 11, 12),
}


@dataclass
class TaskClip:
    """A fixed-length frame window with per-pair labels and an activity class.

    labels[t] annotates the pair (t, t+1); the window's final frame has no
    successor inside the window and carries None.
    """

    frames: list
    labels: list
    activity: int
    activity_id: str


def task_clips(sequences, cfg: TaskConfig, mode: str,
               catalogue=IN_SET_ACTIVITIES, seed: int = 0) -> list[TaskClip]:
    """Tile labeled sequences into full, disjoint windows of cfg.window frames.

    Frames are preprocessed like flow-training samples (same per-frame seeds);
    a frame losing every point stays in the window as an empty placeholder.
    Sequences whose activity is outside the catalogue are skipped.
    """
    clips = []
    for seq in sequences:
        if seq.activity_id not in catalogue:
            continue
        if seq.labels is None:
            raise ConfigError(f"sequence {seq.seq_id} has no labels")
        klass = catalogue.index(seq.activity_id)
        frames, labels = [], []
        for i, frame in enumerate(seq.frames):
            try:
                idx = preprocess_indices(frame, mode, _frame_seed(seed, i))
            except EmptyFrame:
                frames.append(RadarFrame(np.zeros((0, 3)), np.zeros(0),
                                         frame.frame_index, frame.timestamp))
                labels.append(None)
                continue
            frames.append(frame.subset(idx))
            labels.append(seq.labels[i].subset(idx) if i < len(seq.labels) else None)
        for start in range(0, len(frames) - cfg.window + 1, cfg.window):
            window = frames[start: start + cfg.window]
            window_labels = labels[start: start + cfg.window - 1] + [None]
            clips.append(TaskClip(window, window_labels, klass, seq.activity_id))
    return clips


# ----------------------------------------------------------------------
# strategy plumbing


def strategy_feature_dim(strategy: str, flow_model: FlowNet | None) -> int:
    if strategy == "raw":
        return 1
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    if flow_model is None:
        raise MissingFlowModel(f"strategy {strategy!r} needs a flow model")
    if strategy == "s1":
        return 4  # intensity plus the three flow components
    return 1 + flow_model.final_dim


@dataclass
class DecoratedClip:
    feats: list  # Tensor (N_t, F) per frame
    pair_flows: list | None = None  # s2 only: flow Tensor | None per pair


def decorate_clip(frames, strategy: str, flow_model: FlowNet | None,
                  dtype=np.float32) -> DecoratedClip:
    """Per-frame point features for one window.

    The window's final frame has no successor, so its flow-derived channels
    are zero.  s1 runs the flow model frozen; s2 keeps the autodiff graph so
    a joint loss reaches the flow parameters, and also returns the per-pair
    flow tensors for reuse in that loss.
    """
    base = [Tensor(f.intensities.astype(dtype)[:, None]) for f in frames]
    if strategy == "raw":
        return DecoratedClip(base)
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    if flow_model is None:
        raise MissingFlowModel(f"strategy {strategy!r} needs a flow model")

    if strategy == "s1":
        state = flow_model.initial_state()
        feats = []
        with ad.no_grad():
            for t, frame in enumerate(frames):
                flows = np.zeros((len(frame), 3), dtype=dtype)
                if t < len(frames) - 1:
                    try:
                        out, state, _ = flow_model.forward(frame, frames[t + 1], state)
                        flows = out.data
                    except EmptyFrame:
                        pass
                feats.append(Tensor(np.concatenate(
                    [base[t].data, flows.astype(dtype)], axis=1)))
        return DecoratedClip(feats)

    state = flow_model.initial_state()
    width = flow_model.final_dim
    feats, pair_flows = [], []
    for t, frame in enumerate(frames):
        final = None
        if t < len(frames) - 1:
            try:
                flows, state, final = flow_model.forward(frame, frames[t + 1], state)
                pair_flows.append(flows)
            except EmptyFrame:
                pair_flows.append(None)
        if final is None:
            final = Tensor(np.zeros((len(frame), width), dtype=dtype))
        feats.append(ad.concat([base[t], final], axis=1))
    return DecoratedClip(feats, pair_flows)


# ----------------------------------------------------------------------
# task networks


def _broadcast_rows(vec: Tensor, n: int, dtype) -> Tensor:
    ones = Tensor(np.ones((n, 1), dtype=dtype))
    return ad.mul(ones, ad.reshape(vec, (1, -1)))


class _CloudEncoder:
    """Multi-scale local features with pooled global context appended."""

    def __init__(self, rng, cfg: TaskConfig, in_features: int, dtype):
        self.cfg = cfg
        self.dtype = dtype
        n_scales = len(cfg.sa_radii)
        in_dim = 3 + in_features
        self.sas = [MLP(rng, in_dim, list(cfg.sa_mlp), dtype=dtype)
                    for _ in range(n_scales)]
        self.posts = [MLP(rng, cfg.sa_mlp[-1], list(cfg.post_sa_mlp), dtype=dtype)
                      for _ in range(n_scales)]
        self.feat_out = n_scales * cfg.post_sa_mlp[-1]
        self.z_dim = 2 * self.feat_out
        self.attn = MLP(rng, self.feat_out, [cfg.attention_hidden, 1], dtype=dtype)

    def __call__(self, points, feats: Tensor):
        outs = []
        for sa, post, radius, samples in zip(self.sas, self.posts,
                                             self.cfg.sa_radii, self.cfg.sa_samples):
            outs.append(post(set_abstraction(sa, points, feats, radius, samples)))
        k = ad.concat(outs, axis=1)
        g, _ = global_pool(self.attn, k)
        z = ad.concat([k, _broadcast_rows(g, k.shape[0], self.dtype)], axis=1)
        return z, g

    def named_params(self, prefix: str) -> dict:
        out = {}
        for s, (sa, post) in enumerate(zip(self.sas, self.posts)):
            out.update(sa.named_params(f"{prefix}.sa{s}"))
            out.update(post.named_params(f"{prefix}.post{s}"))
        out.update(self.attn.named_params(f"{prefix}.attn"))
        return out


class HarNet:
    """Sequence-level activity classifier.

    Per frame: cloud encoder, then a second local encoder on farthest-point
    centroids, attention-pooled into one frame vector.  An LSTM consumes the
    frame vectors; the classifier reads its last hidden state.
    """

    kind = "har"

    def __init__(self, cfg: TaskConfig, in_features: int, n_classes: int,
                 seed: int = 0, dtype=np.float32):
        if n_classes < 2:
            raise ConfigError("classifier needs at least 2 classes")
        self.cfg = cfg
        self.in_features = in_features
        self.n_classes = n_classes
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.encoder = _CloudEncoder(rng, cfg, in_features, self.dtype)
        self.stage2 = MLP(rng, 3 + self.encoder.z_dim, list(cfg.stage2_mlp),
                          dtype=self.dtype)
        self.stage2_attn = MLP(rng, cfg.stage2_mlp[-1],
                               [cfg.attention_hidden, 1], dtype=self.dtype)
        self.lstm = LSTMCell(rng, cfg.lstm_hidden, input_dim=cfg.stage2_mlp[-1],
                             dtype=self.dtype)
        self.head = MLP(rng, cfg.lstm_hidden, list(cfg.classifier) + [n_classes],
                        dtype=self.dtype)

    def named_params(self) -> dict:
        out = self.encoder.named_params("enc")
        out.update(self.stage2.named_params("stage2"))
        out.update(self.stage2_attn.named_params("stage2.attn"))
        out.update(self.lstm.named_params("lstm"))
        out.update(self.head.named_params("head"))
        return out

    def frame_vector(self, frame, feats: Tensor) -> Tensor:
        points = np.asarray(frame.points, dtype=self.dtype)
        z, _ = self.encoder(points, feats)
        k = min(self.cfg.fps_centroids, len(points))
        # anchor the sweep at the lexicographically smallest point so the
        # centroid choice depends on geometry, not on input order
        start = int(np.lexsort((points[:, 2], points[:, 1], points[:, 0]))[0])
        centroid_idx = farthest_point_sample(points, k, start=start)
        pooled = set_abstraction(self.stage2, points, z, self.cfg.stage2_radius,
                                 self.cfg.stage2_samples, centroid_idx=centroid_idx)
        v, _ = global_pool(self.stage2_attn, pooled)
        return v

    def forward(self, frames, feats_list) -> Tensor:
        """Window of frames with per-point features -> class scores (K,)."""
        h = Tensor(np.zeros(self.cfg.lstm_hidden, dtype=self.dtype))
        c = Tensor(np.zeros(self.cfg.lstm_hidden, dtype=self.dtype))
        seen = False
        for frame, feats in zip(frames, feats_list):
            if len(frame) == 0:
                continue  # no evidence this frame; hold the recurrent state
            v = self.frame_vector(frame, feats)
            h, c = self.lstm(h, c, v)
            seen = True
        if not seen:
            raise EmptyFrame("every frame in the window is empty")
        return self.head(h)

    def config_dict(self) -> dict:
        return {
            "kind": self.kind,
            "task": dataclasses.asdict(self.cfg),
            "in_features": self.in_features,
            "n_classes": self.n_classes,
            "dtype": self.dtype.name,
        }


class HpNet:
    """Per-point body-segment classifier.

    Per frame: cloud encoder; a GRU propagates the pooled global vector
    across frames; each point's head input is its local-global feature with
    the current hidden state appended.
    """

    kind = "hp"

    def __init__(self, cfg: TaskConfig, in_features: int,
                 n_segments: int = N_SEGMENTS, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.in_features = in_features
        self.n_classes = n_segments
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.encoder = _CloudEncoder(rng, cfg, in_features, self.dtype)
        self.gru = GRUCell(rng, cfg.gru_hidden, input_dim=self.encoder.feat_out,
                           dtype=self.dtype)
        self.head = MLP(rng, self.encoder.z_dim + cfg.gru_hidden,
                        list(cfg.classifier) + [n_segments], dtype=self.dtype)

    def named_params(self) -> dict:
        out = self.encoder.named_params("enc")
        out.update(self.gru.named_params("gru"))
        out.update(self.head.named_params("head"))
        return out

    def forward(self, frames, feats_list) -> list:
        """Window -> per-frame score tensors (N_t, V); None for empty frames."""
        h = Tensor(np.zeros(self.cfg.gru_hidden, dtype=self.dtype))
        scores = []
        for frame, feats in zip(frames, feats_list):
            if len(frame) == 0:
                scores.append(None)  # state held across the gap
                continue
            points = np.asarray(frame.points, dtype=self.dtype)
            z, g = self.encoder(points, feats)
            h = self.gru(h, g)
            final = ad.concat([z, _broadcast_rows(h, z.shape[0], self.dtype)], axis=1)
            scores.append(self.head(final))
        return scores

    def config_dict(self) -> dict:
        return {
            "kind": self.kind,
            "task": dataclasses.asdict(self.cfg),
            "in_features": self.in_features,
            "n_classes": self.n_classes,
            "dtype": self.dtype.name,
        }


# ----------------------------------------------------------------------
# losses


def cross_entropy(scores: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer labels against unnormalized scores."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    rows = scores if scores.data.ndim == 2 else ad.reshape(scores, (1, -1))
    if rows.shape[0] != len(labels):
        raise LengthMismatch(f"{rows.shape[0]} score rows vs {len(labels)} labels")
    if len(labels) == 0:
        raise EmptyInput("no labels")
    # constant shift keeps exp in range without touching the gradient
    z = ad.add(rows, Tensor(-rows.data.max(axis=-1, keepdims=True)))
    logsum = ad.log(ad.tsum(ad.exp(z), axis=-1, keepdims=True))
    logp = ad.add(z, ad.mul(logsum, -1.0))
    onehot = np.eye(rows.shape[-1], dtype=rows.data.dtype)[labels]
    picked = ad.tsum(ad.mul(logp, Tensor(onehot)), axis=-1)
    return ad.mul(ad.tmean(picked), -1.0)


def balanced_cross_entropy(scores: Tensor, labels, valid) -> Tensor:
    """Cross-entropy averaged per class over the valid points, then over the
    classes present, so small body segments weigh as much as large ones."""
    labels = np.asarray(labels, dtype=np.int64)
    valid = np.asarray(valid, dtype=bool)
    if scores.shape[0] != len(labels) or len(labels) != len(valid):
        raise LengthMismatch("scores, labels and mask must align")
    if not valid.any():
        raise NoValidPoints("every point is masked out")
    terms = []
    for c in np.unique(labels[valid]):
        idx = np.flatnonzero(valid & (labels == c))
        terms.append(cross_entropy(ad.take(scores, idx), np.full(len(idx), c)))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.mul(total, 1.0 / len(terms))


def _joint_flow_loss(decorated: DecoratedClip, clip: TaskClip, flow_cfg):
    """Mean flow loss over the window's usable pairs (s2 joint training)."""
    terms = []
    for flows, label in zip(decorated.pair_flows, clip.labels):
        if flows is None or label is None:
            continue
        try:
            terms.append(flow_loss(flows, label, zeta=flow_cfg.loss_zeta,
                                   alpha_large=flow_cfg.alpha_large,
                                   alpha_small=flow_cfg.alpha_small))
        except NoValidPoints:
            continue
    if not terms:
        return None
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.mul(total, 1.0 / len(terms))


def har_clip_loss(model: HarNet, clip: TaskClip, decorated: DecoratedClip,
                  flow_model: FlowNet | None = None) -> Tensor | None:
    """Cross-entropy on the window's activity; joint variants add the mean
    flow loss of the window's pairs (equal weighting)."""
    try:
        scores = model.forward(clip.frames, decorated.feats)
    except EmptyFrame:
        return None
    loss = cross_entropy(scores, clip.activity)
    if decorated.pair_flows is not None:
        flow_term = _joint_flow_loss(decorated, clip, flow_model.cfg)
        if flow_term is not None:
            loss = ad.add(loss, flow_term)
    return loss


def hp_clip_loss(model: HpNet, clip: TaskClip, decorated: DecoratedClip,
                 flow_model: FlowNet | None = None) -> Tensor | None:
    """Class-balanced cross-entropy pooled over the window's labeled points."""
    score_rows, label_rows, valid_rows = [], [], []
    for scores, label in zip(model.forward(clip.frames, decorated.feats),
                             clip.labels):
        if scores is None or label is None:
            continue
        score_rows.append(scores)
        label_rows.append(label.segment_label)
        valid_rows.append(label.valid_mask)
    if not score_rows:
        return None
    stacked = ad.concat(score_rows, axis=0)
    labels = np.concatenate(label_rows)
    valid = np.concatenate(valid_rows)
    if not valid.any():
        return None
    loss = balanced_cross_entropy(stacked, labels, valid)
    if decorated.pair_flows is not None:
        flow_term = _joint_flow_loss(decorated, clip, flow_model.cfg)
        if flow_term is not None:
            loss = ad.add(loss, flow_term)
    return loss


# ----------------------------------------------------------------------
# prediction and evaluation


def _decoration_lookup(decorations, clip, strategy, flow_model, dtype):
    if decorations is not None and id(clip) in decorations:
        return decorations[id(clip)]
    return decorate_clip(clip.frames, strategy, flow_model, dtype=dtype)


def predict_har(model: HarNet, clips, strategy: str,
                flow_model: FlowNet | None = None, decorations=None):
    """(predicted class, true class) per scorable clip."""
    preds, truths = [], []
    with ad.no_grad():
        for clip in clips:
            decorated = _decoration_lookup(decorations, clip, strategy,
                                           flow_model, model.dtype)
            try:
                scores = model.forward(clip.frames, decorated.feats)
            except EmptyFrame:
                continue
            preds.append(int(np.argmax(scores.data)))
            truths.append(clip.activity)
    return np.asarray(preds), np.asarray(truths)


def evaluate_har(model: HarNet, clips, strategy: str,
                 flow_model: FlowNet | None = None, decorations=None) -> dict:
    preds, truths = predict_har(model, clips, strategy, flow_model, decorations)
    if len(preds) == 0:
        raise EmptyInput("no scorable windows")
    k = model.n_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(preds, truths):
        confusion[t, p] += 1
    return {
        "oa": overall_accuracy(preds, truths),
        "confusion": confusion,
        "n_clips": len(preds),
    }


def predict_hp(model: HpNet, clips, strategy: str,
               flow_model: FlowNet | None = None, decorations=None):
    """(predicted segment, true segment) over every valid labeled point."""
    preds, truths = [], []
    with ad.no_grad():
        for clip in clips:
            decorated = _decoration_lookup(decorations, clip, strategy,
                                           flow_model, model.dtype)
            for scores, label in zip(model.forward(clip.frames, decorated.feats),
                                     clip.labels):
                if scores is None or label is None:
                    continue
                keep = label.valid_mask
                preds.append(np.argmax(scores.data[keep], axis=1))
                truths.append(label.segment_label[keep])
    if not preds:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(preds), np.concatenate(truths)


def evaluate_hp(model: HpNet, clips, strategy: str,
                flow_model: FlowNet | None = None, decorations=None) -> dict:
    preds, truths = predict_hp(model, clips, strategy, flow_model, decorations)
    if len(preds) == 0:
        raise EmptyInput("no valid labeled points")
    return {
        "oa": overall_accuracy(preds, truths),
        "miou": mean_iou(preds, truths, n_classes=model.n_classes),
        "n_points": len(preds),
    }


def confusion_matrix_csv(confusion: np.ndarray, class_names) -> str:
    """Rows are the true class, columns the prediction."""
    confusion = np.asarray(confusion)
    if confusion.shape != (len(class_names), len(class_names)):
        raise LengthMismatch("confusion matrix does not match class names")
    lines = ["truth\\prediction," + ",".join(class_names)]
    for name, row in zip(class_names, confusion):
        lines.append(name + "," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# training


def _make_task_model(task: str, task_cfg: TaskConfig, in_features: int,
                     n_classes: int, seed: int, dtype):
    if task == "har":
        return HarNet(task_cfg, in_features, n_classes, seed=seed, dtype=dtype)
    if task == "hp":
        return HpNet(task_cfg, in_features, n_segments=n_classes, seed=seed,
                     dtype=dtype)
    raise ConfigError(f"unknown task {task!r}")


def _task_checkpoint_config(model, strategy: str,
                            flow_model: FlowNet | None) -> dict:
    config = model.config_dict()
    config["strategy"] = strategy
    if strategy == "s2":
        # the co-trained flow model ships inside the same checkpoint
        config["flow"] = flow_model.config_dict()
    return config


def train_task_model(task: str, train_clips, val_clips, task_cfg: TaskConfig,
                     train_cfg: TrainConfig, strategy: str, checkpoint_path,
                     flow_model: FlowNet | None = None, n_classes: int | None = None,
                     log_path=None):
    """Shared trainer for both classification tasks.

    raw/s1 train the task network alone (s1 decorations are precomputed from
    the frozen flow model); s2 optimizes the task and flow parameters jointly
    on the summed loss.  Checkpoints keep the best validation accuracy.
    """
    if task not in ("har", "hp"):
        raise ConfigError(f"unknown task {task!r}")
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    train_clips, val_clips = list(train_clips), list(val_clips)
    if not train_clips:
        raise ConfigError("no training clips")
    if not val_clips:
        raise ConfigError("no validation clips")
    if strategy != "raw" and flow_model is None:
        raise MissingFlowModel(f"strategy {strategy!r} needs a flow model")
    checkpoint_path = Path(checkpoint_path)
    dtype = np.float32 if train_cfg.dtype == "float32" else np.float64
    if n_classes is None:
        n_classes = len(IN_SET_ACTIVITIES) if task == "har" else N_SEGMENTS
    in_features = strategy_feature_dim(strategy, flow_model)
    model = _make_task_model(task, task_cfg, in_features, n_classes,
                             train_cfg.seed, dtype)
    clip_loss_fn = har_clip_loss if task == "har" else hp_clip_loss

    named = model.named_params()
    if strategy == "s2":
        named.update({f"flow.{k}": t for k, t in flow_model.named_params().items()})
    opt = Adam(named, lr=train_cfg.lr)
    rng = np.random.default_rng(train_cfg.seed)
    if train_cfg.max_val_clips is not None and len(val_clips) > train_cfg.max_val_clips:
        pick = rng.permutation(len(val_clips))[: train_cfg.max_val_clips]
        val_clips = [val_clips[i] for i in pick]

    cache = None
    if strategy in ("raw", "s1"):  # decorations are constant, compute once
        cache = {id(c): decorate_clip(c.frames, strategy, flow_model, dtype)
                 for c in train_clips + val_clips}

    def decorated(clip):
        if cache is not None:
            return cache[id(clip)]
        return decorate_clip(clip.frames, strategy, flow_model, dtype)

    def val_accuracy():
        evaluate = evaluate_har if task == "har" else evaluate_hp
        try:
            return evaluate(model, val_clips, strategy, flow_model,
                            decorations=cache)["oa"]
        except EmptyInput:
            return float("nan")

    log_f = open(log_path, "w") if log_path is not None else None
    history = []
    best = -np.inf
    saved = False
    since_best = 0
    try:
        for epoch in range(train_cfg.epochs):
            opt.lr = train_cfg.lr * train_cfg.lr_decay ** epoch
            order = rng.permutation(len(train_clips))
            if train_cfg.max_clips_per_epoch is not None:
                order = order[: train_cfg.max_clips_per_epoch]
            epoch_losses = []
            for start in range(0, len(order), train_cfg.batch_clips):
                batch = order[start: start + train_cfg.batch_clips]
                opt.zero_grad()
                contributed = 0
                for ci in batch:
                    clip = train_clips[ci]
                    loss = clip_loss_fn(model, clip, decorated(clip), flow_model)
                    if loss is None:
                        continue
                    loss.backward()
                    epoch_losses.append(float(loss.data))
                    contributed += 1
                if contributed == 0:
                    continue
                if contributed > 1:
                    for t in named.values():
                        if t.grad is not None:
                            t.grad /= contributed
                opt.step()
            val_oa = val_accuracy()
            row = {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
                "val_oa": val_oa,
                "lr": opt.lr,
            }
            history.append(row)
            if log_f is not None:
                log_f.write(json.dumps(row) + "\n")
                log_f.flush()
            if (not np.isnan(val_oa) and val_oa > best) or not saved:
                best = val_oa if not np.isnan(val_oa) else best
                save_checkpoint(checkpoint_path, named,
                                config=_task_checkpoint_config(model, strategy,
                                                               flow_model))
                saved = True
                since_best = 0
            else:
                since_best += 1
                if since_best >= train_cfg.patience:
                    break
    finally:
        if log_f is not None:
            log_f.close()

    values, _ = load_checkpoint(checkpoint_path)
    assign_params(named, values)
    return model, history


def load_task_model(path, task: str | None = None, strategy: str | None = None):
    """Restore a task checkpoint -> (model, stored strategy, flow model or None).

    The flow model is only stored for jointly trained (s2) checkpoints; s1
    users must supply their frozen flow checkpoint separately.
    """
    values, config = load_checkpoint(path)
    kind = config.get("kind")
    if kind not in ("har", "hp"):
        raise TaskMismatch(f"checkpoint at {path} is not a task model")
    if task is not None and kind != task:
        raise TaskMismatch(f"checkpoint holds a {kind!r} model, not {task!r}")
    stored = config.get("strategy", "raw")
    if strategy is not None and stored != strategy:
        raise TaskMismatch(
            f"checkpoint was trained with strategy {stored!r}, not {strategy!r}")
    task_cfg = TaskConfig(**_coerce_tuples(TaskConfig, config["task"]))
    dtype = np.dtype(config.get("dtype", "float32"))
    model = _make_task_model(kind, task_cfg, config["in_features"],
                             config["n_classes"], 0, dtype)
    named = model.named_params()
    flow_model = None
    if stored == "s2":
        from .config import NetConfig

        flow_cfg = config["flow"]
        flow_model = FlowNet(NetConfig(**_coerce_tuples(NetConfig, flow_cfg["net"])),
                             seed=0, dtype=np.dtype(flow_cfg["dtype"]))
        named.update({f"flow.{k}": t for k, t in flow_model.named_params().items()})
    assign_params(named, values)
    return model, stored, flow_model


# ----------------------------------------------------------------------
# body-part tracking


@dataclass(frozen=True)
class TrackState:
    bone_ids: tuple
    endpoints: np.ndarray  # (B, 2, 3) current estimates
    tracking_length: int = 0
    fallback_bones: tuple = ()  # bones that used translation-only this step

    def __post_init__(self):
        if self.endpoints.shape != (len(self.bone_ids), 2, 3):
            raise LengthMismatch("endpoints must be (bones, 2, 3)")
        if not np.all(np.isfinite(self.endpoints)):
            raise DegenerateInput("tracked endpoints must stay finite")


def bone_endpoints(keypoints: np.ndarray, bone_ids) -> np.ndarray:
    """(B, 2, 3) endpoint positions of the chosen bones in one pose."""
    return np.stack([
        np.stack([keypoints[BONES[b][0]], keypoints[BONES[b][1]]])
        for b in bone_ids
    ])


def _assign_tracked(points: np.ndarray, endpoints: np.ndarray) -> np.ndarray:
    """Nearest tracked bone per point within the assignment gate, else -1."""
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    d = point_segment_distances(points, endpoints[:, 0], endpoints[:, 1])
    nearest = np.argmin(d, axis=1)
    dmin = d[np.arange(len(points)), nearest]
    return np.where(dmin <= ASSIGNMENT_RADIUS, nearest, -1)


def track_step(points: np.ndarray, flows: np.ndarray,
               state: TrackState) -> TrackState:
    """Advance every tracked bone by one frame.

    Points are reassigned to the current endpoint estimates; bones with at
    least three assigned points get a rigid update from the correspondences
    (p, p + f), the rest fall back to the mean flow as pure translation.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    flows = np.asarray(flows, dtype=np.float64).reshape(-1, 3)
    if len(points) != len(flows):
        raise LengthMismatch(f"{len(points)} points vs {len(flows)} flows")
    assign = _assign_tracked(points, state.endpoints)
    new_endpoints = state.endpoints.copy()
    fallback = []
    for slot, bone in enumerate(state.bone_ids):
        idx = np.flatnonzero(assign == slot)
        if len(idx) >= 3:
            try:
                transform = kabsch(points[idx], points[idx] + flows[idx])
                new_endpoints[slot] = transform.apply(state.endpoints[slot])
                continue
            except DegenerateInput:
                pass
        delta = flows[idx].mean(axis=0) if len(idx) else np.zeros(3)
        new_endpoints[slot] = state.endpoints[slot] + delta
        fallback.append(bone)
    return TrackState(state.bone_ids, new_endpoints,
                      state.tracking_length + 1, tuple(fallback))


def track_clip(frames, flow_fields, bone_ids, init_endpoints) -> list[TrackState]:
    """Track bones through one short clip; returns the state trajectory,
    starting with the initial state (tracking length 0)."""
    if not 2 <= len(frames) <= TRACK_CLIP_LENGTH:
        raise ConfigError(
            f"clips cover 2..{TRACK_CLIP_LENGTH} frames, got {len(frames)}")
    if len(flow_fields) != len(frames) - 1:
        raise LengthMismatch(
            f"{len(frames)} frames need {len(frames) - 1} flow fields")
    state = TrackState(tuple(bone_ids), np.asarray(init_endpoints, dtype=np.float64))
    trajectory = [state]
    for frame, flows in zip(frames[:-1], flow_fields):
        state = track_step(frame.points, flows, state)
        trajectory.append(state)
    return trajectory


def evaluate_tracking(sequences, flow_model: FlowNet | None = None,
                      activities=None, clip_length: int = TRACK_CLIP_LENGTH) -> dict:
    """Tracking error by activity and tracking length over labeled sequences.

    Bones per activity follow TRACK_TARGETS; endpoints initialize from the
    true pose at each clip start.  flow_model None uses the label flows
    (oracle); otherwise flows come from streaming model inference.
    """
    if not 2 <= clip_length <= TRACK_CLIP_LENGTH:
        raise ConfigError(
            f"clip_length must lie in [2, {TRACK_CLIP_LENGTH}], got {clip_length}")
    targets = dict(TRACK_TARGETS)
    if activities is not None:
        targets = {a: targets[a] for a in activities if a in targets}
    sums: dict = {}
    counts: dict = {}
    n_clips = 0
    latencies = []
    for seq in sequences:
        bone_ids = targets.get(seq.activity_id)
        if bone_ids is None:
            continue
        if seq.labels is None:
            raise ConfigError(f"sequence {seq.seq_id} has no labels")
        frames, labels = [], []
        for i, frame in enumerate(seq.frames):
            try:
                idx = preprocess_indices(frame, "test")
            except EmptyFrame:
                idx = np.zeros(0, dtype=np.int64)
            frames.append(frame.subset(idx))
            labels.append(seq.labels[i].subset(idx) if i < len(seq.labels) else None)
        for start in range(0, len(frames) - clip_length + 1, clip_length):
            window = frames[start: start + clip_length]
            if flow_model is None:
                flow_fields = []
                for t in range(clip_length - 1):
                    label = labels[start + t]
                    flow_fields.append(label.flows if label is not None
                                       else np.zeros((len(window[t]), 3)))
            else:
                records, _ = infer_sequence(flow_model, window)
                flow_fields = [r["flows"] for r in records]
                latencies.extend(r["latency"] for r in records)
            init = bone_endpoints(seq.poses[start].keypoints, bone_ids)
            trajectory = track_clip(window, flow_fields, bone_ids, init)
            for state in trajectory[1:]:
                truth = bone_endpoints(
                    seq.poses[start + state.tracking_length].keypoints, bone_ids)
                err = mean_joint_error(state.endpoints.reshape(-1, 3),
                                       truth.reshape(-1, 3))
                key = (seq.activity_id, state.tracking_length)
                sums[key] = sums.get(key, 0.0) + err
                counts[key] = counts.get(key, 0) + 1
            n_clips += 1
    if n_clips == 0:
        raise EmptyInput("no trackable clips in the given sequences")
    mje = {}
    for (activity, length), total in sums.items():
        mje.setdefault(activity, {})[length] = total / counts[(activity, length)]
    report = {"mje": mje, "n_clips": n_clips}
    if latencies:
        report["latency_ms"] = float(np.mean(latencies) * 1e3)
    return report


def mje_table_csv(report: dict, max_length: int | None = None) -> str:
    """CSV of tracking error rows (activity, tracking_length, mje)."""
    lines = ["activity,tracking_length,mje"]
    for activity in sorted(report["mje"]):
        for length in sorted(report["mje"][activity]):
            if max_length is not None and length > max_length:
                continue
            lines.append(f"{activity},{length},{report['mje'][activity][length]:.6f}")
    return "\n".join(lines) + "\n"

"""Classifier training and evaluation: fused cross-entropy, Adam, layer
freezing, top-K metrics, the fine-tuning loop, and the ablation sweep."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import BlockWeights, encoder_forward
from .checkpoint import load_into, save_checkpoint
from .embedding import Embedding, EmbeddingConfig
from .nn import LayerNormParams, LinearParams
from .tensor import Tensor, zero_grads
from .video import (Manifest, PipelineConfig, derive_rng, derive_seed,
                    load_instance_video, prepare_clip, to_model_tensor)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy, fused for stability.

    Backward pushes (softmax - onehot) / batch into the logits, which is
    exact regardless of how extreme the logits are.
    """
    y = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy wants [batch, classes] logits, got {logits.data.shape}")
    b, c = logits.data.shape
    if y.shape != (b,) or not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"labels must be {b} integers, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"label out of range for {c} classes")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    sez = ez.sum(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(sez[:, 0])
    nll = lse - z[np.arange(b), y]
    data = np.asarray(nll.mean(), dtype=z.dtype)
    soft = ez / sez

    def vjp(g):
        gz = soft.copy()
        gz[np.arange(b), y] -= 1.0
        return (gz * (g / b),)

    return T._make_node(data, (logits,), vjp)


class Adam:
    """Adam with bias correction; constant learning rate, no weight decay."""

    def __init__(self, params: list, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)


@dataclass
class ModelConfig:
    """Architecture hyperparameters shared by the CLI and the tests."""

    variant: str = "divided"
    dim: int = 32
    depth: int = 2
    heads: int = 4
    image_size: int = 32
    patch: int = 8
    frames: int = 8
    tube_depth: int = 2      # joint variant only; divided always uses 1

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"model dim {self.dim} not divisible by {self.heads} heads")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    def embedding_config(self) -> EmbeddingConfig:
        td = 1 if self.variant == "divided" else self.tube_depth
        return EmbeddingConfig(self.variant, self.dim, self.image_size,
                               self.patch, self.frames, td)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "dim": self.dim, "depth": self.depth,
                "heads": self.heads, "image_size": self.image_size,
                "patch": self.patch, "frames": self.frames,
                "tube_depth": self.tube_depth}


class ClassifierModel:
    """Embedding, encoder stack, final norm, linear head.

    divided pools the CLS token; joint mean-pools all tokens.
    """

    def __init__(self, cfg: ModelConfig, num_classes: int,
                 rng: np.random.Generator, dtype=np.float32):
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        self.cfg = cfg
        self.num_classes = num_classes
        self.embed = Embedding(cfg.embedding_config(), rng, dtype)
        self.blocks = [BlockWeights(rng, cfg.variant, cfg.dim, dtype)
                       for _ in range(cfg.depth)]
        self.norm = LayerNormParams(cfg.dim, dtype)
        self.head = LinearParams(rng, cfg.dim, num_classes, dtype)

    def forward(self, x: Tensor, want_trace: bool = False):
        tb = self.embed.embed(x)
        out, trace = encoder_forward(tb, self.blocks, self.cfg.heads, self.norm, want_trace)
        if self.cfg.variant == "divided":
            feat = T.reshape(T.slice_along(out.tokens, 1, 0, 1),
                             (x.data.shape[0], self.cfg.dim))
        else:
            feat = T.mean(out.tokens, axis=1)
        logits = T.linear(feat, self.head.w, self.head.b)
        return (logits, trace) if want_trace else logits

    def named(self) -> dict:
        out = self.embed.named("embed")
        for i, blk in enumerate(self.blocks):
            out.update(blk.named(f"enc.{i}"))
        out.update(self.norm.named("enc.norm"))
        out.update(self.head.named("head"))
        return out

    def params(self) -> list:
        return list(self.named().values())


def freeze_layers(model: ClassifierModel, count) -> list:
    """Mark only the top `count` encoder blocks, final norm, and head as
    trainable; count == depth (or "all") unfreezes everything including
    the embedding."""
    depth = model.cfg.depth
    if count == "all":
        count = depth
    if not isinstance(count, int) or isinstance(count, bool) or not (1 <= count <= depth):
        raise ValueError(f"fine-tuned layer count must be in [1, {depth}] or 'all', got {count!r}")
    named = model.named()
    for p in named.values():
        p.requires_grad = False
    trainable: list[Tensor] = []
    if count == depth:
        trainable.extend(model.embed.named().values())
    for blk in model.blocks[depth - count:]:
        trainable.extend(blk.named("b").values())
    trainable.extend(model.norm.named("n").values())
    trainable.extend(model.head.named("h").values())
    for p in trainable:
        p.requires_grad = True
    return trainable


def topk_accuracy(logits, labels, ks=(1, 5, 10)) -> dict:
    """Fraction of rows whose label ranks in the top K by score, ties
    broken toward the lower class index."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    y = np.asarray(labels)
    b, c = z.shape
    ranks = np.empty(b, dtype=np.int64)
    col = np.arange(c)
    for i in range(b):
        order = np.lexsort((col, -z[i]))     # primary: score desc; tie: index asc
        ranks[i] = int(np.nonzero(order == y[i])[0][0])
    return {k: float((ranks < k).mean()) for k in ks}


@dataclass
class EvalReport:
    topk: dict
    per_class: list
    confusion: list
    num_instances: int
    wall_seconds: float
    seed: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "topk": {str(k): v for k, v in self.topk.items()},
            "per_class": self.per_class,
            "confusion": self.confusion,
            "num_instances": self.num_instances,
            "wall_seconds": self.wall_seconds,
            "seed": self.seed,
            "config": self.config,
        }, indent=1)


def _batched_logits(model: ClassifierModel, insts: list, video_dir,
                    pipe: PipelineConfig, seed: int, chunk: int = 8) -> np.ndarray:
    dtype = model.head.w.data.dtype
    rows = []
    for lo in range(0, len(insts), chunk):
        xs = []
        for inst in insts[lo:lo + chunk]:
            rng = derive_rng(seed, "eval", inst.video_id)
            video = load_instance_video(video_dir, inst)
            clip = prepare_clip(video, pipe, train=False, rng=rng, label=inst.label)
            xs.append(to_model_tensor(clip, dtype))
        rows.append(model.forward(Tensor(np.stack(xs))).data)
    return np.concatenate(rows, axis=0)


def evaluate(model: ClassifierModel, manifest: Manifest, video_dir,
             pipe: PipelineConfig, seed: int = 0, ks=(1, 5, 10),
             split: str = "test") -> EvalReport:
    """Deterministic eval pass: even/center preprocessing, top-K metrics,
    per-class accuracy, argmax confusion counts."""
    if model.num_classes != manifest.num_classes:
        raise ValueError(
            f"head/class mismatch: model head has {model.num_classes} outputs, "
            f"manifest has {manifest.num_classes} classes")
    insts = manifest.by_split(split)
    if not insts:
        raise ValueError(f"no instances in split {split!r}")
    t0 = time.perf_counter()
    logits = _batched_logits(model, insts, video_dir, pipe, seed)
    labels = np.array([i.label for i in insts])
    topk = topk_accuracy(logits, labels, ks)
    c = manifest.num_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    pred = logits.argmax(axis=1)
    for yt, yp in zip(labels, pred):
        confusion[yt, yp] += 1
    per_class = []
    for cls in range(c):
        sel = labels == cls
        per_class.append(float((pred[sel] == cls).mean()) if sel.any() else 0.0)
    wall = time.perf_counter() - t0
    cfg = {"split": split, "frames": pipe.frames, "sampling": pipe.sampling,
           "crop": pipe.crop, "ks": list(ks)}
    return EvalReport(topk, per_class, confusion.tolist(), len(insts), wall, seed, cfg)


@dataclass
class TrainConfig:
    """One fine-tuning run; `layers` counts fine-tuned blocks from the top
    ('all' additionally unfreezes the embedding)."""

    batch: int = 4
    epochs: int = 15
    lr: float = 1e-5
    frames: int = 16
    sampling: str = "consecutive"
    layers: object = 3
    seed: int = 0
    variant: str = "divided"

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.sampling not in ("consecutive", "even"):
            raise ValueError(f"sampling must be consecutive or even, got {self.sampling!r}")
        if self.variant not in ("divided", "joint"):
            raise ValueError(f"variant must be divided or joint, got {self.variant!r}")
        if self.layers != "all" and (not isinstance(self.layers, int) or self.layers < 1):
            raise ValueError(f"layers must be a positive count or 'all', got {self.layers!r}")


def finetune(model: ClassifierModel, manifest: Manifest, video_dir,
             cfg: TrainConfig, crop: int, out_dir=None):
    """Epoch loop with per-epoch test evaluation.

    Returns (reports, log); the model is left holding the weights of its
    best epoch by test top-1.  The manifest must already have val merged
    into train.
    """
    if manifest.by_split("val"):
        raise ValueError("finetune expects val merged into train; call merge_train_val first")
    insts = manifest.by_split("train")
    if not insts:
        raise ValueError("no train instances in manifest")
    pipe = PipelineConfig(cfg.frames, cfg.sampling, crop)
    dtype = model.head.w.data.dtype
    reports: list[EvalReport] = []
    log: list[tuple] = []

    if cfg.epochs == 0:
        reports.append(evaluate(model, manifest, video_dir, pipe, cfg.seed))
        return reports, log

    trainable = freeze_layers(model, cfg.layers)
    opt = Adam(trainable, cfg.lr)
    best_top1, best_params = -1.0, None
    step = 0
    for epoch in range(cfg.epochs):
        perm = derive_rng(cfg.seed, "shuffle", epoch).permutation(len(insts))
        for lo in range(0, len(perm), cfg.batch):
            t0 = time.perf_counter()
            xs, ys = [], []
            for j in perm[lo:lo + cfg.batch]:
                inst = insts[int(j)]
                rng = derive_rng(cfg.seed, inst.video_id, epoch)
                video = load_instance_video(video_dir, inst)
                clip = prepare_clip(video, pipe, train=True, rng=rng, label=inst.label)
                xs.append(to_model_tensor(clip, dtype))
                ys.append(inst.label)
            logits = model.forward(Tensor(np.stack(xs)))
            loss = cross_entropy(logits, np.array(ys))
            if not np.isfinite(loss.data):
                raise RuntimeError(f"training diverged: non-finite loss at step {step}")
            T.backward(loss)
            opt.step()
            opt.zero_grad()
            log.append((step, float(loss.data), cfg.lr,
                        (time.perf_counter() - t0) * 1000.0))
            step += 1
        report = evaluate(model, manifest, video_dir, pipe, cfg.seed)
        reports.append(report)
        if report.topk.get(1, 0.0) > best_top1:
            best_top1 = report.topk.get(1, 0.0)
            best_params = {k: v.data.copy() for k, v in model.named().items()}
    if best_params is not None:
        load_into(model.named(), best_params)
    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "model.ckpt"), model.named())
        with open(os.path.join(out_dir, "train_log.csv"), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "loss", "lr", "wall_ms"])
            wr.writerows(log)
    return reports, log


ABLATION_COLUMNS = ["Batch", "Epochs", "Frames", "Init. LR", "Model",
                    "Fine-Tuned Layers", "Sampling", "Top-1 Acc. (%)"]


def run_ablation(grid: list, manifest: Manifest, video_dir,
                 model_cfg: ModelConfig, crop: int, out_csv=None,
                 num_classes: int | None = None) -> list:
    """Run each TrainConfig row with its own derived seed; a failing row
    becomes an error[...] entry instead of aborting the sweep."""
    merged = manifest if not manifest.by_split("val") else None
    if merged is None:
        from .video import merge_train_val

        merged = merge_train_val(manifest)
    classes = num_classes or manifest.num_classes
    rows = []
    for idx, tc in enumerate(grid):
        run_seed = derive_seed(tc.seed, "ablate", idx) % (2 ** 31)
        cell: object
        try:
            mdl_cfg = replace(model_cfg, variant=tc.variant, frames=tc.frames)
            model = ClassifierModel(mdl_cfg, classes, np.random.default_rng(run_seed))
            run_cfg = replace(tc, seed=run_seed)
            reports, _ = finetune(model, merged, video_dir, run_cfg, crop)
            best = max(r.topk.get(1, 0.0) for r in reports)
            cell = f"{100.0 * best:.2f}"
        except Exception as e:          # record and continue the sweep
            cell = f"error[{type(e).__name__}]"
        sampling_label = {"consecutive": "Consec.", "even": "Even"}[tc.sampling]
        layers_label = "All" if tc.layers == "all" else tc.layers
        rows.append([tc.batch, tc.epochs, tc.frames, f"{tc.lr:g}", tc.variant,
                     layers_label, sampling_label, cell])
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(ABLATION_COLUMNS)
            wr.writerows(rows)
    return rows

"""Tube-masked video autoencoder.

A mask hides whole space-time tubes: one boolean spatial grid broadcast
across the temporal token axis, so a masked position is hidden in every
time slice.  The encoder sees only visible tokens; a narrow, shallower
decoder fills mask tokens back in at their original positions and
reconstructs per-cube normalized pixels.  Loss is MSE over masked cubes
only.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import BlockWeights, encoder_forward
from .checkpoint import save_checkpoint
from .embedding import Embedding, EmbeddingConfig, TokenBatch, cube_pixels
from .nn import LayerNormParams, LinearParams, trunc_normal
from .tensor import Tensor, zero_grads
from .train import Adam, ClassifierModel, ModelConfig
from .video import (Manifest, PipelineConfig, derive_rng, load_instance_video,
                    prepare_clip, to_model_tensor)


@dataclass
class TubeMask:
    """spatial[h, w] is True where the tube at that position is masked in
    every temporal slice."""

    spatial: np.ndarray
    t_tokens: int
    ratio: float

    def __post_init__(self):
        if self.spatial.dtype != np.bool_ or self.spatial.ndim != 2:
            raise ValueError("tube mask needs a 2-D boolean spatial grid")

    @property
    def cells(self) -> int:
        return self.spatial.size

    @property
    def masked_cells(self) -> int:
        return int(self.spatial.sum())

    @property
    def visible_cells(self) -> int:
        return self.cells - self.masked_cells

    def _token_ids(self, spatial_ids: np.ndarray) -> np.ndarray:
        s = self.cells
        return (np.arange(self.t_tokens)[:, None] * s + spatial_ids[None, :]).ravel()

    @property
    def masked_token_ids(self) -> np.ndarray:
        return self._token_ids(np.flatnonzero(self.spatial.ravel()))

    @property
    def visible_token_ids(self) -> np.ndarray:
        return self._token_ids(np.flatnonzero(~self.spatial.ravel()))


def make_tube_mask(grid: tuple, ratio: float, rng: np.random.Generator) -> TubeMask:
    """Sample round(ratio * cells) masked spatial positions, half-up.

    Ratios that round to zero masked or zero visible cells are rejected;
    both degenerate ends make the objective meaningless.
    """
    t, h, w = grid
    if not (0.0 < ratio < 1.0):
        raise ValueError(f"masking ratio must be in (0, 1), got {ratio}")
    cells = h * w
    count = int(np.floor(ratio * cells + 0.5))
    if count < 1:
        raise ValueError(f"masking ratio {ratio} masks zero of {cells} cells")
    if count >= cells:
        raise ValueError(f"masking ratio {ratio} leaves zero visible cells of {cells}")
    picked = rng.choice(cells, size=count, replace=False)
    spatial = np.zeros(cells, dtype=np.bool_)
    spatial[picked] = True
    return TubeMask(spatial.reshape(h, w), t, ratio)


@dataclass
class MaeConfig:
    dim: int = 32
    depth: int = 3
    heads: int = 4
    decoder_dim: int = 16
    decoder_depth: int = 2
    decoder_heads: int = 2
    image_size: int = 32
    patch: int = 8
    frames: int = 8
    tube_depth: int = 2

    def __post_init__(self):
        if self.decoder_depth >= self.depth:
            raise ValueError(
                f"decoder depth {self.decoder_depth} must be smaller than encoder depth {self.depth}")
        if self.decoder_dim >= self.dim:
            raise ValueError(
                f"decoder dim {self.decoder_dim} must be narrower than encoder dim {self.dim}")
        if self.dim % self.heads or self.decoder_dim % self.decoder_heads:
            raise ValueError("dims must be divisible by their head counts")

    def embedding_config(self) -> EmbeddingConfig:
        return EmbeddingConfig("joint", self.dim, self.image_size, self.patch,
                               self.frames, self.tube_depth)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "dim", "depth", "heads", "decoder_dim", "decoder_depth",
            "decoder_heads", "image_size", "patch", "frames", "tube_depth")}


class MaeModel:
    def __init__(self, cfg: MaeConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        ecfg = cfg.embedding_config()
        self.embed = Embedding(ecfg, rng, dtype)
        self.enc_blocks = [BlockWeights(rng, "joint", cfg.dim, dtype)
                           for _ in range(cfg.depth)]
        self.enc_norm = LayerNormParams(cfg.dim, dtype)
        self.dec_proj = LinearParams(rng, cfg.dim, cfg.decoder_dim, dtype)
        self.mask_token = Tensor(trunc_normal(rng, (1, 1, cfg.decoder_dim), dtype=dtype),
                                 requires_grad=True)
        self.dec_pos = Tensor(trunc_normal(rng, (ecfg.n_tokens, cfg.decoder_dim), dtype=dtype),
                              requires_grad=True)
        self.dec_blocks = [BlockWeights(rng, "joint", cfg.decoder_dim, dtype)
                           for _ in range(cfg.decoder_depth)]
        self.dec_norm = LayerNormParams(cfg.decoder_dim, dtype)
        self.recon = LinearParams(rng, cfg.decoder_dim, ecfg.cube_dim, dtype)

    def named(self) -> dict:
        out = self.embed.named("embed")
        for i, blk in enumerate(self.enc_blocks):
            out.update(blk.named(f"enc.{i}"))
        out.update(self.enc_norm.named("enc.norm"))
        out.update(self.dec_proj.named("dec.proj"))
        out["dec.mask"] = self.mask_token
        out["dec.pos"] = self.dec_pos
        for i, blk in enumerate(self.dec_blocks):
            out.update(blk.named(f"dec.{i}"))
        out.update(self.dec_norm.named("dec.norm"))
        out.update(self.recon.named("recon"))
        return out

    def params(self) -> list:
        return list(self.named().values())


def normalized_cube_targets(x: np.ndarray, cfg: EmbeddingConfig) -> np.ndarray:
    """Per-cube normalized reconstruction targets: (pix - mean) / std with
    variance floored by eps 1e-6."""
    cubes = cube_pixels(Tensor(x, dtype=x.dtype), cfg).data
    mean = cubes.mean(axis=-1, keepdims=True)
    var = cubes.var(axis=-1, keepdims=True)
    return (cubes - mean) / np.sqrt(var + x.dtype.type(1e-6))


def reconstruction_loss(pred: Tensor, target_cubes: np.ndarray, mask: TubeMask) -> Tensor:
    """MSE over masked cubes only.

    pred may cover all tokens or just the masked ones; either way visible
    positions contribute exactly zero to the loss.
    """
    ids = mask.masked_token_ids
    n_all = target_cubes.shape[1]
    if pred.data.shape[1] == n_all:
        pred = T.take(pred, ids, axis=1)
    elif pred.data.shape[1] != ids.size:
        raise ValueError(
            f"prediction covers {pred.data.shape[1]} tokens, expected {ids.size} masked or {n_all} total")
    tgt = Tensor(np.take(target_cubes, ids, axis=1).astype(pred.data.dtype))
    diff = T.sub(pred, tgt)
    return T.mean(T.mul(diff, diff))


def _encode_visible(model: MaeModel, tokens: Tensor, mask: TubeMask) -> Tensor:
    vis = T.take(tokens, mask.visible_token_ids, axis=1)
    tb = TokenBatch(vis, (1, 1, vis.data.shape[1]), has_cls=False)
    out, _ = encoder_forward(tb, model.enc_blocks, model.cfg.heads, model.enc_norm)
    return out.tokens


def _decode(model: MaeModel, encoded: Tensor, mask: TubeMask) -> Tensor:
    """Project visible tokens, splice in mask tokens at the masked
    positions (original token order), run the decoder, predict cubes."""
    b = encoded.data.shape[0]
    n = model.embed.cfg.n_tokens
    vis_ids, mask_ids = mask.visible_token_ids, mask.masked_token_ids
    proj = T.linear(encoded, model.dec_proj.w, model.dec_proj.b)
    mask_tok = T.repeat(T.repeat(model.mask_token, b, axis=0), mask_ids.size, axis=1)
    seq = T.concat([proj, mask_tok], axis=1)             # visible first, then masked
    slots = np.empty(n, dtype=np.int64)
    slots[vis_ids] = np.arange(vis_ids.size)
    slots[mask_ids] = vis_ids.size + np.arange(mask_ids.size)
    ordered = T.take(seq, slots, axis=1)
    ordered = T.add(ordered, model.dec_pos)
    tb = TokenBatch(ordered, model.embed.cfg.grid, has_cls=False)
    out, _ = encoder_forward(tb, model.dec_blocks, model.cfg.decoder_heads, model.dec_norm)
    return T.linear(out.tokens, model.recon.w, model.recon.b)


def mae_forward(x: Tensor, mask, model: MaeModel):
    """Returns (masked-token predictions, scalar loss).

    mask is one TubeMask shared by the batch, or a list with one mask per
    sample (predictions are then per-sample gathers, counts must agree).
    """
    grid = model.embed.cfg.grid
    masks = mask if isinstance(mask, list) else [mask]
    for mk in masks:
        if mk.t_tokens != grid[0] or mk.spatial.shape != grid[1:]:
            raise ValueError(
                f"mask grid ({mk.t_tokens}, {mk.spatial.shape}) does not match model grid {grid}")
    tokens = model.embed.embed(x).tokens
    targets = normalized_cube_targets(x.data, model.embed.cfg)

    if not isinstance(mask, list):
        pred_all = _decode(model, _encode_visible(model, tokens, mask), mask)
        pred = T.take(pred_all, mask.masked_token_ids, axis=1)
        return pred, reconstruction_loss(pred, targets, mask)

    b = x.data.shape[0]
    if len(masks) != b:
        raise ValueError(f"{len(masks)} masks for batch of {b}")
    preds, losses = [], []
    for i, mk in enumerate(masks):
        row = T.slice_along(tokens, 0, i, i + 1)
        pred_all = _decode(model, _encode_visible(model, row, mk), mk)
        pred = T.take(pred_all, mk.masked_token_ids, axis=1)
        preds.append(pred)
        losses.append(reconstruction_loss(pred, targets[i:i + 1], mk))
    loss = T.scale(losses[0], 1.0 / b)
    for extra in losses[1:]:
        loss = T.add(loss, T.scale(extra, 1.0 / b))
    return preds, loss


@dataclass
class PretrainConfig:
    ratio: float = 0.9
    steps: int = 200
    batch: int = 2
    lr: float = 1e-3
    seed: int = 0
    checkpoint_interval: int = 0    # 0 means final checkpoint only


def pretrain(model: MaeModel, manifest: Manifest, video_dir,
             cfg: PretrainConfig, pipe: PipelineConfig, out_dir=None) -> list:
    """Step-sampled pretraining on the train split.

    Returns [(step, loss)].  Clip sampling, augmentation, and the tube
    mask for each clip all come from one rng derived from (seed,
    video_id, step), so runs are reproducible by seed alone.
    """
    insts = manifest.by_split("train")
    if not insts:
        raise ValueError("no train instances in manifest")
    grid = model.embed.cfg.grid
    dtype = model.recon.w.data.dtype
    params = model.params()
    opt = Adam(params, cfg.lr)
    curve: list[tuple] = []
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    for step in range(cfg.steps):
        order = derive_rng(cfg.seed, "batch", step)
        picks = order.choice(len(insts), size=cfg.batch,
                             replace=len(insts) < cfg.batch)
        xs, masks = [], []
        for j in picks:
            inst = insts[int(j)]
            rng = derive_rng(cfg.seed, inst.video_id, step)
            video = load_instance_video(video_dir, inst)
            clip = prepare_clip(video, pipe, train=True, rng=rng, label=inst.label)
            xs.append(to_model_tensor(clip, dtype))
            masks.append(make_tube_mask(grid, cfg.ratio, rng))
        _, loss = mae_forward(Tensor(np.stack(xs)), masks, model)
        if not np.isfinite(loss.data):
            raise RuntimeError(f"pretraining diverged: non-finite loss at step {step}")
        T.backward(loss)
        opt.step()
        zero_grads(params)
        curve.append((step, float(loss.data)))
        if out_dir is not None and cfg.checkpoint_interval and \
                (step + 1) % cfg.checkpoint_interval == 0:
            save_checkpoint(os.path.join(out_dir, f"mae_{step + 1:05d}.ckpt"), model.named())
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "mae_final.ckpt"), model.named())
        with open(os.path.join(out_dir, "loss.csv"), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "loss"])
            wr.writerows(curve)
    return curve


def classifier_from_mae(model: MaeModel, num_classes: int,
                        rng: np.random.Generator) -> ClassifierModel:
    """Joint-variant classifier initialized from a pretrained encoder;
    decoder weights are dropped, the head starts fresh."""
    cfg = ModelConfig("joint", model.cfg.dim, model.cfg.depth, model.cfg.heads,
                      model.cfg.image_size, model.cfg.patch, model.cfg.frames,
                      model.cfg.tube_depth)
    clf = ClassifierModel(cfg, num_classes, rng, model.recon.w.data.dtype)
    src, dst = model.named(), clf.named()
    for name, tensor in dst.items():
        if name.startswith(("embed.", "enc.")):
            tensor.data = src[name].data.copy()
    return clf

"""Masked-autoencoder pretraining.

Three quarters of the patch tokens are dropped (class token always kept),
the encoder runs on the survivors, and a small two-block decoder rebuilds the
full grid from encoded tokens plus a shared learnable mask token. The loss is
pixel MSE on the masked patches only, which makes it provably independent of
what the visible patches contain as reconstruction targets.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from . import checkpoint as ckpt
from . import data as dp
from . import vit
from .autograd import Tensor
from .optim import AdamW, cosine_lr
from .vit import VitConfig, VitModel, trunc_normal


class DegenerateRatioError(Exception):
    """The mask ratio rounds to keeping or dropping every patch."""


@dataclass
class MaskPlan:
    mask_ratio: float
    visible: np.ndarray   # sorted patch indices that stay
    masked: np.ndarray    # sorted patch indices to reconstruct


def plan_mask(n_patches: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniform subset without replacement; |masked| = round(ratio * N)."""
    if n_patches < 2:
        raise ValueError(f"need at least 2 patches, got {n_patches}")
    if not 0.0 < ratio < 1.0:
        raise DegenerateRatioError(f"mask ratio {ratio} outside (0, 1)")
    k = int(round(ratio * n_patches))
    if k == 0 or k == n_patches:
        raise DegenerateRatioError(
            f"ratio {ratio} over {n_patches} patches masks {k} of them")
    perm = rng.permutation(n_patches)
    return MaskPlan(mask_ratio=ratio,
                    visible=np.sort(perm[k:]),
                    masked=np.sort(perm[:k]))


class MaeDecoder:
    """Two pre-norm blocks at half the encoder width, plus a pixel head."""

    def __init__(self, cfg: VitConfig, depth: int = 2, heads: int = 2,
                 seed: int | np.random.Generator = 0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        d = max(heads, cfg.dim // 2)
        self.cfg = cfg
        self.dim = d
        self.depth = depth
        self.heads = heads

        tn = lambda shape: Tensor(trunc_normal(rng, shape, 0.02), requires_grad=True)
        zeros = lambda *shape: Tensor(np.zeros(shape), requires_grad=True)
        ones = lambda *shape: Tensor(np.ones(shape), requires_grad=True)

        self.embed_w = tn((cfg.dim, d))
        self.embed_b = zeros(d)
        self.mask_token = tn((d,))
        self.pos_emb = tn((cfg.seq_len, d))
        self.blocks = []
        hid = 4 * d
        for _ in range(depth):
            self.blocks.append({
                "ln1_g": ones(d), "ln1_b": zeros(d),
                "wq": tn((d, d)), "bq": zeros(d),
                "wk": tn((d, d)), "bk": zeros(d),
                "wv": tn((d, d)), "bv": zeros(d),
                "wo": tn((d, d)), "bo": zeros(d),
                "ln2_g": ones(d), "ln2_b": zeros(d),
                "w1": tn((d, hid)), "b1": zeros(hid),
                "w2": tn((hid, d)), "b2": zeros(d),
            })
        self.norm_g = ones(d)
        self.norm_b = zeros(d)
        self.out_w = tn((d, cfg.patch_values))
        self.out_b = zeros(cfg.patch_values)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        items = [("dec.embed.W", self.embed_w), ("dec.embed.b", self.embed_b),
                 ("dec.mask", self.mask_token), ("dec.pos", self.pos_emb)]
        for i, blk in enumerate(self.blocks):
            items.extend((f"dec.blocks.{i}.{k}", blk[k]) for k in vit.BLOCK_KEYS)
        items.extend([("dec.norm.g", self.norm_g), ("dec.norm.b", self.norm_b),
                      ("dec.out.W", self.out_w), ("dec.out.b", self.out_b)])
        return items


def mae_step(model: VitModel, decoder: MaeDecoder, images: np.ndarray,
             plans: list[MaskPlan], targets_override: np.ndarray | None = None) -> Tensor:
    """Reconstruction loss for one batch of raw [0, 1] images; one mask plan
    per image.

    The encoder sees normalized pixels, but reconstruction targets are the
    raw pixel values. The loss reads targets only at masked positions, so it
    is bit-identical under any change to visible-patch target pixels
    (``targets_override`` exists to demonstrate exactly that)."""
    cfg = model.cfg
    b = images.shape[0]
    n = cfg.num_patches
    n_vis = len(plans[0].visible)

    target_src = images if targets_override is None else targets_override
    targets = vit.extract_patches(np.asarray(target_src, dtype=np.float64),
                                  cfg.patch_size)
    tokens = vit.patchify(model, dp.normalize(np.asarray(images, dtype=np.float64)))
    # positions were added before any token is dropped

    keep = np.stack([np.concatenate(([0], p.visible + 1)) for p in plans])
    enc, _ = vit.run_blocks(model, ag.gather_rows(tokens, keep))

    dec_in = ag.add(ag.matmul(enc, decoder.embed_w), decoder.embed_b)
    cls_part = ag.slice_(dec_in, (slice(None), slice(0, 1)))
    vis_part = ag.slice_(dec_in, (slice(None), slice(1, None)))
    mask_part = ag.repeat_leading(
        ag.repeat_leading(decoder.mask_token, n - n_vis), b)
    source = ag.concat([vis_part, mask_part], axis=1)

    # scatter = gather with the inverse layout: grid position p reads either
    # its slot among the visible tokens or its slot among the mask tokens
    perm = np.empty((b, n), dtype=np.int64)
    for i, plan in enumerate(plans):
        perm[i, plan.visible] = np.arange(n_vis)
        perm[i, plan.masked] = n_vis + np.arange(n - n_vis)
    grid = ag.gather_rows(source, perm)

    x = ag.add(ag.concat([cls_part, grid], axis=1), decoder.pos_emb)
    for blk in decoder.blocks:
        x, _ = vit.transformer_block(x, blk, decoder.heads)
    x = ag.layer_norm(x, decoder.norm_g, decoder.norm_b)
    pred = ag.add(ag.matmul(x, decoder.out_w), decoder.out_b)
    pred_patches = ag.slice_(pred, (slice(None), slice(1, None)))

    masked_idx = np.stack([p.masked for p in plans])
    pred_masked = ag.gather_rows(pred_patches, masked_idx)
    batch_rows = np.arange(b)[:, None]
    target_masked = Tensor(targets[batch_rows, masked_idx])
    return ag.mse(pred_masked, target_masked)


def pretrain(model: VitModel, decoder: MaeDecoder, images: np.ndarray,
             steps: int, batch_size: int = 32, lr: float = 1e-3,
             weight_decay: float = 0.05, warmup_steps: int = 30,
             mask_ratio: float = 0.75, seed: int = 0) -> list[float]:
    """Run ``steps`` reconstruction steps over the (unlabeled) images.

    Returns the per-step loss values. The classifier head is untouched: only
    encoder and decoder parameters are optimized.
    """
    params = [(n, t) for n, t in model.encoder_items() if t.requires_grad]
    params += decoder.named_tensors()
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)

    n_images = len(images)
    n_patches = model.cfg.num_patches
    losses: list[float] = []
    for step in range(steps):
        rng = np.random.default_rng(np.random.SeedSequence((seed, step)))
        idx = rng.choice(n_images, size=min(batch_size, n_images), replace=False)
        batch = images[idx]
        plans = [plan_mask(n_patches, mask_ratio,
                           np.random.default_rng(np.random.SeedSequence(
                               (seed, step, int(i)))))
                 for i in idx]
        loss = mae_step(model, decoder, batch, plans)
        losses.append(loss.item())
        ag.backward(loss)
        opt.step(lr=cosine_lr(step, steps, warmup_steps, lr))
        opt.zero_grad()
    return losses


# ---------------------------------------------------------------------------
# encoder persistence
# ---------------------------------------------------------------------------

ENCODER_FIELDS = ("image_size", "patch_size", "dim", "depth", "heads", "mlp_ratio")


def save_encoder(path, model: VitModel) -> None:
    config = {"kind": "encoder", "model": asdict(model.cfg)}
    ckpt.save(path, config, [(n, t.data) for n, t in model.encoder_items()])


def load_pretrained(path, cfg: VitConfig, head_cfg=None,
                    seed: int | np.random.Generator = 0) -> VitModel:
    """Build a classifier from a pretrained encoder: encoder weights are
    copied, the decoder was never saved, and the head is freshly initialized."""
    config, tensors = ckpt.load(path)
    if config.get("kind") != "encoder":
        raise ckpt.CheckpointError(
            f"'{path}' holds a {config.get('kind')!r} checkpoint, not an encoder")
    saved = config["model"]
    mismatched = [f for f in ENCODER_FIELDS
                  if saved.get(f) != getattr(cfg, f)]
    if mismatched:
        raise ckpt.ConfigMismatchError(mismatched)
    model = VitModel(cfg, head_cfg, seed=seed)
    vit.restore_tensors(model, tensors, model.encoder_items())
    return model

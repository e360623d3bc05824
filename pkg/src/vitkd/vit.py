"""Vanilla pre-norm vision transformer encoder.

Blocks follow the two-equation form: attention and MLP each wrap a layer norm
inside the residual branch (K' = MHA(LN(K)) + K, then K+1 = MLP(LN(K')) + K').
A learnable class token is prepended before learnable 1-D positional
embeddings; the final class row is read out after a closing layer norm.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from . import checkpoint
from . import heads
from .autograd import Tensor
from .checkpoint import CheckpointError

PRESETS = {
    "tiny": dict(image_size=32, patch_size=4, dim=32, depth=2, heads=4),
    "mini": dict(image_size=32, patch_size=4, dim=64, heads=4, depth=4),
    "small": dict(image_size=224, patch_size=16, dim=384, depth=12, heads=6),
    "base": dict(image_size=224, patch_size=16, dim=768, depth=12, heads=12),
    "large": dict(image_size=224, patch_size=16, dim=1024, depth=24, heads=16),
}

BLOCK_KEYS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
              "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


@dataclass
class VitConfig:
    image_size: int = 32
    patch_size: int = 4
    dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 2

    def violations(self) -> list[str]:
        bad = []
        if self.image_size < 1 or self.patch_size < 1:
            bad.append(f"image_size={self.image_size}, patch_size={self.patch_size}: "
                       "must be positive")
        elif self.image_size % self.patch_size != 0:
            bad.append(f"image_size={self.image_size} not divisible by "
                       f"patch_size={self.patch_size}")
        if self.heads < 1 or self.dim % self.heads != 0:
            bad.append(f"dim={self.dim} not divisible by heads={self.heads}")
        if self.depth < 1:
            bad.append(f"depth={self.depth} must be >= 1")
        if self.mlp_ratio <= 0:
            bad.append(f"mlp_ratio={self.mlp_ratio} must be positive")
        if self.num_classes < 2:
            bad.append(f"num_classes={self.num_classes} must be >= 2")
        return bad

    def validate(self) -> "VitConfig":
        bad = self.violations()
        if bad:
            raise ValueError("invalid model config: " + "; ".join(bad))
        return self

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        # (H*W) / patch^2 patch tokens plus the class token
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    @property
    def patch_values(self) -> int:
        return self.patch_size * self.patch_size * 3


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until everything lies within two deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


class VitModel:
    """Encoder weights plus a classifier head, all named for checkpointing."""

    def __init__(self, cfg: VitConfig, head_cfg: heads.HeadConfig | None = None,
                 seed: int | np.random.Generator = 0):
        cfg.validate()
        self.cfg = cfg
        self.head_cfg = head_cfg or heads.HeadConfig()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

        d, hid = cfg.dim, cfg.mlp_hidden
        tn = lambda shape: Tensor(trunc_normal(rng, shape, 0.02), requires_grad=True)
        zeros = lambda *shape: Tensor(np.zeros(shape), requires_grad=True)
        ones = lambda *shape: Tensor(np.ones(shape), requires_grad=True)

        self.patch_w = tn((cfg.patch_values, d))
        self.patch_b = zeros(d)
        self.cls_token = tn((1, d))
        self.pos_emb = tn((cfg.seq_len, d))
        self.blocks: list[dict[str, Tensor]] = []
        for _ in range(cfg.depth):
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
        self.head = heads.init_head(d, cfg.num_classes, self.head_cfg, rng)

    def encoder_items(self) -> list[tuple[str, Tensor]]:
        items = [("patch.W", self.patch_w), ("patch.b", self.patch_b),
                 ("cls", self.cls_token), ("pos", self.pos_emb)]
        for i, blk in enumerate(self.blocks):
            items.extend((f"blocks.{i}.{k}", blk[k]) for k in BLOCK_KEYS)
        items.extend([("norm.g", self.norm_g), ("norm.b", self.norm_b)])
        return items

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return self.encoder_items() + self.head.param_items()

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_tensors() if t.requires_grad]

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.zero_grad()


def _as_image_batch(images) -> tuple[np.ndarray, bool]:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim == 4:
        return arr, False
    raise ag.ShapeError(f"expected (H, W, 3) or (B, H, W, 3) images, got {arr.shape}")


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Rearrange (B, S, S, 3) pixels into (B, N, patch^2*3) flattened patches."""
    b, h, w, c = images.shape
    g = h // patch_size
    x = images.reshape(b, g, patch_size, g, patch_size, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch_size * patch_size * c)


def patchify(model: VitModel, images) -> Tensor:
    """Project flattened patches to tokens, prepend the class token and add
    positional embeddings. Returns (B, N+1, D), or (N+1, D) for one image."""
    cfg = model.cfg
    arr, single = _as_image_batch(images)
    b, h, w, c = arr.shape
    if h != cfg.image_size or w != cfg.image_size or c != 3:
        raise ag.ShapeError(f"image shape {(h, w, c)} does not match config "
                            f"image_size={cfg.image_size}")
    if h % cfg.patch_size != 0:
        raise ag.ShapeError(f"image size {h} not divisible by patch size {cfg.patch_size}")
    patches = Tensor(extract_patches(arr, cfg.patch_size))
    tok = ag.add(ag.matmul(patches, model.patch_w), model.patch_b)
    cls = ag.repeat_leading(model.cls_token, b)
    seq = ag.add(ag.concat([cls, tok], axis=1), model.pos_emb)
    return ag.slice_(seq, 0) if single else seq


def _lift_tokens(tokens: Tensor) -> tuple[Tensor, bool]:
    if tokens.ndim == 2:
        return ag.reshape(tokens, (1,) + tokens.shape), True
    return tokens, False


def mha(tokens: Tensor, w: dict[str, Tensor], n_heads: int) -> tuple[Tensor, Tensor]:
    """Multi-head self-attention. Returns (output tokens, post-softmax weights
    of shape (B, heads, T, T))."""
    x, single = _lift_tokens(tokens)
    b, t, d = x.shape
    hd = d // n_heads

    def split(proj_w, proj_b):
        p = ag.add(ag.matmul(x, proj_w), proj_b)
        return ag.transpose(ag.reshape(p, (b, t, n_heads, hd)), (0, 2, 1, 3))

    q = split(w["wq"], w["bq"])
    k = split(w["wk"], w["bk"])
    v = split(w["wv"], w["bv"])
    scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))),
                    Tensor(1.0 / np.sqrt(hd)))
    attn = ag.softmax_lastdim(scores)
    ctx = ag.reshape(ag.transpose(ag.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
    out = ag.add(ag.matmul(ctx, w["wo"]), w["bo"])
    if single:
        return ag.slice_(out, 0), ag.slice_(attn, 0)
    return out, attn


def transformer_block(tokens: Tensor, w: dict[str, Tensor],
                      n_heads: int) -> tuple[Tensor, Tensor]:
    """Pre-norm block: attention residual, then MLP residual."""
    x, single = _lift_tokens(tokens)
    attn_out, attn = mha(ag.layer_norm(x, w["ln1_g"], w["ln1_b"]), w, n_heads)
    x = ag.add(attn_out, x)
    h = ag.gelu(ag.add(ag.matmul(ag.layer_norm(x, w["ln2_g"], w["ln2_b"]), w["w1"]),
                       w["b1"]))
    x = ag.add(ag.add(ag.matmul(h, w["w2"]), w["b2"]), x)
    if single:
        return ag.slice_(x, 0), ag.slice_(attn, 0)
    return x, attn


def run_blocks(model: VitModel, tokens: Tensor) -> tuple[Tensor, list[Tensor]]:
    x, single = _lift_tokens(tokens)
    stack = []
    for blk in model.blocks:
        x, attn = transformer_block(x, blk, model.cfg.heads)
        stack.append(attn)
    x = ag.layer_norm(x, model.norm_g, model.norm_b)
    if single:
        return ag.slice_(x, 0), [ag.slice_(a, 0) for a in stack]
    return x, stack


def encode(model: VitModel, images) -> tuple[Tensor, list[Tensor]]:
    """Image(s) to class embedding plus per-layer attention maps.

    Returns ((B, D) embedding, list of (B, heads, T, T)); single images come
    back unbatched."""
    _, single = _as_image_batch(images)
    tokens = patchify(model, images)
    out, stack = run_blocks(model, tokens)
    if single:
        return ag.slice_(out, 0), stack
    return ag.slice_(out, (slice(None), 0)), stack


def model_logits(model: VitModel, images) -> tuple[Tensor, list[Tensor]]:
    emb, stack = encode(model, images)
    return heads.head_logits(model.head, emb), stack


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_model(path, model: VitModel, class_names: list[str] | None = None) -> None:
    config = {
        "kind": "classifier",
        "model": asdict(model.cfg),
        "head": model.head.meta(),
        "class_names": class_names,
    }
    checkpoint.save(path, config,
                    [(n, t.data) for n, t in model.named_tensors()])


def restore_tensors(model: VitModel, tensors: dict[str, np.ndarray],
                    items: list[tuple[str, Tensor]]) -> None:
    missing = [n for n, _ in items if n not in tensors]
    if missing:
        raise CheckpointError("checkpoint lacks tensors: " + ", ".join(missing))
    for name, t in items:
        arr = tensors[name]
        if arr.shape != t.shape:
            raise CheckpointError(f"tensor '{name}' shape {arr.shape} does not "
                                  f"match model shape {t.shape}")
        t.data[...] = arr


def load_model(path) -> tuple[VitModel, list[str] | None]:
    config, tensors = checkpoint.load(path)
    if config.get("kind") != "classifier":
        raise checkpoint.CheckpointError(
            f"'{path}' holds a {config.get('kind')!r} checkpoint, not a classifier")
    cfg = VitConfig(**config["model"])
    hmeta = dict(config["head"])
    head_cfg = heads.HeadConfig(kind=hmeta.pop("kind"), **{
        k: hmeta[k] for k in ("features", "length_scale") if k in hmeta})
    model = VitModel(cfg, head_cfg, seed=0)
    restore_tensors(model, tensors, model.named_tensors())
    return model, config.get("class_names")

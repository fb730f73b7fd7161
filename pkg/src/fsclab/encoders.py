"""Tiny pre-norm transformer encoders for patch grids and token sequences.

Both towers end in a linear projection into a shared ``d``-dimensional
space; rows are L2-normalized before they reach any similarity.  Images
pool by averaging patch rows, texts by taking the EOS row.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .hardneg import Lexicon, UnknownWord, default_lexicon, tokenize
from .synth import D_IN, GRID
from .tensor import ShapeMismatch, Tensor, concat

INIT_SCALE = 0.02
MASK_VALUE = -1e9


class MissingEOS(ValueError):
    pass


class CaptionTooLong(ValueError):
    pass


def _default_vocab_size() -> int:
    return len(default_lexicon().words) + 3


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 32
    layers: int = 2
    heads: int = 4
    d_in: int = D_IN
    vocab_size: int = 0
    W_max: int = 16
    G: int = GRID
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.vocab_size == 0:
            object.__setattr__(self, "vocab_size", _default_vocab_size())
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.W_max < 2:
            raise ValueError("W_max must leave room for BOS and EOS")

    @property
    def P(self) -> int:
        return self.G * self.G

    def to_json(self) -> dict:
        return asdict(self)


class Vocabulary:
    """Word ids: 0 is padding, lexicon words follow, BOS and EOS come last."""

    PAD = 0

    def __init__(self, lexicon: Lexicon | None = None):
        lexicon = lexicon or default_lexicon()
        self.words = lexicon.words
        self.index = {w: i + 1 for i, w in enumerate(self.words)}
        self.BOS = len(self.words) + 1
        self.EOS = len(self.words) + 2

    def __len__(self):
        return self.EOS + 1

    def encode(self, caption: str, W_max: int) -> "TextInput":
        words = tokenize(caption)
        if len(words) + 2 > W_max:
            raise CaptionTooLong(f"{len(words)} words do not fit W_max={W_max}")
        ids = np.zeros(W_max, dtype=np.int64)
        ids[0] = self.BOS
        for i, w in enumerate(words):
            try:
                ids[i + 1] = self.index[w]
            except KeyError:
                raise UnknownWord(w) from None
        ids[len(words) + 1] = self.EOS
        mask = np.zeros(W_max, dtype=bool)
        mask[: len(words) + 2] = True
        return TextInput(ids, mask)

    def encode_batch(self, captions, W_max: int):
        items = [self.encode(c, W_max) for c in captions]
        return np.stack([t.token_ids for t in items]), np.stack([t.pad_mask for t in items])

    def decode(self, ids) -> str:
        return " ".join(self.words[i - 1] for i in ids if 0 < i <= len(self.words))


_VOCAB: Vocabulary | None = None


def default_vocab() -> Vocabulary:
    global _VOCAB
    if _VOCAB is None:
        _VOCAB = Vocabulary()
    return _VOCAB


@dataclass
class TextInput:
    token_ids: np.ndarray
    pad_mask: np.ndarray

    def eos_index(self, eos: int) -> int:
        hits = np.flatnonzero(self.token_ids == eos)
        if len(hits) != 1:
            raise MissingEOS(f"expected exactly one EOS, found {len(hits)}")
        return int(hits[0])


@dataclass
class ImageInput:
    patch_features: np.ndarray


@dataclass
class EncodedPair:
    V: Tensor
    T: Tensor
    pad_mask: np.ndarray
    v: Tensor
    t: Tensor


# --------------------------------------------------------------------------
# parameters


def _block_shapes(prefix, cfg):
    d, h = cfg.d, cfg.d * cfg.mlp_ratio
    return {
        f"{prefix}.ln1.g": (d,),
        f"{prefix}.ln1.b": (d,),
        f"{prefix}.attn.qkv.w": (d, 3 * d),
        f"{prefix}.attn.qkv.b": (3 * d,),
        f"{prefix}.attn.out.w": (d, d),
        f"{prefix}.attn.out.b": (d,),
        f"{prefix}.ln2.g": (d,),
        f"{prefix}.ln2.b": (d,),
        f"{prefix}.mlp.fc1.w": (d, h),
        f"{prefix}.mlp.fc1.b": (h,),
        f"{prefix}.mlp.fc2.w": (h, d),
        f"{prefix}.mlp.fc2.b": (d,),
    }


def param_shapes(cfg: EncoderConfig) -> dict:
    shapes = {
        "img.proj_in.w": (cfg.d_in, cfg.d),
        "img.proj_in.b": (cfg.d,),
        "img.pos": (cfg.P, cfg.d),
    }
    for i in range(cfg.layers):
        shapes.update(_block_shapes(f"img.blocks.{i}", cfg))
    shapes.update({"img.ln_f.g": (cfg.d,), "img.ln_f.b": (cfg.d,), "img.proj_out.w": (cfg.d, cfg.d)})
    shapes.update({"txt.tok_emb": (cfg.vocab_size, cfg.d), "txt.pos": (cfg.W_max, cfg.d)})
    for i in range(cfg.layers):
        shapes.update(_block_shapes(f"txt.blocks.{i}", cfg))
    shapes.update({"txt.ln_f.g": (cfg.d,), "txt.ln_f.b": (cfg.d,), "txt.proj_out.w": (cfg.d, cfg.d)})
    return shapes


def init_params(cfg: EncoderConfig, seed: int = 0, dtype=np.float32) -> dict:
    """Weights ~ U(-0.02, 0.02); biases and positional tables zero; layer-norm gains one."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".pos") or leaf == "b":
            arr = np.zeros(shape)
        elif ".ln" in name and leaf == "g":
            arr = np.ones(shape)
        else:
            arr = rng.uniform(-INIT_SCALE, INIT_SCALE, shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


def cast_params(params: dict, dtype) -> dict:
    return {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}


# --------------------------------------------------------------------------
# forward


def _attention(x, p, prefix, heads, mask):
    n, length, d = x.shape
    dh = d // heads
    qkv = x @ p[f"{prefix}.attn.qkv.w"] + p[f"{prefix}.attn.qkv.b"]
    qkv = qkv.reshape(n, length, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.T) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    out = scores.softmax(-1) @ v
    out = out.transpose(0, 2, 1, 3).reshape(n, length, d)
    return out @ p[f"{prefix}.attn.out.w"] + p[f"{prefix}.attn.out.b"]


def _block(h, p, prefix, heads, mask):
    x = h.layer_norm(p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    h = h + _attention(x, p, prefix, heads, mask)
    x = h.layer_norm(p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    x = (x @ p[f"{prefix}.mlp.fc1.w"] + p[f"{prefix}.mlp.fc1.b"]).gelu()
    return h + x @ p[f"{prefix}.mlp.fc2.w"] + p[f"{prefix}.mlp.fc2.b"]


def _tower(h, p, tower, cfg, mask=None):
    for i in range(cfg.layers):
        h = _block(h, p, f"{tower}.blocks.{i}", cfg.heads, mask)
    h = h.layer_norm(p[f"{tower}.ln_f.g"], p[f"{tower}.ln_f.b"])
    return h @ p[f"{tower}.proj_out.w"]


def encode_images(features, params: dict, cfg: EncoderConfig):
    """Batched image tower: (N, P, d_in) -> V (N, P, d) unit rows, v (N, d)."""
    dtype = params["img.pos"].dtype
    x = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=dtype))
    if x.ndim != 3 or x.shape[1:] != (cfg.P, cfg.d_in):
        raise ShapeMismatch(f"image batch {x.shape} does not match (N, {cfg.P}, {cfg.d_in})")
    h = x @ params["img.proj_in.w"] + params["img.proj_in.b"] + params["img.pos"]
    V = _tower(h, params, "img", cfg).l2_normalize(-1)
    v = V.mean(axis=1).l2_normalize(-1)
    return V, v


def _causal_mask(length, dtype):
    upper = np.triu(np.ones((length, length), dtype=bool), 1)
    return np.where(upper, MASK_VALUE, 0.0).astype(dtype)


def eos_positions(token_ids: np.ndarray, eos: int) -> np.ndarray:
    hits = token_ids == eos
    counts = hits.sum(axis=-1)
    if np.any(counts != 1):
        raise MissingEOS("every sequence needs exactly one EOS token")
    return hits.argmax(axis=-1)


def encode_texts(token_ids, params: dict, cfg: EncoderConfig, eos: int | None = None):
    """Batched text tower: (N, W) ids -> T (N, W, d) unit rows, t (N, d) at EOS."""
    token_ids = np.asarray(token_ids)
    if token_ids.ndim != 2 or token_ids.shape[1] > cfg.W_max:
        raise ShapeMismatch(f"token batch {token_ids.shape} does not fit W_max={cfg.W_max}")
    if token_ids.max(initial=0) >= cfg.vocab_size:
        raise ShapeMismatch("token id outside the vocabulary")
    eos = cfg.vocab_size - 1 if eos is None else eos
    where_eos = eos_positions(token_ids, eos)
    n, length = token_ids.shape
    pos = params["txt.pos"] if length == cfg.W_max else params["txt.pos"][:length]
    h = params["txt.tok_emb"][token_ids] + pos
    T = _tower(h, params, "txt", cfg, _causal_mask(length, h.dtype)).l2_normalize(-1)
    t = T[np.arange(n), where_eos]
    return T, t


def encode_image(img: ImageInput, params: dict, cfg: EncoderConfig):
    feats = np.asarray(img.patch_features)
    if feats.shape != (cfg.P, cfg.d_in):
        raise ShapeMismatch(f"image {feats.shape} does not match ({cfg.P}, {cfg.d_in})")
    if not np.all(np.isfinite(feats)):
        raise ValueError("patch features must be finite")
    V, v = encode_images(feats[None], params, cfg)
    return V[0], v[0]


def encode_text(txt: TextInput, params: dict, cfg: EncoderConfig):
    txt.eos_index(cfg.vocab_size - 1)
    T, t = encode_texts(txt.token_ids[None], params, cfg)
    return T[0], t[0], txt.pad_mask


def encode_pair(img: ImageInput, txt: TextInput, params: dict, cfg: EncoderConfig) -> EncodedPair:
    V, v = encode_image(img, params, cfg)
    T, t, mask = encode_text(txt, params, cfg)
    return EncodedPair(V, T, mask, v, t)


def stack(tensors, axis=0) -> Tensor:
    return concat([x.reshape(x.shape[:axis] + (1,) + x.shape[axis:]) for x in tensors], axis=axis)

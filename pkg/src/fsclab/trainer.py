"""AdamW training loop with warmup-cosine schedule and online hard negatives."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import Checkpoint, StructureMismatch, config_digest
from .encoders import EncoderConfig, default_vocab, encode_images, encode_texts, init_params, param_shapes
from .hardneg import SLOTS, default_lexicon, generate_set
from .objective import EncodedBatch, LossConfig, Temperature, total_loss
from .synth import SIGMA, Example, render
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

PHASES = ("pretrain_contrastive", "finetune")
TEMPERATURE_KEY = "log_inv_tau"
METRIC_FIELDS = ("step", "l_clip", "l_neg_g", "l_neg_l", "l_total", "lr", "inv_tau")


class Divergence(FloatingPointError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    steps: int = 2000
    lr: float = 3e-4
    warmup_steps: int = 50
    weight_decay: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    phase: str = "pretrain_contrastive"
    sigma: float = SIGMA
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")


def lr_at(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warmup to ``peak`` at ``step == warmup``, then cosine decay to 0 at ``total``."""
    if step < warmup:
        return peak * step / warmup
    if total <= warmup:
        return peak
    progress = min(1.0, (step - warmup) / (total - warmup))
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay; ``no_decay`` names skip the decay term."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, no_decay=()):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay and k not in self.no_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def no_decay_names(params: dict) -> list[str]:
    """Temperature, gains, biases and positional tables are not decayed."""
    return [k for k, p in params.items() if k == TEMPERATURE_KEY or p.ndim < 2 or k.endswith(".pos")]


# --------------------------------------------------------------------------
# model state <-> checkpoint


def new_model(cfg: EncoderConfig, seed: int, tau: float = 0.07, dtype=np.float32) -> dict:
    params = init_params(cfg, seed, dtype)
    params[TEMPERATURE_KEY] = Temperature(tau, dtype).log_inv_tau
    return params


def model_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> tuple[dict, EncoderConfig]:
    cfg = EncoderConfig(**ckpt.metadata["encoder"])
    expected = dict(param_shapes(cfg), **{TEMPERATURE_KEY: (1,)})
    if {k: tuple(v.shape) for k, v in ckpt.tensors.items()} != expected:
        raise StructureMismatch("checkpoint tensors do not match its encoder config")
    params = {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in ckpt.tensors.items()}
    return params, cfg


def to_checkpoint(params: dict, cfg: EncoderConfig, run_config: dict, step: int, seed: int) -> Checkpoint:
    meta = {
        "step": step,
        "seed": seed,
        "inv_tau": Temperature(log_inv_tau=params[TEMPERATURE_KEY]).inv_tau,
        "encoder": cfg.to_json(),
        "config": run_config,
        "config_digest": config_digest(run_config),
    }
    return Checkpoint({k: p.data for k, p in params.items()}, meta)


def run_config_dict(config: TrainConfig, cfg: EncoderConfig) -> dict:
    flat = {k: v for k, v in asdict(config).items() if k != "loss"}
    flat.update(asdict(config.loss))
    flat.update({k: v for k, v in cfg.to_json().items() if k not in ("vocab_size", "d_in")})
    return flat


# --------------------------------------------------------------------------
# batches


class Batcher:
    """Seeded epoch-wise shuffling plus tokenization with a per-caption cache."""

    def __init__(self, data: list[Example], cfg: EncoderConfig, config: TrainConfig):
        self.data = data
        self.cfg = cfg
        self.config = config
        self.features = np.stack([render(e.scene, e.noise_seed, config.sigma, cfg.G) for e in data])
        self.captions = [e.caption for e in data]
        self.vocab = default_vocab()
        self.lexicon = default_lexicon()
        self.rng = np.random.default_rng([config.seed, 3])
        self.order = np.empty(0, dtype=np.int64)
        self.cursor = 0
        self._tok = {}

    def _tokens(self, caption):
        hit = self._tok.get(caption)
        if hit is None:
            t = self.vocab.encode(caption, self.cfg.W_max)
            hit = self._tok[caption] = (t.token_ids, t.pad_mask)
        return hit

    def indices(self) -> np.ndarray:
        b = min(self.config.batch_size, len(self.data))
        if self.cursor + b > len(self.order):
            self.order = self.rng.permutation(len(self.data))
            self.cursor = 0
        idx = self.order[self.cursor : self.cursor + b]
        self.cursor += b
        return idx

    def batch(self, step: int, with_negatives: bool):
        idx = self.indices()
        texts, valid = [], []
        for i in idx:
            cap = self.captions[i]
            if with_negatives:
                hn = generate_set(cap, self.lexicon, seed=self.config.seed, item_id=int(i), step=step)
                texts.extend((hn.original,) + hn.negatives)
                valid.append(hn.valid)
            else:
                texts.append(cap)
        toks = [self._tokens(c) for c in texts]
        ids = np.stack([t[0] for t in toks])
        mask = np.stack([t[1] for t in toks])
        width = int(mask.sum(1).max())
        n_cand = 1 + len(SLOTS) if with_negatives else 1
        valid = np.array(valid, dtype=bool).reshape(len(idx), n_cand - 1)
        return self.features[idx], ids[:, :width], mask[:, :width], valid


def encode_batch(params, cfg, feats, ids, mask, valid) -> EncodedBatch:
    b = feats.shape[0]
    n_cand = ids.shape[0] // b
    V, v = encode_images(feats, params, cfg)
    T, t = encode_texts(ids, params, cfg)
    width = ids.shape[1]
    return EncodedBatch(
        V=V,
        v=v,
        T=T.reshape(b, n_cand, width, cfg.d),
        t=t.reshape(b, n_cand, cfg.d),
        pad_mask=mask.reshape(b, n_cand, width),
        valid=valid,
    )


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list = field(default_factory=list)


def train(
    data: list[Example],
    config: TrainConfig,
    encoder: EncoderConfig | None = None,
    init: Checkpoint | None = None,
    log_every: int = 0,
    run_config: dict | None = None,
) -> TrainResult:
    """Optimize from ``init`` (or a fresh seeded model) for ``config.steps`` steps.

    ``run_config`` is the record stored (and digested) in the checkpoint; it
    defaults to the flattened train and encoder settings.
    """
    if not data:
        raise ValueError("training data is empty")
    if init is not None:
        params, encoder = model_from_checkpoint(init)
    else:
        encoder = encoder or EncoderConfig()
        params = new_model(encoder, config.seed, config.loss.temperature_init)
    if run_config is None:
        run_config = run_config_dict(config, encoder)
    temperature = Temperature(log_inv_tau=params[TEMPERATURE_KEY])
    opt = AdamW(
        params,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
        config.weight_decay,
        no_decay=no_decay_names(params),
    )
    batcher = Batcher(data, encoder, config)
    with_negatives = config.phase == "finetune" and (config.loss.lambda_g > 0 or config.loss.lambda_l > 0)
    metrics = []
    for step in range(config.steps):
        lr = lr_at(step, config.lr, config.warmup_steps, config.steps)
        feats, ids, mask, valid = batcher.batch(step, with_negatives)
        with Tape():
            enc = encode_batch(params, encoder, feats, ids, mask, valid)
            parts = total_loss(enc, config.loss, temperature)
            value = parts.l_total.item()
            if not math.isfinite(value):
                raise Divergence(step, value)
            opt.zero_grad()
            backward(parts.l_total)
        opt.step(lr)
        row = {"step": step, **parts.values(), "lr": lr, "inv_tau": temperature.inv_tau}
        metrics.append(row)
        if log_every and step % log_every == 0:
            log.info("step %d  l_total %.4f  l_clip %.4f  lr %.2e", step, row["l_total"], row["l_clip"], lr)
    ckpt = to_checkpoint(params, encoder, run_config, config.steps, config.seed)
    if init is not None:
        ckpt.metadata["init_digest"] = init.digest()
    return TrainResult(ckpt, metrics)


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

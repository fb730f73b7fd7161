"""Scoring synthetic suites: selection accuracy, group accuracy, zero-shot, retrieval."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .checkpoint import Checkpoint, wise_ft_interpolate
from .encoders import default_vocab, encode_images, encode_texts
from .objective import Temperature, log_local_similarity
from .synth import COLORS, GRID, SHAPES, SIGMA, Scene, SceneObject, ZS_TEMPLATE, describes, render, zs_prompts
from .tensor import Tensor, no_grad
from .trainer import TEMPERATURE_KEY, model_from_checkpoint

WISE_FT_ALPHAS = tuple(round(0.1 * i, 1) for i in range(11))
CHUNK = 50


class EmptySuite(ValueError):
    pass


class KTooLarge(ValueError):
    pass


class DuplicateClass(ValueError):
    pass


# --------------------------------------------------------------------------
# scorers
#
# A scorer maps (patch features (N, P, d_in), captions) to an (N, M) score
# matrix.  Only the ordering of scores matters to every metric below.


class ModelScorer:
    """Cosine scores from a checkpoint; ``mode="local"`` uses log S_l instead."""

    def __init__(self, ckpt: Checkpoint, mode: str = "global", norm_mode: str = "minmax", chunk: int = 256):
        if mode not in ("global", "local"):
            raise ValueError(f"unknown scoring mode {mode!r}")
        self.params, self.cfg = model_from_checkpoint(ckpt)
        self.temperature = Temperature(log_inv_tau=self.params[TEMPERATURE_KEY])
        self.mode = mode
        self.norm_mode = norm_mode
        self.chunk = chunk
        self.vocab = default_vocab()
        self._text_cache = {}

    def _images(self, feats):
        with no_grad():
            out = [encode_images(feats[i : i + self.chunk], self.params, self.cfg) for i in range(0, len(feats), self.chunk)]
        V = np.concatenate([o[0].data for o in out])
        v = np.concatenate([o[1].data for o in out])
        return V, v

    def _texts(self, captions):
        missing = [c for c in dict.fromkeys(captions) if c not in self._text_cache]
        for i in range(0, len(missing), self.chunk):
            part = missing[i : i + self.chunk]
            ids, mask = self.vocab.encode_batch(part, self.cfg.W_max)
            with no_grad():
                T, t = encode_texts(ids, self.params, self.cfg)
            for j, c in enumerate(part):
                self._text_cache[c] = (T.data[j], t.data[j], mask[j])
        rows = [self._text_cache[c] for c in captions]
        return np.stack([r[0] for r in rows]), np.stack([r[1] for r in rows]), np.stack([r[2] for r in rows])

    def __call__(self, feats, captions) -> np.ndarray:
        feats = np.asarray(feats, dtype=np.float32)
        V, v = self._images(feats)
        T, t, mask = self._texts(list(captions))
        if self.mode == "global":
            return v @ t.T
        with no_grad():
            scores = log_local_similarity(
                Tensor(V[:, None]), Tensor(T[None]), mask[None], self.temperature.inv_tau, self.norm_mode
            )
        return scores.data


class RandomScorer:
    """Independent uniform scores; a chance-level reference."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def __call__(self, feats, captions):
        return self.rng.random((len(feats), len(captions)))


class ConstantScorer:
    def __call__(self, feats, captions):
        return np.zeros((len(feats), len(captions)))


def decode_scene(feats: np.ndarray, grid: int = GRID, threshold: float = 0.5) -> Scene:
    """Read objects back out of noisy patch features (no relation is recovered)."""
    feats = np.asarray(feats)
    objs = []
    for idx, row in enumerate(feats):
        shapes = row[: len(SHAPES)]
        colors = row[len(SHAPES) : len(SHAPES) + len(COLORS)]
        if shapes.max() < threshold:
            continue
        objs.append(SceneObject(SHAPES[int(shapes.argmax())], COLORS[int(colors.argmax())], divmod(idx, grid)))
    return Scene(tuple(objs))


PROMPT_PREFIX = ZS_TEMPLATE.split("{")[0]


class SymbolicScorer:
    """Scores 1 when the decoded scene satisfies the caption, else 0.

    Perfect on the compositional and zero-shot suites while the noise stays
    well below the 0.5 threshold.  Retrieval stays imperfect because one
    caption can be true of several scenes.
    """

    def __init__(self, grid: int = GRID):
        self.grid = grid

    def __call__(self, feats, captions):
        scenes = [decode_scene(f, self.grid) for f in feats]
        texts = ["a " + c[len(PROMPT_PREFIX) :] if c.startswith(PROMPT_PREFIX) else c for c in captions]
        return np.array([[float(describes(c, s)) for c in texts] for s in scenes])


# --------------------------------------------------------------------------
# metrics


def _features(item, sigma=SIGMA, grid=GRID):
    return render(Scene.from_json(item["scene"]), item["noise_seed"], sigma, grid)


def _strict_winner(scores: np.ndarray, target: int) -> bool:
    others = np.delete(scores, target)
    return bool(np.all(scores[target] > others))


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i : i + size]


def eval_comp_i2t(scorer, suite, sigma=SIGMA, grid=GRID, chunk=CHUNK) -> float:
    """Fraction of items where the labelled caption strictly beats every other candidate."""
    if not suite:
        raise EmptySuite("comp_i2t suite is empty")
    if any(len(it["captions"]) < 2 for it in suite):
        raise ValueError("selection items need at least two captions")
    hits = 0
    # score a block of items at once and read off each item's own candidates
    for block in _chunks(suite, chunk):
        feats = np.stack([_features(it, sigma, grid) for it in block])
        caps = [c for it in block for c in it["captions"]]
        s = np.asarray(scorer(feats, caps))
        start = 0
        for i, it in enumerate(block):
            n = len(it["captions"])
            hits += _strict_winner(s[i, start : start + n], it.get("label", 0))
            start += n
    return hits / len(suite)


def group_correct(s: np.ndarray) -> bool:
    """``s[i, j]`` scores image i against caption j; all four directed choices must be right."""
    return bool(s[0, 0] > s[0, 1] and s[1, 1] > s[1, 0] and s[0, 0] > s[1, 0] and s[1, 1] > s[0, 1])


def eval_group(scorer, suite, sigma=SIGMA, grid=GRID, chunk=CHUNK) -> float:
    if not suite:
        raise EmptySuite("group suite is empty")
    hits = 0
    for block in _chunks(suite, chunk):
        feats = np.stack(
            [render(Scene.from_json(sc), ns, sigma, grid) for it in block for sc, ns in zip(it["scenes"], it["noise_seeds"])]
        )
        s = np.asarray(scorer(feats, [c for it in block for c in it["captions"]]))
        for i in range(len(block)):
            hits += group_correct(s[2 * i : 2 * i + 2, 2 * i : 2 * i + 2])
    return hits / len(suite)


def recall_at_k(sim: np.ndarray, ks=(1, 5)) -> dict:
    """R@k for queries along rows; the true match of row i is column i.

    Ranking is by descending score with ties broken toward the lower index.
    """
    sim = np.asarray(sim)
    n = sim.shape[0]
    if sim.shape != (n, n) or n == 0:
        raise ValueError(f"expected a non-empty square matrix, got {sim.shape}")
    if max(ks) > n:
        raise KTooLarge(f"k={max(ks)} exceeds {n} candidates")
    diag = np.diag(sim)[:, None]
    cols = np.arange(n)
    ahead = (sim > diag) | ((sim == diag) & (cols[None, :] < cols[:, None]))
    rank = ahead.sum(1)
    return {k: float(np.mean(rank < k)) for k in ks}


def eval_retrieval(scorer, suite, ks=(1, 5), sigma=SIGMA, grid=GRID) -> dict:
    if not suite:
        raise EmptySuite("retrieval suite is empty")
    if max(ks) > len(suite):
        raise KTooLarge(f"k={max(ks)} exceeds {len(suite)} pairs")
    feats = np.stack([_features(it, sigma, grid) for it in suite])
    sim = np.asarray(scorer(feats, [it["caption"] for it in suite]))
    i2t = recall_at_k(sim, ks)
    t2i = recall_at_k(sim.T, ks)
    return {"i2t": i2t, "t2i": t2i}


def eval_zs(scorer, suite, prompts=None, sigma=SIGMA, grid=GRID) -> float:
    """``prompts`` is a list of (class name, prompt text); labels index into it."""
    if not suite:
        raise EmptySuite("zero-shot suite is empty")
    prompts = zs_prompts() if prompts is None else list(prompts)
    names = [p[0] for p in prompts]
    if len(set(names)) != len(names):
        raise DuplicateClass("class names repeat in the prompt set")
    feats = np.stack([_features(it, sigma, grid) for it in suite])
    s = np.asarray(scorer(feats, [p[1] for p in prompts]))
    return float(np.mean([_strict_winner(row, it["label"]) for row, it in zip(s, suite)]))


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    comp_i2t_acc: float
    comp_group_acc: float
    zs_acc: float
    i2t_r1: float
    i2t_r5: float
    t2i_r1: float
    t2i_r5: float

    @property
    def Comp(self) -> float:
        return (self.comp_i2t_acc + self.comp_group_acc) / 2

    @property
    def ZS(self) -> float:
        return self.zs_acc

    @property
    def I2T_Ret(self) -> float:
        return self.i2t_r1

    @property
    def T2I_Ret(self) -> float:
        return self.t2i_r1

    def to_json(self) -> dict:
        out = asdict(self)
        out.update(Comp=self.Comp, ZS=self.ZS, I2T_Ret=self.I2T_Ret, T2I_Ret=self.T2I_Ret)
        return out

    def to_csv(self, header: bool = True) -> str:
        row = self.to_json()
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        if header:
            w.writeheader()
        w.writerow({k: repr(v) for k, v in row.items()})
        return buf.getvalue()

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def evaluate(scorer, suites: dict, sigma=SIGMA, grid=GRID) -> MetricReport:
    ret = eval_retrieval(scorer, suites["retrieval"], (1, 5), sigma, grid)
    return MetricReport(
        comp_i2t_acc=eval_comp_i2t(scorer, suites["comp_i2t"], sigma, grid),
        comp_group_acc=eval_group(scorer, suites["comp_group"], sigma, grid),
        zs_acc=eval_zs(scorer, suites["zs"], None, sigma, grid),
        i2t_r1=ret["i2t"][1],
        i2t_r5=ret["i2t"][5],
        t2i_r1=ret["t2i"][1],
        t2i_r5=ret["t2i"][5],
    )


def evaluate_checkpoint(ckpt: Checkpoint, suites: dict, **kw) -> MetricReport:
    return evaluate(ModelScorer(ckpt), suites, **kw)


def wise_ft_trajectory(pre: Checkpoint, ft: Checkpoint, suites: dict, alphas=WISE_FT_ALPHAS) -> list[dict]:
    """Rows of ``alpha, Comp, ZS`` along the pre -> fine-tuned line."""
    rows = []
    for a in alphas:
        report = evaluate_checkpoint(wise_ft_interpolate(pre, ft, a), suites)
        rows.append({"alpha": a, "Comp": report.Comp, "ZS": report.ZS})
    return rows


def trajectory_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["alpha", "Comp", "ZS"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({"alpha": f"{r['alpha']:.1f}", "Comp": repr(r["Comp"]), "ZS": repr(r["ZS"])})
    return buf.getvalue()


"""Shapes-world scenes: patch features, template captions, evaluation suites."""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "blue", "green", "yellow")
RELATIONS = {"left_of": "left of", "right_of": "right of", "above": "above", "below": "below"}
FLIP = {"left_of": "right_of", "right_of": "left_of", "above": "below", "below": "above"}

GRID = 4
SIGMA = 0.05
D_IN = len(SHAPES) + len(COLORS) + 2
ZS_TEMPLATE = "a photo of a {color} {shape}"


class CellCollision(ValueError):
    pass


class InvalidScene(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple[int, int]


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]
    relation: str | None = None

    def to_json(self) -> dict:
        return {
            "objects": [{"shape": o.shape, "color": o.color, "cell": list(o.cell)} for o in self.objects],
            "relation": self.relation,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        objs = tuple(SceneObject(o["shape"], o["color"], tuple(o["cell"])) for o in d["objects"])
        return cls(objs, d.get("relation"))

    def content_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha1(blob.encode()).hexdigest()

    def with_colors_swapped(self) -> "Scene":
        a, b = self.objects[0], self.objects[1]
        objs = (SceneObject(a.shape, b.color, a.cell), SceneObject(b.shape, a.color, b.cell)) + self.objects[2:]
        return Scene(objs, self.relation)


def relation_holds(rel: str, a: tuple[int, int], b: tuple[int, int]) -> bool:
    (ra, ca), (rb, cb) = a, b
    return {
        "left_of": ca < cb,
        "right_of": ca > cb,
        "above": ra < rb,
        "below": ra > rb,
    }[rel]


def validate(scene: Scene, grid: int = GRID) -> None:
    if not 1 <= len(scene.objects) <= 3:
        raise InvalidScene("a scene holds 1 to 3 objects")
    for o in scene.objects:
        if o.shape not in SHAPES or o.color not in COLORS:
            raise InvalidScene(f"unknown object {o}")
        r, c = o.cell
        if not (0 <= r < grid and 0 <= c < grid):
            raise InvalidScene(f"cell {o.cell} outside the {grid}x{grid} grid")
    cells = [o.cell for o in scene.objects]
    if len(set(cells)) != len(cells):
        raise CellCollision(f"two objects share a cell: {cells}")
    if scene.relation is not None:
        if scene.relation not in RELATIONS or len(scene.objects) < 2:
            raise InvalidScene(f"bad relation {scene.relation!r}")
        if not relation_holds(scene.relation, scene.objects[0].cell, scene.objects[1].cell):
            raise InvalidScene(f"relation {scene.relation} contradicts cells")


def render(scene: Scene, noise_seed: int, sigma: float = SIGMA, grid: int = GRID) -> np.ndarray:
    """Patch features of shape (grid*grid, D_IN), one row per cell."""
    validate(scene, grid)
    feats = np.zeros((grid * grid, D_IN), dtype=np.float64)
    for o in scene.objects:
        r, c = o.cell
        row = feats[r * grid + c]
        row[SHAPES.index(o.shape)] = 1.0
        row[len(SHAPES) + COLORS.index(o.color)] = 1.0
        row[-2:] = (r / grid, c / grid)
    noise = np.random.default_rng(noise_seed).normal(0.0, 1.0, feats.shape)
    return (feats + sigma * noise).astype(np.float32)


def _phrase(o: SceneObject) -> str:
    return f"a {o.color} {o.shape}"


def caption(scene: Scene) -> str:
    objs = scene.objects
    if scene.relation is not None:
        head = f"{_phrase(objs[0])} {RELATIONS[scene.relation]} {_phrase(objs[1])}"
        rest = objs[2:]
    else:
        head = _phrase(objs[0])
        rest = objs[1:]
    return " and ".join([head] + [_phrase(o) for o in rest])


def parse_caption(text: str):
    """Inverse of :func:`caption`: ([(color, shape), ...], relation or None)."""
    words = text.split()
    objs, relation, i = [], None, 0
    while i < len(words):
        if words[i] == "and":
            i += 1
            continue
        if words[i] == "a" and i + 2 < len(words) and words[i + 1] in COLORS and words[i + 2] in SHAPES:
            objs.append((words[i + 1], words[i + 2]))
            i += 3
            continue
        for key, phrase in RELATIONS.items():
            n = len(phrase.split())
            if " ".join(words[i : i + n]) == phrase and len(objs) == 1 and relation is None:
                relation = key
                i += n
                break
        else:
            raise ValueError(f"not a shapes-world caption: {text!r} (at word {i})")
    return objs, relation


def describes(text: str, scene: Scene) -> bool:
    """True when some assignment of caption phrases to scene objects makes it hold."""
    try:
        objs, relation = parse_caption(text)
    except ValueError:
        return False
    if len(objs) != len(scene.objects):
        return False
    for perm in itertools.permutations(scene.objects):
        if all((o.color, o.shape) == want for o, want in zip(perm, objs)):
            if relation is None or relation_holds(relation, perm[0].cell, perm[1].cell):
                return True
    return False


# --------------------------------------------------------------------------
# sampling


def _random_cells(rng, k, grid):
    flat = rng.choice(grid * grid, size=k, replace=False)
    return [(int(f) // grid, int(f) % grid) for f in flat]


def _random_object(rng, cell):
    return SceneObject(SHAPES[rng.integers(len(SHAPES))], COLORS[rng.integers(len(COLORS))], cell)


def random_scene(rng: np.random.Generator, n_objects: int, related: bool = True, grid: int = GRID) -> Scene:
    cells = _random_cells(rng, n_objects, grid)
    objs = tuple(_random_object(rng, c) for c in cells)
    relation = None
    if related and n_objects >= 2:
        options = [r for r in RELATIONS if relation_holds(r, objs[0].cell, objs[1].cell)]
        relation = options[rng.integers(len(options))]
    return Scene(objs, relation)


def sample_scene(rng: np.random.Generator, grid: int = GRID) -> Scene:
    """Training mix: 15% single objects, 70% related pairs, 15% related pair plus a third object."""
    u = rng.random()
    if u < 0.15:
        return random_scene(rng, 1, grid=grid)
    if u < 0.85:
        return random_scene(rng, 2, grid=grid)
    return random_scene(rng, 3, grid=grid)


def scene_key(scene: Scene, noise_seed: int) -> str:
    """Disjointness key: content for multi-object scenes, content plus noise seed for singletons."""
    if len(scene.objects) == 1:
        return f"{scene.content_hash()}:{noise_seed}"
    return scene.content_hash()


@dataclass
class Example:
    scene: Scene
    caption: str
    noise_seed: int
    split: str = "train"

    def to_json(self) -> dict:
        return {"scene": self.scene.to_json(), "caption": self.caption, "split": self.split, "noise_seed": self.noise_seed}

    @classmethod
    def from_json(cls, d: dict) -> "Example":
        return cls(Scene.from_json(d["scene"]), d["caption"], int(d["noise_seed"]), d.get("split", "train"))


def make_dataset(n: int, seed: int, exclude: set | None = None, grid: int = GRID, split: str = "train") -> list[Example]:
    rng = np.random.default_rng([seed, 1])
    exclude = exclude or set()
    out = []
    while len(out) < n:
        scene = sample_scene(rng, grid)
        noise_seed = int(rng.integers(2**31))
        if scene_key(scene, noise_seed) in exclude:
            continue
        out.append(Example(scene, caption(scene), noise_seed, split))
    return out


def zs_classes() -> list[tuple[str, str]]:
    return [(c, s) for c in COLORS for s in SHAPES]


def zs_prompts() -> list[tuple[str, str]]:
    return [(f"{c} {s}", ZS_TEMPLATE.format(color=c, shape=s)) for c, s in zs_classes()]


def _comp_i2t_item(rng, grid):
    while True:
        scene = random_scene(rng, 2, grid=grid)
        a, b = scene.objects
        kind = "relation_flip" if a.color == b.color or rng.random() < 0.5 else "attribute_swap"
        if kind == "attribute_swap":
            negative = caption(scene.with_colors_swapped())
        else:
            negative = f"{_phrase(a)} {RELATIONS[FLIP[scene.relation]]} {_phrase(b)}"
        correct = caption(scene)
        # identical objects make a flipped relation true as well
        if describes(correct, scene) and not describes(negative, scene):
            return scene, correct, negative, kind


def _comp_group_item(rng, grid):
    while True:
        scene = random_scene(rng, 2, grid=grid)
        if scene.objects[0].color == scene.objects[1].color:
            continue
        twin = scene.with_colors_swapped()
        caps = [caption(scene), caption(twin)]
        truth = [[describes(c, s) for c in caps] for s in (scene, twin)]
        # exactly the diagonal holds, so the matching is unique
        if truth == [[True, False], [False, True]]:
            return (scene, twin), caps


def make_eval_suites(n: int, seed: int, grid: int = GRID) -> dict:
    """Four suites of ``n`` items each, keyed by kind."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng([seed, 2])

    def nseed():
        return int(rng.integers(2**31))

    comp_i2t = []
    for _ in range(n):
        scene, correct, negative, kind = _comp_i2t_item(rng, grid)
        comp_i2t.append(
            {"kind": "comp_i2t", "scene": scene.to_json(), "noise_seed": nseed(), "captions": [correct, negative], "label": 0, "perturbation": kind}
        )
    comp_group = []
    for _ in range(n):
        scenes, caps = _comp_group_item(rng, grid)
        comp_group.append(
            {"kind": "comp_group", "scenes": [s.to_json() for s in scenes], "noise_seeds": [nseed(), nseed()], "captions": caps}
        )
    classes = zs_classes()
    zs = []
    for _ in range(n):
        label = int(rng.integers(len(classes)))
        color, shape = classes[label]
        cell = _random_cells(rng, 1, grid)[0]
        scene = Scene((SceneObject(shape, color, cell),))
        zs.append({"kind": "zs", "scene": scene.to_json(), "noise_seed": nseed(), "label": label, "class": f"{color} {shape}"})
    retrieval, seen = [], set()
    while len(retrieval) < n:
        scene = sample_scene(rng, grid)
        cap = caption(scene)
        if cap in seen:
            continue
        seen.add(cap)
        retrieval.append({"kind": "retrieval", "scene": scene.to_json(), "noise_seed": nseed(), "caption": cap})
    return {"comp_i2t": comp_i2t, "comp_group": comp_group, "zs": zs, "retrieval": retrieval}


def suite_keys(suites: dict) -> set:
    keys = set()
    for items in suites.values():
        for it in items:
            if "scenes" in it:
                for s, ns in zip(it["scenes"], it["noise_seeds"]):
                    keys.add(scene_key(Scene.from_json(s), ns))
            else:
                keys.add(scene_key(Scene.from_json(it["scene"]), it["noise_seed"]))
    return keys


# --------------------------------------------------------------------------
# JSONL


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def flatten_suites(suites: dict) -> list[dict]:
    return [it for kind in ("comp_i2t", "comp_group", "zs", "retrieval") for it in suites.get(kind, [])]


def group_suites(records) -> dict:
    out = {"comp_i2t": [], "comp_group": [], "zs": [], "retrieval": []}
    for r in records:
        out.setdefault(r["kind"], []).append(r)
    return out

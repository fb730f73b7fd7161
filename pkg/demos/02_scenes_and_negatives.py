# Synthetic scenes, their captions, and the hard negatives built from them.
#
# Run: python3 demos/02_scenes_and_negatives.py

import numpy as np

from fsclab.hardneg import generate_set, tag
from fsclab.synth import Scene, SceneObject, caption, describes, make_eval_suites, render

# Two objects on a 4x4 grid with a spatial relation between them.
scene = Scene(
    (SceneObject("circle", "red", (1, 0)), SceneObject("square", "blue", (1, 3))),
    relation="left_of",
)
text = caption(scene)
print(text)

# Each grid cell becomes one patch: shape one-hot, color one-hot, position,
# plus a little Gaussian noise. Empty cells are pure noise.
feats = render(scene, noise_seed=0)
print("patch features:", feats.shape)
np.set_printoptions(precision=2, suppress=True)
print(feats[4])  # the red circle at row 1, column 0

# The same caption read from the other object's side is still true.
print(describes("a blue square right of a red circle", scene))  # True
print(describes("a blue circle left of a red square", scene))  # False

# Hard negatives come from three rules: swap two words of the same tag,
# replace one word from the lexicon, or shuffle word pairs.
print(tag(text).tags)
hn = generate_set(text, seed=0, item_id=0, step=0)
for neg, ok in zip(hn.negatives, hn.valid):
    print(f"  {'valid  ' if ok else 'invalid'} {neg}")

# A one-object caption has no same-tag pair and is too short to shuffle,
# so only the replacement slot survives.
print(generate_set("a red circle", seed=0).valid)

# Negatives change from step to step, so fine-tuning sees fresh ones.
for step in range(3):
    print(step, generate_set(text, seed=0, item_id=0, step=step).negatives[1])

# Evaluation suites never share a scene with training data.
suites = make_eval_suites(4, seed=1)
item = suites["comp_i2t"][0]
print(item["perturbation"], item["captions"])

# Pretrain a small dual encoder, fine-tune it with hard negatives, and walk
# the straight line between the two weight sets.
#
# Run: python3 demos/04_train_and_interpolate.py [pretrain_steps] [finetune_steps]
# The defaults finish in about a minute on one core. The full-size run is
# 2000 and 500 steps.

import logging
import sys

from fsclab.evaluation import evaluate_checkpoint, trajectory_csv, wise_ft_trajectory
from fsclab.objective import LossConfig
from fsclab.synth import make_dataset, make_eval_suites, suite_keys
from fsclab.trainer import TrainConfig, train

logging.basicConfig(level=logging.INFO, format="%(message)s")

pre_steps = int(sys.argv[1]) if len(sys.argv) > 1 else 400
ft_steps = int(sys.argv[2]) if len(sys.argv) > 2 else 100

suites = make_eval_suites(200, seed=100)
data = make_dataset(2000, seed=0, exclude=suite_keys(suites))

# Contrastive pretraining: the hard-negative weights are switched off.
pre = train(
    data,
    TrainConfig(steps=pre_steps, seed=0, loss=LossConfig(lambda_g=0.0, lambda_l=0.0)),
    log_every=100,
).checkpoint
print("pretrained :", evaluate_checkpoint(pre, suites).dumps())

# Fine-tuning with the full objective: global and local hard-negative terms,
# focal weighting and label smoothing.
ft = train(
    data,
    TrainConfig(steps=ft_steps, lr=1e-4, seed=0, phase="finetune"),
    init=pre,
    log_every=50,
).checkpoint
print("fine-tuned :", evaluate_checkpoint(ft, suites).dumps())

# alpha = 0 is the pretrained model and alpha = 1 the fine-tuned one.
print(trajectory_csv(wise_ft_trajectory(pre, ft, suites)))

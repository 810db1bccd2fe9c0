"""
Why the epsilon Dice rewards erasing a missing label
====================================================

For a label with no ground-truth pixels the epsilon form of soft Dice
tends to 1 as the predicted mass goes to 0. The robust form is exactly 0
whatever the prediction, so it neither rewards nor penalises anything.
"""

import math

import torch

from echoseg.losses import EPSILON_DICE, ROBUST_DICE, exp_log_dice, one_hot, soft_dice_per_label

# 8x8 image, label 1 present, label 2 absent
labels = torch.zeros(1, 8, 8, dtype=torch.long)
labels[:, 2:6, 2:6] = 1
target = one_hot(labels, 3, torch.float64)

print("predicted mass of the absent label -> loss term for it")
for mass in (10.0, 1.0, 0.1, 0.0):
    # spread the mass evenly over the background pixels
    pred = target.clone()
    pred[0, 2] = (mass / 48) * target[0, 0]
    pred[0, 0] -= pred[0, 2]
    eps = soft_dice_per_label(pred, target, EPSILON_DICE)[:, 1:2]
    rob = soft_dice_per_label(pred, target, ROBUST_DICE)[:, 1:2]
    print(f"  sum p = {pred[0, 2].sum().item():5.1f}   epsilon: {exp_log_dice(eps).item():.4f}"
          f"   robust: {exp_log_dice(rob).item():.4f}")

# the robust term is the constant (-ln 1e-7)^0.3
print("constant absent-label term:", (7 * math.log(10)) ** 0.3)

# and it passes no gradient back to the logits of that class
logits = torch.randn(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
pred = torch.clamp(torch.softmax(logits, 1), min=1e-7)
dice = soft_dice_per_label(pred, target, ROBUST_DICE)
(grad,) = torch.autograd.grad(dice[0, 1], logits)
print("max |d Dice_2 / d logit_2| in robust mode:", grad[0, 2].abs().max().item())

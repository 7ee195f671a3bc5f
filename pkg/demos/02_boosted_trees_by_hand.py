"""A look inside the boosted-tree learner on a toy problem.

Four points, one feature, labels 0 0 1 1. At a zero raw score every
gradient is +-0.5 and every hessian 0.25, so the best cut sits between
2 and 3. The default minimum child hessian of 1.0 blocks that split on
so few rows, which is why the demo relaxes it.
"""

import numpy as np

from cirrhosis_horizon.gbdt import GbdtParams, find_best_split, logistic_grad_hess, predict, train

X = np.array([[1.0], [2.0], [3.0], [4.0]])
y = np.array([0, 0, 1, 1])

g, h = logistic_grad_hess(np.zeros(4), y)
print("gradients", g, "hessians", h)

best = find_best_split(X, g, h, params=GbdtParams(min_child_weight=0.0))
print(f"best split: x{best.feature} < {best.threshold} (gain {best.gain:.4f}, missing go "
      f"{'left' if best.default_left else 'right'})")
print("with default min_child_weight:", find_best_split(X, g, h))

model = train(X, y, GbdtParams(num_rounds=10, learning_rate=0.5, min_child_weight=0.0))
print("trees:", len(model.trees))
print("training loss by round:", np.round(model.loss_history, 4))
print("probabilities:", np.round(predict(model, X), 3))

# Missing values follow the learned default direction of each split.
print("P(y=1 | x missing):", np.round(predict(model, np.array([[np.nan]])), 3))

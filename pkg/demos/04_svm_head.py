"""Linear SVM on frozen fc1 features, solved by dual coordinate descent.

Run:  python demos/04_svm_head.py
"""

import warnings

import numpy as np

from specemo import heads

rng = np.random.default_rng(3)
x = rng.normal(size=(80, 5))
y = np.where(x[:, 0] - 0.5 * x[:, 1] + 0.3 * rng.normal(size=80) > 0, 1.0, -1.0)

res = heads.dual_cd(x, y, C=1.0, tol=1e-6)
primal = res.gap[-1] - res.objective[-1]
print(f"converged in {res.epochs} epochs; primal {primal:.4f}, relative gap {res.gap[-1] / primal:.1e}")
print("dual objective never increases:", bool(np.all(np.diff(res.objective) <= 1e-12)))
print(f"support vectors: {int(np.sum(res.alpha > 0))} of {len(y)}")

# C is per sample: duplicating the data is the same problem as doubling C.
a = heads.svc_train(x, (y > 0).astype(int), C=2.0, tol=1e-10)
b = heads.svc_train(np.vstack([x, x]), np.concatenate([y, y]) > 0, C=1.0, tol=1e-10)
print("duplicate data == doubled C:", np.allclose(a.decision_function(x), b.decision_function(x), atol=1e-6))

# Constant features are kept but warned about.
with warnings.catch_warnings(record=True) as caught:
    warnings.simplefilter("always")
    heads.standardize_fit(np.hstack([x, np.ones((80, 1))]))
print("warning:", caught[0].message)

"""Every backward pass is checked against central differences.

Run:  python demos/02_gradient_checks.py
"""

import numpy as np

from specemo import nncore as nn
from specemo.backbone import BackboneConfig
from specemo.heads import DSNet

rng = np.random.default_rng(0)
x = rng.uniform(size=(2, 64, 64, 3))
y = np.array([0, 2])

for mode in ("fc", "am"):
    net = DSNet.build(mode, BackboneConfig.mini(), 4, seed=1).astype(np.float64)
    _, grads, _ = net.loss_and_grads(x, y)

    def loss():
        return nn.softmax_xent(net.forward(x)[0], y)[0]

    # coordinates whose nudge flips a ReLU or a pooling winner are skipped
    worst, checked, skipped = nn.grad_check(loss, net.params, grads, n_coords=200,
                                            signature=lambda: net.signature(x), full_output=True)
    print(f"DS-{mode.upper()}: {net.backbone.num_params} trunk parameters, "
          f"{checked} coordinates checked ({skipped} near kinks skipped), max relative error {worst:.1e}")

"""Train the attention head briefly and look at where it attends.

Run:  python demos/03_attention_maps.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from specemo import attention, audio_io, heads
from specemo.backbone import BackboneConfig
from specemo.features import ImageLoader

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/03")
out.mkdir(parents=True, exist_ok=True)
manifest = audio_io.synth_dataset(audio_io.SynthSpec(classes=4, speakers=5, clips=2, seed=7), out / "wav")
loader = ImageLoader()
x = np.stack([loader(manifest.resolve(s)) for s in manifest.samples])
y = manifest.label_indices()

sums = []
cfg = heads.TrainConfig(mode="am", epochs=10)
net = heads.DSNet.build("am", BackboneConfig.mini(), len(manifest.label_set), seed=0)
heads.train(net, x, y, x[::4], y[::4], cfg, callback=lambda step, loss, aux: sums.append(aux.map5.sum(axis=(1, 2))))
print(f"{len(sums)} steps; attention weights always sum to 1: "
      f"max deviation {max(np.max(np.abs(s - 1)) for s in sums):.1e}")

pred, _ = net.predict(x)
print(f"training accuracy {np.mean(pred == y):.3f}")

map4, map5 = net.attention_maps(x[:4])
for i in range(4):
    attention.export_map(map5[i], (64, 64), str(out / f"map5_{i}.pgm"))
    peak = tuple(int(v) for v in np.unravel_index(np.argmax(map5[i]), map5[i].shape))
    print(f"{manifest.samples[i].path}: block-5 attention peaks at cell {peak}")

# With the gates forced uniform the head is a plain mean-pool classifier.
net.ablate = True
print("uniform-gate accuracy:", np.mean(net.predict(x)[0] == y))

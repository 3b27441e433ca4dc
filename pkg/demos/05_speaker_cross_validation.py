"""Speaker-grouped cross-validation with the three heads.

Run:  python demos/05_speaker_cross_validation.py
"""

import tempfile
import warnings

from specemo import audio_io, evaluation
from specemo.features import ImageLoader
from specemo.heads import DegenerateDim, TrainConfig

root = tempfile.mkdtemp()
manifest = audio_io.synth_dataset(audio_io.SynthSpec(classes=4, speakers=5, clips=2, seed=7), root)
plan = evaluation.make_folds(manifest, "by_speaker", k=5, seed=0)
for f in range(plan.k):
    speakers = sorted({manifest.samples[i].speaker_id for i in plan.test_indices(f)})
    train, val = plan.train_val[f]
    print(f"fold {f}: test speakers {speakers}, {len(train)} train / {len(val)} validation clips")

loader = ImageLoader()
warnings.simplefilter("ignore", DegenerateDim)
for mode in ("svc", "fc", "am"):
    spec = evaluation.ModelSpec(TrainConfig(mode=mode, epochs=15))
    report, _ = evaluation.run_cv(manifest, spec, plan, loader)
    print(f"\n== {mode} ==")
    print(report.format_table())

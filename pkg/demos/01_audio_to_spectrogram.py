"""From a WAV file to the Mel-spectrogram image the network sees.

Run:  python demos/01_audio_to_spectrogram.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from specemo import audio_io, spectro

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/01")
out.mkdir(parents=True, exist_ok=True)

# A tiny synthetic corpus: two classes, two speakers, two clips each.
manifest = audio_io.synth_dataset(audio_io.SynthSpec(classes=2, speakers=2, clips=2, seed=0), out / "wav")
sample = manifest.samples[0]
clip = audio_io.load_wav(manifest.resolve(sample))
print(f"{sample.path}: label {sample.label}, speaker {sample.speaker_id}, "
      f"{clip.duration:.2f} s at {clip.sample_rate_hz} Hz")

# Any input rate is brought to the canonical 16 kHz first.
clip44 = audio_io.resample(clip, 44100)
back = audio_io.resample(clip44, 16000)
print(f"16 kHz -> 44.1 kHz -> 16 kHz round trip, max abs error {np.max(np.abs(back.samples - clip.samples)):.2e}")

params = spectro.SpectroParams()
power = spectro.mel_power(clip, params)
print(f"Mel power matrix: {power.shape[0]} bands x {power.shape[1]} frames")

img = spectro.extract(clip, params)
spectro.write_ppm(out / "spectrogram.ppm", img.pixels)
print(f"image {img.pixels.shape} written to {out / 'spectrogram.ppm'}")

# The filterbank refuses configurations that would leave a band empty.
try:
    spectro.mel_filterbank(spectro.SpectroParams(n_mels=128), 16000)
except spectro.DegenerateFilter as exc:
    print("128 bands on a 512-point FFT:", exc)

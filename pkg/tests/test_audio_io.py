import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specemo import audio_io
from specemo.audio_io import (AudioClip, DatasetManifest, LabeledSample, MalformedHeader, SynthSpec,
                              UnknownLabel, UnsupportedEncoding, decode_wav, encode_wav, resample)


def _pcm16(frames, rate=16000, channels=1):
    payload = np.asarray(frames, dtype="<i2").tobytes()
    fmt = struct.pack("<HHIIHH", 1, channels, rate, rate * 2 * channels, 2 * channels, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_constant_16bit():
    clip = decode_wav(_pcm16(np.full(100, 16384)))
    assert clip.sample_rate_hz == 16000
    assert np.all(clip.samples == 0.5)


def test_stereo_opposite_channels_mix_to_zero():
    frames = np.tile([16384, -16384], 50)
    clip = decode_wav(_pcm16(frames, channels=2))
    assert len(clip.samples) == 50
    assert np.all(clip.samples == 0.0)


def test_corrupt_magic():
    data = bytearray(_pcm16(np.zeros(10)))
    data[0:4] = b"RIFX"
    with pytest.raises(MalformedHeader):
        decode_wav(bytes(data))


def test_truncated_and_unknown_format():
    with pytest.raises(MalformedHeader):
        decode_wav(b"RIFF")
    data = bytearray(_pcm16(np.zeros(10)))
    data[20:22] = struct.pack("<H", 2)  # ADPCM
    with pytest.raises(UnsupportedEncoding):
        decode_wav(bytes(data))


def test_empty_data_chunk():
    with pytest.raises(audio_io.EmptyAudio):
        decode_wav(_pcm16([]))


@pytest.mark.parametrize("bits,tol", [(8, 1 / 64), (16, 1 / 16384), (24, 1e-6), (32, 1e-7)])
def test_encode_decode_round_trip(bits, tol, rng):
    x = rng.uniform(-0.9, 0.9, 500)
    clip = decode_wav(encode_wav(x, 22050, bits))
    assert clip.sample_rate_hz == 22050
    np.testing.assert_allclose(clip.samples, x, atol=tol)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(-32768, 32767), min_size=1, max_size=200))
def test_16bit_values_exact(values):
    clip = decode_wav(_pcm16(values))
    np.testing.assert_array_equal(clip.samples, np.array(values) / 32768.0)


def test_resample_identity():
    clip = AudioClip(np.linspace(-1, 1, 101), 16000)
    assert resample(clip, 16000) is clip


def test_resample_sine_48k_to_16k():
    t = np.arange(48000) / 48000
    out = resample(AudioClip(np.sin(2 * np.pi * 1000 * t), 48000), 16000)
    assert out.sample_rate_hz == 16000 and len(out.samples) == 16000
    n = 4000
    seg = out.samples[6000:6000 + n]
    # direct DFT magnitude at every bin up to Nyquist
    k = np.arange(n // 2 + 1)
    mags = np.abs(np.exp(-2j * np.pi * np.outer(k, np.arange(n)) / n) @ seg)
    assert int(np.argmax(mags)) == round(1000 * n / 16000)


def test_resample_dc_8k_to_16k():
    out = resample(AudioClip(np.full(8000, 0.25), 8000), 16000)
    assert len(out.samples) == 16000
    np.testing.assert_allclose(out.samples[64:-64], 0.25, atol=1e-3)


@pytest.mark.parametrize("src,dst", [(44100, 16000), (16000, 22050), (11025, 16000)])
def test_resample_length(src, dst):
    out = resample(AudioClip(np.zeros(1234), src), dst)
    assert len(out.samples) == round(1234 * dst / src)


def test_manifest_rows():
    text = "path,label,speaker,style\na.wav,happiness,S01,\nb.wav,neutral,S02,loud\n"
    m = audio_io.read_manifest(io.StringIO(text))
    assert m.samples[0] == LabeledSample("a.wav", "JOY", "S01", None)
    assert m.samples[1].label == "NEUTRAL" and m.samples[1].style == "loud"
    with pytest.raises(UnknownLabel):
        audio_io.read_manifest(io.StringIO("path,label,speaker,style\nc.wav,boredom,S03,\n"))


def test_manifest_errors():
    with pytest.raises(audio_io.MissingColumn):
        audio_io.read_manifest(io.StringIO("path,label\na.wav,joy\n"))
    with pytest.raises(audio_io.DuplicatePath):
        audio_io.read_manifest(io.StringIO("path,label,speaker,style\na.wav,joy,S1,\na.wav,fear,S1,\n"))
    with pytest.raises(audio_io.ManifestError):
        LabeledSample("x.wav", "JOY", "S1", "loud")


def test_manifest_save_load(tmp_path):
    m = DatasetManifest("m", [LabeledSample("a.wav", "JOY", "S1"), LabeledSample("b.wav", "NEUTRAL", "S2", "fast")])
    audio_io.save_manifest(m, tmp_path / "m.csv")
    back = audio_io.load_manifest(tmp_path / "m.csv")
    assert back.samples == m.samples
    assert back.resolve(back.samples[0]) == str(tmp_path / "a.wav")


def test_synth_deterministic(tmp_path):
    spec = SynthSpec(classes=4, speakers=5, clips=2, seed=7)
    audio_io.synth_dataset(spec, tmp_path / "a")
    audio_io.synth_dataset(spec, tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(files) == 41
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_counts_and_loadable(tmp_path):
    m = audio_io.synth_dataset(SynthSpec(classes=2, speakers=2, clips=2), tmp_path)
    assert len(m) == 8
    for s in m.samples:
        clip = audio_io.load_wav(m.resolve(s))
        assert clip.sample_rate_hz == 16000 and 0.6 <= clip.duration <= 1.0


def test_synth_neutral_styles(tmp_path):
    m = audio_io.synth_dataset(SynthSpec(speakers=2, clips=5, labels=["anger", "neutral"], neutral_styles=True),
                               tmp_path)
    styles = [s.style for s in m.samples if s.label == "NEUTRAL"]
    assert sorted(set(styles)) == sorted(audio_io.STYLES)
    assert all(s.style is None for s in m.samples if s.label != "NEUTRAL")

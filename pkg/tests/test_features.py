import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facpipe.audio import Waveform
from facpipe.errors import CacheIntegrityError, ProviderError, ValidationError
from facpipe.features import (
    FrameSequence,
    MelSpectrogram,
    PosteriorgramTrack,
    TractVariableTrack,
    TvNormalizationStats,
    UpstreamEmbedding,
    compute_mel,
    denormalize_tv_channels,
    fit_tv_normalization,
    get_ppg_targets,
    get_tv_targets,
    get_upstream_embeddings,
    normalize_tv_channels,
    read_feature_cache,
    write_feature_cache,
)
from facpipe.providers import (
    MockPpgProvider,
    MockTvProvider,
    MockUpstreamProvider,
)


class ArrayProvider:
    """Provider stub returning a canned array (or raising)."""

    name = "stub"

    def __init__(self, values=None, error=None):
        self.values = values
        self.error = error

    def extract(self, wave):
        if self.error is not None:
            raise self.error
        return self.values


# ---------------------------------------------------------------------------
# Frame sequence types
# ---------------------------------------------------------------------------


def test_frame_sequence_validation():
    with pytest.raises(ValidationError):
        FrameSequence(np.zeros((3, 4)), 0.0)
    with pytest.raises(ValidationError):
        FrameSequence(np.zeros(5), 100.0)
    with pytest.raises(ValidationError):
        FrameSequence(np.array([[np.nan, 1.0]]), 100.0)


def test_typed_tracks_enforce_geometry():
    with pytest.raises(ValidationError):
        MelSpectrogram(np.zeros((3, 40), dtype=np.float32), 100.0)
    with pytest.raises(ValidationError):
        UpstreamEmbedding(np.zeros((3, 1024), dtype=np.float32), 100.0)
    with pytest.raises(ValidationError):
        TractVariableTrack(np.zeros((3, 4), dtype=np.float32), 100.0)
    track = TractVariableTrack(np.zeros((3, 6), dtype=np.float32), 100.0)
    assert track.channel_names == ("LA", "LP", "TBCL", "TBCD", "TTCL", "TTCD")


def test_posteriorgram_rows_must_be_distributions():
    bad = np.full((2, 5816), 0.5 / 5816, dtype=np.float32)
    with pytest.raises(ValidationError):
        PosteriorgramTrack(bad, 100.0)


# ---------------------------------------------------------------------------
# Mel spectrogram
# ---------------------------------------------------------------------------


def test_mel_frame_count_and_shape(tone_wave):
    mel = compute_mel(tone_wave)
    # floor((32000 - 400) / 160) + 1
    assert mel.values.shape == (198, 80)
    assert mel.frame_rate == 100.0


def test_mel_silence_gives_constant_frames():
    mel = compute_mel(Waveform(np.zeros(16000, dtype=np.float32), 16000))
    assert np.all(mel.values == mel.values[0])


def test_mel_rejects_short_input():
    with pytest.raises(ValidationError, match="shorter than analysis window"):
        compute_mel(Waveform(np.zeros(300, dtype=np.float32), 16000))


def test_mel_deterministic(tone_wave):
    a = compute_mel(tone_wave)
    b = compute_mel(tone_wave)
    assert np.array_equal(a.values, b.values)


# ---------------------------------------------------------------------------
# Provider ingestion shape contracts
# ---------------------------------------------------------------------------


def test_upstream_contract(tone_wave):
    emb = get_upstream_embeddings(tone_wave, MockUpstreamProvider())
    assert emb.values.shape == (100, 1024)
    assert emb.frame_rate == 50.0


def test_upstream_accepts_zero_mock(tone_wave):
    emb = get_upstream_embeddings(tone_wave, ArrayProvider(np.zeros((100, 1024), dtype=np.float32)))
    assert emb.values.shape == (100, 1024)


def test_upstream_rejects_wrong_channels(tone_wave):
    with pytest.raises(ValidationError):
        get_upstream_embeddings(tone_wave, ArrayProvider(np.zeros((100, 512), dtype=np.float32)))


def test_upstream_wraps_provider_failure(tone_wave):
    with pytest.raises(ProviderError, match="upstream"):
        get_upstream_embeddings(tone_wave, ArrayProvider(error=RuntimeError("boom")))


def test_ppg_contract_uniform(tone_wave):
    track = get_ppg_targets(tone_wave, MockPpgProvider(mode="uniform"))
    assert track.values.shape == (200, 5816)
    assert np.allclose(track.values, 1.0 / 5816)
    sums = track.values.astype(np.float64).sum(axis=1)
    assert np.max(np.abs(sums - 1.0)) <= 1e-4


def test_ppg_renormalizes_small_deviation(tone_wave):
    base = np.full((200, 5816), 1.0 / 5816, dtype=np.float64) * 1.0005
    track = get_ppg_targets(tone_wave, ArrayProvider(base.astype(np.float32)))
    sums = track.values.astype(np.float64).sum(axis=1)
    assert np.max(np.abs(sums - 1.0)) <= 1e-4


def test_ppg_rejects_large_deviation(tone_wave):
    half = np.full((200, 5816), 0.5 / 5816, dtype=np.float32)
    with pytest.raises(ValidationError, match="row sums"):
        get_ppg_targets(tone_wave, ArrayProvider(half))


def test_tv_contract_sine(tone_wave):
    track = get_tv_targets(tone_wave, MockTvProvider())
    assert track.values.shape == (200, 6)
    again = get_tv_targets(tone_wave, MockTvProvider())
    assert np.array_equal(track.values, again.values)


def test_tv_rejects_wrong_channels(tone_wave):
    with pytest.raises(ValidationError):
        get_tv_targets(tone_wave, ArrayProvider(np.zeros((200, 4), dtype=np.float32)))


def test_frame_count_tolerance(tone_wave):
    # one frame off the nominal rate is accepted, two is not
    get_upstream_embeddings(tone_wave, ArrayProvider(np.zeros((101, 1024), dtype=np.float32)))
    with pytest.raises(ValidationError, match="frames"):
        get_upstream_embeddings(tone_wave, ArrayProvider(np.zeros((102, 1024), dtype=np.float32)))


# ---------------------------------------------------------------------------
# TV normalization
# ---------------------------------------------------------------------------


def make_stats(lo=0.0, hi=10.0):
    return TvNormalizationStats(np.full(6, lo), np.full(6, hi))


def test_normalize_midpoint_maps_to_center():
    track = TractVariableTrack(np.full((1, 6), 5.0), 100.0)
    out = normalize_tv_channels(track, make_stats())
    assert np.allclose(out.values, 0.0, atol=1e-12)


def test_normalize_max_maps_to_range_end():
    track = TractVariableTrack(np.full((1, 6), 10.0), 100.0)
    out = normalize_tv_channels(track, make_stats())
    assert np.allclose(out.values, 0.95, atol=1e-12)


def test_normalize_clips_outside_training_range():
    track = TractVariableTrack(np.full((1, 6), 12.0), 100.0)
    out = normalize_tv_channels(track, make_stats())
    # affine map then clamp: 12 -> 1.23 -> 0.95
    assert np.allclose(out.values, 0.95, atol=1e-12)


def test_normalize_endpoints_exact_within_1e9():
    rng = np.random.default_rng(0)
    values = rng.normal(0, 3.0, size=(50, 6)).astype(np.float64)
    track = TractVariableTrack(values, 100.0)
    stats = fit_tv_normalization([track])
    out = normalize_tv_channels(track, stats)
    assert np.all(np.abs(out.values.max(axis=0) - 0.95) <= 1e-9)
    assert np.all(np.abs(out.values.min(axis=0) + 0.95) <= 1e-9)


def test_normalize_monotone_and_invertible():
    rng = np.random.default_rng(1)
    values = np.sort(rng.normal(0, 2.0, size=(30, 6)), axis=0)
    track = TractVariableTrack(values, 100.0)
    stats = fit_tv_normalization([track])
    out = normalize_tv_channels(track, stats)
    assert np.all(np.diff(out.values, axis=0) >= 0)
    back = denormalize_tv_channels(out, stats)
    assert np.allclose(back.values, values, atol=1e-9)


def test_degenerate_channel_is_an_error():
    with pytest.raises(ValidationError, match="3"):
        TvNormalizationStats(
            np.array([0, 0, 0, 1.0, 0, 0]), np.array([1, 1, 1, 1.0, 1, 1])
        )


def test_stats_require_fit_data():
    with pytest.raises(ValidationError):
        fit_tv_normalization([])


# ---------------------------------------------------------------------------
# Feature cache
# ---------------------------------------------------------------------------


def test_cache_roundtrip_identity(tmp_path):
    rng = np.random.default_rng(7)
    seq = FrameSequence(rng.normal(size=(200, 6)).astype(np.float32), 100.0)
    path = tmp_path / "track.facf"
    write_feature_cache(seq, path, channel_names=("a",) * 6, provider_id="test")
    loaded, meta = read_feature_cache(path)
    assert np.array_equal(loaded.values, seq.values)
    assert loaded.frame_rate == seq.frame_rate
    assert meta["provider_id"] == "test"
    assert meta["channel_names"] == ["a"] * 6


def test_cache_roundtrips_empty_sequence(tmp_path):
    seq = FrameSequence(np.zeros((0, 13), dtype=np.float32), 50.0)
    path = tmp_path / "empty.facf"
    write_feature_cache(seq, path)
    loaded, _ = read_feature_cache(path)
    assert loaded.values.shape == (0, 13)
    assert loaded.frame_rate == 50.0


def test_cache_detects_truncation(tmp_path):
    seq = FrameSequence(np.ones((10, 4), dtype=np.float32), 100.0)
    path = tmp_path / "trunc.facf"
    write_feature_cache(seq, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(CacheIntegrityError, match="payload"):
        read_feature_cache(path)


def test_cache_detects_bad_magic(tmp_path):
    seq = FrameSequence(np.ones((2, 2), dtype=np.float32), 100.0)
    path = tmp_path / "magic.facf"
    write_feature_cache(seq, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(CacheIntegrityError, match="magic"):
        read_feature_cache(path)


def test_cache_rejects_float64(tmp_path):
    seq = FrameSequence(np.ones((2, 2), dtype=np.float64), 100.0)
    with pytest.raises(ValidationError, match="float32"):
        write_feature_cache(seq, tmp_path / "f64.facf")


@settings(max_examples=60, deadline=None)
@given(
    st.integers(0, 40),
    st.integers(1, 24),
    st.floats(0.5, 500.0),
    st.integers(0, 2**31 - 1),
)
def test_cache_roundtrip_property(frames, channels, frame_rate, seed):
    rng = np.random.default_rng(seed)
    seq = FrameSequence(rng.normal(size=(frames, channels)).astype(np.float32), frame_rate)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "prop.facf"
        write_feature_cache(seq, path)
        loaded, _ = read_feature_cache(path)
    assert np.array_equal(loaded.values, seq.values)
    assert loaded.frame_rate == seq.frame_rate
    assert loaded.values.dtype == np.float32

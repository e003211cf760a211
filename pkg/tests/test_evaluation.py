import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facpipe.conversion import SpeakerEmbedding
from facpipe.errors import ModelStateError, ProviderError, ValidationError
from facpipe.evaluation import (
    MCD_SCALE,
    MelCepstra,
    WERResult,
    centroid_report,
    dtw_align,
    format_summary_table,
    mcd,
    mcd_from_cepstra,
    mel_cepstra,
    ppmc,
    transcribe,
    wer,
    write_metric_records,
)
from facpipe.features import MelSpectrogram, read_feature_cache
from facpipe.providers import EchoTranscriber, GarblingTranscriber

from conftest import make_tone


def random_mel(frames=20, seed=0):
    rng = np.random.default_rng(seed)
    return MelSpectrogram(rng.normal(-5.0, 2.0, size=(frames, 80)).astype(np.float32), 100.0)


# ---------------------------------------------------------------------------
# Mel cepstra (DCT-II)
# ---------------------------------------------------------------------------


def dct2_oracle(frame: np.ndarray, order: int) -> np.ndarray:
    """Textbook DCT-II double loop: c_k = sum_n x_n cos(pi k (2n+1) / 2N)."""
    n = frame.size
    out = np.zeros(order + 1)
    for k in range(order + 1):
        acc = 0.0
        for i in range(n):
            acc += frame[i] * math.cos(math.pi * k * (2 * i + 1) / (2 * n))
        out[k] = acc
    return out


def test_cepstra_constant_frame_is_c0_only():
    mel = MelSpectrogram(np.full((3, 80), -4.0, dtype=np.float32), 100.0)
    ceps = mel_cepstra(mel, order=13)
    assert np.allclose(ceps.values[:, 1:], 0.0, atol=1e-9)
    assert np.allclose(ceps.values[:, 0], -4.0 * 80, atol=1e-3)


def test_cepstra_empty_mel():
    mel = MelSpectrogram(np.zeros((0, 80), dtype=np.float32), 100.0)
    assert mel_cepstra(mel).num_frames == 0


def test_cepstra_rejects_big_order():
    with pytest.raises(ValidationError):
        mel_cepstra(random_mel(), order=80)


def test_cepstra_matches_double_loop_oracle():
    mel = random_mel(frames=5, seed=3)
    ceps = mel_cepstra(mel, order=13)
    for t in range(5):
        expected = dct2_oracle(mel.values[t].astype(np.float64), 13)
        assert np.max(np.abs(ceps.values[t] - expected)) <= 1e-9


# ---------------------------------------------------------------------------
# DTW
# ---------------------------------------------------------------------------


def euclid_dist_matrix(a: MelCepstra, b: MelCepstra) -> np.ndarray:
    # independent oracle path: plain loops over c1..order
    ta, tb = a.num_frames, b.num_frames
    out = np.zeros((ta, tb))
    for i in range(ta):
        for j in range(tb):
            out[i, j] = math.sqrt(float(((a.values[i, 1:] - b.values[j, 1:]) ** 2).sum()))
    return out


def brute_force_min_cost(dist: np.ndarray) -> float:
    ta, tb = dist.shape

    @lru_cache(maxsize=None)
    def rec(i, j):
        if i == 0 and j == 0:
            return dist[0, 0]
        best = math.inf
        if i > 0:
            best = min(best, rec(i - 1, j))
        if j > 0:
            best = min(best, rec(i, j - 1))
        if i > 0 and j > 0:
            best = min(best, rec(i - 1, j - 1))
        return dist[i, j] + best

    return rec(ta - 1, tb - 1)


def random_cepstra(frames, seed, order=4):
    rng = np.random.default_rng(seed)
    return MelCepstra(rng.normal(size=(frames, order + 1)), order)


def test_dtw_identity_is_diagonal_zero_cost():
    a = random_cepstra(6, seed=0)
    alignment = dtw_align(a, a)
    assert alignment.cost == pytest.approx(0.0, abs=1e-12)
    assert alignment.path == tuple((i, i) for i in range(6))


def test_dtw_time_doubled_sequence_costs_zero():
    a = random_cepstra(5, seed=1)
    doubled = MelCepstra(np.repeat(a.values, 2, axis=0), a.order)
    alignment = dtw_align(a, doubled)
    assert alignment.cost == pytest.approx(0.0, abs=1e-12)
    assert len(alignment.path) >= doubled.num_frames


def test_dtw_matches_brute_force_on_random_cases():
    rng = np.random.default_rng(42)
    for case in range(20):
        ta, tb = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        a = random_cepstra(ta, seed=100 + case)
        b = random_cepstra(tb, seed=200 + case)
        alignment = dtw_align(a, b)
        oracle = brute_force_min_cost(euclid_dist_matrix(a, b))
        assert alignment.cost == pytest.approx(oracle, rel=1e-12)


def test_dtw_symmetry_against_oracle():
    a = random_cepstra(5, seed=7)
    b = random_cepstra(4, seed=8)
    assert dtw_align(a, b).cost == pytest.approx(dtw_align(b, a).cost, rel=1e-12)


def test_dtw_rejects_empty_or_mismatched():
    a = random_cepstra(3, seed=0)
    empty = MelCepstra(np.zeros((0, 5)), 4)
    with pytest.raises(ValidationError):
        dtw_align(a, empty)
    other = random_cepstra(3, seed=0, order=6)
    with pytest.raises(ValidationError):
        dtw_align(a, other)


# ---------------------------------------------------------------------------
# MCD
# ---------------------------------------------------------------------------


def test_mcd_identity_is_zero():
    for seed in range(5):
        mel = random_mel(frames=12, seed=seed)
        result = mcd(mel, mel)
        assert result.mcd_db == pytest.approx(0.0, abs=1e-12)
        assert result.aligned_frames == 12


def test_mcd_single_frame_closed_form():
    a = MelCepstra(np.concatenate([[0.0, 1.0], np.zeros(12)]).reshape(1, 14), 13)
    b = MelCepstra(np.zeros((1, 14)), 13)
    result = mcd_from_cepstra(a, b)
    assert result.mcd_db == pytest.approx((10.0 / math.log(10.0)) * math.sqrt(2.0), abs=1e-9)
    assert result.mcd_db == pytest.approx(6.141851463, abs=1e-6)


def test_mcd_c0_is_excluded():
    base = np.zeros((1, 14))
    shifted = base.copy()
    shifted[0, 0] = 100.0  # energy offset only
    result = mcd_from_cepstra(MelCepstra(base, 13), MelCepstra(shifted, 13))
    assert result.mcd_db == pytest.approx(0.0, abs=1e-12)


def test_mcd_requires_nonempty():
    mel = random_mel(4)
    empty = MelSpectrogram(np.zeros((0, 80), dtype=np.float32), 100.0)
    with pytest.raises(ValidationError):
        mcd(mel, empty)


def test_mcd_scale_constant():
    assert MCD_SCALE == pytest.approx(6.141851463713754, abs=1e-12)


def test_mcd_symmetric_when_alignment_is_diagonal():
    a = random_cepstra(1, seed=31, order=13)
    b = random_cepstra(1, seed=32, order=13)
    assert mcd_from_cepstra(a, b).mcd_db == pytest.approx(
        mcd_from_cepstra(b, a).mcd_db, rel=1e-12
    )


# ---------------------------------------------------------------------------
# WER
# ---------------------------------------------------------------------------


def levenshtein_oracle(a, b):
    """Single-row DP edit distance (independent of the aligned implementation)."""
    dp = list(range(len(b) + 1))
    for i in range(1, len(a) + 1):
        prev, dp[0] = dp[0], i
        for j in range(1, len(b) + 1):
            cur = dp[j]
            dp[j] = prev if a[i - 1] == b[j - 1] else 1 + min(prev, dp[j], dp[j - 1])
            prev = cur
    return dp[len(b)]


def test_wer_identity():
    result = wer("the cat sat", "the cat sat")
    assert result.wer_percent == 0.0
    assert (result.substitutions, result.deletions, result.insertions) == (0, 0, 0)


def test_wer_single_substitution():
    result = wer("a b c", "a x c")
    assert result.substitutions == 1
    assert result.wer_percent == pytest.approx(33.33, abs=0.01)


def test_wer_can_exceed_100_percent():
    result = wer("a", "a b c")
    assert result.insertions == 2
    assert result.wer_percent == 200.0


def test_wer_empty_hypothesis_is_all_deletions():
    result = wer("a b c d", "")
    assert result.deletions == 4
    assert result.wer_percent == 100.0


def test_wer_rejects_empty_reference():
    with pytest.raises(ValidationError):
        wer("...", "whatever")


def test_wer_normalizes_both_sides():
    assert wer("The CAT sat!", "the cat  sat.").wer_percent == 0.0


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.sampled_from("abcd"), min_size=1, max_size=12),
    st.lists(st.sampled_from("abcd"), min_size=0, max_size=12),
)
def test_wer_matches_edit_distance_oracle(ref_words, hyp_words):
    ref = " ".join(ref_words)
    hyp = " ".join(hyp_words)
    result = wer(ref, hyp)
    assert result.edits == levenshtein_oracle(ref_words, hyp_words)
    assert result.wer_percent == 100.0 * result.edits / len(ref_words)


def test_wer_result_invariant_enforced():
    with pytest.raises(ValidationError):
        WERResult(1, 0, 0, 4, 10.0)


# ---------------------------------------------------------------------------
# Transcriber providers
# ---------------------------------------------------------------------------


def make_record(transcript):
    from facpipe.corpus import UtteranceRecord

    return UtteranceRecord("u1", "NJS", "spanish", transcript, "u1.wav", 16000, "test")


def test_echo_transcriber_scores_zero():
    record = make_record("hello there world")
    hyp = transcribe(make_tone(0.1), EchoTranscriber(), record=record)
    assert wer(record.transcript, hyp).wer_percent == 0.0


def test_garbler_scores_fifty_on_even_references():
    record = make_record("one two three four six seven")
    hyp = transcribe(make_tone(0.1), GarblingTranscriber(), record=record)
    assert wer(record.transcript, hyp).wer_percent == 50.0


def test_transcriber_uninitialized():
    provider = EchoTranscriber()
    provider.close()
    with pytest.raises(ModelStateError):
        transcribe(make_tone(0.1), provider, record=make_record("x"))


def test_transcriber_failure_wrapped():
    class Broken:
        name = "broken"

        def transcribe(self, wave, record=None):
            raise RuntimeError("no ears")

    with pytest.raises(ProviderError, match="broken"):
        transcribe(make_tone(0.1), Broken())


# ---------------------------------------------------------------------------
# PPMC
# ---------------------------------------------------------------------------


def test_ppmc_perfect_positive():
    x = np.arange(10.0)
    assert ppmc(x, 2 * x + 3) == pytest.approx(1.0, abs=1e-12)


def test_ppmc_perfect_negative():
    x = np.arange(10.0)
    assert ppmc(x, -x) == pytest.approx(-1.0, abs=1e-12)


def test_ppmc_matches_direct_formula():
    rng = np.random.default_rng(5)
    x = rng.normal(size=200)
    y = rng.normal(size=200)
    num = np.mean(x * y) - np.mean(x) * np.mean(y)
    oracle = num / (np.std(x) * np.std(y))
    assert ppmc(x, y) == pytest.approx(oracle, abs=1e-12)


def test_ppmc_rejects_constant_and_mismatch():
    with pytest.raises(ValidationError):
        ppmc(np.ones(5), np.arange(5.0))
    with pytest.raises(ValidationError):
        ppmc(np.arange(4.0), np.arange(5.0))
    with pytest.raises(ValidationError):
        ppmc(np.array([1.0]), np.array([2.0]))


@settings(max_examples=50, deadline=None)
@given(
    st.floats(0.01, 100.0),
    st.floats(-50.0, 50.0),
    st.integers(0, 2**31 - 1),
)
def test_ppmc_invariant_under_positive_affine(scale, shift, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=50)
    y = rng.normal(size=50)
    base = ppmc(x, y)
    assert abs(ppmc(scale * x + shift, y) - base) <= 1e-12


# ---------------------------------------------------------------------------
# Centroid analysis
# ---------------------------------------------------------------------------


def embedding(vec, utt="u"):
    return SpeakerEmbedding(np.asarray(vec, dtype=np.float64), utt)


def test_centroid_identity_clusters():
    vectors = [embedding([1.0, 2.0, 3.0]), embedding([0.5, 2.5, 3.5])]
    report = centroid_report(
        {("NJS", "original"): vectors, ("NJS", "converted"): list(vectors)}
    )
    assert report.per_speaker == {"NJS": pytest.approx(0.0, abs=1e-12)}
    assert report.mean == pytest.approx(0.0, abs=1e-12)
    assert report.std == pytest.approx(0.0, abs=1e-12)


def test_centroid_constructed_distances():
    base = np.zeros(4)
    emb = {
        ("A", "original"): [embedding(base)],
        ("A", "converted"): [embedding(base + np.array([3.0, 0, 0, 0]))],
        ("B", "original"): [embedding(base)],
        ("B", "converted"): [embedding(base + np.array([0, 5.0, 0, 0]))],
    }
    report = centroid_report(emb)
    assert report.per_speaker["A"] == pytest.approx(3.0, abs=1e-12)
    assert report.per_speaker["B"] == pytest.approx(5.0, abs=1e-12)
    assert report.mean == pytest.approx(4.0, abs=1e-12)
    assert report.std == pytest.approx(1.0, abs=1e-12)


def test_centroid_missing_condition():
    with pytest.raises(ValidationError, match="converted"):
        centroid_report({("A", "original"): [embedding([1.0, 2.0])]})


def test_centroid_averages_within_cells():
    emb = {
        ("A", "original"): [embedding([0.0, 0.0]), embedding([2.0, 0.0])],  # centroid (1, 0)
        ("A", "converted"): [embedding([1.0, 4.0]), embedding([1.0, 2.0])],  # centroid (1, 3)
    }
    report = centroid_report(emb)
    assert report.per_speaker["A"] == pytest.approx(3.0, abs=1e-12)


def test_centroid_invariant_under_orthogonal_transform():
    rng = np.random.default_rng(9)
    dim = 8
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    emb = {}
    for speaker in ("A", "B", "C"):
        for condition in ("original", "converted"):
            emb[(speaker, condition)] = [
                embedding(rng.normal(size=dim)) for _ in range(4)
            ]
    base = centroid_report(emb)
    rotated = {
        key: [embedding(q @ e.vector) for e in cell] for key, cell in emb.items()
    }
    after = centroid_report(rotated)
    for speaker in base.per_speaker:
        assert abs(base.per_speaker[speaker] - after.per_speaker[speaker]) <= 1e-9


def test_centroid_export_roundtrip(tmp_path):
    emb = {
        ("NJS", "original"): [embedding([1.0, 2.0]), embedding([3.0, 4.0])],
        ("NJS", "converted"): [embedding([1.0, 2.0])],
    }
    centroid_report(emb, export_dir=tmp_path)
    seq, meta = read_feature_cache(tmp_path / "NJS_original.facf")
    assert seq.values.shape == (2, 2)
    assert meta["provider_id"] == "NJS/original"


# ---------------------------------------------------------------------------
# Report output
# ---------------------------------------------------------------------------


def test_metric_records_jsonl(tmp_path):
    path = write_metric_records(tmp_path / "r.jsonl", [("u1", "mcd", 6.09), ("u2", "mcd", 5.5)])
    import json

    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert lines[0] == {"utterance_id": "u1", "metric": "mcd", "value": 6.09}
    assert len(lines) == 2


def test_summary_table_layout():
    table = format_summary_table(
        "mcd", {"NJS": 5.8574, "TXHC": 6.5491, "YKWK": 6.7301, "ZHAA": 5.6177}
    )
    lines = table.strip().splitlines()
    assert lines[0].split() == ["speaker", "mcd"]
    assert [line.split()[0] for line in lines[1:]] == ["NJS", "TXHC", "YKWK", "ZHAA", "Average"]
    assert lines[-1].split()[1] == "6.1886"


def test_summary_table_with_std():
    table = format_summary_table("centroid_distance", {"A": 3.0, "B": 5.0}, 4.0, 1.0)
    assert "4.0000 +/- 1.0000" in table

import numpy as np
import pytest

from t2pose import text_features as tf
from t2pose.checkpoint import save_tensors
from t2pose.text_features import FeatureError, TextFeatures

# frozen: token -> table row, and the first three values of that row
GOLDEN = {
    "one": (2543, [-0.1277547925710678, -0.40406927466392517, -0.38069018721580505]),
    "person": (640, [-0.06182891130447388, 0.9825785756111145, -0.6822190880775452]),
    "arms": (3250, [1.2158520221710205, 0.7850458025932312, 0.7346199750900269]),
    "up": (2848, [-1.1494184732437134, 1.5495061874389648, -0.7629162073135376]),
}


class TestHashing:
    def test_fnv1a_reference_vectors(self):
        # published FNV-1a 32-bit test vectors
        assert tf.fnv1a_32(b"") == 0x811C9DC5
        assert tf.fnv1a_32(b"a") == 0xE40C292C
        assert tf.fnv1a_32(b"foobar") == 0xBF9CF968

    @pytest.mark.parametrize("token", sorted(GOLDEN))
    def test_golden_rows(self, token):
        idx, head = GOLDEN[token]
        assert tf.token_id(token) == idx
        np.testing.assert_array_equal(tf.embedding_table()[idx][:3], np.float32(head))

    def test_table_is_read_only(self):
        with pytest.raises(ValueError):
            tf.embedding_table()[0, 0] = 1.0


class TestTokenize:
    def test_split_rules(self):
        assert tf.tokenize("Two people, shaking-hands! (x_y) Ünïcode 42") == [
            "two", "people", "shaking", "hands", "x", "y", "ünïcode", "42"]

    def test_empty(self):
        assert tf.tokenize("  ,, ") == []


class TestEncodeToy:
    def test_deterministic(self):
        a, b = tf.encode_toy("a"), tf.encode_toy("a")
        assert a.features.tobytes() == b.features.tobytes()

    def test_empty_prompt_single_pad_row(self):
        f = tf.encode_toy("")
        assert f.tokens_len == 1 and f.features.shape == (32, 64)
        assert not f.features.any()

    def test_four_tokens(self):
        f = tf.encode_toy("one person arms up")
        assert f.tokens_len == 4 and f.features.shape == (32, 64)
        assert not f.features[4:].any()
        for i, tok in enumerate(["one", "person", "arms", "up"]):
            np.testing.assert_array_equal(f.features[i], tf.embedding_table()[GOLDEN[tok][0]])
        assert f.mask().sum() == 4

    def test_truncation(self):
        f = tf.encode_toy(" ".join(["w"] * 40))
        assert f.tokens_len == 32

    def test_case_insensitive(self):
        np.testing.assert_array_equal(tf.encode_toy("ARMS Up").features, tf.encode_toy("arms up").features)

    def test_other_dim(self):
        assert tf.encode_toy("x", dim=16).features.shape == (32, 16)

    def test_stack(self):
        x, m = tf.stack([tf.encode_toy("a b"), tf.encode_toy("c")])
        assert x.shape == (2, 32, 64) and m.sum(1).tolist() == [2, 1]


class TestTextFeatures:
    def test_invariants(self):
        with pytest.raises(FeatureError):
            TextFeatures(np.zeros((32, 4)), 0)
        with pytest.raises(FeatureError):
            TextFeatures(np.full((32, 4), np.nan), 1)
        with pytest.raises(FeatureError):
            TextFeatures(np.zeros(4), 1)


class TestFiles:
    def test_round_trip(self, tmp_path):
        f = tf.encode_toy("two people shaking hands")
        tf.save_features(f, tmp_path / "f.ckpt")
        g = tf.load_features(tmp_path / "f.ckpt", expected_dim=64)
        assert g.tokens_len == f.tokens_len
        np.testing.assert_array_equal(g.features, f.features)

    def test_missing_tensor(self, tmp_path):
        save_tensors(tmp_path / "x.ckpt", {"other": np.zeros((2, 64))})
        with pytest.raises(FeatureError, match="features"):
            tf.load_features(tmp_path / "x.ckpt")

    def test_rank3_rejected(self, tmp_path):
        save_tensors(tmp_path / "x.ckpt", {"features": np.zeros((1, 2, 64))})
        with pytest.raises(FeatureError, match="rank"):
            tf.load_features(tmp_path / "x.ckpt")

    def test_dim_mismatch_names_both(self, tmp_path):
        save_tensors(tmp_path / "x.ckpt", {"features": np.zeros((3, 48))})
        with pytest.raises(FeatureError, match="48.*64"):
            tf.load_features(tmp_path / "x.ckpt", expected_dim=64)

    def test_long_sequence_truncated(self, tmp_path):
        save_tensors(tmp_path / "x.ckpt", {"features": np.ones((40, 8))})
        f = tf.load_features(tmp_path / "x.ckpt")
        assert f.tokens_len == 32 and f.features.shape == (32, 8)

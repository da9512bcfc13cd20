import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caplab.cider import build_cider_stats
from caplab.corpus import Dataset, ImageRecord, build_vocab
from caplab.metrics import (
    MetricsReport,
    evaluate,
    oor_analysis,
    repetition_rate,
    rk_retrieval,
    vocab_stats,
)


@pytest.fixture(scope="module")
def stats_vocab():
    corpus = [["a", "cat"], ["a", "cat"], ["a", "dog"], ["zebra", "stands", "here", "now"]]
    return build_vocab(corpus, 1)


class TestVocabStats:
    def test_hand_enumeration(self, stats_vocab):
        captions = [["a", "cat"], ["a", "cat"], ["a", "dog"]]
        unique_1, unique_s, mean_length = vocab_stats(captions, stats_vocab)
        assert (unique_1, unique_s, mean_length) == (3, 2, 2.0)

    def test_empty(self, stats_vocab):
        assert vocab_stats([], stats_vocab) == (0, 0, 0.0)

    def test_duplication_invariance(self, stats_vocab):
        captions = [["a", "cat"], ["a", "dog"]]
        u1, s1, _ = vocab_stats(captions, stats_vocab)
        u2, s2, _ = vocab_stats(captions * 3, stats_vocab)
        assert (u1, s1) == (u2, s2)

    def test_unk_excluded_from_unigrams_but_counted_in_length(self, stats_vocab):
        unique_1, unique_s, mean_length = vocab_stats([["a", "<unk>"]], stats_vocab)
        assert unique_1 == 1
        assert unique_s == 1
        assert mean_length == 1.0  # specials excluded from length

    def test_bounds(self, stats_vocab):
        captions = [["a", "cat", "dog"], ["zebra"]]
        unique_1, unique_s, _ = vocab_stats(captions, stats_vocab)
        assert unique_1 <= len(stats_vocab)
        assert unique_s <= len(captions)


class TestRepetitionRate:
    def test_hand_value_four_identical_tokens(self):
        # n=1: 1-1/4, n=2: 1-1/3, n=3: 1-1/2, n=4: 0 -> mean 0.479167
        assert repetition_rate([["a", "a", "a", "a"]]) == pytest.approx(0.479167, abs=1e-6)

    def test_all_distinct_is_zero(self):
        assert repetition_rate([["v", "w", "x", "y", "z"]]) == 0.0

    def test_order_invariance(self):
        caps = [["a", "b", "a"], ["c", "c"], ["d"]]
        assert repetition_rate(caps) == repetition_rate(list(reversed(caps)))

    def test_short_captions_contribute_zero_for_missing_orders(self):
        assert repetition_rate([["a"]]) == 0.0
        assert repetition_rate([["a", "a"]]) == pytest.approx((0.5 + 0.0) / 4)

    def test_range(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            caps = [[str(t) for t in rng.integers(0, 3, size=rng.integers(1, 8))]
                    for _ in range(4)]
            assert 0.0 <= repetition_rate(caps) <= 1.0


class TestOorAnalysis:
    def test_verbatim_copies_have_none(self, stats_vocab):
        refs = [[["a", "cat"]], [["a", "dog"]]]
        captions = [["a", "cat"], ["a", "dog"]]
        count, mean_rank, defined = oor_analysis(captions, refs, stats_vocab)
        assert count == 0 and mean_rank == 0.0 and defined is False

    def test_single_novel_word(self, stats_vocab):
        refs = [[["a", "cat"]]]
        count, mean_rank, defined = oor_analysis([["zebra"]], refs, stats_vocab)
        assert count == 1 and defined is True
        assert mean_rank == stats_vocab.frequency_rank("zebra")

    def test_equal_counts_different_ranks(self, stats_vocab):
        refs = [[["a"]]]
        high_freq = oor_analysis([["cat"]], refs, stats_vocab)
        low_freq = oor_analysis([["zebra"]], refs, stats_vocab)
        assert high_freq[0] == low_freq[0] == 1
        assert low_freq[1] > high_freq[1]

    def test_tokens_counted_not_types(self, stats_vocab):
        refs = [[["a"]]]
        count, _, _ = oor_analysis([["zebra", "zebra", "cat"]], refs, stats_vocab)
        assert count == 3

    def test_unranked_tokens_counted_but_excluded_from_mean(self, stats_vocab):
        refs = [[["a"]]]
        count, mean_rank, defined = oor_analysis([["<unk>", "zebra"]], refs, stats_vocab)
        assert count == 2
        assert mean_rank == stats_vocab.frequency_rank("zebra")
        assert defined

    def test_alignment_enforced(self, stats_vocab):
        with pytest.raises(ValueError):
            oor_analysis([["a"]], [], stats_vocab)


def make_retrieval_dataset():
    recs = [
        ImageRecord(id=0, features=np.zeros(2), references=[["red", "ball"]],
                    attributes={"red", "ball"}),
        ImageRecord(id=1, features=np.zeros(2), references=[["green", "cube"]],
                    attributes={"green", "cube"}),
        ImageRecord(id=2, features=np.zeros(2), references=[["blue", "cone"]],
                    attributes={"blue", "cone"}),
    ]
    return Dataset(split="test", records=recs)


class TestRetrieval:
    def test_single_image_is_always_recalled(self):
        ds = Dataset(split="test", records=[
            ImageRecord(id=5, features=np.zeros(2), references=[["x"]], attributes={"x"})])
        assert rk_retrieval([["anything"]], ds, ks=(1,))[1] == 100.0

    def test_exact_attribute_caption_ranks_first(self):
        ds = make_retrieval_dataset()
        captions = [["red", "ball"], ["green", "cube"], ["blue", "cone"]]
        r = rk_retrieval(captions, ds, ks=(1, 2, 3))
        assert r[1] == 100.0

    def test_monotone_in_k(self):
        ds = make_retrieval_dataset()
        captions = [["red"], ["red"], ["red"]]  # degenerate: same caption everywhere
        r = rk_retrieval(captions, ds, ks=(1, 2, 3))
        assert r[1] <= r[2] <= r[3]
        assert r[3] == 100.0

    def test_tie_goes_to_lower_image_id(self):
        ds = make_retrieval_dataset()
        # a caption matching nothing ties all images at score zero
        r = rk_retrieval([["zzz"], ["green", "cube"], ["blue", "cone"]], ds, ks=(1,))
        # image 0 wins its tie (lowest id), so its useless caption still ranks 1
        assert r[1] == 100.0

    def test_count_mismatch_rejected(self):
        ds = make_retrieval_dataset()
        with pytest.raises(ValueError):
            rk_retrieval([["a"]], ds)


@pytest.fixture(scope="module")
def eval_setup():
    recs = [
        ImageRecord(id=0, features=np.zeros(2),
                    references=[["a", "red", "bird", "flies"]],
                    attributes={"red", "bird"}),
        ImageRecord(id=1, features=np.zeros(2),
                    references=[["a", "blue", "fish", "swims"]],
                    attributes={"blue", "fish"}),
    ]
    ds = Dataset(split="test", records=recs)
    vocab = build_vocab([r for rec in recs for r in rec.references], 1)
    stats = build_cider_stats([rec.references for rec in recs])
    return ds, vocab, stats


class TestEvaluate:
    def test_self_evaluation_oracle(self, eval_setup):
        ds, vocab, stats = eval_setup
        captions = [rec.references[0] for rec in ds.records]
        report = evaluate(captions, ds, vocab, stats)
        assert report.oor_count == 0
        assert report.cider == pytest.approx(10.0, abs=1e-6)
        assert report.rep == repetition_rate(captions)
        assert report.r_at[1] == 100.0
        assert report.unique_s == 2
        assert report.mean_length == 4.0

    def test_determinism(self, eval_setup):
        ds, vocab, stats = eval_setup
        captions = [["a", "red", "bird"], ["a", "blue", "fish"]]
        r1 = evaluate(captions, ds, vocab, stats)
        r2 = evaluate(captions, ds, vocab, stats)
        assert r1.as_dict() == r2.as_dict()

    def test_image_order_invariance(self, eval_setup):
        ds, vocab, stats = eval_setup
        captions = [["a", "red", "bird"], ["a", "blue", "fish"]]
        base = evaluate(captions, ds, vocab, stats).as_dict()
        flipped_ds = Dataset(split="test", records=list(reversed(ds.records)))
        flipped = evaluate(list(reversed(captions)), flipped_ds, vocab, stats).as_dict()
        assert base == flipped

    def test_report_schema(self, eval_setup):
        ds, vocab, stats = eval_setup
        captions = [["a"], ["a"]]
        row = evaluate(captions, ds, vocab, stats).as_dict()
        for key in ("unique_1", "unique_s", "mean_length", "cider", "rep",
                    "oor_count", "oor_mean_rank", "r_at_1", "r_at_5", "r_at_10"):
            assert key in row

    def test_r_at_bounds_and_monotonicity(self, eval_setup):
        ds, vocab, stats = eval_setup
        report = evaluate([["a", "red"], ["zzz"]], ds, vocab, stats)
        ks = sorted(report.r_at)
        assert all(0.0 <= report.r_at[k] <= 100.0 for k in ks)
        assert all(report.r_at[a] <= report.r_at[b] for a, b in zip(ks, ks[1:]))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.lists(st.sampled_from(["a", "b", "c"]), min_size=1, max_size=6),
                min_size=1, max_size=5))
def test_repetition_rate_bounds_property(captions):
    assert 0.0 <= repetition_rate(captions) <= 1.0

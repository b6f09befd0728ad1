"""Determinism, invertibility, filtering, batching, and file round-trips."""

import logging

import numpy as np
import pytest

from simcr.batching import (
    BatchBudgetError,
    TaskBatcher,
    batch_iterator,
    make_task_batch,
    plan_batches,
)
from simcr.corpus import (
    CorpusError,
    CorpusFormatError,
    CorpusSplit,
    TaskSpec,
    Triple,
    filter_pairs,
    generate_corpus,
    invert_translation,
    load_corpus,
    render_speech,
    save_corpus,
    swap_adjacent,
    translate,
)

SMALL = TaskSpec(src_vocab_size=16, tgt_vocab_size=16, len_min=3, len_max=6,
                 frame_dim=4, repeat_min=2, repeat_max=3, jitter_std=0.2, seed=11)
SIZES = {"train": 40, "valid": 8, "test": 8}


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(SMALL, SIZES)


class TestRule:
    def test_swap_adjacent_pairs(self):
        np.testing.assert_array_equal(swap_adjacent(np.array([1, 2, 3, 4])), [2, 1, 4, 3])
        np.testing.assert_array_equal(swap_adjacent(np.array([1, 2, 3])), [2, 1, 3])
        np.testing.assert_array_equal(swap_adjacent(np.array([9])), [9])

    def test_rule_is_invertible(self, small_corpus):
        for t in small_corpus.train + small_corpus.valid + small_corpus.test:
            np.testing.assert_array_equal(invert_translation(SMALL, t.tgt), t.src)

    def test_lengths_preserved(self, small_corpus):
        for t in small_corpus.train:
            assert len(t.src) == len(t.tgt)


class TestGeneration:
    def test_deterministic(self, small_corpus):
        again = generate_corpus(SMALL, SIZES)
        assert len(again.train) == len(small_corpus.train)
        for a, b in zip(again.train, small_corpus.train):
            np.testing.assert_array_equal(a.src, b.src)
            np.testing.assert_array_equal(a.tgt, b.tgt)
            np.testing.assert_array_equal(a.frames, b.frames)

    def test_splits_disjoint(self, small_corpus):
        train = {t.key() for t in small_corpus.train}
        valid = {t.key() for t in small_corpus.valid}
        test = {t.key() for t in small_corpus.test}
        assert not train & test
        assert not train & valid
        assert not valid & test

    def test_vocab_too_small(self):
        tiny = TaskSpec(src_vocab_size=2, tgt_vocab_size=2, len_min=1, len_max=1,
                        frame_dim=2, repeat_min=1, repeat_max=1, seed=0)
        with pytest.raises(CorpusError, match="vocab too small"):
            generate_corpus(tiny, {"train": 5, "valid": 0, "test": 0})

    def test_frameless_generation(self):
        c = generate_corpus(SMALL, {"train": 5, "valid": 0, "test": 0}, with_frames=False)
        assert all(t.frames is None for t in c.train)


class TestRenderSpeech:
    def test_noiseless_single_repeat_is_prototypes(self):
        spec = TaskSpec(src_vocab_size=8, tgt_vocab_size=8, len_min=2, len_max=4,
                        frame_dim=3, repeat_min=1, repeat_max=1, jitter_std=0.0, seed=3)
        tokens = np.array([2, 5, 7])
        frames = render_speech(tokens, spec, np.random.default_rng(0))
        np.testing.assert_array_equal(frames, spec.prototypes()[tokens])

    def test_fixed_repeat_length(self):
        spec = TaskSpec(src_vocab_size=8, tgt_vocab_size=8, len_min=2, len_max=4,
                        frame_dim=3, repeat_min=3, repeat_max=3, jitter_std=0.1, seed=3)
        tokens = np.array([0, 1, 2, 3])
        frames = render_speech(tokens, spec, np.random.default_rng(0))
        assert frames.shape == (12, 3)

    def test_jitter_mean_concentrates(self):
        spec = TaskSpec(src_vocab_size=8, tgt_vocab_size=8, len_min=2, len_max=4,
                        frame_dim=3, repeat_min=4, repeat_max=4, jitter_std=0.5, seed=3)
        tokens = np.array([1, 4, 6])
        a = render_speech(tokens, spec, np.random.default_rng(1))
        b = render_speech(tokens, spec, np.random.default_rng(2))
        assert not np.array_equal(a, b)
        protos = spec.prototypes()[tokens]
        bound = 3 * spec.jitter_std / np.sqrt(4)
        for frames in (a, b):
            means = frames.reshape(3, 4, 3).mean(axis=1)
            assert np.abs(means - protos).max() < bound


class TestFilter:
    def test_postcondition_and_idempotence(self, small_corpus):
        f1 = filter_pairs(small_corpus, min_frames=7, max_frames=14, max_len_ratio=1.5)
        for t in f1.train:
            assert 7 <= t.n_frames <= 14
        f2 = filter_pairs(f1, min_frames=7, max_frames=14, max_len_ratio=1.5)
        assert f2.counts() == f1.counts()

    def test_ratio_boundary_retained(self):
        c = CorpusSplit(train=[
            Triple(src=np.array([1, 2]), tgt=np.array([3, 4, 5]), frames=None),
            Triple(src=np.array([1]), tgt=np.array([3, 4]), frames=None),
        ])
        out = filter_pairs(c, min_frames=1, max_frames=10, max_len_ratio=1.5)
        # ratio exactly 1.5 is kept; ratio 2.0 is dropped
        assert len(out.train) == 1
        assert len(out.train[0].src) == 2

    def test_empty_result_is_error(self, small_corpus):
        with pytest.raises(CorpusError):
            filter_pairs(small_corpus, min_frames=1000, max_frames=2000)


class TestBatching:
    def test_budget_respected_and_partition(self, small_corpus):
        vocab = SMALL.vocab()
        batcher = TaskBatcher(small_corpus.train, "st", vocab, budget=40, shuffle_seed=5)
        seen = []
        for g in batcher.groups:
            cost = sum(small_corpus.train[i].n_frames for i in g)
            assert cost <= 40
            seen.extend(g)
        assert sorted(seen) == list(range(len(small_corpus.train)))

    def test_epoch_union_is_corpus(self, small_corpus):
        vocab = SMALL.vocab()
        batches = list(batch_iterator(small_corpus.train, "mt", vocab, budget=30,
                                      shuffle_seed=9, epochs=1))
        assert sum(b.size for b in batches) == len(small_corpus.train)

    def test_same_seed_same_sequence(self, small_corpus):
        vocab = SMALL.vocab()
        a = TaskBatcher(small_corpus.train, "mt", vocab, budget=30, shuffle_seed=3)
        b = TaskBatcher(small_corpus.train, "mt", vocab, budget=30, shuffle_seed=3)
        for e in range(3):
            np.testing.assert_array_equal(a.epoch_order(e), b.epoch_order(e))

    def test_item_over_budget_names_item(self, small_corpus):
        with pytest.raises(BatchBudgetError, match="item"):
            plan_batches(small_corpus.train, "st", budget=3)

    def test_target_batch_layout(self, small_corpus):
        vocab = SMALL.vocab()
        b = make_task_batch("mt", small_corpus.train[:3], vocab)
        row = b.target
        n = len(small_corpus.train[0].tgt)
        assert row.dec_in[0, 0] == vocab.tag_tgt
        assert row.dec_out[0, n] == vocab.eos
        assert row.mask[0, : n + 1].all()

    def test_frameless_speech_task_rejected(self):
        c = generate_corpus(SMALL, {"train": 4, "valid": 0, "test": 0}, with_frames=False)
        with pytest.raises(CorpusError, match="frames"):
            make_task_batch("asr", c.train, SMALL.vocab())


class TestPersistence:
    def test_round_trip(self, small_corpus, tmp_path):
        p = tmp_path / "corpus.tsv"
        save_corpus(small_corpus, p)
        loaded = load_corpus(p)
        assert loaded.counts() == small_corpus.counts()
        for a, b in zip(loaded.train, small_corpus.train):
            np.testing.assert_array_equal(a.src, b.src)
            np.testing.assert_array_equal(a.tgt, b.tgt)
            np.testing.assert_array_equal(a.frames, b.frames)  # bit-exact floats

    def test_truncated_file_is_error(self, small_corpus, tmp_path):
        p = tmp_path / "corpus.tsv"
        save_corpus(small_corpus, p)
        lines = p.read_text().splitlines()
        p.write_text("\n".join(lines[:-3]) + "\n")
        with pytest.raises(CorpusFormatError, match="truncated"):
            load_corpus(p)

    def test_malformed_line_reports_number(self, tmp_path):
        p = tmp_path / "corpus.tsv"
        p.write_text('manifest\t{}\ntriple\ttrain\t1 2\n')
        with pytest.raises(CorpusFormatError, match="line 2"):
            load_corpus(p)

    def test_frame_dim_mismatch_warns(self, small_corpus, tmp_path, caplog):
        p = tmp_path / "corpus.tsv"
        save_corpus(small_corpus, p)
        other = TaskSpec(src_vocab_size=16, tgt_vocab_size=16, frame_dim=8, seed=11)
        with caplog.at_level(logging.WARNING):
            load_corpus(p, expected_spec=other)
        assert any("frame_dim" in r.message for r in caplog.records)

"""Beam search vs exhaustive enumeration, BLEU oracle, simsearch, and PCA."""

import itertools
import math

import numpy as np
import pytest

from simcr.corpus import Vocab
from simcr.evaluate import (
    DecodeConfig,
    EvalError,
    EvalReport,
    beam_search,
    beam_search_hypotheses,
    beam_search_steps,
    corpus_bleu,
    decode_corpus,
    evaluate_model,
    export_representations,
    membership_rates,
    pca_2d,
    simsearch_accuracy,
    write_report,
)
from simcr.model import init_params

from factories import tiny_setup


class MarkovModel:
    """Hand-built scorer: fixed next-token log-probabilities per last token."""

    def __init__(self, table, vocab_size):
        self.table = {k: np.log(np.asarray(v, dtype=np.float64)) for k, v in table.items()}
        self.vocab_size = vocab_size

    def step(self, prefixes):
        out = np.empty((prefixes.shape[0], self.vocab_size))
        for i, row in enumerate(prefixes):
            out[i] = self.table[int(row[-1])]
        return out

    def sequence_logp(self, tokens, start):
        lp = 0.0
        prev = start
        for t in tokens:
            lp += float(self.table[prev][t])
            prev = t
        return lp


def exhaustive_best(model, start, eos, max_len, length_penalty):
    """Oracle: enumerate every sequence up to max_len and rank like the search."""
    best = None
    v = model.vocab_size
    for n in range(1, max_len + 1):
        for seq in itertools.product(range(v), repeat=n):
            if eos in seq[:-1]:
                continue  # eos can only terminate
            if n < max_len and seq[-1] != eos:
                continue  # shorter sequences must be eos-finalized
            lp = model.sequence_logp(seq, start)
            score = lp / len(seq) ** length_penalty
            if best is None or score > best[0] + 1e-12:
                best = (score, seq)
    return best


class TestBeamCore:
    # token 2 is eos in a 3-symbol toy vocabulary
    TOY = {
        0: [0.6, 0.3, 0.1],
        1: [0.1, 0.2, 0.7],
        9: [0.5, 0.45, 0.05],  # start state
    }

    def test_matches_exhaustive_argmax(self):
        # beam 2 recovers the true argmax over all sequences of length <= 4
        model = MarkovModel(self.TOY, 3)
        for lp_pen in (0.0, 1.0):
            hyps = beam_search_steps(model.step, [9], eos=2, beam_size=2,
                                     length_penalty=lp_pen, max_len=4)
            _, expected = exhaustive_best(model, 9, 2, 4, lp_pen)
            assert tuple(hyps[0].tokens) == expected, lp_pen

    def test_ranking_monotone(self):
        model = MarkovModel(self.TOY, 3)
        hyps = beam_search_steps(model.step, [9], eos=2, beam_size=3,
                                 length_penalty=1.0, max_len=4)
        scores = [h.normalized_score for h in hyps]
        assert scores == sorted(scores, reverse=True)

    def test_zero_penalty_scores_are_raw(self):
        model = MarkovModel(self.TOY, 3)
        hyps = beam_search_steps(model.step, [9], eos=2, beam_size=2,
                                 length_penalty=0.0, max_len=4)
        for h in hyps:
            assert h.normalized_score == h.log_prob

    def test_normalized_score_definition(self):
        model = MarkovModel(self.TOY, 3)
        for h in beam_search_steps(model.step, [9], eos=2, beam_size=3,
                                   length_penalty=1.3, max_len=4):
            assert h.normalized_score == pytest.approx(
                h.log_prob / len(h.tokens) ** 1.3)

    def test_invalid_beam(self):
        with pytest.raises(EvalError):
            DecodeConfig(beam_size=0)


class TestModelBeam:
    def test_beam_one_equals_greedy(self):
        # same token outputs from the batched greedy path and beam_size=1 search
        _, corpus, vocab, cfg, _ = tiny_setup()
        items = corpus.train[:6]
        for seed in (0, 1, 2):
            params = init_params(cfg, seed=seed)
            greedy = decode_corpus(params, cfg, vocab, items, "st", DecodeConfig(beam_size=1))
            for i, item in enumerate(items):
                hyp = beam_search(params, cfg, vocab, item.frames, DecodeConfig(beam_size=1))
                toks = hyp.tokens[:-1] if hyp.tokens and hyp.tokens[-1] == vocab.eos else hyp.tokens
                assert toks == greedy[i], f"seed {seed} item {i}"

    def test_beam_scores_monotone_on_model(self):
        _, corpus, vocab, cfg, _ = tiny_setup()
        params = init_params(cfg, seed=3)
        hyps = beam_search_hypotheses(params, cfg, vocab, corpus.train[0].frames,
                                      DecodeConfig(beam_size=4))
        scores = [h.normalized_score for h in hyps]
        assert scores == sorted(scores, reverse=True)


def bleu_oracle(hyps, refs):
    """Brute-force n-gram counter kept independent of the implementation."""
    import collections
    log_precisions = []
    for n in range(1, 5):
        match = 0
        total = 0
        for h, r in zip(hyps, refs):
            hgrams = [tuple(h[i:i + n]) for i in range(len(h) - n + 1)]
            rgrams = collections.Counter(tuple(r[i:i + n]) for i in range(len(r) - n + 1))
            seen = collections.Counter()
            for g in hgrams:
                total += 1
                seen[g] += 1
            for g, c in seen.items():
                match += min(c, rgrams[g])
        if total == 0 or match == 0:
            return 0.0
        log_precisions.append(math.log(match / total))
    hyp_len = sum(len(h) for h in hyps)
    ref_len = sum(len(r) for r in refs)
    if hyp_len == 0:
        return 0.0
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return 100.0 * bp * math.exp(sum(log_precisions) / 4.0)


class TestBleu:
    def test_identity_is_100(self):
        sents = [[1, 2, 3, 4, 5], [6, 7, 8, 9]]
        assert corpus_bleu(sents, sents) == pytest.approx(100.0)

    def test_hand_value_brevity(self):
        # all precisions 1, BP = exp(-1/4)
        got = corpus_bleu([[1, 2, 3, 4]], [[1, 2, 3, 4, 5]])
        assert got == pytest.approx(100.0 * math.exp(-0.25), abs=1e-6)
        assert got == pytest.approx(77.88, abs=0.01)

    def test_disjoint_vocab_is_zero(self):
        assert corpus_bleu([[1, 2, 3, 4]], [[5, 6, 7, 8]]) == 0.0

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(12)
        for trial in range(10):
            hyps, refs = [], []
            for _ in range(50):
                n = int(rng.integers(1, 12))
                refs.append(list(rng.integers(0, 8, size=n)))
                m = max(1, n + int(rng.integers(-2, 3)))
                if rng.random() < 0.3:
                    hyp = list(refs[-1])
                else:
                    hyp = list(rng.integers(0, 8, size=m))
                hyps.append(hyp)
            assert corpus_bleu(hyps, refs) == pytest.approx(bleu_oracle(hyps, refs), abs=1e-9)

    def test_errors(self):
        with pytest.raises(EvalError):
            corpus_bleu([], [])
        with pytest.raises(EvalError):
            corpus_bleu([[1]], [[1], [2]])
        with pytest.raises(EvalError):
            corpus_bleu([[1]], [[]])


class TestSimsearch:
    def test_identical_sets(self):
        x = np.random.default_rng(0).normal(size=(10, 4))
        assert simsearch_accuracy(x, x) == 1.0

    def test_swapped_pairs_zero(self):
        speech = np.array([[1.0, 0.0], [0.0, 1.0]])
        text = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert simsearch_accuracy(speech, text) == 0.0

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(12, 5))
        b = a + 0.05 * rng.normal(size=(12, 5))
        scales_a = rng.uniform(0.1, 10.0, size=(12, 1))
        scales_b = rng.uniform(0.1, 10.0, size=(12, 1))
        assert simsearch_accuracy(a, b) == simsearch_accuracy(a * scales_a, b * scales_b)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(15, 6))
        b = a + 0.3 * rng.normal(size=(15, 6))
        perm = rng.permutation(15)
        assert simsearch_accuracy(a, b) == pytest.approx(
            simsearch_accuracy(a[perm], b[perm]))

    def test_zero_norm_rejected(self):
        a = np.zeros((3, 2))
        with pytest.raises(EvalError):
            simsearch_accuracy(a, np.ones((3, 2)))


class TestPca:
    def test_2d_input_is_rotation(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(30, 2)) @ np.array([[2.0, 0.3], [0.1, 0.5]])
        coords, _, _ = pca_2d(x)
        d_before = np.linalg.norm(x[:, None] - x[None, :], axis=-1)
        d_after = np.linalg.norm(coords[:, None] - coords[None, :], axis=-1)
        np.testing.assert_allclose(d_before, d_after, atol=1e-9)

    def test_explained_variance_bound(self):
        # reconstruction error equals total variance minus the top-2 eigenvalues
        rng = np.random.default_rng(6)
        x = rng.normal(size=(40, 5)) * np.array([3.0, 2.0, 1.0, 0.5, 0.1])
        coords, top2, total = pca_2d(x)
        xc = x - x.mean(axis=0)
        # oracle: independent eigendecomposition of the 5x5 covariance
        vals = np.linalg.eigvalsh(xc.T @ xc / (x.shape[0] - 1))
        np.testing.assert_allclose(sorted(top2), sorted(vals)[-2:], atol=1e-9)
        residual = total - top2.sum()
        proj_var = (coords ** 2).sum() / (x.shape[0] - 1)
        np.testing.assert_allclose(total - proj_var, residual, atol=1e-9)


class TestReports:
    def test_export_row_count_and_report(self, tmp_path):
        _, corpus, vocab, cfg, _ = tiny_setup()
        params = init_params(cfg, seed=0)
        items = corpus.train[:4]
        out = export_representations(params, cfg, vocab, items, tmp_path / "reps.tsv")
        rows = [l for l in (tmp_path / "reps.tsv").read_text().splitlines()
                if not l.startswith("#")]
        assert len(rows) == 2 * len(items) == out["rows"]

        report = evaluate_model(params, cfg, vocab, items, ["st", "mt"],
                                DecodeConfig(beam_size=1), diagnostics=True)
        assert set(report.bleu) == {"st", "mt"}
        assert report.simsearch_accuracy is not None
        paths = write_report(report, tmp_path)
        assert (tmp_path / "report.json").exists()
        text = (tmp_path / "report.csv").read_text()
        assert "st," in text and "mt," in text

    def test_membership_rates(self):
        vocab = Vocab(4, 4)
        hyps = [[vocab.base_src, vocab.base_src + 1], [vocab.base_tgt, vocab.base_tgt + 2]]
        rates = membership_rates(hyps, vocab)
        assert rates["src"] == 0.5 and rates["tgt"] == 0.5

    def test_report_validates_ranges(self):
        with pytest.raises(EvalError):
            EvalReport(split="test", n_sentences=1, bleu={"st": 101.0})

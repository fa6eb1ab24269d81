import math

import pytest

from lightcap.errors import UsageError
from lightcap.metrics import (
    IdfTable,
    bleu4,
    cider,
    load_eval_file,
    make_corpus,
    tokenize_caption,
)


def corpus(*records):
    return make_corpus(
        [
            {"id": f"img{i}", "candidate": cand, "references": list(refs)}
            for i, (cand, refs) in enumerate(records)
        ]
    )


class TestTokenize:
    def test_lowercase_and_punctuation(self):
        assert tokenize_caption("A Dog, sits!") == ["a", "dog", "sits"]

    def test_numbers_kept(self):
        assert tokenize_caption("2 dogs") == ["2", "dogs"]


class TestBleu:
    def test_self_match_is_one(self):
        c = corpus(
            ("a dog sits on the mat", ["a dog sits on the mat"]),
            ("two birds fly over water", ["two birds fly over water"]),
        )
        assert bleu4(c) == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_is_zero(self):
        c = corpus(("xyzzy quux", ["a dog sits on the mat here now"]))
        assert bleu4(c) == 0.0

    def test_clipped_unigram_precision_hand_example(self):
        """Candidate "the the the cat" vs "the cat sat down": clipped
        unigram matches are the(1) + cat(1) out of 4."""
        c = corpus(("the the the cat", ["the cat sat down"]))
        matched = 0
        cand = ["the", "the", "the", "cat"]
        ref = {"the": 1, "cat": 1, "sat": 1, "down": 1}
        from collections import Counter

        for gram, count in Counter(cand).items():
            matched += min(count, ref.get(gram, 0))
        assert matched / len(cand) == 0.5
        # full BLEU is 0 here (no 4-gram match), which the metric must report
        assert bleu4(c) == 0.0

    def test_brevity_penalty(self):
        # candidate shorter than the closest reference gets penalized
        full = corpus(("a dog sits on the mat", ["a dog sits on the mat"]))
        short = corpus(("a dog sits on the", ["a dog sits on the mat"]))
        assert bleu4(full) > bleu4(short) > 0.0
        # hand value: p_n all 1 for the 5-token candidate, bp = exp(1 - 6/5)
        assert bleu4(short) == pytest.approx(math.exp(1.0 - 6.0 / 5.0), rel=1e-12)

    def test_corpus_permutation_invariant(self):
        a = corpus(
            ("a dog sits", ["a dog sits on the mat"]),
            ("two birds fly", ["two birds fly high", "birds fly"]),
            ("the red car", ["the red car parks", "a red car"]),
        )
        b = corpus(*reversed([
            ("a dog sits", ["a dog sits on the mat"]),
            ("two birds fly", ["two birds fly high", "birds fly"]),
            ("the red car", ["the red car parks", "a red car"]),
        ]))
        assert bleu4(a) == bleu4(b)

    def test_range(self):
        c = corpus(
            ("a dog sits on a mat", ["a dog sat on the mat today right"]),
            ("birds fly over the blue water", ["birds fly over the water"]),
        )
        assert 0.0 <= bleu4(c) <= 1.0

    def test_empty_corpus_rejected(self):
        with pytest.raises(UsageError):
            bleu4([])


class TestCider:
    def hand_corpus(self):
        # disjoint vocabularies, so every n-gram has document frequency 1
        return corpus(
            ("a red bird sits on a branch", ["a red bird sits on a branch"]),
            ("two dogs play with green balls", ["two dogs play with green balls"]),
        )

    def test_identical_candidate_scores_ten(self):
        """Hand derivation: idf = log 2 for every n-gram, candidate equals
        the only reference, so each cosine is 1, the length penalty is 1,
        the per-image score is 10, and so is the corpus mean."""
        assert cider(self.hand_corpus()) == pytest.approx(10.0, abs=1e-6)

    def test_disjoint_candidate_scores_zero(self):
        c = corpus(
            ("purple elephant dances", ["a red bird sits on a branch"]),
            ("two dogs play with green balls", ["two dogs play with green balls"]),
        )
        per_image = cider(c)
        only_match = cider(
            corpus(
                ("two dogs play with green balls", ["two dogs play with green balls"]),
                ("a red bird sits", ["a red bird sits"]),
            )
        )
        assert per_image == pytest.approx(only_match / 2.0 * 1.0, abs=1e-9)

    def test_permutation_invariant(self):
        records = [
            ("a dog sits", [["a dog sits on the mat"], ["the dog sits"]][0]),
            ("two birds fly", ["two birds fly high"]),
            ("the red car parks", ["the red car parks", "a red car parks"]),
        ]
        a = corpus(*records)
        b = corpus(*reversed(records))
        assert cider(a) == pytest.approx(cider(b), abs=1e-12)

    def test_single_image_needs_idf_table(self):
        solo = corpus(("a dog sits", ["a dog sits"]))
        with pytest.raises(UsageError):
            cider(solo)
        table = IdfTable(doc_count=2, frequencies={})
        assert cider(solo, idf=table) > 0.0

    def test_length_penalty_hand_value(self):
        """One-word-longer candidate with full 1-gram overlap: the gaussian
        factor exp(-1/72) shows up in the unigram term."""
        c = corpus(
            ("a dog", ["a dog sits"][:1]),
            ("blue boats float", ["blue boats float"]),
        )
        got = cider(c)
        # image 2 is exact: contributes 10; image 1: candidate misses "sits"
        # unigram: clipped dot over norms, bigram on "a dog" matches 1 of 2
        assert 0.0 < got <= 10.0

    def test_nonnegative(self):
        c = self.hand_corpus()
        assert cider(c) >= 0.0


def test_eval_file_roundtrip(tmp_path):
    path = tmp_path / "eval.jsonl"
    path.write_text(
        '{"id": "a", "candidate": "a dog sits here", '
        '"references": ["a dog sits here", "the dog sits here"]}\n'
        '{"id": "b", "candidate": "a blue boat floats", "references": ["a blue boat floats"]}\n'
    )
    entries = load_eval_file(path)
    assert len(entries) == 2
    assert entries[0].references == [["a", "dog", "sits", "here"], ["the", "dog", "sits", "here"]]
    assert bleu4(entries) > 0.0

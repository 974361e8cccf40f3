"""Text pipeline tests: tokenizer, vocabulary, encoding, dataset
loading and splitting."""

import json

import numpy as np
import pytest

from vroc.text import (
    BOS_ID,
    EOS_ID,
    NUM_TOKEN,
    PAD_ID,
    UNK_ID,
    URL_TOKEN,
    USER_TOKEN,
    Dataset,
    Example,
    Vocabulary,
    build_vocab,
    decode_ids,
    encode_tokens,
    load_dataset,
    pad_batch,
    split_holdout,
    split_leave_one_out,
    tokenize,
)


def make_example(i, event="ev", detection=None, stance=None, veracity=None, text=None):
    text = text if text is not None else f"tweet number {i}"
    return Example(id=str(i), text=text, tokens=tuple(tokenize(text)), event=event,
                   detection=detection, stance=stance, veracity=veracity)


class TestTokenize:
    def test_lowercase_and_punctuation_split(self):
        assert tokenize("Hostages KILLED!") == ["hostages", "killed", "!"]

    def test_url_and_mention_placeholders(self):
        assert tokenize("see http://t.co/x @bob") == ["see", URL_TOKEN, USER_TOKEN]

    def test_www_url(self):
        assert tokenize("www.example.com/x down") == [URL_TOKEN, "down"]

    def test_numbers_collapse(self):
        assert tokenize("4 dead, 3.5 injured") == [
            NUM_TOKEN, "dead", ",", NUM_TOKEN, "injured"]

    def test_hashtag_keeps_word(self):
        assert tokenize("#Ferguson burning") == ["ferguson", "burning"]

    def test_digit_leading_hashtag_stays_word(self):
        assert tokenize("#9news update") == ["9news", "update"]

    def test_digit_only_hashtag_is_number(self):
        assert tokenize("#1 trending") == [NUM_TOKEN, "trending"]

    def test_empty_text(self):
        assert tokenize("") == []
        assert tokenize("   ") == []

    def test_placeholders_pass_through(self):
        assert tokenize(f"{URL_TOKEN} {USER_TOKEN} {NUM_TOKEN}") == [
            URL_TOKEN, USER_TOKEN, NUM_TOKEN]

    def test_idempotent_over_synthetic_sample(self):
        """Re-tokenizing the space-joined output must reproduce it, over
        a 100-tweet sample mixing every token category."""
        rng = np.random.default_rng(20)
        fragments = [
            "Hostages KILLED!", "#9news", "#1", "#Sydneysiege", "@bob's",
            "http://t.co/abc123", "www.ex.co/y", "3,500 people", "3.5",
            "U.S. police", "can't confirm...", "BREAKING:", "2013 photo?",
            "so-called “facts”", "RT @alice", "@x", "over 9000",
            "email me", "#news_24", "50% off", "a.m.",
        ]
        for _ in range(100):
            k = int(rng.integers(2, 7))
            picks = rng.integers(0, len(fragments), size=k)
            tweet = " ".join(fragments[int(j)] for j in picks)
            once = tokenize(tweet)
            twice = tokenize(" ".join(once))
            assert twice == once, f"not idempotent on {tweet!r}: {once} != {twice}"


class TestVocabulary:
    def test_special_ids(self):
        v = Vocabulary(["alpha", "beta"])
        assert len(v) == 6
        assert v.id_of("alpha") == 4
        assert v.id_of("beta") == 5
        assert v.token_of(PAD_ID) == "⟨pad⟩"

    def test_unknown_token_maps_to_unk(self):
        v = Vocabulary(["alpha"])
        assert v.id_of("missing") == UNK_ID

    def test_token_of_out_of_range(self):
        v = Vocabulary(["alpha"])
        with pytest.raises(ValueError, match="out of range"):
            v.token_of(99)

    def test_duplicate_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            Vocabulary(["alpha", "alpha"])

    def test_save_load_roundtrip(self, tmp_path):
        v = Vocabulary(["zebra", "alpha", "nine9"])
        path = tmp_path / "vocab.txt"
        v.save(path)
        loaded = Vocabulary.load(path)
        assert len(loaded) == len(v)
        for token in ("zebra", "alpha", "nine9"):
            assert loaded.id_of(token) == v.id_of(token)

    def test_file_line_number_is_id_minus_four(self, tmp_path):
        v = Vocabulary(["first", "second"])
        path = tmp_path / "vocab.txt"
        v.save(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines == ["first", "second"]
        assert v.id_of("first") == 4
        assert v.id_of("second") == 5


class TestBuildVocab:
    def test_min_freq_two_drops_singletons(self):
        v = build_vocab(["a a b"], min_freq=2)
        assert len(v) == 5
        assert v.id_of("a") == 4
        assert v.id_of("b") == UNK_ID

    def test_min_freq_one_keeps_all(self):
        v = build_vocab(["a a b"], min_freq=1)
        assert "a" in v
        assert "b" in v

    def test_order_by_count_then_lexicographic(self):
        v = build_vocab(["b b c c a a a"], min_freq=1)
        assert v.id_of("a") == 4  # highest count
        assert v.id_of("b") == 5  # tie with c, earlier lexicographically
        assert v.id_of("c") == 6

    def test_shuffled_corpus_gives_identical_ids(self):
        rng = np.random.default_rng(21)
        docs = [f"word{i % 7} word{i % 3} filler" for i in range(20)]
        v1 = build_vocab(docs, min_freq=1)
        shuffled = list(docs)
        rng.shuffle(shuffled)
        v2 = build_vocab(shuffled, min_freq=1)
        assert len(v1) == len(v2)
        for i in range(len(v1)):
            assert v1.token_of(i) == v2.token_of(i)

    def test_empty_corpus_warns(self, caplog):
        with caplog.at_level("WARNING"):
            v = build_vocab([], min_freq=2)
        assert len(v) == 4
        assert any("specials only" in r.message for r in caplog.records)

    def test_accepts_pretokenized_lists(self):
        v = build_vocab([["x", "x"], ["y"]], min_freq=2)
        assert "x" in v
        assert "y" not in v

    def test_rejects_bad_min_freq(self):
        with pytest.raises(ValueError, match="min_freq"):
            build_vocab(["a"], min_freq=0)


class TestEncodeTokens:
    def test_two_known_tokens_make_four_ids(self):
        v = Vocabulary(["hello", "world"])
        ids = encode_tokens(["hello", "world"], v, max_len=10)
        assert ids == [BOS_ID, 4, 5, EOS_ID]

    def test_oov_becomes_unk(self):
        v = Vocabulary([])
        ids = encode_tokens(["zzz", "qqq"], v, max_len=10)
        assert ids == [BOS_ID, UNK_ID, UNK_ID, EOS_ID]

    def test_truncation_keeps_bos_and_eos(self):
        v = Vocabulary(["w"])
        ids = encode_tokens(["w"] * 100, v, max_len=34)
        assert len(ids) == 34
        assert ids[0] == BOS_ID
        assert ids[-1] == EOS_ID
        assert all(i == 4 for i in ids[1:-1])

    def test_max_len_below_three_rejected(self):
        v = Vocabulary([])
        with pytest.raises(ValueError, match="max_len"):
            encode_tokens(["a"], v, max_len=2)

    def test_roundtrip_recovers_in_vocab_tokens(self):
        v = Vocabulary(["alpha", "beta", "gamma"])
        tokens = ["beta", "gamma", "alpha"]
        assert decode_ids(encode_tokens(tokens, v, max_len=10), v) == tokens


class TestPadBatch:
    def test_shapes_and_mask(self):
        ids, mask = pad_batch([[2, 5, 3], [2, 3]])
        np.testing.assert_array_equal(ids, [[2, 5, 3], [2, 3, PAD_ID]])
        np.testing.assert_array_equal(mask, [[1.0, 1.0, 1.0], [1.0, 1.0, 0.0]])

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            pad_batch([])


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def good_row(i, **labels):
    return {"id": str(i), "text": f"tweet {i}", "event": labels.pop("event", "ev"),
            "labels": labels}


class TestLoadDataset:
    def test_loads_examples_with_labels(self, tmp_path):
        path = tmp_path / "data.jsonl"
        write_jsonl(path, [
            good_row(1, detection="Rumor", stance="Deny", veracity="False"),
            good_row(2, detection="Nonrumor"),
        ])
        ds = load_dataset(path)
        assert len(ds) == 2
        assert ds[0].detection == "Rumor"
        assert ds[0].stance == "Deny"
        assert ds[0].veracity == "False"
        assert ds[1].stance is None
        assert ds.class_counts("detection") == {"Rumor": 1, "Nonrumor": 1}

    def test_one_malformed_line_among_ten(self, tmp_path):
        path = tmp_path / "data.jsonl"
        rows = [good_row(i) for i in range(9)]
        with open(path, "w", encoding="utf-8") as fh:
            for row in rows[:4]:
                fh.write(json.dumps(row) + "\n")
            fh.write("{not json\n")
            for row in rows[4:]:
                fh.write(json.dumps(row) + "\n")
        ds = load_dataset(path)
        assert len(ds) == 9
        assert len(ds.skipped) == 1
        assert ds.skipped[0][0] == 5  # 1-based line number

    def test_unknown_label_names_the_value(self, tmp_path):
        path = tmp_path / "data.jsonl"
        write_jsonl(path, [good_row(1, stance="Maybe")])
        ds = load_dataset(path)
        assert len(ds) == 0
        assert "unknown stance label 'Maybe'" in ds.skipped[0][1]

    def test_missing_field_skipped(self, tmp_path):
        path = tmp_path / "data.jsonl"
        write_jsonl(path, [{"id": "1", "event": "ev", "labels": {}}])
        ds = load_dataset(path)
        assert len(ds) == 0
        assert "text" in ds.skipped[0][1]

    def test_empty_file_warns(self, tmp_path, caplog):
        path = tmp_path / "data.jsonl"
        path.write_text("")
        with caplog.at_level("WARNING"):
            ds = load_dataset(path)
        assert len(ds) == 0
        assert any("empty dataset" in r.message for r in caplog.records)

    def test_order_stable(self, tmp_path):
        path = tmp_path / "data.jsonl"
        write_jsonl(path, [good_row(i) for i in (3, 1, 2)])
        first = load_dataset(path)
        second = load_dataset(path)
        assert [ex.id for ex in first] == ["3", "1", "2"]
        assert first.examples == second.examples

    def test_null_labels_accepted(self, tmp_path):
        path = tmp_path / "data.jsonl"
        write_jsonl(path, [{"id": "1", "text": "t", "event": "ev",
                            "labels": {"detection": None, "stance": None,
                                       "veracity": None}}])
        ds = load_dataset(path)
        assert len(ds) == 1
        assert ds[0].detection is None


class TestSplitLeaveOneOut:
    EVENTS = ("sydneysiege", "germanwings", "ferguson", "charliehebdo", "ottawashooting")

    def make_dataset(self):
        examples = []
        for e, event in enumerate(self.EVENTS):
            for i in range(3 + e):
                examples.append(make_example(f"{event}-{i}", event=event))
        return Dataset(tuple(examples))

    def test_exact_partition_for_every_event(self):
        ds = self.make_dataset()
        for event in self.EVENTS:
            train, test = split_leave_one_out(ds, event)
            assert all(ex.event == event for ex in test)
            assert all(ex.event != event for ex in train)
            assert len(train) + len(test) == len(ds)
            ids = {ex.id for ex in train} | {ex.id for ex in test}
            assert len(ids) == len(ds)

    def test_unknown_event_lists_available(self):
        ds = self.make_dataset()
        with pytest.raises(ValueError, match="sydneysiege"):
            split_leave_one_out(ds, "nosuchevent")

    def test_single_event_rejected(self):
        ds = Dataset(tuple(make_example(i, event="only") for i in range(4)))
        with pytest.raises(ValueError, match="single event"):
            split_leave_one_out(ds, "only")


class TestSplitHoldout:
    def test_ten_percent_of_hundred(self):
        ds = Dataset(tuple(make_example(i) for i in range(100)))
        train, test = split_holdout(ds, 0.1, seed=0)
        assert len(test) == 10
        assert len(train) == 90

    def test_stratified_five_plus_five(self):
        examples = [make_example(i, detection="Rumor") for i in range(50)]
        examples += [make_example(50 + i, detection="Nonrumor") for i in range(50)]
        ds = Dataset(tuple(examples))
        train, test = split_holdout(ds, 0.1, seed=0, label_of=lambda ex: ex.detection)
        counts = {}
        for ex in test:
            counts[ex.detection] = counts.get(ex.detection, 0) + 1
        assert counts == {"Rumor": 5, "Nonrumor": 5}

    def test_ratio_within_one_example(self):
        rng = np.random.default_rng(22)
        labels = ["Support", "Deny", "Comment", "Query"]
        examples = [make_example(i, stance=labels[int(rng.integers(0, 4))])
                    for i in range(200)]
        ds = Dataset(tuple(examples))
        _, test = split_holdout(ds, 0.25, seed=1, label_of=lambda ex: ex.stance)
        totals = ds.class_counts("stance")
        got = Dataset(test.examples).class_counts("stance")
        for lab, n in totals.items():
            assert abs(got.get(lab, 0) - n * 0.25) <= 1.0

    def test_same_seed_reproduces_split(self):
        ds = Dataset(tuple(make_example(i) for i in range(20)))
        a = split_holdout(ds, 0.25, seed=7)
        b = split_holdout(ds, 0.25, seed=7)
        assert [ex.id for ex in a[1]] == [ex.id for ex in b[1]]

    def test_different_seeds_differ(self):
        ds = Dataset(tuple(make_example(i) for i in range(20)))
        a = split_holdout(ds, 0.25, seed=0)
        b = split_holdout(ds, 0.25, seed=1)
        assert {ex.id for ex in a[1]} != {ex.id for ex in b[1]}

    def test_tiny_class_stays_in_train(self, caplog):
        examples = [make_example(i, detection="Rumor") for i in range(30)]
        examples.append(make_example(99, detection="Nonrumor"))
        ds = Dataset(tuple(examples))
        with caplog.at_level("WARNING"):
            train, test = split_holdout(ds, 0.2, seed=0,
                                        label_of=lambda ex: ex.detection)
        assert all(ex.detection == "Rumor" for ex in test)
        assert any("kept in train" in r.message for r in caplog.records)

    def test_bad_fraction_rejected(self):
        ds = Dataset(tuple(make_example(i) for i in range(4)))
        for fraction in (0.0, 1.0, -0.5):
            with pytest.raises(ValueError, match="fraction"):
                split_holdout(ds, fraction, seed=0)


class TestExampleAndDataset:
    def test_label_dispatch(self):
        ex = make_example(1, detection="Rumor", stance="Query", veracity="True")
        assert ex.label("detection") == "Rumor"
        assert ex.label("stance") == "Query"
        assert ex.label("veracity") == "True"
        with pytest.raises(ValueError, match="unknown task"):
            ex.label("sentiment")

    def test_events_preserve_first_seen_order(self):
        ds = Dataset(tuple(make_example(i, event=e)
                           for i, e in enumerate(["b", "a", "b", "c"])))
        assert ds.events == ["b", "a", "c"]

    def test_class_counts_match_recount(self):
        examples = [make_example(i, veracity="True") for i in range(3)]
        examples += [make_example(3 + i, veracity="Unverified") for i in range(2)]
        examples.append(make_example(9))
        ds = Dataset(tuple(examples))
        assert ds.class_counts("veracity") == {"True": 3, "Unverified": 2}

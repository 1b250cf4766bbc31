import random

import pytest

from builders import make_profile, make_respondent, make_sample
from dvmap.archetype import ConsensusRecord, extract_consensus
from dvmap.benchmark import (
    BenchmarkError,
    CorpusSample,
    SplitSpec,
    build_splits,
    make_counterfactual_pairs,
    profile_fingerprint,
    split_lookup,
)
from dvmap.synthetic import SyntheticSpec, generate_synthetic
from dvmap.survey import parse_survey

SPEC = SplitSpec(
    train_countries=("USA", "DEU"),
    test_countries=("JPN",),
    train_questions=("Q1", "Q27"),
    cross_value_questions=("Q8",),
    demo_holdout_ratio=0.3,
    seed=11,
)


def record(country="USA", qid="Q1", answer_index=0, codebook=None, **profile_overrides):
    q = codebook.question(qid)
    return ConsensusRecord(
        profile=make_profile(country=country, **profile_overrides),
        question_id=qid,
        answer_label=q.options[answer_index],
        answer_index=answer_index,
        support=2,
    )


class TestFingerprint:
    def test_shape_and_stability(self):
        fp = profile_fingerprint(make_profile())
        assert len(fp) == 16
        int(fp, 16)  # hex
        assert fp == profile_fingerprint(make_profile())

    def test_sensitive_to_every_attribute(self):
        base = make_profile()
        fp = profile_fingerprint(base)
        assert profile_fingerprint(base.replace(income_bracket="High")) != fp
        assert profile_fingerprint(base.replace(gender="Male")) != fp

    def test_frozen_value(self):
        # The fingerprint feeds sample ids, which are artifact contract;
        # an accidental change to the hashing would silently remap corpora.
        assert profile_fingerprint(make_profile()) == profile_fingerprint(
            make_profile().replace())


class TestSplitSpec:
    def test_country_overlap_rejected(self):
        with pytest.raises(BenchmarkError, match="USA"):
            SplitSpec(train_countries=("USA",), test_countries=("USA",)).validate()

    def test_question_overlap_rejected(self):
        with pytest.raises(BenchmarkError, match="Q1"):
            SplitSpec(train_questions=("Q1",), cross_value_questions=("Q1",)).validate()

    def test_ratio_bounds(self):
        with pytest.raises(BenchmarkError):
            SplitSpec(demo_holdout_ratio=1.0).validate()
        SplitSpec(demo_holdout_ratio=0.0).validate()


class TestBuildSplits:
    def test_routing_matrix(self, codebook):
        records = [
            record("USA", "Q1", codebook=codebook),
            record("USA", "Q8", codebook=codebook),
            record("JPN", "Q1", codebook=codebook),
            record("JPN", "Q8", codebook=codebook),    # quarantined
            record("FRA", "Q1", codebook=codebook),    # unlisted country
            record("USA", "Q46", codebook=codebook),   # unlisted question
        ]
        bundle = build_splits(records, SPEC, codebook)
        by_split = {name: {(s.profile.country, s.question["id"]) for s in samples}
                    for name, samples in bundle.splits.items()}
        assert by_split["cross_country"] == {("JPN", "Q1")}
        assert by_split["cross_value"] == {("USA", "Q8")}
        assert by_split["train"] | by_split["cross_demo"] == {("USA", "Q1")}
        dropped = bundle.meta["dropped"]
        assert dropped["quarantined_test_country"] == 1
        assert dropped["unlisted_country"] == 1
        assert dropped["unlisted_question"] == 1

    def test_profile_holdout_moves_whole_profiles(self, codebook):
        # All of one profile's train-question records must land together.
        # 3, 2, and 5 are coprime, so i in 0..29 hits each combo exactly once.
        records = []
        for i in range(30):
            prof_kw = {"income_bracket": ["Low", "Middle", "High"][i % 3],
                       "gender": ["Male", "Female"][i % 2],
                       "life_stage": ["Adolescence", "Young Adulthood", "Middle Adulthood",
                                      "Late Adulthood", "Older Adulthood"][i % 5]}
            for qid in ("Q1", "Q27"):
                records.append(record("USA", qid, codebook=codebook, **prof_kw))
        bundle = build_splits(records, SPEC, codebook)
        train_keys = {s.profile.as_tuple() for s in bundle.splits["train"]}
        demo_keys = {s.profile.as_tuple() for s in bundle.splits["cross_demo"]}
        assert train_keys.isdisjoint(demo_keys)
        assert bundle.splits["cross_demo"], "holdout at 30% of 30 profiles should not be empty"

    def test_zero_ratio_empties_cross_demo(self, codebook):
        records = [record("USA", "Q1", codebook=codebook)]
        spec = SplitSpec(train_countries=("USA",), test_countries=("JPN",),
                         train_questions=("Q1",), cross_value_questions=("Q8",),
                         demo_holdout_ratio=0.0)
        bundle = build_splits(records, spec, codebook)
        assert bundle.splits["cross_demo"] == []
        assert len(bundle.splits["train"]) == 1

    def test_samples_sorted_by_id_and_round_trip(self, codebook):
        records = [record("USA", "Q1", answer_index=i % 4, codebook=codebook,
                          gender=["Male", "Female"][i % 2],
                          religion=["No religion", "Protestant"][i // 2 % 2])
                   for i in range(4)]
        bundle = build_splits(records, SPEC, codebook)
        for samples in bundle.splits.values():
            ids = [s.sample_id for s in samples]
            assert ids == sorted(ids)
            for s in samples:
                assert CorpusSample.from_json(s.to_json()) == s

    def test_sample_id_embeds_fingerprint_and_question(self, codebook):
        records = [record("USA", "Q1", codebook=codebook)]
        bundle = build_splits(records, SPEC, codebook)
        [sample] = [s for split in bundle.splits.values() for s in split]
        fp, qid = sample.sample_id.rsplit("-", 1)
        assert qid == "Q1"
        assert fp == profile_fingerprint(sample.profile)

    def test_duplicate_record_keys_rejected(self, codebook):
        records = [record("USA", "Q1", codebook=codebook),
                   record("USA", "Q1", answer_index=1, codebook=codebook)]
        with pytest.raises(BenchmarkError, match="duplicate"):
            build_splits(records, SPEC, codebook)

    def test_seed_changes_holdout_but_not_membership(self, codebook):
        records = []
        for i in range(30):
            records.append(record("USA", "Q1", codebook=codebook,
                                  life_stage=["Adolescence", "Young Adulthood", "Middle Adulthood",
                                              "Late Adulthood", "Older Adulthood"][i % 5],
                                  income_bracket=["Low", "Middle", "High"][i % 3],
                                  gender=["Male", "Female"][i // 15]))
        seen = set()
        for seed in range(6):
            bundle = build_splits(records, SplitSpec(
                train_countries=("USA",), test_countries=("JPN",),
                train_questions=("Q1",), cross_value_questions=("Q8",),
                demo_holdout_ratio=0.4, seed=seed), codebook)
            train = {s.sample_id for s in bundle.splits["train"]}
            demo = {s.sample_id for s in bundle.splits["cross_demo"]}
            assert train.isdisjoint(demo)
            assert len(train) + len(demo) == 30
            seen.add(frozenset(demo))
        assert len(seen) > 1, "different seeds should carve different holdouts"


class TestDisjointnessProperty:
    def test_seeded_synthetic_runs(self, codebook):
        # Condensed version of the acceptance sweep.
        for seed in range(10):
            spec = SyntheticSpec(
                countries=("USA", "DEU", "JPN", "MEX"),
                questions=("Q1", "Q27", "Q8"),
                n_profiles=25,
                respondents_per_profile=2,
            )
            header, rows = generate_synthetic(spec, codebook, seed=seed)
            respondents, _ = parse_survey([dict(zip(header, r)) for r in rows], codebook)
            records, _ = extract_consensus(respondents, codebook)
            bundle = build_splits(records, SplitSpec(seed=seed), codebook)
            train_profiles = {s.profile.as_tuple() for s in bundle.splits["train"]}
            demo_profiles = {s.profile.as_tuple() for s in bundle.splits["cross_demo"]}
            assert train_profiles.isdisjoint(demo_profiles)
            assert all(s.profile.country in SplitSpec().test_countries
                       for s in bundle.splits["cross_country"])
            assert all(s.question["id"] in SplitSpec().cross_value_questions
                       for s in bundle.splits["cross_value"])


class TestCounterfactualPairs:
    def _samples(self, codebook):
        samples = []
        brackets = ["Low"] * 4 + ["High"] * 3 + ["Middle"] * 2
        stages = ["Adolescence", "Young Adulthood", "Middle Adulthood",
                  "Late Adulthood", "Older Adulthood"]
        for i, bracket in enumerate(brackets):
            prof = make_profile(income_bracket=bracket, life_stage=stages[i % 5],
                                gender=["Male", "Female"][i % 2])
            samples.append(make_sample(f"{profile_fingerprint(prof)}-Q1", "Q1",
                                       truth_index=i % 4, profile=prof))
        return samples

    def test_low_high_flip_counts(self, codebook):
        pairs = make_counterfactual_pairs(self._samples(codebook))
        assert len(pairs) == 7          # 4 Low + 3 High; Middle has no opposite
        for pair in pairs:
            assert pair.flipped_attribute == "income_bracket"
            # Perturbed ids are content-addressed from the flipped profile.
            assert pair.perturbed.sample_id == (
                f"{profile_fingerprint(pair.perturbed.profile)}-Q1-cf")
            assert pair.perturbed.sample_id != pair.original.sample_id
            assert {pair.original.profile.income_bracket,
                    pair.perturbed.profile.income_bracket} == {"Low", "High"}
            # Only the flipped attribute moves; the question and truth stay put.
            assert pair.perturbed.truth_index == pair.original.truth_index
            assert pair.perturbed.profile.replace(income_bracket="X") == \
                pair.original.profile.replace(income_bracket="X")

    def test_custom_attribute(self, codebook):
        samples = self._samples(codebook)
        pairs = make_counterfactual_pairs(samples, attribute="gender",
                                          values=("Male", "Female"))
        assert len(pairs) == len(samples)
        assert all(p.flipped_attribute == "gender" for p in pairs)

    def test_unknown_attribute_rejected(self, codebook):
        with pytest.raises(BenchmarkError):
            make_counterfactual_pairs(self._samples(codebook), attribute="shoe_size")


def test_split_lookup(codebook):
    a = make_sample("id-a-Q1", "Q1", 0)
    b = make_sample("id-b-Q1", "Q1", 1)
    lookup = split_lookup({"train": [a], "cross_demo": [b]})
    assert lookup["id-a-Q1"] is a
    assert lookup["id-b-Q1"] is b

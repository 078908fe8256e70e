import collections
import math
import random

import pytest
from hypothesis import given, strategies as st

from oracles.selection import expected_candidates, scan_count
from porch.consensus import (
    BadConfig,
    BadDigest,
    BadRange,
    CountReport,
    DecisionKind,
    DuplicateNode,
    EligibilityConfig,
    EmptyTally,
    RandomChallenge,
    build_tally,
    choose_eligible,
    count_occurrences,
    generate_challenge,
    make_report,
    resolve,
    verify_report,
)
from porch.dataset import load_dataset, sample_cycle

hex_digest = st.text("0123456789abcdef", min_size=64, max_size=64)
RELAYS = ["R1", "R2", "R3", "R4"]


class TestChallenge:
    def test_degenerate_range(self, rng):
        assert generate_challenge(rng, 7, 7).value == 7
        assert generate_challenge(rng, 7, 7).rendered == "7"

    def test_seeded_determinism(self):
        a, b = random.Random(5), random.Random(5)
        assert [generate_challenge(a).value for _ in range(50)] == [generate_challenge(b).value for _ in range(50)]

    def test_bad_range(self, rng):
        with pytest.raises(BadRange):
            generate_challenge(rng, 5, 4)

    def test_uniform_digits(self):
        rng = random.Random(11)
        freq = collections.Counter(generate_challenge(rng, 0, 9).value for _ in range(10_000))
        sigma = math.sqrt(10_000 * 0.1 * 0.9)
        assert set(freq) == set(range(10))
        assert all(abs(freq[d] - 1000) <= 3 * sigma for d in range(10))

    def test_rendering_has_no_leading_zeros(self):
        assert RandomChallenge(0).rendered == "0"
        assert RandomChallenge(40).rendered == "40"


class TestCounting:
    @pytest.mark.parametrize("digest, challenge, expected", [
        ("abcdef", 7, 0),
        ("777", 77, 1),
        ("17a71b7", 7, 3),
        ("0000", 0, 4),
        ("1010101", 101, 2),
    ])
    def test_examples(self, digest, challenge, expected):
        assert count_occurrences(digest, RandomChallenge(challenge)) == expected
        assert scan_count(digest, str(challenge)) == expected

    @pytest.mark.parametrize("digest", ["ABCDEF", "xyz", "", "12 34"])
    def test_bad_digest(self, digest):
        with pytest.raises(BadDigest):
            count_occurrences(digest, RandomChallenge(1))

    @given(hex_digest, st.integers(0, 999))
    def test_matches_scan_and_bound(self, digest, value):
        c = RandomChallenge(value)
        n = count_occurrences(digest, c)
        assert n == scan_count(digest, c.rendered)
        assert n <= 64 // len(c.rendered)


class TestTally:
    def test_sorted_with_name_tiebreak(self):
        t = build_tally({"R1": 3, "R2": 1, "R3": 3, "R4": 0})
        assert t.sorted == (("R1", 3), ("R3", 3), ("R2", 1), ("R4", 0))
        assert t.largest_count_multiplicity == 2
        assert t.decision.kind is DecisionKind.RANDOM_AMONG
        assert t.decision.candidates == ("R1", "R3")

    def test_all_zero(self):
        t = build_tally({"R1": 0, "R2": 0})
        assert t.largest_count_multiplicity == 2 and t.top_count == 0
        assert t.decision.candidates == ("R1", "R2")

    def test_singleton(self):
        t = build_tally({"R1": 5})
        assert t.largest_count_multiplicity == 1
        assert t.decision.kind is DecisionKind.UNIQUE

    def test_errors(self):
        with pytest.raises(EmptyTally):
            build_tally([])
        with pytest.raises(DuplicateNode):
            build_tally([CountReport("R1", "a", 1), CountReport("R1", "b", 2)])

    def test_tie_from_all(self):
        t = build_tally({"R1": 3, "R2": 1, "R3": 3}, tie_from_all=True)
        assert t.decision.candidates == ("R1", "R2", "R3")

    @given(st.dictionaries(st.sampled_from([f"R{i}" for i in range(1, 9)]), st.integers(0, 20), min_size=1))
    def test_invariants_and_agreement(self, counts):
        t = build_tally(counts)
        assert sorted(t.sorted) == sorted(counts.items())
        assert all(a[1] >= b[1] for a, b in zip(t.sorted, t.sorted[1:]))
        assert t.largest_count_multiplicity == sum(1 for c in counts.values() if c == t.top_count)
        # another node receiving the same reports in another order derives the same tally
        shuffled = dict(sorted(counts.items(), key=lambda kv: random.Random(len(kv[0])).random()))
        assert build_tally(shuffled) == t


class TestResolve:
    def test_unique_max(self, rng):
        assert resolve(build_tally({"R2": 4, "R1": 1, "R3": 0}), rng) == "R2"

    def test_unique_max_ignores_rng(self):
        t = build_tally({"R2": 4, "R1": 1, "R3": 0})
        picks = {resolve(t, random.Random(s)) for s in range(50)}
        assert picks == {"R2"}

    def test_tie_draws_among_tied(self):
        t = build_tally({"R1": 3, "R3": 3, "R2": 1})
        rng = random.Random(2)
        freq = collections.Counter(resolve(t, rng) for _ in range(4000))
        assert set(freq) == {"R1", "R3"}
        assert abs(freq["R1"] - 2000) <= 3 * math.sqrt(4000 * 0.25)

    def test_zero_draws_among_all(self):
        t = build_tally(dict.fromkeys(RELAYS, 0))
        rng = random.Random(3)
        freq = collections.Counter(resolve(t, rng) for _ in range(4000))
        assert set(freq) == set(RELAYS)
        assert all(abs(freq[n] - 1000) <= 3 * math.sqrt(4000 * 0.25 * 0.75) for n in RELAYS)

    @given(st.dictionaries(st.sampled_from(RELAYS + ["R5", "R6"]), st.integers(0, 8), min_size=2), st.integers())
    def test_matches_brute_force(self, counts, seed):
        kind, candidates = expected_candidates(counts)
        t = build_tally(counts)
        assert (t.decision.kind is DecisionKind.UNIQUE) == (kind == "unique")
        assert set(t.decision.candidates) == candidates
        assert resolve(t, random.Random(seed)) in candidates


class TestVerifyReport:
    @pytest.fixture
    def data(self, dataset):
        return sample_cycle(dataset, 3, 0)["R2"]

    def test_honest(self, data):
        c = RandomChallenge(4)
        assert verify_report(make_report(data, c), data, c)

    def test_inflated(self, data):
        c = RandomChallenge(4)
        r = make_report(data, c)
        assert not verify_report(CountReport(r.node, r.digest, r.count + 1), data, c)

    def test_foreign_digest(self, data, dataset):
        c = RandomChallenge(4)
        other = make_report(sample_cycle(dataset, 3, 0)["R3"], c)
        assert not verify_report(CountReport("R2", other.digest, other.count), data, c)

    @given(st.integers(0, 9), st.integers(-5, 5), st.integers(0, 63))
    def test_any_alteration_caught(self, value, delta, flip_at):
        data = sample_cycle(load_dataset(), 3, 0)["R2"]
        c = RandomChallenge(value)
        r = make_report(data, c)
        digest = r.digest
        if delta == 0:
            # leave the count alone and change one digest character instead
            ch = digest[flip_at]
            digest = digest[:flip_at] + ("0" if ch != "0" else "1") + digest[flip_at + 1:]
        assert not verify_report(CountReport(r.node, digest, r.count + delta), data, c)


class TestEligibility:
    def test_all(self, rng):
        assert choose_eligible(EligibilityConfig(4, 4), ["R3", "R1", "R4", "R2"], rng) == RELAYS

    def test_seeded_singleton(self):
        a = choose_eligible(EligibilityConfig(1, 4), RELAYS, random.Random(9))
        assert len(a) == 1
        assert a == choose_eligible(EligibilityConfig(1, 4), RELAYS, random.Random(9))

    def test_bad_config(self, rng):
        with pytest.raises(BadConfig):
            EligibilityConfig(5, 4)
        with pytest.raises(BadConfig):
            EligibilityConfig(0, 4)
        with pytest.raises(BadConfig):
            choose_eligible(EligibilityConfig(2, 3), RELAYS, rng)

    def test_uniform_subsets(self):
        rng = random.Random(21)
        freq = collections.Counter()
        for _ in range(10_000):
            chosen = choose_eligible(EligibilityConfig(2, 4), RELAYS, rng)
            assert chosen == sorted(chosen) and len(set(chosen)) == 2
            freq.update(chosen)
        sigma = math.sqrt(10_000 * 0.5 * 0.5)
        assert all(abs(freq[n] - 5000) <= 3 * sigma for n in RELAYS)

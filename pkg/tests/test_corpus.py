import json
import random
from datetime import date

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from concernkit.corpus import (
    Corpus,
    Domain,
    StratumKey,
    filter_corpus,
    load_catalog,
    parse_posts,
    serialize_posts,
    stratified_sample,
    window_text,
)
from concernkit.errors import ConfigError, NotFound
from conftest import make_post


def record(**over):
    base = {"id": "a", "subreddit": "r", "created_utc": 1_600_000_000, "title": "t", "body": "b",
            "upvotes": 1, "upvote_ratio": 0.9, "num_comments": 2}
    base.update(over)
    return json.dumps(base)


def test_one_valid_line():
    c = parse_posts([record()])
    assert len(c.posts) == 1 and c.errors == ()


def test_missing_created_utc_names_field():
    line = json.loads(record())
    del line["created_utc"]
    c = parse_posts([json.dumps(line)])
    assert c.posts == ()
    assert len(c.errors) == 1
    assert c.errors[0].field == "created_utc"
    assert c.errors[0].line == 1


def test_duplicate_id():
    c = parse_posts([record(id="x"), record(id="x", title="other")])
    assert len(c.posts) == 1
    assert len(c.errors) == 1 and "duplicate" in c.errors[0].message and c.errors[0].line == 2


@pytest.mark.parametrize("over,field", [
    ({"upvote_ratio": 1.5}, "upvote_ratio"),
    ({"upvotes": -1}, "upvotes"),
    ({"created_utc": 0}, "created_utc"),
    ({"id": ""}, "id"),
    ({"title": 3}, "title"),
])
def test_field_validation(over, field):
    c = parse_posts([record(**over)])
    assert c.posts == () and c.errors[0].field == field


def test_bad_json_kept_as_error_with_line_number():
    c = parse_posts([record(id="a"), "{not json", record(id="b")])
    assert [p.id for p in c.posts] == ["a", "b"]
    assert c.errors[0].line == 2


@given(st.lists(st.fixed_dictionaries({
    "title": st.text(max_size=30),
    "body": st.text(max_size=60),
    "created_utc": st.integers(1, 2_000_000_000),
    "upvotes": st.integers(0, 10**6),
    "upvote_ratio": st.floats(0, 1),
    "num_comments": st.integers(0, 10**5),
}), max_size=8))
def test_parse_serialize_roundtrip(items):
    posts = [make_post(id=f"id{i}", **d) for i, d in enumerate(items)]
    text = serialize_posts(posts)
    again = parse_posts(text.splitlines())
    assert list(again.posts) == posts and again.errors == ()
    assert serialize_posts(again.posts) == text


def test_window_middle_of_body():
    body = "x" * 500 + "Zelda" + "y" * 495
    post = make_post(title="", body=body)
    # text is "\n" + body, so the keyword sits at offset 501 of the searched text
    w = window_text(post, "zelda")
    start = 501 - 300
    assert w.text == post.text[start:501 + 5 + 300]
    assert len(w.text) == 300 + 5 + 300


def test_window_offsets_exact_with_title_only():
    text = "a" * 500 + "KEY" + "b" * 497
    post = make_post(title=text, body="")
    w = window_text(post, "key", radius=300)
    assert w.text == text[200:803]


def test_window_keyword_at_start():
    post = make_post(title="Zelda rocks", body="z" * 900)
    w = window_text(post, "Zelda")
    assert w.text.startswith("Zelda") and len(w.text) == 5 + 300


def test_window_absent_keyword():
    with pytest.raises(NotFound):
        window_text(make_post(title="hello", body="world"), "Zelda")


def test_window_counts_code_points():
    post = make_post(title="é" * 10 + "app" + "ü" * 10, body="")
    w = window_text(post, "app", radius=4)
    assert w.text == "éééé" + "app" + "üüüü"


@settings(max_examples=200)
@given(st.text(max_size=200), st.text(min_size=1, max_size=8, alphabet="abcXYZ"), st.text(max_size=200),
       st.integers(0, 400))
def test_window_contains_keyword_and_respects_bound(left, kw, right, radius):
    post = make_post(title=left + kw + right, body="")
    w = window_text(post, kw, radius)
    assert kw.lower() in w.text.lower()
    assert len(w.text) <= len(kw) + 2 * radius


# -- catalog and filter ------------------------------------------------------


def test_catalog_defaults():
    cat = load_catalog()
    assert cat.default_allowlist == ["YouTube", "Facebook", "Instagram", "Discord", "Twitter", "TikTok"]
    assert len(cat.entries) == 50
    assert "Google" not in cat.default_allowlist and "Amazon" not in cat.default_allowlist


def test_catalog_whole_word_and_case():
    cat = load_catalog()
    assert cat.mentions("I love tiktok!", ["TikTok"]) == ["TikTok"]
    assert cat.mentions("TikTokers everywhere", ["TikTok"]) == []


def test_homonym_needs_app_suffix():
    cat = load_catalog()
    homonyms = [e for e in cat.entries if not e.match_name]
    assert homonyms
    e = homonyms[0]
    assert cat.mentions(f"I saw {e.name} today", [e.name]) == []
    assert cat.mentions(f"the {e.aliases[0]} crashed", [e.name]) == [e.name]


def _corpus(*posts):
    return Corpus(tuple(posts))


def test_filter_drops_old_posts():
    old = make_post(id="old", created_utc=1_451_606_400, title="YouTube")  # 2016-01-01
    assert filter_corpus(_corpus(old), ["YouTube"], date(2018, 1, 1)).posts == ()


def test_filter_keeps_allowlisted_mention():
    allow = ["YouTube", "Facebook", "Instagram", "Discord", "Twitter", "TikTok"]
    p = make_post(created_utc=1_600_000_000, body="my TikTok feed")
    assert filter_corpus(_corpus(p), allow).posts == (p,)


def test_filter_boundary_midnight():
    at = make_post(id="at", created_utc=1_514_764_800, title="Discord")  # 2018-01-01T00:00:00Z
    before = make_post(id="before", created_utc=1_514_764_799, title="Discord")
    kept = filter_corpus(_corpus(before, at), ["Discord"])
    assert [p.id for p in kept.posts] == ["at"]


def test_filter_unknown_app():
    with pytest.raises(ConfigError):
        filter_corpus(_corpus(make_post()), ["NoSuchApp"])


def test_filter_idempotent_subset_and_ordered():
    posts = [make_post(id=f"p{i}", title=t) for i, t in enumerate(["YouTube", "nothing", "Twitter", "Discord"])]
    once = filter_corpus(_corpus(*posts), ["YouTube", "Discord"])
    twice = filter_corpus(once, ["YouTube", "Discord"])
    assert once.posts == twice.posts
    assert [p.id for p in once.posts] == ["p0", "p3"]


# -- stratified sample -------------------------------------------------------


def _strata(posts, community, domain):
    return {p.id: StratumKey(community, domain) for p in posts}


def test_two_full_strata():
    a = [make_post(id=f"a{i}") for i in range(5)]
    b = [make_post(id=f"b{i}") for i in range(5)]
    strata = {**_strata(a, "c", Domain.BUSINESS), **_strata(b, "c", Domain.SHOPPING)}
    res = stratified_sample(a + b, strata, 3, seed=1)
    assert len(res.posts) == 6
    assert res.counts == {StratumKey("c", Domain.BUSINESS): 3, StratumKey("c", Domain.SHOPPING): 3}
    assert res.shortfalls == {}


def test_refill_from_same_community_seed0():
    a = [make_post(id="a0")]
    b = [make_post(id=f"b{i}") for i in range(10)]
    strata = {**_strata(a, "c", Domain.BUSINESS), **_strata(b, "c", Domain.ENTERTAINMENT)}
    res = stratified_sample(a + b, strata, 3, seed=0)
    # hand enumeration: one RNG, A's pool shuffled first, then B's id-sorted pool;
    # A gives its single post, B its first 3, then round-robin refill takes B's next 2
    rng = random.Random(0)
    pool_a = ["a0"]
    rng.shuffle(pool_a)
    pool_b = sorted(p.id for p in b)
    rng.shuffle(pool_b)
    assert [p.id for p in res.posts] == ["a0"] + pool_b[:5]
    assert res.counts[StratumKey("c", Domain.BUSINESS)] == 1
    assert res.counts[StratumKey("c", Domain.ENTERTAINMENT)] == 5
    assert res.shortfalls == {}


def test_round_robin_alternates_domains():
    a = [make_post(id="a0")]
    b = [make_post(id=f"b{i}") for i in range(6)]
    c = [make_post(id=f"c{i}") for i in range(6)]
    strata = {**_strata(a, "k", Domain.BUSINESS), **_strata(b, "k", Domain.ENTERTAINMENT),
              **_strata(c, "k", Domain.SHOPPING)}
    res = stratified_sample(a + b + c, strata, 3, seed=3)
    assert res.counts[StratumKey("k", Domain.ENTERTAINMENT)] == 4
    assert res.counts[StratumKey("k", Domain.SHOPPING)] == 4


def test_empty_community_reported_not_aborted():
    a = [make_post(id=f"a{i}") for i in range(4)]
    strata = _strata(a, "full", Domain.BUSINESS)
    res = stratified_sample(a, strata, 2, seed=0, expected=[StratumKey("empty", Domain.SOCIAL_MEDIA)])
    assert len(res.posts) == 2
    assert res.shortfalls == {StratumKey("empty", Domain.SOCIAL_MEDIA): 2}


def test_sample_deterministic():
    posts = [make_post(id=f"p{i:02d}") for i in range(30)]
    strata = {p.id: StratumKey("c", list(Domain)[i % 5]) for i, p in enumerate(posts)}
    one = stratified_sample(posts, strata, 4, seed=9)
    two = stratified_sample(list(reversed(posts)), strata, 4, seed=9)
    assert one == two


@given(st.lists(st.integers(0, 4), min_size=1, max_size=40), st.integers(0, 10**6))
def test_sample_takes_everything_when_quota_large(domains, seed):
    posts = [make_post(id=f"p{i:03d}") for i in range(len(domains))]
    strata = {p.id: StratumKey("c", list(Domain)[d]) for p, d in zip(posts, domains)}
    res = stratified_sample(posts, strata, len(posts), seed)
    ids = [p.id for p in res.posts]
    assert sorted(ids) == sorted(p.id for p in posts)
    assert len(ids) == len(set(ids))


def test_per_stratum_must_be_positive():
    with pytest.raises(ValueError):
        stratified_sample([], {}, 0, seed=0)

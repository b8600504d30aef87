import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from concernkit.corpus import RawPost  # noqa: E402


def make_post(id="p1", subreddit="r", created_utc=1_600_000_000, title="t", body="b",
              upvotes=0, upvote_ratio=0.5, num_comments=0) -> RawPost:
    return RawPost(id, subreddit, created_utc, title, body, upvotes, upvote_ratio, num_comments)


@pytest.fixture
def post_factory():
    return make_post


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])

"""Process-wide call counters used to verify which code paths ran."""

from collections import Counter

CALLS = Counter()


def reset():
    CALLS.clear()

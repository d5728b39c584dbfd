import pytest

from crisismatch.dataio import few_shot_sample, synthetic_dataset, synthetic_lexicon_entries, synthetic_schema
from crisismatch.textprep import SynonymLexicon

# One measured verdict line per shipping criterion, filled in by
# test_acceptance.py and echoed after the run so the numbers survive
# pytest's output capture.
GATE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if GATE_LINES:
        terminalreporter.section("shipping criteria")
        for line in GATE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_task():
    """Small three-class synthetic problem shared by training-level tests."""
    schema = synthetic_schema(3)
    pool, dev, test = synthetic_dataset(3, 180, 45, 45, seed=0, label_noise=0.1)
    lexicon = SynonymLexicon(synthetic_lexicon_entries(3, 50))
    return schema, pool, dev, test, lexicon


@pytest.fixture
def tiny_view(tiny_task):
    schema, pool, _, _, _ = tiny_task
    return few_shot_sample(pool, schema, 3, seed=0)

import pytest

from emmpd.bagio import SyntheticSpec, generate_synthetic

TINY = dict(num_patients=24, d=48, patches_per_slide=(40, 56), slides_per_patient=(1, 2), seed=3)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """A small cohort shared by the training and CLI tests."""
    return generate_synthetic(SyntheticSpec(**TINY), tmp_path_factory.mktemp("tiny"))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)

import pytest

from htdc import Candidate, CandidateSet


@pytest.fixture
def yes_no() -> CandidateSet:
    return CandidateSet(candidates=(Candidate("yes", (3,)), Candidate("no", (5,))))

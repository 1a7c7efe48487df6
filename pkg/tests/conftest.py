import pytest

from bulkdiff.fields import ConstantField, CrowdingField


@pytest.fixture
def crowding():
    return CrowdingField(lam=2.0, r=0.25)


@pytest.fixture
def constant():
    return ConstantField(c=1.5)

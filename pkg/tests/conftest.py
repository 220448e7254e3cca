import pytest

from ccledger import crypto


@pytest.fixture
def service_key():
    return crypto.SigningKey.generate()


@pytest.fixture
def data_key():
    return crypto.random_bytes(crypto.KEY_LEN)

import numpy as np
import pytest

from dqm import dataset, synthetic
from dqm.classify import LDAClassifier


@pytest.fixture(scope="session")
def raw_small():
    return synthetic.generate_records(6000, seed=11)


@pytest.fixture(scope="session")
def schema_small(raw_small):
    return dataset.build_schema(raw_small)


@pytest.fixture(scope="session")
def encoded_small(raw_small, schema_small):
    return dataset.encode_records(raw_small, schema_small)


@pytest.fixture(scope="session")
def lda_small(encoded_small):
    return LDAClassifier().fit(*dataset.to_arrays(encoded_small))


def gaussian_pair(n=200, mu0=(0.0, 0.0), mu1=(10.0, 10.0), seed=0):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(mu0, 1.0, (n, len(mu0))), rng.normal(mu1, 1.0, (n, len(mu1)))])
    y = np.r_[np.zeros(n, int), np.ones(n, int)]
    return X, y

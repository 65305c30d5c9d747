import numpy as np
import pytest

# hand-enumerated: (smiles, atoms, bonds, tokens excluding CLS)
CURATED_CORPUS = [
    ("C", 1, 0, 1),
    ("CCO", 3, 2, 3),
    ("C1=CC=C(C=C1)O", 7, 7, 14),
    ("C1CC1", 3, 3, 5),
    ("[NH4+]", 1, 0, 1),
    ("c1ccccc1", 6, 6, 8),
    ("CC(=O)O", 4, 3, 7),
    ("C#N", 2, 1, 3),
    ("ClCCl", 3, 2, 3),
    ("CBr", 2, 1, 2),
    ("C%10CC%10", 3, 3, 5),
    ("[NH3+]CC([O-])=O", 5, 4, 8),
    ("c1ccncc1", 6, 6, 8),
    ("O=C=O", 3, 2, 5),
    ("CN1CCC1", 5, 5, 7),
    ("C/C=C/C", 4, 3, 7),
    ("N#Cc1ccccc1", 8, 8, 11),
    ("[13CH4]", 1, 0, 1),
    ("CC(C)(C)O", 5, 4, 9),
    ("OCC(O)CO", 6, 5, 8),
]


@pytest.fixture(scope="session")
def corpus():
    return CURATED_CORPUS


@pytest.fixture(scope="session")
def corpus_smiles():
    return [row[0] for row in CURATED_CORPUS]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

import numpy as np
import pytest

from multigrid_dl.data_synth import DigitBank


def blob_digit(label, size=28):
    """a filled bar/box shape whose geometry depends on the label"""
    digit = np.zeros((size, size))
    top, left = 6 + label % 3, 8 + label % 4
    digit[top:top + 14, left:left + 4 + label % 5] = 1.0
    digit[top:top + 3, left:left + 10] = 0.8
    return digit


@pytest.fixture
def digit_bank():
    labels = np.arange(10)
    return DigitBank(np.stack([blob_digit(k) for k in labels]), labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

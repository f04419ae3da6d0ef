import numpy as np
import pytest

from kpreward.imaging import textured_image


@pytest.fixture
def textured():
    def make(w, h, seed):
        return textured_image(w, h, np.random.default_rng(seed))
    return make

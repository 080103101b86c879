import numpy as np
import pytest

from xpl.model import BackboneSpec, init_params


@pytest.fixture
def two_small_models():
    """Two tiny distinct encoder pairs plus a 4-sample batch of features."""
    spec_a = BackboneSpec(hidden_widths=(6,), embed_dim=4, init_seed=11).resolve(5, 3)
    spec_b = BackboneSpec(hidden_widths=(5,), embed_dim=4, init_seed=22).resolve(5, 3)
    rng = np.random.default_rng(99)
    batch = {
        "grids": rng.normal(size=(4, 3, 2, 5)),
        "audios": rng.normal(size=(4, 3)),
        "masks": (rng.uniform(size=(4, 3, 2)) > 0.6).astype(float),
    }
    return init_params(spec_a), init_params(spec_b), batch

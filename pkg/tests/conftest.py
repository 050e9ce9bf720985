import numpy as np
import pytest

from blockattn.attention import AttentionState
from blockattn.layout import RaggedTensor

@pytest.fixture
def rng():
	return np.random.default_rng(0)

@pytest.fixture
def make_ragged(rng):
	"""Standard-normal ragged tensor of (sum(lengths), heads, dim)."""
	def _make(lengths, heads, dim, dtype=np.float32):
		data = rng.standard_normal((int(sum(lengths)), heads, dim)).astype(dtype)
		return RaggedTensor.from_lengths(data, lengths)
	return _make

@pytest.fixture
def make_state(rng):
	"""Random finite state of `rows` rows in double precision."""
	def _make(dim=8, rows=(), scale=3.0):
		return AttentionState(
			rng.standard_normal((*rows, dim)),
			rng.standard_normal(rows) * scale,
		)
	return _make

import os
import hashlib

import numpy as np

from blockattn.config import Defaults

def fingerprint(*parts) -> str:
	"""
	Return a hex digest hashed from the given parts.
	Arrays contribute their dtype, shape and raw bytes; everything else its repr.
	"""
	h = hashlib.sha1()
	for p in parts:
		if isinstance(p, np.ndarray):
			arr = np.ascontiguousarray(p)
			h.update(f"{arr.dtype.str}{arr.shape}".encode("utf-8"))
			h.update(arr.tobytes())
		else:
			h.update(repr(p).encode("utf-8"))
		# Separator so ("ab", "c") and ("a", "bc") differ
		h.update(b"\x1f")
	return h.hexdigest()

def resolve_num_workers(num_workers:int|None=None) -> int:
	"""
	Worker count: explicit argument, then the environment override, then the CPU count.
	"""
	if num_workers is not None:
		if num_workers < 1:
			raise ValueError(f"num_workers must be positive, got {num_workers}")
		return num_workers
	env = os.environ.get(Defaults.num_workers_env)
	if env:
		try:
			value = int(env)
		except ValueError as e:
			raise ValueError(f"{Defaults.num_workers_env}={env!r} is not an integer") from e
		if value < 1:
			raise ValueError(f"{Defaults.num_workers_env} must be positive, got {value}")
		return value
	return os.cpu_count() or 1

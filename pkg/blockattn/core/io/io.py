import json
from pathlib import Path
from typing import Any

import numpy as np

from blockattn.config import Defaults

# Little-endian header: magic, version, four dims (unused trailing dims are 0)
FIKV_HEADER = np.dtype([
	("magic", "S4"),
	("version", "<u4"),
	("dims", "<u4", (4,)),
])
# Payload element type per version
FIKV_DTYPES = {
	1: np.dtype("<f4"),
	2: np.dtype("<f8"),
}

def save_tensor(path:str|Path, data:np.ndarray) -> Path:
	"""Write a tensor as a FIKV binary dump.

	Float64 arrays are written as version 2, everything else is cast to float32 (version 1).

	Returns:
		The written path.
	"""
	p = Path(path)
	arr = np.asarray(data)
	if arr.ndim < 1 or arr.ndim > 4:
		raise ValueError(f"FIKV stores 1 to 4 dims, got shape {arr.shape}")
	if 0 in arr.shape:
		raise ValueError(f"FIKV cannot store zero-length axes, got shape {arr.shape}")
	version = 2 if arr.dtype == np.float64 else Defaults.fikv_version

	header = np.zeros((), dtype=FIKV_HEADER)
	header["magic"] = Defaults.fikv_magic
	header["version"] = version
	header["dims"][:arr.ndim] = arr.shape

	p.parent.mkdir(parents=True, exist_ok=True)
	with open(p, "wb") as f:
		f.write(header.tobytes())
		f.write(np.ascontiguousarray(arr, dtype=FIKV_DTYPES[version]).tobytes())
	return p

def load_tensor(path:str|Path) -> np.ndarray:
	"""Read a FIKV binary dump.

	Raises IOError on missing files or malformed contents.
	"""
	p = Path(path)
	if not p.exists():
		raise IOError(f"File not found: {p}")

	raw = p.read_bytes()
	if len(raw) < FIKV_HEADER.itemsize:
		raise IOError(f"Truncated FIKV header in {p}")
	header = np.frombuffer(raw, dtype=FIKV_HEADER, count=1)[0]
	if header["magic"] != Defaults.fikv_magic:
		raise IOError(f"Bad magic {header['magic']!r} in {p}")
	version = int(header["version"])
	if version not in FIKV_DTYPES:
		raise IOError(f"Unsupported FIKV version {version} in {p}")

	dims = [int(d) for d in header["dims"]]
	shape = tuple(d for d in dims if d > 0)
	dtype = FIKV_DTYPES[version]
	payload = raw[FIKV_HEADER.itemsize:]
	expected = int(np.prod(shape)) * dtype.itemsize
	if len(payload) != expected:
		raise IOError(f"Payload of {p} has {len(payload)} bytes, header implies {expected}")
	return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()

def load_json(source:str|Path) -> Any:
	"""
	Parse inline JSON text, or the contents of a JSON file if `source` names one.
	"""
	text = str(source).strip()
	if text.startswith(("{", "[")):
		try:
			return json.loads(text)
		except json.JSONDecodeError as e:
			raise ValueError(f"Invalid inline JSON: {e}") from e
	p = Path(source)
	if not p.exists():
		raise IOError(f"File not found: {p}")
	try:
		return json.loads(p.read_text())
	except json.JSONDecodeError as e:
		raise IOError(f"Failed to parse {p}: {e}") from e

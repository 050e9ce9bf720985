from .io import save_tensor, load_tensor, load_json

__all__ = ["save_tensor", "load_tensor", "load_json"]

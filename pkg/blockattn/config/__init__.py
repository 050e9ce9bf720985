from .defaults import Defaults

__all__ = ["Defaults"]

from .state import RunStore

__all__ = ["RunStore"]

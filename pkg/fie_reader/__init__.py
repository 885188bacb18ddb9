__all__ = [
    "core",
]

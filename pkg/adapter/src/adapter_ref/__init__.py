"""Reference stdio adapter for the nucleus-detector wire protocol."""

from .server import AdapterConfig, StubBackend, serve

__version__ = "0.1.0"

__all__ = ["AdapterConfig", "StubBackend", "serve", "__version__"]

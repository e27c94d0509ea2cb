"""Dynamic-static layer-skipping inference engine and benchmark harness."""

__version__ = "0.1.0"

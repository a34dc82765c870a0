"""Scene-grid attention point-of-gaze estimation on a small numpy autodiff engine."""

__version__ = "0.1.0"

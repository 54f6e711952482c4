"""Scope-head object detection on a small numpy autodiff engine."""

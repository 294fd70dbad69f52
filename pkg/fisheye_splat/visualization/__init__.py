"""Depth previews and report figures."""

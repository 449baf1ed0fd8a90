"""Pytest root marker; keeps the tests directory importable (util.py)."""

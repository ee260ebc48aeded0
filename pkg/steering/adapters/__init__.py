"""Adapters for persisted artifacts."""

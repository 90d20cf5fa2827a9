"""Shipped model presets (TOML package data)."""

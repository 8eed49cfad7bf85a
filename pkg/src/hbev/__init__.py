"""Hindsight BEV traversability toolkit."""

"""Mismatch capacity of relay channels with an oblivious relay, by alternating maximization."""

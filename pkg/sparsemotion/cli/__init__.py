"""Command line entry points for sparse-motion."""

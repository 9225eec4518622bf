"""Rotation-only RPC refinement, DSM reconstruction and volume tracking for
satellite scene mosaics."""

__version__ = "0.1.0"

"""Test-time adaptation of a toy multi-object tracker via patch contrastive and detection consistency losses."""

__version__ = "0.1.0"

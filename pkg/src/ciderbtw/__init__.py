"""Caption distinctiveness toolkit: CIDEr-D, between-set CIDEr, similar sets, DCR weights."""

__version__ = "0.1.0"

"""Anchor-free underwater acoustic positioning for small groups of phones:
ranging waveforms, a TDM timestamp protocol and a 3D topology solver."""

__version__ = "0.1.0"

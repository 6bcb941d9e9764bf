"""Nanoscale spin localization by pulsed magnetic-field-gradient spectroscopy.

Simulate echo signals of electronic spins driven by gradient pulses from a wire
microstructure, then recover spin frequencies and positions from their spectra.
"""

__version__ = "0.1.0"

"""Single-molecule two-photon interference: simulation and analysis.

Time is in ns, frequencies (linewidths) in MHz, temperatures in K and
histogram bin widths in ps unless a name says otherwise.
"""

from molhom.model import (
    InterferencePolicy,
    InvalidParameterError,
    MoleculeParams,
    coalescence_probability,
    contrast,
    effective_visibility,
    excitation_spectrum,
    g2_cross,
    g2_molecule,
    g2_with_background,
    lifetime_limited_linewidth,
    t2_from_linewidth,
    zpl_linewidth,
)

__version__ = "0.1.0"

__all__ = [
    "InterferencePolicy",
    "InvalidParameterError",
    "MoleculeParams",
    "coalescence_probability",
    "contrast",
    "effective_visibility",
    "excitation_spectrum",
    "g2_cross",
    "g2_molecule",
    "g2_with_background",
    "lifetime_limited_linewidth",
    "t2_from_linewidth",
    "zpl_linewidth",
]

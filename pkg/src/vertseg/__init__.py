"""Multi-atlas vertebra segmentation: FFD registration with an NMI +
bending-energy objective, joint label fusion, morphological label
correction, and Dice/ASD evaluation."""

__version__ = "0.1.0"

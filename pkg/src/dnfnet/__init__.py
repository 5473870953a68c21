"""DNF-Net: soft-DNF ensembles with learned feature selection and localization."""

__version__ = "0.1.0"
